//! Image and flow quality metrics. Images are `[-1, 1]` tensors and are
//! compared on the `[0, 1]` scale.

use crate::deform::FlowState;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Shape, Tensor};
use crate::warpkit::{flow_compose, soft_flow_expected};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn same_shape<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("metric inputs differ: {} vs {}", a.shape(), b.shape())));
    }
    Ok(())
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filter over the valid region of an `h x w` plane.
fn filter(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// SSIM of one single-channel plane pair with values in `[0, 1]`.
pub fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<f64> {
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    let k = gaussian_window();
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
    let mu_a = filter(a, h, w, &k);
    let mu_b = filter(b, h, w, &k);
    let aa = filter(&prod(a, a), h, w, &k);
    let bb = filter(&prod(b, b), h, w, &k);
    let ab = filter(&prod(a, b), h, w, &k);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mu_a.len() as f64)
}

fn unit_plane<F: Real>(t: &Tensor<F>, b: usize, c: usize) -> Vec<f64> {
    let s = t.shape();
    let n = s.plane();
    let start = (b * s.channels() + c) * n;
    t.data()[start..start + n].iter().map(|v| (v.as_f64() + 1.0) / 2.0).collect()
}

/// Per-item SSIM averaged over channels, `[-1, 1]` inputs.
pub fn ssim<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Vec<f64>> {
    same_shape(a, b)?;
    let [n, c, h, w] = a.shape().0;
    (0..n)
        .map(|i| {
            let mut s = 0.0;
            for ch in 0..c {
                s += ssim_plane(&unit_plane(a, i, ch), &unit_plane(b, i, ch), h, w)?;
            }
            Ok(s / c as f64)
        })
        .collect()
}

/// Per-item mean absolute error on the `[0, 1]` scale.
pub fn l1<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Vec<f64>> {
    same_shape(a, b)?;
    let n = a.shape().batch();
    let per = a.numel() / n;
    Ok((0..n)
        .map(|i| {
            let r = i * per..(i + 1) * per;
            a.data()[r.clone()]
                .iter()
                .zip(&b.data()[r])
                .map(|(x, y)| (x.as_f64() - y.as_f64()).abs() / 2.0)
                .sum::<f64>()
                / per as f64
        })
        .collect())
}

/// Block-averages a full-resolution flow over valid pixels and rescales it
/// to the coarse pixel grid. A coarse cell is valid when at least half of
/// its pixels are.
pub fn downsample_flow<F: Real>(flow: &Tensor<F>, mask: &Tensor<F>, factor: usize) -> Result<(Tensor<f64>, Tensor<f64>)> {
    let [b, c, h, w] = flow.shape().0;
    if c != 2 || mask.shape() != Shape::new(b, 1, h, w) || h % factor != 0 || w % factor != 0 {
        return Err(Error::Shape(format!(
            "cannot downsample flow {} with mask {} by {factor}",
            flow.shape(),
            mask.shape()
        )));
    }
    let (oh, ow) = (h / factor, w / factor);
    let mut out = Tensor::zeros(Shape::new(b, 2, oh, ow));
    let mut valid = Tensor::zeros(Shape::new(b, 1, oh, ow));
    for n in 0..b {
        for y in 0..oh {
            for x in 0..ow {
                let (mut dx, mut dy, mut k) = (0.0, 0.0, 0usize);
                for yy in y * factor..(y + 1) * factor {
                    for xx in x * factor..(x + 1) * factor {
                        if mask.at(n, 0, yy, xx).as_f64() > 0.5 {
                            dx += flow.at(n, 0, yy, xx).as_f64();
                            dy += flow.at(n, 1, yy, xx).as_f64();
                            k += 1;
                        }
                    }
                }
                if 2 * k >= factor * factor {
                    let s = (k * factor) as f64;
                    out.set(n, 0, y, x, dx / s);
                    out.set(n, 1, y, x, dy / s);
                    valid.set(n, 0, y, x, 1.0);
                }
            }
        }
    }
    Ok((out, valid))
}

/// Per-item mean endpoint error over cells where `mask` is set; `None` for
/// items without valid cells.
pub fn epe<F: Real>(pred: &Tensor<F>, gt: &Tensor<f64>, mask: &Tensor<f64>) -> Result<Vec<Option<f64>>> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape(format!("flow shapes differ: {} vs {}", pred.shape(), gt.shape())));
    }
    let [b, _, h, w] = gt.shape().0;
    Ok((0..b)
        .map(|n| {
            let (mut s, mut k) = (0.0, 0usize);
            for y in 0..h {
                for x in 0..w {
                    if mask.at(n, 0, y, x) > 0.5 {
                        let dx = pred.at(n, 0, y, x).as_f64() - gt.at(n, 0, y, x);
                        let dy = pred.at(n, 1, y, x).as_f64() - gt.at(n, 1, y, x);
                        s += (dx * dx + dy * dy).sqrt();
                        k += 1;
                    }
                }
            }
            (k > 0).then(|| s / k as f64)
        })
        .collect())
}

/// Per-item mean horizontal displacement over cells where `mask` is set
/// (all cells when `mask` is `None`).
pub fn mean_dx<F: Real>(flow: &Tensor<F>, mask: Option<&Tensor<f64>>) -> Vec<Option<f64>> {
    let [b, _, h, w] = flow.shape().0;
    (0..b)
        .map(|n| {
            let (mut s, mut k) = (0.0, 0usize);
            for y in 0..h {
                for x in 0..w {
                    if mask.is_none_or(|m| m.at(n, 0, y, x) > 0.5) {
                        s += flow.at(n, 0, y, x).as_f64();
                        k += 1;
                    }
                }
            }
            (k > 0).then(|| s / k as f64)
        })
        .collect()
}

/// Quarter-resolution flow implied by the soft stage: the KG pre-warp
/// followed by the expected soft displacement.
pub fn learned_quarter_flow<F: Real>(g: &Graph<F>, state: &FlowState) -> Result<Var> {
    let soft = soft_flow_expected(g, &state.soft)?;
    flow_compose(g, state.kg_flow, soft)
}
