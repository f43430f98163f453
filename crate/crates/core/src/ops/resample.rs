//! Upsampling and bilinear backward warping.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpsampleMode {
    Nearest,
    Bilinear,
}

/// Two-tap interpolation weights for one output coordinate.
#[derive(Clone, Copy, Debug)]
struct Tap {
    i0: usize,
    i1: usize,
    w1: f64,
}

/// Half-pixel-centered taps with edge clamping.
fn taps(input: usize, factor: usize, mode: UpsampleMode) -> Vec<Tap> {
    (0..input * factor)
        .map(|o| match mode {
            UpsampleMode::Nearest => Tap {
                i0: o / factor,
                i1: o / factor,
                w1: 0.0,
            },
            UpsampleMode::Bilinear => {
                let src = ((o as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (input - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(input - 1);
                Tap {
                    i0,
                    i1,
                    w1: src - i0 as f64,
                }
            }
        })
        .collect()
}

fn check_factor(factor: usize) -> Result<()> {
    if factor == 2 || factor == 4 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "upsampling factor must be 2 or 4, got {factor}"
        )))
    }
}

/// Upsamples a plain tensor (no graph).
pub fn upsample_tensor<F: Real>(x: &Tensor<F>, factor: usize, mode: UpsampleMode) -> Result<Tensor<F>> {
    check_factor(factor)?;
    let [b, c, h, w] = x.shape().0;
    let (ty, tx) = (taps(h, factor, mode), taps(w, factor, mode));
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Tensor::zeros(Shape::new(b, c, oh, ow));
    let (xd, od) = (x.data(), out.data_mut());
    for bc in 0..b * c {
        let src = &xd[bc * h * w..(bc + 1) * h * w];
        let dst = &mut od[bc * oh * ow..(bc + 1) * oh * ow];
        for (oy, t) in ty.iter().enumerate() {
            let wy1 = F::lit(t.w1);
            let wy0 = F::one() - wy1;
            for (ox, s) in tx.iter().enumerate() {
                let wx1 = F::lit(s.w1);
                let wx0 = F::one() - wx1;
                let top = src[t.i0 * w + s.i0] * wx0 + src[t.i0 * w + s.i1] * wx1;
                let bot = src[t.i1 * w + s.i0] * wx0 + src[t.i1 * w + s.i1] * wx1;
                dst[oy * ow + ox] = top * wy0 + bot * wy1;
            }
        }
    }
    Ok(out)
}

/// Bilinear sample of one plane at continuous `(x, y)`, clamped to the border.
///
/// Returns the four corner offsets with their weights and the two partial
/// derivatives flags (false when the coordinate was clamped).
#[inline]
pub(crate) fn bilinear_tap(x: f64, y: f64, w: usize, h: usize) -> ([usize; 4], [f64; 4], f64, f64, bool, bool) {
    let max_x = (w - 1) as f64;
    let max_y = (h - 1) as f64;
    let in_x = x >= 0.0 && x <= max_x;
    let in_y = y >= 0.0 && y <= max_y;
    let cx = x.clamp(0.0, max_x);
    let cy = y.clamp(0.0, max_y);
    let x0 = cx.floor() as usize;
    let y0 = cy.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = cx - x0 as f64;
    let fy = cy - y0 as f64;
    (
        [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1],
        [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy],
        fx,
        fy,
        in_x,
        in_y,
    )
}

/// Per-pixel sampling geometry for a warp, shared by forward and backward.
struct WarpTaps<F> {
    idx: Vec<[usize; 4]>,
    wts: Vec<[F; 4]>,
    fx: Vec<F>,
    fy: Vec<F>,
    live_x: Vec<bool>,
    live_y: Vec<bool>,
}

fn warp_taps<F: Real>(flow: &Tensor<F>, h: usize, w: usize) -> WarpTaps<F> {
    let b = flow.shape().batch();
    let plane = h * w;
    let n = b * plane;
    let mut t = WarpTaps {
        idx: Vec::with_capacity(n),
        wts: Vec::with_capacity(n),
        fx: Vec::with_capacity(n),
        fy: Vec::with_capacity(n),
        live_x: Vec::with_capacity(n),
        live_y: Vec::with_capacity(n),
    };
    let fd = flow.data();
    for bi in 0..b {
        let dx = &fd[bi * 2 * plane..bi * 2 * plane + plane];
        let dy = &fd[bi * 2 * plane + plane..(bi + 1) * 2 * plane];
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let (idx, wts, fx, fy, in_x, in_y) =
                    bilinear_tap(x as f64 + dx[p].as_f64(), y as f64 + dy[p].as_f64(), w, h);
                t.idx.push(idx);
                t.wts.push(wts.map(F::lit));
                t.fx.push(F::lit(fx));
                t.fy.push(F::lit(fy));
                t.live_x.push(in_x);
                t.live_y.push(in_y);
            }
        }
    }
    t
}

fn check_flow(fs: Shape, xs: Shape) -> Result<()> {
    if fs.channels() != 2 || fs.batch() != xs.batch() || fs.height() != xs.height() || fs.width() != xs.width() {
        return Err(Error::Shape(format!(
            "flow {fs} does not match feature {xs} (expected [{}, 2, {}, {}])",
            xs.batch(),
            xs.height(),
            xs.width()
        )));
    }
    Ok(())
}

fn apply_taps<F: Real>(x: &Tensor<F>, t: &WarpTaps<F>) -> Tensor<F> {
    let [b, c, h, w] = x.shape().0;
    let plane = h * w;
    let mut out = Tensor::zeros(x.shape());
    let (xd, od) = (x.data(), out.data_mut());
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * plane;
            let src = &xd[base..base + plane];
            for p in 0..plane {
                let k = bi * plane + p;
                let (i, wt) = (&t.idx[k], &t.wts[k]);
                od[base + p] = src[i[0]] * wt[0] + src[i[1]] * wt[1] + src[i[2]] * wt[2] + src[i[3]] * wt[3];
            }
        }
    }
    out
}

/// Backward bilinear warp of a plain tensor (no graph).
pub fn warp_tensor<F: Real>(x: &Tensor<F>, flow: &Tensor<F>) -> Result<Tensor<F>> {
    let xs = x.shape();
    check_flow(flow.shape(), xs)?;
    Ok(apply_taps(x, &warp_taps(flow, xs.height(), xs.width())))
}

impl<F: Real> Graph<F> {
    /// Resizes by `factor` (2 or 4). Bilinear uses half-pixel centers with
    /// edge clamping, so it preserves the spatial mean.
    pub fn upsample(&self, x: Var, factor: usize, mode: UpsampleMode) -> Result<Var> {
        let vx = self.value(x);
        let out = upsample_tensor(&vx, factor, mode)?;
        let [b, c, h, w] = vx.shape().0;
        let shape = vx.shape();
        let (ty, tx) = (taps(h, factor, mode), taps(w, factor, mode));
        Ok(self.record(out, &[x], move |g, _| {
            let (oh, ow) = (h * factor, w * factor);
            let mut gx = Tensor::zeros(shape);
            let (gd, xd) = (g.data(), gx.data_mut());
            for bc in 0..b * c {
                let src = &gd[bc * oh * ow..(bc + 1) * oh * ow];
                let dst = &mut xd[bc * h * w..(bc + 1) * h * w];
                for (oy, t) in ty.iter().enumerate() {
                    let wy1 = F::lit(t.w1);
                    let wy0 = F::one() - wy1;
                    for (ox, s) in tx.iter().enumerate() {
                        let wx1 = F::lit(s.w1);
                        let wx0 = F::one() - wx1;
                        let v = src[oy * ow + ox];
                        dst[t.i0 * w + s.i0] += v * wy0 * wx0;
                        dst[t.i0 * w + s.i1] += v * wy0 * wx1;
                        dst[t.i1 * w + s.i0] += v * wy1 * wx0;
                        dst[t.i1 * w + s.i1] += v * wy1 * wx1;
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Backward warp: `out(u) = x(u + flow(u))`, bilinear, clamped to the
    /// border. `flow` is `(batch, 2, h, w)` holding (dx, dy) in pixels.
    pub fn warp(&self, x: Var, flow: Var) -> Result<Var> {
        let (vx, vf) = (self.value(x), self.value(flow));
        let xs = vx.shape();
        check_flow(vf.shape(), xs)?;
        let [b, c, h, w] = xs.0;
        let taps = warp_taps(&vf, h, w);
        let out = apply_taps(&vx, &taps);
        let fshape = vf.shape();
        Ok(self.record(out, &[x, flow], move |g, needs| {
            let plane = h * w;
            let gd = g.data();
            let mut gx = needs[0].then(|| Tensor::zeros(xs));
            let mut gf = needs[1].then(|| Tensor::zeros(fshape));
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * plane;
                    let src = &vx.data()[base..base + plane];
                    for p in 0..plane {
                        let k = bi * plane + p;
                        let go = gd[base + p];
                        let i = &taps.idx[k];
                        if let Some(gx) = gx.as_mut() {
                            let wt = &taps.wts[k];
                            let dst = &mut gx.data_mut()[base..base + plane];
                            dst[i[0]] += go * wt[0];
                            dst[i[1]] += go * wt[1];
                            dst[i[2]] += go * wt[2];
                            dst[i[3]] += go * wt[3];
                        }
                        if let Some(gf) = gf.as_mut() {
                            let (fx, fy) = (taps.fx[k], taps.fy[k]);
                            let fd = gf.data_mut();
                            if taps.live_x[k] {
                                let d = (src[i[1]] - src[i[0]]) * (F::one() - fy) + (src[i[3]] - src[i[2]]) * fy;
                                fd[bi * 2 * plane + p] += go * d;
                            }
                            if taps.live_y[k] {
                                let d = (src[i[2]] - src[i[0]]) * (F::one() - fx) + (src[i[3]] - src[i[1]]) * fx;
                                fd[bi * 2 * plane + plane + p] += go * d;
                            }
                        }
                    }
                }
            }
            vec![gx, gf]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Shape, v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn nearest_blocks() {
        let g = Graph::<f64>::new();
        let x = g.constant(t(Shape::new(1, 1, 2, 2), &[1., 2., 3., 4.]));
        let y = g.upsample(x, 2, UpsampleMode::Nearest).unwrap();
        assert_eq!(
            g.value(y).data(),
            &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
    }

    #[test]
    fn unsupported_factor() {
        let g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(Shape::new(1, 1, 2, 2)));
        assert!(g.upsample(x, 3, UpsampleMode::Bilinear).is_err());
    }

    #[test]
    fn warp_hand_cases() {
        let g = Graph::<f64>::new();
        let x = g.constant(t(Shape::new(1, 1, 2, 2), &[1., 2., 3., 4.]));
        let f = g.constant(t(Shape::new(1, 2, 2, 2), &[1., 1., 1., 1., 0., 0., 0., 0.]));
        let y = g.warp(x, f).unwrap();
        assert_eq!(g.value(y).data(), &[2., 2., 4., 4.]);

        let x = g.constant(t(Shape::new(1, 1, 1, 2), &[0., 1.]));
        let f = g.constant(t(Shape::new(1, 2, 1, 2), &[0.5, 0.5, 0., 0.]));
        let y = g.warp(x, f).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 1.0]);
    }

    #[test]
    fn warp_rejects_resolution_mismatch() {
        let g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(Shape::new(1, 3, 4, 4)));
        let f = g.constant(Tensor::zeros(Shape::new(1, 2, 2, 2)));
        assert!(g.warp(x, f).is_err());
    }
}
