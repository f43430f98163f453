//! Flow fields and the warping kernels built on them.
//!
//! Flows are backward-sampling offsets in pixels: the output at `u` samples
//! the input at `u + flow(u)`, i.e. flows point from the target to the
//! source. A flow tensor has shape `(batch, 2, h, w)` with `dx` in channel 0
//! and `dy` in channel 1.
//!
//! A soft flow is the `(h*w) x (h*w)` attention matrix between a target and
//! a source feature map, stored as `(batch, 1, h*w, h*w)` with row `u`
//! holding the weights of target position `u` over all source positions.

use std::f64::consts::PI;
use std::rc::Rc;

use crate::checkpoint::Record;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::imageio::RgbImage;
use crate::ops::{Axis, UpsampleMode};
use crate::tensor::{Real, Shape, Tensor};

/// Default temperature of the spatial and channel softmax.
pub const DEFAULT_TAU: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Resolution {
    Full,
    Half,
    Quarter,
}

impl Resolution {
    pub fn factor(self) -> usize {
        match self {
            Resolution::Full => 1,
            Resolution::Half => 2,
            Resolution::Quarter => 4,
        }
    }

    /// Resolution tag of an `extent`-sized map for an `image_size` image.
    pub fn of(image_size: usize, extent: usize) -> Option<Self> {
        [Resolution::Full, Resolution::Half, Resolution::Quarter]
            .into_iter()
            .find(|r| image_size == extent * r.factor())
    }

    pub fn tag(self) -> &'static str {
        match self {
            Resolution::Full => "full",
            Resolution::Half => "half",
            Resolution::Quarter => "quarter",
        }
    }
}

/// A flow tensor outside any graph, with its resolution tag.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField<F> {
    tensor: Tensor<F>,
    resolution: Resolution,
}

impl<F: Real> FlowField<F> {
    pub fn new(tensor: Tensor<F>, resolution: Resolution) -> Result<Self> {
        if tensor.shape().channels() != 2 {
            return Err(Error::Shape(format!("flow needs 2 channels, got {}", tensor.shape())));
        }
        if !tensor.all_finite() {
            return Err(Error::NonFinite("flow field".into()));
        }
        Ok(FlowField { tensor, resolution })
    }

    pub fn zeros(batch: usize, h: usize, w: usize, resolution: Resolution) -> Self {
        FlowField {
            tensor: Tensor::zeros(Shape::new(batch, 2, h, w)),
            resolution,
        }
    }

    /// Constant `(dx, dy)` everywhere.
    pub fn constant(batch: usize, h: usize, w: usize, dx: f64, dy: f64, resolution: Resolution) -> Self {
        let mut f = Self::zeros(batch, h, w, resolution);
        let plane = h * w;
        for b in 0..batch {
            let d = f.tensor.data_mut();
            d[b * 2 * plane..b * 2 * plane + plane].fill(F::lit(dx));
            d[b * 2 * plane + plane..(b + 1) * 2 * plane].fill(F::lit(dy));
        }
        f
    }

    pub fn tensor(&self) -> &Tensor<F> {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor<F> {
        self.tensor
    }

    pub fn resolution(&self) -> Resolution {
        self.resolution
    }

    pub fn shape(&self) -> Shape {
        self.tensor.shape()
    }

    pub fn dx(&self, b: usize, y: usize, x: usize) -> F {
        self.tensor.at(b, 0, y, x)
    }

    pub fn dy(&self, b: usize, y: usize, x: usize) -> F {
        self.tensor.at(b, 1, y, x)
    }

    /// Record for the checkpoint archive format.
    pub fn to_record(&self, tag: &str) -> Record {
        Record {
            name: tag.to_string(),
            tensor: self.tensor.cast(),
        }
    }
}

fn check_same(what: &str, a: Shape, b: Shape) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{what}: {a} vs {b}")));
    }
    Ok(())
}

/// Bilinear backward warp with border clamping.
pub fn hard_warp<F: Real>(g: &Graph<F>, feature: Var, flow: Var) -> Result<Var> {
    g.warp(feature, flow)
}

/// Flow predicted by convolving `feature` with a per-sample kernel taken
/// from `w_diff` (`(batch, 2*c*k*k, 1, 1)`), without bias.
pub fn kg_conv<F: Real>(g: &Graph<F>, feature: Var, w_diff: Var, k: usize) -> Result<Var> {
    let [b, c, h, w] = g.shape(feature).0;
    let sw = g.shape(w_diff);
    let expected = 2 * c * k * k;
    if sw.batch() != b || sw.numel() != b * expected {
        return Err(Error::Shape(format!(
            "kernel vector {sw} does not fit feature [{b}, {c}, {h}, {w}] with k={k}: expected length {expected} per sample"
        )));
    }
    let patches = if k == 1 {
        g.reshape(feature, Shape::new(b, 1, c, h * w))?
    } else {
        g.unfold(feature, k)?
    };
    let kernel = g.reshape(w_diff, Shape::new(b, 1, 2, c * k * k))?;
    let flow = g.bmm(kernel, patches, false, false)?;
    g.reshape(flow, Shape::new(b, 2, h, w))
}

/// Attention between target `f_g` and source `f_e_tilde`, with the softmax
/// already applied per row.
#[derive(Clone, Copy, Debug)]
pub struct SoftFlow {
    pub weights: Var,
    pub tau: f64,
    pub height: usize,
    pub width: usize,
}

impl SoftFlow {
    pub fn positions(&self) -> usize {
        self.height * self.width
    }
}

/// Centralized inner products `g_u . e_v` per position pair, row softmax at `tau`.
pub fn soft_flow<F: Real>(g: &Graph<F>, f_e_tilde: Var, f_g: Var, tau: f64) -> Result<SoftFlow> {
    let se = g.shape(f_e_tilde);
    check_same("soft flow features", se, g.shape(f_g))?;
    let [b, c, h, w] = se.0;
    let e = g.center(f_e_tilde, Axis::Channel);
    let t = g.center(f_g, Axis::Channel);
    let e = g.reshape(e, Shape::new(b, 1, c, h * w))?;
    let t = g.reshape(t, Shape::new(b, 1, c, h * w))?;
    let logits = g.bmm(t, e, true, false)?;
    let weights = g.softmax(logits, Axis::Row, tau)?;
    Ok(SoftFlow {
        weights,
        tau,
        height: h,
        width: w,
    })
}

/// Identity soft flow (one-hot diagonal) for a `batch` of `h x w` maps.
pub fn identity_soft_flow<F: Real>(g: &Graph<F>, batch: usize, h: usize, w: usize, tau: f64) -> SoftFlow {
    let n = h * w;
    let mut t = Tensor::zeros(Shape::new(batch, 1, n, n));
    for b in 0..batch {
        for i in 0..n {
            t.set(b, 0, i, i, F::one());
        }
    }
    SoftFlow {
        weights: g.constant(t),
        tau,
        height: h,
        width: w,
    }
}

/// `F_sp(u) = sum_v sf(u, v) * f(:, v)`.
pub fn soft_spatial_warp<F: Real>(g: &Graph<F>, f_e_tilde: Var, sf: &SoftFlow) -> Result<Var> {
    let [b, c, h, w] = g.shape(f_e_tilde).0;
    if h * w != sf.positions() || g.shape(sf.weights).batch() != b {
        return Err(Error::Shape(format!(
            "soft flow over {}x{} positions does not fit feature [{b}, {c}, {h}, {w}]",
            sf.height, sf.width
        )));
    }
    let e = g.reshape(f_e_tilde, Shape::new(b, 1, c, h * w))?;
    let out = g.bmm(e, sf.weights, false, true)?;
    g.reshape(out, Shape::new(b, c, h, w))
}

/// Channel-to-channel affinity between `f_sp` and `f_g` (spatially centered
/// inner products), row softmax at `tau`; shape `(batch, 1, c, c)`.
pub fn channel_affinity<F: Real>(g: &Graph<F>, f_sp: Var, f_g: Var, tau: f64) -> Result<Var> {
    let s = g.shape(f_sp);
    check_same("channel affinity features", s, g.shape(f_g))?;
    let [b, c, h, w] = s.0;
    let a = g.center(f_sp, Axis::Spatial);
    let t = g.center(f_g, Axis::Spatial);
    let a = g.reshape(a, Shape::new(b, 1, c, h * w))?;
    let t = g.reshape(t, Shape::new(b, 1, c, h * w))?;
    let cov = g.bmm(a, t, false, true)?;
    g.softmax(cov, Axis::Row, tau)
}

/// Mixes the channels of `f_sp` with the affinity rows against `f_g`.
pub fn channel_soft_warp<F: Real>(g: &Graph<F>, f_sp: Var, f_g: Var, tau: f64) -> Result<Var> {
    let [b, c, h, w] = g.shape(f_sp).0;
    let cov = channel_affinity(g, f_sp, f_g, tau)?;
    let x = g.reshape(f_sp, Shape::new(b, 1, c, h * w))?;
    let out = g.bmm(cov, x, false, false)?;
    g.reshape(out, Shape::new(b, c, h, w))
}

/// Index map taking a `(b, c, rh, rw)` map to `(b, 1, c*r*r, h*w)` columns,
/// one column per coarse cell holding its `r x r` block of every channel.
fn block_index(shape: Shape, r: usize) -> Vec<usize> {
    let [b, c, hh, wh] = shape.0;
    let (h, w) = (hh / r, wh / r);
    let mut idx = Vec::with_capacity(shape.numel());
    for bi in 0..b {
        for ci in 0..c {
            for dy in 0..r {
                for dx in 0..r {
                    for cy in 0..h {
                        for cx in 0..w {
                            idx.push(((bi * c + ci) * hh + cy * r + dy) * wh + cx * r + dx);
                        }
                    }
                }
            }
        }
    }
    idx
}

fn invert(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Applies a coarse soft flow to a finer map: the output block at coarse
/// cell `u` is `sum_v sf(u, v) * block(v)`.
pub fn soft_flow_apply_blockwise<F: Real>(g: &Graph<F>, feature_hi: Var, sf: &SoftFlow) -> Result<Var> {
    let s = g.shape(feature_hi);
    let [b, c, hh, wh] = s.0;
    if hh % sf.height != 0 || wh % sf.width != 0 || hh / sf.height != wh / sf.width || hh < sf.height {
        return Err(Error::Shape(format!(
            "feature {s} is not an integer multiple of the {}x{} soft-flow grid",
            sf.height, sf.width
        )));
    }
    let r = hh / sf.height;
    let perm = block_index(s, r);
    let inv = invert(&perm);
    let rows = c * r * r;
    let cols = g.gather(feature_hi, Rc::new(perm), Shape::new(b, 1, rows, sf.positions()))?;
    let moved = g.bmm(cols, sf.weights, false, true)?;
    g.gather(moved, Rc::new(inv), s)
}

/// Bilinear upsampling with offsets rescaled to the new pixel units.
pub fn flow_upscale<F: Real>(g: &Graph<F>, flow: Var, factor: usize) -> Result<Var> {
    let up = g.upsample(flow, factor, UpsampleMode::Bilinear)?;
    Ok(g.scale(up, factor as f64))
}

/// Flow equivalent to warping by `prior` and then by `residual`:
/// `residual(u) + prior(u + residual(u))`.
pub fn flow_compose<F: Real>(g: &Graph<F>, prior: Var, residual: Var) -> Result<Var> {
    check_same("flow compose", g.shape(prior), g.shape(residual))?;
    let moved = g.warp(prior, residual)?;
    g.add(residual, moved)
}

/// Mean `(dx, dy)` over batch and positions, shape `(1, 2, 1, 1)`.
pub fn flow_mean<F: Real>(g: &Graph<F>, flow: Var) -> Var {
    g.mean_axes(flow, [true, false, true, true])
}

/// Mean `(dx, dy)` over positions per batch item, shape `(batch, 2, 1, 1)`.
pub fn flow_mean_per_item<F: Real>(g: &Graph<F>, flow: Var) -> Var {
    g.mean_axes(flow, [false, false, true, true])
}

/// Pixel grid as `(1, 1, h*w, 2)` rows of `(x, y)`.
fn grid_rows<F: Real>(h: usize, w: usize) -> Tensor<F> {
    let mut t = Tensor::zeros(Shape::new(1, 1, h * w, 2));
    for y in 0..h {
        for x in 0..w {
            t.set(0, 0, y * w + x, 0, F::lit(x as f64));
            t.set(0, 0, y * w + x, 1, F::lit(y as f64));
        }
    }
    t
}

/// Expected displacement of every target cell under the soft flow,
/// `sum_v sf(u, v) * (v - u)`, as a `(batch, 2, h, w)` flow.
pub fn soft_flow_expected<F: Real>(g: &Graph<F>, sf: &SoftFlow) -> Result<Var> {
    let (h, w) = (sf.height, sf.width);
    let b = g.shape(sf.weights).batch();
    let pos = g.constant(grid_rows(h, w));
    let target = g.bmm(pos, sf.weights, true, true)?;
    let target = g.reshape(target, Shape::new(b, 2, h, w))?;
    let mut grid = Tensor::zeros(Shape::new(1, 2, h, w));
    for y in 0..h {
        for x in 0..w {
            grid.set(0, 0, y, x, F::lit(x as f64));
            grid.set(0, 1, y, x, F::lit(y as f64));
        }
    }
    let grid = g.constant(grid);
    g.sub(target, grid)
}

/// Hard flow of the most attended source cell per target cell.
pub fn soft_flow_argmax<F: Real>(weights: &Tensor<F>, h: usize, w: usize) -> FlowField<F> {
    let b = weights.shape().batch();
    let n = h * w;
    let mut flow = FlowField::zeros(b, h, w, Resolution::Quarter);
    for bi in 0..b {
        for u in 0..n {
            let row = &weights.data()[(bi * n + u) * n..(bi * n + u + 1) * n];
            let (mut best, mut arg) = (F::neg_infinity(), 0);
            for (v, &p) in row.iter().enumerate() {
                if p > best {
                    best = p;
                    arg = v;
                }
            }
            let (uy, ux) = (u / w, u % w);
            let (vy, vx) = (arg / w, arg % w);
            flow.tensor.set(bi, 0, uy, ux, F::lit(vx as f64 - ux as f64));
            flow.tensor.set(bi, 1, uy, ux, F::lit(vy as f64 - uy as f64));
        }
    }
    flow
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let sector = h6.floor() as i32 % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    let (r, g, b) = match sector {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    let byte = |x: f64| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
    [byte(r), byte(g), byte(b)]
}

/// Color-wheel rendering of batch item `index`: direction selects the hue,
/// magnitude relative to `max_norm` (default: the largest magnitude in the
/// item) selects the saturation. Zero flow is white.
pub fn flow_viz_encode<F: Real>(flow: &FlowField<F>, index: usize, max_norm: Option<f64>) -> RgbImage {
    let [_, _, h, w] = flow.shape().0;
    let mag = |y: usize, x: usize| {
        let (dx, dy) = (flow.dx(index, y, x).as_f64(), flow.dy(index, y, x).as_f64());
        (dx, dy, (dx * dx + dy * dy).sqrt())
    };
    let norm = max_norm.unwrap_or_else(|| {
        (0..h)
            .flat_map(|y| (0..w).map(move |x| (y, x)))
            .map(|(y, x)| mag(y, x).2)
            .fold(0.0, f64::max)
    });
    let mut img = RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let (dx, dy, m) = mag(y, x);
            let rgb = if m == 0.0 || norm <= 0.0 {
                [255, 255, 255]
            } else {
                let hue = (dy.atan2(dx) + PI) / (2.0 * PI);
                hsv_to_rgb(hue, (m / norm).min(1.0), 1.0)
            };
            img.put(x, y, rgb);
        }
    }
    img
}

/// Gaussian-blurred white noise per channel, rescaled so the largest
/// magnitude equals `max_abs`. Smooth flows and images for tests and demos.
pub fn smooth_random<F: Real>(shape: Shape, sigma: f64, max_abs: f64, seed: u64) -> Tensor<F> {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let [b, c, h, w] = shape.0;
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let ksum: f64 = kernel.iter().sum();
    let blur = |src: &[f64], len: usize, stride: usize, count: usize, step: usize| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for line in 0..count {
            for i in 0..len {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let j = (i as isize + k as isize - radius).clamp(0, len as isize - 1) as usize;
                    acc += kv * src[line * step + j * stride];
                }
                out[line * step + i * stride] = acc / ksum;
            }
        }
        out
    };
    let mut data = Vec::with_capacity(shape.numel());
    for _ in 0..b * c {
        let noise: Vec<f64> = (0..h * w).map(|_| StandardNormal.sample(&mut rng)).collect();
        let rows = blur(&noise, w, 1, h, w);
        let mut plane = vec![0.0; h * w];
        for x in 0..w {
            let col: Vec<f64> = (0..h).map(|y| rows[y * w + x]).collect();
            let bl = blur(&col, h, 1, 1, 0);
            for y in 0..h {
                plane[y * w + x] = bl[y];
            }
        }
        let m = plane.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-12);
        data.extend(plane.iter().map(|v| F::lit(v / m * max_abs)));
    }
    Tensor::from_vec(shape, data).expect("shape")
}
