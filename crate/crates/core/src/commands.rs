//! Evaluation, translation, interpolation and flow rendering with a
//! trained model.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::deform::{SoftMode, ViewLabel};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::imageio::RgbImage;
use crate::metrics::{downsample_flow, epe, l1, learned_quarter_flow, mean_dx, ssim};
use crate::networks::Model;
use crate::synthdata::{foreground_mask, gt_flow, DatasetManifest, ImageCache, SpriteSpec};
use crate::tensor::Tensor;
use crate::train::load_checkpoint;
use crate::warpkit::{flow_viz_encode, soft_flow_argmax, FlowField, Resolution};

/// Pairs whose ground-truth mean horizontal displacement is smaller than
/// this (quarter-resolution pixels) carry no direction and are skipped by
/// the sign-agreement score.
pub const SIGN_MIN_DX: f64 = 0.1;

fn labels(idx: &[usize], views: usize) -> Result<Tensor<f32>> {
    let l = idx.iter().map(|&i| ViewLabel::new(i, views)).collect::<Result<Vec<_>>>()?;
    ViewLabel::batch_tensor(&l)
}

fn check_view(name: &str, v: usize, views: usize) -> Result<()> {
    if v >= views {
        return Err(Error::InvalidArgument(format!("{name} view {v} out of range for a {views}-view model")));
    }
    Ok(())
}

fn check_image(model: &Model<f32>, img: &RgbImage) -> Result<()> {
    let size = model.cfg.image_size;
    if img.width != size || img.height != size {
        return Err(Error::Shape(format!(
            "model expects {size}x{size} images, got {}x{}",
            img.width, img.height
        )));
    }
    Ok(())
}

// ---- eval ------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct EvalOptions {
    /// Evaluate a fixed pseudo-random subset of at most this many test pairs.
    pub max_pairs: Option<usize>,
    pub batch: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            max_pairs: None,
            batch: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairScore {
    pub sprite: u64,
    pub a: usize,
    pub b: usize,
    /// Image-range `[0, 1]` mean absolute error of the translation.
    pub l1: f64,
    pub ssim: f64,
    pub identity_l1: f64,
    pub identity_ssim: f64,
    /// Quarter-resolution endpoint error over valid pixels.
    pub epe: Option<f64>,
    /// Mean horizontal displacement over valid sprite pixels, quarter
    /// resolution; background is left out so it does not dilute the mean.
    pub learned_dx: Option<f64>,
    pub gt_dx: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub pairs: usize,
    pub l1: f64,
    pub ssim: f64,
    pub identity_l1: f64,
    pub identity_ssim: f64,
    pub epe: Option<f64>,
    /// Fraction of directional pairs whose learned and true mean
    /// horizontal displacement share a sign.
    pub sign_agreement: Option<f64>,
    pub sign_pairs: usize,
    pub per_pair: Vec<PairScore>,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for x in v {
        s += x;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

impl EvalReport {
    fn from_pairs(per_pair: Vec<PairScore>) -> Self {
        let m = |f: fn(&PairScore) -> f64| mean(per_pair.iter().map(f)).unwrap_or(f64::NAN);
        let directional: Vec<bool> = per_pair
            .iter()
            .filter_map(|p| match (p.learned_dx, p.gt_dx) {
                (Some(l), Some(g)) if g.abs() >= SIGN_MIN_DX => Some(l.signum() == g.signum()),
                _ => None,
            })
            .collect();
        EvalReport {
            pairs: per_pair.len(),
            l1: m(|p| p.l1),
            ssim: m(|p| p.ssim),
            identity_l1: m(|p| p.identity_l1),
            identity_ssim: m(|p| p.identity_ssim),
            epe: mean(per_pair.iter().filter_map(|p| p.epe)),
            sign_agreement: mean(directional.iter().map(|&ok| if ok { 1.0 } else { 0.0 })),
            sign_pairs: directional.len(),
            per_pair,
        }
    }

    /// Relative L1 reduction against the identity baseline.
    pub fn l1_reduction(&self) -> f64 {
        1.0 - self.l1 / self.identity_l1
    }

    pub fn ssim_gain(&self) -> f64 {
        self.ssim - self.identity_ssim
    }

    /// `key=value` summary.
    pub fn to_text(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("none".to_string(), |x| format!("{x}"));
        let mut s = String::new();
        let _ = writeln!(s, "pairs={}", self.pairs);
        let _ = writeln!(s, "l1={}", self.l1);
        let _ = writeln!(s, "ssim={}", self.ssim);
        let _ = writeln!(s, "identity_l1={}", self.identity_l1);
        let _ = writeln!(s, "identity_ssim={}", self.identity_ssim);
        let _ = writeln!(s, "l1_reduction={}", self.l1_reduction());
        let _ = writeln!(s, "ssim_gain={}", self.ssim_gain());
        let _ = writeln!(s, "epe_quarter={}", opt(self.epe));
        let _ = writeln!(s, "sign_agreement={}", opt(self.sign_agreement));
        let _ = writeln!(s, "sign_pairs={}", self.sign_pairs);
        s
    }
}

/// Every ordered pair of distinct views of every test sprite.
pub fn test_pairs(m: &DatasetManifest) -> Vec<(u64, usize, usize)> {
    let mut out = Vec::new();
    for &s in &m.test {
        for a in 0..m.views {
            for b in 0..m.views {
                if a != b {
                    out.push((s, a, b));
                }
            }
        }
    }
    out
}

/// At most `max` items, drawn without replacement by a fixed seed and kept
/// in their original order. A plain stride would alias with the per-sprite
/// view-pair period and keep only some view distances.
fn subset<T: Clone>(items: &[T], max: Option<usize>) -> Vec<T> {
    match max {
        Some(k) if k < items.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut idx = rand::seq::index::sample(&mut rng, items.len(), k).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| items[i].clone()).collect()
        }
        _ => items.to_vec(),
    }
}

/// Scores `pairs` of the dataset in `dir`.
pub fn evaluate_pairs(
    model: &Model<f32>,
    dir: &Path,
    m: &DatasetManifest,
    pairs: &[(u64, usize, usize)],
    batch: usize,
) -> Result<Vec<PairScore>> {
    if m.views != model.cfg.views || m.image_size != model.cfg.image_size {
        return Err(Error::Shape(format!(
            "model was built for {} views of {}px, dataset has {} views of {}px",
            model.cfg.views, model.cfg.image_size, m.views, m.image_size
        )));
    }
    let mut sprites: Vec<u64> = pairs.iter().map(|p| p.0).collect();
    sprites.sort_unstable();
    sprites.dedup();
    let cache = ImageCache::load(dir, m, &sprites)?;
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(batch.max(1)) {
        let src: Vec<(u64, usize)> = chunk.iter().map(|&(s, a, _)| (s, a)).collect();
        let dst: Vec<(u64, usize)> = chunk.iter().map(|&(s, _, b)| (s, b)).collect();
        let x_a = cache.batch::<f32>(&src)?;
        let x_b = cache.batch::<f32>(&dst)?;
        let c_a = labels(&chunk.iter().map(|p| p.1).collect::<Vec<_>>(), m.views)?;
        let c_b = labels(&chunk.iter().map(|p| p.2).collect::<Vec<_>>(), m.views)?;

        let g = Graph::new();
        let (xa, ca, cb) = (g.constant(x_a.clone()), g.constant(c_a), g.constant(c_b));
        let dec = model.translate(&g, xa, ca, cb)?;
        let x_hat = g.value(dec.x_b_hat);
        let quarter = g.value(learned_quarter_flow(&g, &dec.flow)?);

        let l1s = l1(&x_hat, &x_b)?;
        let ssims = ssim(&x_hat, &x_b)?;
        let id_l1 = l1(&x_a, &x_b)?;
        let id_ssim = ssim(&x_a, &x_b)?;
        for (i, &(sprite, a, b)) in chunk.iter().enumerate() {
            let spec = SpriteSpec::from_seed(sprite);
            let (flow, mask) = gt_flow(&spec, a, b, m.views, m.image_size)?;
            let q = Resolution::Quarter.factor();
            let (gt_q, valid) = downsample_flow(flow.tensor(), &mask, q)?;
            let fg = foreground_mask(&spec, b, m.views, m.image_size)?;
            let object = Tensor::from_vec(
                mask.shape(),
                mask.data().iter().zip(fg.data()).map(|(a, b)| a * b).collect(),
            )?;
            let (gt_obj, valid_obj) = downsample_flow(flow.tensor(), &object, q)?;
            let pred = quarter.item_at(i);
            out.push(PairScore {
                sprite,
                a,
                b,
                l1: l1s[i],
                ssim: ssims[i],
                identity_l1: id_l1[i],
                identity_ssim: id_ssim[i],
                epe: epe(&pred, &gt_q, &valid)?[0],
                learned_dx: mean_dx(&pred, Some(&valid_obj))[0],
                gt_dx: mean_dx(&gt_obj, Some(&valid_obj))[0],
            });
        }
    }
    Ok(out)
}

pub fn evaluate(model: &Model<f32>, dir: &Path, opts: &EvalOptions) -> Result<EvalReport> {
    let m = DatasetManifest::load(dir)?;
    if m.test.is_empty() {
        return Err(Error::InvalidArgument(format!("{} has no test sprites", dir.display())));
    }
    let pairs = subset(&test_pairs(&m), opts.max_pairs);
    Ok(EvalReport::from_pairs(evaluate_pairs(model, dir, &m, &pairs, opts.batch)?))
}

pub fn cmd_eval(checkpoint: &Path, dir: &Path, opts: &EvalOptions) -> Result<EvalReport> {
    let loaded = load_checkpoint::<f32>(checkpoint)?;
    evaluate(&loaded.model, dir, opts)
}

// ---- translate -------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct TranslatedView {
    pub view: usize,
    pub x_b_hat: Tensor<f32>,
    pub x_g: Tensor<f32>,
    pub x_warp: Tensor<f32>,
    /// `(1, 1, h, w)` in `[0, 1]`; weight of `x_warp`.
    pub mask: Tensor<f32>,
}

#[derive(Clone, Debug)]
pub struct Translation {
    pub source: RgbImage,
    pub from: usize,
    pub outputs: Vec<TranslatedView>,
}

/// Decodes `img` (seen from view `from`) towards a possibly soft label.
fn decode_label(model: &Model<f32>, img: &RgbImage, from: usize, to: &ViewLabel) -> Result<TranslatedView> {
    check_image(model, img)?;
    let views = model.cfg.views;
    check_view("source", from, views)?;
    if to.views() != views {
        return Err(Error::InvalidArgument(format!(
            "target label has {} views, model has {views}",
            to.views()
        )));
    }
    let g = Graph::new();
    let x = g.constant(img.to_tensor());
    let c_a = g.constant(labels(&[from], views)?);
    let c_b = g.constant(ViewLabel::batch_tensor(std::slice::from_ref(to))?);
    let dec = model.translate(&g, x, c_a, c_b)?;
    Ok(TranslatedView {
        view: to.index(),
        x_b_hat: (*g.value(dec.x_b_hat)).clone(),
        x_g: (*g.value(dec.x_g)).clone(),
        x_warp: (*g.value(dec.x_warp)).clone(),
        mask: (*g.value(dec.mask)).clone(),
    })
}

pub fn translate_image(model: &Model<f32>, img: &RgbImage, from: usize, to: &[usize]) -> Result<Translation> {
    let mut outputs = Vec::with_capacity(to.len());
    for &v in to {
        check_view("target", v, model.cfg.views)?;
        outputs.push(decode_label(model, img, from, &ViewLabel::new(v, model.cfg.views)?)?);
    }
    Ok(Translation {
        source: img.clone(),
        from,
        outputs,
    })
}

/// Rows of the decomposition grid below the output row.
pub const PANEL_ROWS: [&str; 3] = ["x_g", "x_warp", "mask"];

impl Translation {
    /// Source followed by one column per target view. With `panels`, three
    /// more rows hold the generated image, the warped source and the mask;
    /// the cell under the source is left white.
    pub fn grid(&self, panels: bool) -> Result<RgbImage> {
        let (w, h) = (self.source.width, self.source.height);
        let mut top = vec![self.source.clone()];
        for o in &self.outputs {
            top.push(RgbImage::from_tensor(&o.x_b_hat, 0)?);
        }
        let mut rows = vec![RgbImage::hstack(&top)?];
        if panels {
            let blank = RgbImage::filled(w, h, [255, 255, 255]);
            let mut gen = vec![blank.clone()];
            let mut warp = vec![blank.clone()];
            let mut mask = vec![blank];
            for o in &self.outputs {
                gen.push(RgbImage::from_tensor(&o.x_g, 0)?);
                warp.push(RgbImage::from_tensor(&o.x_warp, 0)?);
                mask.push(RgbImage::from_unit_map(&o.mask, 0));
            }
            rows.push(RgbImage::hstack(&gen)?);
            rows.push(RgbImage::hstack(&warp)?);
            rows.push(RgbImage::hstack(&mask)?);
        }
        RgbImage::vstack(&rows)
    }
}

pub fn cmd_translate(
    checkpoint: &Path,
    image: &Path,
    from: usize,
    to: &[usize],
    out: &Path,
    panels: bool,
) -> Result<Translation> {
    let loaded = load_checkpoint::<f32>(checkpoint)?;
    let img = RgbImage::load_png(image)?;
    let t = translate_image(&loaded.model, &img, from, to)?;
    t.grid(panels)?.save_png(out)?;
    Ok(t)
}

// ---- interpolate -----------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Interpolation {
    /// Weight of the first view's label per frame, from 1 down to 0.
    pub lambdas: Vec<f64>,
    pub frames: Vec<Tensor<f32>>,
    /// Image-range L1 between consecutive frames.
    pub step_l1: Vec<f64>,
    /// Image-range L1 between the two discrete-view translations.
    pub discrete_l1: f64,
    pub adjacent: bool,
}

impl Interpolation {
    pub fn max_step_l1(&self) -> f64 {
        self.step_l1.iter().copied().fold(0.0, f64::max)
    }

    /// Whether no frame-to-frame change exceeds twice the change between
    /// the discrete views.
    pub fn smooth(&self) -> bool {
        self.max_step_l1() <= 2.0 * self.discrete_l1
    }

    pub fn strip(&self) -> Result<RgbImage> {
        let tiles = self
            .frames
            .iter()
            .map(|f| RgbImage::from_tensor(f, 0))
            .collect::<Result<Vec<_>>>()?;
        RgbImage::hstack(&tiles)
    }

    pub fn report(&self) -> String {
        let steps: Vec<String> = self.step_l1.iter().map(|v| format!("{v:.5}")).collect();
        format!(
            "frames={}\nadjacent={}\ndiscrete_l1={}\nmax_step_l1={}\nsmooth={}\nstep_l1={}\n",
            self.frames.len(),
            self.adjacent,
            self.discrete_l1,
            self.max_step_l1(),
            self.smooth(),
            steps.join(",")
        )
    }
}

/// Translations of `img` towards `lambda * onehot(v1) + (1 - lambda) *
/// onehot(v2)` for `steps` values of lambda from 1 to 0. Each frame is
/// decoded on its own, so the end frames equal the discrete translations
/// bit for bit.
pub fn interpolate(
    model: &Model<f32>,
    img: &RgbImage,
    from: usize,
    v1: usize,
    v2: usize,
    steps: usize,
) -> Result<Interpolation> {
    if steps < 2 {
        return Err(Error::InvalidArgument(format!("interpolation needs at least 2 frames, got {steps}")));
    }
    let views = model.cfg.views;
    check_view("first", v1, views)?;
    check_view("second", v2, views)?;
    let (c1, c2) = (ViewLabel::new(v1, views)?, ViewLabel::new(v2, views)?);
    let mut lambdas = Vec::with_capacity(steps);
    let mut frames = Vec::with_capacity(steps);
    for i in 0..steps {
        let lambda = 1.0 - i as f64 / (steps - 1) as f64;
        let label = ViewLabel::mix(&c1, &c2, lambda)?;
        frames.push(decode_label(model, img, from, &label)?.x_b_hat);
        lambdas.push(lambda);
    }
    let step_l1 = frames
        .windows(2)
        .map(|w| l1(&w[0], &w[1]).map(|v| v[0]))
        .collect::<Result<Vec<_>>>()?;
    let discrete_l1 = l1(&frames[0], &frames[steps - 1])?[0];
    Ok(Interpolation {
        lambdas,
        frames,
        step_l1,
        discrete_l1,
        adjacent: v1.abs_diff(v2) == 1,
    })
}

pub fn cmd_interpolate(
    checkpoint: &Path,
    image: &Path,
    from: usize,
    views: (usize, usize),
    steps: usize,
    out: &Path,
) -> Result<Interpolation> {
    let loaded = load_checkpoint::<f32>(checkpoint)?;
    let img = RgbImage::load_png(image)?;
    let it = interpolate(&loaded.model, &img, from, views.0, views.1, steps)?;
    it.strip()?.save_png(out)?;
    Ok(it)
}

// ---- flowviz ---------------------------------------------------------------

/// The flows of all stages for one translation.
#[derive(Clone, Debug)]
pub struct StageFlows {
    /// Quarter resolution, condition-driven pre-warp.
    pub kg: FlowField<f32>,
    /// Quarter resolution, most attended source cell per target cell.
    pub soft_argmax: FlowField<f32>,
    /// Residual flow of the half-resolution stage.
    pub half: FlowField<f32>,
    /// Residual flow of the full-resolution stage.
    pub full: FlowField<f32>,
    /// Raw attention, `(1, 1, n, n)` with `n` quarter-resolution positions.
    pub soft_weights: Tensor<f32>,
}

pub const FLOW_PANELS: [&str; 4] = ["kg", "soft_argmax", "residual_half", "residual_full"];

impl StageFlows {
    /// One panel per stage flow, each enlarged to the image size.
    pub fn panels(&self) -> [RgbImage; 4] {
        let viz = |f: &FlowField<f32>| flow_viz_encode(f, 0, None).scaled(f.resolution().factor());
        [viz(&self.kg), viz(&self.soft_argmax), viz(&self.half), viz(&self.full)]
    }

    pub fn grid(&self) -> Result<RgbImage> {
        RgbImage::hstack(&self.panels())
    }
}

pub fn stage_flows(
    model: &Model<f32>,
    img: &RgbImage,
    from: usize,
    to: usize,
    soft_mode: SoftMode,
) -> Result<StageFlows> {
    check_image(model, img)?;
    let views = model.cfg.views;
    check_view("source", from, views)?;
    check_view("target", to, views)?;
    let g = Graph::new();
    let x = g.constant(img.to_tensor());
    let c_a = g.constant(labels(&[from], views)?);
    let c_b = g.constant(labels(&[to], views)?);
    let enc = model.encode(&g, x)?;
    let dec = model.decode(&g, x, &enc, enc.mu, c_a, c_b, soft_mode)?;
    let state = &dec.flow;
    if state.residuals.len() != 2 {
        return Err(Error::Missing("flow state without both hard stages".into()));
    }
    let weights = g.value(state.soft.weights);
    let (h, w) = (state.soft.height, state.soft.width);
    Ok(StageFlows {
        kg: FlowField::new((*g.value(state.kg_flow)).clone(), Resolution::Quarter)?,
        soft_argmax: soft_flow_argmax(&weights, h, w),
        half: FlowField::new((*g.value(state.residuals[0])).clone(), Resolution::Half)?,
        full: FlowField::new((*g.value(state.residuals[1])).clone(), Resolution::Full)?,
        soft_weights: (*weights).clone(),
    })
}

pub fn cmd_flowviz(
    checkpoint: &Path,
    image: &Path,
    from: usize,
    to: usize,
    out: &Path,
    soft_mode: SoftMode,
) -> Result<StageFlows> {
    let loaded = load_checkpoint::<f32>(checkpoint)?;
    let img = RgbImage::load_png(image)?;
    let flows = stage_flows(&loaded.model, &img, from, to, soft_mode)?;
    flows.grid()?.save_png(out)?;
    Ok(flows)
}

/// Writes `text` to `path`, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
