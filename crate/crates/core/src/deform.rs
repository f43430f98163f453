//! The three-stage deformation ladder: a soft stage at quarter resolution
//! (KG warp, spatial soft warp, channel soft warp) followed by two hard
//! stages at half and full resolution that apply the accumulated coarse
//! deformation and add a residual flow. The view-difference condition is
//! embedded once and refined before each hard stage from the mean flow of
//! the stage before it.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{lrelu, Conv, Dense};
use crate::params::{Init, ParamStore};
use crate::tensor::{Real, Shape, Tensor};
use crate::warpkit::{
    channel_soft_warp, flow_compose, flow_mean_per_item, flow_upscale, hard_warp, identity_soft_flow, kg_conv,
    soft_flow, soft_flow_apply_blockwise, soft_flow_expected, soft_spatial_warp, Resolution, SoftFlow,
};

/// A (possibly soft) view label: a probability vector over `K` views.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewLabel {
    probs: Vec<f64>,
}

impl ViewLabel {
    pub fn new(index: usize, views: usize) -> Result<Self> {
        if index >= views {
            return Err(Error::InvalidArgument(format!("view {index} out of range for {views} views")));
        }
        let mut probs = vec![0.0; views];
        probs[index] = 1.0;
        Ok(ViewLabel { probs })
    }

    /// `lambda * a + (1 - lambda) * b`.
    pub fn mix(a: &ViewLabel, b: &ViewLabel, lambda: f64) -> Result<Self> {
        if a.views() != b.views() {
            return Err(Error::InvalidArgument(format!(
                "labels over {} and {} views cannot be mixed",
                a.views(),
                b.views()
            )));
        }
        let probs = a.probs.iter().zip(&b.probs).map(|(x, y)| lambda * x + (1.0 - lambda) * y).collect();
        Ok(ViewLabel { probs })
    }

    pub fn views(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Most likely view.
    pub fn index(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    /// Stacks labels into a `(batch, K, 1, 1)` tensor.
    pub fn batch_tensor<F: Real>(labels: &[ViewLabel]) -> Result<Tensor<F>> {
        let k = labels.first().map_or(0, |l| l.views());
        if labels.iter().any(|l| l.views() != k) {
            return Err(Error::InvalidArgument("labels in a batch must share K".into()));
        }
        let data: Vec<f64> = labels.iter().flat_map(|l| l.probs.iter().copied()).collect();
        Tensor::from_f64(Shape::new(labels.len(), k, 1, 1), &data)
    }
}

/// How the hard stages use earlier deformations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DeformMode {
    /// Each stage starts from the accumulated deformation of the previous
    /// ones and refines the condition with their mean flow.
    #[default]
    Iterative,
    /// Each resolution predicts its own flow from the unwarped features.
    Independent,
}

impl DeformMode {
    pub fn name(self) -> &'static str {
        match self {
            DeformMode::Iterative => "iterative",
            DeformMode::Independent => "independent",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "iterative" => Ok(DeformMode::Iterative),
            "independent" => Ok(DeformMode::Independent),
            _ => Err(Error::InvalidArgument(format!("unknown deform mode {s:?}"))),
        }
    }
}

/// Replaces the learned attention of the soft stage; used to check the
/// zero-deformation path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SoftMode {
    #[default]
    Learned,
    Identity,
}

/// Shapes of the ladder: channel widths at full, half and quarter
/// resolution, view count, condition width and KG kernel size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DeformConfig {
    pub widths: [usize; 3],
    pub views: usize,
    pub cond_dim: usize,
    pub kg_kernel: usize,
    pub tau: f64,
    pub mode: DeformMode,
}

impl DeformConfig {
    /// Length of the stage vector for the stage at `widths[level]`.
    pub fn stage_len(&self, level: usize) -> usize {
        let k = if level == 2 { self.kg_kernel } else { 1 };
        2 * self.widths[level] * k * k
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConditionBranch {
    pub mlp1: Dense,
    pub mlp2: Dense,
    pub fc3: Dense,
    pub fc2: Dense,
    pub fc1: Dense,
}

#[derive(Clone, Copy, Debug)]
pub struct ConditionVector {
    pub c_diff: Var,
    pub w_diff: Var,
    pub w_diff3: Var,
}

impl ConditionBranch {
    pub fn new<F: Real>(store: &mut ParamStore<F>, cfg: &DeformConfig, rng: &mut impl Rng) -> Result<Self> {
        let d = cfg.cond_dim;
        Ok(ConditionBranch {
            mlp1: Dense::new(store, "cond.mlp1", cfg.views, d, false, rng)?,
            mlp2: Dense::new(store, "cond.mlp2", d, d, false, rng)?,
            fc3: Dense::new(store, "cond.fc3", d, cfg.stage_len(2), false, rng)?,
            fc2: Dense::new(store, "cond.fc2", d + 2, cfg.stage_len(1), false, rng)?,
            fc1: Dense::new(store, "cond.fc1", d + 2, cfg.stage_len(0), false, rng)?,
        })
    }

    /// Embeds `onehot(b) - onehot(a)`; `c_a`, `c_b` are `(batch, K, 1, 1)`.
    pub fn embed<F: Real>(&self, g: &Graph<F>, store: &ParamStore<F>, c_a: Var, c_b: Var) -> Result<ConditionVector> {
        let (sa, sb) = (g.shape(c_a), g.shape(c_b));
        if sa != sb {
            return Err(Error::Shape(format!("condition labels differ: {sa} vs {sb}")));
        }
        let c_diff = g.sub(c_b, c_a)?;
        let h = lrelu(g, self.mlp1.forward(g, store, c_diff)?);
        let w_diff = lrelu(g, self.mlp2.forward(g, store, h)?);
        let w_diff3 = self.fc3.forward(g, store, w_diff)?;
        Ok(ConditionVector { c_diff, w_diff, w_diff3 })
    }

    /// Stage vector for stage 2 (half) or 1 (full) from `w_diff` and the
    /// per-item mean flow `mu` (`(batch, 2, 1, 1)`) of the previous stage.
    pub fn update<F: Real>(
        &self,
        g: &Graph<F>,
        store: &ParamStore<F>,
        cond: &ConditionVector,
        mu: Var,
        stage: usize,
    ) -> Result<Var> {
        let fc = match stage {
            2 => &self.fc2,
            1 => &self.fc1,
            _ => return Err(Error::InvalidArgument(format!("condition update needs stage 2 or 1, got {stage}"))),
        };
        let x = g.concat_channels(&[cond.w_diff, mu])?;
        fc.forward(g, store, x)
    }
}

/// Residual flow head of a hard stage: two 3x3 convs, the last one
/// zero-initialized so the initial residual flow is exactly zero.
#[derive(Clone, Copy, Debug)]
pub struct ResidualHead {
    pub conv1: Conv,
    pub conv2: Conv,
}

impl ResidualHead {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, width: usize, rng: &mut impl Rng) -> Result<Self> {
        // warped feature, target feature and the 2*width stage vector
        let in_c = 4 * width;
        Ok(ResidualHead {
            conv1: Conv::new(store, &format!("{name}.conv1"), in_c, width, 3, 1, true, rng)?,
            conv2: Conv::with_init(store, &format!("{name}.conv2"), width, 2, 3, 1, true, Init::Zeros, rng)?,
        })
    }

    pub fn forward<F: Real>(
        &self,
        g: &Graph<F>,
        store: &ParamStore<F>,
        f_warped: Var,
        f_g: Var,
        w_stage: Var,
    ) -> Result<Var> {
        let [b, _, h, w] = g.shape(f_warped).0;
        let len = g.shape(w_stage).numel() / b;
        let w_map = g.expand(g.reshape(w_stage, Shape::new(b, len, 1, 1))?, Shape::new(b, len, h, w))?;
        let x = g.concat_channels(&[f_warped, f_g, w_map])?;
        let x = lrelu(g, self.conv1.forward(g, store, x)?);
        self.conv2.forward(g, store, x)
    }
}

/// Accumulated deformation after one or more stages.
#[derive(Clone, Debug)]
pub struct FlowState {
    /// Quarter-resolution attention of the soft stage.
    pub soft: SoftFlow,
    /// Quarter-resolution KG flow, applied before the soft warp.
    pub kg_flow: Var,
    /// Composition of all residual flows so far, at `hard_resolution`.
    pub hard: Option<Var>,
    pub hard_resolution: Option<Resolution>,
    /// Residual flow of each hard stage, coarse to fine.
    pub residuals: Vec<Var>,
    pub mode: DeformMode,
}

#[derive(Clone, Copy, Debug)]
pub struct StageOutput {
    pub warped: Var,
    pub residual: Option<Var>,
}

fn upscale_to<F: Real>(g: &Graph<F>, flow: Var, extent: usize) -> Result<Var> {
    let have = g.shape(flow).height();
    if have == extent {
        return Ok(flow);
    }
    if !extent.is_multiple_of(have) {
        return Err(Error::Shape(format!("cannot upscale a {have}-pixel flow to {extent}")));
    }
    flow_upscale(g, flow, extent / have)
}

/// Soft stage at quarter resolution.
#[allow(clippy::too_many_arguments)]
pub fn scdm_forward<F: Real>(
    g: &Graph<F>,
    f_e3: Var,
    f_g3: Var,
    w_diff3: Var,
    kg_kernel: usize,
    tau: f64,
    soft_mode: SoftMode,
    mode: DeformMode,
) -> Result<(StageOutput, FlowState)> {
    let (se, sg) = (g.shape(f_e3), g.shape(f_g3));
    if se != sg {
        return Err(Error::Shape(format!("soft stage features differ: {se} vs {sg}")));
    }
    let [b, _, h, w] = se.0;
    let kg_flow = kg_conv(g, f_e3, w_diff3, kg_kernel)?;
    let f_tilde = hard_warp(g, f_e3, kg_flow)?;
    let (soft, f_out) = match soft_mode {
        SoftMode::Learned => {
            let sf = soft_flow(g, f_tilde, f_g3, tau)?;
            let f_sp = soft_spatial_warp(g, f_tilde, &sf)?;
            (sf, channel_soft_warp(g, f_sp, f_g3, tau)?)
        }
        SoftMode::Identity => (identity_soft_flow(g, b, h, w, tau), f_tilde),
    };
    let state = FlowState {
        soft,
        kg_flow,
        hard: None,
        hard_resolution: None,
        residuals: Vec::new(),
        mode,
    };
    Ok((StageOutput { warped: f_out, residual: None }, state))
}

/// Coarse deformation of a finer map: KG pre-warp, blockwise soft warp,
/// then the accumulated hard flow.
fn coarse_deform<F: Real>(g: &Graph<F>, x: Var, prior: &FlowState) -> Result<Var> {
    let extent = g.shape(x).height();
    let kg = upscale_to(g, prior.kg_flow, extent)?;
    let x = hard_warp(g, x, kg)?;
    let x = soft_flow_apply_blockwise(g, x, &prior.soft)?;
    match prior.hard {
        Some(flow) => hard_warp(g, x, upscale_to(g, flow, extent)?),
        None => Ok(x),
    }
}

/// Mean flow of the last stage of `state`, per batch item, in the pixel
/// units of that stage.
pub fn stage_flow_mean<F: Real>(g: &Graph<F>, state: &FlowState) -> Result<Var> {
    match state.residuals.last() {
        Some(&r) => Ok(flow_mean_per_item(g, r)),
        None => {
            let kg = flow_mean_per_item(g, state.kg_flow);
            let soft = flow_mean_per_item(g, soft_flow_expected(g, &state.soft)?);
            g.add(kg, soft)
        }
    }
}

/// Hard stage: coarse deformation from `prior` plus a residual flow.
pub fn hcdm_forward<F: Real>(
    g: &Graph<F>,
    store: &ParamStore<F>,
    head: &ResidualHead,
    f_e: Var,
    f_g: Var,
    w_stage: Var,
    prior: &FlowState,
) -> Result<(StageOutput, FlowState)> {
    let (se, sg) = (g.shape(f_e), g.shape(f_g));
    if se != sg {
        return Err(Error::Shape(format!("hard stage features differ: {se} vs {sg}")));
    }
    let extent = se.height();
    let iterative = prior.mode == DeformMode::Iterative;
    let f_prime = if iterative { coarse_deform(g, f_e, prior)? } else { f_e };
    let residual = head.forward(g, store, f_prime, f_g, w_stage)?;
    let out = hard_warp(g, f_prime, residual)?;
    let hard = match (iterative, prior.hard) {
        (true, Some(h)) => flow_compose(g, upscale_to(g, h, extent)?, residual)?,
        _ => residual,
    };
    let mut state = prior.clone();
    state.hard = Some(hard);
    state.hard_resolution = Some(match prior.hard_resolution {
        None => Resolution::Half,
        Some(_) => Resolution::Full,
    });
    state.residuals.push(residual);
    Ok((StageOutput { warped: out, residual: Some(residual) }, state))
}

/// Deforms the full-resolution source image with the complete flow state.
pub fn image_warp_chain<F: Real>(g: &Graph<F>, x: Var, state: &FlowState) -> Result<Var> {
    if state.residuals.len() != 2 {
        return Err(Error::Missing(format!(
            "image warp needs all hard stages, flow state has {}",
            state.residuals.len()
        )));
    }
    match state.mode {
        DeformMode::Iterative => coarse_deform(g, x, state),
        DeformMode::Independent => hard_warp(g, x, state.residuals[1]),
    }
}

/// The condition branch and both residual heads.
#[derive(Clone, Copy, Debug)]
pub struct Deformer {
    pub cfg: DeformConfig,
    pub cond: ConditionBranch,
    pub head2: ResidualHead,
    pub head1: ResidualHead,
}

impl Deformer {
    pub fn new<F: Real>(store: &mut ParamStore<F>, cfg: DeformConfig, rng: &mut impl Rng) -> Result<Self> {
        Ok(Deformer {
            cond: ConditionBranch::new(store, &cfg, rng)?,
            head2: ResidualHead::new(store, "hcdm2", cfg.widths[1], rng)?,
            head1: ResidualHead::new(store, "hcdm1", cfg.widths[0], rng)?,
            cfg,
        })
    }

    /// Stage vector for hard stage `stage` after `state`.
    pub fn stage_vector<F: Real>(
        &self,
        g: &Graph<F>,
        store: &ParamStore<F>,
        cond: &ConditionVector,
        state: &FlowState,
        stage: usize,
    ) -> Result<Var> {
        let mu = match self.cfg.mode {
            DeformMode::Iterative => stage_flow_mean(g, state)?,
            DeformMode::Independent => {
                let b = g.shape(cond.w_diff).batch();
                g.constant(Tensor::zeros(Shape::new(b, 2, 1, 1)))
            }
        };
        self.cond.update(g, store, cond, mu, stage)
    }

    pub fn scdm(
        &self,
        g: &Graph<impl Real>,
        f_e3: Var,
        f_g3: Var,
        cond: &ConditionVector,
        soft_mode: SoftMode,
    ) -> Result<(StageOutput, FlowState)> {
        scdm_forward(g, f_e3, f_g3, cond.w_diff3, self.cfg.kg_kernel, self.cfg.tau, soft_mode, self.cfg.mode)
    }

    /// Hard stage 2 (half) or 1 (full).
    #[allow(clippy::too_many_arguments)]
    pub fn hcdm<F: Real>(
        &self,
        g: &Graph<F>,
        store: &ParamStore<F>,
        f_e: Var,
        f_g: Var,
        cond: &ConditionVector,
        prior: &FlowState,
        stage: usize,
    ) -> Result<(StageOutput, FlowState)> {
        let head = if stage == 2 { &self.head2 } else { &self.head1 };
        let w = self.stage_vector(g, store, cond, prior, stage)?;
        hcdm_forward(g, store, head, f_e, f_g, w, prior)
    }

    /// All three stages on encoder features `f_e` and target features
    /// `f_g` (full, half, quarter). Decoder-driven callers that need to
    /// interleave stages use the per-stage methods instead.
    pub fn forward_all<F: Real>(
        &self,
        g: &Graph<F>,
        store: &ParamStore<F>,
        f_e: [Var; 3],
        f_g: [Var; 3],
        cond: &ConditionVector,
        soft_mode: SoftMode,
    ) -> Result<([StageOutput; 3], FlowState)> {
        let (o3, s3) = self.scdm(g, f_e[2], f_g[2], cond, soft_mode)?;
        let (o2, s2) = self.hcdm(g, store, f_e[1], f_g[1], cond, &s3, 2)?;
        let (o1, s1) = self.hcdm(g, store, f_e[0], f_g[0], cond, &s2, 1)?;
        Ok(([o1, o2, o3], s1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, GradCheckConfig};
    use crate::ops::warp_tensor;
    use crate::params::ParamId;
    use crate::warpkit::{smooth_random, FlowField, DEFAULT_TAU};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(widths: [usize; 3]) -> DeformConfig {
        DeformConfig {
            widths,
            views: 5,
            cond_dim: 6,
            kg_kernel: 1,
            tau: DEFAULT_TAU,
            mode: DeformMode::Iterative,
        }
    }

    fn rand_tensor(shape: Shape, seed: u64) -> Tensor<f64> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d: Vec<f64> = (0..shape.numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(shape, d).unwrap()
    }

    fn labels(g: &Graph<f64>, idx: &[usize]) -> Var {
        let l: Vec<ViewLabel> = idx.iter().map(|&i| ViewLabel::new(i, 5).unwrap()).collect();
        g.constant(ViewLabel::batch_tensor(&l).unwrap())
    }

    fn randomize(store: &mut ParamStore<f64>, id: ParamId, scale: f64, seed: u64) {
        let shape = store.get(id).shape();
        *store.get_mut(id).value_mut() = rand_tensor(shape, seed).map(|v| v * scale);
    }

    fn setup(widths: [usize; 3]) -> (ParamStore<f64>, Deformer) {
        let mut store = ParamStore::new("gen");
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = Deformer::new(&mut store, cfg(widths), &mut rng).unwrap();
        (store, d)
    }

    #[test]
    fn view_labels() {
        let a = ViewLabel::new(2, 5).unwrap();
        assert_eq!(a.probs(), &[0.0, 0.0, 1.0, 0.0, 0.0]);
        assert!(ViewLabel::new(5, 5).is_err());
        let b = ViewLabel::new(3, 5).unwrap();
        let m = ViewLabel::mix(&a, &b, 0.25).unwrap();
        assert_eq!(m.probs(), &[0.0, 0.0, 0.25, 0.75, 0.0]);
        assert_eq!(m.index(), 3);
        assert!(ViewLabel::mix(&a, &ViewLabel::new(0, 4).unwrap(), 0.5).is_err());
    }

    #[test]
    fn same_view_embeds_to_zero() {
        let (store, d) = setup([2, 3, 4]);
        let g = Graph::<f64>::new();
        let c = d.cond.embed(&g, &store, labels(&g, &[1, 4]), labels(&g, &[1, 4])).unwrap();
        assert!(g.value(c.w_diff).data().iter().all(|&v| v == 0.0));
        assert!(g.value(c.w_diff3).data().iter().all(|&v| v == 0.0));
        assert_eq!(g.shape(c.w_diff), Shape::new(2, 6, 1, 1));
        assert_eq!(g.shape(c.w_diff3).numel(), 2 * 2 * 4);

        let mu = g.constant(Tensor::zeros(Shape::new(2, 2, 1, 1)));
        let w2 = d.cond.update(&g, &store, &c, mu, 2).unwrap();
        assert!(g.value(w2).data().iter().all(|&v| v == 0.0));
        assert_eq!(g.shape(w2).numel(), 2 * 2 * 3);
        assert_eq!(g.shape(d.cond.update(&g, &store, &c, mu, 1).unwrap()).numel(), 2 * 2 * 2);
        assert!(d.cond.update(&g, &store, &c, mu, 3).is_err());

        let k4 = g.constant(Tensor::zeros(Shape::new(2, 4, 1, 1)));
        assert!(d.cond.embed(&g, &store, labels(&g, &[1, 4]), k4).is_err());
    }

    #[test]
    fn embedding_is_deterministic() {
        let run = || {
            let (store, d) = setup([2, 3, 4]);
            let g = Graph::<f64>::new();
            let c = d.cond.embed(&g, &store, labels(&g, &[0]), labels(&g, &[3])).unwrap();
            g.tensor(c.w_diff3)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn mean_flow_reaches_stage_vector() {
        let (store, d) = setup([2, 3, 4]);
        let eval = |mu_dx: f64| {
            let g = Graph::<f64>::new();
            let c = d.cond.embed(&g, &store, labels(&g, &[0]), labels(&g, &[3])).unwrap();
            let mu = g.constant(t2(mu_dx, 0.0));
            g.tensor(d.cond.update(&g, &store, &c, mu, 2).unwrap())
        };
        let (a, b) = (eval(0.0), eval(1e-3));
        assert!(a.max_abs_diff(&b) > 0.0);
    }

    fn t2(dx: f64, dy: f64) -> Tensor<f64> {
        Tensor::from_f64(Shape::new(1, 2, 1, 1), &[dx, dy]).unwrap()
    }

    #[test]
    fn single_position_soft_stage_is_identity() {
        let g = Graph::<f64>::new();
        let f = g.constant(rand_tensor(Shape::new(1, 1, 1, 1), 3));
        let tg = g.constant(rand_tensor(Shape::new(1, 1, 1, 1), 4));
        let w = g.constant(Tensor::zeros(Shape::new(1, 2, 1, 1)));
        let (out, st) = scdm_forward(&g, f, tg, w, 1, DEFAULT_TAU, SoftMode::Learned, DeformMode::Iterative).unwrap();
        assert_eq!(g.value(st.soft.weights).data(), &[1.0]);
        assert_eq!(g.tensor(out.warped), g.tensor(f));
    }

    #[test]
    fn soft_stage_recovers_self_at_low_temperature() {
        // 4 channels x 4 positions, 4I - J: both centerings are no-ops and
        // rows and columns have equal norms.
        let mut d = vec![-0.1; 16];
        for i in 0..4 {
            d[i * 4 + i] = 0.3;
        }
        let x = Tensor::from_f64(Shape::new(1, 4, 2, 2), &d).unwrap();
        let g = Graph::<f64>::new();
        let f = g.constant(x.clone());
        let w = g.constant(Tensor::zeros(Shape::new(1, 8, 1, 1)));
        let (out, st) = scdm_forward(&g, f, f, w, 1, 1e-3, SoftMode::Learned, DeformMode::Iterative).unwrap();
        assert!(g.tensor(out.warped).max_abs_diff(&x) < 1e-3);
        for row in g.value(st.soft.weights).data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let bad = g.constant(Tensor::zeros(Shape::new(1, 4, 2, 1)));
        assert!(scdm_forward(&g, f, bad, w, 1, 0.1, SoftMode::Learned, DeformMode::Iterative).is_err());
    }

    fn identity_state(g: &Graph<f64>, quarter: usize, hard: Option<(Tensor<f64>, Resolution)>) -> FlowState {
        FlowState {
            soft: identity_soft_flow(g, 1, quarter, quarter, DEFAULT_TAU),
            kg_flow: g.constant(Tensor::zeros(Shape::new(1, 2, quarter, quarter))),
            hard: hard.as_ref().map(|(t, _)| g.constant(t.clone())),
            hard_resolution: hard.map(|(_, r)| r),
            residuals: Vec::new(),
            mode: DeformMode::Iterative,
        }
    }

    #[test]
    fn hard_stage_identity_start() {
        let (store, d) = setup([2, 3, 4]);
        let g = Graph::<f64>::new();
        let fe = rand_tensor(Shape::new(1, 3, 4, 4), 1);
        let (f_e, f_g) = (g.constant(fe.clone()), g.constant(rand_tensor(Shape::new(1, 3, 4, 4), 2)));
        let w = g.constant(rand_tensor(Shape::new(1, 6, 1, 1), 3));
        let prior = identity_state(&g, 2, None);
        let (out, st) = hcdm_forward(&g, &store, &d.head2, f_e, f_g, w, &prior).unwrap();
        assert_eq!(g.tensor(out.warped), fe);
        assert_eq!(st.hard_resolution, Some(Resolution::Half));
        assert!(g.value(st.hard.unwrap()).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn prior_flow_is_upscaled_before_residual() {
        let (store, d) = setup([2, 3, 4]);
        let g = Graph::<f64>::new();
        let fe = rand_tensor(Shape::new(1, 2, 8, 8), 1);
        let (f_e, f_g) = (g.constant(fe.clone()), g.constant(rand_tensor(Shape::new(1, 2, 8, 8), 2)));
        let w = g.constant(Tensor::zeros(Shape::new(1, 4, 1, 1)));
        let half = FlowField::constant(1, 4, 4, 1.0, 0.0, Resolution::Half).into_tensor();
        let prior = identity_state(&g, 2, Some((half, Resolution::Half)));
        let (out, _) = hcdm_forward(&g, &store, &d.head1, f_e, f_g, w, &prior).unwrap();
        let shift = FlowField::constant(1, 8, 8, 2.0, 0.0, Resolution::Full).into_tensor();
        assert_eq!(g.tensor(out.warped), warp_tensor(&fe, &shift).unwrap());
    }

    #[test]
    fn hard_stage_gradients_reach_all_inputs() {
        let (mut store, d) = setup([2, 3, 4]);
        // a trained head is not zero; perturb the last conv
        randomize(&mut store, d.head2.conv2.weight, 0.5, 77);
        let g = Graph::<f64>::new();
        let f_e = g.input(rand_tensor(Shape::new(1, 3, 4, 4), 1));
        let f_g = g.input(rand_tensor(Shape::new(1, 3, 4, 4), 2));
        let w = g.input(rand_tensor(Shape::new(1, 6, 1, 1), 3));
        let prior = identity_state(&g, 2, None);
        let (out, _) = hcdm_forward(&g, &store, &d.head2, f_e, f_g, w, &prior).unwrap();
        let wt = g.constant(rand_tensor(Shape::new(1, 3, 4, 4), 4));
        let grads = g.backward(g.sum(g.mul(out.warped, wt).unwrap()));
        for v in [f_e, f_g, w] {
            assert!(grads.get(v).unwrap().data().iter().any(|&x| x.abs() > 1e-8));
        }
    }

    #[test]
    fn image_chain_identity_translation_and_range() {
        let g = Graph::<f64>::new();
        let x = rand_tensor(Shape::new(1, 3, 16, 16), 9);
        let xv = g.constant(x.clone());
        let zero = |n| Tensor::zeros(Shape::new(1, 2, n, n));
        let mut st = identity_state(&g, 4, Some((zero(16), Resolution::Full)));
        assert!(image_warp_chain(&g, xv, &st).is_err());
        st.residuals = vec![g.constant(zero(8)), g.constant(zero(16))];
        assert_eq!(g.tensor(image_warp_chain(&g, xv, &st).unwrap()), x);

        st.hard = Some(g.constant(FlowField::constant(1, 16, 16, 4.0, 0.0, Resolution::Full).into_tensor()));
        let out = g.tensor(image_warp_chain(&g, xv, &st).unwrap());
        for c in 0..3 {
            for y in 0..16 {
                for xx in 0..16 {
                    assert_eq!(out.at(0, c, y, xx), x.at(0, c, y, (xx + 4).min(15)));
                }
            }
        }

        st.hard = Some(g.constant(smooth_random(Shape::new(1, 2, 16, 16), 3.0, 3.0, 4)));
        st.kg_flow = g.constant(smooth_random(Shape::new(1, 2, 4, 4), 1.0, 1.0, 5));
        let out = g.tensor(image_warp_chain(&g, xv, &st).unwrap());
        let (lo, hi) = x.data().iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        assert!(out.data().iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
    }

    fn perturbed_heads(store: &mut ParamStore<f64>, d: &Deformer, scale: f64) {
        randomize(store, d.head2.conv2.weight, scale, 31);
        randomize(store, d.head1.conv2.weight, scale, 32);
        randomize(store, d.cond.fc3.weight, 1.0, 33);
    }

    #[test]
    fn zero_deformation_is_exact_identity() {
        let (store, d) = setup([2, 3, 4]);
        let g = Graph::<f64>::new();
        let fe = [
            rand_tensor(Shape::new(2, 2, 16, 16), 1),
            rand_tensor(Shape::new(2, 3, 8, 8), 2),
            rand_tensor(Shape::new(2, 4, 4, 4), 3),
        ];
        let f_e = fe.clone().map(|t| g.constant(t));
        let f_g = [(2, 16), (3, 8), (4, 4)].map(|(c, n)| g.constant(rand_tensor(Shape::new(2, c, n, n), 10 + n as u64)));
        let c = d.cond.embed(&g, &store, labels(&g, &[2, 0]), labels(&g, &[2, 0])).unwrap();
        let (outs, st) = d.forward_all(&g, &store, f_e, f_g, &c, SoftMode::Identity).unwrap();
        for (o, t) in outs.iter().zip(&fe) {
            assert_eq!(&g.tensor(o.warped), t);
        }
        let x = rand_tensor(Shape::new(2, 3, 16, 16), 8);
        assert_eq!(g.tensor(image_warp_chain(&g, g.constant(x.clone()), &st).unwrap()), x);
    }

    #[test]
    fn accumulated_state_matches_sequential_warps() {
        let (mut store, d) = setup([2, 3, 4]);
        perturbed_heads(&mut store, &d, 2.0);
        let g = Graph::<f64>::new();
        let smooth = |c, n, seed| g.constant(smooth_random(Shape::new(1, c, n, n), n as f64 / 6.0, 1.0, seed));
        let f_e = [smooth(2, 32, 1), smooth(3, 16, 2), smooth(4, 8, 3)];
        let f_g = [smooth(2, 32, 4), smooth(3, 16, 5), smooth(4, 8, 6)];
        let c = d.cond.embed(&g, &store, labels(&g, &[0]), labels(&g, &[4])).unwrap();
        let (_, st) = d.forward_all(&g, &store, f_e, f_g, &c, SoftMode::Learned).unwrap();
        for r in &st.residuals {
            let m = g.value(*r).data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
            assert!(m > 0.05 && m < 4.0, "residual magnitude {m}");
        }
        let x = smooth(3, 32, 7);
        let direct = g.tensor(image_warp_chain(&g, x, &st).unwrap());
        let coarse = soft_flow_apply_blockwise(&g, hard_warp(&g, x, flow_upscale(&g, st.kg_flow, 4).unwrap()).unwrap(), &st.soft).unwrap();
        let s2 = hard_warp(&g, coarse, flow_upscale(&g, st.residuals[0], 2).unwrap()).unwrap();
        let seq = g.tensor(hard_warp(&g, s2, st.residuals[1]).unwrap());
        let mut worst: f64 = 0.0;
        for ch in 0..3 {
            for y in 4..28 {
                for xx in 4..28 {
                    worst = worst.max((seq.at(0, ch, y, xx) - direct.at(0, ch, y, xx)).abs());
                }
            }
        }
        assert!(worst < 5e-2, "{worst}");
    }

    #[test]
    fn gradcheck_hard_stage() {
        let (mut store, d) = setup([2, 3, 4]);
        perturbed_heads(&mut store, &d, 0.5);
        for seed in 0..10 {
            let inputs = [
                rand_tensor(Shape::new(1, 3, 4, 4), seed),
                rand_tensor(Shape::new(1, 3, 4, 4), 100 + seed),
                rand_tensor(Shape::new(1, 6, 1, 1), 200 + seed),
                rand_tensor(Shape::new(1, 4, 2, 2), 300 + seed),
                rand_tensor(Shape::new(1, 4, 2, 2), 400 + seed),
                rand_tensor(Shape::new(1, 3, 4, 4), 500 + seed),
            ];
            let r = grad_check(
                &inputs,
                |g, v| {
                    let zero_kg = g.constant(Tensor::zeros(Shape::new(1, 8, 1, 1)));
                    let (_, prior) = scdm_forward(g, v[3], v[4], zero_kg, 1, 0.5, SoftMode::Learned, DeformMode::Iterative)?;
                    let (out, _) = hcdm_forward(g, &store, &d.head2, v[0], v[1], v[2], &prior)?;
                    Ok(g.sum(g.mul(out.warped, v[5])?))
                },
                &GradCheckConfig::default(),
            )
            .unwrap();
            assert!(r.passed(1e-3), "seed {seed}: {r:?}");
        }
    }

    #[test]
    fn gradcheck_soft_stage() {
        for seed in 0..10 {
            let inputs = [
                rand_tensor(Shape::new(1, 3, 3, 3), seed),
                rand_tensor(Shape::new(1, 3, 3, 3), 50 + seed),
                rand_tensor(Shape::new(1, 6, 1, 1), 100 + seed).map(|v| 0.3 * v),
                rand_tensor(Shape::new(1, 3, 3, 3), 150 + seed),
            ];
            let r = grad_check(
                &inputs,
                |g, v| {
                    let (out, _) = scdm_forward(g, v[0], v[1], v[2], 1, 0.5, SoftMode::Learned, DeformMode::Iterative)?;
                    Ok(g.sum(g.mul(out.warped, v[3])?))
                },
                &GradCheckConfig::default(),
            )
            .unwrap();
            assert!(r.passed(1e-3), "seed {seed}: {r:?}");
        }
    }
}
