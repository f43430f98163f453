//! Named gradient-check cases over the warping kernels, the deformation
//! stages and the losses, run in 64-bit over several seeds.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::deform::{
    hcdm_forward, image_warp_chain, scdm_forward, DeformConfig, DeformMode, Deformer, SoftMode, ViewLabel,
};
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
use crate::graph::{Graph, Var};
use crate::losses::{
    adv_d, adv_g, content_loss, cross_entropy, kl_loss, pixel_loss, rough_loss, total_eg, uniform_cross_entropy,
    EgTerms, LossWeights,
};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Shape, Tensor};
use crate::warpkit::{
    channel_affinity, channel_soft_warp, flow_compose, flow_mean_per_item, flow_upscale, hard_warp, kg_conv,
    soft_flow, soft_flow_apply_blockwise, soft_flow_expected, soft_spatial_warp,
};

pub const WARPKIT_TOL: f64 = 1e-4;
pub const COMPOSITE_TOL: f64 = 1e-3;
pub const DEFAULT_SEEDS: u64 = 10;

/// Temperature used by the soft cases; small enough to be sharp, large
/// enough that the finite differences stay in the linear regime.
const TAU: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Warpkit,
    Deform,
    Losses,
    /// Deliberately wrong backward passes; the suite must reject them.
    Mutant,
}

impl Group {
    pub fn name(self) -> &'static str {
        match self {
            Group::Warpkit => "warpkit",
            Group::Deform => "deform",
            Group::Losses => "losses",
            Group::Mutant => "mutant",
        }
    }

    pub fn tolerance(self) -> f64 {
        match self {
            Group::Warpkit | Group::Mutant => WARPKIT_TOL,
            Group::Deform | Group::Losses => COMPOSITE_TOL,
        }
    }
}

type CaseFn = fn(u64) -> Result<GradCheckReport>;

#[derive(Clone, Copy)]
pub struct Case {
    pub name: &'static str,
    pub group: Group,
    run: CaseFn,
}

impl std::fmt::Debug for Case {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.group.name(), self.name)
    }
}

impl Case {
    pub fn run(&self, seed: u64) -> Result<GradCheckReport> {
        (self.run)(seed)
    }
}

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: &'static str,
    pub group: Group,
    pub tolerance: f64,
    pub seeds: u64,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Seed of the worst relative error.
    pub worst_seed: u64,
    pub seconds: f64,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }

    /// For a mutant, passing the suite means the check rejected it.
    pub fn expected(&self) -> bool {
        match self.group {
            Group::Mutant => !self.passed(),
            _ => self.passed(),
        }
    }

    pub fn line(&self) -> String {
        let verdict = match (self.group, self.passed()) {
            (Group::Mutant, false) => "DETECTED",
            (Group::Mutant, true) => "MISSED",
            (_, true) => "ok",
            (_, false) => "FAIL",
        };
        format!(
            "{:<8} {:<8} {:<28} max_rel={:.3e} tol={:.0e} seeds={} coords={} {:.2}s",
            verdict,
            self.group.name(),
            self.name,
            self.max_rel_error,
            self.tolerance,
            self.seeds,
            self.checked,
            self.seconds
        )
    }
}

pub fn rand_tensor(shape: Shape, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d: Vec<f64> = (0..shape.numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(shape, d).expect("length matches shape")
}

fn s(n: usize, c: usize, h: usize, w: usize) -> Shape {
    Shape::new(n, c, h, w)
}

fn check(inputs: &[Tensor<f64>], f: impl Fn(&Graph<f64>, &[Var]) -> Result<Var>) -> Result<GradCheckReport> {
    grad_check(inputs, f, &GradCheckConfig::default())
}

fn check_sampled(
    inputs: &[Tensor<f64>],
    coords: usize,
    seed: u64,
    f: impl Fn(&Graph<f64>, &[Var]) -> Result<Var>,
) -> Result<GradCheckReport> {
    let cfg = GradCheckConfig {
        max_coords: Some(coords),
        seed,
        ..GradCheckConfig::default()
    };
    grad_check(inputs, f, &cfg)
}

/// `sum(y * w)` for a fixed random `w` of `y`'s shape.
fn project(g: &Graph<f64>, y: Var, w: Var) -> Result<Var> {
    Ok(g.sum(g.mul(y, w)?))
}

/// Flow offsets kept away from integer cell boundaries, where bilinear
/// sampling has kinks.
fn fractional_flow(shape: Shape, seed: u64) -> Tensor<f64> {
    rand_tensor(shape, seed).map(|v| (v * 1.2).round() + 0.3 + 0.4 * v.abs())
}

fn onehot(idx: &[usize], k: usize) -> Tensor<f64> {
    let labels: Vec<ViewLabel> = idx.iter().map(|&i| ViewLabel::new(i, k).expect("index < k")).collect();
    ViewLabel::batch_tensor(&labels).expect("same k")
}

// ---- warpkit ---------------------------------------------------------------

fn case_hard_warp(seed: u64) -> Result<GradCheckReport> {
    let x = rand_tensor(s(1, 2, 4, 4), seed);
    let f = fractional_flow(s(1, 2, 4, 4), 100 + seed);
    let w = rand_tensor(s(1, 2, 4, 4), 200 + seed);
    check(&[x, f, w], |g, v| project(g, hard_warp(g, v[0], v[1])?, v[2]))
}

fn case_kg_conv(k: usize, seed: u64) -> Result<GradCheckReport> {
    let x = rand_tensor(s(2, 3, 3, 3), seed);
    let wd = rand_tensor(s(2, 2 * 3 * k * k, 1, 1), 50 + seed);
    let w = rand_tensor(s(2, 2, 3, 3), 90 + seed);
    check(&[x, wd, w], move |g, v| project(g, kg_conv(g, v[0], v[1], k)?, v[2]))
}

fn case_kg_conv1(seed: u64) -> Result<GradCheckReport> {
    case_kg_conv(1, seed)
}

fn case_kg_conv3(seed: u64) -> Result<GradCheckReport> {
    case_kg_conv(3, seed)
}

fn case_soft_flow(seed: u64) -> Result<GradCheckReport> {
    let e = rand_tensor(s(1, 3, 2, 3), seed);
    let t = rand_tensor(s(1, 3, 2, 3), 50 + seed);
    let w = rand_tensor(s(1, 1, 6, 6), 90 + seed);
    check(&[e, t, w], |g, v| {
        let sf = soft_flow(g, v[0], v[1], TAU)?;
        let wt = g.reshape(v[2], g.shape(sf.weights))?;
        project(g, sf.weights, wt)
    })
}

fn case_soft_spatial_warp(seed: u64) -> Result<GradCheckReport> {
    let e = rand_tensor(s(1, 3, 2, 3), seed);
    let t = rand_tensor(s(1, 3, 2, 3), 50 + seed);
    let w = rand_tensor(s(1, 3, 2, 3), 90 + seed);
    check(&[e, t, w], |g, v| {
        let sf = soft_flow(g, v[0], v[1], TAU)?;
        project(g, soft_spatial_warp(g, v[0], &sf)?, v[2])
    })
}

fn case_channel_affinity(seed: u64) -> Result<GradCheckReport> {
    let a = rand_tensor(s(1, 3, 2, 2), seed);
    let b = rand_tensor(s(1, 3, 2, 2), 30 + seed);
    let w = rand_tensor(s(1, 1, 3, 3), 60 + seed);
    check(&[a, b, w], |g, v| {
        let cov = channel_affinity(g, v[0], v[1], TAU)?;
        let wt = g.reshape(v[2], g.shape(cov))?;
        project(g, cov, wt)
    })
}

fn case_channel_soft_warp(seed: u64) -> Result<GradCheckReport> {
    let a = rand_tensor(s(1, 3, 2, 2), seed);
    let b = rand_tensor(s(1, 3, 2, 2), 30 + seed);
    let w = rand_tensor(s(1, 3, 2, 2), 60 + seed);
    check(&[a, b, w], |g, v| project(g, channel_soft_warp(g, v[0], v[1], TAU)?, v[2]))
}

fn case_blockwise(seed: u64) -> Result<GradCheckReport> {
    let hi = rand_tensor(s(1, 2, 4, 4), seed);
    let e = rand_tensor(s(1, 2, 2, 2), 40 + seed);
    let t = rand_tensor(s(1, 2, 2, 2), 80 + seed);
    let w = rand_tensor(s(1, 2, 4, 4), 120 + seed);
    check(&[hi, e, t, w], |g, v| {
        let sf = soft_flow(g, v[1], v[2], TAU)?;
        project(g, soft_flow_apply_blockwise(g, v[0], &sf)?, v[3])
    })
}

fn case_soft_flow_expected(seed: u64) -> Result<GradCheckReport> {
    let e = rand_tensor(s(1, 2, 3, 3), seed);
    let t = rand_tensor(s(1, 2, 3, 3), 40 + seed);
    let w = rand_tensor(s(1, 2, 3, 3), 80 + seed);
    check(&[e, t, w], |g, v| {
        let sf = soft_flow(g, v[0], v[1], TAU)?;
        project(g, soft_flow_expected(g, &sf)?, v[2])
    })
}

fn case_flow_upscale(seed: u64) -> Result<GradCheckReport> {
    let f = rand_tensor(s(1, 2, 3, 3), seed);
    let w = rand_tensor(s(1, 2, 6, 6), 40 + seed);
    check(&[f, w], |g, v| project(g, flow_upscale(g, v[0], 2)?, v[1]))
}

fn case_flow_compose(seed: u64) -> Result<GradCheckReport> {
    let prior = rand_tensor(s(1, 2, 4, 4), seed).map(|v| 0.8 * v + 0.05);
    let res = rand_tensor(s(1, 2, 4, 4), 20 + seed).map(|v| 0.7 * v + 0.13);
    let w = rand_tensor(s(1, 2, 4, 4), 40 + seed);
    check(&[prior, res, w], |g, v| project(g, flow_compose(g, v[0], v[1])?, v[2]))
}

fn case_flow_mean(seed: u64) -> Result<GradCheckReport> {
    let f = rand_tensor(s(2, 2, 3, 3), seed);
    let w = rand_tensor(s(2, 2, 1, 1), 40 + seed);
    check(&[f, w], |g, v| project(g, flow_mean_per_item(g, v[0]), v[1]))
}

// ---- deform ----------------------------------------------------------------

fn deformer(widths: [usize; 3], views: usize) -> Result<(ParamStore<f64>, Deformer)> {
    let cfg = DeformConfig {
        widths,
        views,
        cond_dim: 6,
        kg_kernel: 1,
        tau: TAU,
        mode: DeformMode::Iterative,
    };
    let mut store = ParamStore::new("gen");
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let d = Deformer::new(&mut store, cfg, &mut rng)?;
    // zero-initialized heads would make every residual path vanish
    let mut randomize = |id: ParamId, scale: f64, seed: u64| {
        let shape = store.get(id).shape();
        *store.get_mut(id).value_mut() = rand_tensor(shape, seed).map(|v| v * scale);
    };
    randomize(d.head2.conv2.weight, 0.5, 31);
    randomize(d.head1.conv2.weight, 0.5, 32);
    randomize(d.cond.fc3.weight, 1.0, 33);
    Ok((store, d))
}

fn case_condition_branch(seed: u64) -> Result<GradCheckReport> {
    let (store, d) = deformer([2, 3, 4], 5)?;
    let c_a = onehot(&[(seed % 5) as usize, 1], 5);
    let c_b = rand_tensor(s(2, 5, 1, 1), seed).map(|v| 0.5 * (v + 1.0));
    let mu = rand_tensor(s(2, 2, 1, 1), 20 + seed);
    let len = d.cfg.stage_len(0);
    let w = rand_tensor(s(2, len, 1, 1), 40 + seed);
    check(&[c_b, mu, w], |g, v| {
        let cond = d.cond.embed(g, &store, g.constant(c_a.clone()), v[0])?;
        let w1 = d.cond.update(g, &store, &cond, v[1], 1)?;
        let a = project(g, w1, v[2])?;
        g.add(a, g.sum(cond.w_diff3))
    })
}

fn case_soft_stage(seed: u64) -> Result<GradCheckReport> {
    let inputs = [
        rand_tensor(s(1, 3, 3, 3), seed),
        rand_tensor(s(1, 3, 3, 3), 50 + seed),
        rand_tensor(s(1, 6, 1, 1), 100 + seed).map(|v| 0.3 * v),
        rand_tensor(s(1, 3, 3, 3), 150 + seed),
    ];
    check(&inputs, |g, v| {
        let (out, _) = scdm_forward(g, v[0], v[1], v[2], 1, TAU, SoftMode::Learned, DeformMode::Iterative)?;
        project(g, out.warped, v[3])
    })
}

fn case_hard_stage(seed: u64) -> Result<GradCheckReport> {
    let (store, d) = deformer([2, 3, 4], 5)?;
    let inputs = [
        rand_tensor(s(1, 3, 4, 4), seed),
        rand_tensor(s(1, 3, 4, 4), 100 + seed),
        rand_tensor(s(1, 6, 1, 1), 200 + seed),
        rand_tensor(s(1, 4, 2, 2), 300 + seed),
        rand_tensor(s(1, 4, 2, 2), 400 + seed),
        rand_tensor(s(1, 3, 4, 4), 500 + seed),
    ];
    check(&inputs, |g, v| {
        let zero_kg = g.constant(Tensor::zeros(s(1, 8, 1, 1)));
        let (_, prior) = scdm_forward(g, v[3], v[4], zero_kg, 1, TAU, SoftMode::Learned, DeformMode::Iterative)?;
        let (out, _) = hcdm_forward(g, &store, &d.head2, v[0], v[1], v[2], &prior)?;
        project(g, out.warped, v[5])
    })
}

/// All three stages followed by the image warp chain, checked on a
/// random subset of coordinates.
fn case_warp_chain(seed: u64) -> Result<GradCheckReport> {
    let (store, d) = deformer([2, 3, 4], 5)?;
    let c_a = onehot(&[1], 5);
    let c_b = onehot(&[(2 + seed % 3) as usize], 5);
    let inputs = [
        rand_tensor(s(1, 2, 8, 8), seed),
        rand_tensor(s(1, 3, 4, 4), 100 + seed),
        rand_tensor(s(1, 4, 2, 2), 200 + seed),
        rand_tensor(s(1, 2, 8, 8), 300 + seed),
        rand_tensor(s(1, 3, 4, 4), 400 + seed),
        rand_tensor(s(1, 4, 2, 2), 500 + seed),
        rand_tensor(s(1, 3, 8, 8), 600 + seed),
        rand_tensor(s(1, 3, 8, 8), 700 + seed),
    ];
    check_sampled(&inputs, 12, seed, |g, v| {
        let cond = d.cond.embed(g, &store, g.constant(c_a.clone()), g.constant(c_b.clone()))?;
        let (outs, state) = d.forward_all(g, &store, [v[0], v[1], v[2]], [v[3], v[4], v[5]], &cond, SoftMode::Learned)?;
        let img = image_warp_chain(g, v[6], &state)?;
        let a = project(g, img, v[7])?;
        g.add(a, g.sum(outs[0].warped))
    })
}

// ---- losses ----------------------------------------------------------------

fn scores(seed: u64, k: u64) -> Tensor<f64> {
    rand_tensor(s(2, 1, 1, 1), seed * 17 + k).map(|v| 3.0 * v)
}

fn case_adv_d(seed: u64) -> Result<GradCheckReport> {
    check(&[scores(seed, 1), scores(seed, 2)], |g, v| Ok(adv_d(g, v[0], v[1])))
}

fn case_adv_g(seed: u64) -> Result<GradCheckReport> {
    check(&[scores(seed, 3)], |g, v| Ok(adv_g(g, v[0])))
}

fn case_cross_entropy(seed: u64) -> Result<GradCheckReport> {
    let logits = rand_tensor(s(2, 9, 1, 1), seed + 100);
    let lab = onehot(&[(seed % 9) as usize, 3], 9);
    check(&[logits], |g, v| cross_entropy(g, v[0], g.constant(lab.clone())))
}

fn case_uniform_ce(seed: u64) -> Result<GradCheckReport> {
    check(&[rand_tensor(s(2, 9, 1, 1), seed + 100)], |g, v| Ok(uniform_cross_entropy(g, v[0])))
}

fn case_pixel(seed: u64) -> Result<GradCheckReport> {
    let a = rand_tensor(s(2, 3, 4, 4), seed + 200);
    let b = rand_tensor(s(2, 3, 4, 4), seed + 300);
    check(&[a, b], |g, v| pixel_loss(g, v[0], v[1]))
}

fn case_content(seed: u64) -> Result<GradCheckReport> {
    let a = rand_tensor(s(2, 3, 4, 4), seed + 200);
    let b = rand_tensor(s(2, 3, 4, 4), seed + 300);
    let c = rand_tensor(s(2, 4, 2, 2), seed + 400);
    let d = rand_tensor(s(2, 4, 2, 2), seed + 500);
    check(&[a, b, c, d], |g, v| content_loss(g, &[v[0], v[2]], &[v[1], v[3]]))
}

fn case_kl(seed: u64) -> Result<GradCheckReport> {
    let mu = rand_tensor(s(2, 4, 1, 1), seed + 400);
    let lv = rand_tensor(s(2, 4, 1, 1), seed + 500);
    check(&[mu, lv], |g, v| kl_loss(g, v[0], v[1]))
}

fn case_rough(seed: u64) -> Result<GradCheckReport> {
    let a = rand_tensor(s(2, 3, 4, 4), seed + 200);
    let b = rand_tensor(s(2, 3, 4, 4), seed + 300);
    let logits = rand_tensor(s(2, 9, 1, 1), seed + 100);
    let lab = onehot(&[(seed % 9) as usize, 3], 9);
    check(&[a, b, logits], |g, v| rough_loss(g, v[0], v[1], v[2], g.constant(lab.clone())))
}

fn case_total_eg(seed: u64) -> Result<GradCheckReport> {
    let t = rand_tensor(s(8, 1, 1, 1), seed + 600);
    check(&[t], |g, v| {
        let flat = g.reshape(v[0], Shape::new(1, 8, 1, 1))?;
        let mut parts = Vec::with_capacity(8);
        for i in 0..8 {
            let pick = g.sum(g.mul(flat, g.constant(onehot(&[i], 8)))?);
            parts.push(g.square(pick));
        }
        let terms = EgTerms {
            adv_g: parts[0],
            cls_eg: parts[1],
            content: parts[2],
            pixel: parts[3],
            kl: parts[4],
            cls_c_enc: parts[5],
            cls_z_enc: parts[6],
            rough: parts[7],
        };
        total_eg(g, &terms, &LossWeights::default())
    })
}

// ---- mutants ---------------------------------------------------------------

/// Bilinear warp whose backward pass reports 90% of the true gradient.
fn case_scaled_backward(seed: u64) -> Result<GradCheckReport> {
    let x = rand_tensor(s(1, 2, 4, 4), seed);
    let f = fractional_flow(s(1, 2, 4, 4), 100 + seed);
    let w = rand_tensor(s(1, 2, 4, 4), 200 + seed);
    check(&[x, f, w], |g, v| {
        let y = g.unary(hard_warp(g, v[0], v[1])?, |a| a, |_| 0.9);
        project(g, y, v[2])
    })
}

/// Attention whose graph drops the path to the target features.
fn case_detached_target(seed: u64) -> Result<GradCheckReport> {
    let e = rand_tensor(s(1, 3, 2, 3), seed);
    let t = rand_tensor(s(1, 3, 2, 3), 50 + seed);
    let w = rand_tensor(s(1, 3, 2, 3), 90 + seed);
    check(&[e, t, w], |g, v| {
        let sf = soft_flow(g, v[0], g.detach(v[1]), TAU)?;
        project(g, soft_spatial_warp(g, v[0], &sf)?, v[2])
    })
}

pub fn cases() -> Vec<Case> {
    let c = |name, group, run: CaseFn| Case { name, group, run };
    vec![
        c("hard_warp", Group::Warpkit, case_hard_warp),
        c("kg_conv_k1", Group::Warpkit, case_kg_conv1),
        c("kg_conv_k3", Group::Warpkit, case_kg_conv3),
        c("soft_flow", Group::Warpkit, case_soft_flow),
        c("soft_spatial_warp", Group::Warpkit, case_soft_spatial_warp),
        c("channel_affinity", Group::Warpkit, case_channel_affinity),
        c("channel_soft_warp", Group::Warpkit, case_channel_soft_warp),
        c("soft_flow_apply_blockwise", Group::Warpkit, case_blockwise),
        c("soft_flow_expected", Group::Warpkit, case_soft_flow_expected),
        c("flow_upscale", Group::Warpkit, case_flow_upscale),
        c("flow_compose", Group::Warpkit, case_flow_compose),
        c("flow_mean", Group::Warpkit, case_flow_mean),
        c("condition_branch", Group::Deform, case_condition_branch),
        c("soft_stage", Group::Deform, case_soft_stage),
        c("hard_stage", Group::Deform, case_hard_stage),
        c("warp_chain", Group::Deform, case_warp_chain),
        c("adv_d", Group::Losses, case_adv_d),
        c("adv_g", Group::Losses, case_adv_g),
        c("cross_entropy", Group::Losses, case_cross_entropy),
        c("uniform_cross_entropy", Group::Losses, case_uniform_ce),
        c("pixel", Group::Losses, case_pixel),
        c("content", Group::Losses, case_content),
        c("kl", Group::Losses, case_kl),
        c("rough", Group::Losses, case_rough),
        c("total_eg", Group::Losses, case_total_eg),
        c("scaled_backward", Group::Mutant, case_scaled_backward),
        c("detached_target", Group::Mutant, case_detached_target),
    ]
}

/// Cases matching `scope`: `all` (every non-mutant case), a group name,
/// or a single case name.
pub fn select(scope: &str) -> Result<Vec<Case>> {
    let all = cases();
    let picked: Vec<Case> = match scope {
        "all" => all.into_iter().filter(|c| c.group != Group::Mutant).collect(),
        _ => all
            .into_iter()
            .filter(|c| c.group.name() == scope || c.name == scope)
            .collect(),
    };
    if picked.is_empty() {
        let names: Vec<&str> = cases().iter().map(|c| c.name).collect();
        return Err(Error::InvalidArgument(format!(
            "unknown gradient-check scope {scope:?}; use all, warpkit, deform, losses, mutant or one of {}",
            names.join(", ")
        )));
    }
    Ok(picked)
}

/// Runs `case` for seeds `0..seeds` and keeps the worst report.
pub fn run_case(case: &Case, seeds: u64) -> Result<CaseResult> {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut worst_seed = 0;
    let mut checked = 0;
    for seed in 0..seeds {
        let r = case.run(seed)?;
        checked += r.checked;
        let rel = if r.non_finite { f64::INFINITY } else { r.max_rel_error };
        if rel > worst || seed == 0 {
            worst = rel;
            worst_seed = seed;
        }
    }
    Ok(CaseResult {
        name: case.name,
        group: case.group,
        tolerance: case.group.tolerance(),
        seeds,
        max_rel_error: worst,
        checked,
        worst_seed,
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn run_suite(cases: &[Case], seeds: u64, mut on_case: impl FnMut(&CaseResult)) -> Result<Vec<CaseResult>> {
    let mut out = Vec::with_capacity(cases.len());
    for c in cases {
        let r = run_case(c, seeds)?;
        on_case(&r);
        out.push(r);
    }
    Ok(out)
}
