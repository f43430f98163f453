//! Central finite-difference checks of reverse-mode gradients (64-bit).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub eps: f64,
    /// Lower bound of the relative-error denominator, so coordinates whose
    /// true derivative is ~0 are judged on absolute error.
    pub floor: f64,
    /// Check at most this many randomly chosen coordinates per tensor.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-4,
            floor: 1e-6,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Worst {
    pub tensor: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    pub non_finite: bool,
    pub worst: Option<Worst>,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        !self.non_finite && self.max_rel_error < tol
    }

    fn record(&mut self, tensor: usize, index: usize, analytic: f64, numeric: f64, floor: f64) {
        self.checked += 1;
        if !analytic.is_finite() || !numeric.is_finite() {
            self.non_finite = true;
            self.max_rel_error = f64::INFINITY;
            self.worst = Some(Worst { tensor, index, analytic, numeric });
            return;
        }
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(floor);
        self.max_abs_error = self.max_abs_error.max(abs);
        if rel > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = rel;
            self.worst = Some(Worst { tensor, index, analytic, numeric });
        }
    }

    fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.non_finite |= other.non_finite;
        self.max_abs_error = self.max_abs_error.max(other.max_abs_error);
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
    }
}

fn coords(len: usize, cfg: &GradCheckConfig, salt: u64) -> Vec<usize> {
    match cfg.max_coords {
        Some(k) if k < len => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let mut idx = sample(&mut rng, len, k).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..len).collect(),
    }
}

fn scalar_of(g: &Graph<f64>, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.numel() != 1 {
        return Err(Error::Shape(format!("gradient check needs a scalar function, got {}", t.shape())));
    }
    Ok(t.item())
}

/// Checks `f` with respect to every tensor in `inputs`.
pub fn grad_check(
    inputs: &[Tensor<f64>],
    f: impl Fn(&Graph<f64>, &[Var]) -> Result<Var>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&g, &vars)?;
    scalar_of(&g, out)?;
    let grads = g.backward(out);
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
        .collect();

    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&g, &vars)?;
        scalar_of(&g, out)
    };

    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for i in coords(t.numel(), cfg, ti as u64) {
            let x0 = t.data()[i];
            work[ti].data_mut()[i] = x0 + cfg.eps;
            let fp = eval(&work)?;
            work[ti].data_mut()[i] = x0 - cfg.eps;
            let fm = eval(&work)?;
            work[ti].data_mut()[i] = x0;
            let numeric = (fp - fm) / (2.0 * cfg.eps);
            report.record(ti, i, analytic[ti].data()[i], numeric, cfg.floor);
        }
    }
    Ok(report)
}

/// Checks `f` with respect to the parameters of the stores exposed by
/// `stores_of`. The model is restored exactly afterwards.
pub fn grad_check_params<M>(
    model: &mut M,
    stores_of: impl Fn(&mut M) -> Vec<&mut ParamStore<f64>>,
    f: impl Fn(&Graph<f64>, &M) -> Result<Var>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let analytic: Vec<Vec<Tensor<f64>>> = {
        let g = Graph::new();
        let out = f(&g, model)?;
        scalar_of(&g, out)?;
        let grads = g.backward(out);
        stores_of(model)
            .into_iter()
            .map(|s| {
                s.collect_grads(&g, &grads);
                let t: Vec<Tensor<f64>> = s
                    .iter()
                    .map(|p| p.grad.clone().unwrap_or_else(|| Tensor::zeros(p.shape())))
                    .collect();
                s.zero_grads();
                t
            })
            .collect()
    };

    let eval = |model: &M| -> Result<f64> {
        let g = Graph::new();
        let out = f(&g, model)?;
        scalar_of(&g, out)
    };

    let mut report = GradCheckReport::default();
    let mut flat = 0usize;
    for (si, store_grads) in analytic.iter().enumerate() {
        for (pi, grad) in store_grads.iter().enumerate() {
            let mut part = GradCheckReport::default();
            for i in coords(grad.numel(), cfg, (si * 1000 + pi) as u64) {
                let x0 = stores_of(model)[si].iter().nth(pi).expect("param").value().data()[i];
                let set = |model: &mut M, x: f64| {
                    let mut stores = stores_of(model);
                    let p = stores[si].iter_mut().nth(pi).expect("param");
                    p.value_mut().data_mut()[i] = x;
                };
                set(model, x0 + cfg.eps);
                let fp = eval(model);
                set(model, x0 - cfg.eps);
                let fm = eval(model);
                set(model, x0);
                let numeric = (fp? - fm?) / (2.0 * cfg.eps);
                part.record(flat, i, grad.data()[i], numeric, cfg.floor);
            }
            report.merge(part);
            flat += 1;
        }
    }
    Ok(report)
}
