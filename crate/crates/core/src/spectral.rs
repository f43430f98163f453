//! Spectral normalization by power iteration.
//!
//! A weight is viewed as a matrix `(out, rest)`. The persistent state is the
//! left singular-vector estimate `u`; each training step runs one power
//! iteration, and the forward pass divides the weight by `u^T W v` with
//! `v = normalize(W^T u)`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

const SN_EPS: f64 = 1e-12;

fn dims<F: Real>(w: &Tensor<F>) -> (usize, usize) {
    let rows = w.shape().batch();
    (rows, w.numel() / rows.max(1))
}

fn normalize<F: Real>(v: &mut [F]) {
    let norm = v.iter().map(|&x| x * x).sum::<F>().sqrt();
    let d = norm + F::lit(SN_EPS);
    for x in v {
        *x /= d;
    }
}

/// `W^T u`, normalized.
fn right_vector<F: Real>(w: &Tensor<F>, u: &[F]) -> Vec<F> {
    let (rows, cols) = dims(w);
    let mut v = vec![F::zero(); cols];
    F::gemm(true, false, cols, 1, rows, F::one(), w.data(), u, F::zero(), &mut v);
    normalize(&mut v);
    v
}

/// Random unit vector of length `out` to seed the estimate.
pub fn init_state<F: Real>(out: usize, rng: &mut impl Rng) -> Vec<F> {
    let mut u: Vec<F> = (0..out).map(|_| F::lit(StandardNormal.sample(rng))).collect();
    normalize(&mut u);
    u
}

/// One power-iteration update of `u` for weight `w`.
pub fn power_iteration<F: Real>(w: &Tensor<F>, u: &mut [F]) {
    let (rows, _) = dims(w);
    let v = right_vector(w, u);
    let mut next = vec![F::zero(); rows];
    F::gemm(false, false, rows, 1, v.len(), F::one(), w.data(), &v, F::zero(), &mut next);
    normalize(&mut next);
    u.copy_from_slice(&next);
}

/// Current singular-value estimate `u^T W v`.
pub fn sigma_estimate<F: Real>(w: &Tensor<F>, u: &[F]) -> F {
    let (rows, _) = dims(w);
    let v = right_vector(w, u);
    let mut wv = vec![F::zero(); rows];
    F::gemm(false, false, rows, 1, v.len(), F::one(), w.data(), &v, F::zero(), &mut wv);
    u.iter().zip(&wv).map(|(&a, &b)| a * b).sum::<F>()
}

/// Runs one power iteration on every spectrally normalized parameter.
pub fn update_store<F: Real>(store: &mut ParamStore<F>) {
    for p in store.iter_mut() {
        if let Some(mut u) = p.sn_state.take() {
            power_iteration(p.value(), &mut u);
            p.sn_state = Some(u);
        }
    }
}

impl<F: Real> Graph<F> {
    /// `w / sigma` with `sigma = u^T W v`; `u` and `v` are constants.
    pub fn spectral_normalize(&self, w: Var, u: &[F]) -> Var {
        let vw = self.value(w);
        let shape = vw.shape();
        let (rows, cols) = dims(&vw);
        debug_assert_eq!(u.len(), rows);
        let v = right_vector(&vw, u);
        let sigma = sigma_estimate(&vw, u).max(F::lit(SN_EPS));
        let out = vw.map(|x| x / sigma);
        let u = u.to_vec();
        self.record(out, &[w], move |g, _| {
            // dL/dW = g / sigma - <g, W> / sigma^2 * u v^T
            let dot: F = g.data().iter().zip(vw.data()).map(|(&a, &b)| a * b).sum();
            let k = dot / (sigma * sigma);
            let mut gw = Tensor::zeros(shape);
            let gd = gw.data_mut();
            for r in 0..rows {
                for c in 0..cols {
                    let i = r * cols + c;
                    gd[i] = g.data()[i] / sigma - k * u[r] * v[c];
                }
            }
            vec![Some(gw)]
        })
    }
}

impl<F: Real> ParamStore<F> {
    /// Leaf for `id`, spectrally normalized when the parameter carries state.
    pub fn sn_var(&self, g: &Graph<F>, id: ParamId) -> Var {
        let w = self.var(g, id);
        match &self.get(id).sn_state {
            Some(u) => g.spectral_normalize(w, u),
            None => w,
        }
    }

    /// Attaches a fresh singular-vector estimate to parameter `id`.
    pub fn enable_spectral_norm(&mut self, id: ParamId, rng: &mut impl Rng) -> Result<()> {
        let rows = self.get(id).shape().batch();
        self.get_mut(id).sn_state = Some(init_state(rows, rng));
        Ok(())
    }
}
