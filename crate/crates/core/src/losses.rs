//! Training objectives and their weighted totals.
//!
//! Logits and labels are `(batch, K, 1, 1)`; labels are probability
//! vectors (one-hot for dataset views). Scalar losses are `(1, 1, 1, 1)`.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::ops::Axis;
use crate::tensor::Real;

/// Weights of the content, pixel, KL and rough terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub content: f64,
    pub pixel: f64,
    pub kl: f64,
    pub rough: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            content: 5.0,
            pixel: 5.0,
            kl: 0.1,
            rough: 10.0,
        }
    }
}

/// Names of the per-step components, in report order.
pub const COMPONENTS: [&str; 11] = [
    "adv_d", "adv_g", "cls_c", "cls_eg", "pixel", "content", "kl", "cls_c_enc", "cls_z_enc", "dac", "rough",
];
pub const TOTALS: [&str; 2] = ["total_eg", "total_d"];

fn check_same<F: Real>(g: &Graph<F>, what: &str, a: Var, b: Var) -> Result<()> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sa != sb {
        return Err(Error::Shape(format!("{what}: {sa} vs {sb}")));
    }
    Ok(())
}

fn batch_mean<F: Real>(g: &Graph<F>, per_item: Var) -> Var {
    g.mean(per_item)
}

/// Hinge loss of the discriminator: `mean max(0, 1 - real) + mean max(0, 1 + fake)`.
/// Scores of generated images must come from detached inputs.
pub fn adv_d<F: Real>(g: &Graph<F>, d_real: Var, d_fake: Var) -> Var {
    let real = g.relu(g.add_scalar(g.neg(d_real), 1.0));
    let fake = g.relu(g.add_scalar(d_fake, 1.0));
    g.add(batch_mean(g, real), batch_mean(g, fake)).expect("scalars")
}

/// Generator hinge loss `mean max(0, 1 - fake)`.
pub fn adv_g<F: Real>(g: &Graph<F>, d_fake: Var) -> Var {
    batch_mean(g, g.relu(g.add_scalar(g.neg(d_fake), 1.0)))
}

/// Mean over the batch of `-sum_k target_k * log softmax(logits)_k`.
pub fn cross_entropy<F: Real>(g: &Graph<F>, logits: Var, target: Var) -> Result<Var> {
    check_same(g, "cross entropy logits and labels", logits, target)?;
    let t = g.value(target);
    let k = t.shape().channels();
    for (i, row) in t.data().chunks(k).enumerate() {
        let sum: f64 = row.iter().map(|v| v.as_f64()).sum();
        if row.iter().any(|v| v.as_f64() < 0.0) || (sum - 1.0).abs() > 1e-4 {
            return Err(Error::InvalidArgument(format!(
                "label {i} is not a probability vector over {k} views"
            )));
        }
    }
    let logp = g.log_softmax(logits, Axis::Channel);
    let per_item = g.sum_axes(g.mul(logp, target)?, [false, true, false, false]);
    Ok(g.neg(batch_mean(g, per_item)))
}

/// Mean absolute difference.
pub fn pixel_loss<F: Real>(g: &Graph<F>, x_hat: Var, x: Var) -> Result<Var> {
    check_same(g, "pixel loss", x_hat, x)?;
    Ok(g.mean(g.abs(g.sub(x_hat, x)?)))
}

/// Sum over pyramid levels of the mean absolute feature difference.
pub fn content_loss<F: Real>(g: &Graph<F>, f_hat: &[Var], f: &[Var]) -> Result<Var> {
    if f_hat.len() != f.len() || f.is_empty() {
        return Err(Error::Shape(format!("content loss needs matching pyramids, got {} and {}", f_hat.len(), f.len())));
    }
    let mut total = pixel_loss(g, f_hat[0], f[0])?;
    for (&a, &b) in f_hat.iter().zip(f).skip(1) {
        total = g.add(total, pixel_loss(g, a, b)?)?;
    }
    Ok(total)
}

/// `mean_batch 0.5 * sum_d (mu^2 + exp(log_var) - 1 - log_var)`.
pub fn kl_loss<F: Real>(g: &Graph<F>, mu: Var, log_var: Var) -> Result<Var> {
    check_same(g, "kl loss", mu, log_var)?;
    let t = g.sub(g.add(g.square(mu), g.exp(log_var))?, g.add_scalar(log_var, 1.0))?;
    let per_item = g.sum_axes(t, [false, true, true, true]);
    Ok(g.scale(batch_mean(g, per_item), 0.5))
}

/// `-mean_batch sum_k (1/K) log softmax(logits)_k`: pushes the latent
/// classifier towards a uniform prediction. The caller freezes the
/// classifier's parameters so only the encoder is trained by it.
pub fn uniform_cross_entropy<F: Real>(g: &Graph<F>, logits: Var) -> Var {
    let k = g.shape(logits).channels();
    let logp = g.log_softmax(logits, Axis::Channel);
    let per_item = g.sum_axes(logp, [false, true, false, false]);
    g.scale(batch_mean(g, per_item), -1.0 / k as f64)
}

/// Mean absolute error to the target plus the view cross-entropy of the
/// rough image.
pub fn rough_loss<F: Real>(g: &Graph<F>, x_rough: Var, x_b: Var, cls_logits: Var, c_b: Var) -> Result<Var> {
    let l1 = pixel_loss(g, x_rough, x_b)?;
    g.add(l1, cross_entropy(g, cls_logits, c_b)?)
}

/// Graph terms of the encoder/generator objective.
#[derive(Clone, Copy, Debug)]
pub struct EgTerms {
    pub adv_g: Var,
    pub cls_eg: Var,
    pub content: Var,
    pub pixel: Var,
    pub kl: Var,
    pub cls_c_enc: Var,
    pub cls_z_enc: Var,
    pub rough: Var,
}

/// Weighted encoder/generator objective on the graph.
pub fn total_eg<F: Real>(g: &Graph<F>, t: &EgTerms, w: &LossWeights) -> Result<Var> {
    let terms = [
        g.add(t.adv_g, t.cls_eg)?,
        g.scale(t.content, w.content),
        g.scale(t.pixel, w.pixel),
        g.scale(t.kl, w.kl),
        g.add(t.cls_c_enc, t.cls_z_enc)?,
        g.scale(t.rough, w.rough),
    ];
    let mut total = terms[0];
    for &x in &terms[1..] {
        total = g.add(total, x)?;
    }
    Ok(total)
}

/// Named scalar losses of one step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    pub values: BTreeMap<String, f64>,
}

impl LossReport {
    pub fn get(&self, name: &str) -> Result<f64> {
        self.values
            .get(name)
            .copied()
            .ok_or_else(|| Error::Missing(format!("loss component {name}")))
    }

    /// Components then totals, in the fixed report order.
    pub fn ordered(&self) -> Vec<(&'static str, f64)> {
        COMPONENTS
            .iter()
            .chain(TOTALS.iter())
            .filter_map(|&n| self.values.get(n).map(|&v| (n, v)))
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.values.values().all(|v| v.is_finite())
    }
}

/// `total_eg = adv_g + cls_eg + a1*content + a2*pixel + a3*kl + cls_c_enc
/// + cls_z_enc + a4*rough`, `total_d = adv_d`. The classifier and latent
/// classifier objectives stay as their own entries (`cls_c`, `dac`).
pub fn total_losses(parts: &BTreeMap<String, f64>, w: &LossWeights) -> Result<LossReport> {
    let get = |n: &str| {
        parts
            .get(n)
            .copied()
            .ok_or_else(|| Error::Missing(format!("loss component {n}")))
    };
    let mut values = BTreeMap::new();
    for n in COMPONENTS {
        let v = get(n)?;
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss component {n} = {v}")));
        }
        values.insert(n.to_string(), v);
    }
    let total_eg = get("adv_g")?
        + get("cls_eg")?
        + w.content * get("content")?
        + w.pixel * get("pixel")?
        + w.kl * get("kl")?
        + get("cls_c_enc")?
        + get("cls_z_enc")?
        + w.rough * get("rough")?;
    values.insert("total_eg".into(), total_eg);
    values.insert("total_d".into(), get("adv_d")?);
    Ok(LossReport { values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, GradCheckConfig};
    use crate::tensor::{Shape, Tensor};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: Shape, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d: Vec<f64> = (0..shape.numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(shape, d).unwrap()
    }

    fn onehot(idx: &[usize], k: usize) -> Tensor<f64> {
        let mut t = Tensor::zeros(Shape::new(idx.len(), k, 1, 1));
        for (b, &i) in idx.iter().enumerate() {
            t.set(b, i, 0, 0, 1.0);
        }
        t
    }

    fn scalar(g: &Graph<f64>, v: f64) -> Var {
        g.constant(Tensor::scalar(v))
    }

    #[test]
    fn hinge_examples() {
        let g = Graph::<f64>::new();
        assert_eq!(g.value(adv_d(&g, scalar(&g, 2.0), scalar(&g, -2.0))).item(), 0.0);
        assert_eq!(g.value(adv_d(&g, scalar(&g, 0.0), scalar(&g, 0.0))).item(), 2.0);
        assert_eq!(g.value(adv_g(&g, scalar(&g, 0.0))).item(), 1.0);
        assert_eq!(g.value(adv_g(&g, scalar(&g, 2.0))).item(), 0.0);
    }

    #[test]
    fn cross_entropy_examples() {
        let g = Graph::<f64>::new();
        let uni = g.constant(Tensor::zeros(Shape::new(1, 9, 1, 1)));
        let l = g.value(cross_entropy(&g, uni, g.constant(onehot(&[4], 9))).unwrap()).item();
        assert!((l - 9f64.ln()).abs() < 1e-6);
        assert!((l - 2.1972).abs() < 1e-4);

        let mut sharp = Tensor::zeros(Shape::new(1, 9, 1, 1));
        sharp.set(0, 2, 0, 0, 100.0);
        let l = g.value(cross_entropy(&g, g.constant(sharp), g.constant(onehot(&[2], 9))).unwrap()).item();
        assert!(l < 1e-12);

        let logits = rand_tensor(Shape::new(3, 5, 1, 1), 1).map(|v| 3.0 * v);
        let labels = [0, 4, 2];
        let got = g.value(cross_entropy(&g, g.constant(logits.clone()), g.constant(onehot(&labels, 5))).unwrap()).item();
        let mut want = 0.0;
        for (b, &y) in labels.iter().enumerate() {
            let z: f64 = (0..5).map(|k| logits.at(b, k, 0, 0).exp()).sum();
            want -= (logits.at(b, y, 0, 0).exp() / z).ln();
        }
        assert!((got - want / 3.0).abs() < 1e-6);

        let bad = g.constant(Tensor::from_f64(Shape::new(1, 3, 1, 1), &[0.0, 2.0, 0.0]).unwrap());
        assert!(cross_entropy(&g, g.constant(Tensor::zeros(Shape::new(1, 3, 1, 1))), bad).is_err());
        assert!(cross_entropy(&g, uni, g.constant(onehot(&[1], 3))).is_err());
    }

    #[test]
    fn reconstruction_examples() {
        let g = Graph::<f64>::new();
        let x = g.constant(rand_tensor(Shape::new(2, 3, 4, 4), 2));
        assert_eq!(g.value(pixel_loss(&g, x, x).unwrap()).item(), 0.0);
        assert_eq!(g.value(content_loss(&g, &[x, x], &[x, x]).unwrap()).item(), 0.0);
        let ones = g.constant(Tensor::ones(Shape::new(1, 3, 2, 2)));
        let zeros = g.constant(Tensor::zeros(Shape::new(1, 3, 2, 2)));
        assert_eq!(g.value(pixel_loss(&g, ones, zeros).unwrap()).item(), 1.0);

        let (a, b) = (rand_tensor(Shape::new(2, 3, 4, 4), 3), rand_tensor(Shape::new(2, 3, 4, 4), 4));
        let want = a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).sum::<f64>() / a.numel() as f64;
        let got = g.value(pixel_loss(&g, g.constant(a), g.constant(b)).unwrap()).item();
        assert!((got - want).abs() < 1e-6);
        assert!(pixel_loss(&g, ones, x).is_err());
    }

    #[test]
    fn kl_examples() {
        let g = Graph::<f64>::new();
        let z = g.constant(Tensor::zeros(Shape::new(2, 4, 1, 1)));
        assert_eq!(g.value(kl_loss(&g, z, z).unwrap()).item(), 0.0);
        let one = g.constant(Tensor::ones(Shape::new(1, 1, 1, 1)));
        let zero = g.constant(Tensor::zeros(Shape::new(1, 1, 1, 1)));
        assert!((g.value(kl_loss(&g, one, zero).unwrap()).item() - 0.5).abs() < 1e-12);
        // zero only at the origin, on a grid
        for i in -4..=4 {
            for j in -4..=4 {
                let (m, l) = (i as f64 * 0.25, j as f64 * 0.25);
                let v = g.value(kl_loss(&g, g.constant(Tensor::scalar(m)), g.constant(Tensor::scalar(l))).unwrap()).item();
                if i == 0 && j == 0 {
                    assert_eq!(v, 0.0);
                } else {
                    assert!(v > 0.0);
                }
            }
        }
    }

    #[test]
    fn disentangle_examples() {
        let g = Graph::<f64>::new();
        let uni = g.constant(Tensor::full(Shape::new(2, 9, 1, 1), 0.3));
        assert!((g.value(uniform_cross_entropy(&g, uni)).item() - 9f64.ln()).abs() < 1e-12);
        // the uniform prediction is the minimum
        for seed in 0..20 {
            let r = g.constant(rand_tensor(Shape::new(2, 9, 1, 1), seed));
            assert!(g.value(uniform_cross_entropy(&g, r)).item() >= 9f64.ln() - 1e-12);
        }
        let mut perfect = Tensor::zeros(Shape::new(1, 9, 1, 1));
        perfect.set(0, 6, 0, 0, 50.0);
        let l = g.value(cross_entropy(&g, g.constant(perfect), g.constant(onehot(&[6], 9))).unwrap()).item();
        assert!(l < 1e-12);
    }

    #[test]
    fn rough_examples() {
        let g = Graph::<f64>::new();
        let xb = rand_tensor(Shape::new(1, 3, 4, 4), 5).map(|v| v.signum());
        let mut perfect = Tensor::zeros(Shape::new(1, 4, 1, 1));
        perfect.set(0, 1, 0, 0, 60.0);
        let (xv, pv, cb) = (g.constant(xb.clone()), g.constant(perfect), g.constant(onehot(&[1], 4)));
        assert!(g.value(rough_loss(&g, xv, xv, pv, cb).unwrap()).item() < 1e-12);
        let neg = g.constant(xb.map(|v| -v));
        let l = g.value(rough_loss(&g, neg, xv, pv, cb).unwrap()).item();
        assert!((l - 2.0).abs() < 1e-12);

        let (a, b) = (g.constant(rand_tensor(Shape::new(2, 3, 4, 4), 6)), g.constant(rand_tensor(Shape::new(2, 3, 4, 4), 7)));
        let logits = g.constant(rand_tensor(Shape::new(2, 4, 1, 1), 8));
        let lab = g.constant(onehot(&[0, 3], 4));
        let whole = g.value(rough_loss(&g, a, b, logits, lab).unwrap()).item();
        let parts = g.value(pixel_loss(&g, a, b).unwrap()).item() + g.value(cross_entropy(&g, logits, lab).unwrap()).item();
        assert!((whole - parts).abs() < 1e-6);
    }

    fn parts_all(v: f64) -> BTreeMap<String, f64> {
        COMPONENTS.iter().map(|n| (n.to_string(), v)).collect()
    }

    #[test]
    fn totals() {
        let r = total_losses(&parts_all(1.0), &LossWeights::default()).unwrap();
        assert!((r.get("total_eg").unwrap() - 24.1).abs() < 1e-12);
        assert_eq!(r.get("total_d").unwrap(), 1.0);
        let r = total_losses(&parts_all(0.0), &LossWeights::default()).unwrap();
        assert!(r.values.values().all(|&v| v == 0.0));

        let mut missing = parts_all(1.0);
        missing.remove("kl");
        let err = total_losses(&missing, &LossWeights::default()).unwrap_err().to_string();
        assert!(err.contains("kl"), "{err}");
        assert_eq!(r.ordered().len(), 13);
    }

    #[test]
    fn graph_total_matches_report() {
        let g = Graph::<f64>::new();
        let vals = [0.3, 1.7, 0.2, 0.05, 3.1, 2.2, 2.1, 0.6];
        let v: Vec<Var> = vals.iter().map(|&x| scalar(&g, x)).collect();
        let t = EgTerms {
            adv_g: v[0],
            cls_eg: v[1],
            content: v[2],
            pixel: v[3],
            kl: v[4],
            cls_c_enc: v[5],
            cls_z_enc: v[6],
            rough: v[7],
        };
        let w = LossWeights::default();
        let got = g.value(total_eg(&g, &t, &w).unwrap()).item();
        let names = ["adv_g", "cls_eg", "content", "pixel", "kl", "cls_c_enc", "cls_z_enc", "rough"];
        let mut parts = parts_all(0.0);
        for (n, x) in names.iter().zip(vals) {
            parts.insert(n.to_string(), x);
        }
        let r = total_losses(&parts, &w).unwrap();
        assert!((got - r.get("total_eg").unwrap()).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn pixel_weight_is_linear(p in 0.0f64..10.0, a2 in 0.1f64..20.0) {
            let mut parts = parts_all(0.5);
            parts.insert("pixel".into(), p);
            let w1 = LossWeights { pixel: a2, ..LossWeights::default() };
            let w2 = LossWeights { pixel: 2.0 * a2, ..LossWeights::default() };
            let w0 = LossWeights { pixel: 0.0, ..LossWeights::default() };
            let t0 = total_losses(&parts, &w0).unwrap().get("total_eg").unwrap();
            let t1 = total_losses(&parts, &w1).unwrap().get("total_eg").unwrap();
            let t2 = total_losses(&parts, &w2).unwrap().get("total_eg").unwrap();
            prop_assert!(((t2 - t0) - 2.0 * (t1 - t0)).abs() < 1e-9);
        }

        #[test]
        fn kl_is_nonnegative(seed in 0u64..100_000) {
            let g = Graph::<f64>::new();
            let mu = g.constant(rand_tensor(Shape::new(2, 3, 1, 1), seed).map(|v| 3.0 * v));
            let lv = g.constant(rand_tensor(Shape::new(2, 3, 1, 1), seed + 1).map(|v| 4.0 * v));
            prop_assert!(g.value(kl_loss(&g, mu, lv).unwrap()).item() >= 0.0);
        }
    }

    fn check(inputs: &[Tensor<f64>], f: impl Fn(&Graph<f64>, &[Var]) -> Result<Var>) {
        let r = grad_check(inputs, f, &GradCheckConfig::default()).unwrap();
        assert!(r.passed(1e-3), "{r:?}");
    }

    #[test]
    fn gradcheck_losses() {
        for seed in 0..10 {
            let s = |k: u64| rand_tensor(Shape::new(2, 1, 1, 1), seed * 17 + k).map(|v| 3.0 * v);
            check(&[s(1), s(2)], |g, v| Ok(adv_d(g, v[0], v[1])));
            check(&[s(3)], |g, v| Ok(adv_g(g, v[0])));
            let logits = rand_tensor(Shape::new(2, 5, 1, 1), seed + 100);
            let lab = onehot(&[seed as usize % 5, 3], 5);
            check(std::slice::from_ref(&logits), |g, v| cross_entropy(g, v[0], g.constant(lab.clone())));
            check(std::slice::from_ref(&logits), |g, v| Ok(uniform_cross_entropy(g, v[0])));
            let a = rand_tensor(Shape::new(2, 3, 4, 4), seed + 200);
            let b = rand_tensor(Shape::new(2, 3, 4, 4), seed + 300);
            check(&[a.clone(), b.clone()], |g, v| pixel_loss(g, v[0], v[1]));
            check(&[a.clone(), b.clone()], |g, v| content_loss(g, &[v[0], v[1]], &[v[1], v[0]]));
            check(&[rand_tensor(Shape::new(2, 4, 1, 1), seed + 400), rand_tensor(Shape::new(2, 4, 1, 1), seed + 500)], |g, v| {
                kl_loss(g, v[0], v[1])
            });
            check(&[a, b, logits], |g, v| rough_loss(g, v[0], v[1], v[2], g.constant(lab.clone())));
        }
    }
}
