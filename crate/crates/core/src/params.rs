//! Named trainable tensors grouped per network.

use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::{Real, Shape, Tensor};

/// Standard deviation of the truncated-normal weight initialization.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Normal with the given std, resampled outside two standard deviations.
    TruncatedNormal(f64),
    Zeros,
    Constant(f64),
}

#[derive(Clone, Debug)]
pub struct Parameter<F> {
    pub name: String,
    pub(crate) value: Rc<Tensor<F>>,
    pub m: Tensor<F>,
    pub v: Tensor<F>,
    pub grad: Option<Tensor<F>>,
    /// Left singular-vector estimate when the weight is spectrally normalized.
    pub sn_state: Option<Vec<F>>,
}

impl<F: Real> Parameter<F> {
    pub fn new(name: impl Into<String>, value: Tensor<F>) -> Self {
        let shape = value.shape();
        Parameter {
            name: name.into(),
            value: Rc::new(value),
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            grad: None,
            sn_state: None,
        }
    }

    pub fn value(&self) -> &Tensor<F> {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor<F> {
        Rc::make_mut(&mut self.value)
    }

    pub fn shape(&self) -> Shape {
        self.value.shape()
    }
}

/// The parameters of one network; `group` names it inside a [`Graph`].
#[derive(Clone, Debug)]
pub struct ParamStore<F> {
    group: String,
    params: Vec<Parameter<F>>,
    index: HashMap<String, usize>,
    trainable: bool,
}

pub fn sample_init<F: Real>(shape: Shape, init: Init, rng: &mut impl Rng) -> Tensor<F> {
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::Constant(c) => Tensor::full(shape, F::lit(c)),
        Init::TruncatedNormal(std) => {
            let normal = Normal::new(0.0, std).expect("valid std");
            let data = (0..shape.numel())
                .map(|_| loop {
                    let x: f64 = normal.sample(rng);
                    if x.abs() <= 2.0 * std {
                        break F::lit(x);
                    }
                })
                .collect();
            Tensor::from_vec(shape, data).expect("shape")
        }
    }
}

impl<F: Real> ParamStore<F> {
    pub fn new(group: impl Into<String>) -> Self {
        ParamStore {
            group: group.into(),
            params: Vec::new(),
            index: HashMap::new(),
            trainable: true,
        }
    }

    /// A store whose parameters never receive gradients.
    pub fn frozen(group: impl Into<String>) -> Self {
        ParamStore {
            trainable: false,
            ..Self::new(group)
        }
    }

    pub fn group(&self) -> &str {
        &self.group
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn add(&mut self, name: &str, value: Tensor<F>) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter name {name} in {}",
                self.group
            )));
        }
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Parameter::new(name, value));
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn add_init(&mut self, name: &str, shape: Shape, init: Init, rng: &mut impl Rng) -> Result<ParamId> {
        let value = sample_init(shape, init, rng);
        self.add(name, value)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<F> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<F>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<F>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<F>> {
        self.params.iter_mut()
    }

    /// Leaf for parameter `id` on `g`, created once per graph.
    ///
    /// It requires a gradient unless the store is frozen or the group was
    /// frozen on the graph with [`Graph::freeze_group`].
    pub fn var(&self, g: &Graph<F>, id: ParamId) -> Var {
        let key = (self.group.clone(), id.0);
        if let Some(v) = g.cached_param(&key) {
            return v;
        }
        let requires_grad = self.trainable && !g.is_frozen(&self.group);
        let v = g.leaf_rc(Rc::clone(&self.params[id.0].value), requires_grad);
        g.cache_param(key, v);
        v
    }

    /// Copies the gradients of this store's leaves on `g` into the parameters.
    /// Parameters that did not take part get `None`.
    pub fn collect_grads(&mut self, g: &Graph<F>, grads: &Gradients<F>) {
        for p in &mut self.params {
            p.grad = None;
        }
        for (i, v) in g.param_vars(&self.group) {
            if let Some(t) = grads.get(v) {
                self.params[i].grad = Some(t.clone());
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Same parameters converted to another scalar type.
    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            group: self.group.clone(),
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: Rc::new(p.value.cast()),
                    m: p.m.cast(),
                    v: p.v.cast(),
                    grad: p.grad.as_ref().map(|g| g.cast()),
                    sn_state: p
                        .sn_state
                        .as_ref()
                        .map(|s| s.iter().map(|&x| G::lit(x.as_f64())).collect()),
                })
                .collect(),
            index: self.index.clone(),
            trainable: self.trainable,
        }
    }

    /// Bitwise equality of all parameter values.
    pub fn values_equal(&self, other: &ParamStore<F>) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.value.data() == b.value.data())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::<f32>::new("net");
        s.add("w", Tensor::zeros(Shape::scalar())).unwrap();
        assert!(s.add("w", Tensor::zeros(Shape::scalar())).is_err());
    }

    #[test]
    fn truncated_normal_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t: Tensor<f64> = sample_init(Shape::new(64, 64, 1, 1), Init::TruncatedNormal(INIT_STD), &mut rng);
        assert!(t.data().iter().all(|x| x.abs() <= 0.04));
        let mean = t.mean();
        assert!(mean.abs() < 2e-3, "{mean}");
    }

    #[test]
    fn frozen_store_gives_constant_leaves() {
        let mut s = ParamStore::<f64>::frozen("phi");
        let id = s.add("w", Tensor::scalar(2.0)).unwrap();
        let g = Graph::new();
        let v = s.var(&g, id);
        assert!(!g.requires_grad(v));
        assert_eq!(s.var(&g, id), v);
    }
}
