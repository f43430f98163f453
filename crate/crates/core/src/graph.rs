//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Values are
//! immutable once recorded; [`Graph::backward`] walks the tape in reverse and
//! returns the gradients of every leaf that asked for one.
//!
//! Operations live in [`crate::ops`] as further `impl Graph` blocks.

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::rc::Rc;

use crate::tensor::{Real, Shape, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Maps the output gradient to one optional gradient per input. The flag
/// slice says which inputs need a gradient at all.
pub(crate) type BackwardFn<F> = Box<dyn Fn(&Tensor<F>, &[bool]) -> Vec<Option<Tensor<F>>>>;

struct Node<F> {
    value: Rc<Tensor<F>>,
    requires_grad: bool,
    inputs: Vec<Var>,
    backward: Option<BackwardFn<F>>,
}

/// Key identifying a parameter across graphs: (store group, index).
pub(crate) type ParamKey = (String, usize);

pub struct Graph<F: Real> {
    nodes: RefCell<Vec<Node<F>>>,
    params: RefCell<HashMap<ParamKey, Var>>,
    frozen: RefCell<HashSet<String>>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            frozen: RefCell::new(HashSet::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node<F>) -> Var {
        debug_assert!(
            node.value.all_finite() || !cfg!(debug_assertions),
            "non-finite value produced ({})",
            node.value.shape()
        );
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var(nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<F>) -> Var {
        self.leaf_rc(Rc::new(value), false)
    }

    /// Leaf that receives a gradient.
    pub fn input(&self, value: Tensor<F>) -> Var {
        self.leaf_rc(Rc::new(value), true)
    }

    pub(crate) fn leaf_rc(&self, value: Rc<Tensor<F>>, requires_grad: bool) -> Var {
        self.push(Node {
            value,
            requires_grad,
            inputs: Vec::new(),
            backward: None,
        })
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<F>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    /// Copy of the value of `v`.
    pub fn tensor(&self, v: Var) -> Tensor<F> {
        (*self.value(v)).clone()
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes.borrow()[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Same value, cut from the tape.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v);
        self.leaf_rc(value, false)
    }

    /// Records the result of an operation. The backward closure is dropped
    /// when no input requires a gradient.
    pub(crate) fn record(
        &self,
        value: Tensor<F>,
        inputs: &[Var],
        backward: impl Fn(&Tensor<F>, &[bool]) -> Vec<Option<Tensor<F>>> + 'static,
    ) -> Var {
        let requires_grad = inputs.iter().any(|&v| self.requires_grad(v));
        self.push(Node {
            value: Rc::new(value),
            requires_grad,
            inputs: inputs.to_vec(),
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
        })
    }

    pub(crate) fn cached_param(&self, key: &ParamKey) -> Option<Var> {
        self.params.borrow().get(key).copied()
    }

    pub(crate) fn cache_param(&self, key: ParamKey, v: Var) {
        self.params.borrow_mut().insert(key, v);
    }

    /// Forgets cached parameter leaves of `group`, so the next lookup reads
    /// the (possibly updated) store again.
    pub fn refresh_params(&self, group: &str) {
        self.params.borrow_mut().retain(|(g, _), _| g != group);
    }

    /// Parameters of `group` looked up from now on are constants; cached
    /// leaves of the group are dropped so updated values are re-read.
    pub fn freeze_group(&self, group: &str) {
        self.frozen.borrow_mut().insert(group.to_string());
        self.refresh_params(group);
    }

    /// Undoes [`Graph::freeze_group`].
    pub fn unfreeze_group(&self, group: &str) {
        self.frozen.borrow_mut().remove(group);
        self.refresh_params(group);
    }

    pub(crate) fn is_frozen(&self, group: &str) -> bool {
        self.frozen.borrow().contains(group)
    }

    /// Leaf variables bound to parameters of `group`, keyed by index.
    pub(crate) fn param_vars(&self, group: &str) -> Vec<(usize, Var)> {
        let mut out: Vec<(usize, Var)> = self
            .params
            .borrow()
            .iter()
            .filter(|((g, _), _)| g == group)
            .map(|((_, i), &v)| (*i, v))
            .collect();
        out.sort();
        out
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<F> {
        let nodes = self.nodes.borrow();
        let shape = nodes[loss.0].value.shape();
        assert_eq!(shape.numel(), 1, "backward needs a scalar loss, got {shape}");
        let mut grads: Vec<Option<Tensor<F>>> = (0..=loss.0).map(|_| None).collect();
        let mut leaves = HashMap::new();
        if !nodes[loss.0].requires_grad {
            return Gradients { grads: leaves };
        }
        grads[loss.0] = Some(Tensor::ones(shape));
        for i in (0..=loss.0).rev() {
            let Some(grad) = grads[i].take() else {
                continue;
            };
            let node = &nodes[i];
            match &node.backward {
                None => {
                    if node.requires_grad {
                        leaves.insert(i, grad);
                    }
                }
                Some(backward) => {
                    let needs: Vec<bool> = node
                        .inputs
                        .iter()
                        .map(|v| nodes[v.0].requires_grad)
                        .collect();
                    let contribs = backward(&grad, &needs);
                    debug_assert_eq!(contribs.len(), node.inputs.len());
                    for ((input, contrib), need) in node.inputs.iter().zip(contribs).zip(needs) {
                        let (Some(contrib), true) = (contrib, need) else {
                            continue;
                        };
                        debug_assert_eq!(contrib.shape(), nodes[input.0].value.shape());
                        match &mut grads[input.0] {
                            Some(acc) => acc.add_assign(&contrib),
                            slot @ None => *slot = Some(contrib),
                        }
                    }
                }
            }
        }
        Gradients { grads: leaves }
    }
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Default)]
pub struct Gradients<F> {
    grads: HashMap<usize, Tensor<F>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(&v.0)
    }

    /// Gradient of `v`, or zeros of `shape` when `v` did not influence the loss.
    pub fn get_or_zeros(&self, v: Var, shape: Shape) -> Tensor<F> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}
