//! Parameterized conv and dense layers over a [`ParamStore`].
//!
//! A layer only holds parameter ids; the values live in the store so that
//! a whole network can be checkpointed, cast and optimized as one unit.
//! Weights carrying spectral-norm state are normalized on every forward.

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{Init, ParamId, ParamStore, INIT_STD};
use crate::tensor::{Real, Shape};

pub const LRELU_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    /// `k x k` convolution with "same" padding (before striding).
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Self::with_init(store, name, in_c, out_c, k, stride, bias, Init::TruncatedNormal(INIT_STD), rng)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_init<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        bias: bool,
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.add_init(&format!("{name}.w"), Shape::new(out_c, in_c, k, k), init, rng)?;
        let bias = if bias {
            Some(store.add_init(&format!("{name}.b"), Shape::new(1, out_c, 1, 1), Init::Zeros, rng)?)
        } else {
            None
        };
        Ok(Conv {
            weight,
            bias,
            stride,
            pad: k / 2,
        })
    }

    pub fn forward<F: Real>(&self, g: &Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let w = store.sn_var(g, self.weight);
        let b = self.bias.map(|b| store.var(g, b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }

    pub fn spectral<F: Real>(self, store: &mut ParamStore<F>, rng: &mut impl Rng) -> Result<Self> {
        store.enable_spectral_norm(self.weight, rng)?;
        Ok(self)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Dense {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        in_f: usize,
        out_f: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.add_init(
            &format!("{name}.w"),
            Shape::new(out_f, in_f, 1, 1),
            Init::TruncatedNormal(INIT_STD),
            rng,
        )?;
        let bias = if bias {
            Some(store.add_init(&format!("{name}.b"), Shape::new(1, out_f, 1, 1), Init::Zeros, rng)?)
        } else {
            None
        };
        Ok(Dense { weight, bias })
    }

    /// `(batch, out, 1, 1)` from any `(batch, ...)` input.
    pub fn forward<F: Real>(&self, g: &Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let w = store.sn_var(g, self.weight);
        let b = self.bias.map(|b| store.var(g, b));
        g.linear(x, w, b)
    }

    pub fn spectral<F: Real>(self, store: &mut ParamStore<F>, rng: &mut impl Rng) -> Result<Self> {
        store.enable_spectral_norm(self.weight, rng)?;
        Ok(self)
    }
}

pub fn lrelu<F: Real>(g: &Graph<F>, x: Var) -> Var {
    g.leaky_relu(x, LRELU_SLOPE)
}
