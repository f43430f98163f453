use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Shape, Tensor};

/// Strides of `s` inside a broadcast to `out`; broadcast axes get stride 0.
fn broadcast_strides(s: Shape, out: Shape) -> [usize; 4] {
    let st = s.strides();
    let mut r = [0; 4];
    for d in 0..4 {
        r[d] = if s.0[d] == 1 && out.0[d] != 1 { 0 } else { st[d] };
    }
    r
}

/// Calls `f(out_index, a_index, b_index)` for every element of `out`.
fn for_each_broadcast(
    out: Shape,
    sa: [usize; 4],
    sb: [usize; 4],
    mut f: impl FnMut(usize, usize, usize),
) {
    let [n0, n1, n2, n3] = out.0;
    let mut o = 0;
    for i0 in 0..n0 {
        for i1 in 0..n1 {
            for i2 in 0..n2 {
                let ba = i0 * sa[0] + i1 * sa[1] + i2 * sa[2];
                let bb = i0 * sb[0] + i1 * sb[1] + i2 * sb[2];
                for i3 in 0..n3 {
                    f(o, ba + i3 * sa[3], bb + i3 * sb[3]);
                    o += 1;
                }
            }
        }
    }
}

/// Sums `grad` (of shape `out`) down to `target` along broadcast axes.
pub(crate) fn reduce_to<F: Real>(grad: &Tensor<F>, target: Shape) -> Tensor<F> {
    let out = grad.shape();
    if out == target {
        return grad.clone();
    }
    let mut acc = Tensor::zeros(target);
    let st = broadcast_strides(target, out);
    let g = grad.data();
    let a = acc.data_mut();
    for_each_broadcast(out, st, st, |o, t, _| a[t] += g[o]);
    acc
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
}

impl<F: Real> Graph<F> {
    fn binary(&self, a: Var, b: Var, op: BinOp) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        let out = sa.broadcast(&sb).ok_or_else(|| {
            Error::Shape(format!("cannot broadcast {sa} with {sb}"))
        })?;
        let mut data = vec![F::zero(); out.numel()];
        {
            let (da, db) = (va.data(), vb.data());
            let f = |x: F, y: F| match op {
                BinOp::Add => x + y,
                BinOp::Sub => x - y,
                BinOp::Mul => x * y,
            };
            if sa == out && sb == out {
                for ((o, &x), &y) in data.iter_mut().zip(da).zip(db) {
                    *o = f(x, y);
                }
            } else {
                let (ta, tb) = (broadcast_strides(sa, out), broadcast_strides(sb, out));
                for_each_broadcast(out, ta, tb, |o, i, j| data[o] = f(da[i], db[j]));
            }
        }
        let value = Tensor::from_vec(out, data)?;
        Ok(self.record(value, &[a, b], move |g, needs| match op {
            BinOp::Add => vec![
                needs[0].then(|| reduce_to(g, sa)),
                needs[1].then(|| reduce_to(g, sb)),
            ],
            BinOp::Sub => vec![
                needs[0].then(|| reduce_to(g, sa)),
                needs[1].then(|| reduce_to(&g.map(|x| -x), sb)),
            ],
            BinOp::Mul => {
                let grad_for = |other: &Tensor<F>, other_shape: Shape, own: Shape| {
                    let mut prod = vec![F::zero(); out.numel()];
                    let so = broadcast_strides(other_shape, out);
                    let gd = g.data();
                    let od = other.data();
                    for_each_broadcast(out, so, so, |o, i, _| prod[o] = gd[o] * od[i]);
                    reduce_to(&Tensor::from_vec(out, prod).expect("shape"), own)
                };
                vec![
                    needs[0].then(|| grad_for(&vb, sb, sa)),
                    needs[1].then(|| grad_for(&va, sa, sb)),
                ]
            }
        }))
    }

    /// Elementwise sum with broadcasting over unit extents.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinOp::Add)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinOp::Sub)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinOp::Mul)
    }

    /// Applies `f` elementwise; `df` is the derivative as a function of the input.
    pub(crate) fn unary(
        &self,
        x: Var,
        f: impl Fn(F) -> F,
        df: impl Fn(F) -> F + 'static,
    ) -> Var {
        let vx = self.value(x);
        let value = vx.map(f);
        self.record(value, &[x], move |g, _| {
            let mut out = g.clone();
            for (o, &xi) in out.data_mut().iter_mut().zip(vx.data()) {
                *o *= df(xi);
            }
            vec![Some(out)]
        })
    }

    pub fn scale(&self, x: Var, c: f64) -> Var {
        let c = F::lit(c);
        self.unary(x, move |v| v * c, move |_| c)
    }

    pub fn add_scalar(&self, x: Var, c: f64) -> Var {
        let c = F::lit(c);
        self.unary(x, move |v| v + c, |_| F::one())
    }

    pub fn neg(&self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn leaky_relu(&self, x: Var, slope: f64) -> Var {
        let s = F::lit(slope);
        self.unary(
            x,
            move |v| if v > F::zero() { v } else { v * s },
            move |v| if v > F::zero() { F::one() } else { s },
        )
    }

    pub fn relu(&self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn tanh(&self, x: Var) -> Var {
        self.unary(
            x,
            |v| v.tanh(),
            |v| {
                let t = v.tanh();
                F::one() - t * t
            },
        )
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        fn sig<F: Real>(v: F) -> F {
            F::one() / (F::one() + (-v).exp())
        }
        self.unary(x, sig, |v| {
            let s = sig(v);
            s * (F::one() - s)
        })
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, |v| v.exp(), |v| v.exp())
    }

    pub fn abs(&self, x: Var) -> Var {
        self.unary(
            x,
            |v| v.abs(),
            |v| {
                if v > F::zero() {
                    F::one()
                } else if v < F::zero() {
                    -F::one()
                } else {
                    F::zero()
                }
            },
        )
    }

    pub fn square(&self, x: Var) -> Var {
        self.unary(x, |v| v * v, |v| v + v)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&self, x: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (F::lit(lo), F::lit(hi));
        self.unary(
            x,
            move |v| v.max(lo).min(hi),
            move |v| {
                if v < lo || v > hi {
                    F::zero()
                } else {
                    F::one()
                }
            },
        )
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&self, x: Var) -> Var {
        let vx = self.value(x);
        let shape = vx.shape();
        let value = Tensor::scalar(vx.sum());
        self.record(value, &[x], move |g, _| {
            vec![Some(Tensor::full(shape, g.item()))]
        })
    }

    pub fn mean(&self, x: Var) -> Var {
        let n = self.shape(x).numel();
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sums over the axes flagged in `axes`, keeping them as unit extents.
    pub fn sum_axes(&self, x: Var, axes: [bool; 4]) -> Var {
        let vx = self.value(x);
        let shape = vx.shape();
        let mut out = shape.0;
        for d in 0..4 {
            if axes[d] {
                out[d] = 1;
            }
        }
        let out = Shape(out);
        let value = reduce_to(&vx, out);
        self.record(value, &[x], move |g, _| {
            let mut full = Tensor::zeros(shape);
            let st = broadcast_strides(out, shape);
            let gd = g.data();
            let fd = full.data_mut();
            for_each_broadcast(shape, st, st, |o, i, _| fd[o] = gd[i]);
            vec![Some(full)]
        })
    }

    pub fn mean_axes(&self, x: Var, axes: [bool; 4]) -> Var {
        let shape = self.shape(x);
        let count: usize = (0..4).filter(|&d| axes[d]).map(|d| shape.0[d]).product();
        let s = self.sum_axes(x, axes);
        self.scale(s, 1.0 / count as f64)
    }

    /// Broadcasts `x` to `shape` (unit extents are repeated).
    pub fn expand(&self, x: Var, shape: Shape) -> Result<Var> {
        let sx = self.shape(x);
        if sx.broadcast(&shape) != Some(shape) {
            return Err(Error::Shape(format!("cannot expand {sx} to {shape}")));
        }
        let zeros = self.constant(Tensor::zeros(shape));
        self.add(x, zeros)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Shape, v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn bias_broadcast_and_grad() {
        let g = Graph::<f64>::new();
        let x = g.input(t(Shape::new(1, 2, 1, 2), &[1., 2., 3., 4.]));
        let b = g.input(t(Shape::new(1, 2, 1, 1), &[10., 20.]));
        let y = g.add(x, b).unwrap();
        assert_eq!(g.value(y).data(), &[11., 12., 23., 24.]);
        let w = g.constant(t(Shape::new(1, 2, 1, 2), &[1., 2., 3., 4.]));
        let l = g.mul(y, w).unwrap();
        let l = g.sum(l);
        let grads = g.backward(l);
        assert_eq!(grads.get(b).unwrap().data(), &[3., 7.]);
        assert_eq!(grads.get(x).unwrap().data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn broadcast_mismatch_names_shapes() {
        let g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(Shape::new(1, 2, 3, 3)));
        let b = g.constant(Tensor::zeros(Shape::new(1, 3, 3, 3)));
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[1, 2, 3, 3]") && err.contains("[1, 3, 3, 3]"), "{err}");
    }

    #[test]
    fn mean_axes_reduces() {
        let g = Graph::<f64>::new();
        let x = g.input(t(Shape::new(2, 1, 1, 2), &[1., 3., 5., 7.]));
        let m = g.mean_axes(x, [true, false, false, true]);
        assert_eq!(g.value(m).data(), &[4.0]);
        let grads = g.backward(m);
        assert_eq!(grads.get(x).unwrap().data(), &[0.25; 4]);
    }
}
