use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Shape, Tensor};

/// Matrix dims of a `(batch, 1, rows, cols)` operand after an optional transpose.
fn op_dims(s: Shape, trans: bool) -> (usize, usize) {
    if trans {
        (s.width(), s.height())
    } else {
        (s.height(), s.width())
    }
}

impl<F: Real> Graph<F> {
    /// Batched matrix product on `(batch, 1, rows, cols)` operands.
    ///
    /// Either operand may carry a unit batch extent, which is then shared
    /// across the batch of the other.
    pub fn bmm(&self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.channels() != 1 || sb.channels() != 1 {
            return Err(Error::Shape(format!(
                "bmm operands must have one channel, got {sa} and {sb}"
            )));
        }
        let (m, k) = op_dims(sa, trans_a);
        let (k2, n) = op_dims(sb, trans_b);
        if k != k2 {
            return Err(Error::Shape(format!(
                "bmm inner extents differ: {sa} (trans={trans_a}) vs {sb} (trans={trans_b})"
            )));
        }
        let (ba, bb) = (sa.batch(), sb.batch());
        if ba != bb && ba != 1 && bb != 1 {
            return Err(Error::Shape(format!("bmm batch extents differ: {sa} vs {sb}")));
        }
        let batch = ba.max(bb);
        let (na, nb, nc) = (m * k, k * n, m * n);
        let mut out = Tensor::zeros(Shape::new(batch, 1, m, n));
        for i in 0..batch {
            let ia = if ba == 1 { 0 } else { i };
            let ib = if bb == 1 { 0 } else { i };
            F::gemm(
                trans_a,
                trans_b,
                m,
                n,
                k,
                F::one(),
                &va.data()[ia * na..(ia + 1) * na],
                &vb.data()[ib * nb..(ib + 1) * nb],
                F::zero(),
                &mut out.data_mut()[i * nc..(i + 1) * nc],
            );
        }
        Ok(self.record(out, &[a, b], move |g, needs| {
            let gd = g.data();
            let mut ga = needs[0].then(|| Tensor::zeros(sa));
            let mut gb = needs[1].then(|| Tensor::zeros(sb));
            for i in 0..batch {
                let ia = if ba == 1 { 0 } else { i };
                let ib = if bb == 1 { 0 } else { i };
                let gc = &gd[i * nc..(i + 1) * nc];
                let a_i = &va.data()[ia * na..(ia + 1) * na];
                let b_i = &vb.data()[ib * nb..(ib + 1) * nb];
                if let Some(ga) = ga.as_mut() {
                    let dst = &mut ga.data_mut()[ia * na..(ia + 1) * na];
                    if trans_a {
                        F::gemm(trans_b, true, k, m, n, F::one(), b_i, gc, F::one(), dst);
                    } else {
                        F::gemm(false, !trans_b, m, k, n, F::one(), gc, b_i, F::one(), dst);
                    }
                }
                if let Some(gb) = gb.as_mut() {
                    let dst = &mut gb.data_mut()[ib * nb..(ib + 1) * nb];
                    if trans_b {
                        F::gemm(true, trans_a, n, k, m, F::one(), gc, a_i, F::one(), dst);
                    } else {
                        F::gemm(!trans_a, false, k, n, m, F::one(), a_i, gc, F::one(), dst);
                    }
                }
            }
            vec![ga, gb]
        }))
    }

    /// Affine map of each flattened batch item: `x W^T + bias`.
    ///
    /// `weight` holds `out * in` values with the output extent first; the
    /// result has shape `(batch, out, 1, 1)`.
    pub fn linear(&self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let sx = self.shape(x);
        let sw = self.shape(weight);
        let batch = sx.batch();
        let fan_in = sx.numel() / batch;
        let fan_out = sw.batch();
        if sw.numel() != fan_out * fan_in {
            return Err(Error::Shape(format!(
                "linear weight {sw} does not match input {sx} ({fan_in} features)"
            )));
        }
        let xm = self.reshape(x, Shape::new(1, 1, batch, fan_in))?;
        let wm = self.reshape(weight, Shape::new(1, 1, fan_out, fan_in))?;
        let y = self.bmm(xm, wm, false, true)?;
        let y = self.reshape(y, Shape::new(batch, fan_out, 1, 1))?;
        match bias {
            Some(b) => {
                let sb = self.shape(b);
                if sb.numel() != fan_out {
                    return Err(Error::Shape(format!(
                        "linear bias {sb} does not match {fan_out} outputs"
                    )));
                }
                let b = self.reshape(b, Shape::new(1, fan_out, 1, 1))?;
                self.add(y, b)
            }
            None => Ok(y),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_arithmetic() {
        let g = Graph::<f64>::new();
        let x = g.input(Tensor::scalar(3.0));
        let w = g.input(Tensor::scalar(2.0));
        let b = g.input(Tensor::scalar(1.0));
        let y = g.linear(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).item(), 7.0);
        let grads = g.backward(y);
        assert_eq!(grads.get(x).unwrap().item(), 2.0);
        assert_eq!(grads.get(w).unwrap().item(), 3.0);
        assert_eq!(grads.get(b).unwrap().item(), 1.0);
    }

    #[test]
    fn linear_rejects_mismatch() {
        let g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(Shape::new(2, 3, 1, 1)));
        let w = g.constant(Tensor::zeros(Shape::new(4, 2, 1, 1)));
        let err = g.linear(x, w, None).unwrap_err().to_string();
        assert!(err.contains("[4, 2, 1, 1]") && err.contains("[2, 3, 1, 1]"), "{err}");
    }

    #[test]
    fn bmm_shared_operand_accumulates() {
        let g = Graph::<f64>::new();
        let a = g.input(Tensor::from_f64(Shape::new(2, 1, 1, 2), &[1., 2., 3., 4.]).unwrap());
        let b = g.input(Tensor::from_f64(Shape::new(1, 1, 2, 1), &[5., 6.]).unwrap());
        let c = g.bmm(a, b, false, false).unwrap();
        assert_eq!(g.value(c).data(), &[17., 39.]);
        let l = g.sum(c);
        let grads = g.backward(l);
        assert_eq!(grads.get(b).unwrap().data(), &[4., 6.]);
        assert_eq!(grads.get(a).unwrap().data(), &[5., 6., 5., 6.]);
    }
}
