//! Grouped statistics: normalizations, centering and softmax.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Shape, Tensor};

/// Axis along which a grouped operation reduces.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Over channels, separately for every (batch, position).
    Channel,
    /// Over all positions, separately for every (batch, channel).
    Spatial,
    /// Over the last extent, separately for every (batch, channel, row).
    Row,
}

#[derive(Clone, Copy)]
struct Groups {
    count: usize,
    len: usize,
    stride: usize,
    plane: usize,
    channels: usize,
    axis: Axis,
}

impl Groups {
    fn new(shape: Shape, axis: Axis) -> Self {
        let [b, c, h, w] = shape.0;
        let plane = h * w;
        let (count, len, stride) = match axis {
            Axis::Channel => (b * plane, c, plane),
            Axis::Spatial => (b * c, plane, 1),
            Axis::Row => (b * c * h, w, 1),
        };
        Groups {
            count,
            len,
            stride,
            plane,
            channels: c,
            axis,
        }
    }

    #[inline]
    fn offset(&self, g: usize) -> usize {
        match self.axis {
            Axis::Channel => (g / self.plane) * self.channels * self.plane + g % self.plane,
            Axis::Spatial | Axis::Row => g * self.len,
        }
    }

    #[inline]
    fn index(&self, g: usize, i: usize) -> usize {
        self.offset(g) + i * self.stride
    }
}

pub(crate) const NORM_EPS: f64 = 1e-5;

impl<F: Real> Graph<F> {
    /// Subtracts the mean along `axis` and divides by `sqrt(var + eps)`.
    pub fn normalize(&self, x: Var, axis: Axis, eps: f64) -> Var {
        let vx = self.value(x);
        let shape = vx.shape();
        let grp = Groups::new(shape, axis);
        let n = F::lit(grp.len as f64);
        let eps = F::lit(eps);
        let mut y = Tensor::zeros(shape);
        let mut inv_std = vec![F::zero(); grp.count];
        {
            let (xd, yd) = (vx.data(), y.data_mut());
            for g in 0..grp.count {
                let mut mean = F::zero();
                for i in 0..grp.len {
                    mean += xd[grp.index(g, i)];
                }
                mean /= n;
                let mut var = F::zero();
                for i in 0..grp.len {
                    let d = xd[grp.index(g, i)] - mean;
                    var += d * d;
                }
                let is = F::one() / (var / n + eps).sqrt();
                inv_std[g] = is;
                for i in 0..grp.len {
                    let k = grp.index(g, i);
                    yd[k] = (xd[k] - mean) * is;
                }
            }
        }
        let ys = y.clone();
        self.record(y, &[x], move |gy, _| {
            let mut gx = Tensor::zeros(shape);
            let (gd, yd, out) = (gy.data(), ys.data(), gx.data_mut());
            for g in 0..grp.count {
                let mut mg = F::zero();
                let mut mgy = F::zero();
                for i in 0..grp.len {
                    let k = grp.index(g, i);
                    mg += gd[k];
                    mgy += gd[k] * yd[k];
                }
                mg /= n;
                mgy /= n;
                for i in 0..grp.len {
                    let k = grp.index(g, i);
                    out[k] = inv_std[g] * (gd[k] - mg - yd[k] * mgy);
                }
            }
            vec![Some(gx)]
        })
    }

    /// Instance normalization: per (batch, channel) over positions.
    pub fn instance_norm(&self, x: Var) -> Var {
        self.normalize(x, Axis::Spatial, NORM_EPS)
    }

    /// Positional normalization: per (batch, position) over channels.
    pub fn positional_norm(&self, x: Var) -> Var {
        self.normalize(x, Axis::Channel, NORM_EPS)
    }

    /// Subtracts the mean along `axis`.
    pub fn center(&self, x: Var, axis: Axis) -> Var {
        let vx = self.value(x);
        let shape = vx.shape();
        let grp = Groups::new(shape, axis);
        let n = F::lit(grp.len as f64);
        let mut y = (*vx).clone();
        let yd = y.data_mut();
        for g in 0..grp.count {
            let mut mean = F::zero();
            for i in 0..grp.len {
                mean += yd[grp.index(g, i)];
            }
            mean /= n;
            for i in 0..grp.len {
                yd[grp.index(g, i)] -= mean;
            }
        }
        self.record(y, &[x], move |gy, _| {
            let mut gx = gy.clone();
            let gd = gx.data_mut();
            for g in 0..grp.count {
                let mut mean = F::zero();
                for i in 0..grp.len {
                    mean += gd[grp.index(g, i)];
                }
                mean /= n;
                for i in 0..grp.len {
                    gd[grp.index(g, i)] -= mean;
                }
            }
            vec![Some(gx)]
        })
    }

    /// `softmax(x / tau)` along `axis`, stabilized by max subtraction.
    pub fn softmax(&self, x: Var, axis: Axis, tau: f64) -> Result<Var> {
        if !(tau > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "softmax temperature must be positive, got {tau}"
            )));
        }
        let vx = self.value(x);
        let shape = vx.shape();
        let grp = Groups::new(shape, axis);
        let inv_tau = F::lit(1.0 / tau);
        let mut y = Tensor::zeros(shape);
        {
            let (xd, yd) = (vx.data(), y.data_mut());
            for g in 0..grp.count {
                let mut max = F::neg_infinity();
                for i in 0..grp.len {
                    max = max.max(xd[grp.index(g, i)]);
                }
                let mut total = F::zero();
                for i in 0..grp.len {
                    let k = grp.index(g, i);
                    let e = ((xd[k] - max) * inv_tau).exp();
                    yd[k] = e;
                    total += e;
                }
                for i in 0..grp.len {
                    yd[grp.index(g, i)] /= total;
                }
            }
        }
        let ys = y.clone();
        Ok(self.record(y, &[x], move |gy, _| {
            let mut gx = Tensor::zeros(shape);
            let (gd, yd, out) = (gy.data(), ys.data(), gx.data_mut());
            for g in 0..grp.count {
                let mut dot = F::zero();
                for i in 0..grp.len {
                    let k = grp.index(g, i);
                    dot += gd[k] * yd[k];
                }
                for i in 0..grp.len {
                    let k = grp.index(g, i);
                    out[k] = inv_tau * yd[k] * (gd[k] - dot);
                }
            }
            vec![Some(gx)]
        }))
    }

    /// `log(softmax(x))` along `axis`.
    pub fn log_softmax(&self, x: Var, axis: Axis) -> Var {
        let vx = self.value(x);
        let shape = vx.shape();
        let grp = Groups::new(shape, axis);
        let mut y = Tensor::zeros(shape);
        {
            let (xd, yd) = (vx.data(), y.data_mut());
            for g in 0..grp.count {
                let mut max = F::neg_infinity();
                for i in 0..grp.len {
                    max = max.max(xd[grp.index(g, i)]);
                }
                let mut total = F::zero();
                for i in 0..grp.len {
                    total += (xd[grp.index(g, i)] - max).exp();
                }
                let lse = max + total.ln();
                for i in 0..grp.len {
                    let k = grp.index(g, i);
                    yd[k] = xd[k] - lse;
                }
            }
        }
        let ys = y.clone();
        self.record(y, &[x], move |gy, _| {
            let mut gx = Tensor::zeros(shape);
            let (gd, yd, out) = (gy.data(), ys.data(), gx.data_mut());
            for g in 0..grp.count {
                let mut total = F::zero();
                for i in 0..grp.len {
                    total += gd[grp.index(g, i)];
                }
                for i in 0..grp.len {
                    let k = grp.index(g, i);
                    out[k] = gd[k] - yd[k].exp() * total;
                }
            }
            vec![Some(gx)]
        })
    }
}

/// Plain softmax of a vector at temperature `tau`.
pub fn softmax_temp(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    let g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_f64(Shape::new(1, 1, 1, logits.len()), logits)?);
    let y = g.softmax(x, Axis::Row, tau)?;
    Ok(g.value(y).to_f64_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_temp_hand_values() {
        let p = softmax_temp(&[1.0, -1.0], 1.0).unwrap();
        assert!((p[0] - 0.8808).abs() < 1e-3 && (p[1] - 0.1192).abs() < 1e-3);
        let p = softmax_temp(&[0.3, 0.3, 0.3, 0.3], 0.5).unwrap();
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-12));
        let p = softmax_temp(&[0.1, 0.5, -0.2], 1e-3).unwrap();
        assert!((p[1] - 1.0).abs() < 1e-6 && p[0] < 1e-6 && p[2] < 1e-6);
    }

    #[test]
    fn softmax_rejects_nonpositive_tau() {
        assert!(softmax_temp(&[1.0], 0.0).is_err());
        assert!(softmax_temp(&[1.0], -1.0).is_err());
    }

    #[test]
    fn instance_norm_cases() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(Shape::new(1, 1, 2, 2), 3.0));
        let y = g.instance_norm(x);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let x = g.constant(Tensor::from_f64(Shape::new(1, 1, 1, 2), &[1.0, -1.0]).unwrap());
        let y = g.instance_norm(x);
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        let v = g.value(y);
        assert!((v.data()[0] - expect).abs() < 1e-12 && (v.data()[1] + expect).abs() < 1e-12);
    }

    #[test]
    fn positional_norm_cases() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(Shape::new(1, 2, 1, 1), &[2.0, 0.0]).unwrap());
        let y = g.value(g.positional_norm(x));
        assert!((y.data()[0] - 1.0).abs() < 1e-5 && (y.data()[1] + 1.0).abs() < 1e-5);

        let x = g.constant(Tensor::from_f64(Shape::new(1, 1, 2, 2), &[1., 2., 3., 4.]).unwrap());
        let y = g.value(g.positional_norm(x));
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn log_softmax_uniform() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(Shape::new(1, 9, 1, 1)));
        let y = g.value(g.log_softmax(x, Axis::Channel));
        assert!(y.data().iter().all(|&v| (v + 9f64.ln()).abs() < 1e-12));
    }
}
