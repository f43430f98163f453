use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Shape, Tensor};

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    channels: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn new(input: Shape, kh: usize, kw: usize, stride: usize, pad: usize) -> Result<Self> {
        let [_, c, h, w] = input.0;
        if stride == 0 {
            return Err(Error::InvalidArgument("convolution stride must be positive".into()));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::Shape(format!(
                "kernel {kh}x{kw} larger than padded input {input} (padding {pad})"
            )));
        }
        Ok(ConvGeom {
            channels: c,
            height: h,
            width: w,
            kh,
            kw,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Source offset inside one input plane, or `None` when it falls in padding.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ki: usize, kj: usize) -> Option<usize> {
        let y = (oy * self.stride + ki) as isize - self.pad as isize;
        let x = (ox * self.stride + kj) as isize - self.pad as isize;
        if y < 0 || x < 0 || y >= self.height as isize || x >= self.width as isize {
            None
        } else {
            Some(y as usize * self.width + x as usize)
        }
    }

    fn im2col<F: Real>(&self, input: &[F], cols: &mut [F]) {
        let plane = self.height * self.width;
        let p = self.positions();
        for c in 0..self.channels {
            let src = &input[c * plane..(c + 1) * plane];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.out_h {
                        for ox in 0..self.out_w {
                            dst[oy * self.out_w + ox] = match self.source(oy, ox, ki, kj) {
                                Some(s) => src[s],
                                None => F::zero(),
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<F: Real>(&self, cols: &[F], input_grad: &mut [F]) {
        let plane = self.height * self.width;
        let p = self.positions();
        for c in 0..self.channels {
            let dst = &mut input_grad[c * plane..(c + 1) * plane];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.out_h {
                        for ox in 0..self.out_w {
                            if let Some(s) = self.source(oy, ox, ki, kj) {
                                dst[s] += src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<F: Real> Graph<F> {
    /// 2-D cross-correlation with zero padding.
    ///
    /// `weight` has shape `(out_channels, in_channels, kh, kw)`; `bias`, when
    /// given, holds one value per output channel.
    pub fn conv2d(
        &self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(weight));
        let (sx, sw) = (vx.shape(), vw.shape());
        let [out_c, in_c, kh, kw] = sw.0;
        if in_c != sx.channels() {
            return Err(Error::Shape(format!(
                "conv2d weight {sw} expects {in_c} input channels, input is {sx}"
            )));
        }
        let geom = ConvGeom::new(sx, kh, kw, stride, pad)?;
        let batch = sx.batch();
        let (rows, p) = (geom.rows(), geom.positions());
        let in_n = in_c * geom.height * geom.width;
        let out_shape = Shape::new(batch, out_c, geom.out_h, geom.out_w);
        let mut out = Tensor::zeros(out_shape);
        let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![F::zero(); rows * p] };
        for b in 0..batch {
            let xin = &vx.data()[b * in_n..(b + 1) * in_n];
            let dst = &mut out.data_mut()[b * out_c * p..(b + 1) * out_c * p];
            let cols_ref: &[F] = if geom.is_pointwise() {
                xin
            } else {
                geom.im2col(xin, &mut cols);
                &cols
            };
            F::gemm(false, false, out_c, p, rows, F::one(), vw.data(), cols_ref, F::zero(), dst);
        }
        let y = self.record(out, &[x, weight], move |g, needs| {
            let mut gx = needs[0].then(|| Tensor::zeros(sx));
            let mut gw = needs[1].then(|| Tensor::zeros(sw));
            let mut cols = vec![F::zero(); rows * p];
            let mut dcols = vec![F::zero(); rows * p];
            for b in 0..batch {
                let gout = &g.data()[b * out_c * p..(b + 1) * out_c * p];
                let xin = &vx.data()[b * in_n..(b + 1) * in_n];
                if let Some(gw) = gw.as_mut() {
                    let cols_ref: &[F] = if geom.is_pointwise() {
                        xin
                    } else {
                        geom.im2col(xin, &mut cols);
                        &cols
                    };
                    F::gemm(false, true, out_c, rows, p, F::one(), gout, cols_ref, F::one(), gw.data_mut());
                }
                if let Some(gx) = gx.as_mut() {
                    let dst = &mut gx.data_mut()[b * in_n..(b + 1) * in_n];
                    if geom.is_pointwise() {
                        F::gemm(true, false, rows, p, out_c, F::one(), vw.data(), gout, F::one(), dst);
                    } else {
                        F::gemm(true, false, rows, p, out_c, F::one(), vw.data(), gout, F::zero(), &mut dcols);
                        geom.col2im(&dcols, dst);
                    }
                }
            }
            vec![gx, gw]
        });
        match bias {
            None => Ok(y),
            Some(b) => {
                let sb = self.shape(b);
                if sb.numel() != out_c {
                    return Err(Error::Shape(format!(
                        "conv2d bias {sb} does not match {out_c} output channels"
                    )));
                }
                let b = self.reshape(b, Shape::new(1, out_c, 1, 1))?;
                self.add(y, b)
            }
        }
    }

    /// Same-size patch extraction: `(b, c, h, w)` to `(b, 1, c*k*k, h*w)`,
    /// with zero padding `k / 2`. `k` must be odd.
    pub fn unfold(&self, x: Var, k: usize) -> Result<Var> {
        if k.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!("unfold kernel must be odd, got {k}")));
        }
        let vx = self.value(x);
        let sx = vx.shape();
        let geom = ConvGeom::new(sx, k, k, 1, k / 2)?;
        let batch = sx.batch();
        let (rows, p) = (geom.rows(), geom.positions());
        let in_n = sx.numel() / batch.max(1);
        let mut out = Tensor::zeros(Shape::new(batch, 1, rows, p));
        for b in 0..batch {
            geom.im2col(
                &vx.data()[b * in_n..(b + 1) * in_n],
                &mut out.data_mut()[b * rows * p..(b + 1) * rows * p],
            );
        }
        Ok(self.record(out, &[x], move |g, _| {
            let mut gx = Tensor::zeros(sx);
            for b in 0..batch {
                geom.col2im(
                    &g.data()[b * rows * p..(b + 1) * rows * p],
                    &mut gx.data_mut()[b * in_n..(b + 1) * in_n],
                );
            }
            vec![Some(gx)]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_pointwise_kernel() {
        let g = Graph::<f32>::new();
        let data: Vec<f64> = (0..2 * 3 * 4 * 4).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = g.constant(Tensor::from_f64(Shape::new(2, 3, 4, 4), &data).unwrap());
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let w = g.constant(Tensor::from_f64(Shape::new(3, 3, 1, 1), &eye).unwrap());
        let y = g.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(*g.value(y), *g.value(x));
    }

    #[test]
    fn all_ones_kernel_on_constant_image() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(Shape::new(1, 1, 5, 5), 0.7));
        let w = g.constant(Tensor::ones(Shape::new(1, 1, 3, 3)));
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        let v = g.value(y);
        assert_eq!(v.shape(), Shape::new(1, 1, 5, 5));
        assert!((v.at(0, 0, 2, 2) - 9.0 * 0.7).abs() < 1e-12);
        // corner sees 4 taps
        assert!((v.at(0, 0, 0, 0) - 4.0 * 0.7).abs() < 1e-12);
    }

    #[test]
    fn output_extent_formula() {
        let g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(Shape::new(1, 2, 9, 8)));
        let w = g.constant(Tensor::zeros(Shape::new(5, 2, 4, 4)));
        let y = g.conv2d(x, w, None, 2, 1).unwrap();
        // floor((9 + 2 - 4)/2) + 1 = 4, floor((8 + 2 - 4)/2) + 1 = 4
        assert_eq!(g.shape(y), Shape::new(1, 5, 4, 4));
    }

    #[test]
    fn mismatch_names_both_shapes() {
        let g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(Shape::new(1, 2, 4, 4)));
        let w = g.constant(Tensor::zeros(Shape::new(1, 3, 3, 3)));
        let err = g.conv2d(x, w, None, 1, 1).unwrap_err().to_string();
        assert!(err.contains("[1, 3, 3, 3]") && err.contains("[1, 2, 4, 4]"), "{err}");
        let w = g.constant(Tensor::zeros(Shape::new(1, 2, 7, 7)));
        assert!(g.conv2d(x, w, None, 1, 1).is_err());
    }
}
