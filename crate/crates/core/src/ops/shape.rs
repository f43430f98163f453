use std::rc::Rc;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Shape, Tensor};

impl<F: Real> Graph<F> {
    /// Reinterprets the data of `x` under `shape`.
    pub fn reshape(&self, x: Var, shape: Shape) -> Result<Var> {
        let vx = self.value(x);
        let from = vx.shape();
        let value = (*vx).clone().reshaped(shape)?;
        Ok(self.record(value, &[x], move |g, _| {
            vec![Some(g.clone().reshaped(from).expect("reshape"))]
        }))
    }

    /// Concatenates along the channel axis; batch and spatial extents must agree.
    pub fn concat_channels(&self, xs: &[Var]) -> Result<Var> {
        let values: Vec<Rc<Tensor<F>>> = xs.iter().map(|&v| self.value(v)).collect();
        let first = values
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?
            .shape();
        let [b, _, h, w] = first.0;
        let mut widths = Vec::with_capacity(values.len());
        for v in &values {
            let s = v.shape();
            if s.batch() != b || s.height() != h || s.width() != w {
                return Err(Error::Shape(format!("cannot concat {first} with {s}")));
            }
            widths.push(s.channels());
        }
        let total: usize = widths.iter().sum();
        let plane = h * w;
        let mut data = Vec::with_capacity(b * total * plane);
        for bi in 0..b {
            for v in &values {
                let n = v.shape().channels() * plane;
                data.extend_from_slice(&v.data()[bi * n..(bi + 1) * n]);
            }
        }
        let value = Tensor::from_vec(Shape::new(b, total, h, w), data)?;
        Ok(self.record(value, xs, move |g, needs| {
            let mut start = 0;
            widths
                .iter()
                .zip(needs)
                .map(|(&c, &need)| {
                    let out = need.then(|| g.channels(start, c));
                    start += c;
                    out
                })
                .collect()
        }))
    }

    /// Channels `[start, start + len)` of `x`.
    pub fn slice_channels(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        let s = vx.shape();
        if start + len > s.channels() {
            return Err(Error::Shape(format!(
                "channel slice {start}..{} out of range for {s}",
                start + len
            )));
        }
        let value = vx.channels(start, len);
        Ok(self.record(value, &[x], move |g, _| {
            let [b, c, h, w] = s.0;
            let plane = h * w;
            let mut full = Tensor::zeros(s);
            let fd = full.data_mut();
            for bi in 0..b {
                let src = &g.data()[bi * len * plane..(bi + 1) * len * plane];
                let dst = bi * c * plane + start * plane;
                fd[dst..dst + len * plane].copy_from_slice(src);
            }
            vec![Some(full)]
        }))
    }

    /// `out[i] = x[index[i]]`; the backward pass scatter-adds.
    pub(crate) fn gather(&self, x: Var, index: Rc<Vec<usize>>, shape: Shape) -> Result<Var> {
        let vx = self.value(x);
        let from = vx.shape();
        if index.len() != shape.numel() {
            return Err(Error::Shape(format!(
                "gather index of length {} for output {shape}",
                index.len()
            )));
        }
        let src = vx.data();
        let data = index.iter().map(|&i| src[i]).collect();
        let value = Tensor::from_vec(shape, data)?;
        Ok(self.record(value, &[x], move |g, _| {
            let mut full = Tensor::zeros(from);
            let fd = full.data_mut();
            for (&i, &gi) in index.iter().zip(g.data()) {
                fd[i] += gi;
            }
            vec![Some(full)]
        }))
    }
}
