//! The tape: build an expression, run backward, compare with a central
//! difference.

use idunet::gradcheck::{grad_check, GradCheckConfig};
use idunet::{Graph, Shape, Tensor};

fn main() -> idunet::Result<()> {
    let g = Graph::<f64>::new();
    let x = g.input(Tensor::from_f64(Shape::new(1, 1, 1, 3), &[0.5, -1.0, 2.0])?);
    let w = g.input(Tensor::from_f64(Shape::new(1, 1, 1, 3), &[1.5, 0.25, -0.75])?);
    // sum(tanh(x * w)^2)
    let y = g.sum(g.square(g.tanh(g.mul(x, w)?)));
    let grads = g.backward(y);
    println!("f = {:.6}", g.value(y).item());
    println!("df/dx = {:?}", grads.get_or_zeros(x, Shape::new(1, 1, 1, 3)).data());

    let inputs = [g.tensor(x), g.tensor(w)];
    let r = grad_check(
        &inputs,
        |g, v| Ok(g.sum(g.square(g.tanh(g.mul(v[0], v[1])?)))),
        &GradCheckConfig::default(),
    )?;
    println!("max relative error vs finite differences: {:.2e} over {} coordinates", r.max_rel_error, r.checked);
    Ok(())
}
