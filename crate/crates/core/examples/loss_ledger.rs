//! The weighted encoder/generator objective from its components, and a few
//! reference values of the individual losses.

use std::collections::BTreeMap;

use idunet::losses::{kl_loss, total_losses, uniform_cross_entropy, LossWeights, COMPONENTS};
use idunet::{Graph, Shape, Tensor};

fn main() -> idunet::Result<()> {
    let parts: BTreeMap<String, f64> = COMPONENTS.iter().map(|n| (n.to_string(), 1.0)).collect();
    let w = LossWeights::default();
    let r = total_losses(&parts, &w)?;
    println!("weights content={} pixel={} kl={} rough={}", w.content, w.pixel, w.kl, w.rough);
    println!("all components 1.0 -> total_eg={} total_d={}", r.get("total_eg")?, r.get("total_d")?);

    let g = Graph::<f64>::new();
    let zeros = g.constant(Tensor::zeros(Shape::new(2, 8, 1, 1)));
    println!("kl(0, 0) = {}", g.value(kl_loss(&g, zeros, zeros)?).item());
    let logits = g.constant(Tensor::zeros(Shape::new(3, 9, 1, 1)));
    println!("uniform CE over 9 views = {:.9} (ln 9 = {:.9})", g.value(uniform_cross_entropy(&g, logits)).item(), 9f64.ln());
    Ok(())
}
