//! The three deformation stages on random features: with equal source and
//! target views and identity attention nothing moves; with a view change
//! every stage produces a flow.

use idunet::checks::rand_tensor;
use idunet::deform::{image_warp_chain, DeformConfig, DeformMode, Deformer, SoftMode, ViewLabel};
use idunet::params::ParamStore;
use idunet::warpkit::DEFAULT_TAU;
use idunet::{Graph, Shape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> idunet::Result<()> {
    let cfg = DeformConfig {
        widths: [4, 6, 8],
        views: 9,
        cond_dim: 16,
        kg_kernel: 3,
        tau: DEFAULT_TAU,
        mode: DeformMode::Iterative,
    };
    let mut store = ParamStore::<f64>::new("gen");
    let d = Deformer::new(&mut store, cfg, &mut ChaCha8Rng::seed_from_u64(0))?;

    let g = Graph::new();
    let f_e = [(4, 32), (6, 16), (8, 8)].map(|(c, n)| g.constant(rand_tensor(Shape::new(1, c, n, n), n as u64)));
    let f_g = [(4, 32), (6, 16), (8, 8)].map(|(c, n)| g.constant(rand_tensor(Shape::new(1, c, n, n), 100 + n as u64)));
    let label = |v: usize| ViewLabel::batch_tensor(&[ViewLabel::new(v, 9).unwrap()]).map(|t| g.constant(t));
    let x = rand_tensor(Shape::new(1, 3, 32, 32), 7);

    let same = d.cond.embed(&g, &store, label(4)?, label(4)?)?;
    let (outs, state) = d.forward_all(&g, &store, f_e, f_g, &same, SoftMode::Identity)?;
    let moved = g.tensor(image_warp_chain(&g, g.constant(x.clone()), &state)?);
    println!("same view, identity attention: image max change {:e}", moved.max_abs_diff(&x));
    for (o, f) in outs.iter().zip(&f_e) {
        println!("  stage output equals its input: {}", g.tensor(o.warped) == g.tensor(*f));
    }

    let turn = d.cond.embed(&g, &store, label(2)?, label(6)?)?;
    let (_, state) = d.forward_all(&g, &store, f_e, f_g, &turn, SoftMode::Learned)?;
    let max_abs = |v| g.tensor(v).data().iter().fold(0.0f64, |m: f64, x: &f64| m.max(x.abs()));
    println!("view 2 -> 6:");
    println!("  KG flow max |offset| (quarter px): {:.4}", max_abs(state.kg_flow));
    println!("  half residual (fresh heads are zero): {:.4}", max_abs(state.residuals[0]));
    println!("  full residual (fresh heads are zero): {:.4}", max_abs(state.residuals[1]));
    Ok(())
}
