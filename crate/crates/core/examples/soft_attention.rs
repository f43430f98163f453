//! Soft flow between two feature maps: rows are distributions, and a low
//! temperature turns the soft warp into an argmax gather.

use idunet::checks::rand_tensor;
use idunet::warpkit::{soft_flow, soft_flow_argmax, soft_spatial_warp};
use idunet::{Graph, Shape};

fn main() -> idunet::Result<()> {
    let (h, w) = (4, 5);
    let src = rand_tensor(Shape::new(1, 6, h, w), 1);
    let tgt = rand_tensor(Shape::new(1, 6, h, w), 2);

    for tau in [1.0, 0.1, 1e-3] {
        let g = Graph::<f64>::new();
        let (e, t) = (g.constant(src.clone()), g.constant(tgt.clone()));
        let sf = soft_flow(&g, e, t, tau)?;
        let weights = g.value(sf.weights);
        let worst_row = weights
            .data()
            .chunks(h * w)
            .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max);
        let peak = weights.data().chunks(h * w).map(|r| r.iter().cloned().fold(0.0, f64::max)).sum::<f64>()
            / (h * w) as f64;
        let warped = g.value(soft_spatial_warp(&g, e, &sf)?);
        println!("tau={tau:<6} row-sum error {worst_row:.1e}  mean peak weight {peak:.3}  warped[0]={:.4}", warped.data()[0]);
    }

    let g = Graph::<f64>::new();
    let sf = soft_flow(&g, g.constant(src), g.constant(tgt), 1e-3)?;
    let hard = soft_flow_argmax(&g.value(sf.weights), h, w);
    println!("argmax flow at (0,0): dx={} dy={}", hard.dx(0, 0, 0), hard.dy(0, 0, 0));
    Ok(())
}
