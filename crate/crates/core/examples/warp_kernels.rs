//! Bilinear backward warping and flow composition on a small image.

use idunet::ops::warp_tensor;
use idunet::warpkit::{smooth_random, FlowField, Resolution};
use idunet::{Graph, Shape, Tensor};

fn main() -> idunet::Result<()> {
    let x: Tensor<f64> = smooth_random(Shape::new(1, 3, 32, 32), 2.0, 1.0, 7);

    // zero flow is an exact identity
    let zero = FlowField::<f64>::zeros(1, 32, 32, Resolution::Full);
    let same = warp_tensor(&x, zero.tensor())?;
    println!("zero-flow identity max diff: {:e}", same.max_abs_diff(&x));

    // a constant shift of one pixel moves every interior pixel by one
    let right = FlowField::<f64>::constant(1, 32, 32, 1.0, 0.0, Resolution::Full);
    let shifted = warp_tensor(&x, right.tensor())?;
    println!("shift check: out[5,5]={:.4} in[5,6]={:.4}", shifted.at(0, 0, 5, 5), x.at(0, 0, 5, 6));

    // warping twice vs warping once with the composed flow
    let f1: Tensor<f64> = smooth_random(Shape::new(1, 2, 32, 32), 4.0, 1.5, 1);
    let f2: Tensor<f64> = smooth_random(Shape::new(1, 2, 32, 32), 4.0, 1.5, 2);
    let g = Graph::new();
    let comp = g.value(idunet::warpkit::flow_compose(&g, g.constant(f1.clone()), g.constant(f2.clone()))?);
    let seq = warp_tensor(&warp_tensor(&x, &f1)?, &f2)?;
    let direct = warp_tensor(&x, &comp)?;
    let mut worst = 0.0f64;
    for c in 0..3 {
        for y in 4..28 {
            for xx in 4..28 {
                worst = worst.max((seq.at(0, c, y, xx) - direct.at(0, c, y, xx)).abs());
            }
        }
    }
    println!("sequential vs composed warp, interior max diff: {worst:.4}");
    Ok(())
}
