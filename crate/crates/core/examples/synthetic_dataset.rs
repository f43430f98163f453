//! Renders a sprite from every view, writes a strip, and checks the analytic
//! flow by warping one view onto another.
//!
//!     cargo run --release --example synthetic_dataset -- [out_dir]

use std::path::PathBuf;

use idunet::imageio::RgbImage;
use idunet::ops::warp_tensor;
use idunet::synthdata::{gt_flow, render_view, view_azimuth, SpriteSpec, DEFAULT_VIEWS};
use idunet::Tensor;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "sprite_demo".into()));
    std::fs::create_dir_all(&out)?;
    let spec = SpriteSpec::from_seed(42);
    let views = DEFAULT_VIEWS;
    let tiles = (0..views).map(|v| render_view(&spec, v, views, 64)).collect::<idunet::Result<Vec<_>>>()?;
    RgbImage::hstack(&tiles)?.save_png(&out.join("views.png"))?;
    for v in 0..views {
        print!("{:+.0} ", view_azimuth(v, views).to_degrees());
    }
    println!("degrees");

    for (a, b) in [(4, 5), (3, 5), (0, 8)] {
        let (flow, mask) = gt_flow(&spec, a, b, views, 64)?;
        let x_a: Tensor<f64> = tiles[a].to_tensor();
        let x_b: Tensor<f64> = tiles[b].to_tensor();
        let warped = warp_tensor(&x_a, flow.tensor())?;
        let (mut err, mut n) = (0.0, 0.0);
        for y in 0..64 {
            for x in 0..64 {
                if mask.at(0, 0, y, x) > 0.5 {
                    for c in 0..3 {
                        err += (warped.at(0, c, y, x) - x_b.at(0, c, y, x)).abs() / 2.0;
                    }
                    n += 3.0;
                }
            }
        }
        println!("views {a}->{b}: {} valid pixels, warp error {:.4}", n as usize / 3, err / n);
    }
    println!("wrote {}", out.join("views.png").display());
    Ok(())
}
