//! L1 and SSIM between renderings of neighbouring views, with the identity
//! (unchanged source) as the baseline a model has to beat.

use idunet::metrics::{l1, ssim};
use idunet::synthdata::{render_view, SpriteSpec};
use idunet::Tensor;

fn main() -> idunet::Result<()> {
    let spec = SpriteSpec::from_seed(9);
    let imgs: Vec<Tensor<f64>> = (0..9)
        .map(|v| render_view(&spec, v, 9, 64).map(|i| i.to_tensor()))
        .collect::<idunet::Result<_>>()?;
    println!("ssim(x, x) = {:.6}", ssim(&imgs[4], &imgs[4])?[0]);
    for b in [5, 6, 8] {
        println!(
            "view 4 vs {b}: L1 {:.4}  SSIM {:.4}",
            l1(&imgs[4], &imgs[b])?[0],
            ssim(&imgs[4], &imgs[b])?[0]
        );
    }
    Ok(())
}
