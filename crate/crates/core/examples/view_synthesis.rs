//! Translation grid, view interpolation strip and stage-flow panels for one
//! test image. Uses a trained checkpoint when given one, otherwise a freshly
//! initialized small model (whose outputs are not meaningful, only shaped).
//!
//!     cargo run --release --example view_synthesis -- [checkpoint.idu] [out_dir]

use std::path::PathBuf;

use idunet::commands::{interpolate, stage_flows, translate_image};
use idunet::deform::SoftMode;
use idunet::networks::{Model, ModelConfig};
use idunet::synthdata::{render_view, SpriteSpec};
use idunet::train::load_checkpoint;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let ckpt = args.next().filter(|a| a != "-");
    let out = PathBuf::from(args.next().unwrap_or_else(|| "synthesis_demo".into()));
    std::fs::create_dir_all(&out)?;

    let model = match ckpt {
        Some(p) => load_checkpoint::<f32>(p.as_ref())?.model,
        None => Model::new(ModelConfig::small(), 0)?,
    };
    let views = model.cfg.views;
    let size = model.cfg.image_size;
    let from = views / 2;
    let img = render_view(&SpriteSpec::from_seed(123_456), from, views, size)?;

    let targets: Vec<usize> = (0..views).collect();
    let t = translate_image(&model, &img, from, &targets)?;
    t.grid(true)?.save_png(&out.join("translate.png"))?;

    let it = interpolate(&model, &img, from, from, from + 1, 8)?;
    it.strip()?.save_png(&out.join("interpolate.png"))?;
    print!("{}", it.report());

    let flows = stage_flows(&model, &img, from, 0, SoftMode::Learned)?;
    flows.grid()?.save_png(&out.join("flows.png"))?;
    println!("wrote translate.png, interpolate.png and flows.png to {}", out.display());
    Ok(())
}
