//! End to end at toy scale: generate a small dataset, train the tiny model
//! for a few dozen steps, resume, and evaluate against the identity
//! baseline.
//!
//!     cargo run --release --example train_and_eval -- [work_dir] [steps]

use std::path::PathBuf;

use idunet::commands::{cmd_eval, EvalOptions};
use idunet::synthdata::{generate_dataset, GenerateOptions};
use idunet::train::{cmd_train, TrainConfig, LATEST};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let work = PathBuf::from(args.next().unwrap_or_else(|| "toy_run".into()));
    let steps: u64 = args.next().map_or(Ok(40), |s| s.parse())?;

    let data = work.join("data");
    let opts = GenerateOptions {
        views: 3,
        image_size: 32,
        flows: false,
    };
    let m = generate_dataset(20, &data, 7, &opts)?;
    println!("dataset: {} train / {} test sprites", m.train.len(), m.test.len());

    let mut cfg = TrainConfig::default();
    cfg.set("preset", "tiny")?;
    cfg.data = data.clone();
    cfg.out = work.join("run");
    cfg.batch_size = 4;
    cfg.steps = steps / 2;
    cfg.checkpoint_every = 10;
    cmd_train(cfg.clone(), false, |_, _| {})?;

    // a second invocation picks up latest.idu and continues
    cfg.steps = steps;
    let summary = cmd_train(cfg.clone(), true, |step, r| {
        if step % 10 == 0 {
            println!("step {step}: total_eg={:.3} pixel={:.3}", r.get("total_eg").unwrap(), r.get("pixel").unwrap());
        }
    })?;
    println!("resumed at {} and stopped at {}", summary.start_step, summary.end_step);

    let report = cmd_eval(&cfg.out.join(LATEST), &data, &EvalOptions::default())?;
    print!("{}", report.to_text());
    Ok(())
}
