#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use idunet::networks::{Model, ModelConfig};
use idunet::synthdata::{generate_dataset, DatasetManifest, GenerateOptions};
use idunet::train::{save_checkpoint, TrainConfig};

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_idunet"))
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn idunet")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// 3 views at 32 px, matching the tiny preset.
pub fn tiny_dataset(dir: &Path, count: usize) -> DatasetManifest {
    let opts = GenerateOptions {
        views: 3,
        image_size: 32,
        flows: false,
    };
    generate_dataset(count, dir, 7, &opts).unwrap()
}

pub fn tiny_config(data: &Path, out: &Path) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.set("preset", "tiny").unwrap();
    cfg.data = data.to_path_buf();
    cfg.out = out.to_path_buf();
    cfg.batch_size = 2;
    cfg.steps = 2;
    cfg
}

/// An untrained tiny model saved as a checkpoint.
pub fn fresh_checkpoint(dir: &Path, seed: u64) -> PathBuf {
    let path = dir.join(format!("fresh-{seed}.idu"));
    let model = Model::<f32>::new(ModelConfig::tiny(), seed).unwrap();
    save_checkpoint(&path, &model, &tiny_config(dir, dir), 0).unwrap();
    path
}
