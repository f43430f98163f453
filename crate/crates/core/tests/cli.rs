mod common;

use std::fs;
use std::time::Instant;

use common::*;
use idunet::imageio::RgbImage;
use idunet::synthdata::image_path;
use idunet::tensor::Tensor;
use idunet::warpkit::{flow_viz_encode, FlowField, Resolution};

#[test]
fn exit_codes() {
    assert_eq!(code(&run(&[])), 1);
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["train", "--set", "nokey"])), 1);
    assert_eq!(code(&run(&["gradcheck", "--scope", "no_such_case"])), 1);
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.idu");
    let out = run(&["eval", "--checkpoint", missing.to_str().unwrap(), "--data", "."]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.idu"));
}

#[test]
fn gen_data_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let out = run(&[
            "gen-data", "--out", d.path().to_str().unwrap(), "--count", "5", "--views", "3", "--size", "32", "--seed", "4",
        ]);
        assert_eq!(code(&out), 0, "{out:?}");
    }
    let manifest = fs::read_to_string(a.path().join("manifest.txt")).unwrap();
    assert!(manifest.contains("views=3"), "{manifest}");
    assert_eq!(manifest, fs::read_to_string(b.path().join("manifest.txt")).unwrap());
    let mut pngs = 0;
    for e in fs::read_dir(a.path()).unwrap() {
        let p = e.unwrap().path();
        if p.extension().is_some_and(|x| x == "png") {
            pngs += 1;
            assert_eq!(fs::read(&p).unwrap(), fs::read(b.path().join(p.file_name().unwrap())).unwrap());
            let img = RgbImage::load_png(&p).unwrap();
            assert_eq!((img.width, img.height), (32, 32));
        }
    }
    assert_eq!(pngs, 15);
}

fn to_f(b: u8) -> f64 {
    b as f64 / 255.0
}

#[test]
fn translate_grid_and_mixing_identity() {
    let dir = tempfile::tempdir().unwrap();
    let m = tiny_dataset(dir.path(), 5);
    let ckpt = fresh_checkpoint(dir.path(), 5);
    let image = image_path(dir.path(), m.test[0], 0);
    let out = dir.path().join("grid.png");
    let args = |panels: bool| {
        let mut a = vec![
            "translate".to_string(),
            "--checkpoint".into(),
            ckpt.display().to_string(),
            "--image".into(),
            image.display().to_string(),
            "--from".into(),
            "0".into(),
            "--to".into(),
            "1,2".into(),
            "--out".into(),
            out.display().to_string(),
        ];
        if panels {
            a.push("--panels".into());
        }
        a
    };
    let plain = bin().args(args(false)).output().unwrap();
    assert_eq!(code(&plain), 0, "{plain:?}");
    let grid = RgbImage::load_png(&out).unwrap();
    assert_eq!((grid.width, grid.height), (3 * 32, 32));
    assert_eq!(grid.tile(0, 0, 32).unwrap(), RgbImage::load_png(&image).unwrap());

    let full = bin().args(args(true)).output().unwrap();
    assert_eq!(code(&full), 0);
    let grid = RgbImage::load_png(&out).unwrap();
    assert_eq!((grid.width, grid.height), (3 * 32, 4 * 32));
    assert_eq!(grid.tile(0, 1, 32).unwrap(), RgbImage::filled(32, 32, [255; 3]));

    // x_b_hat = mask * x_warp + (1 - mask) * x_g, recomposed from the PNG bytes
    let (mut worst, mut total, mut n) = (0.0f64, 0.0, 0.0);
    for col in 1..3 {
        let [out_, gen, warp, mask] = [0, 1, 2, 3].map(|r| grid.tile(col, r, 32).unwrap());
        for y in 0..32 {
            for x in 0..32 {
                let mk = mask.pixel(x, y);
                assert!(mk[0] == mk[1] && mk[1] == mk[2], "mask panel is gray");
                let m = to_f(mk[0]);
                for c in 0..3 {
                    let re = m * to_f(warp.pixel(x, y)[c]) + (1.0 - m) * to_f(gen.pixel(x, y)[c]);
                    let e = (re - to_f(out_.pixel(x, y)[c])).abs();
                    worst = worst.max(e);
                    total += e;
                    n += 1.0;
                }
            }
        }
    }
    let mean = total / n;
    println!("mixing identity from panels: mean {:.3}/255 max {:.3}/255", mean * 255.0, worst * 255.0);
    assert!(worst <= 1.0 / 255.0, "max {worst}");

    let bad = run(&[
        "translate", "--checkpoint", ckpt.to_str().unwrap(), "--image", image.to_str().unwrap(),
        "--from", "0", "--to", "3", "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(code(&bad), 2);
}

#[test]
fn interpolate_strip_endpoints() {
    let dir = tempfile::tempdir().unwrap();
    let m = tiny_dataset(dir.path(), 5);
    let ckpt = fresh_checkpoint(dir.path(), 6);
    let image = image_path(dir.path(), m.test[0], 1);
    let strip = dir.path().join("strip.png");
    let out = run(&[
        "interpolate", "--checkpoint", ckpt.to_str().unwrap(), "--image", image.to_str().unwrap(), "--from", "1",
        "--views", "1,2", "--steps", "6", "--out", strip.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{out:?}");
    assert!(stdout(&out).contains("frames=6"));
    let s = RgbImage::load_png(&strip).unwrap();
    assert_eq!((s.width, s.height), (6 * 32, 32));

    let grid_path = dir.path().join("t.png");
    let t = run(&[
        "translate", "--checkpoint", ckpt.to_str().unwrap(), "--image", image.to_str().unwrap(), "--from", "1",
        "--to", "1,2", "--out", grid_path.to_str().unwrap(),
    ]);
    assert_eq!(code(&t), 0);
    let grid = RgbImage::load_png(&grid_path).unwrap();
    assert_eq!(s.tile(0, 0, 32).unwrap(), grid.tile(1, 0, 32).unwrap());
    assert_eq!(s.tile(5, 0, 32).unwrap(), grid.tile(2, 0, 32).unwrap());

    let far = run(&[
        "interpolate", "--checkpoint", ckpt.to_str().unwrap(), "--image", image.to_str().unwrap(), "--from", "1",
        "--views", "0,2", "--steps", "3", "--out", strip.to_str().unwrap(),
    ]);
    assert_eq!(code(&far), 0);
    assert!(String::from_utf8_lossy(&far.stderr).contains("not adjacent"));
}

#[test]
fn flowviz_zero_deformation_is_white() {
    let dir = tempfile::tempdir().unwrap();
    let m = tiny_dataset(dir.path(), 5);
    let ckpt = fresh_checkpoint(dir.path(), 7);
    let image = image_path(dir.path(), m.test[0], 2);
    let out = dir.path().join("flows.png");
    let r = run(&[
        "flowviz", "--checkpoint", ckpt.to_str().unwrap(), "--image", image.to_str().unwrap(), "--from", "2", "--to",
        "2", "--out", out.to_str().unwrap(), "--identity-soft",
    ]);
    assert_eq!(code(&r), 0, "{r:?}");
    let grid = RgbImage::load_png(&out).unwrap();
    assert_eq!((grid.width, grid.height), (4 * 32, 32));
    assert_eq!(grid, RgbImage::filled(4 * 32, 32, [255; 3]));
}

/// Most attended source cell per target cell, first maximum on ties.
fn argmax_flow(w: &Tensor<f32>, h: usize, wd: usize) -> FlowField<f32> {
    let n = h * wd;
    let mut d = vec![0.0f32; 2 * n];
    for u in 0..n {
        let mut best = 0;
        for v in 1..n {
            if w.at(0, 0, u, v) > w.at(0, 0, u, best) {
                best = v;
            }
        }
        d[u] = (best % wd) as f32 - (u % wd) as f32;
        d[n + u] = (best / wd) as f32 - (u / wd) as f32;
    }
    FlowField::new(Tensor::from_vec(idunet::tensor::Shape::new(1, 2, h, wd), d).unwrap(), Resolution::Quarter).unwrap()
}

#[test]
fn flowviz_soft_panel_matches_argmax_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let m = tiny_dataset(dir.path(), 5);
    let ckpt = fresh_checkpoint(dir.path(), 8);
    let image = image_path(dir.path(), m.test[0], 0);
    let out = dir.path().join("flows.png");
    let r = run(&[
        "flowviz", "--checkpoint", ckpt.to_str().unwrap(), "--image", image.to_str().unwrap(), "--from", "0", "--to",
        "2", "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(code(&r), 0, "{r:?}");
    let grid = RgbImage::load_png(&out).unwrap();

    let loaded = idunet::train::load_checkpoint::<f32>(&ckpt).unwrap();
    let img = RgbImage::load_png(&image).unwrap();
    let flows = idunet::commands::stage_flows(&loaded.model, &img, 0, 2, idunet::deform::SoftMode::Learned).unwrap();
    let oracle = flow_viz_encode(&argmax_flow(&flows.soft_weights, 8, 8), 0, None).scaled(4);
    assert_eq!(grid.tile(1, 0, 32).unwrap(), oracle);
}

#[test]
fn training_is_deterministic_from_the_cli() {
    let data = tempfile::tempdir().unwrap();
    tiny_dataset(data.path(), 4);
    let out_dir = data.path().join("run");
    let cfg_path = data.path().join("train.cfg");
    fs::write(&cfg_path, "preset=tiny\nbatch_size=2\nsteps=3\nseed=11\n").unwrap();
    // same out path both times: checkpoints record the full config
    let mut results = Vec::new();
    for _ in 0..2 {
        let _ = fs::remove_dir_all(&out_dir);
        let out = run(&[
            "train", "--config", cfg_path.to_str().unwrap(), "--data", data.path().to_str().unwrap(), "--out",
            out_dir.to_str().unwrap(), "--log-every", "1",
        ]);
        assert_eq!(code(&out), 0, "{out:?}");
        assert_eq!(String::from_utf8_lossy(&out.stderr).lines().filter(|l| l.starts_with("step ")).count(), 3);
        results.push([fs::read(out_dir.join("metrics.csv")).unwrap(), fs::read(out_dir.join("latest.idu")).unwrap()]);
    }
    let read = |i: usize, f: &str| results[i][usize::from(f == "latest.idu")].clone();
    let csv = String::from_utf8(read(0, "metrics.csv")).unwrap();
    assert!(csv.starts_with("step,name,value\n"));
    assert!(read(0, "metrics.csv") == read(1, "metrics.csv"));
    assert!(read(0, "latest.idu") == read(1, "latest.idu"));
    assert_eq!(&read(0, "latest.idu")[..4], b"IDU1");
}

#[test]
fn gradcheck_single_case_and_mutants() {
    let t = Instant::now();
    let out = run(&["gradcheck", "--scope", "hard_warp"]);
    assert_eq!(code(&out), 0, "{out:?}");
    assert!(stdout(&out).contains("1 cases, 0 unexpected"));
    assert!(t.elapsed().as_secs() < 60);

    let out = run(&["gradcheck", "--scope", "mutant", "--seeds", "2"]);
    assert_eq!(code(&out), 0, "{out:?}");
    assert_eq!(stdout(&out).matches("DETECTED").count(), 2);
}
