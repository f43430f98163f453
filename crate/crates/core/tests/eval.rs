mod common;

use common::*;
use idunet::commands::{evaluate, evaluate_pairs, test_pairs, translate_image, EvalOptions};
use idunet::imageio::RgbImage;
use idunet::networks::{Model, ModelConfig};
use idunet::synthdata::image_path;
use idunet::train::load_checkpoint;
use rand::seq::IndexedRandom;
use rand::SeedableRng;

#[test]
fn l1_matches_brute_force() {
    let dir = tempfile::tempdir().unwrap();
    let m = tiny_dataset(dir.path(), 10);
    let model = Model::<f32>::new(ModelConfig::tiny(), 2).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let all = test_pairs(&m);
    let pairs: Vec<_> = all.choose_multiple(&mut rng, 5).copied().collect();
    let scores = evaluate_pairs(&model, dir.path(), &m, &pairs, 16).unwrap();
    for (s, &(sprite, a, b)) in scores.iter().zip(&pairs) {
        let src = RgbImage::load_png(&image_path(dir.path(), sprite, a)).unwrap();
        let dst = RgbImage::load_png(&image_path(dir.path(), sprite, b)).unwrap();
        let t = translate_image(&model, &src, a, &[b]).unwrap();
        let out = &t.outputs[0].x_b_hat;
        let mut sum = 0.0;
        let mut id = 0.0;
        for y in 0..32 {
            for x in 0..32 {
                for c in 0..3 {
                    let want = dst.pixel(x, y)[c] as f64 / 255.0;
                    sum += ((out.at(0, c, y, x) as f64 + 1.0) / 2.0 - want).abs();
                    id += (src.pixel(x, y)[c] as f64 / 255.0 - want).abs();
                }
            }
        }
        let n = 32.0 * 32.0 * 3.0;
        assert!((s.l1 - sum / n).abs() < 1e-6, "{} vs {}", s.l1, sum / n);
        assert!((s.identity_l1 - id / n).abs() < 1e-6);
    }
}

#[test]
fn checkpoint_roundtrip_gives_identical_report() {
    let dir = tempfile::tempdir().unwrap();
    tiny_dataset(dir.path(), 5);
    let ckpt = fresh_checkpoint(dir.path(), 9);
    let original = Model::<f32>::new(ModelConfig::tiny(), 9).unwrap();
    let opts = EvalOptions::default();
    let want = evaluate(&original, dir.path(), &opts).unwrap();
    let loaded = load_checkpoint::<f32>(&ckpt).unwrap();
    assert_eq!(evaluate(&loaded.model, dir.path(), &opts).unwrap(), want);
    let again = idunet::commands::cmd_eval(&ckpt, dir.path(), &opts).unwrap();
    assert_eq!(again.to_text(), want.to_text());
}

#[test]
fn untrained_report_is_finite() {
    let dir = tempfile::tempdir().unwrap();
    let m = tiny_dataset(dir.path(), 5);
    let ckpt = fresh_checkpoint(dir.path(), 10);
    let report_path = dir.path().join("report.txt");
    let out = run(&[
        "eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", dir.path().to_str().unwrap(), "--report",
        report_path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{out:?}");
    let text = std::fs::read_to_string(&report_path).unwrap();
    assert_eq!(text, stdout(&out));
    let kv = idunet::synthdata::parse_key_values(&text).unwrap();
    assert_eq!(kv["pairs"], (m.test.len() * 6).to_string());
    for key in ["l1", "ssim", "identity_l1", "identity_ssim", "l1_reduction", "ssim_gain", "epe_quarter"] {
        let v: f64 = kv[key].parse().unwrap();
        assert!(v.is_finite(), "{key}={v}");
    }
    let ssim: f64 = kv["ssim"].parse().unwrap();
    assert!((-1.0..=1.0).contains(&ssim));
}

#[test]
fn mismatched_model_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let m = tiny_dataset(dir.path(), 5);
    let mut cfg = ModelConfig::tiny();
    cfg.views = 4;
    let model = Model::<f32>::new(cfg, 1).unwrap();
    let err = evaluate_pairs(&model, dir.path(), &m, &test_pairs(&m), 4).unwrap_err().to_string();
    assert!(err.contains("4 views"), "{err}");
}
