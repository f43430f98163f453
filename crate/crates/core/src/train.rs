//! Training loop: config, batch sampling, the alternating (D, C, DAC) /
//! (E, G) step, metrics logging, checkpoints and resume.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Archive;
use crate::deform::{DeformMode, SoftMode, ViewLabel};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::{self, EgTerms, LossReport, LossWeights};
use crate::networks::{reparameterize, sample_normal, DecoderOutput, EncoderOutput, Model, ModelConfig, DAC, DIS};
use crate::optim::{adam_step, AdamConfig};
use crate::spectral::update_store;
use crate::synthdata::{parse_key_values, DatasetManifest, ImageCache};
use crate::tensor::{Real, Shape, Tensor};

pub const METRICS_FILE: &str = "metrics.csv";
pub const METRICS_HEADER: &str = "step,name,value";
pub const LATEST: &str = "latest.idu";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub data: PathBuf,
    pub out: PathBuf,
    pub preset: String,
    pub model: ModelConfig,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    pub enc: AdamConfig,
    pub gen: AdamConfig,
    pub dis: AdamConfig,
    pub dac: AdamConfig,
    pub weights: LossWeights,
    pub metrics_every: u64,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            data: PathBuf::from("data"),
            out: PathBuf::from("run"),
            preset: "default".into(),
            model: ModelConfig::default(),
            batch_size: 16,
            steps: 20_000,
            seed: 0,
            enc: AdamConfig::default(),
            gen: AdamConfig::default(),
            dis: AdamConfig::default(),
            dac: AdamConfig::default(),
            weights: LossWeights::default(),
            metrics_every: 1,
            checkpoint_every: 1000,
        }
    }
}

pub fn preset(name: &str) -> Result<ModelConfig> {
    match name {
        "default" => Ok(ModelConfig::default()),
        "small" => Ok(ModelConfig::small()),
        "tiny" => Ok(ModelConfig::tiny()),
        _ => Err(Error::InvalidArgument(format!("unknown model preset {name:?}"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::InvalidArgument(format!("{key}: cannot parse {v:?}")))
}

fn parse_widths<const N: usize>(key: &str, v: &str) -> Result<[usize; N]> {
    let parts: Vec<usize> = v.split(',').map(|p| parse_num(key, p.trim())).collect::<Result<_>>()?;
    parts
        .try_into()
        .map_err(|_| Error::InvalidArgument(format!("{key}: expected {N} comma-separated widths, got {v:?}")))
}

fn join<const N: usize>(w: [usize; N]) -> String {
    w.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        if let Some((group, field)) = key.split_once('.') {
            let adam = match group {
                "enc" => &mut self.enc,
                "gen" => &mut self.gen,
                "dis" => &mut self.dis,
                "dac" => &mut self.dac,
                _ => return Err(Error::InvalidArgument(format!("unknown config key {key:?}"))),
            };
            match field {
                "lr" => adam.lr = parse_num(key, v)?,
                "beta1" => adam.beta1 = parse_num(key, v)?,
                "beta2" => adam.beta2 = parse_num(key, v)?,
                "eps" => adam.eps = parse_num(key, v)?,
                _ => return Err(Error::InvalidArgument(format!("unknown config key {key:?}"))),
            }
            return Ok(());
        }
        let m = &mut self.model;
        match key {
            "data" => self.data = PathBuf::from(v),
            "out" => self.out = PathBuf::from(v),
            "preset" => {
                self.model = preset(v)?;
                self.preset = v.to_string();
            }
            "image_size" => m.image_size = parse_num(key, v)?,
            "views" => m.views = parse_num(key, v)?,
            "widths" => m.widths = parse_widths(key, v)?,
            "z_dim" => m.z_dim = parse_num(key, v)?,
            "cond_dim" => m.cond_dim = parse_num(key, v)?,
            "label_dim" => m.label_dim = parse_num(key, v)?,
            "kg_kernel" => m.kg_kernel = parse_num(key, v)?,
            "tau" => m.tau = parse_num(key, v)?,
            "mode" => m.mode = DeformMode::parse(v)?,
            "content_widths" => m.content_widths = parse_widths(key, v)?,
            "disc_widths" => m.disc_widths = parse_widths(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "steps" => self.steps = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "w_content" => self.weights.content = parse_num(key, v)?,
            "w_pixel" => self.weights.pixel = parse_num(key, v)?,
            "w_kl" => self.weights.kl = parse_num(key, v)?,
            "w_rough" => self.weights.rough = parse_num(key, v)?,
            "metrics_every" => self.metrics_every = parse_num(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse_num(key, v)?,
            _ => return Err(Error::InvalidArgument(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Defaults, then `preset` if given, then every other key, then `overrides`
    /// in order.
    pub fn from_pairs(file: &BTreeMap<String, String>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let preset = overrides
            .iter()
            .rev()
            .find(|(k, _)| k == "preset")
            .map(|(_, v)| v.as_str())
            .or(file.get("preset").map(|s| s.as_str()));
        if let Some(p) = preset {
            cfg.set("preset", p)?;
        }
        for (k, v) in file.iter().filter(|(k, _)| *k != "preset") {
            cfg.set(k, v)?;
        }
        for (k, v) in overrides.iter().filter(|(k, _)| k != "preset") {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_pairs(&parse_key_values(text)?, &[])
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_pairs(&parse_key_values(&text)?, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        for a in [&self.enc, &self.gen, &self.dis, &self.dac] {
            a.validate()?;
        }
        if self.batch_size == 0 || self.metrics_every == 0 || self.checkpoint_every == 0 {
            return Err(Error::InvalidArgument(
                "batch_size, metrics_every and checkpoint_every must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Every setting, one `key=value` per line, in a fixed order.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let mut lines = vec![
            format!("data={}", self.data.display()),
            format!("out={}", self.out.display()),
            format!("preset={}", self.preset),
            format!("image_size={}", m.image_size),
            format!("views={}", m.views),
            format!("widths={}", join(m.widths)),
            format!("z_dim={}", m.z_dim),
            format!("cond_dim={}", m.cond_dim),
            format!("label_dim={}", m.label_dim),
            format!("kg_kernel={}", m.kg_kernel),
            format!("tau={}", m.tau),
            format!("mode={}", m.mode.name()),
            format!("content_widths={}", join(m.content_widths)),
            format!("disc_widths={}", join(m.disc_widths)),
            format!("batch_size={}", self.batch_size),
            format!("steps={}", self.steps),
            format!("seed={}", self.seed),
            format!("w_content={}", self.weights.content),
            format!("w_pixel={}", self.weights.pixel),
            format!("w_kl={}", self.weights.kl),
            format!("w_rough={}", self.weights.rough),
            format!("metrics_every={}", self.metrics_every),
            format!("checkpoint_every={}", self.checkpoint_every),
        ];
        for (name, a) in [("enc", &self.enc), ("gen", &self.gen), ("dis", &self.dis), ("dac", &self.dac)] {
            lines.push(format!("{name}.lr={}", a.lr));
            lines.push(format!("{name}.beta1={}", a.beta1));
            lines.push(format!("{name}.beta2={}", a.beta2));
            lines.push(format!("{name}.eps={}", a.eps));
        }
        let mut s = lines.join("\n");
        s.push('\n');
        s
    }

    /// Settings that must agree between a checkpoint and a resumed run.
    fn resume_key(&self) -> TrainConfig {
        TrainConfig {
            steps: 0,
            data: PathBuf::new(),
            out: PathBuf::new(),
            ..self.clone()
        }
    }
}

/// One training batch of `(sprite, a, b)` triples.
#[derive(Clone, Debug)]
pub struct Batch<F> {
    pub items: Vec<(u64, usize, usize)>,
    pub x_a: Tensor<F>,
    pub x_b: Tensor<F>,
    pub c_a: Tensor<F>,
    pub c_b: Tensor<F>,
}

impl<F: Real> Batch<F> {
    pub fn from_items(cache: &ImageCache, items: Vec<(u64, usize, usize)>) -> Result<Self> {
        let src: Vec<(u64, usize)> = items.iter().map(|&(s, a, _)| (s, a)).collect();
        let dst: Vec<(u64, usize)> = items.iter().map(|&(s, _, b)| (s, b)).collect();
        let label = |idx: Vec<usize>| -> Result<Tensor<F>> {
            let l: Vec<ViewLabel> = idx.into_iter().map(|i| ViewLabel::new(i, cache.views)).collect::<Result<_>>()?;
            ViewLabel::batch_tensor(&l)
        };
        Ok(Batch {
            x_a: cache.batch(&src)?,
            x_b: cache.batch(&dst)?,
            c_a: label(items.iter().map(|t| t.1).collect())?,
            c_b: label(items.iter().map(|t| t.2).collect())?,
            items,
        })
    }

    pub fn cast<G: Real>(&self) -> Batch<G> {
        Batch {
            items: self.items.clone(),
            x_a: self.x_a.cast(),
            x_b: self.x_b.cast(),
            c_a: self.c_a.cast(),
            c_b: self.c_b.cast(),
        }
    }
}

/// Generator for step `step`: the run seed picks the key, the step the
/// stream, so any step can be replayed without the ones before it.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Uniform `(sprite, a, b)` triples.
pub fn sample_items(rng: &mut impl Rng, sprites: &[u64], views: usize, n: usize) -> Vec<(u64, usize, usize)> {
    (0..n)
        .map(|_| {
            let s = sprites[rng.random_range(0..sprites.len())];
            (s, rng.random_range(0..views), rng.random_range(0..views))
        })
        .collect()
}

/// Graph inputs of a batch plus the latent noise of the two encodings.
#[derive(Clone, Copy, Debug)]
pub struct BatchVars {
    pub x_a: Var,
    pub x_b: Var,
    pub c_a: Var,
    pub c_b: Var,
}

impl BatchVars {
    pub fn new<F: Real>(g: &Graph<F>, b: &Batch<F>) -> Self {
        BatchVars {
            x_a: g.constant(b.x_a.clone()),
            x_b: g.constant(b.x_b.clone()),
            c_a: g.constant(b.c_a.clone()),
            c_b: g.constant(b.c_b.clone()),
        }
    }
}

/// Generator-side passes of one step.
#[derive(Clone, Debug)]
pub struct Generated {
    pub enc: EncoderOutput,
    pub z: Var,
    /// Translation to `c_b`.
    pub out_b: DecoderOutput,
    /// Self-reconstruction (`c_b := c_a`).
    pub out_a: DecoderOutput,
    /// Cycle: `x_b_hat` re-encoded and decoded back to `c_a`.
    pub out_aa: DecoderOutput,
}

/// Runs E and G: translation to `c_b`, self-reconstruction, and the cycle
/// back to `c_a`. `eps` is the latent noise of the two encodings.
pub fn generate<F: Real>(g: &Graph<F>, model: &Model<F>, v: &BatchVars, eps: &[Tensor<F>; 2]) -> Result<Generated> {
    let enc = model.encode(g, v.x_a)?;
    let z = reparameterize(g, enc.mu, enc.log_var, &eps[0])?;
    let out_b = model.decode(g, v.x_a, &enc, z, v.c_a, v.c_b, SoftMode::Learned)?;
    let out_a = model.decode(g, v.x_a, &enc, z, v.c_a, v.c_a, SoftMode::Learned)?;
    let enc_b = model.encode(g, out_b.x_b_hat)?;
    let z_b = reparameterize(g, enc_b.mu, enc_b.log_var, &eps[1])?;
    let out_aa = model.decode(g, out_b.x_b_hat, &enc_b, z_b, v.c_b, v.c_a, SoftMode::Learned)?;
    Ok(Generated {
        enc,
        z,
        out_b,
        out_a,
        out_aa,
    })
}

/// Encoder/generator objective terms. D, C and DAC are frozen on `g` first,
/// so the terms only train E and G.
pub fn eg_terms<F: Real>(g: &Graph<F>, model: &Model<F>, v: &BatchVars, gen: &Generated) -> Result<EgTerms> {
    g.freeze_group(DIS);
    g.freeze_group(DAC);
    let x_hat_b = gen.out_b.x_b_hat;
    let (score, cls) = model.discriminate(g, x_hat_b, v.c_b)?;

    let pairs = [
        (x_hat_b, v.x_b),
        (gen.out_a.x_b_hat, v.x_a),
        (gen.out_aa.x_b_hat, v.x_a),
    ];
    let f_b = model.content_features(g, v.x_b)?;
    let f_a = model.content_features(g, v.x_a)?;
    let mut pixel = None;
    let mut content = None;
    for (i, &(x_hat, x)) in pairs.iter().enumerate() {
        let p = losses::pixel_loss(g, x_hat, x)?;
        let f_hat = model.content_features(g, x_hat)?;
        let c = losses::content_loss(g, &f_hat, if i == 0 { &f_b } else { &f_a })?;
        pixel = Some(match pixel {
            Some(acc) => g.add(acc, p)?,
            None => p,
        });
        content = Some(match content {
            Some(acc) => g.add(acc, c)?,
            None => c,
        });
    }

    let rough_cls = model.classify(g, gen.out_b.x_rough)?;
    Ok(EgTerms {
        adv_g: losses::adv_g(g, score),
        cls_eg: losses::cross_entropy(g, cls, v.c_b)?,
        content: content.expect("three pairs"),
        pixel: pixel.expect("three pairs"),
        kl: losses::kl_loss(g, gen.enc.mu, gen.enc.log_var)?,
        cls_c_enc: losses::cross_entropy(g, gen.enc.view_logits, v.c_a)?,
        cls_z_enc: losses::uniform_cross_entropy(g, model.dac_logits(g, gen.z)?),
        rough: losses::rough_loss(g, gen.out_b.x_rough, v.x_b, rough_cls, v.c_b)?,
    })
}

/// Full encoder/generator objective of a batch, for gradient checks.
pub fn eg_objective<F: Real>(g: &Graph<F>, model: &Model<F>, batch: &Batch<F>, eps: &[Tensor<F>; 2], w: &LossWeights) -> Result<Var> {
    let v = BatchVars::new(g, batch);
    let gen = generate(g, model, &v, eps)?;
    let terms = eg_terms(g, model, &v, &gen)?;
    losses::total_eg(g, &terms, w)
}

/// Discriminator-side terms on a fresh graph: hinge loss on real `x_b`
/// against the (constant) translation, view classification of real `x_b`,
/// and the latent classifier on the (constant) latent.
#[derive(Clone, Copy, Debug)]
pub struct DTerms {
    pub adv_d: Var,
    pub cls_c: Var,
    pub dac: Var,
}

pub fn d_terms<F: Real>(g: &Graph<F>, model: &Model<F>, batch: &Batch<F>, fake: &Tensor<F>, z: &Tensor<F>) -> Result<DTerms> {
    let x_b = g.constant(batch.x_b.clone());
    let c_b = g.constant(batch.c_b.clone());
    let c_a = g.constant(batch.c_a.clone());
    let (real_score, real_cls) = model.discriminate(g, x_b, c_b)?;
    let (fake_score, _) = model.discriminate(g, g.constant(fake.clone()), c_b)?;
    Ok(DTerms {
        adv_d: losses::adv_d(g, real_score, fake_score),
        cls_c: losses::cross_entropy(g, real_cls, c_b)?,
        dac: losses::cross_entropy(g, model.dac_logits(g, g.constant(z.clone()))?, c_a)?,
    })
}

fn scalar<F: Real>(g: &Graph<F>, v: Var) -> f64 {
    g.value(v).item().as_f64()
}

fn check_finite(report: &BTreeMap<String, f64>, step: u64) -> Result<()> {
    for (k, v) in report {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss {k} = {v} at step {step}")));
        }
    }
    Ok(())
}

/// Latent noise of step `step` for a batch of `b`.
pub fn step_noise<F: Real>(rng: &mut impl Rng, b: usize, z_dim: usize) -> [Tensor<F>; 2] {
    let s = Shape::new(b, z_dim, 1, 1);
    [sample_normal(s, rng), sample_normal(s, rng)]
}

/// One full training step at 1-based `step`: a (D, C, DAC) update on the
/// current translations, then an (E, G) update.
pub fn train_step(model: &mut Model<f32>, cfg: &TrainConfig, batch: &Batch<f32>, eps: &[Tensor<f32>; 2], step: u64) -> Result<LossReport> {
    let g = Graph::new();
    let v = BatchVars::new(&g, batch);
    let gen = generate(&g, model, &v, eps)?;
    let fake = g.tensor(gen.out_b.x_b_hat);
    let z = g.tensor(gen.z);

    let mut parts = BTreeMap::new();
    update_store(&mut model.dis_store);
    {
        let gd = Graph::new();
        let d = d_terms(&gd, model, batch, &fake, &z)?;
        let loss = gd.add(gd.add(d.adv_d, d.cls_c)?, d.dac)?;
        parts.insert("adv_d".to_string(), scalar(&gd, d.adv_d));
        parts.insert("cls_c".to_string(), scalar(&gd, d.cls_c));
        parts.insert("dac".to_string(), scalar(&gd, d.dac));
        check_finite(&parts, step)?;
        let grads = gd.backward(loss);
        model.dis_store.collect_grads(&gd, &grads);
        model.dac_store.collect_grads(&gd, &grads);
        adam_step(&mut model.dis_store, &cfg.dis, step)?;
        adam_step(&mut model.dac_store, &cfg.dac, step)?;
    }

    let terms = eg_terms(&g, model, &v, &gen)?;
    let total = losses::total_eg(&g, &terms, &cfg.weights)?;
    for (name, var) in [
        ("adv_g", terms.adv_g),
        ("cls_eg", terms.cls_eg),
        ("content", terms.content),
        ("pixel", terms.pixel),
        ("kl", terms.kl),
        ("cls_c_enc", terms.cls_c_enc),
        ("cls_z_enc", terms.cls_z_enc),
        ("rough", terms.rough),
    ] {
        parts.insert(name.to_string(), scalar(&g, var));
    }
    check_finite(&parts, step)?;
    let grads = g.backward(total);
    model.enc_store.collect_grads(&g, &grads);
    model.gen_store.collect_grads(&g, &grads);
    adam_step(&mut model.enc_store, &cfg.enc, step)?;
    adam_step(&mut model.gen_store, &cfg.gen, step)?;
    for s in model.stores_mut() {
        s.zero_grads();
    }
    losses::total_losses(&parts, &cfg.weights)
}

pub fn checkpoint_archive<F: Real>(model: &Model<F>, cfg: &TrainConfig, step: u64) -> Archive {
    let mut a = Archive::default();
    for s in model.stores() {
        a.push_store(s);
    }
    a.push_meta_bytes("config", cfg.to_text().as_bytes());
    a.push_meta_u64("step", step);
    a
}

/// Writes through a temporary file so a crash never leaves a torn checkpoint.
pub fn save_checkpoint<F: Real>(path: &Path, model: &Model<F>, cfg: &TrainConfig, step: u64) -> Result<()> {
    let tmp = path.with_extension("tmp");
    checkpoint_archive(model, cfg, step).save(&tmp)?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// A checkpoint decoded into a model, the config it was written with and
/// the step count.
#[derive(Clone, Debug)]
pub struct Loaded<F> {
    pub model: Model<F>,
    pub cfg: TrainConfig,
    pub step: u64,
}

pub fn load_checkpoint<F: Real>(path: &Path) -> Result<Loaded<F>> {
    let a = Archive::load(path)?;
    let text = a
        .meta_bytes("config")
        .ok_or_else(|| Error::Checkpoint(format!("{}: no config record", path.display())))?;
    let text = String::from_utf8(text).map_err(|_| Error::Checkpoint("config record is not UTF-8".into()))?;
    let cfg = TrainConfig::parse(&text)?;
    let step = a
        .meta_u64("step")
        .ok_or_else(|| Error::Checkpoint(format!("{}: no step record", path.display())))?;
    let mut model = Model::new(cfg.model, cfg.seed)?;
    for s in model.stores_mut() {
        a.restore_store(s)?;
    }
    Ok(Loaded { model, cfg, step })
}

pub fn checkpoint_name(step: u64) -> String {
    format!("ckpt-{step:06}.idu")
}

/// Rows of a metrics file with `step <= upto`, header included.
fn truncate_metrics(path: &Path, upto: u64) -> Result<()> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = String::new();
    for line in text.lines() {
        let keep = match line.split(',').next().and_then(|s| s.parse::<u64>().ok()) {
            Some(s) => s <= upto,
            None => line == METRICS_HEADER,
        };
        if keep {
            out.push_str(line);
            out.push('\n');
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// What a finished (or resumed and finished) run did.
#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub start_step: u64,
    pub end_step: u64,
    pub last: Option<LossReport>,
}

#[derive(Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model<f32>,
    pub step: u64,
    cache: ImageCache,
    sprites: Vec<u64>,
}

impl Trainer {
    /// Fresh model on the dataset named by `cfg.data`; the view count and
    /// image size come from its manifest.
    pub fn new(mut cfg: TrainConfig) -> Result<Self> {
        let manifest = DatasetManifest::load(&cfg.data)?;
        cfg.model.views = manifest.views;
        cfg.model.image_size = manifest.image_size;
        cfg.validate()?;
        let model = Model::new(cfg.model, cfg.seed)?;
        Self::with_model(cfg, model, 0, &manifest)
    }

    fn with_model(cfg: TrainConfig, model: Model<f32>, step: u64, manifest: &DatasetManifest) -> Result<Self> {
        if manifest.train.is_empty() {
            return Err(Error::InvalidArgument("dataset has no training sprites".into()));
        }
        let cache = ImageCache::load(&cfg.data, manifest, &manifest.train)?;
        Ok(Trainer {
            cfg,
            model,
            step,
            cache,
            sprites: manifest.train.clone(),
        })
    }

    /// Continues from `cfg.out/latest.idu` when it exists, else starts fresh.
    pub fn resume_or_new(cfg: TrainConfig) -> Result<Self> {
        let latest = cfg.out.join(LATEST);
        if !latest.exists() {
            return Self::new(cfg);
        }
        let loaded = load_checkpoint::<f32>(&latest)?;
        let manifest = DatasetManifest::load(&cfg.data)?;
        let mut want = cfg.clone();
        want.model.views = manifest.views;
        want.model.image_size = manifest.image_size;
        if loaded.cfg.resume_key() != want.resume_key() {
            return Err(Error::Checkpoint(format!(
                "{} was written with a different configuration",
                latest.display()
            )));
        }
        let metrics = cfg.out.join(METRICS_FILE);
        if metrics.exists() {
            truncate_metrics(&metrics, loaded.step)?;
        }
        Self::with_model(want, loaded.model, loaded.step, &manifest)
    }

    pub fn next_batch(&self, step: u64) -> Result<(Batch<f32>, [Tensor<f32>; 2])> {
        let mut rng = step_rng(self.cfg.seed, step);
        let items = sample_items(&mut rng, &self.sprites, self.cache.views, self.cfg.batch_size);
        let batch = Batch::from_items(&self.cache, items)?;
        let eps = step_noise(&mut rng, self.cfg.batch_size, self.cfg.model.z_dim);
        Ok((batch, eps))
    }

    pub fn step_once(&mut self) -> Result<LossReport> {
        let step = self.step + 1;
        let (batch, eps) = self.next_batch(step)?;
        let report = train_step(&mut self.model, &self.cfg, &batch, &eps, step)?;
        self.step = step;
        Ok(report)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.model, &self.cfg, self.step)
    }

    /// Trains up to `cfg.steps`, appending metrics and writing checkpoints
    /// to `cfg.out`. On a non-finite loss nothing of the failing step is
    /// written, so the last checkpoint stays the last good state.
    pub fn run(&mut self, mut on_step: impl FnMut(u64, &LossReport)) -> Result<TrainSummary> {
        let out = self.cfg.out.clone();
        fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        let metrics_path = out.join(METRICS_FILE);
        if !metrics_path.exists() || self.step == 0 {
            fs::write(&metrics_path, format!("{METRICS_HEADER}\n")).map_err(|e| Error::io(&metrics_path, e))?;
        }
        let mut metrics = fs::OpenOptions::new()
            .append(true)
            .open(&metrics_path)
            .map_err(|e| Error::io(&metrics_path, e))?;
        let start = self.step;
        let mut last = None;
        while self.step < self.cfg.steps {
            let report = self.step_once()?;
            let step = self.step;
            if step.is_multiple_of(self.cfg.metrics_every) {
                let mut rows = String::new();
                for (name, value) in report.ordered() {
                    rows.push_str(&format!("{step},{name},{value}\n"));
                }
                metrics
                    .write_all(rows.as_bytes())
                    .map_err(|e| Error::io(&metrics_path, e))?;
            }
            if step.is_multiple_of(self.cfg.checkpoint_every) || step == self.cfg.steps {
                metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
                self.save(&out.join(checkpoint_name(step)))?;
                self.save(&out.join(LATEST))?;
            }
            on_step(step, &report);
            last = Some(report);
        }
        Ok(TrainSummary {
            start_step: start,
            end_step: self.step,
            last,
        })
    }
}

/// Trains per `cfg`, resuming from `cfg.out` when `resume` is set.
pub fn cmd_train(cfg: TrainConfig, resume: bool, on_step: impl FnMut(u64, &LossReport)) -> Result<TrainSummary> {
    let mut t = if resume { Trainer::resume_or_new(cfg)? } else { Trainer::new(cfg)? };
    t.run(on_step)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check_params, GradCheckConfig};
    use crate::networks::{ENC, GEN};
    use crate::params::ParamStore;
    use crate::synthdata::{generate_dataset, GenerateOptions};

    fn tiny_dataset(dir: &Path) -> DatasetManifest {
        let opts = GenerateOptions {
            views: 3,
            image_size: 32,
            flows: false,
        };
        generate_dataset(4, dir, 1, &opts).unwrap()
    }

    fn tiny_cfg(data: &Path, out: &Path) -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.set("preset", "tiny").unwrap();
        cfg.data = data.to_path_buf();
        cfg.out = out.to_path_buf();
        cfg.batch_size = 2;
        cfg.steps = 4;
        cfg.checkpoint_every = 2;
        cfg
    }

    #[test]
    fn config_roundtrip_and_overrides() {
        let mut cfg = TrainConfig::default();
        cfg.set("preset", "small").unwrap();
        cfg.set("dis.lr", "0.001").unwrap();
        cfg.set("mode", "independent").unwrap();
        let back = TrainConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);

        let file = parse_key_values("preset=small\nsteps=7\n# note\nbatch_size=3\n").unwrap();
        let c = TrainConfig::from_pairs(&file, &[("steps".into(), "9".into())]).unwrap();
        assert_eq!((c.steps, c.batch_size, c.model.widths), (9, 3, [8, 16, 32]));
        assert!(TrainConfig::parse("bogus=1").is_err());
        assert!(TrainConfig::parse("enc.lr=-1").is_err());
        assert!(TrainConfig::parse("widths=1,2").is_err());
        let d = TrainConfig::default();
        assert_eq!((d.batch_size, d.steps, d.enc.lr), (16, 20_000, 0.0002));
    }

    #[test]
    fn step_rng_is_per_step() {
        let a: u64 = step_rng(3, 5).random();
        let b: u64 = step_rng(3, 5).random();
        let c: u64 = step_rng(3, 6).random();
        let d: u64 = step_rng(4, 5).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    fn snapshot(m: &Model<f32>) -> Vec<ParamStore<f32>> {
        m.stores().iter().map(|s| (*s).clone()).collect()
    }

    #[test]
    fn updates_respect_groups() {
        let data = tempfile::tempdir().unwrap();
        tiny_dataset(data.path());
        let mut t = Trainer::new(tiny_cfg(data.path(), data.path())).unwrap();
        let (batch, eps) = t.next_batch(1).unwrap();
        let before = snapshot(&t.model);

        // D step alone: E and G untouched
        let model = &mut t.model;
        let g = Graph::new();
        let v = BatchVars::new(&g, &batch);
        let gen = generate(&g, model, &v, &eps).unwrap();
        let (fake, z) = (g.tensor(gen.out_b.x_b_hat), g.tensor(gen.z));
        let gd = Graph::new();
        let d = d_terms(&gd, model, &batch, &fake, &z).unwrap();
        let loss = gd.add(gd.add(d.adv_d, d.cls_c).unwrap(), d.dac).unwrap();
        let grads = gd.backward(loss);
        for s in model.stores_mut() {
            s.collect_grads(&gd, &grads);
        }
        for s in model.stores_mut() {
            adam_step(s, &AdamConfig::default(), 1).unwrap();
        }
        assert!(model.enc_store.values_equal(&before[0]));
        assert!(model.gen_store.values_equal(&before[1]));
        assert!(!model.dis_store.values_equal(&before[2]));
        assert!(!model.dac_store.values_equal(&before[3]));

        // E/G step alone: D, C, DAC untouched
        let after_d = snapshot(model);
        let terms = eg_terms(&g, model, &v, &gen).unwrap();
        let total = losses::total_eg(&g, &terms, &LossWeights::default()).unwrap();
        let grads = g.backward(total);
        for s in model.stores_mut() {
            s.collect_grads(&g, &grads);
        }
        for s in model.stores_mut() {
            adam_step(s, &AdamConfig::default(), 1).unwrap();
        }
        assert!(!model.enc_store.values_equal(&after_d[0]));
        assert!(!model.gen_store.values_equal(&after_d[1]));
        assert!(model.dis_store.values_equal(&after_d[2]));
        assert!(model.dac_store.values_equal(&after_d[3]));
        assert!(model.content_store.values_equal(&after_d[4]));
    }

    #[test]
    fn smoke_run_checkpoint_and_resume() {
        let data = tempfile::tempdir().unwrap();
        tiny_dataset(data.path());
        let straight = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(data.path(), straight.path());
        let s = cmd_train(cfg.clone(), false, |_, _| {}).unwrap();
        assert_eq!(s.end_step, 4);
        let text = fs::read_to_string(straight.path().join(METRICS_FILE)).unwrap();
        let rows: Vec<&str> = text.lines().skip(1).collect();
        assert_eq!(rows.len(), 4 * 13);
        let steps: std::collections::BTreeSet<&str> = rows.iter().map(|r| r.split(',').next().unwrap()).collect();
        assert_eq!(steps.len(), 4);

        // checkpoint reloads to the same bytes
        let latest = straight.path().join(LATEST);
        let loaded = load_checkpoint::<f32>(&latest).unwrap();
        assert_eq!(loaded.step, 4);
        assert_eq!(loaded.cfg, cfg);
        let again = checkpoint_archive(&loaded.model, &loaded.cfg, loaded.step).to_bytes();
        assert_eq!(again, fs::read(&latest).unwrap());

        // 2 + 2 steps with resume, in the same directory so the stored
        // configs match
        let want_ckpt = fs::read(&latest).unwrap();
        let want_metrics = fs::read(straight.path().join(METRICS_FILE)).unwrap();
        for e in fs::read_dir(straight.path()).unwrap() {
            fs::remove_file(e.unwrap().path()).unwrap();
        }
        let mut half = cfg.clone();
        half.steps = 2;
        cmd_train(half, true, |_, _| {}).unwrap();
        let r = cmd_train(cfg.clone(), true, |_, _| {}).unwrap();
        assert_eq!((r.start_step, r.end_step), (2, 4));
        assert_eq!(fs::read(&latest).unwrap(), want_ckpt);
        assert_eq!(fs::read(straight.path().join(METRICS_FILE)).unwrap(), want_metrics);

        // a config change is refused on resume
        let mut other = cfg.clone();
        other.steps = 6;
        other.seed = 9;
        assert!(matches!(Trainer::resume_or_new(other), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn missing_dataset_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(&dir.path().join("nope"), dir.path());
        let err = Trainer::new(cfg).unwrap_err().to_string();
        assert!(err.contains("nope"), "{err}");
    }

    #[test]
    fn generator_objective_gradcheck() {
        let data = tempfile::tempdir().unwrap();
        let m = tiny_dataset(data.path());
        let cache = ImageCache::load(data.path(), &m, &m.train).unwrap();
        let batch = Batch::<f64>::from_items(&cache, vec![(m.train[0], 0, 2), (m.train[1], 1, 0)]).unwrap();
        let mut model = Model::<f64>::new(ModelConfig::tiny(), 11).unwrap();
        // zero-initialized residual heads would block gradients to their inputs
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for p in model.gen_store.iter_mut() {
            if p.name.contains("conv2") {
                *p.value_mut() = sample_normal(p.shape(), &mut rng).map(|v| v * 0.05);
            }
        }
        let eps = step_noise::<f64>(&mut rng, 2, model.cfg.z_dim);
        let w = LossWeights::default();
        // a small step keeps the difference quotients off the lrelu/abs
        // kinks; the floor absorbs f64 roundoff on near-zero derivatives
        let cfg = GradCheckConfig {
            eps: 1e-6,
            floor: 1e-4,
            max_coords: Some(3),
            seed: 1,
        };
        let r = grad_check_params(
            &mut model,
            |m| vec![&mut m.enc_store, &mut m.gen_store],
            |g, m| eg_objective(g, m, &batch, &eps, &w),
            &cfg,
        )
        .unwrap();
        assert!(r.checked >= 100, "{}", r.checked);
        assert!(r.passed(1e-3), "{r:?}");
        assert_eq!((ENC, GEN), ("enc", "gen"));
    }
}
