//! Encoder, generator (decoder with the deformation ladder), discriminator
//! with its shared view classifier, latent view classifier, and the frozen
//! feature pyramid used by the content loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::deform::{ConditionVector, DeformConfig, DeformMode, Deformer, FlowState, SoftMode, StageOutput};
use crate::deform::image_warp_chain;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{lrelu, Conv, Dense};
use crate::ops::UpsampleMode;
use crate::params::{Init, ParamStore};
use crate::tensor::{Real, Shape, Tensor};
use crate::warpkit::DEFAULT_TAU;

pub const LOG_VAR_CLAMP: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    /// Channels at full, half and quarter resolution.
    pub widths: [usize; 3],
    pub z_dim: usize,
    pub views: usize,
    pub cond_dim: usize,
    pub label_dim: usize,
    pub kg_kernel: usize,
    pub tau: f64,
    pub mode: DeformMode,
    pub content_widths: [usize; 3],
    pub disc_widths: [usize; 4],
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            widths: [32, 64, 128],
            z_dim: 128,
            views: 9,
            cond_dim: 64,
            label_dim: 64,
            kg_kernel: 1,
            tau: DEFAULT_TAU,
            mode: DeformMode::Iterative,
            content_widths: [16, 32, 64],
            disc_widths: [32, 64, 128, 128],
        }
    }
}

impl ModelConfig {
    /// A few-thousand-parameter model on 32x32 images for gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            image_size: 32,
            widths: [2, 3, 4],
            z_dim: 4,
            views: 3,
            cond_dim: 4,
            label_dim: 3,
            content_widths: [2, 2, 3],
            disc_widths: [2, 3, 4, 4],
            ..Self::default()
        }
    }

    /// Quarter-width model on 64x64 images that trains on one CPU core.
    pub fn small() -> Self {
        ModelConfig {
            widths: [8, 16, 32],
            z_dim: 32,
            cond_dim: 32,
            label_dim: 16,
            content_widths: [8, 16, 32],
            disc_widths: [16, 32, 64, 64],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 || !self.image_size.is_multiple_of(16) {
            return Err(Error::InvalidArgument(format!(
                "image size must be a positive multiple of 16, got {}",
                self.image_size
            )));
        }
        if self.views < 2 || self.z_dim == 0 || self.widths.contains(&0) {
            return Err(Error::InvalidArgument("model extents must be positive and K >= 2".into()));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::InvalidArgument(format!("tau must be finite and > 0, got {}", self.tau)));
        }
        if self.kg_kernel.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!("KG kernel size must be odd, got {}", self.kg_kernel)));
        }
        Ok(())
    }

    pub fn deform(&self) -> DeformConfig {
        DeformConfig {
            widths: self.widths,
            views: self.views,
            cond_dim: self.cond_dim,
            kg_kernel: self.kg_kernel,
            tau: self.tau,
            mode: self.mode,
        }
    }
}

fn check_image<F: Real>(g: &Graph<F>, x: Var, size: usize) -> Result<()> {
    let s = g.shape(x);
    if s.channels() != 3 || s.height() != size || s.width() != size {
        return Err(Error::Shape(format!("expected [batch, 3, {size}, {size}] images, got {s}")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    /// Full, half and quarter resolution features.
    pub f_e: [Var; 3],
    pub mu: Var,
    pub log_var: Var,
    pub view_logits: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct Encoder {
    size: usize,
    stem: Conv,
    down2: Conv,
    down3: Conv,
    deep1: Conv,
    deep2: Conv,
    mu: Dense,
    log_var: Dense,
    view: Dense,
}

impl Encoder {
    pub fn new<F: Real>(store: &mut ParamStore<F>, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let [c1, c2, c3] = cfg.widths;
        let flat = c3 * (cfg.image_size / 16).pow(2);
        Ok(Encoder {
            size: cfg.image_size,
            stem: Conv::new(store, "stem", 3, c1, 3, 1, true, rng)?,
            down2: Conv::new(store, "down2", c1, c2, 3, 2, true, rng)?,
            down3: Conv::new(store, "down3", c2, c3, 3, 2, true, rng)?,
            deep1: Conv::new(store, "deep1", c3, c3, 3, 2, false, rng)?,
            deep2: Conv::new(store, "deep2", c3, c3, 3, 2, false, rng)?,
            mu: Dense::new(store, "mu", flat, cfg.z_dim, true, rng)?,
            log_var: Dense::new(store, "log_var", flat, cfg.z_dim, true, rng)?,
            view: Dense::new(store, "view", flat, cfg.views, true, rng)?,
        })
    }

    pub fn forward<F: Real>(&self, g: &Graph<F>, store: &ParamStore<F>, x: Var) -> Result<EncoderOutput> {
        check_image(g, x, self.size)?;
        let f1 = lrelu(g, g.positional_norm(self.stem.forward(g, store, x)?));
        let f2 = lrelu(g, g.positional_norm(self.down2.forward(g, store, f1)?));
        let f3 = lrelu(g, g.positional_norm(self.down3.forward(g, store, f2)?));
        let h = lrelu(g, g.instance_norm(self.deep1.forward(g, store, f3)?));
        let h = lrelu(g, g.instance_norm(self.deep2.forward(g, store, h)?));
        Ok(EncoderOutput {
            f_e: [f1, f2, f3],
            mu: self.mu.forward(g, store, h)?,
            log_var: self.log_var.forward(g, store, h)?,
            view_logits: self.view.forward(g, store, h)?,
        })
    }
}

/// Standard-normal noise of `shape`.
pub fn sample_normal<F: Real>(shape: Shape, rng: &mut impl Rng) -> Tensor<F> {
    let data = (0..shape.numel()).map(|_| F::lit(StandardNormal.sample(rng))).collect();
    Tensor::from_vec(shape, data).expect("shape")
}

/// `z = mu + exp(log_var / 2) * eps` with `log_var` clamped to `[-10, 10]`.
pub fn reparameterize<F: Real>(g: &Graph<F>, mu: Var, log_var: Var, eps: &Tensor<F>) -> Result<Var> {
    let lv = g.clamp(log_var, -LOG_VAR_CLAMP, LOG_VAR_CLAMP);
    let std = g.exp(g.scale(lv, 0.5));
    let e = g.constant(eps.clone());
    g.add(mu, g.mul(std, e)?)
}

/// Same as [`reparameterize`] with `eps` drawn from a generator seeded by `seed`.
pub fn reparameterize_seeded<F: Real>(g: &Graph<F>, mu: Var, log_var: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = sample_normal(g.shape(mu), &mut rng);
    reparameterize(g, mu, log_var, &eps)
}

/// `mask * x_warp + (1 - mask) * x_g`.
pub fn mix<F: Real>(g: &Graph<F>, mask: Var, x_warp: Var, x_g: Var) -> Result<Var> {
    let inv = g.add_scalar(g.neg(mask), 1.0);
    g.add(g.mul(mask, x_warp)?, g.mul(inv, x_g)?)
}

/// Spatially adaptive denormalization: instance-normalize `x`, then scale
/// and shift per pixel with maps predicted from `guide`.
#[derive(Clone, Copy, Debug)]
pub struct Dfnm {
    conv: Conv,
    gamma: Conv,
    beta: Conv,
}

impl Dfnm {
    fn new<F: Real>(store: &mut ParamStore<F>, name: &str, width: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Dfnm {
            conv: Conv::new(store, &format!("{name}.conv"), width, width, 3, 1, false, rng)?,
            gamma: Conv::new(store, &format!("{name}.gamma"), width, width, 3, 1, true, rng)?,
            beta: Conv::new(store, &format!("{name}.beta"), width, width, 3, 1, true, rng)?,
        })
    }

    fn forward<F: Real>(&self, g: &Graph<F>, store: &ParamStore<F>, x: Var, guide: Var) -> Result<Var> {
        let n = g.instance_norm(self.conv.forward(g, store, x)?);
        let gamma = self.gamma.forward(g, store, guide)?;
        let beta = self.beta.forward(g, store, guide)?;
        let scaled = g.add(n, g.mul(n, gamma)?)?;
        Ok(lrelu(g, g.add(scaled, beta)?))
    }
}

#[derive(Clone, Debug)]
pub struct DecoderOutput {
    /// Decoder features at full, half and quarter resolution, as seen by
    /// the deformation stages.
    pub f_g: [Var; 3],
    /// Deformed encoder features at full, half and quarter resolution.
    pub stages: [StageOutput; 3],
    pub flow: FlowState,
    pub cond: ConditionVector,
    pub x_g: Var,
    pub mask: Var,
    pub x_warp: Var,
    pub x_b_hat: Var,
    pub x_rough: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct Generator {
    size: usize,
    widths: [usize; 3],
    pub deform: Deformer,
    label: Dense,
    seed: Dense,
    dfnm3: Dfnm,
    up2: Conv,
    dfnm2: Dfnm,
    up1: Conv,
    dfnm1: Dfnm,
    to_rgb: Conv,
    mask: Conv,
    rough: Conv,
}

impl Generator {
    pub fn new<F: Real>(store: &mut ParamStore<F>, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let [c1, c2, c3] = cfg.widths;
        let q = cfg.image_size / 4;
        Ok(Generator {
            size: cfg.image_size,
            widths: cfg.widths,
            deform: Deformer::new(store, cfg.deform(), rng)?,
            label: Dense::new(store, "label", cfg.views, cfg.label_dim, false, rng)?,
            seed: Dense::new(store, "seed", cfg.z_dim + cfg.label_dim, c3 * q * q, true, rng)?,
            dfnm3: Dfnm::new(store, "dfnm3", c3, rng)?,
            up2: Conv::new(store, "up2", c3, c2, 3, 1, true, rng)?,
            dfnm2: Dfnm::new(store, "dfnm2", c2, rng)?,
            up1: Conv::new(store, "up1", c2, c1, 3, 1, true, rng)?,
            dfnm1: Dfnm::new(store, "dfnm1", c1, rng)?,
            to_rgb: Conv::new(store, "to_rgb", c1, 3, 3, 1, true, rng)?,
            mask: Conv::new(store, "mask", c1 + 2, 1, 3, 1, true, rng)?,
            rough: Conv::new(store, "rough", c1 + c2 + c3, 3, 3, 1, true, rng)?,
        })
    }

    /// Decodes `z` towards view `c_b`, deforming the encoder features of
    /// the source `x_a` (view `c_a`) stage by stage.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<F: Real>(
        &self,
        g: &Graph<F>,
        store: &ParamStore<F>,
        x_a: Var,
        enc: &EncoderOutput,
        z: Var,
        c_a: Var,
        c_b: Var,
        soft_mode: SoftMode,
    ) -> Result<DecoderOutput> {
        check_image(g, x_a, self.size)?;
        let b = g.shape(z).batch();
        let [_, _, c3] = self.widths;
        let q = self.size / 4;
        let cond = self.deform.cond.embed(g, store, c_a, c_b)?;

        let label = self.label.forward(g, store, c_b)?;
        let zl = g.concat_channels(&[g.reshape(z, Shape::new(b, g.shape(z).numel() / b, 1, 1))?, label])?;
        let seed = self.seed.forward(g, store, zl)?;
        let f_g3 = lrelu(g, g.reshape(seed, Shape::new(b, c3, q, q))?);

        let (o3, s3) = self.deform.scdm(g, enc.f_e[2], f_g3, &cond, soft_mode)?;
        let m3 = self.dfnm3.forward(g, store, f_g3, o3.warped)?;
        let up = g.upsample(m3, 2, UpsampleMode::Bilinear)?;
        let f_g2 = lrelu(g, self.up2.forward(g, store, up)?);

        let (o2, s2) = self.deform.hcdm(g, store, enc.f_e[1], f_g2, &cond, &s3, 2)?;
        let m2 = self.dfnm2.forward(g, store, f_g2, o2.warped)?;
        let up = g.upsample(m2, 2, UpsampleMode::Bilinear)?;
        let f_g1 = lrelu(g, self.up1.forward(g, store, up)?);

        let (o1, s1) = self.deform.hcdm(g, store, enc.f_e[0], f_g1, &cond, &s2, 1)?;
        let m1 = self.dfnm1.forward(g, store, f_g1, o1.warped)?;

        let x_g = g.tanh(self.to_rgb.forward(g, store, m1)?);
        let final_flow = s1.hard.ok_or_else(|| Error::Missing("final hard flow".into()))?;
        let mask_in = g.concat_channels(&[m1, final_flow])?;
        let mask = g.sigmoid(self.mask.forward(g, store, mask_in)?);
        let x_warp = image_warp_chain(g, x_a, &s1)?;
        let x_b_hat = mix(g, mask, x_warp, x_g)?;

        let r3 = g.upsample(f_g3, 4, UpsampleMode::Bilinear)?;
        let r2 = g.upsample(f_g2, 2, UpsampleMode::Bilinear)?;
        let rough_in = g.concat_channels(&[r3, r2, f_g1])?;
        let x_rough = g.tanh(self.rough.forward(g, store, rough_in)?);

        Ok(DecoderOutput {
            f_g: [f_g1, f_g2, f_g3],
            stages: [o1, o2, o3],
            flow: s1,
            cond,
            x_g,
            mask,
            x_warp,
            x_b_hat,
            x_rough,
        })
    }
}

/// Spectrally normalized conv trunk with a projection-conditioned score and
/// a view classifier head on the shared trunk.
#[derive(Clone, Copy, Debug)]
pub struct Discriminator {
    trunk: [Conv; 4],
    adv: Dense,
    embed: Dense,
    cls: Dense,
}

impl Discriminator {
    pub fn new<F: Real>(store: &mut ParamStore<F>, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let [d0, d1, d2, d3] = cfg.disc_widths;
        let ins = [3, d0, d1, d2];
        let outs = [d0, d1, d2, d3];
        let mut trunk = Vec::with_capacity(4);
        for i in 0..4 {
            trunk.push(Conv::new(store, &format!("conv{i}"), ins[i], outs[i], 3, 2, true, rng)?.spectral(store, rng)?);
        }
        Ok(Discriminator {
            trunk: trunk.try_into().expect("four layers"),
            adv: Dense::new(store, "adv", d3, 1, true, rng)?.spectral(store, rng)?,
            embed: Dense::new(store, "embed", cfg.views, d3, false, rng)?.spectral(store, rng)?,
            cls: Dense::new(store, "cls", d3, cfg.views, true, rng)?.spectral(store, rng)?,
        })
    }

    /// Pooled trunk features, `(batch, d3, 1, 1)`.
    pub fn features<F: Real>(&self, g: &Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let mut h = x;
        for conv in &self.trunk {
            h = lrelu(g, conv.forward(g, store, h)?);
        }
        Ok(g.sum_axes(h, [false, false, true, true]))
    }

    /// `(score (batch, 1, 1, 1), view logits (batch, K, 1, 1))`.
    pub fn forward<F: Real>(&self, g: &Graph<F>, store: &ParamStore<F>, x: Var, c: Var) -> Result<(Var, Var)> {
        let h = self.features(g, store, x)?;
        let e = self.embed.forward(g, store, c)?;
        let proj = g.sum_axes(g.mul(h, e)?, [false, true, false, false]);
        let score = g.add(self.adv.forward(g, store, h)?, proj)?;
        Ok((score, self.cls.forward(g, store, h)?))
    }

    pub fn classify<F: Real>(&self, g: &Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let h = self.features(g, store, x)?;
        self.cls.forward(g, store, h)
    }
}

/// Latent view classifier.
#[derive(Clone, Copy, Debug)]
pub struct Dac {
    hidden: Dense,
    out: Dense,
}

impl Dac {
    pub fn new<F: Real>(store: &mut ParamStore<F>, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        Ok(Dac {
            hidden: Dense::new(store, "hidden", cfg.z_dim, cfg.z_dim, true, rng)?,
            out: Dense::new(store, "out", cfg.z_dim, cfg.views, true, rng)?,
        })
    }

    pub fn forward<F: Real>(&self, g: &Graph<F>, store: &ParamStore<F>, z: Var) -> Result<Var> {
        let h = lrelu(g, self.hidden.forward(g, store, z)?);
        self.out.forward(g, store, h)
    }
}

/// Frozen random conv pyramid standing in for a pretrained perceptual net.
#[derive(Clone, Copy, Debug)]
pub struct ContentNet {
    convs: [Conv; 3],
}

impl ContentNet {
    pub fn new<F: Real>(store: &mut ParamStore<F>, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let [a, b, c] = cfg.content_widths;
        let mut convs = Vec::with_capacity(3);
        for (i, (cin, cout)) in [(3, a), (a, b), (b, c)].into_iter().enumerate() {
            // fan-in scaled so activations keep their magnitude through depth
            let std = (2.0 / (cin * 9) as f64).sqrt();
            convs.push(Conv::with_init(store, &format!("conv{i}"), cin, cout, 3, 2, false, Init::TruncatedNormal(std), rng)?);
        }
        Ok(ContentNet {
            convs: convs.try_into().expect("three layers"),
        })
    }

    pub fn features<F: Real>(&self, g: &Graph<F>, store: &ParamStore<F>, x: Var) -> Result<[Var; 3]> {
        let f1 = lrelu(g, self.convs[0].forward(g, store, x)?);
        let f2 = lrelu(g, self.convs[1].forward(g, store, f1)?);
        let f3 = lrelu(g, self.convs[2].forward(g, store, f2)?);
        Ok([f1, f2, f3])
    }
}

pub const ENC: &str = "enc";
pub const GEN: &str = "gen";
pub const DIS: &str = "dis";
pub const DAC: &str = "dac";
pub const CONTENT: &str = "content";

/// All networks with their parameter stores.
#[derive(Clone, Debug)]
pub struct Model<F> {
    pub cfg: ModelConfig,
    pub enc: Encoder,
    pub gen: Generator,
    pub dis: Discriminator,
    pub dac: Dac,
    pub content: ContentNet,
    pub enc_store: ParamStore<F>,
    pub gen_store: ParamStore<F>,
    pub dis_store: ParamStore<F>,
    pub dac_store: ParamStore<F>,
    pub content_store: ParamStore<F>,
}

impl<F: Real> Model<F> {
    /// Initializes every network from one seeded generator.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut enc_store = ParamStore::new(ENC);
        let mut gen_store = ParamStore::new(GEN);
        let mut dis_store = ParamStore::new(DIS);
        let mut dac_store = ParamStore::new(DAC);
        let mut content_store = ParamStore::frozen(CONTENT);
        Ok(Model {
            enc: Encoder::new(&mut enc_store, &cfg, &mut rng)?,
            gen: Generator::new(&mut gen_store, &cfg, &mut rng)?,
            dis: Discriminator::new(&mut dis_store, &cfg, &mut rng)?,
            dac: Dac::new(&mut dac_store, &cfg, &mut rng)?,
            content: ContentNet::new(&mut content_store, &cfg, &mut rng)?,
            cfg,
            enc_store,
            gen_store,
            dis_store,
            dac_store,
            content_store,
        })
    }

    pub fn stores(&self) -> [&ParamStore<F>; 5] {
        [&self.enc_store, &self.gen_store, &self.dis_store, &self.dac_store, &self.content_store]
    }

    pub fn stores_mut(&mut self) -> [&mut ParamStore<F>; 5] {
        [
            &mut self.enc_store,
            &mut self.gen_store,
            &mut self.dis_store,
            &mut self.dac_store,
            &mut self.content_store,
        ]
    }

    pub fn cast<G: Real>(&self) -> Model<G> {
        Model {
            cfg: self.cfg,
            enc: self.enc,
            gen: self.gen,
            dis: self.dis,
            dac: self.dac,
            content: self.content,
            enc_store: self.enc_store.cast(),
            gen_store: self.gen_store.cast(),
            dis_store: self.dis_store.cast(),
            dac_store: self.dac_store.cast(),
            content_store: self.content_store.cast(),
        }
    }

    pub fn encode(&self, g: &Graph<F>, x: Var) -> Result<EncoderOutput> {
        self.enc.forward(g, &self.enc_store, x)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn decode(
        &self,
        g: &Graph<F>,
        x_a: Var,
        enc: &EncoderOutput,
        z: Var,
        c_a: Var,
        c_b: Var,
        soft_mode: SoftMode,
    ) -> Result<DecoderOutput> {
        self.gen.forward(g, &self.gen_store, x_a, enc, z, c_a, c_b, soft_mode)
    }

    pub fn discriminate(&self, g: &Graph<F>, x: Var, c: Var) -> Result<(Var, Var)> {
        self.dis.forward(g, &self.dis_store, x, c)
    }

    pub fn classify(&self, g: &Graph<F>, x: Var) -> Result<Var> {
        self.dis.classify(g, &self.dis_store, x)
    }

    pub fn dac_logits(&self, g: &Graph<F>, z: Var) -> Result<Var> {
        self.dac.forward(g, &self.dac_store, z)
    }

    pub fn content_features(&self, g: &Graph<F>, x: Var) -> Result<[Var; 3]> {
        self.content.features(g, &self.content_store, x)
    }

    /// Deterministic translation of `x_a` from `c_a` to `c_b` using the
    /// posterior mean as latent.
    pub fn translate(&self, g: &Graph<F>, x_a: Var, c_a: Var, c_b: Var) -> Result<DecoderOutput> {
        let enc = self.encode(g, x_a)?;
        self.decode(g, x_a, &enc, enc.mu, c_a, c_b, SoftMode::Learned)
    }
}
