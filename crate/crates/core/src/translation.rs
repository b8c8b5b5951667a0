//! Multimodal domain adaptation between the synthetic-underwater domain (S)
//! and the real-underwater domain (R).
//!
//! Each domain owns an encoder that splits an image into a spatial content
//! code and a flat style vector, a decoder that renders a content code under
//! style-conditioned adaptive instance normalization, and a multi-scale
//! patch discriminator. Training alternates a discriminator step with a
//! generator step over the combined objective (reconstruction, adversarial,
//! edge and structural terms).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array3, Array4, ArrayD, Axis, IxDyn};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use uwr_autodiff::{Adam, Conv2d, Graph, Linear, Module, PadMode, Param, Rng, Var};

use crate::checkpoint::{self, Checkpoint};
use crate::error::{Error, Result};
use crate::losses::{
    adversarial_loss_d, adversarial_loss_g, edge_loss, identity_image_loss,
    latent_recon_loss, ssim_loss_with, GanMode, LossConfig,
};
use crate::quality::QualityConfig;
use crate::seeding;

/// Which side of the adaptation an image belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Domain {
    Synthetic,
    Real,
}

impl Domain {
    pub fn other(self) -> Domain {
        match self {
            Domain::Synthetic => Domain::Real,
            Domain::Real => Domain::Synthetic,
        }
    }
}

/// Relative term weights of the combined generator objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub content: f64,
    pub style: f64,
    pub img: f64,
    pub adv: f64,
    pub ssim: f64,
    pub edge: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            content: 1.0,
            style: 1.0,
            img: 1.0,
            adv: 5.0,
            ssim: 3.0,
            edge: 50.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.content, self.style, self.img, self.adv, self.ssim, self.edge];
        if !all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            return Err(Error::Config("loss weights must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Loss-term ablations of the adaptation objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DaAblation {
    /// Reconstruction + adversarial terms only.
    Baseline,
    /// Baseline plus the edge term.
    BaselineEdge,
    /// The full objective.
    Full,
}

impl DaAblation {
    /// Report label for this configuration.
    pub fn label(self) -> &'static str {
        match self {
            DaAblation::Baseline => "Baseline",
            DaAblation::BaselineEdge => "Baseline+Edge",
            DaAblation::Full => "Ours",
        }
    }

    /// Apply the ablation to a full weight set.
    pub fn weights(self, full: LossWeights) -> LossWeights {
        match self {
            DaAblation::Baseline => LossWeights {
                ssim: 0.0,
                edge: 0.0,
                ..full
            },
            DaAblation::BaselineEdge => LossWeights { ssim: 0.0, ..full },
            DaAblation::Full => full,
        }
    }
}

/// Architecture and optimizer settings of the adaptation model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TranslationConfig {
    /// Channels after the encoder stem; content width is 4x this.
    pub base_width: usize,
    /// Residual blocks in the content encoder and in the decoder.
    pub res_blocks: usize,
    /// Dimension of the flat style vector.
    pub style_dim: usize,
    /// Hidden width of the style-to-affine MLP.
    pub mlp_width: usize,
    /// Number of discriminator image scales.
    pub disc_scales: usize,
    /// Channels of the first discriminator layer.
    pub disc_base_width: usize,
    pub gan_mode: GanMode,
    /// Draw cross-domain styles from a unit Gaussian prior during training
    /// instead of encoding them from the opposite batch.
    pub style_prior: bool,
    /// Epsilon inside every instance normalization.
    pub norm_epsilon: f64,
    pub weights: LossWeights,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub steps: u64,
    pub batch_size: usize,
}

impl Default for TranslationConfig {
    fn default() -> Self {
        TranslationConfig {
            base_width: 64,
            res_blocks: 4,
            style_dim: 8,
            mlp_width: 256,
            disc_scales: 3,
            disc_base_width: 64,
            gan_mode: GanMode::Vanilla,
            style_prior: false,
            norm_epsilon: 1e-9,
            weights: LossWeights::default(),
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            steps: 100_000,
            batch_size: 4,
        }
    }
}

impl TranslationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_width < 2 || self.disc_base_width < 2 {
            return Err(Error::Config("translation widths must be >= 2".into()));
        }
        if self.res_blocks == 0 || self.style_dim == 0 || self.mlp_width == 0 {
            return Err(Error::Config(
                "res_blocks, style_dim and mlp_width must be positive".into(),
            ));
        }
        if self.disc_scales == 0 {
            return Err(Error::Config("disc_scales must be >= 1".into()));
        }
        if !(self.norm_epsilon > 0.0) {
            return Err(Error::Config("norm_epsilon must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        self.weights.validate()
    }

    /// Spatial reduction between an image and its content code.
    pub const DOWNSAMPLE: usize = 4;

    /// Smallest input edge the architecture supports (driven by the style
    /// encoder's four downsampling stages and the deepest discriminator
    /// scale).
    pub fn min_edge(&self) -> usize {
        16.max(8 << (self.disc_scales - 1))
    }
}

/// A content code with the style vector extracted from the same image.
#[derive(Clone, Debug)]
pub struct LatentPair {
    /// `[channels, h/4, w/4]` spatial code.
    pub content: Array3<f64>,
    pub style: Array1<f64>,
}

/// Observed statistics after one adaptive instance normalization, paired
/// with the affine parameters the style MLP emitted for it.
#[derive(Clone, Debug)]
pub struct AdainProbe {
    pub gamma: Array2<f64>,
    pub beta: Array2<f64>,
    pub observed_mean: Array2<f64>,
    pub observed_std: Array2<f64>,
}

struct ResBlock {
    c1: Conv2d,
    c2: Conv2d,
}

impl ResBlock {
    fn new(rng: &mut Rng, name: &str, width: usize) -> Self {
        ResBlock {
            c1: Conv2d::new(rng, &format!("{name}.c1"), width, width, 3, 1, 1, PadMode::Reflect),
            c2: Conv2d::new(rng, &format!("{name}.c2"), width, width, 3, 1, 1, PadMode::Reflect),
        }
    }

    fn forward(&self, x: &Var, eps: f64, track: bool) -> Var {
        let h = self.c1.forward(x, track).instance_norm(eps).relu();
        let h = self.c2.forward(&h, track).instance_norm(eps);
        x.add(&h)
    }
}

impl Module for ResBlock {
    fn params(&self) -> Vec<Param> {
        [self.c1.params(), self.c2.params()].concat()
    }
}

struct ContentEncoder {
    stem: Conv2d,
    down: Vec<Conv2d>,
    res: Vec<ResBlock>,
    eps: f64,
}

impl ContentEncoder {
    fn new(rng: &mut Rng, name: &str, cfg: &TranslationConfig) -> Self {
        let b = cfg.base_width;
        let stem = Conv2d::new(rng, &format!("{name}.stem"), 3, b, 7, 1, 3, PadMode::Reflect);
        let down = vec![
            Conv2d::new(rng, &format!("{name}.down0"), b, 2 * b, 4, 2, 1, PadMode::Reflect),
            Conv2d::new(rng, &format!("{name}.down1"), 2 * b, 4 * b, 4, 2, 1, PadMode::Reflect),
        ];
        let res = (0..cfg.res_blocks)
            .map(|i| ResBlock::new(rng, &format!("{name}.res{i}"), 4 * b))
            .collect();
        ContentEncoder {
            stem,
            down,
            res,
            eps: cfg.norm_epsilon,
        }
    }

    fn forward(&self, x: &Var, track: bool) -> Var {
        let mut h = self.stem.forward(x, track).instance_norm(self.eps).relu();
        for d in &self.down {
            h = d.forward(&h, track).instance_norm(self.eps).relu();
        }
        for r in &self.res {
            h = r.forward(&h, self.eps, track);
        }
        h
    }
}

impl Module for ContentEncoder {
    fn params(&self) -> Vec<Param> {
        let mut ps = self.stem.params();
        for d in &self.down {
            ps.extend(d.params());
        }
        for r in &self.res {
            ps.extend(r.params());
        }
        ps
    }
}

struct StyleEncoder {
    stem: Conv2d,
    down: Vec<Conv2d>,
    head: Linear,
}

impl StyleEncoder {
    fn new(rng: &mut Rng, name: &str, cfg: &TranslationConfig) -> Self {
        let b = cfg.base_width;
        // No normalization anywhere: the style code must keep the image's
        // global statistics, which instance norm would erase.
        let stem = Conv2d::new(rng, &format!("{name}.stem"), 3, b, 7, 1, 3, PadMode::Reflect);
        let widths = [(b, 2 * b), (2 * b, 4 * b), (4 * b, 4 * b), (4 * b, 4 * b)];
        let down = widths
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout))| {
                Conv2d::new(rng, &format!("{name}.down{i}"), cin, cout, 4, 2, 1, PadMode::Reflect)
            })
            .collect();
        let head = Linear::new(rng, &format!("{name}.head"), 4 * b, cfg.style_dim);
        StyleEncoder { stem, down, head }
    }

    fn forward(&self, x: &Var, track: bool) -> Var {
        let mut h = self.stem.forward(x, track).relu();
        for d in &self.down {
            h = d.forward(&h, track).relu();
        }
        self.head.forward(&h.global_avg_pool(), track)
    }
}

impl Module for StyleEncoder {
    fn params(&self) -> Vec<Param> {
        let mut ps = self.stem.params();
        for d in &self.down {
            ps.extend(d.params());
        }
        ps.extend(self.head.params());
        ps
    }
}

struct Encoder {
    content: ContentEncoder,
    style: StyleEncoder,
}

impl Encoder {
    fn new(rng: &mut Rng, name: &str, cfg: &TranslationConfig) -> Self {
        Encoder {
            content: ContentEncoder::new(rng, &format!("{name}.content"), cfg),
            style: StyleEncoder::new(rng, &format!("{name}.style"), cfg),
        }
    }
}

impl Module for Encoder {
    fn params(&self) -> Vec<Param> {
        [self.content.params(), self.style.params()].concat()
    }
}

struct AdainResBlock {
    c1: Conv2d,
    c2: Conv2d,
}

impl AdainResBlock {
    fn new(rng: &mut Rng, name: &str, width: usize) -> Self {
        AdainResBlock {
            c1: Conv2d::new(rng, &format!("{name}.c1"), width, width, 3, 1, 1, PadMode::Reflect),
            c2: Conv2d::new(rng, &format!("{name}.c2"), width, width, 3, 1, 1, PadMode::Reflect),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn forward(
        &self,
        x: &Var,
        affines: &[(Var, Var)],
        eps: f64,
        track: bool,
        probes: &mut Option<&mut Vec<AdainProbe>>,
    ) -> Var {
        let adain = |conv: &Conv2d, input: &Var, gamma: &Var, beta: &Var, probes: &mut Option<&mut Vec<AdainProbe>>| {
            let y = conv
                .forward(input, track)
                .instance_norm(eps)
                .scale_shift_nc(gamma, beta);
            if let Some(sink) = probes.as_deref_mut() {
                sink.push(probe_stats(&y, gamma, beta));
            }
            y
        };
        let h = adain(&self.c1, x, &affines[0].0, &affines[0].1, probes).relu();
        let h = adain(&self.c2, &h, &affines[1].0, &affines[1].1, probes);
        x.add(&h)
    }
}

impl Module for AdainResBlock {
    fn params(&self) -> Vec<Param> {
        [self.c1.params(), self.c2.params()].concat()
    }
}

/// Per-channel mean/std of a `[n, c, h, w]` value next to the affine
/// parameters that produced it.
fn probe_stats(y: &Var, gamma: &Var, beta: &Var) -> AdainProbe {
    let value = y.to_array();
    let (n, c, h, w) = (
        value.shape()[0],
        value.shape()[1],
        value.shape()[2],
        value.shape()[3],
    );
    let m = (h * w) as f64;
    let mut mean = Array2::zeros((n, c));
    let mut std = Array2::zeros((n, c));
    for i in 0..n {
        for ch in 0..c {
            let mut acc = 0.0;
            for hh in 0..h {
                for ww in 0..w {
                    acc += value[[i, ch, hh, ww]];
                }
            }
            let mu = acc / m;
            let mut var = 0.0;
            for hh in 0..h {
                for ww in 0..w {
                    let d = value[[i, ch, hh, ww]] - mu;
                    var += d * d;
                }
            }
            mean[(i, ch)] = mu;
            std[(i, ch)] = (var / m).sqrt();
        }
    }
    let to2 = |v: &Var| -> Array2<f64> {
        let a = v.to_array();
        Array2::from_shape_fn((n, c), |(i, j)| a[[i, j]])
    };
    AdainProbe {
        gamma: to2(gamma),
        beta: to2(beta),
        observed_mean: mean,
        observed_std: std,
    }
}

struct Decoder {
    mlp: Vec<Linear>,
    res: Vec<AdainResBlock>,
    up: Vec<Conv2d>,
    out: Conv2d,
    width: usize,
    eps: f64,
}

impl Decoder {
    fn new(rng: &mut Rng, name: &str, cfg: &TranslationConfig) -> Self {
        let b = cfg.base_width;
        let width = 4 * b;
        let n_affine = cfg.res_blocks * 2 * 2 * width;
        let mlp = vec![
            Linear::new(rng, &format!("{name}.mlp0"), cfg.style_dim, cfg.mlp_width),
            Linear::new(rng, &format!("{name}.mlp1"), cfg.mlp_width, cfg.mlp_width),
            Linear::new(rng, &format!("{name}.mlp2"), cfg.mlp_width, n_affine),
        ];
        let res = (0..cfg.res_blocks)
            .map(|i| AdainResBlock::new(rng, &format!("{name}.res{i}"), width))
            .collect();
        let up = vec![
            Conv2d::new(rng, &format!("{name}.up0"), 4 * b, 2 * b, 5, 1, 2, PadMode::Reflect),
            Conv2d::new(rng, &format!("{name}.up1"), 2 * b, b, 5, 1, 2, PadMode::Reflect),
        ];
        let out = Conv2d::new(rng, &format!("{name}.out"), b, 3, 7, 1, 3, PadMode::Reflect);
        Decoder {
            mlp,
            res,
            up,
            out,
            width,
            eps: cfg.norm_epsilon,
        }
    }

    fn forward(
        &self,
        content: &Var,
        style: &Var,
        track: bool,
        mut probes: Option<&mut Vec<AdainProbe>>,
    ) -> Var {
        let p = self.mlp[0].forward(style, track).relu();
        let p = self.mlp[1].forward(&p, track).relu();
        let p = self.mlp[2].forward(&p, track);
        let c = self.width;
        let mut offset = 0;
        let mut slice = |shift: f64| -> Var {
            let v = p.narrow(1, offset, c).add_scalar(shift);
            offset += c;
            v
        };
        let mut h = content.clone();
        for block in &self.res {
            // Scales are identity-centered so an untrained MLP starts near a
            // plain instance norm instead of zeroing the features.
            let affines = [(slice(1.0), slice(0.0)), (slice(1.0), slice(0.0))];
            h = block.forward(&h, &affines, self.eps, track, &mut probes);
        }
        for upconv in &self.up {
            h = upconv.forward(&h.upsample_bilinear2x(), track).relu();
        }
        self.out.forward(&h, track).sigmoid()
    }
}

impl Module for Decoder {
    fn params(&self) -> Vec<Param> {
        let mut ps: Vec<Param> = self.mlp.iter().flat_map(|l| l.params()).collect();
        for r in &self.res {
            ps.extend(r.params());
        }
        for u in &self.up {
            ps.extend(u.params());
        }
        ps.extend(self.out.params());
        ps
    }
}

struct DiscScale {
    convs: Vec<Conv2d>,
    head: Conv2d,
}

impl DiscScale {
    fn new(rng: &mut Rng, name: &str, base: usize) -> Self {
        let widths = [(3, base), (base, 2 * base), (2 * base, 4 * base)];
        let convs = widths
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout))| {
                Conv2d::new(rng, &format!("{name}.c{i}"), cin, cout, 4, 2, 1, PadMode::Zero)
            })
            .collect();
        let head = Conv2d::new(rng, &format!("{name}.head"), 4 * base, 1, 1, 1, 0, PadMode::Zero);
        DiscScale { convs, head }
    }

    fn forward(&self, x: &Var, track: bool) -> Var {
        let mut h = x.clone();
        for c in &self.convs {
            h = c.forward(&h, track).leaky_relu(0.2);
        }
        self.head.forward(&h, track)
    }
}

impl Module for DiscScale {
    fn params(&self) -> Vec<Param> {
        let mut ps: Vec<Param> = self.convs.iter().flat_map(|c| c.params()).collect();
        ps.extend(self.head.params());
        ps
    }
}

struct Discriminator {
    scales: Vec<DiscScale>,
}

impl Discriminator {
    fn new(rng: &mut Rng, name: &str, cfg: &TranslationConfig) -> Self {
        let scales = (0..cfg.disc_scales)
            .map(|i| DiscScale::new(rng, &format!("{name}.s{i}"), cfg.disc_base_width))
            .collect();
        Discriminator { scales }
    }

    /// Raw patch logits at every scale of an average-pooled pyramid.
    fn forward(&self, x: &Var, track: bool) -> Vec<Var> {
        let mut out = Vec::with_capacity(self.scales.len());
        let mut level = x.clone();
        for (i, scale) in self.scales.iter().enumerate() {
            if i > 0 {
                level = level.avg_pool2d(3, 2, 1);
            }
            out.push(scale.forward(&level, track));
        }
        out
    }
}

impl Module for Discriminator {
    fn params(&self) -> Vec<Param> {
        self.scales.iter().flat_map(|s| s.params()).collect()
    }
}

/// The full adaptation model: both domains' encoders, decoders and
/// discriminators plus the objective weights.
pub struct TranslationBundle {
    pub cfg: TranslationConfig,
    enc_s: Encoder,
    enc_r: Encoder,
    dec_s: Decoder,
    dec_r: Decoder,
    disc_s: Discriminator,
    disc_r: Discriminator,
}

/// Name→scalar map of the twelve objective terms. Suffix convention: for
/// content/style terms the tag names the domain the code originated from;
/// for img/adv/edge/ssim terms it names the domain the image was produced
/// in.
pub type TermBreakdown = BTreeMap<String, f64>;

/// Evaluated objective with its per-term decomposition.
#[derive(Clone, Debug)]
pub struct ObjectiveResult {
    pub generator_loss: f64,
    pub discriminator_loss: f64,
    pub breakdown: TermBreakdown,
}

impl TranslationBundle {
    /// Fresh random weights derived entirely from `seed`.
    pub fn new(cfg: TranslationConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::seed_from_u64(seed);
        Ok(TranslationBundle {
            enc_s: Encoder::new(&mut rng, "enc_s", &cfg),
            enc_r: Encoder::new(&mut rng, "enc_r", &cfg),
            dec_s: Decoder::new(&mut rng, "dec_s", &cfg),
            dec_r: Decoder::new(&mut rng, "dec_r", &cfg),
            disc_s: Discriminator::new(&mut rng, "disc_s", &cfg),
            disc_r: Discriminator::new(&mut rng, "disc_r", &cfg),
            cfg,
        })
    }

    /// A view of the same parameters with the two domains' roles exchanged.
    pub fn swapped(&self) -> TranslationBundle {
        TranslationBundle {
            cfg: self.cfg.clone(),
            enc_s: clone_encoder(&self.enc_r),
            enc_r: clone_encoder(&self.enc_s),
            dec_s: clone_decoder(&self.dec_r),
            dec_r: clone_decoder(&self.dec_s),
            disc_s: clone_discriminator(&self.disc_r),
            disc_r: clone_discriminator(&self.disc_s),
        }
    }

    fn encoder(&self, domain: Domain) -> &Encoder {
        match domain {
            Domain::Synthetic => &self.enc_s,
            Domain::Real => &self.enc_r,
        }
    }

    fn decoder(&self, domain: Domain) -> &Decoder {
        match domain {
            Domain::Synthetic => &self.dec_s,
            Domain::Real => &self.dec_r,
        }
    }

    fn discriminator(&self, domain: Domain) -> &Discriminator {
        match domain {
            Domain::Synthetic => &self.disc_s,
            Domain::Real => &self.disc_r,
        }
    }

    /// Encoder + decoder parameters (the generator side).
    pub fn generator_params(&self) -> Vec<Param> {
        [
            self.enc_s.params(),
            self.enc_r.params(),
            self.dec_s.params(),
            self.dec_r.params(),
        ]
        .concat()
    }

    /// Both discriminators' parameters.
    pub fn discriminator_params(&self) -> Vec<Param> {
        [self.disc_s.params(), self.disc_r.params()].concat()
    }

    /// Every trainable parameter, generator side first.
    pub fn all_params(&self) -> Vec<Param> {
        [self.generator_params(), self.discriminator_params()].concat()
    }

    fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let d = TranslationConfig::DOWNSAMPLE;
        if h % d != 0 || w % d != 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} is not divisible by the downsample factor {d}"
            )));
        }
        let min = self.cfg.min_edge();
        if h < min || w < min {
            return Err(Error::Shape(format!(
                "input {h}x{w} is below the architecture's minimum edge {min}"
            )));
        }
        Ok(())
    }

    fn batch_var(&self, g: &Graph, batch: &Array4<f64>) -> Result<Var> {
        let (_, c, h, w) = batch.dim();
        if c != 3 {
            return Err(Error::Shape(format!("expected RGB batches, got {c} channels")));
        }
        self.check_input(h, w)?;
        Ok(g.constant(batch.clone().into_dyn()))
    }

    fn image_var(&self, g: &Graph, image: &Array3<f64>) -> Result<Var> {
        let (c, h, w) = image.dim();
        if c != 3 {
            return Err(Error::Shape(format!("expected an RGB image, got {c} channels")));
        }
        self.check_input(h, w)?;
        let arr: ArrayD<f64> = image.clone().into_shape(vec![1, c, h, w]).unwrap().into_dyn();
        Ok(g.constant(arr))
    }

    fn encode_vars(&self, x: &Var, domain: Domain, track: bool) -> (Var, Var) {
        let enc = self.encoder(domain);
        (enc.content.forward(x, track), enc.style.forward(x, track))
    }

    /// Split an image into its content code and style vector.
    pub fn encode(&self, image: &Array3<f64>, domain: Domain) -> Result<LatentPair> {
        let g = Graph::new();
        let x = self.image_var(&g, image)?;
        let (content, style) = self.encode_vars(&x, domain, false);
        let c = content.to_array();
        let s = style.to_array();
        let dims = (c.shape()[1], c.shape()[2], c.shape()[3]);
        Ok(LatentPair {
            content: Array3::from_shape_fn(dims, |(a, b, cc)| c[[0, a, b, cc]]),
            style: Array1::from_iter(s.iter().copied()),
        })
    }

    fn latent_vars(&self, g: &Graph, latent: &LatentPair) -> Result<(Var, Var)> {
        let (c, h, w) = latent.content.dim();
        if c != 4 * self.cfg.base_width {
            return Err(Error::Shape(format!(
                "content code has {c} channels, decoder expects {}",
                4 * self.cfg.base_width
            )));
        }
        if latent.style.len() != self.cfg.style_dim {
            return Err(Error::Shape(format!(
                "style vector has {} elements, decoder expects {}",
                latent.style.len(),
                self.cfg.style_dim
            )));
        }
        let content: ArrayD<f64> = latent
            .content
            .clone()
            .into_shape(vec![1, c, h, w])
            .unwrap()
            .into_dyn();
        let style =
            ArrayD::from_shape_vec(IxDyn(&[1, self.cfg.style_dim]), latent.style.to_vec()).unwrap();
        Ok((g.constant(content), g.constant(style)))
    }

    /// Render a latent pair back to an image in `[0, 1]`.
    pub fn decode(&self, latent: &LatentPair, domain: Domain) -> Result<Array3<f64>> {
        let g = Graph::new();
        let (content, style) = self.latent_vars(&g, latent)?;
        let out = self.decoder(domain).forward(&content, &style, false, None);
        Ok(to_image(&out))
    }

    /// Decode while recording the realized statistics of every adaptive
    /// instance normalization next to its emitted affine parameters.
    pub fn decode_instrumented(
        &self,
        latent: &LatentPair,
        domain: Domain,
    ) -> Result<(Array3<f64>, Vec<AdainProbe>)> {
        let g = Graph::new();
        let (content, style) = self.latent_vars(&g, latent)?;
        let mut probes = Vec::new();
        let out = self
            .decoder(domain)
            .forward(&content, &style, false, Some(&mut probes));
        Ok((to_image(&out), probes))
    }

    /// Re-render `image`'s content in the opposite domain, taking appearance
    /// from `style_source` (an image of that target domain).
    pub fn translate(
        &self,
        image: &Array3<f64>,
        from: Domain,
        style_source: &Array3<f64>,
    ) -> Result<Array3<f64>> {
        let style = self.encode(style_source, from.other())?.style;
        self.translate_with_style(image, from, &style)
    }

    /// Cross-domain render with an explicit style vector.
    pub fn translate_with_style(
        &self,
        image: &Array3<f64>,
        from: Domain,
        style: &Array1<f64>,
    ) -> Result<Array3<f64>> {
        if style.len() != self.cfg.style_dim {
            return Err(Error::Shape(format!(
                "style vector has {} elements, expected {}",
                style.len(),
                self.cfg.style_dim
            )));
        }
        let g = Graph::new();
        let x = self.image_var(&g, image)?;
        let (content, _) = self.encode_vars(&x, from, false);
        let style_var =
            g.constant(ArrayD::from_shape_vec(IxDyn(&[1, self.cfg.style_dim]), style.to_vec()).unwrap());
        let out = self
            .decoder(from.other())
            .forward(&content, &style_var, false, None);
        Ok(to_image(&out))
    }

    /// Mean generator-side adversarial loss over all discriminator scales.
    fn adv_g(&self, fake: &Var, domain: Domain, track_d: bool) -> Result<Var> {
        let logits = self.discriminator(domain).forward(fake, track_d);
        let mut total: Option<Var> = None;
        for logit in &logits {
            let term = match self.cfg.gan_mode {
                GanMode::Vanilla => adversarial_loss_g(&logit.sigmoid(), GanMode::Vanilla)?,
                GanMode::Lsgan => adversarial_loss_g(logit, GanMode::Lsgan)?,
            };
            total = Some(match total {
                Some(t) => t.add(&term),
                None => term,
            });
        }
        Ok(total.unwrap().mul_scalar(1.0 / logits.len() as f64))
    }

    /// Mean discriminator loss over all scales for one domain.
    fn adv_d(&self, real: &Var, fake: &Var, domain: Domain, track_d: bool) -> Result<Var> {
        let real_logits = self.discriminator(domain).forward(real, track_d);
        let fake_logits = self.discriminator(domain).forward(fake, track_d);
        let mut total: Option<Var> = None;
        for (r, f) in real_logits.iter().zip(fake_logits.iter()) {
            let term = match self.cfg.gan_mode {
                GanMode::Vanilla => {
                    adversarial_loss_d(&r.sigmoid(), &f.sigmoid(), GanMode::Vanilla)?
                }
                GanMode::Lsgan => adversarial_loss_d(r, f, GanMode::Lsgan)?,
            };
            total = Some(match total {
                Some(t) => t.add(&term),
                None => term,
            });
        }
        Ok(total.unwrap().mul_scalar(1.0 / real_logits.len() as f64))
    }
}

fn clone_encoder(e: &Encoder) -> Encoder {
    Encoder {
        content: ContentEncoder {
            stem: clone_conv(&e.content.stem),
            down: e.content.down.iter().map(clone_conv).collect(),
            res: e
                .content
                .res
                .iter()
                .map(|r| ResBlock {
                    c1: clone_conv(&r.c1),
                    c2: clone_conv(&r.c2),
                })
                .collect(),
            eps: e.content.eps,
        },
        style: StyleEncoder {
            stem: clone_conv(&e.style.stem),
            down: e.style.down.iter().map(clone_conv).collect(),
            head: clone_linear(&e.style.head),
        },
    }
}

fn clone_decoder(d: &Decoder) -> Decoder {
    Decoder {
        mlp: d.mlp.iter().map(clone_linear).collect(),
        res: d
            .res
            .iter()
            .map(|r| AdainResBlock {
                c1: clone_conv(&r.c1),
                c2: clone_conv(&r.c2),
            })
            .collect(),
        up: d.up.iter().map(clone_conv).collect(),
        out: clone_conv(&d.out),
        width: d.width,
        eps: d.eps,
    }
}

fn clone_discriminator(d: &Discriminator) -> Discriminator {
    Discriminator {
        scales: d
            .scales
            .iter()
            .map(|s| DiscScale {
                convs: s.convs.iter().map(clone_conv).collect(),
                head: clone_conv(&s.head),
            })
            .collect(),
    }
}

fn clone_conv(c: &Conv2d) -> Conv2d {
    Conv2d {
        weight: c.weight.clone(),
        bias: c.bias.clone(),
        stride: c.stride,
        pad: c.pad,
        mode: c.mode,
    }
}

fn clone_linear(l: &Linear) -> Linear {
    Linear {
        weight: l.weight.clone(),
        bias: l.bias.clone(),
    }
}

fn to_image(out: &Var) -> Array3<f64> {
    let a = out.to_array();
    let (c, h, w) = (a.shape()[1], a.shape()[2], a.shape()[3]);
    Array3::from_shape_fn((c, h, w), |(i, j, k)| a[[0, i, j, k]])
}

/// The twelve generator terms as graph variables plus their weighted sum.
struct GeneratorTerms {
    terms: Vec<(&'static str, Var)>,
    weighted: Var,
}

fn generator_terms(
    bundle: &TranslationBundle,
    xs: &Var,
    xr: &Var,
    loss_cfg: &LossConfig,
    quality_cfg: &QualityConfig,
    prior_styles: Option<(&Array2<f64>, &Array2<f64>)>,
    track_g: bool,
) -> Result<GeneratorTerms> {
    let g = xs.graph().clone();
    let (c_s, s_s) = bundle.encode_vars(xs, Domain::Synthetic, track_g);
    let (c_r, s_r) = bundle.encode_vars(xr, Domain::Real, track_g);

    // Within-domain reconstructions.
    let rec_s = bundle.dec_s.forward(&c_s, &s_s, track_g, None);
    let rec_r = bundle.dec_r.forward(&c_r, &s_r, track_g, None);
    let img_s = identity_image_loss(&rec_s, xs)?;
    let img_r = identity_image_loss(&rec_r, xr)?;

    // Cross-domain styles: encoded from the opposite batch by default, or
    // drawn from a unit Gaussian prior when configured.
    let (style_for_r, style_for_s) = match prior_styles {
        Some((to_r, to_s)) => (
            g.constant(to_r.clone().into_dyn()),
            g.constant(to_s.clone().into_dyn()),
        ),
        None => (s_r.clone(), s_s.clone()),
    };

    // Translations: content from one domain rendered in the other.
    let x_sr = bundle.dec_r.forward(&c_s, &style_for_r, track_g, None);
    let x_rs = bundle.dec_s.forward(&c_r, &style_for_s, track_g, None);

    // Re-encode to close the latent reconstruction cycle.
    let (c_s_rt, s_r_rt) = bundle.encode_vars(&x_sr, Domain::Real, track_g);
    let (c_r_rt, s_s_rt) = bundle.encode_vars(&x_rs, Domain::Synthetic, track_g);
    let content_s = latent_recon_loss(&c_s_rt, &c_s)?;
    let content_r = latent_recon_loss(&c_r_rt, &c_r)?;
    let style_r = latent_recon_loss(&s_r_rt, &style_for_r)?;
    let style_s = latent_recon_loss(&s_s_rt, &style_for_s)?;

    // Adversarial terms on the translated outputs (discriminators frozen).
    let adv_r = bundle.adv_g(&x_sr, Domain::Real, false)?;
    let adv_s = bundle.adv_g(&x_rs, Domain::Synthetic, false)?;

    // Structure preservation: each translated image against its content
    // source.
    let edge_r = edge_loss(&x_sr, xs, loss_cfg)?;
    let edge_s = edge_loss(&x_rs, xr, loss_cfg)?;
    let ssim_r = ssim_loss_with(&x_sr, xs, quality_cfg)?;
    let ssim_s = ssim_loss_with(&x_rs, xr, quality_cfg)?;

    let w = &bundle.cfg.weights;
    let weighted = content_s
        .add(&content_r)
        .mul_scalar(w.content)
        .add(&style_s.add(&style_r).mul_scalar(w.style))
        .add(&img_s.add(&img_r).mul_scalar(w.img))
        .add(&adv_s.add(&adv_r).mul_scalar(w.adv))
        .add(&ssim_s.add(&ssim_r).mul_scalar(w.ssim))
        .add(&edge_s.add(&edge_r).mul_scalar(w.edge));

    Ok(GeneratorTerms {
        terms: vec![
            ("content_S", content_s),
            ("content_R", content_r),
            ("style_S", style_s),
            ("style_R", style_r),
            ("img_S", img_s),
            ("img_R", img_r),
            ("adv_S", adv_s),
            ("adv_R", adv_r),
            ("edge_S", edge_s),
            ("edge_R", edge_r),
            ("ssim_S", ssim_s),
            ("ssim_R", ssim_r),
        ],
        weighted,
    })
}

/// Discriminator loss over both domains; translated images are detached so
/// only discriminator parameters receive gradients.
fn discriminator_objective(
    bundle: &TranslationBundle,
    xs: &Var,
    xr: &Var,
    prior_styles: Option<(&Array2<f64>, &Array2<f64>)>,
    track_d: bool,
) -> Result<Var> {
    let g = xs.graph().clone();
    let (c_s, s_s) = bundle.encode_vars(xs, Domain::Synthetic, false);
    let (c_r, s_r) = bundle.encode_vars(xr, Domain::Real, false);
    let (style_for_r, style_for_s) = match prior_styles {
        Some((to_r, to_s)) => (
            g.constant(to_r.clone().into_dyn()),
            g.constant(to_s.clone().into_dyn()),
        ),
        None => (s_r, s_s),
    };
    let x_sr = bundle.dec_r.forward(&c_s, &style_for_r, false, None).detach();
    let x_rs = bundle.dec_s.forward(&c_r, &style_for_s, false, None).detach();
    let d_r = bundle.adv_d(xr, &x_sr, Domain::Real, track_d)?;
    let d_s = bundle.adv_d(xs, &x_rs, Domain::Synthetic, track_d)?;
    Ok(d_r.add(&d_s))
}

fn check_finite(name: &str, value: f64, step: u64) -> Result<f64> {
    if !value.is_finite() {
        return Err(Error::NonFinite {
            term: name.to_string(),
            step,
        });
    }
    Ok(value)
}

/// Evaluate the full objective without updating anything.
pub fn total_objective(
    bundle: &TranslationBundle,
    batch_s: &Array4<f64>,
    batch_r: &Array4<f64>,
    loss_cfg: &LossConfig,
    quality_cfg: &QualityConfig,
) -> Result<ObjectiveResult> {
    if batch_s.dim().0 == 0 || batch_r.dim().0 == 0 {
        return Err(Error::Domain("objective batches must be non-empty".into()));
    }
    let g = Graph::new();
    let xs = bundle.batch_var(&g, batch_s)?;
    let xr = bundle.batch_var(&g, batch_r)?;
    let gen = generator_terms(bundle, &xs, &xr, loss_cfg, quality_cfg, None, false)?;
    let mut breakdown = TermBreakdown::new();
    for (name, var) in &gen.terms {
        breakdown.insert((*name).to_string(), check_finite(name, var.scalar(), 0)?);
    }
    let g2 = Graph::new();
    let xs2 = bundle.batch_var(&g2, batch_s)?;
    let xr2 = bundle.batch_var(&g2, batch_r)?;
    let d = discriminator_objective(bundle, &xs2, &xr2, None, false)?;
    Ok(ObjectiveResult {
        generator_loss: check_finite("generator_loss", gen.weighted.scalar(), 0)?,
        discriminator_loss: check_finite("discriminator_loss", d.scalar(), 0)?,
        breakdown,
    })
}

/// Optimizer pair for alternating updates.
pub struct TrainState {
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub step: u64,
}

impl TrainState {
    pub fn new(bundle: &TranslationBundle) -> TrainState {
        let cfg = &bundle.cfg;
        TrainState {
            opt_g: Adam::new(bundle.generator_params(), cfg.lr, cfg.beta1, cfg.beta2),
            opt_d: Adam::new(bundle.discriminator_params(), cfg.lr, cfg.beta1, cfg.beta2),
            step: 0,
        }
    }
}

fn prior_styles_for_step(
    bundle: &TranslationBundle,
    seed: u64,
    step: u64,
    n_s: usize,
    n_r: usize,
) -> Option<(Array2<f64>, Array2<f64>)> {
    if !bundle.cfg.style_prior {
        return None;
    }
    let mut rng = seeding::stream_rng(seed, seeding::STREAM_STYLE_PRIOR, step);
    let dim = bundle.cfg.style_dim;
    let mut draw = |n: usize| {
        Array2::from_shape_fn((n, dim), |_| {
            rand::Rng::sample::<f64, _>(&mut rng, rand_distr::StandardNormal)
        })
    };
    Some((draw(n_s), draw(n_r)))
}

/// One alternating update: discriminators first, then the generator side.
/// Every term is checked for finiteness and reported in the breakdown.
pub fn train_step(
    bundle: &TranslationBundle,
    state: &mut TrainState,
    batch_s: &Array4<f64>,
    batch_r: &Array4<f64>,
    loss_cfg: &LossConfig,
    quality_cfg: &QualityConfig,
    seed: u64,
) -> Result<ObjectiveResult> {
    let step = state.step;
    let prior = prior_styles_for_step(bundle, seed, step, batch_s.dim().0, batch_r.dim().0);
    let prior_refs = prior.as_ref().map(|(a, b)| (a, b));

    // Discriminator update on detached translations.
    let g = Graph::new();
    let xs = bundle.batch_var(&g, batch_s)?;
    let xr = bundle.batch_var(&g, batch_r)?;
    let d_loss_var = discriminator_objective(bundle, &xs, &xr, prior_refs, true)?;
    let d_loss = check_finite("discriminator_loss", d_loss_var.scalar(), step)?;
    state.opt_d.zero_grads();
    g.backward(&d_loss_var);
    state.opt_d.step();

    // Generator update through frozen discriminators.
    let g = Graph::new();
    let xs = bundle.batch_var(&g, batch_s)?;
    let xr = bundle.batch_var(&g, batch_r)?;
    let gen = generator_terms(bundle, &xs, &xr, loss_cfg, quality_cfg, prior_refs, true)?;
    let mut breakdown = TermBreakdown::new();
    for (name, var) in &gen.terms {
        breakdown.insert((*name).to_string(), check_finite(name, var.scalar(), step)?);
    }
    let g_loss = check_finite("generator_loss", gen.weighted.scalar(), step)?;
    state.opt_g.zero_grads();
    g.backward(&gen.weighted);
    state.opt_g.step();

    state.step += 1;
    Ok(ObjectiveResult {
        generator_loss: g_loss,
        discriminator_loss: d_loss,
        breakdown,
    })
}

/// Column order of the twelve terms in the training log.
pub const TERM_COLUMNS: [&str; 12] = [
    "content_S",
    "content_R",
    "style_S",
    "style_R",
    "img_S",
    "img_R",
    "adv_S",
    "adv_R",
    "edge_S",
    "edge_R",
    "ssim_S",
    "ssim_R",
];

/// One row of the training log.
#[derive(Clone, Debug)]
pub struct TrainLogRow {
    pub step: u64,
    pub result: ObjectiveResult,
}

/// Settings for a full adaptation training run.
#[derive(Clone, Debug)]
pub struct DaTrainOptions {
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub quality: QualityConfig,
    /// Append-only CSV: step, the twelve terms, generator and discriminator
    /// losses.
    pub log_path: Option<PathBuf>,
    /// Archive written every `checkpoint_every` steps and at the end.
    pub checkpoint_path: Option<PathBuf>,
    pub checkpoint_every: u64,
    /// Config snapshot embedded in checkpoints.
    pub config_snapshot: String,
    /// Resume weights and optimizer state from an existing archive.
    pub resume: Option<PathBuf>,
}

impl Default for DaTrainOptions {
    fn default() -> Self {
        DaTrainOptions {
            steps: 100_000,
            batch_size: 4,
            seed: 0,
            loss: LossConfig::default(),
            quality: QualityConfig::default(),
            log_path: None,
            checkpoint_path: None,
            checkpoint_every: 1000,
            config_snapshot: String::new(),
            resume: None,
        }
    }
}

fn sample_batch(images: &[Array3<f64>], rng: &mut Rng, n: usize) -> Array4<f64> {
    let (c, h, w) = images[0].dim();
    let mut out = Array4::zeros((n, c, h, w));
    for i in 0..n {
        let pick = rand::Rng::gen_range(rng, 0..images.len());
        out.index_axis_mut(Axis(0), i).assign(&images[pick]);
    }
    out
}

fn write_log_header(path: &Path) -> Result<()> {
    let mut header = String::from("step");
    for t in TERM_COLUMNS {
        header.push(',');
        header.push_str(t);
    }
    header.push_str(",generator_loss,discriminator_loss\n");
    std::fs::write(path, header).map_err(Error::io(path))
}

fn append_log_row(path: &Path, row: &TrainLogRow) -> Result<()> {
    use std::io::Write;
    let mut line = format!("{}", row.step);
    for t in TERM_COLUMNS {
        line.push_str(&format!(",{}", row.result.breakdown[t]));
    }
    line.push_str(&format!(
        ",{},{}\n",
        row.result.generator_loss, row.result.discriminator_loss
    ));
    let mut f = std::fs::OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(Error::io(path))?;
    f.write_all(line.as_bytes()).map_err(Error::io(path))
}

/// Save bundle weights plus both optimizers' moments (parameter names are
/// disjoint, so the slot maps merge safely).
pub fn save_da_checkpoint(
    path: &Path,
    bundle: &TranslationBundle,
    state: &TrainState,
    config_snapshot: &str,
) -> Result<()> {
    let mut ckpt = Checkpoint::from_params(state.step, config_snapshot, &bundle.all_params(), Some(&state.opt_g));
    let d_state: checkpoint::AdamStateData = state.opt_d.export_state().into();
    if let Some(opt) = &mut ckpt.optimizer {
        opt.slots.extend(d_state.slots);
    }
    checkpoint::save(path, checkpoint::TRANSLATION_MAGIC, &ckpt)
}

/// Restore weights and optimizer moments saved by [`save_da_checkpoint`].
pub fn load_da_checkpoint(
    path: &Path,
    bundle: &TranslationBundle,
    state: &mut TrainState,
) -> Result<Checkpoint> {
    let ckpt = checkpoint::load(path, checkpoint::TRANSLATION_MAGIC)?;
    ckpt.load_into_params(&bundle.all_params())?;
    if let Some(opt) = &ckpt.optimizer {
        let full: uwr_autodiff::AdamState = opt.clone().into();
        state.opt_g.load_state(&full);
        state.opt_d.load_state(&full);
        state.step = ckpt.step;
    }
    Ok(ckpt)
}

/// Train the adaptation model. Batches are resampled per step from a
/// step-keyed stream, so runs are reproducible and resumable: training 2n
/// steps equals training n, checkpointing, and resuming for n more.
pub fn train_da(
    bundle: &TranslationBundle,
    synthetic: &[Array3<f64>],
    real: &[Array3<f64>],
    opts: &DaTrainOptions,
) -> Result<Vec<TrainLogRow>> {
    if synthetic.is_empty() || real.is_empty() {
        return Err(Error::Domain("training corpora must be non-empty".into()));
    }
    opts.loss.validate()?;
    let mut state = TrainState::new(bundle);
    if let Some(resume) = &opts.resume {
        load_da_checkpoint(resume, bundle, &mut state)?;
        log::info!("resumed adaptation training at step {}", state.step);
    }
    if let Some(path) = &opts.log_path {
        if state.step == 0 {
            write_log_header(path)?;
        }
    }
    let mut rows = Vec::new();
    while state.step < opts.steps {
        let step = state.step;
        let mut rng = seeding::stream_rng(opts.seed, seeding::STREAM_DA_BATCH, step);
        let batch_s = sample_batch(synthetic, &mut rng, opts.batch_size);
        let batch_r = sample_batch(real, &mut rng, opts.batch_size);
        let result = train_step(bundle, &mut state, &batch_s, &batch_r, &opts.loss, &opts.quality, opts.seed)?;
        let row = TrainLogRow { step, result };
        if let Some(path) = &opts.log_path {
            append_log_row(path, &row)?;
        }
        if let Some(path) = &opts.checkpoint_path {
            if state.step == opts.steps || (opts.checkpoint_every > 0 && state.step % opts.checkpoint_every == 0) {
                save_da_checkpoint(path, bundle, &state, &opts.config_snapshot)?;
            }
        }
        rows.push(row);
    }
    if let Some(path) = &opts.checkpoint_path {
        save_da_checkpoint(path, bundle, &state, &opts.config_snapshot)?;
    }
    Ok(rows)
}
