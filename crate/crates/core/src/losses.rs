//! Differentiable scalar loss terms shared by the adaptation and restoration
//! training objectives.
//!
//! Every loss maps graph variables to a scalar variable so gradients flow to
//! whichever inputs are tracked. Image-valued inputs are `[n, c, h, w]`.

use std::path::Path;

use ndarray::{arr2, Array2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use uwr_autodiff::{Conv2d, Module, PadMode, Param, Rng, Var};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::quality::{self, QualityConfig};

/// How a per-element loss map collapses to a scalar.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reduction {
    Mean,
    Sum,
}

/// Shared constants for the robust-distance and edge losses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Charbonnier smoothing constant; also the exact loss floor at zero
    /// residual under mean reduction.
    pub epsilon: f64,
    /// Std-dev of the Gaussian applied before the Laplacian in the edge loss.
    pub gaussian_sigma: f64,
    /// Odd Gaussian window size for the edge loss.
    pub gaussian_kernel: usize,
    pub reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            epsilon: 1e-4,
            gaussian_sigma: 1.0,
            gaussian_kernel: 5,
            reduction: Reduction::Mean,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("loss epsilon must be positive".into()));
        }
        if self.gaussian_kernel < 3 || self.gaussian_kernel % 2 == 0 {
            return Err(Error::Config("gaussian_kernel must be odd and >= 3".into()));
        }
        if !(self.gaussian_sigma > 0.0) {
            return Err(Error::Config("gaussian_sigma must be positive".into()));
        }
        Ok(())
    }
}

fn check_same_shape(a: &Var, b: &Var) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "loss inputs differ in shape: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn reduce(map: Var, reduction: Reduction) -> Var {
    match reduction {
        Reduction::Mean => map.mean_all(),
        Reduction::Sum => map.sum_all(),
    }
}

/// Smooth robust distance: `reduce(sqrt((a-b)^2 + eps^2))`. Differentiable
/// everywhere; equals exactly `eps` at zero residual under mean reduction.
pub fn charbonnier(a: &Var, b: &Var, cfg: &LossConfig) -> Result<Var> {
    check_same_shape(a, b)?;
    let eps2 = cfg.epsilon * cfg.epsilon;
    Ok(reduce(a.sub(b).square().add_scalar(eps2).sqrt(), cfg.reduction))
}

/// 3x3 discrete Laplacian stencil used by the edge loss.
fn laplacian_kernel() -> Array2<f64> {
    arr2(&[[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])
}

/// Laplacian-of-Gaussian edge map, reflect-padded, per channel.
fn edge_map(x: &Var, cfg: &LossConfig) -> Var {
    let gauss = quality::gaussian_kernel2d(cfg.gaussian_kernel, cfg.gaussian_sigma);
    x.depthwise_fixed(&gauss, PadMode::Reflect)
        .depthwise_fixed(&laplacian_kernel(), PadMode::Reflect)
}

/// Robust distance between the Laplacian-of-Gaussian edge maps of two
/// images. Constant images have zero edge response, so any two constants
/// score the floor `eps`.
pub fn edge_loss(a: &Var, b: &Var, cfg: &LossConfig) -> Result<Var> {
    check_same_shape(a, b)?;
    let shape = a.shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::Shape(format!(
            "edge loss expects [n, c, h, w] inputs, got {shape:?}"
        )));
    }
    let (h, w) = (shape[2], shape[3]);
    if h < cfg.gaussian_kernel || w < cfg.gaussian_kernel {
        return Err(Error::Shape(format!(
            "image {h}x{w} is smaller than the {0}x{0} smoothing kernel",
            cfg.gaussian_kernel
        )));
    }
    let ea = edge_map(a, cfg);
    let eb = edge_map(b, cfg);
    let eps2 = cfg.epsilon * cfg.epsilon;
    Ok(reduce(ea.sub(&eb).square().add_scalar(eps2).sqrt(), cfg.reduction))
}

/// Structural dissimilarity `1 - SSIM(a, b)`, in `[0, 2]`.
pub fn ssim_loss(a: &Var, b: &Var) -> Result<Var> {
    ssim_loss_with(a, b, &QualityConfig::default())
}

/// Structural dissimilarity with explicit SSIM constants.
pub fn ssim_loss_with(a: &Var, b: &Var, cfg: &QualityConfig) -> Result<Var> {
    check_same_shape(a, b)?;
    let idx = quality::ssim_index_graph(a, b, cfg)?;
    Ok(idx.neg().add_scalar(1.0))
}

/// Adversarial objective family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GanMode {
    /// Saturating cross-entropy discriminator with the non-saturating
    /// generator trick; discriminator outputs are probabilities.
    Vanilla,
    /// Least-squares objective on raw discriminator scores.
    Lsgan,
}

const PROB_GUARD: f64 = 1e-7;

fn check_probability(v: &Var, role: &str) -> Result<()> {
    let arr = v.to_array();
    if !arr.iter().all(|p| p.is_finite() && (0.0..=1.0).contains(p)) {
        return Err(Error::Domain(format!(
            "{role} scores must be probabilities in [0, 1] before the adversarial loss"
        )));
    }
    Ok(())
}

/// Minimizable discriminator loss. In vanilla mode it is the negation of the
/// objective `E[log D(real)] + E[log(1 - D(fake))]`, so a perfectly confused
/// discriminator (both at 0.5) scores `-2·log(0.5)` and a perfect one
/// approaches 0.
pub fn adversarial_loss_d(d_real: &Var, d_fake: &Var, mode: GanMode) -> Result<Var> {
    match mode {
        GanMode::Vanilla => {
            check_probability(d_real, "real")?;
            check_probability(d_fake, "fake")?;
            let r = d_real.clamp(PROB_GUARD, 1.0 - PROB_GUARD);
            let f = d_fake.clamp(PROB_GUARD, 1.0 - PROB_GUARD);
            let objective = r.ln().mean_all().add(&f.neg().add_scalar(1.0).ln().mean_all());
            Ok(objective.neg())
        }
        GanMode::Lsgan => {
            let real_term = d_real.add_scalar(-1.0).square().mean_all();
            let fake_term = d_fake.square().mean_all();
            Ok(real_term.add(&fake_term).mul_scalar(0.5))
        }
    }
}

/// Minimizable generator loss: non-saturating `-E[log D(fake)]` in vanilla
/// mode, `E[(D(fake) - 1)^2]` in least-squares mode. Strictly decreasing in
/// the discriminator's belief that fakes are real.
pub fn adversarial_loss_g(d_fake: &Var, mode: GanMode) -> Result<Var> {
    match mode {
        GanMode::Vanilla => {
            check_probability(d_fake, "fake")?;
            let f = d_fake.clamp(PROB_GUARD, 1.0 - PROB_GUARD);
            Ok(f.ln().mean_all().neg())
        }
        GanMode::Lsgan => Ok(d_fake.add_scalar(-1.0).square().mean_all()),
    }
}

/// Mean absolute difference between two latent codes (content or style).
pub fn latent_recon_loss(code_rt: &Var, code_orig: &Var) -> Result<Var> {
    check_same_shape(code_rt, code_orig)?;
    Ok(code_rt.sub(code_orig).abs().mean_all())
}

/// Mean absolute difference between a reconstruction and its original image.
pub fn identity_image_loss(reconstructed: &Var, original: &Var) -> Result<Var> {
    check_same_shape(reconstructed, original)?;
    Ok(reconstructed.sub(original).abs().mean_all())
}

/// Where perceptual feature weights come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerceptualMode {
    /// Deterministic weights expanded from `seed`; cached when a path is set.
    Seeded,
    /// Load pre-existing weights from `weights_path` (checksum-verified).
    File,
    /// No extractor; the perceptual term is dropped with a logged warning.
    Disabled,
}

/// Configuration of the perceptual feature extractor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerceptualConfig {
    pub mode: PerceptualMode,
    pub seed: u64,
    pub base_width: usize,
    /// Cache/load location of the weight archive.
    pub weights_path: Option<String>,
    /// Pinned hex SHA-256 of the weight values; verified when loading.
    pub checksum: Option<String>,
}

impl Default for PerceptualConfig {
    fn default() -> Self {
        PerceptualConfig {
            mode: PerceptualMode::Seeded,
            seed: 77,
            base_width: 16,
            weights_path: None,
            checksum: None,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ExtractorMeta {
    base_width: usize,
    seed: u64,
}

/// A small frozen convolutional feature pyramid used as the perceptual
/// distance space. Weights are fixed (never trained); gradients flow through
/// it to the compared images only. Taps are taken after the two
/// downsampling stages so the distance mixes mid- and coarse-scale structure.
pub struct FeatureExtractor {
    convs: Vec<Conv2d>,
    taps: Vec<usize>,
    meta: ExtractorMeta,
}

impl std::fmt::Debug for FeatureExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FeatureExtractor")
            .field("meta", &self.meta)
            .field("taps", &self.taps)
            .finish()
    }
}

impl FeatureExtractor {
    /// Build deterministic weights from a seed.
    pub fn seeded(seed: u64, base_width: usize) -> FeatureExtractor {
        use rand::SeedableRng;
        let mut rng = Rng::seed_from_u64(seed);
        let w = base_width;
        let convs = vec![
            Conv2d::new(&mut rng, "perceptual.c0", 3, w, 3, 1, 1, PadMode::Zero),
            Conv2d::new(&mut rng, "perceptual.c1", w, 2 * w, 3, 2, 1, PadMode::Zero),
            Conv2d::new(&mut rng, "perceptual.c2", 2 * w, 2 * w, 3, 1, 1, PadMode::Zero),
            Conv2d::new(&mut rng, "perceptual.c3", 2 * w, 4 * w, 3, 2, 1, PadMode::Zero),
        ];
        FeatureExtractor {
            convs,
            taps: vec![1, 3],
            meta: ExtractorMeta { base_width, seed },
        }
    }

    /// Resolve the configured mode; `Ok(None)` means explicitly disabled.
    pub fn from_config(cfg: &PerceptualConfig) -> Result<Option<FeatureExtractor>> {
        match cfg.mode {
            PerceptualMode::Disabled => Ok(None),
            PerceptualMode::Seeded => {
                if let Some(path) = &cfg.weights_path {
                    let path = Path::new(path);
                    if path.exists() {
                        return Ok(Some(Self::load(path, cfg.checksum.as_deref())?));
                    }
                    let fx = Self::seeded(cfg.seed, cfg.base_width);
                    if let Some(parent) = path.parent() {
                        if !parent.as_os_str().is_empty() {
                            std::fs::create_dir_all(parent).map_err(Error::io(parent))?;
                        }
                    }
                    fx.save(path)?;
                    log::info!("cached perceptual feature weights at {}", path.display());
                    return Ok(Some(fx));
                }
                Ok(Some(Self::seeded(cfg.seed, cfg.base_width)))
            }
            PerceptualMode::File => {
                let path = cfg.weights_path.as_deref().ok_or_else(|| {
                    Error::Config(
                        "perceptual mode \"file\" requires weights_path; \
                         switch mode to \"seeded\" to derive weights from the seed, \
                         or \"disabled\" to drop the perceptual term"
                            .into(),
                    )
                })?;
                let path = Path::new(path);
                if !path.exists() {
                    return Err(Error::Config(format!(
                        "perceptual feature weights not found at {}; run once with \
                         mode = \"seeded\" and this weights_path to generate and cache them, \
                         or set mode = \"disabled\" to drop the term (its weight falls to 0)",
                        path.display()
                    )));
                }
                Ok(Some(Self::load(path, cfg.checksum.as_deref())?))
            }
        }
    }

    fn params(&self) -> Vec<Param> {
        self.convs.iter().flat_map(|c| c.params()).collect()
    }

    /// Hex SHA-256 over all weight values in declaration order.
    pub fn weight_checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for p in self.params() {
            for v in p.value().iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        format!("{:x}", hasher.finalize())
    }

    /// Persist as a tagged weight archive.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = toml::to_string(&self.meta).map_err(|e| Error::Config(e.to_string()))?;
        let ckpt = checkpoint::Checkpoint::from_params(0, &meta, &self.params(), None);
        checkpoint::save(path, checkpoint::FEATURES_MAGIC, &ckpt)
    }

    /// Load an archive, optionally verifying the pinned weight checksum.
    pub fn load(path: impl AsRef<Path>, expected_checksum: Option<&str>) -> Result<FeatureExtractor> {
        let path = path.as_ref();
        let ckpt = checkpoint::load(path, checkpoint::FEATURES_MAGIC)?;
        let meta: ExtractorMeta = toml::from_str(&ckpt.config)
            .map_err(|e| Error::Checkpoint(format!("{}: bad extractor metadata: {e}", path.display())))?;
        let mut fx = Self::seeded(meta.seed, meta.base_width);
        fx.meta = meta;
        ckpt.load_into_params(&fx.params())?;
        if let Some(expected) = expected_checksum {
            let actual = fx.weight_checksum();
            if actual != expected {
                return Err(Error::Checkpoint(format!(
                    "{}: weight checksum {actual} does not match pinned {expected}",
                    path.display()
                )));
            }
        }
        Ok(fx)
    }

    /// Feature maps at the configured taps. Weights stay frozen.
    pub fn features(&self, x: &Var) -> Vec<Var> {
        let mut out = Vec::with_capacity(self.taps.len());
        let mut h = x.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(&h, false).relu();
            if self.taps.contains(&i) {
                out.push(h.clone());
            }
        }
        out
    }
}

/// Mean squared distance between deep feature maps of two images, averaged
/// over the extractor's taps. Zero iff the images produce identical features.
pub fn perceptual_loss(a: &Var, b: &Var, fx: &FeatureExtractor) -> Result<Var> {
    check_same_shape(a, b)?;
    let fa = fx.features(a);
    let fb = fx.features(b);
    let mut total: Option<Var> = None;
    for (xa, xb) in fa.iter().zip(fb.iter()) {
        let term = xa.sub(xb).square().mean_all();
        total = Some(match total {
            Some(t) => t.add(&term),
            None => term,
        });
    }
    let total = total.expect("extractor has at least one tap");
    Ok(total.mul_scalar(1.0 / fa.len() as f64))
}
