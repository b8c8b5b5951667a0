//! One flat run configuration covering every pipeline stage.
//!
//! The file round-trips losslessly (serialize → parse → equal), every
//! default is written out explicitly, and unknown keys are rejected. The
//! serialized text is hashed into reports and checkpoints so results stay
//! traceable to the exact settings that produced them.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::{LossConfig, PerceptualConfig, Reduction};
use crate::quality::QualityConfig;
use crate::restoration::{RestoreLossWeights, RestoreNetConfig};
use crate::translation::TranslationConfig;

/// Synthesis-stage settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FormationSection {
    /// Optional TOML file overriding or extending the built-in water types.
    pub water_types_file: Option<PathBuf>,
    /// Ambient-light jitter amplitude applied per synthetic item (0 = off).
    pub ambient_jitter: f64,
}

impl Default for FormationSection {
    fn default() -> Self {
        FormationSection {
            water_types_file: None,
            ambient_jitter: 0.0,
        }
    }
}

/// Loss-function settings shared by both training stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossesSection {
    pub epsilon: f64,
    pub gaussian_sigma: f64,
    pub gaussian_kernel: usize,
    pub reduction: Reduction,
    pub perceptual: PerceptualConfig,
}

impl Default for LossesSection {
    fn default() -> Self {
        let base = LossConfig::default();
        LossesSection {
            epsilon: base.epsilon,
            gaussian_sigma: base.gaussian_sigma,
            gaussian_kernel: base.gaussian_kernel,
            reduction: base.reduction,
            perceptual: PerceptualConfig::default(),
        }
    }
}

impl LossesSection {
    /// The scalar-loss part of this section.
    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            epsilon: self.epsilon,
            gaussian_sigma: self.gaussian_sigma,
            gaussian_kernel: self.gaussian_kernel,
            reduction: self.reduction,
        }
    }
}

/// Dataset-construction settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// Real styles sampled per synthetic image.
    pub k: usize,
    /// Pair every source with every water type instead of round-robin.
    pub cartesian: bool,
    /// Fraction of manifest entries tagged as validation.
    pub val_fraction: f64,
    /// Minimum adaptation-training step a checkpoint must have reached
    /// before it may generate datasets.
    pub min_da_step: u64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            k: 6,
            cartesian: false,
            val_fraction: 0.0,
            min_da_step: 1,
        }
    }
}

/// Restoration-stage settings: architecture plus training schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RestorationSection {
    pub net: RestoreNetConfig,
    pub epochs: usize,
    pub steps_per_epoch: Option<usize>,
    pub batch_size: usize,
    pub patch: usize,
    pub lr: f64,
    pub lr_halve_every: usize,
    pub weights: RestoreLossWeights,
}

impl Default for RestorationSection {
    fn default() -> Self {
        RestorationSection {
            net: RestoreNetConfig::default(),
            epochs: 75,
            steps_per_epoch: None,
            batch_size: 4,
            patch: 256,
            lr: 3e-4,
            lr_halve_every: 10,
            weights: RestoreLossWeights::default(),
        }
    }
}

/// The complete settings of one experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Bit-reproducible mode; the only supported mode (kept explicit so
    /// runs record it).
    pub deterministic: bool,
    pub output_root: PathBuf,
    /// Compute device; only "cpu" is available.
    pub device: String,
    pub formation: FormationSection,
    pub losses: LossesSection,
    pub translation: TranslationConfig,
    pub datasetgen: DatasetSection,
    pub restoration: RestorationSection,
    pub quality: QualityConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            deterministic: true,
            output_root: PathBuf::from("runs"),
            device: "cpu".into(),
            formation: FormationSection::default(),
            losses: LossesSection::default(),
            translation: TranslationConfig::default(),
            datasetgen: DatasetSection::default(),
            restoration: RestorationSection::default(),
            quality: QualityConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.device != "cpu" {
            return Err(Error::Config(format!(
                "device {:?} is not available; only \"cpu\" is supported",
                self.device
            )));
        }
        if !(0.0..1.0).contains(&self.datasetgen.val_fraction) {
            return Err(Error::Config("datasetgen.val_fraction must lie in [0, 1)".into()));
        }
        if self.datasetgen.k == 0 {
            return Err(Error::Config("datasetgen.k must be >= 1".into()));
        }
        if !(self.formation.ambient_jitter >= 0.0) {
            return Err(Error::Config("formation.ambient_jitter must be >= 0".into()));
        }
        self.losses.loss_config().validate()?;
        self.translation.validate()?;
        self.restoration.net.validate()?;
        if self.restoration.epochs == 0 || self.restoration.batch_size == 0 {
            return Err(Error::Config("restoration epochs and batch_size must be >= 1".into()));
        }
        if self.restoration.patch % self.restoration.net.pad_multiple() != 0 {
            return Err(Error::Config(format!(
                "restoration.patch {} must be a multiple of {}",
                self.restoration.patch,
                self.restoration.net.pad_multiple()
            )));
        }
        self.quality.validate()?;
        Ok(())
    }

    /// Serialize with every key written explicitly.
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("could not serialize config: {e}")))
    }

    pub fn from_toml_str(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        Self::from_toml_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_toml_string()?).map_err(Error::io(path))
    }

    /// Short hash of the serialized config, embedded in reports.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(&self.to_toml_string()?)[..12].to_string())
    }
}

/// Hex SHA-256 of a text.
pub fn sha256_hex(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
