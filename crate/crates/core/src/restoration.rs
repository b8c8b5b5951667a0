//! Residual restoration network: a U-Net with channel-attention blocks that
//! predicts a correction added to the degraded input.
//!
//! The final layer starts at zero, so an untrained network is exactly the
//! identity map. Upsampling is bilinear interpolation followed by a
//! convolution; the graph never contains a transposed convolution. Training
//! minimizes a robust pixel term plus weighted feature-space and edge terms.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Array4, ArrayD, Axis};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use uwr_autodiff::{concat_c, Adam, Conv2d, Graph, Linear, Module, PadMode, Param, Rng, Var};

use crate::checkpoint::{self, Checkpoint};
use crate::error::{Error, Result};
use crate::losses::{
    charbonnier, edge_loss, perceptual_loss, FeatureExtractor, LossConfig, PerceptualConfig,
};
use crate::seeding;

/// Architectural ablations of the restorer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RestoreVariant {
    /// Channel attention and block-level skips everywhere.
    Full,
    /// Convolution blocks only: no channel gates, no block skips.
    SimpleUnet,
    /// Block skips kept, channel gates removed.
    NoCal,
}

/// Shape of the restoration network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RestoreNetConfig {
    /// Resolution levels; each level below the first halves the grid.
    pub depth: usize,
    /// Channels at the full-resolution level; doubled per level below.
    pub base_width: usize,
    /// Attention blocks per encoder and per decoder level.
    pub cab_per_scale: usize,
    /// Channel-reduction ratio inside the attention gate.
    pub attention_reduction: usize,
    pub variant: RestoreVariant,
}

impl Default for RestoreNetConfig {
    fn default() -> Self {
        RestoreNetConfig {
            depth: 4,
            base_width: 32,
            cab_per_scale: 2,
            attention_reduction: 8,
            variant: RestoreVariant::Full,
        }
    }
}

impl RestoreNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::Config("restorer depth must be >= 2".into()));
        }
        if self.base_width < 8 {
            return Err(Error::Config("restorer base_width must be >= 8".into()));
        }
        if self.cab_per_scale < 1 {
            return Err(Error::Config("cab_per_scale must be >= 1".into()));
        }
        if self.attention_reduction == 0 || self.base_width % self.attention_reduction != 0 {
            return Err(Error::Config(format!(
                "attention_reduction {} must divide base_width {}",
                self.attention_reduction, self.base_width
            )));
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// Inputs are padded so both edges are multiples of this.
    pub fn pad_multiple(&self) -> usize {
        1 << self.depth
    }
}

/// One degraded/clean training example.
#[derive(Clone, Debug)]
pub struct RestorationPair {
    pub input: Array3<f64>,
    pub truth: Array3<f64>,
}

impl RestorationPair {
    pub fn new(input: Array3<f64>, truth: Array3<f64>) -> Result<Self> {
        if input.dim() != truth.dim() {
            return Err(Error::Shape(format!(
                "pair shapes differ: {:?} vs {:?}",
                input.dim(),
                truth.dim()
            )));
        }
        for (label, img) in [("input", &input), ("truth", &truth)] {
            if img.dim().0 != 3 {
                return Err(Error::Shape(format!("{label} must be RGB")));
            }
            if !img.iter().all(|v| (0.0..=1.0).contains(v)) {
                return Err(Error::Domain(format!("{label} values must lie in [0, 1]")));
            }
        }
        Ok(RestorationPair { input, truth })
    }
}

/// Double convolution with an optional channel gate and block skip.
struct Cab {
    c1: Conv2d,
    c2: Conv2d,
    attn: Option<(Linear, Linear)>,
    skip: bool,
}

impl Cab {
    fn new(rng: &mut Rng, name: &str, width: usize, cfg: &RestoreNetConfig) -> Self {
        let c1 = Conv2d::new(rng, &format!("{name}.c1"), width, width, 3, 1, 1, PadMode::Reflect);
        let c2 = Conv2d::new(rng, &format!("{name}.c2"), width, width, 3, 1, 1, PadMode::Reflect);
        let attn = match cfg.variant {
            RestoreVariant::Full => {
                let mid = width / cfg.attention_reduction;
                Some((
                    Linear::new(rng, &format!("{name}.a1"), width, mid.max(1)),
                    Linear::new(rng, &format!("{name}.a2"), mid.max(1), width),
                ))
            }
            RestoreVariant::SimpleUnet | RestoreVariant::NoCal => None,
        };
        let skip = cfg.variant != RestoreVariant::SimpleUnet;
        Cab { c1, c2, attn, skip }
    }

    fn forward(&self, x: &Var, track: bool, gates: &mut Option<&mut Vec<Array2<f64>>>) -> Var {
        let f = self.c2.forward(&self.c1.forward(x, track).relu(), track);
        let gated = match &self.attn {
            Some((a1, a2)) => {
                let pooled = f.global_avg_pool();
                // A leaky hidden activation keeps this bottleneck trainable:
                // with a hard relu, a narrow (width / reduction) layer can
                // start all-negative and never recover.
                let gate = a2
                    .forward(&a1.forward(&pooled, track).leaky_relu(0.1), track)
                    .sigmoid();
                if let Some(sink) = gates.as_deref_mut() {
                    let v = gate.to_array();
                    sink.push(Array2::from_shape_fn((v.shape()[0], v.shape()[1]), |(i, j)| {
                        v[[i, j]]
                    }));
                }
                let zeros = x
                    .graph()
                    .constant(ArrayD::zeros(gate.to_array().raw_dim()));
                f.scale_shift_nc(&gate, &zeros)
            }
            None => f,
        };
        if self.skip {
            x.add(&gated)
        } else {
            gated
        }
    }
}

impl Module for Cab {
    fn params(&self) -> Vec<Param> {
        let mut ps = [self.c1.params(), self.c2.params()].concat();
        if let Some((a1, a2)) = &self.attn {
            ps.extend(a1.params());
            ps.extend(a2.params());
        }
        ps
    }
}

/// The residual restorer.
pub struct RestoreNet {
    pub cfg: RestoreNetConfig,
    stem: Conv2d,
    enc: Vec<Vec<Cab>>,
    down: Vec<Conv2d>,
    skip_blocks: Vec<Cab>,
    up: Vec<Conv2d>,
    fuse: Vec<Conv2d>,
    dec: Vec<Vec<Cab>>,
    tail: Conv2d,
}

impl RestoreNet {
    /// Fresh network; the final layer is zero so restoration starts as the
    /// identity map.
    pub fn new(cfg: RestoreNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::seed_from_u64(seed);
        let d = cfg.depth;
        let stem = Conv2d::new(&mut rng, "stem", 3, cfg.width(0), 3, 1, 1, PadMode::Reflect);
        let level_blocks = |rng: &mut Rng, prefix: &str, level: usize| -> Vec<Cab> {
            (0..cfg.cab_per_scale)
                .map(|j| Cab::new(rng, &format!("{prefix}{level}.cab{j}"), cfg.width(level), &cfg))
                .collect()
        };
        let enc = (0..d).map(|i| level_blocks(&mut rng, "enc", i)).collect();
        let down = (0..d - 1)
            .map(|i| {
                Conv2d::new(
                    &mut rng,
                    &format!("down{i}"),
                    cfg.width(i),
                    cfg.width(i + 1),
                    4,
                    2,
                    1,
                    PadMode::Reflect,
                )
            })
            .collect();
        let skip_blocks = (0..d - 1)
            .map(|i| Cab::new(&mut rng, &format!("skip{i}"), cfg.width(i), &cfg))
            .collect();
        let up = (0..d - 1)
            .map(|i| {
                Conv2d::new(
                    &mut rng,
                    &format!("up{i}"),
                    cfg.width(i + 1),
                    cfg.width(i),
                    3,
                    1,
                    1,
                    PadMode::Reflect,
                )
            })
            .collect();
        let fuse = (0..d - 1)
            .map(|i| {
                Conv2d::new(
                    &mut rng,
                    &format!("fuse{i}"),
                    2 * cfg.width(i),
                    cfg.width(i),
                    3,
                    1,
                    1,
                    PadMode::Reflect,
                )
            })
            .collect();
        let dec = (0..d - 1).map(|i| level_blocks(&mut rng, "dec", i)).collect();
        let tail = Conv2d::zero_init("tail", cfg.width(0), 3, 3, 1, 1, PadMode::Reflect);
        Ok(RestoreNet {
            cfg,
            stem,
            enc,
            down,
            skip_blocks,
            up,
            fuse,
            dec,
            tail,
        })
    }

    /// Graph-level forward pass; returns `(residual, restored)` where
    /// `restored = input + residual` exactly.
    pub fn forward_var(
        &self,
        x: &Var,
        track: bool,
        mut gates: Option<&mut Vec<Array2<f64>>>,
    ) -> (Var, Var) {
        let d = self.cfg.depth;
        let mut h = self.stem.forward(x, track);
        let mut saved = Vec::with_capacity(d - 1);
        for level in 0..d {
            for cab in &self.enc[level] {
                h = cab.forward(&h, track, &mut gates);
            }
            if level + 1 < d {
                saved.push(h.clone());
                h = self.down[level].forward(&h, track).relu();
            }
        }
        for level in (0..d - 1).rev() {
            h = self.up[level].forward(&h.upsample_bilinear2x(), track).relu();
            let s = self.skip_blocks[level].forward(&saved[level], track, &mut gates);
            h = self.fuse[level].forward(&concat_c(&[h, s]), track).relu();
            for cab in &self.dec[level] {
                h = cab.forward(&h, track, &mut gates);
            }
        }
        let residual = self.tail.forward(&h, track);
        let restored = x.add(&residual);
        (residual, restored)
    }
}

impl Module for RestoreNet {
    fn params(&self) -> Vec<Param> {
        let mut ps = self.stem.params();
        for level in &self.enc {
            for cab in level {
                ps.extend(cab.params());
            }
        }
        for c in &self.down {
            ps.extend(c.params());
        }
        for cab in &self.skip_blocks {
            ps.extend(cab.params());
        }
        for c in &self.up {
            ps.extend(c.params());
        }
        for c in &self.fuse {
            ps.extend(c.params());
        }
        for level in &self.dec {
            for cab in level {
                ps.extend(cab.params());
            }
        }
        ps.extend(self.tail.params());
        ps
    }
}

fn mirror_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let k = i % period;
    if k < n {
        k
    } else {
        period - k
    }
}

/// Extend an image to `(h, w)` by reflecting rows/columns at the bottom and
/// right edges; the top-left corner is the original image unchanged.
fn reflect_pad_to(img: &Array3<f64>, h: usize, w: usize) -> Array3<f64> {
    let (c, h0, w0) = img.dim();
    Array3::from_shape_fn((c, h, w), |(ch, i, j)| {
        img[[ch, mirror_index(i, h0), mirror_index(j, w0)]]
    })
}

fn round_up(n: usize, m: usize) -> usize {
    n.div_ceil(m) * m
}

/// Predict the correction for one image. Returns `(residual, restored)`
/// with `restored = input + residual` exactly; neither is clamped.
pub fn restore(net: &RestoreNet, input: &Array3<f64>) -> Result<(Array3<f64>, Array3<f64>)> {
    let (c, h, w) = input.dim();
    if c != 3 {
        return Err(Error::Shape(format!("expected an RGB image, got {c} channels")));
    }
    if !input.iter().all(|v| v.is_finite()) {
        return Err(Error::Domain("restoration input must be finite".into()));
    }
    let m = net.cfg.pad_multiple();
    let (hp, wp) = (round_up(h.max(m), m), round_up(w.max(m), m));
    let padded = reflect_pad_to(input, hp, wp);
    let g = Graph::new();
    let x = g.constant(padded.insert_axis(Axis(0)).into_dyn());
    let (res, _) = net.forward_var(&x, false, None);
    let res = res.to_array();
    let residual = Array3::from_shape_fn((3, h, w), |(ch, i, j)| res[[0, ch, i, j]]);
    let restored = input + &residual;
    Ok((residual, restored))
}

/// Weights of the feature-space and edge terms in the training objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RestoreLossWeights {
    pub perceptual: f64,
    pub edge: f64,
}

impl Default for RestoreLossWeights {
    fn default() -> Self {
        RestoreLossWeights {
            perceptual: 0.5,
            edge: 0.5,
        }
    }
}

/// Robust pixel term plus weighted feature and edge terms. The breakdown
/// holds the unweighted values of all three.
pub fn restoration_loss(
    restored: &Var,
    truth: &Var,
    extractor: Option<&FeatureExtractor>,
    weights: &RestoreLossWeights,
    cfg: &LossConfig,
) -> Result<(Var, BTreeMap<String, f64>)> {
    if !(weights.perceptual >= 0.0 && weights.edge >= 0.0) {
        return Err(Error::Config("restoration loss weights must be >= 0".into()));
    }
    let charb = charbonnier(restored, truth, cfg)?;
    let edge = edge_loss(restored, truth, cfg)?;
    let perc = match extractor {
        Some(fx) => Some(perceptual_loss(restored, truth, fx)?),
        None => None,
    };
    let mut breakdown = BTreeMap::new();
    breakdown.insert("charbonnier".to_string(), charb.scalar());
    breakdown.insert("edge".to_string(), edge.scalar());
    breakdown.insert(
        "perceptual".to_string(),
        perc.as_ref().map_or(0.0, |p| p.scalar()),
    );
    let mut total = charb.add(&edge.mul_scalar(weights.edge));
    if let Some(p) = perc {
        total = total.add(&p.mul_scalar(weights.perceptual));
    }
    Ok((total, breakdown))
}

/// Learning rate after step-decay: the base rate halved once per
/// `halve_every` completed epochs.
pub fn lr_for_epoch(base: f64, epoch: usize, halve_every: usize) -> f64 {
    base * 0.5f64.powi((epoch / halve_every.max(1)) as i32)
}

/// Settings for a restoration training run.
#[derive(Clone, Debug)]
pub struct RestoreTrainOptions {
    pub epochs: usize,
    /// Optimizer steps per epoch; `None` derives one pass over the dataset.
    pub steps_per_epoch: Option<usize>,
    pub batch_size: usize,
    /// Square crop edge; images must be at least this large.
    pub patch: usize,
    pub lr: f64,
    pub lr_halve_every: usize,
    pub seed: u64,
    pub weights: RestoreLossWeights,
    pub loss: LossConfig,
    pub perceptual: PerceptualConfig,
    /// CSV log: step, epoch, lr, the three terms, total.
    pub log_path: Option<PathBuf>,
    /// Archive rewritten after every epoch.
    pub checkpoint_path: Option<PathBuf>,
    pub config_snapshot: String,
    pub resume: Option<PathBuf>,
}

impl Default for RestoreTrainOptions {
    fn default() -> Self {
        RestoreTrainOptions {
            epochs: 75,
            steps_per_epoch: None,
            batch_size: 4,
            patch: 256,
            lr: 3e-4,
            lr_halve_every: 10,
            seed: 0,
            weights: RestoreLossWeights::default(),
            loss: LossConfig::default(),
            perceptual: PerceptualConfig::default(),
            log_path: None,
            checkpoint_path: None,
            config_snapshot: String::new(),
            resume: None,
        }
    }
}

/// One optimizer step of the training log.
#[derive(Clone, Debug)]
pub struct RestoreLogRow {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub charbonnier: f64,
    pub perceptual: f64,
    pub edge: f64,
    pub total: f64,
}

fn write_restore_log_header(path: &Path) -> Result<()> {
    std::fs::write(path, "step,epoch,lr,charbonnier,perceptual,edge,total\n")
        .map_err(Error::io(path))
}

fn append_restore_log_row(path: &Path, row: &RestoreLogRow) -> Result<()> {
    use std::io::Write;
    let line = format!(
        "{},{},{},{},{},{},{}\n",
        row.step, row.epoch, row.lr, row.charbonnier, row.perceptual, row.edge, row.total
    );
    let mut f = std::fs::OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(Error::io(path))?;
    f.write_all(line.as_bytes()).map_err(Error::io(path))
}

/// Save restorer weights, optimizer moments, and the completed-epoch count.
pub fn save_restore_checkpoint(
    path: &Path,
    net: &RestoreNet,
    opt: &Adam,
    epochs_done: usize,
    config_snapshot: &str,
) -> Result<()> {
    let ckpt = Checkpoint::from_params(epochs_done as u64, config_snapshot, &net.params(), Some(opt));
    checkpoint::save(path, checkpoint::RESTORE_MAGIC, &ckpt)
}

/// Restore weights and optimizer moments saved by
/// [`save_restore_checkpoint`]; returns the archive (its `step` is the
/// completed-epoch count).
pub fn load_restore_checkpoint(path: &Path, net: &RestoreNet, opt: Option<&mut Adam>) -> Result<Checkpoint> {
    let ckpt = checkpoint::load(path, checkpoint::RESTORE_MAGIC)?;
    ckpt.load_into_params(&net.params())?;
    if let Some(opt) = opt {
        ckpt.load_into_optimizer(opt)?;
    }
    Ok(ckpt)
}

/// Sample one augmented batch: per-pair random crop plus horizontal and
/// vertical flips, each with probability one half, identical for input and
/// truth.
fn sample_restore_batch(
    pairs: &[RestorationPair],
    rng: &mut Rng,
    batch: usize,
    patch: usize,
) -> Result<(Array4<f64>, Array4<f64>)> {
    use rand::Rng as _;
    let mut inputs = Array4::zeros((batch, 3, patch, patch));
    let mut truths = Array4::zeros((batch, 3, patch, patch));
    for b in 0..batch {
        let pick = rng.gen_range(0..pairs.len());
        let pair = &pairs[pick];
        let (_, h, w) = pair.input.dim();
        if h < patch || w < patch {
            return Err(Error::Shape(format!(
                "training image {h}x{w} is smaller than the {patch}x{patch} patch"
            )));
        }
        let top = if h > patch { rng.gen_range(0..=h - patch) } else { 0 };
        let left = if w > patch { rng.gen_range(0..=w - patch) } else { 0 };
        let flip_h = rng.gen_bool(0.5);
        let flip_v = rng.gen_bool(0.5);
        for c in 0..3 {
            for i in 0..patch {
                for j in 0..patch {
                    let si = if flip_v { patch - 1 - i } else { i };
                    let sj = if flip_h { patch - 1 - j } else { j };
                    inputs[[b, c, i, j]] = pair.input[[c, top + si, left + sj]];
                    truths[[b, c, i, j]] = pair.truth[[c, top + si, left + sj]];
                }
            }
        }
    }
    Ok((inputs, truths))
}

/// Train the restorer. Augmentation is keyed by the global step index, so a
/// resumed run replays the exact remaining schedule of a straight-through
/// run.
pub fn train_restorer(
    net: &RestoreNet,
    pairs: &[RestorationPair],
    opts: &RestoreTrainOptions,
) -> Result<Vec<RestoreLogRow>> {
    if pairs.is_empty() {
        return Err(Error::Domain("restoration training set must be non-empty".into()));
    }
    opts.loss.validate()?;
    if opts.patch % net.cfg.pad_multiple() != 0 {
        return Err(Error::Config(format!(
            "patch {} must be a multiple of {}",
            opts.patch,
            net.cfg.pad_multiple()
        )));
    }
    let extractor = FeatureExtractor::from_config(&opts.perceptual)?;
    let mut opt = Adam::new(net.params(), opts.lr, 0.9, 0.999);
    let mut start_epoch = 0usize;
    if let Some(resume) = &opts.resume {
        let ckpt = load_restore_checkpoint(resume, net, Some(&mut opt))?;
        start_epoch = ckpt.step as usize;
        log::info!("resumed restoration training at epoch {start_epoch}");
    }
    let steps_per_epoch = opts
        .steps_per_epoch
        .unwrap_or_else(|| pairs.len().div_ceil(opts.batch_size))
        .max(1);
    if let Some(path) = &opts.log_path {
        if start_epoch == 0 {
            write_restore_log_header(path)?;
        }
    }
    let mut rows = Vec::new();
    for epoch in start_epoch..opts.epochs {
        let lr = lr_for_epoch(opts.lr, epoch, opts.lr_halve_every);
        opt.set_lr(lr);
        for s in 0..steps_per_epoch {
            let step = (epoch * steps_per_epoch + s) as u64;
            let mut rng = seeding::stream_rng(opts.seed, seeding::STREAM_RESTORE_AUG, step);
            let (inputs, truths) =
                sample_restore_batch(pairs, &mut rng, opts.batch_size, opts.patch)?;
            let g = Graph::new();
            let x = g.constant(inputs.into_dyn());
            let t = g.constant(truths.into_dyn());
            let (_, restored) = net.forward_var(&x, true, None);
            let (loss, breakdown) =
                restoration_loss(&restored, &t, extractor.as_ref(), &opts.weights, &opts.loss)?;
            let total = loss.scalar();
            if !total.is_finite() {
                return Err(Error::NonFinite {
                    term: "restoration_loss".into(),
                    step,
                });
            }
            opt.zero_grads();
            g.backward(&loss);
            opt.step();
            let row = RestoreLogRow {
                step,
                epoch,
                lr,
                charbonnier: breakdown["charbonnier"],
                perceptual: breakdown["perceptual"],
                edge: breakdown["edge"],
                total,
            };
            if let Some(path) = &opts.log_path {
                append_restore_log_row(path, &row)?;
            }
            rows.push(row);
        }
        if let Some(path) = &opts.checkpoint_path {
            save_restore_checkpoint(path, net, &opt, epoch + 1, &opts.config_snapshot)?;
        }
    }
    Ok(rows)
}
