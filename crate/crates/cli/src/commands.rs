//! Implementations of the `uwr` subcommands.

use std::path::{Path, PathBuf};

use clap::Args;
use ndarray::Array3;
use uwr_autodiff::Module;
use uwr_core::checkpoint;
use uwr_core::config::RunConfig;
use uwr_core::datasetgen::{
    build_manifest, generate_adapted_dataset, generate_synthetic_set, load_pairs_csv, AdaptOptions,
    SynthesisOptions,
};
use uwr_core::formation::water_types_from;
use uwr_core::imageio;
use uwr_core::quality::{self, EvalOptions, MetricReport, MetricRow};
use uwr_core::restoration::{
    restore as run_restorer, train_restorer, RestoreNet, RestorationPair, RestoreTrainOptions,
    RestoreVariant,
};
use uwr_core::translation::{
    train_da as run_train_da, DaAblation, DaTrainOptions, Domain, TranslationBundle,
    TranslationConfig,
};
use uwr_core::{Error, Result};

use crate::grid::{emit_grid, GridColumn};

/// Config file and seed handling shared by all subcommands.
#[derive(Args, Clone, Debug)]
pub struct ConfigArgs {
    /// Experiment config (TOML); built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override the config's master seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

const IMAGE_EXTS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

/// Sorted image files directly inside `dir`.
fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(Error::io(dir))? {
        let entry = entry.map_err(Error::io(dir))?;
        let path = entry.path();
        if !path.is_file() {
            continue;
        }
        let ext = path
            .extension()
            .map(|e| e.to_string_lossy().to_ascii_lowercase())
            .unwrap_or_default();
        if IMAGE_EXTS.contains(&ext.as_str()) {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(Error::Domain(format!("no images found in {}", dir.display())));
    }
    Ok(files)
}

/// Read every image in `dir`, resized to a `size` x `size` square.
fn load_images_square(dir: &Path, size: usize) -> Result<Vec<Array3<f64>>> {
    list_images(dir)?
        .iter()
        .map(|p| {
            let img = imageio::read_rgb(p)?;
            let (_, h, w) = img.dim();
            Ok(if (h, w) == (size, size) {
                img
            } else {
                imageio::resize_bilinear(&img, size, size)
            })
        })
        .collect()
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(Error::io(dir))
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into())
}

fn print_warnings<'a>(items: impl IntoIterator<Item = (&'a PathBuf, &'a String)>) {
    for (path, why) in items {
        eprintln!("warning: {}: {why}", path.display());
    }
}

// ---------------------------------------------------------------- synthesize

#[derive(Args, Debug)]
pub struct SynthesizeArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Directories of clean RGB images with sibling depth maps.
    #[arg(long, required = true, num_args = 1..)]
    pub inputs: Vec<PathBuf>,
    /// Output directory for synthetic images and the corpus manifest.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn synthesize(a: &SynthesizeArgs) -> Result<()> {
    let cfg = a.config.load()?;
    let (manifest, report) = build_manifest(&a.inputs, cfg.seed, cfg.datasetgen.val_fraction)?;
    print_warnings(report.skipped.iter().map(|(p, m)| (p, m)));
    let types = water_types_from(cfg.formation.water_types_file.as_deref())?;
    let synth = generate_synthetic_set(
        &manifest,
        &types,
        &SynthesisOptions {
            cartesian: cfg.datasetgen.cartesian,
            ambient_jitter: cfg.formation.ambient_jitter,
            seed: cfg.seed,
        },
    )?;
    print_warnings(synth.failures.iter().map(|(p, m)| (p, m)));
    if synth.items.is_empty() {
        return Err(Error::Domain(
            "no synthetic images could be generated (do the inputs have depth maps?)".into(),
        ));
    }
    ensure_dir(&a.out)?;
    manifest.save(a.out.join("manifest.tsv"))?;
    for item in &synth.items {
        let name = format!("{:05}_{}_{}.png", item.entry_index, item.source_id, item.water_type);
        imageio::write_rgb(a.out.join(name), &item.synthetic)?;
    }
    println!(
        "synthesize: wrote {} synthetic images to {} ({} skipped, {} failed)",
        synth.items.len(),
        a.out.display(),
        report.skipped.len(),
        synth.failures.len()
    );
    Ok(())
}

// ------------------------------------------------------------------ train-da

#[derive(Args, Debug)]
pub struct TrainDaArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Directory of synthetic-domain training images.
    #[arg(long)]
    pub synthetic: PathBuf,
    /// Directory of real-domain training images.
    #[arg(long)]
    pub real: PathBuf,
    /// Output directory (checkpoint and training log).
    #[arg(long)]
    pub out: PathBuf,
    /// Override the configured number of optimizer steps.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Override the configured batch size.
    #[arg(long)]
    pub batch: Option<usize>,
    /// Training resolution; images are resized to this square.
    #[arg(long, default_value_t = 256)]
    pub size: usize,
    /// Steps between checkpoint rewrites.
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Resume from an existing adaptation checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

pub fn train_da(a: &TrainDaArgs) -> Result<()> {
    let mut cfg = a.config.load()?;
    if let Some(steps) = a.steps {
        cfg.translation.steps = steps;
    }
    if let Some(batch) = a.batch {
        cfg.translation.batch_size = batch;
    }
    if a.size % TranslationConfig::DOWNSAMPLE != 0 || a.size < cfg.translation.min_edge() {
        return Err(Error::Config(format!(
            "--size {} must be a multiple of {} and at least {}",
            a.size,
            TranslationConfig::DOWNSAMPLE,
            cfg.translation.min_edge()
        )));
    }
    let synthetic = load_images_square(&a.synthetic, a.size)?;
    let real = load_images_square(&a.real, a.size)?;
    let bundle = TranslationBundle::new(cfg.translation.clone(), cfg.seed)?;
    ensure_dir(&a.out)?;
    let checkpoint_path = a.out.join("da.trb");
    let opts = DaTrainOptions {
        steps: cfg.translation.steps,
        batch_size: cfg.translation.batch_size,
        seed: cfg.seed,
        loss: cfg.losses.loss_config(),
        quality: cfg.quality.clone(),
        log_path: Some(a.out.join("train_da.csv")),
        checkpoint_path: Some(checkpoint_path.clone()),
        checkpoint_every: a.checkpoint_every.unwrap_or(1000),
        config_snapshot: cfg.to_toml_string()?,
        resume: a.resume.clone(),
    };
    let rows = run_train_da(&bundle, &synthetic, &real, &opts)?;
    match rows.last() {
        Some(last) => println!(
            "train-da: {} steps done; generator loss {:.4}, discriminator loss {:.4}; checkpoint {}",
            cfg.translation.steps,
            last.result.generator_loss,
            last.result.discriminator_loss,
            checkpoint_path.display()
        ),
        None => println!(
            "train-da: checkpoint already at {} steps; nothing to do",
            cfg.translation.steps
        ),
    }
    Ok(())
}

// --------------------------------------------------------------- gen-dataset

#[derive(Args, Debug)]
pub struct GenDatasetArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Directories of clean RGB images with sibling depth maps.
    #[arg(long, required = true, num_args = 1..)]
    pub inputs: Vec<PathBuf>,
    /// Directory of real underwater images used as style sources.
    #[arg(long)]
    pub real: PathBuf,
    /// Trained adaptation checkpoint (.trb).
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output directory (adapted/, truth/, pairs.csv).
    #[arg(long)]
    pub out: PathBuf,
    /// Override the configured styles per synthetic image.
    #[arg(long)]
    pub k: Option<usize>,
}

/// Rebuild the adaptation model a checkpoint was trained with. The archive's
/// own config snapshot wins so the architecture always matches the weights;
/// `fallback` covers archives saved without one.
fn load_da_bundle(path: &Path, fallback: &TranslationConfig) -> Result<(TranslationBundle, u64)> {
    let ckpt = checkpoint::load(path, checkpoint::TRANSLATION_MAGIC)?;
    let translation = if ckpt.config.trim().is_empty() {
        fallback.clone()
    } else {
        RunConfig::from_toml_str(&ckpt.config)?.translation
    };
    let bundle = TranslationBundle::new(translation, 0)?;
    ckpt.load_into_params(&bundle.all_params())?;
    Ok((bundle, ckpt.step))
}

pub fn gen_dataset(a: &GenDatasetArgs) -> Result<()> {
    let mut cfg = a.config.load()?;
    if let Some(k) = a.k {
        cfg.datasetgen.k = k;
    }
    let (bundle, trained_steps) = load_da_bundle(&a.checkpoint, &cfg.translation)?;
    if trained_steps < cfg.datasetgen.min_da_step {
        return Err(Error::Config(format!(
            "checkpoint {} has trained {} steps but datasetgen.min_da_step requires {}",
            a.checkpoint.display(),
            trained_steps,
            cfg.datasetgen.min_da_step
        )));
    }
    let (clean, report) = build_manifest(&a.inputs, cfg.seed, cfg.datasetgen.val_fraction)?;
    print_warnings(report.skipped.iter().map(|(p, m)| (p, m)));
    let types = water_types_from(cfg.formation.water_types_file.as_deref())?;
    let synth = generate_synthetic_set(
        &clean,
        &types,
        &SynthesisOptions {
            cartesian: cfg.datasetgen.cartesian,
            ambient_jitter: cfg.formation.ambient_jitter,
            seed: cfg.seed,
        },
    )?;
    print_warnings(synth.failures.iter().map(|(p, m)| (p, m)));
    if synth.items.is_empty() {
        return Err(Error::Domain(
            "no synthetic images could be generated (do the inputs have depth maps?)".into(),
        ));
    }
    let (real_manifest, real_report) = build_manifest(&[a.real.clone()], cfg.seed, 0.0)?;
    print_warnings(real_report.skipped.iter().map(|(p, m)| (p, m)));
    ensure_dir(&a.out)?;
    let records = generate_adapted_dataset(
        &bundle,
        &synth.items,
        &real_manifest,
        &AdaptOptions {
            k: cfg.datasetgen.k,
            seed: cfg.seed,
            out_dir: a.out.clone(),
        },
    )?;
    println!(
        "gen-dataset: wrote {} pairs ({} synthetic x k={}) under {}",
        records.len(),
        synth.items.len(),
        cfg.datasetgen.k,
        a.out.display()
    );
    Ok(())
}

// ------------------------------------------------------------- train-restore

#[derive(Args, Debug)]
pub struct TrainRestoreArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// pairs.csv produced by gen-dataset (paths resolve next to it).
    #[arg(long)]
    pub pairs: PathBuf,
    /// Output directory (checkpoint and training log).
    #[arg(long)]
    pub out: PathBuf,
    /// Override the configured epoch count.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Override the configured optimizer steps per epoch.
    #[arg(long)]
    pub steps_per_epoch: Option<usize>,
    /// Override the configured batch size.
    #[arg(long)]
    pub batch: Option<usize>,
    /// Override the configured training crop size.
    #[arg(long)]
    pub patch: Option<usize>,
    /// Architecture variant: full, simple-unet, or no-cal.
    #[arg(long)]
    pub variant: Option<String>,
    /// Resume from an existing restoration checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

fn parse_restore_variant(s: &str) -> Result<RestoreVariant> {
    match s.to_ascii_lowercase().replace('_', "-").as_str() {
        "full" => Ok(RestoreVariant::Full),
        "simple-unet" => Ok(RestoreVariant::SimpleUnet),
        "no-cal" => Ok(RestoreVariant::NoCal),
        other => Err(Error::Config(format!(
            "unknown restoration variant {other:?} (expected full, simple-unet, or no-cal)"
        ))),
    }
}

/// Load the (input, truth) image pairs listed in a pairs.csv.
fn load_training_pairs(pairs_csv: &Path) -> Result<Vec<RestorationPair>> {
    let records = load_pairs_csv(pairs_csv)?;
    let base = pairs_csv.parent().unwrap_or_else(|| Path::new("."));
    records
        .iter()
        .map(|r| {
            let input = imageio::read_rgb(base.join(&r.adapted_path))?;
            let truth = imageio::read_rgb(base.join(&r.truth_path))?;
            RestorationPair::new(input, truth)
        })
        .collect()
}

pub fn train_restore(a: &TrainRestoreArgs) -> Result<()> {
    let mut cfg = a.config.load()?;
    if let Some(epochs) = a.epochs {
        cfg.restoration.epochs = epochs;
    }
    if let Some(steps) = a.steps_per_epoch {
        cfg.restoration.steps_per_epoch = Some(steps);
    }
    if let Some(batch) = a.batch {
        cfg.restoration.batch_size = batch;
    }
    if let Some(patch) = a.patch {
        cfg.restoration.patch = patch;
    }
    if let Some(variant) = &a.variant {
        cfg.restoration.net.variant = parse_restore_variant(variant)?;
    }
    cfg.validate()?;
    let pairs = load_training_pairs(&a.pairs)?;
    let net = RestoreNet::new(cfg.restoration.net.clone(), cfg.seed)?;
    ensure_dir(&a.out)?;
    let checkpoint_path = a.out.join("restore.rsn");
    let opts = RestoreTrainOptions {
        epochs: cfg.restoration.epochs,
        steps_per_epoch: cfg.restoration.steps_per_epoch,
        batch_size: cfg.restoration.batch_size,
        patch: cfg.restoration.patch,
        lr: cfg.restoration.lr,
        lr_halve_every: cfg.restoration.lr_halve_every,
        seed: cfg.seed,
        weights: cfg.restoration.weights.clone(),
        loss: cfg.losses.loss_config(),
        perceptual: cfg.losses.perceptual.clone(),
        log_path: Some(a.out.join("train_restore.csv")),
        checkpoint_path: Some(checkpoint_path.clone()),
        config_snapshot: cfg.to_toml_string()?,
        resume: a.resume.clone(),
    };
    let rows = train_restorer(&net, &pairs, &opts)?;
    match rows.last() {
        Some(last) => println!(
            "train-restore: {} epochs done ({} steps); final loss {:.6}; checkpoint {}",
            cfg.restoration.epochs,
            rows.len(),
            last.total,
            checkpoint_path.display()
        ),
        None => println!(
            "train-restore: checkpoint already at {} epochs; nothing to do",
            cfg.restoration.epochs
        ),
    }
    Ok(())
}

// ------------------------------------------------------------------- restore

#[derive(Args, Debug)]
pub struct RestoreArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Trained restoration checkpoint (.rsn).
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory of degraded images to restore.
    #[arg(long)]
    pub inputs: PathBuf,
    /// Output directory for restored PNGs.
    #[arg(long)]
    pub out: PathBuf,
}

/// Rebuild the restorer a checkpoint was trained with (see [`load_da_bundle`]).
fn load_restore_net(path: &Path, fallback: &RunConfig) -> Result<RestoreNet> {
    let ckpt = checkpoint::load(path, checkpoint::RESTORE_MAGIC)?;
    let net_cfg = if ckpt.config.trim().is_empty() {
        fallback.restoration.net.clone()
    } else {
        RunConfig::from_toml_str(&ckpt.config)?.restoration.net
    };
    let net = RestoreNet::new(net_cfg, 0)?;
    ckpt.load_into_params(&net.params())?;
    Ok(net)
}

pub fn restore(a: &RestoreArgs) -> Result<()> {
    let cfg = a.config.load()?;
    let net = load_restore_net(&a.checkpoint, &cfg)?;
    let files = list_images(&a.inputs)?;
    ensure_dir(&a.out)?;
    for file in &files {
        let img = imageio::read_rgb(file)?;
        let (_, restored) = run_restorer(&net, &img)?;
        imageio::write_rgb(a.out.join(format!("{}.png", file_stem(file))), &restored)?;
    }
    println!("restore: wrote {} images to {}", files.len(), a.out.display());
    Ok(())
}

// ------------------------------------------------------------------ evaluate

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Directory of images to score.
    #[arg(long)]
    pub outputs: PathBuf,
    /// Ground-truth directory; filenames are matched against outputs.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Report path.
    #[arg(long, default_value = "report.csv")]
    pub out: PathBuf,
    /// Method name recorded in the report.
    #[arg(long)]
    pub method: Option<String>,
    /// Dataset name recorded in the report.
    #[arg(long)]
    pub dataset: Option<String>,
}

fn format_row(row: &MetricRow) -> String {
    let fmt_opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
    format!(
        "{:<28} {:>10} {:>8} {:>8.4} {:>8.4}",
        row.image_id,
        fmt_opt(row.psnr),
        fmt_opt(row.ssim),
        row.uciqe,
        row.uiqm
    )
}

pub fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let cfg = a.config.load()?;
    let opts = EvalOptions {
        method: a.method.clone().unwrap_or_else(|| "unspecified".into()),
        dataset: a
            .dataset
            .clone()
            .unwrap_or_else(|| file_stem(&a.outputs)),
        config_hash: cfg.hash()?,
        cfg: cfg.quality.clone(),
    };
    let report = quality::evaluate(&a.outputs, a.truth.as_deref(), &opts)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    report.write_csv(&a.out)?;
    println!(
        "{:<28} {:>10} {:>8} {:>8} {:>8}",
        "image", "psnr", "ssim", "uciqe", "uiqm"
    );
    println!("{}", format_row(&report.mean_row()));
    println!("evaluate: report written to {}", a.out.display());
    Ok(())
}

// ---------------------------------------------------------------------- grid

#[derive(Args, Debug)]
pub struct GridArgs {
    /// Output PNG path.
    #[arg(long)]
    pub out: PathBuf,
    /// One method column: "LABEL=path[,path...]"; directories expand to
    /// their images in filename order. Repeatable.
    #[arg(long, required = true)]
    pub column: Vec<String>,
    /// Tile height in pixels.
    #[arg(long, default_value_t = 128)]
    pub tile_height: usize,
    /// Tile width in pixels (defaults to the tile height).
    #[arg(long)]
    pub tile_width: Option<usize>,
}

fn parse_column(spec: &str) -> Result<GridColumn> {
    let (label, rest) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--column {spec:?}: expected LABEL=path[,path...]")))?;
    let mut images = Vec::new();
    for part in rest.split(',').filter(|s| !s.is_empty()) {
        let path = PathBuf::from(part);
        if path.is_dir() {
            images.extend(list_images(&path)?);
        } else {
            images.push(path);
        }
    }
    if images.is_empty() {
        return Err(Error::Config(format!("--column {label:?} lists no images")));
    }
    Ok(GridColumn {
        label: label.to_string(),
        images,
    })
}

pub fn grid(a: &GridArgs) -> Result<()> {
    let columns: Vec<GridColumn> = a.column.iter().map(|s| parse_column(s)).collect::<Result<_>>()?;
    let tile_h = a.tile_height;
    let tile_w = a.tile_width.unwrap_or(tile_h);
    let warnings = emit_grid(&columns, tile_h, tile_w, &a.out)?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    let rows = columns.iter().map(|c| c.images.len()).max().unwrap_or(0);
    println!(
        "grid: wrote {} ({} rows x {} columns)",
        a.out.display(),
        rows,
        columns.len()
    );
    Ok(())
}

// -------------------------------------------------------------------- ablate

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Comma-separated variants: full, simple_unet, no_cal (restoration) and
    /// da-baseline, da-baseline-edge, da-full (adaptation losses).
    #[arg(long)]
    pub variants: String,
    /// pairs.csv for restoration variants.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    /// Synthetic-domain image directory for adaptation-loss variants.
    #[arg(long)]
    pub synthetic: Option<PathBuf>,
    /// Real-domain image directory for adaptation-loss variants.
    #[arg(long)]
    pub real: Option<PathBuf>,
    /// Output directory (checkpoints, per-variant outputs, merged report).
    #[arg(long)]
    pub out: PathBuf,
    /// Override adaptation training steps for da-* variants.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Training resolution for da-* variants.
    #[arg(long, default_value_t = 256)]
    pub size: usize,
}

#[derive(Clone, Copy, Debug)]
enum AblVariant {
    Restore(RestoreVariant),
    Da(DaAblation),
}

impl AblVariant {
    fn parse(s: &str) -> Result<AblVariant> {
        match s
            .to_ascii_lowercase()
            .replace(['_', '+'], "-")
            .as_str()
        {
            "full" => Ok(AblVariant::Restore(RestoreVariant::Full)),
            "simple-unet" => Ok(AblVariant::Restore(RestoreVariant::SimpleUnet)),
            "no-cal" => Ok(AblVariant::Restore(RestoreVariant::NoCal)),
            "da-baseline" => Ok(AblVariant::Da(DaAblation::Baseline)),
            "da-baseline-edge" => Ok(AblVariant::Da(DaAblation::BaselineEdge)),
            "da-full" => Ok(AblVariant::Da(DaAblation::Full)),
            other => Err(Error::Config(format!(
                "unknown ablation variant {other:?} (expected full, simple_unet, no_cal, \
                 da-baseline, da-baseline-edge, or da-full)"
            ))),
        }
    }

    /// Report row label.
    fn label(self) -> &'static str {
        match self {
            AblVariant::Restore(RestoreVariant::Full) => "Ours",
            AblVariant::Restore(RestoreVariant::SimpleUnet) => "Ours(simple U-Net)",
            AblVariant::Restore(RestoreVariant::NoCal) => "Ours(w/o CAL)",
            AblVariant::Da(abl) => abl.label(),
        }
    }

    /// Filename-safe tag.
    fn slug(self) -> &'static str {
        match self {
            AblVariant::Restore(RestoreVariant::Full) => "full",
            AblVariant::Restore(RestoreVariant::SimpleUnet) => "simple_unet",
            AblVariant::Restore(RestoreVariant::NoCal) => "no_cal",
            AblVariant::Da(DaAblation::Baseline) => "da_baseline",
            AblVariant::Da(DaAblation::BaselineEdge) => "da_baseline_edge",
            AblVariant::Da(DaAblation::Full) => "da_full",
        }
    }
}

/// Train one restoration variant and score its outputs against the staged
/// truth directory.
fn ablate_restore_variant(
    cfg: &RunConfig,
    variant: RestoreVariant,
    label: &str,
    slug: &str,
    pairs_csv: &Path,
    pairs: &[RestorationPair],
    truth_dir: &Path,
    out: &Path,
) -> Result<MetricRow> {
    let mut cfg_v = cfg.clone();
    cfg_v.restoration.net.variant = variant;
    let net = RestoreNet::new(cfg_v.restoration.net.clone(), cfg_v.seed)?;
    let opts = RestoreTrainOptions {
        epochs: cfg_v.restoration.epochs,
        steps_per_epoch: cfg_v.restoration.steps_per_epoch,
        batch_size: cfg_v.restoration.batch_size,
        patch: cfg_v.restoration.patch,
        lr: cfg_v.restoration.lr,
        lr_halve_every: cfg_v.restoration.lr_halve_every,
        seed: cfg_v.seed,
        weights: cfg_v.restoration.weights.clone(),
        loss: cfg_v.losses.loss_config(),
        perceptual: cfg_v.losses.perceptual.clone(),
        log_path: Some(out.join(format!("train_restore-{slug}.csv"))),
        checkpoint_path: Some(out.join(format!("restore-{slug}.rsn"))),
        config_snapshot: cfg_v.to_toml_string()?,
        resume: None,
    };
    train_restorer(&net, pairs, &opts)?;

    let records = load_pairs_csv(pairs_csv)?;
    let base = pairs_csv.parent().unwrap_or_else(|| Path::new("."));
    let eval_dir = out.join(format!("eval-{slug}"));
    ensure_dir(&eval_dir)?;
    for r in &records {
        let input = imageio::read_rgb(base.join(&r.adapted_path))?;
        let (_, restored) = run_restorer(&net, &input)?;
        let name = r
            .adapted_path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "image.png".into());
        imageio::write_rgb(eval_dir.join(name), &restored)?;
    }
    let report = quality::evaluate(
        &eval_dir,
        Some(truth_dir),
        &EvalOptions {
            method: label.to_string(),
            dataset: "ablation".into(),
            config_hash: cfg_v.hash()?,
            cfg: cfg_v.quality.clone(),
        },
    )?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    let mut row = report.mean_row();
    row.image_id = label.to_string();
    Ok(row)
}

/// Train one adaptation-loss ablation and score its translations
/// no-reference.
fn ablate_da_variant(
    cfg: &RunConfig,
    ablation: DaAblation,
    label: &str,
    slug: &str,
    synthetic: &[Array3<f64>],
    real: &[Array3<f64>],
    steps: u64,
    out: &Path,
) -> Result<MetricRow> {
    let mut cfg_v = cfg.clone();
    cfg_v.translation.weights = ablation.weights(cfg_v.translation.weights);
    cfg_v.translation.steps = steps;
    let bundle = TranslationBundle::new(cfg_v.translation.clone(), cfg_v.seed)?;
    let opts = DaTrainOptions {
        steps,
        batch_size: cfg_v.translation.batch_size,
        seed: cfg_v.seed,
        loss: cfg_v.losses.loss_config(),
        quality: cfg_v.quality.clone(),
        log_path: Some(out.join(format!("train_da-{slug}.csv"))),
        checkpoint_path: Some(out.join(format!("da-{slug}.trb"))),
        checkpoint_every: 1000,
        config_snapshot: cfg_v.to_toml_string()?,
        resume: None,
    };
    run_train_da(&bundle, synthetic, real, &opts)?;

    let style = bundle.encode(&real[0], Domain::Real)?.style;
    let eval_dir = out.join(format!("eval-{slug}"));
    ensure_dir(&eval_dir)?;
    for (i, img) in synthetic.iter().enumerate() {
        let adapted = bundle.translate_with_style(img, Domain::Synthetic, &style)?;
        imageio::write_rgb(eval_dir.join(format!("{i:05}.png")), &adapted)?;
    }
    let report = quality::evaluate(
        &eval_dir,
        None,
        &EvalOptions {
            method: label.to_string(),
            dataset: "ablation".into(),
            config_hash: cfg_v.hash()?,
            cfg: cfg_v.quality.clone(),
        },
    )?;
    let mut row = report.mean_row();
    row.image_id = label.to_string();
    Ok(row)
}

pub fn ablate(a: &AblateArgs) -> Result<()> {
    let cfg = a.config.load()?;
    let variants: Vec<AblVariant> = a
        .variants
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| AblVariant::parse(s.trim()))
        .collect::<Result<_>>()?;
    if variants.is_empty() {
        return Err(Error::Config("--variants lists no variants".into()));
    }
    ensure_dir(&a.out)?;

    let needs_restore = variants.iter().any(|v| matches!(v, AblVariant::Restore(_)));
    let needs_da = variants.iter().any(|v| matches!(v, AblVariant::Da(_)));

    // Shared fixtures per family.
    let mut restore_fixture: Option<(PathBuf, Vec<RestorationPair>, PathBuf)> = None;
    if needs_restore {
        let pairs_csv = a.pairs.clone().ok_or_else(|| {
            Error::Config("restoration variants need --pairs".into())
        })?;
        let pairs = load_training_pairs(&pairs_csv)?;
        // Stage truth copies named after their adapted counterparts so the
        // evaluator can match files between directories.
        let truth_dir = a.out.join("eval-truth");
        ensure_dir(&truth_dir)?;
        let records = load_pairs_csv(&pairs_csv)?;
        let base = pairs_csv.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
        for r in &records {
            let truth = imageio::read_rgb(base.join(&r.truth_path))?;
            let name = r
                .adapted_path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "image.png".into());
            imageio::write_rgb(truth_dir.join(name), &truth)?;
        }
        restore_fixture = Some((pairs_csv, pairs, truth_dir));
    }
    let mut da_fixture: Option<(Vec<Array3<f64>>, Vec<Array3<f64>>)> = None;
    if needs_da {
        let (syn_dir, real_dir) = match (&a.synthetic, &a.real) {
            (Some(s), Some(r)) => (s, r),
            _ => {
                return Err(Error::Config(
                    "adaptation-loss variants need --synthetic and --real".into(),
                ))
            }
        };
        if a.size % TranslationConfig::DOWNSAMPLE != 0 || a.size < cfg.translation.min_edge() {
            return Err(Error::Config(format!(
                "--size {} must be a multiple of {} and at least {}",
                a.size,
                TranslationConfig::DOWNSAMPLE,
                cfg.translation.min_edge()
            )));
        }
        da_fixture = Some((
            load_images_square(syn_dir, a.size)?,
            load_images_square(real_dir, a.size)?,
        ));
    }

    let mut rows = Vec::new();
    for v in &variants {
        let row = match v {
            AblVariant::Restore(variant) => {
                let (pairs_csv, pairs, truth_dir) =
                    restore_fixture.as_ref().expect("fixture prepared above");
                ablate_restore_variant(
                    &cfg, *variant, v.label(), v.slug(), pairs_csv, pairs, truth_dir, &a.out,
                )?
            }
            AblVariant::Da(ablation) => {
                let (synthetic, real) = da_fixture.as_ref().expect("fixture prepared above");
                let steps = a.steps.unwrap_or(cfg.translation.steps);
                ablate_da_variant(
                    &cfg, *ablation, v.label(), v.slug(), synthetic, real, steps, &a.out,
                )?
            }
        };
        rows.push(row);
    }

    let timestamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs().to_string())
        .unwrap_or_else(|_| "0".into());
    let merged = MetricReport {
        method: "ablation".into(),
        dataset: a.variants.clone(),
        timestamp,
        config_hash: cfg.hash()?,
        with_reference: rows.iter().any(|r| r.psnr.is_some()),
        rows,
        warnings: Vec::new(),
    };
    let report_path = a.out.join("report.csv");
    merged.write_csv(&report_path)?;
    print!("{}", merged.render_table());
    println!("ablate: merged report at {}", report_path.display());
    Ok(())
}
