//! Corpus ingestion and paired-dataset construction.
//!
//! A manifest records every usable image of a corpus with an optional depth
//! map, a source tag, and a train/val split. From an RGB-D manifest the
//! generator synthesizes underwater images, re-renders each one under `k`
//! styles sampled from a real-underwater manifest, and writes
//! `adapted/`, `truth/`, and a `pairs.csv` provenance index. Ground-truth
//! files are byte-for-byte copies of the clean sources; only the adapted
//! images pass through the network.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::seq::SliceRandom;
use uwr_autodiff::par;

use crate::error::{Error, Result};
use crate::formation::{synthesize_underwater, SceneSample, WaterParams};
use crate::imageio;
use crate::seeding;
use crate::translation::{Domain, TranslationBundle};

/// Train/validation membership of a manifest entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }

    fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::Config(format!("unknown split tag {other:?}"))),
        }
    }
}

/// One corpus image, its optional depth map, and its provenance tags.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub depth: Option<PathBuf>,
    pub source: String,
    pub split: Split,
}

/// A validated, deterministically ordered corpus listing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusManifest {
    pub entries: Vec<ManifestEntry>,
    pub seed: u64,
}

impl CorpusManifest {
    /// Entries belonging to one split.
    pub fn split_entries(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    /// Line-delimited serialization: a header with the seed, then one
    /// tab-separated record per entry (image, depth or `-`, source, split).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = format!("#corpus-manifest v1 seed={}\n", self.seed);
        for e in &self.entries {
            let depth = e
                .depth
                .as_ref()
                .map_or("-".to_string(), |d| d.to_string_lossy().into_owned());
            text.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                e.image.to_string_lossy(),
                depth,
                e.source,
                e.split.as_str()
            ));
        }
        std::fs::write(path, text).map_err(Error::io(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<CorpusManifest> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Config(format!("{}: empty manifest", path.display())))?;
        let seed = header
            .strip_prefix("#corpus-manifest v1 seed=")
            .and_then(|s| s.parse::<u64>().ok())
            .ok_or_else(|| Error::Config(format!("{}: bad manifest header", path.display())))?;
        let mut entries = Vec::new();
        for (ln, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(Error::Config(format!(
                    "{}: line {} has {} fields, expected 4",
                    path.display(),
                    ln + 2,
                    fields.len()
                )));
            }
            entries.push(ManifestEntry {
                image: PathBuf::from(fields[0]),
                depth: (fields[1] != "-").then(|| PathBuf::from(fields[1])),
                source: fields[2].to_string(),
                split: Split::parse(fields[3])?,
            });
        }
        Ok(CorpusManifest { entries, seed })
    }
}

/// Files rejected while building a manifest.
#[derive(Clone, Debug, Default)]
pub struct BuildReport {
    pub skipped: Vec<(PathBuf, String)>,
}

impl BuildReport {
    pub fn skip_count(&self) -> usize {
        self.skipped.len()
    }
}

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

fn is_image_file(path: &Path) -> bool {
    let ext = path
        .extension()
        .map(|e| e.to_string_lossy().to_ascii_lowercase());
    let Some(ext) = ext else { return false };
    if !IMAGE_EXTENSIONS.contains(&ext.as_str()) {
        return false;
    }
    // Depth maps stored next to their image are not corpus images.
    !path
        .file_stem()
        .is_some_and(|s| s.to_string_lossy().ends_with("_depth"))
}

fn depth_candidate(image: &Path) -> Option<PathBuf> {
    let stem = image.file_stem()?.to_string_lossy().into_owned();
    let dir = image.parent()?;
    let uwd = dir.join(format!("{stem}.uwd"));
    if uwd.is_file() {
        return Some(uwd);
    }
    let png16 = dir.join(format!("{stem}_depth.png"));
    png16.is_file().then_some(png16)
}

fn collect_images(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut names: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(Error::io(dir))?
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(Error::io(dir))?
        .into_iter()
        .map(|e| e.path())
        .collect();
    names.sort();
    for path in names {
        if path.is_dir() {
            collect_images(&path, out)?;
        } else if is_image_file(&path) {
            out.push(path);
        }
    }
    Ok(())
}

/// Scan directories for decodable images, pair them with sibling depth maps
/// (`<stem>.uwd` or `<stem>_depth.png`), order lexicographically, shuffle
/// with the seed, and carve off the trailing `val_fraction` as validation.
/// Unreadable files are skipped and reported, an empty result is an error.
pub fn build_manifest(
    roots: &[PathBuf],
    seed: u64,
    val_fraction: f64,
) -> Result<(CorpusManifest, BuildReport)> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Config("val_fraction must lie in [0, 1)".into()));
    }
    let mut report = BuildReport::default();
    let mut candidates: Vec<(PathBuf, String)> = Vec::new();
    for root in roots {
        let source = root
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| root.to_string_lossy().into_owned());
        let mut files = Vec::new();
        collect_images(root, &mut files)?;
        candidates.extend(files.into_iter().map(|f| (f, source.clone())));
    }
    candidates.sort();

    let mut entries = Vec::new();
    for (image, source) in candidates {
        if let Err(e) = imageio::read_rgb(&image) {
            report.skipped.push((image, e.to_string()));
            continue;
        }
        let depth = depth_candidate(&image);
        if let Some(d) = &depth {
            if let Err(e) = imageio::read_depth(d) {
                report.skipped.push((image, e.to_string()));
                continue;
            }
        }
        entries.push(ManifestEntry {
            image,
            depth,
            source,
            split: Split::Train,
        });
    }
    if entries.is_empty() {
        return Err(Error::Domain(
            "no readable images found under the given roots".into(),
        ));
    }
    let mut rng = seeding::stream_rng(seed, seeding::STREAM_MANIFEST_SHUFFLE, 0);
    entries.shuffle(&mut rng);
    let n_val = (entries.len() as f64 * val_fraction).round() as usize;
    let n_train = entries.len() - n_val;
    for e in entries.iter_mut().skip(n_train) {
        e.split = Split::Val;
    }
    Ok((CorpusManifest { entries, seed }, report))
}

/// One synthetic underwater image still paired with its clean source.
#[derive(Clone, Debug)]
pub struct SyntheticItem {
    /// Index of the clean source in the RGB-D manifest.
    pub entry_index: usize,
    pub clean_path: PathBuf,
    /// File stem of the clean source.
    pub source_id: String,
    pub water_type: String,
    pub clean: Array3<f64>,
    pub synthetic: Array3<f64>,
}

/// Successful items plus per-entry failures (e.g. missing depth maps).
#[derive(Debug, Default)]
pub struct SyntheticReport {
    pub items: Vec<SyntheticItem>,
    pub failures: Vec<(PathBuf, String)>,
}

/// Settings for synthetic-set generation.
#[derive(Clone, Debug)]
pub struct SynthesisOptions {
    /// `false`: one water type per source, assigned round-robin (seeded
    /// starting offset), keeping the output count equal to the input count.
    /// `true`: full source × water-type product.
    pub cartesian: bool,
    /// Per-item ambient-light jitter amplitude (0 disables).
    pub ambient_jitter: f64,
    pub seed: u64,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        SynthesisOptions {
            cartesian: false,
            ambient_jitter: 0.0,
            seed: 0,
        }
    }
}

/// Deterministic (entry, water type) pairing for a corpus of `n` entries.
pub fn assign_water_types(
    n: usize,
    n_types: usize,
    cartesian: bool,
    seed: u64,
) -> Vec<(usize, usize)> {
    if cartesian {
        (0..n).flat_map(|i| (0..n_types).map(move |t| (i, t))).collect()
    } else {
        let mut rng = seeding::stream_rng(seed, seeding::STREAM_WATER_ASSIGN, 0);
        let offset = rand::Rng::gen_range(&mut rng, 0..n_types);
        (0..n).map(|i| (i, (offset + i) % n_types)).collect()
    }
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "sample".into())
}

/// Degrade every manifest entry under its assigned water type. Entries
/// without a readable depth map become per-entry failures in the report
/// rather than aborting the run.
pub fn generate_synthetic_set(
    manifest: &CorpusManifest,
    types: &[WaterParams],
    opts: &SynthesisOptions,
) -> Result<SyntheticReport> {
    if manifest.entries.is_empty() {
        return Err(Error::Domain("RGB-D manifest is empty".into()));
    }
    if types.is_empty() {
        return Err(Error::Domain("no water types given".into()));
    }
    let specs = assign_water_types(manifest.entries.len(), types.len(), opts.cartesian, opts.seed);
    let results = par::map_indexed(specs.len(), |i| -> std::result::Result<SyntheticItem, (PathBuf, String)> {
        let (entry_index, type_index) = specs[i];
        let entry = &manifest.entries[entry_index];
        let fail = |msg: String| (entry.image.clone(), msg);
        let depth_path = entry
            .depth
            .as_ref()
            .ok_or_else(|| fail("entry has no depth map".into()))?;
        let clean = imageio::read_rgb(&entry.image).map_err(|e| fail(e.to_string()))?;
        let depth = imageio::read_depth(depth_path).map_err(|e| fail(e.to_string()))?;
        let sample = SceneSample::new(clean, depth).map_err(|e| fail(e.to_string()))?;
        let mut params = types[type_index].clone();
        if opts.ambient_jitter > 0.0 {
            let mut rng = seeding::stream_rng(opts.seed, seeding::STREAM_AMBIENT_JITTER, i as u64);
            params = params.jitter_ambient(&mut rng, opts.ambient_jitter);
        }
        let synthetic = synthesize_underwater(&sample, &params).map_err(|e| fail(e.to_string()))?;
        Ok(SyntheticItem {
            entry_index,
            clean_path: entry.image.clone(),
            source_id: file_stem(&entry.image),
            water_type: params.label.clone(),
            clean: sample.clean,
            synthetic,
        })
    });
    let mut report = SyntheticReport::default();
    for r in results {
        match r {
            Ok(item) => report.items.push(item),
            Err(f) => report.failures.push(f),
        }
    }
    Ok(report)
}

/// Provenance of one adapted/truth pair; paths are relative to the output
/// root.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AdaptedPairRecord {
    pub adapted_path: PathBuf,
    pub truth_path: PathBuf,
    pub source_id: String,
    pub water_type: String,
    pub style_id: String,
    pub seed: u64,
}

/// Settings for adapted-dataset generation.
#[derive(Clone, Debug)]
pub struct AdaptOptions {
    /// Styles sampled per synthetic image.
    pub k: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
}

/// Round an image down to encoder-compatible dimensions (multiples of four,
/// at least the architecture's minimum edge), resizing only when needed.
fn style_ready(bundle: &TranslationBundle, img: Array3<f64>) -> Array3<f64> {
    let (_, h, w) = img.dim();
    let min = bundle.cfg.min_edge();
    let fit = |n: usize| (n - n % 4).max(min);
    let (th, tw) = (fit(h), fit(w));
    if (th, tw) == (h, w) {
        img
    } else {
        imageio::resize_bilinear(&img, th, tw)
    }
}

fn pairs_csv_text(records: &[AdaptedPairRecord]) -> String {
    let mut text = String::from("adapted_path,truth_path,source_id,water_type,style_id,seed\n");
    for r in records {
        text.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.adapted_path.to_string_lossy(),
            r.truth_path.to_string_lossy(),
            r.source_id,
            r.water_type,
            r.style_id,
            r.seed
        ));
    }
    text
}

/// Re-render every synthetic image under `k` real styles and write the
/// paired dataset (`adapted/`, `truth/`, `pairs.csv`) under
/// `opts.out_dir`. Truth files are byte-identical copies of the clean
/// sources. Style choice is keyed by `(seed, item index)` alone, so
/// parallel and serial runs produce the same bytes.
pub fn generate_adapted_dataset(
    bundle: &TranslationBundle,
    synthetic: &[SyntheticItem],
    real: &CorpusManifest,
    opts: &AdaptOptions,
) -> Result<Vec<AdaptedPairRecord>> {
    if opts.k == 0 {
        return Err(Error::Config("styles per image (k) must be >= 1".into()));
    }
    if synthetic.is_empty() {
        return Err(Error::Domain("no synthetic images to adapt".into()));
    }
    if real.entries.len() < opts.k {
        return Err(Error::Domain(format!(
            "real corpus has {} images but {} styles per image were requested",
            real.entries.len(),
            opts.k
        )));
    }
    let adapted_dir = opts.out_dir.join("adapted");
    let truth_dir = opts.out_dir.join("truth");
    std::fs::create_dir_all(&adapted_dir).map_err(Error::io(&adapted_dir))?;
    std::fs::create_dir_all(&truth_dir).map_err(Error::io(&truth_dir))?;

    // Copy each distinct clean source once, before the parallel phase, so
    // concurrent items never write the same truth file.
    let mut truth_names: Vec<PathBuf> = Vec::with_capacity(synthetic.len());
    let mut copied: BTreeSet<usize> = BTreeSet::new();
    for item in synthetic {
        let ext = item
            .clean_path
            .extension()
            .map(|e| e.to_string_lossy().into_owned())
            .unwrap_or_else(|| "png".into());
        let name = PathBuf::from("truth").join(format!(
            "{:05}_{}.{ext}",
            item.entry_index, item.source_id
        ));
        if copied.insert(item.entry_index) {
            let dst = opts.out_dir.join(&name);
            std::fs::copy(&item.clean_path, &dst).map_err(Error::io(&dst))?;
        }
        truth_names.push(name);
    }

    let per_item = par::map_indexed(synthetic.len(), |i| -> Result<Vec<AdaptedPairRecord>> {
        let item = &synthetic[i];
        let mut rng = seeding::stream_rng(opts.seed, seeding::STREAM_STYLE_ASSIGN, i as u64);
        let picks = rand::seq::index::sample(&mut rng, real.entries.len(), opts.k).into_vec();
        let mut records = Vec::with_capacity(opts.k);
        for (j, real_index) in picks.into_iter().enumerate() {
            let real_entry = &real.entries[real_index];
            let style_img = style_ready(bundle, imageio::read_rgb(&real_entry.image)?);
            let style = bundle.encode(&style_img, Domain::Real)?.style;
            let adapted = bundle.translate_with_style(&item.synthetic, Domain::Synthetic, &style)?;
            let name = PathBuf::from("adapted").join(format!("{i:05}_{j:02}.png"));
            imageio::write_rgb(opts.out_dir.join(&name), &adapted)?;
            records.push(AdaptedPairRecord {
                adapted_path: name,
                truth_path: truth_names[i].clone(),
                source_id: item.source_id.clone(),
                water_type: item.water_type.clone(),
                style_id: format!("r{real_index:05}-{}", file_stem(&real_entry.image)),
                seed: opts.seed,
            });
        }
        Ok(records)
    });

    let mut records = Vec::with_capacity(synthetic.len() * opts.k);
    for r in per_item {
        records.extend(r?);
    }
    let csv_path = opts.out_dir.join("pairs.csv");
    std::fs::write(&csv_path, pairs_csv_text(&records)).map_err(Error::io(&csv_path))?;
    Ok(records)
}

/// Read a `pairs.csv` back into records (paths stay relative to the file's
/// directory).
pub fn load_pairs_csv(path: impl AsRef<Path>) -> Result<Vec<AdaptedPairRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != "adapted_path,truth_path,source_id,water_type,style_id,seed" {
        return Err(Error::Config(format!("{}: unexpected header", path.display())));
    }
    let mut records = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(Error::Config(format!(
                "{}: line {} has {} fields, expected 6",
                path.display(),
                ln + 2,
                f.len()
            )));
        }
        records.push(AdaptedPairRecord {
            adapted_path: PathBuf::from(f[0]),
            truth_path: PathBuf::from(f[1]),
            source_id: f[2].to_string(),
            water_type: f[3].to_string(),
            style_id: f[4].to_string(),
            seed: f[5]
                .parse()
                .map_err(|_| Error::Config(format!("{}: bad seed on line {}", path.display(), ln + 2)))?,
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formation::builtin_water_types;
    use crate::translation::TranslationConfig;
    use ndarray::Array2;
    use rand::{Rng as _, SeedableRng};

    fn toy_rgb(seed: u64, h: usize, w: usize) -> Array3<f64> {
        let mut rng = uwr_autodiff::Rng::seed_from_u64(seed);
        Array3::from_shape_fn((3, h, w), |_| rng.gen_range(0.0..1.0))
    }

    fn write_corpus(dir: &Path, n: usize, size: usize, with_depth: bool) -> Vec<PathBuf> {
        std::fs::create_dir_all(dir).unwrap();
        (0..n)
            .map(|i| {
                let img = toy_rgb(1000 + i as u64, size, size);
                let path = dir.join(format!("img{i:02}.png"));
                imageio::write_rgb(&path, &img).unwrap();
                if with_depth {
                    let depth = Array2::from_shape_fn((size, size), |(r, c)| {
                        0.5 + (r + c) as f64 * 0.05
                    });
                    imageio::write_depth_uwd(dir.join(format!("img{i:02}.uwd")), &depth).unwrap();
                }
                path
            })
            .collect()
    }

    fn toy_bundle(seed: u64) -> TranslationBundle {
        let cfg = TranslationConfig {
            base_width: 4,
            res_blocks: 1,
            style_dim: 8,
            mlp_width: 16,
            disc_scales: 2,
            disc_base_width: 4,
            ..TranslationConfig::default()
        };
        TranslationBundle::new(cfg, seed).unwrap()
    }

    #[test]
    fn manifest_skips_unreadable_files_and_reports_them() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), 4, 16, false);
        std::fs::write(dir.path().join("broken1.png"), b"not a png").unwrap();
        std::fs::write(dir.path().join("broken2.jpg"), b"junk").unwrap();
        let (manifest, report) =
            build_manifest(&[dir.path().to_path_buf()], 3, 0.0).unwrap();
        assert_eq!(manifest.entries.len(), 4);
        assert_eq!(report.skip_count(), 2);
    }

    #[test]
    fn manifest_is_deterministic_and_splits_partition() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), 8, 16, false);
        let (a, _) = build_manifest(&[dir.path().to_path_buf()], 5, 0.25).unwrap();
        let (b, _) = build_manifest(&[dir.path().to_path_buf()], 5, 0.25).unwrap();
        assert_eq!(a, b);
        let train = a.split_entries(Split::Train);
        let val = a.split_entries(Split::Val);
        assert_eq!(val.len(), 2);
        assert_eq!(train.len() + val.len(), a.entries.len());
        let all: BTreeSet<&PathBuf> = a.entries.iter().map(|e| &e.image).collect();
        let joined: BTreeSet<&PathBuf> =
            train.iter().chain(val.iter()).map(|e| &e.image).collect();
        assert_eq!(all, joined);
        // A different seed rearranges the same file set.
        let (c, _) = build_manifest(&[dir.path().to_path_buf()], 6, 0.25).unwrap();
        let order_a: Vec<&PathBuf> = a.entries.iter().map(|e| &e.image).collect();
        let order_c: Vec<&PathBuf> = c.entries.iter().map(|e| &e.image).collect();
        assert_ne!(order_a, order_c);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("empty")).unwrap();
        assert!(build_manifest(&[dir.path().join("empty")], 0, 0.0).is_err());
    }

    #[test]
    fn depth_maps_are_paired_and_not_listed_as_images() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), 2, 16, true);
        // A png16 depth sibling for a third image.
        let img = toy_rgb(7, 16, 16);
        imageio::write_rgb(dir.path().join("scene.png"), &img).unwrap();
        let depth = Array2::from_elem((16, 16), 1.25);
        imageio::write_depth_png16(dir.path().join("scene_depth.png"), &depth).unwrap();
        let (manifest, report) = build_manifest(&[dir.path().to_path_buf()], 0, 0.0).unwrap();
        assert_eq!(manifest.entries.len(), 3);
        assert_eq!(report.skip_count(), 0);
        assert!(manifest.entries.iter().all(|e| e.depth.is_some()));
    }

    #[test]
    fn manifest_roundtrips_through_its_file_format() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), 3, 16, true);
        let (manifest, _) = build_manifest(&[dir.path().to_path_buf()], 9, 0.34).unwrap();
        let path = dir.path().join("corpus.manifest");
        manifest.save(&path).unwrap();
        let loaded = CorpusManifest::load(&path).unwrap();
        assert_eq!(manifest, loaded);
    }

    #[test]
    fn water_assignment_is_balanced_round_robin_or_full_product() {
        let rr = assign_water_types(4, 2, false, 11);
        assert_eq!(rr.len(), 4);
        let of_type = |t: usize| rr.iter().filter(|(_, ty)| *ty == t).count();
        assert_eq!(of_type(0), 2);
        assert_eq!(of_type(1), 2);
        assert_eq!(rr, assign_water_types(4, 2, false, 11));
        let cart = assign_water_types(3, 2, true, 11);
        assert_eq!(cart.len(), 6);
        let unique: BTreeSet<_> = cart.iter().collect();
        assert_eq!(unique.len(), 6);
    }

    #[test]
    fn synthetic_set_counts_and_failure_reporting() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), 3, 16, true);
        // One extra image without any depth sibling.
        imageio::write_rgb(dir.path().join("nodepth.png"), &toy_rgb(8, 16, 16)).unwrap();
        let (manifest, _) = build_manifest(&[dir.path().to_path_buf()], 2, 0.0).unwrap();
        let types = builtin_water_types();
        let report =
            generate_synthetic_set(&manifest, &types, &SynthesisOptions::default()).unwrap();
        assert_eq!(report.items.len(), 3);
        assert_eq!(report.failures.len(), 1);
        assert!(report.failures[0].1.contains("depth"));
        let cart = generate_synthetic_set(
            &manifest,
            &types,
            &SynthesisOptions {
                cartesian: true,
                ..SynthesisOptions::default()
            },
        )
        .unwrap();
        assert_eq!(cart.items.len(), 6);
        assert_eq!(cart.failures.len(), 2);
    }

    #[test]
    fn zero_depth_scene_synthesizes_to_its_clean_source() {
        let dir = tempfile::tempdir().unwrap();
        let img = toy_rgb(21, 16, 16);
        imageio::write_rgb(dir.path().join("flat.png"), &img).unwrap();
        imageio::write_depth_uwd(dir.path().join("flat.uwd"), &Array2::zeros((16, 16))).unwrap();
        let (manifest, _) = build_manifest(&[dir.path().to_path_buf()], 0, 0.0).unwrap();
        let report =
            generate_synthetic_set(&manifest, &builtin_water_types(), &SynthesisOptions::default())
                .unwrap();
        let item = &report.items[0];
        // The PNG round-trip quantizes, so compare against the decoded clean.
        assert_eq!(item.synthetic, item.clean);
    }

    #[test]
    fn adapted_dataset_counts_truth_integrity_and_style_diversity() {
        let rgbd = tempfile::tempdir().unwrap();
        write_corpus(rgbd.path(), 2, 32, true);
        let real_dir = tempfile::tempdir().unwrap();
        write_corpus(real_dir.path(), 3, 32, false);
        let out = tempfile::tempdir().unwrap();

        let (rgbd_manifest, _) = build_manifest(&[rgbd.path().to_path_buf()], 1, 0.0).unwrap();
        let (real_manifest, _) = build_manifest(&[real_dir.path().to_path_buf()], 1, 0.0).unwrap();
        let synthetic = generate_synthetic_set(
            &rgbd_manifest,
            &builtin_water_types(),
            &SynthesisOptions::default(),
        )
        .unwrap()
        .items;
        let bundle = toy_bundle(42);
        let opts = AdaptOptions {
            k: 2,
            seed: 13,
            out_dir: out.path().to_path_buf(),
        };
        let records = generate_adapted_dataset(&bundle, &synthetic, &real_manifest, &opts).unwrap();
        assert_eq!(records.len(), synthetic.len() * 2);

        // Truth files are byte copies of the clean sources.
        for (record, item) in records.iter().step_by(2).zip(synthetic.iter()) {
            let written = std::fs::read(out.path().join(&record.truth_path)).unwrap();
            let original = std::fs::read(&item.clean_path).unwrap();
            assert_eq!(written, original);
        }

        // The k adapted renderings of one content differ pairwise.
        for i in 0..synthetic.len() {
            let a = imageio::read_rgb(out.path().join(&records[2 * i].adapted_path)).unwrap();
            let b = imageio::read_rgb(out.path().join(&records[2 * i + 1].adapted_path)).unwrap();
            let gap = (&a - &b).mapv(f64::abs).mean().unwrap();
            assert!(gap > 0.0, "item {i} produced identical styles");
            assert_eq!(a.dim(), synthetic[i].clean.dim());
        }

        // pairs.csv round-trips.
        let loaded = load_pairs_csv(out.path().join("pairs.csv")).unwrap();
        assert_eq!(loaded, records);

        // Style ids resolve back to manifest entries.
        for r in &records {
            let idx: usize = r.style_id[1..6].parse().unwrap();
            assert!(idx < real_manifest.entries.len());
        }
    }

    #[test]
    fn adapted_dataset_is_reproducible_and_guards_small_corpora() {
        let rgbd = tempfile::tempdir().unwrap();
        write_corpus(rgbd.path(), 1, 32, true);
        let real_dir = tempfile::tempdir().unwrap();
        write_corpus(real_dir.path(), 2, 32, false);

        let (rgbd_manifest, _) = build_manifest(&[rgbd.path().to_path_buf()], 1, 0.0).unwrap();
        let (real_manifest, _) = build_manifest(&[real_dir.path().to_path_buf()], 1, 0.0).unwrap();
        let synthetic = generate_synthetic_set(
            &rgbd_manifest,
            &builtin_water_types(),
            &SynthesisOptions::default(),
        )
        .unwrap()
        .items;
        let bundle = toy_bundle(77);

        let run = |dir: &Path| {
            let opts = AdaptOptions {
                k: 2,
                seed: 99,
                out_dir: dir.to_path_buf(),
            };
            generate_adapted_dataset(&bundle, &synthetic, &real_manifest, &opts).unwrap();
            (
                std::fs::read(dir.join("pairs.csv")).unwrap(),
                std::fs::read(dir.join("adapted/00000_00.png")).unwrap(),
            )
        };
        let out_a = tempfile::tempdir().unwrap();
        let out_b = tempfile::tempdir().unwrap();
        assert_eq!(run(out_a.path()), run(out_b.path()));

        let opts = AdaptOptions {
            k: 3,
            seed: 99,
            out_dir: out_a.path().to_path_buf(),
        };
        let err = generate_adapted_dataset(&bundle, &synthetic, &real_manifest, &opts);
        assert!(err.is_err(), "k larger than the real corpus must fail");
    }

    #[test]
    fn single_style_corpus_forces_the_only_style() {
        let rgbd = tempfile::tempdir().unwrap();
        write_corpus(rgbd.path(), 1, 32, true);
        let real_dir = tempfile::tempdir().unwrap();
        write_corpus(real_dir.path(), 1, 32, false);
        let out = tempfile::tempdir().unwrap();

        let (rgbd_manifest, _) = build_manifest(&[rgbd.path().to_path_buf()], 1, 0.0).unwrap();
        let (real_manifest, _) = build_manifest(&[real_dir.path().to_path_buf()], 1, 0.0).unwrap();
        let synthetic = generate_synthetic_set(
            &rgbd_manifest,
            &builtin_water_types(),
            &SynthesisOptions::default(),
        )
        .unwrap()
        .items;
        let bundle = toy_bundle(5);
        let opts = AdaptOptions {
            k: 1,
            seed: 0,
            out_dir: out.path().to_path_buf(),
        };
        let records = generate_adapted_dataset(&bundle, &synthetic, &real_manifest, &opts).unwrap();
        assert_eq!(records.len(), 1);
        assert!(records[0].style_id.starts_with("r00000-"));
    }
}
