//! Acceptance gate for the whole artifact. Each check prints one
//! `ACCEPTANCE NN name: PASS` (or `FAIL`) line — run with
//! `cargo test --test acceptance -- --nocapture` to see them all. The final
//! check scores an external image corpus and reports `SKIP` when
//! `UWR_SEATHRU_DIR` is not set.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use ndarray::{Array2, Array3, ArrayD, Axis};
use rand::Rng as _;
use rand::SeedableRng as _;
use uwr_autodiff::{Graph, Rng, Var};
use uwr_core::datasetgen::{
    build_manifest, generate_adapted_dataset, generate_synthetic_set, AdaptOptions,
    SynthesisOptions,
};
use uwr_core::formation::{synthesize_underwater, water_types_from, SceneSample, WaterParams};
use uwr_core::imageio;
use uwr_core::losses::{
    charbonnier, edge_loss, identity_image_loss, latent_recon_loss, ssim_loss, ssim_loss_with,
    LossConfig, PerceptualConfig,
};
use uwr_core::quality::{
    psnr, ssim_with, uciqe_components, uiqm_components, QualityConfig,
};
use uwr_core::restoration::{
    lr_for_epoch, restore, train_restorer, RestoreNet, RestoreNetConfig, RestorationPair,
    RestoreTrainOptions, RestoreVariant,
};
use uwr_core::translation::{
    train_da, DaTrainOptions, Domain, TranslationBundle, TranslationConfig,
};

/// Run `f`, print the gate line, and re-raise any failure so the test still
/// fails normally.
fn criterion(n: u32, name: &str, f: impl FnOnce()) {
    let res = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f));
    println!(
        "ACCEPTANCE {n:02} {name}: {}",
        if res.is_ok() { "PASS" } else { "FAIL" }
    );
    if let Err(e) = res {
        std::panic::resume_unwind(e);
    }
}

/// Smooth low-frequency RGB image, distinct per seed, values in (0, 1).
fn smooth_rgb(seed: usize, h: usize, w: usize) -> Array3<f64> {
    Array3::from_shape_fn((3, h, w), |(c, i, j)| {
        let phase = seed as f64 * 0.7 + c as f64 * 1.3;
        let v = 0.5
            + 0.3 * ((i as f64 / h as f64) * 3.0 + phase).sin()
            + 0.2 * ((j as f64 / w as f64) * 2.0 - phase).cos();
        v.clamp(0.05, 0.95)
    })
}

fn noise_rgb(seed: u64, h: usize, w: usize) -> Array3<f64> {
    let mut rng = Rng::seed_from_u64(seed);
    Array3::from_shape_fn((3, h, w), |_| rng.gen_range(0.0..1.0))
}

// ------------------------------------------------------------- 01 formation

#[test]
fn formation_identities() {
    criterion(1, "formation-identities", || {
        let start = Instant::now();
        let clean = smooth_rgb(3, 64, 64);
        let types = water_types_from(None).unwrap();
        assert!(!types.is_empty());

        // Zero distance: the water column is absent, the image survives.
        let zero_depth = SceneSample::new(clean.clone(), Array2::zeros((64, 64))).unwrap();
        for params in &types {
            let out = synthesize_underwater(&zero_depth, params).unwrap();
            let max_err = (&out - &clean).iter().fold(0.0f64, |m, d| m.max(d.abs()));
            assert!(max_err <= 1e-6, "{}: zero depth changed the image by {max_err}", params.label);
        }

        // Zero attenuation: distance no longer matters.
        let varied_depth = Array2::from_shape_fn((64, 64), |(i, j)| 0.5 + (i + j) as f64 * 0.05);
        let sample = SceneSample::new(clean.clone(), varied_depth).unwrap();
        let clear_water = WaterParams {
            label: "clear".into(),
            beta: [0.0; 3],
            ambient: types[0].ambient,
            depth_scale: 1.0,
        };
        let out = synthesize_underwater(&sample, &clear_water).unwrap();
        let max_err = (&out - &clean).iter().fold(0.0f64, |m, d| m.max(d.abs()));
        assert!(max_err <= 1e-6, "zero attenuation changed the image by {max_err}");

        // Growing distance: every channel converges toward the ambient light.
        for params in &types {
            let mut prev: Option<[f64; 3]> = None;
            for depth in [1.0, 3.0, 6.0] {
                let sample =
                    SceneSample::new(clean.clone(), Array2::from_elem((64, 64), depth)).unwrap();
                let out = synthesize_underwater(&sample, params).unwrap();
                let mut gap = [0.0f64; 3];
                for c in 0..3 {
                    gap[c] = out
                        .index_axis(Axis(0), c)
                        .iter()
                        .map(|v| (v - params.ambient[c]).abs())
                        .sum::<f64>()
                        / (64.0 * 64.0);
                }
                if let Some(prev) = prev {
                    for c in 0..3 {
                        assert!(
                            gap[c] < prev[c],
                            "{}: channel {c} gap to ambient grew from {} to {} at depth {depth}",
                            params.label,
                            prev[c],
                            gap[c]
                        );
                    }
                }
                prev = Some(gap);
            }
        }
        assert!(start.elapsed() < Duration::from_secs(5), "took {:?}", start.elapsed());
    });
}

// ------------------------------------------------------------- 02 gradients

const GC_STEP: f64 = 1e-3;
const GC_TOL: f64 = 1e-3;

/// Verify the reverse-mode gradient of `loss(a, b)` against central finite
/// differences, element by element, on both inputs.
fn gradcheck(
    name: &str,
    a0: &ArrayD<f64>,
    b0: &ArrayD<f64>,
    loss: &dyn Fn(&Graph, &Var, &Var) -> Var,
) {
    let eval = |a: &ArrayD<f64>, b: &ArrayD<f64>| -> f64 {
        let g = Graph::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        loss(&g, &va, &vb).scalar()
    };
    let g = Graph::new();
    let (va, vb) = (g.leaf(a0.clone()), g.leaf(b0.clone()));
    let l = loss(&g, &va, &vb);
    let grads = g.backward(&l);
    for (side, base, var) in [("a", a0, &va), ("b", b0, &vb)] {
        let analytic = grads.wrt(var).expect("input should receive a gradient");
        for idx in 0..base.len() {
            let mut hi = base.clone();
            let mut lo = base.clone();
            hi.as_slice_mut().unwrap()[idx] += GC_STEP;
            lo.as_slice_mut().unwrap()[idx] -= GC_STEP;
            let numeric = if side == "a" {
                (eval(&hi, b0) - eval(&lo, b0)) / (2.0 * GC_STEP)
            } else {
                (eval(a0, &hi) - eval(a0, &lo)) / (2.0 * GC_STEP)
            };
            let got = analytic.as_slice().unwrap()[idx];
            let rel = (got - numeric).abs() / got.abs().max(numeric.abs()).max(1e-6);
            assert!(
                rel < GC_TOL,
                "{name}, input {side}[{idx}]: analytic {got} vs numeric {numeric} (rel {rel:.3e})"
            );
        }
    }
}

fn noise_nd(seed: u64, shape: &[usize]) -> ArrayD<f64> {
    let mut rng = Rng::seed_from_u64(seed);
    ArrayD::from_shape_fn(shape, |_| rng.gen_range(0.1..0.9))
}

/// A second input kept at least 0.05 away from the first elementwise, so
/// absolute-value kinks sit outside the probe step.
fn separated_from(a: &ArrayD<f64>, seed: u64) -> ArrayD<f64> {
    let mut rng = Rng::seed_from_u64(seed);
    a.mapv(|v| {
        let gap = rng.gen_range(0.05..0.15);
        if rng.gen_bool(0.5) {
            v + gap
        } else {
            v - gap
        }
    })
}

#[test]
fn gradient_suite() {
    criterion(2, "gradient-suite", || {
        let start = Instant::now();
        let cfg = LossConfig::default();
        let a = noise_nd(21, &[1, 1, 4, 4]);
        let b = noise_nd(22, &[1, 1, 4, 4]);
        gradcheck("charbonnier", &a, &b, &|_, x, y| charbonnier(x, y, &cfg).unwrap());

        let small_kernel = LossConfig { gaussian_kernel: 3, ..LossConfig::default() };
        gradcheck("edge", &a, &b, &|_, x, y| edge_loss(x, y, &small_kernel).unwrap());

        let qcfg = QualityConfig::default();
        gradcheck("ssim", &a, &b, &|_, x, y| ssim_loss_with(x, y, &qcfg).unwrap());

        let img = noise_nd(23, &[1, 3, 4, 4]);
        let img_b = separated_from(&img, 24);
        gradcheck("identity", &img, &img_b, &|_, x, y| identity_image_loss(x, y).unwrap());

        let code = noise_nd(25, &[4, 4]);
        let code_b = separated_from(&code, 26);
        gradcheck("latent-recon", &code, &code_b, &|_, x, y| latent_recon_loss(x, y).unwrap());
        assert!(start.elapsed() < Duration::from_secs(30), "took {:?}", start.elapsed());
    });
}

// ---------------------------------------------------------------- 03 floors

#[test]
fn epsilon_floors() {
    criterion(3, "epsilon-floors", || {
        // 8x8 keeps both the full tensor (64) and the edge loss's interior
        // after its 5x5 smoothing crop (16) at power-of-two element counts,
        // so the mean reductions are exact in binary floating point.
        let img = noise_nd(31, &[1, 1, 8, 8]);
        let cfg = LossConfig::default();
        let g = Graph::new();
        let v = g.constant(img.clone());
        assert_eq!(charbonnier(&v, &v, &cfg).unwrap().scalar(), 1e-4);
        assert_eq!(edge_loss(&v, &v, &cfg).unwrap().scalar(), 1e-4);
        assert!(ssim_loss(&v, &v).unwrap().scalar().abs() <= 1e-6);
    });
}

// ----------------------------------------------------- 04 style statistics

fn toy_translation_cfg() -> TranslationConfig {
    TranslationConfig {
        base_width: 4,
        res_blocks: 2,
        style_dim: 8,
        mlp_width: 16,
        disc_scales: 2,
        disc_base_width: 4,
        ..TranslationConfig::default()
    }
}

#[test]
fn adain_statistics() {
    criterion(4, "adain-statistics", || {
        let bundle = TranslationBundle::new(toy_translation_cfg(), 41).unwrap();
        for seed in [42u64, 43, 44] {
            let latent = bundle.encode(&noise_rgb(seed, 32, 32), Domain::Synthetic).unwrap();
            let (_, probes) = bundle.decode_instrumented(&latent, Domain::Real).unwrap();
            assert!(!probes.is_empty());
            for p in &probes {
                for ((mean, beta), (std, gamma)) in p
                    .observed_mean
                    .iter()
                    .zip(p.beta.iter())
                    .zip(p.observed_std.iter().zip(p.gamma.iter()))
                {
                    assert!((mean - beta).abs() < 1e-4, "mean {mean} vs beta {beta}");
                    assert!(
                        (std - gamma.abs()).abs() < 1e-4,
                        "std {std} vs |gamma| {}",
                        gamma.abs()
                    );
                }
            }
        }
    });
}

// ------------------------------------------------------ 05 adaptation smoke

#[test]
fn translation_smoke_training() {
    criterion(5, "translation-smoke-training", || {
        let start = Instant::now();
        let synthetic: Vec<Array3<f64>> = (0..8).map(|i| smooth_rgb(i, 16, 16)).collect();
        let real: Vec<Array3<f64>> = (0..8).map(|i| smooth_rgb(20 + i, 16, 16)).collect();
        let cfg = TranslationConfig {
            lr: 2e-3,
            disc_scales: 1,
            ..toy_translation_cfg()
        };
        assert_eq!(
            (cfg.weights.content, cfg.weights.style, cfg.weights.img),
            (1.0, 1.0, 1.0)
        );
        assert_eq!(
            (cfg.weights.adv, cfg.weights.ssim, cfg.weights.edge),
            (5.0, 3.0, 50.0)
        );
        let bundle = TranslationBundle::new(cfg, 51).unwrap();
        let opts = DaTrainOptions {
            steps: 200,
            batch_size: 4,
            seed: 51,
            loss: LossConfig::default(),
            quality: QualityConfig::default(),
            log_path: None,
            checkpoint_path: None,
            checkpoint_every: 10_000,
            config_snapshot: String::new(),
            resume: None,
        };
        let rows = train_da(&bundle, &synthetic, &real, &opts).unwrap();
        assert_eq!(rows.len(), 200);

        let terms = [
            "content_S", "content_R", "style_S", "style_R", "img_S", "img_R",
            "adv_S", "adv_R", "edge_S", "edge_R", "ssim_S", "ssim_R",
        ];
        for row in &rows {
            assert_eq!(row.result.breakdown.len(), terms.len());
            for t in terms {
                assert!(row.result.breakdown[t].is_finite(), "{t} at step {}", row.step);
            }
        }
        let window_mean = |range: std::ops::Range<usize>, term: &str| -> f64 {
            rows[range.clone()]
                .iter()
                .map(|r| r.result.breakdown[term])
                .sum::<f64>()
                / range.len() as f64
        };
        let mut failures = Vec::new();
        for term in ["content_S", "content_R", "style_S", "style_R", "img_S", "img_R"] {
            let early = window_mean(0..20, term);
            let late = window_mean(180..200, term);
            eprintln!("  {term}: early {early:.4} -> late {late:.4} (ratio {:.3})", late / early);
            if !(late < 0.5 * early) {
                failures.push(format!("{term}: {early:.4} -> {late:.4}"));
            }
        }
        assert!(
            failures.is_empty(),
            "terms that did not halve their early average: {failures:?}"
        );
        assert!(start.elapsed() < Duration::from_secs(600), "took {:?}", start.elapsed());
    });
}

// -------------------------------------------------------- 06 dataset counts

#[test]
fn dataset_count_invariant() {
    criterion(6, "dataset-count-invariant", || {
        let tmp = tempfile::tempdir().unwrap();
        let clean_dir = tmp.path().join("clean");
        let real_dir = tmp.path().join("real");
        std::fs::create_dir_all(&clean_dir).unwrap();
        std::fs::create_dir_all(&real_dir).unwrap();
        for i in 0..10 {
            imageio::write_rgb(clean_dir.join(format!("src{i:02}.png")), &smooth_rgb(i, 32, 32))
                .unwrap();
            let depth = Array2::from_shape_fn((32, 32), |(r, c)| 0.4 + (r + c + i) as f64 * 0.03);
            imageio::write_depth_uwd(clean_dir.join(format!("src{i:02}.uwd")), &depth).unwrap();
        }
        for i in 0..6 {
            imageio::write_rgb(real_dir.join(format!("ref{i}.png")), &smooth_rgb(40 + i, 32, 32))
                .unwrap();
        }

        let (clean, report) = build_manifest(&[clean_dir.clone()], 6, 0.0).unwrap();
        assert!(report.skipped.is_empty());
        let types = water_types_from(None).unwrap();
        let synth = generate_synthetic_set(
            &clean,
            &types,
            &SynthesisOptions { cartesian: false, ambient_jitter: 0.0, seed: 6 },
        )
        .unwrap();
        assert_eq!(synth.items.len(), 10);
        let (real, _) = build_manifest(&[real_dir], 6, 0.0).unwrap();
        let bundle = TranslationBundle::new(toy_translation_cfg(), 61).unwrap();
        let out_dir = tmp.path().join("out");
        let records = generate_adapted_dataset(
            &bundle,
            &synth.items,
            &real,
            &AdaptOptions { k: 6, seed: 6, out_dir: out_dir.clone() },
        )
        .unwrap();

        // 10 sources x 6 styles.
        assert_eq!(records.len(), 60);

        // Ground truth is the source file, byte for byte.
        let source_bytes: std::collections::HashMap<&str, Vec<u8>> = synth
            .items
            .iter()
            .map(|item| (item.source_id.as_str(), std::fs::read(&item.clean_path).unwrap()))
            .collect();
        for r in &records {
            let truth = std::fs::read(out_dir.join(&r.truth_path)).unwrap();
            assert_eq!(&truth, &source_bytes[r.source_id.as_str()], "{}", r.truth_path.display());
        }

        // Different styles visibly change the same source.
        let mut by_source: std::collections::BTreeMap<&str, Vec<Array3<f64>>> = Default::default();
        for r in &records {
            by_source
                .entry(r.source_id.as_str())
                .or_default()
                .push(imageio::read_rgb(out_dir.join(&r.adapted_path)).unwrap());
        }
        for (source, outs) in &by_source {
            assert_eq!(outs.len(), 6);
            for i in 0..outs.len() {
                for j in i + 1..outs.len() {
                    let gap =
                        (&outs[i] - &outs[j]).iter().map(|d| d.abs()).sum::<f64>()
                            / outs[i].len() as f64;
                    assert!(gap > 0.0, "{source}: styles {i} and {j} coincide");
                }
            }
        }
    });
}

// --------------------------------------------------- 07 restoration training

fn toy_restore_cfg(variant: RestoreVariant) -> RestoreNetConfig {
    RestoreNetConfig {
        depth: 2,
        base_width: 8,
        cab_per_scale: 1,
        attention_reduction: 4,
        variant,
    }
}

#[test]
fn restoration_identity_and_overfit() {
    criterion(7, "restoration-identity-and-overfit", || {
        let start = Instant::now();

        // Freshly built nets leave the image untouched, bit for bit.
        let img = noise_rgb(70, 20, 28);
        for variant in [RestoreVariant::Full, RestoreVariant::SimpleUnet, RestoreVariant::NoCal] {
            let net = RestoreNet::new(toy_restore_cfg(variant), 71).unwrap();
            let (residual, restored) = restore(&net, &img).unwrap();
            assert!(residual.iter().all(|v| *v == 0.0));
            assert_eq!(restored, img);
        }

        // The upsampling path is bilinear interpolation plus convolution.
        let net = RestoreNet::new(toy_restore_cfg(RestoreVariant::Full), 72).unwrap();
        let g = Graph::new();
        let x = g.constant(img.clone().insert_axis(Axis(0)).into_dyn());
        net.forward_var(&x, false, None);
        let ops = g.ops_used();
        assert!(ops.contains(&"upsample_bilinear2x"));
        assert!(ops.iter().all(|op| !op.contains("transpose")), "ops: {ops:?}");

        // Overfitting four pairs whose degradation is a fixed affine map.
        let pairs: Vec<RestorationPair> = (0..4)
            .map(|i| {
                let truth = smooth_rgb(73 + i, 32, 32);
                let input = truth.mapv(|v| 0.8 * v + 0.1);
                RestorationPair::new(input, truth).unwrap()
            })
            .collect();
        let net = RestoreNet::new(toy_restore_cfg(RestoreVariant::Full), 74).unwrap();
        let opts = RestoreTrainOptions {
            epochs: 5,
            steps_per_epoch: Some(100),
            batch_size: 4,
            patch: 16,
            lr: 3e-3,
            lr_halve_every: 10,
            seed: 75,
            weights: uwr_core::restoration::RestoreLossWeights { perceptual: 0.0, edge: 0.0 },
            loss: LossConfig::default(),
            perceptual: PerceptualConfig { base_width: 8, ..PerceptualConfig::default() },
            log_path: None,
            checkpoint_path: None,
            config_snapshot: String::new(),
            resume: None,
        };
        let rows = train_restorer(&net, &pairs, &opts).unwrap();
        assert_eq!(rows.len(), 500);
        let mean_psnr = pairs
            .iter()
            .map(|p| {
                let (_, restored) = restore(&net, &p.input).unwrap();
                psnr(&restored, &p.truth, 1.0).unwrap()
            })
            .sum::<f64>()
            / pairs.len() as f64;
        assert!(mean_psnr > 30.0, "training PSNR only reached {mean_psnr:.2} dB");

        // Every variant trains to finite, decreasing loss.
        for variant in [RestoreVariant::Full, RestoreVariant::SimpleUnet, RestoreVariant::NoCal] {
            let net = RestoreNet::new(toy_restore_cfg(variant), 76).unwrap();
            let opts = RestoreTrainOptions {
                epochs: 1,
                steps_per_epoch: Some(30),
                lr: 3e-3,
                ..opts.clone()
            };
            let rows = train_restorer(&net, &pairs, &opts).unwrap();
            assert!(rows.iter().all(|r| r.total.is_finite()));
            let first: f64 = rows[..5].iter().map(|r| r.total).sum::<f64>() / 5.0;
            let last: f64 = rows[25..].iter().map(|r| r.total).sum::<f64>() / 5.0;
            assert!(last < first, "{variant:?}: loss went {first} -> {last}");
        }
        assert!(start.elapsed() < Duration::from_secs(600), "took {:?}", start.elapsed());
    });
}

// ----------------------------------------------------- 08 metric closed forms

/// Normalized Gaussian window computed with plain nested loops (independent
/// of the production kernel builder).
fn reference_window(size: usize, sigma: f64) -> Vec<Vec<f64>> {
    let c = (size / 2) as f64;
    let mut k = vec![vec![0.0; size]; size];
    let mut total = 0.0;
    for (i, row) in k.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - c, j as f64 - c);
            *v = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            total += *v;
        }
    }
    for row in &mut k {
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    k
}

/// SSIM evaluated one window at a time from weighted local statistics; an
/// independent reimplementation used only to cross-check the graph-based one.
fn reference_ssim(a: &Array3<f64>, b: &Array3<f64>, cfg: &QualityConfig) -> f64 {
    let (c, h, w) = a.dim();
    let mut k = cfg.ssim_window.min(h.min(w));
    if k % 2 == 0 {
        k -= 1;
    }
    let pad = (k - 1) / 2;
    let kern = reference_window(k, cfg.ssim_sigma);
    let c1 = cfg.ssim_k1 * cfg.ssim_k1;
    let c2 = cfg.ssim_k2 * cfg.ssim_k2;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        for i in pad..h - pad {
            for j in pad..w - pad {
                let (mut ma, mut mb) = (0.0, 0.0);
                let (mut maa, mut mbb, mut mab) = (0.0, 0.0, 0.0);
                for (di, row) in kern.iter().enumerate() {
                    for (dj, &wgt) in row.iter().enumerate() {
                        let x = a[[ch, i + di - pad, j + dj - pad]];
                        let y = b[[ch, i + di - pad, j + dj - pad]];
                        ma += wgt * x;
                        mb += wgt * y;
                        maa += wgt * x * x;
                        mbb += wgt * y * y;
                        mab += wgt * x * y;
                    }
                }
                let (va, vb, cov) = (maa - ma * ma, mbb - mb * mb, mab - ma * mb);
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    total / count as f64
}

#[test]
fn metric_closed_forms() {
    criterion(8, "metric-closed-forms", || {
        // A constant 0.1 gap means MSE 0.01, which is exactly 20 dB.
        let zeros = Array3::zeros((3, 8, 8));
        let tenth = Array3::from_elem((3, 8, 8), 0.1);
        assert!((psnr(&zeros, &tenth, 1.0).unwrap() - 20.0).abs() < 1e-9);

        let cfg = QualityConfig::default();
        let img = noise_rgb(80, 16, 20);
        assert_eq!(ssim_with(&img, &img, &cfg).unwrap(), 1.0);

        // Agreement with the independent per-window reference.
        for (seed, h, w) in [(81u64, 16, 20), (82, 11, 11), (83, 7, 9)] {
            let a = noise_rgb(seed, h, w);
            let b = noise_rgb(seed + 100, h, w);
            let got = ssim_with(&a, &b, &cfg).unwrap();
            let want = reference_ssim(&a, &b, &cfg);
            assert!((got - want).abs() < 1e-4, "{h}x{w}: {got} vs reference {want}");
        }

        // A gray image has no red-green / yellow-blue opponent signal.
        let gray = noise_rgb(84, 12, 12)
            .index_axis(Axis(0), 0)
            .insert_axis(Axis(0))
            .broadcast((3, 12, 12))
            .unwrap()
            .to_owned();
        assert_eq!(uiqm_components(&gray, &cfg).unwrap().uicm, 0.0);

        // A constant image has no chroma spread and no luminance contrast.
        let flat = Array3::from_elem((3, 12, 12), 0.37);
        let parts = uciqe_components(&flat, &cfg).unwrap();
        assert_eq!(parts.chroma_std, 0.0);
        assert_eq!(parts.luma_contrast, 0.0);
    });
}

// -------------------------------------------------------------- 09 schedule

#[test]
fn lr_schedule() {
    criterion(9, "lr-schedule", || {
        let pairs: Vec<RestorationPair> = (0..2)
            .map(|i| {
                RestorationPair::new(noise_rgb(90 + i, 16, 16), noise_rgb(92 + i, 16, 16)).unwrap()
            })
            .collect();
        let net = RestoreNet::new(toy_restore_cfg(RestoreVariant::Full), 94).unwrap();
        let opts = RestoreTrainOptions {
            epochs: 76,
            steps_per_epoch: Some(1),
            batch_size: 1,
            patch: 8,
            lr: 3e-4,
            lr_halve_every: 10,
            seed: 95,
            weights: uwr_core::restoration::RestoreLossWeights { perceptual: 0.0, edge: 0.0 },
            loss: LossConfig::default(),
            perceptual: PerceptualConfig { base_width: 8, ..PerceptualConfig::default() },
            log_path: None,
            checkpoint_path: None,
            config_snapshot: String::new(),
            resume: None,
        };
        let rows = train_restorer(&net, &pairs, &opts).unwrap();
        assert_eq!(rows.len(), 76);
        for row in &rows {
            let expected = 3e-4 * 0.5f64.powi((row.epoch / 10) as i32);
            assert_eq!(row.lr, expected, "epoch {}", row.epoch);
            assert_eq!(row.lr, lr_for_epoch(3e-4, row.epoch, 10));
        }
        assert_eq!(rows.last().unwrap().epoch, 75);
        assert_eq!(rows.last().unwrap().lr, 3e-4 / 128.0);
    });
}

// ----------------------------------------------------------- 10 determinism

fn run_uwr(dir: &Path, args: &[&str]) {
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_uwr"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn uwr");
    assert!(
        out.status.success(),
        "uwr {:?} failed with {:?}\nstderr:\n{}",
        args,
        out.status.code(),
        String::from_utf8_lossy(&out.stderr),
    );
}

const PIPELINE_CONFIG: &str = r#"
seed = 9

[translation]
base_width = 4
res_blocks = 1
style_dim = 4
mlp_width = 8
disc_scales = 2
disc_base_width = 4
steps = 2
batch_size = 2

[datasetgen]
k = 2

[restoration]
epochs = 1
steps_per_epoch = 1
batch_size = 2
patch = 16

[restoration.net]
depth = 2
base_width = 8
cab_per_scale = 1
attention_reduction = 8
"#;

/// Full seeded pipeline in `dir`: synthesis, adaptation training, dataset
/// generation, restorer training, inference, and scoring.
fn run_pipeline(dir: &Path) {
    for i in 0..10 {
        imageio::write_rgb(dir.join(format!("clean/img{i:02}.png")), &smooth_rgb(i, 32, 32))
            .unwrap();
        let depth = Array2::from_shape_fn((32, 32), |(r, c)| 0.4 + (r + c + i) as f64 * 0.03);
        imageio::write_depth_uwd(dir.join(format!("clean/img{i:02}.uwd")), &depth).unwrap();
    }
    for i in 0..6 {
        imageio::write_rgb(dir.join(format!("real/ref{i}.png")), &smooth_rgb(50 + i, 32, 32))
            .unwrap();
    }
    std::fs::write(dir.join("cfg.toml"), PIPELINE_CONFIG).unwrap();
    run_uwr(dir, &["synthesize", "--config", "cfg.toml", "--inputs", "clean", "--out", "synth"]);
    run_uwr(
        dir,
        &[
            "train-da", "--config", "cfg.toml", "--synthetic", "synth", "--real", "real",
            "--out", "da", "--size", "32",
        ],
    );
    run_uwr(
        dir,
        &[
            "gen-dataset", "--config", "cfg.toml", "--inputs", "clean", "--real", "real",
            "--checkpoint", "da/da.trb", "--out", "ds",
        ],
    );
    run_uwr(
        dir,
        &["train-restore", "--config", "cfg.toml", "--pairs", "ds/pairs.csv", "--out", "rt"],
    );
    run_uwr(
        dir,
        &[
            "restore", "--config", "cfg.toml", "--checkpoint", "rt/restore.rsn",
            "--inputs", "ds/adapted", "--out", "restored",
        ],
    );
    run_uwr(
        dir,
        &[
            "evaluate", "--config", "cfg.toml", "--outputs", "restored", "--out", "report.csv",
            "--method", "toy", "--dataset", "toy",
        ],
    );
}

/// File contents minus volatile metadata lines.
fn stable_lines(path: &Path) -> String {
    std::fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("{}: {e}", path.display()))
        .lines()
        .filter(|l| !l.starts_with("# timestamp:"))
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn end_to_end_determinism() {
    criterion(10, "end-to-end-determinism", || {
        let tmp_a = tempfile::tempdir().unwrap();
        let tmp_b = tempfile::tempdir().unwrap();
        for dir in ["clean", "real"] {
            std::fs::create_dir_all(tmp_a.path().join(dir)).unwrap();
            std::fs::create_dir_all(tmp_b.path().join(dir)).unwrap();
        }
        run_pipeline(tmp_a.path());
        run_pipeline(tmp_b.path());
        for file in ["ds/pairs.csv", "da/train_da.csv", "rt/train_restore.csv"] {
            let a = std::fs::read(tmp_a.path().join(file)).unwrap();
            let b = std::fs::read(tmp_b.path().join(file)).unwrap();
            assert_eq!(a, b, "{file} differs between identically seeded runs");
        }
        assert_eq!(
            stable_lines(&tmp_a.path().join("report.csv")),
            stable_lines(&tmp_b.path().join("report.csv")),
            "report.csv differs between identically seeded runs"
        );
    });
}

// ------------------------------------------------------ 11 external corpus

#[test]
fn external_corpus_scores() {
    let Some(dir) = std::env::var_os("UWR_SEATHRU_DIR") else {
        println!("ACCEPTANCE 11 external-corpus-scores: SKIP (UWR_SEATHRU_DIR not set)");
        return;
    };
    criterion(11, "external-corpus-scores", || {
        let dir = PathBuf::from(dir);
        let report = uwr_core::quality::evaluate(
            &dir,
            None,
            &uwr_core::quality::EvalOptions {
                method: "input".into(),
                dataset: "external".into(),
                config_hash: String::new(),
                cfg: QualityConfig::default(),
            },
        )
        .unwrap();
        assert!(!report.rows.is_empty(), "no images found in {}", dir.display());
        let mean = report.mean_row();
        let within = |got: f64, want: f64| (got - want).abs() <= 0.05 * want;
        assert!(
            within(mean.uciqe, 0.4663),
            "mean UCIQE {} outside 0.4663 +/- 5%",
            mean.uciqe
        );
        assert!(
            within(mean.uiqm, 2.0196),
            "mean UIQM {} outside 2.0196 +/- 5%",
            mean.uiqm
        );
    });
}
