//! Image quality metrics: full-reference (PSNR, SSIM) and no-reference
//! underwater scores (UCIQE, UIQM), plus batch evaluation reports.
//!
//! All metric coefficients are pinned in [`QualityConfig`] so variants from
//! different publications can be switched without touching code. The SSIM
//! core is a differentiable graph function shared with the loss module, so
//! the training loss and the reported metric can never drift apart.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayD};
use serde::{Deserialize, Serialize};
use uwr_autodiff::{pairwise_sum, par, Graph, PadMode, Var};

use crate::error::{Error, Result};
use crate::imageio;

/// Pinned metric constants; every coefficient used by UCIQE/UIQM/SSIM.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QualityConfig {
    /// SSIM window size (odd; auto-shrunk for small images).
    pub ssim_window: usize,
    /// Std-dev of the SSIM Gaussian window.
    pub ssim_sigma: f64,
    /// SSIM stabilizers (scaled by the dynamic range).
    pub ssim_k1: f64,
    pub ssim_k2: f64,
    /// UCIQE weights for (chroma std-dev, luminance contrast, mean saturation).
    pub uciqe_coeffs: [f64; 3],
    /// Luminance percentile pair defining the UCIQE contrast spread.
    pub uciqe_percentile: f64,
    /// UIQM weights for (UICM, UISM, UIConM).
    pub uiqm_coeffs: [f64; 3],
    /// Fraction trimmed from each tail in the UICM alpha-trimmed mean.
    pub uicm_alpha: f64,
    /// UICM combination coefficients for (trimmed-mean norm, variance norm).
    pub uicm_mu_coeff: f64,
    pub uicm_sigma_coeff: f64,
    /// Block size for the EME/contrast measures.
    pub eme_block: usize,
    /// Guard added to block extrema before ratios/logs.
    pub eme_epsilon: f64,
    /// Contrast component variant: plain Michelson mean or PLIP-style logAMEE.
    pub uiconm_variant: ContrastVariant,
}

/// Which block-contrast formulation UIConM uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContrastVariant {
    MichelsonMean,
    Logamee,
}

impl Default for QualityConfig {
    fn default() -> Self {
        QualityConfig {
            ssim_window: 11,
            ssim_sigma: 1.5,
            ssim_k1: 0.01,
            ssim_k2: 0.03,
            uciqe_coeffs: [0.4680, 0.2745, 0.2576],
            uciqe_percentile: 0.01,
            uiqm_coeffs: [0.0282, 0.2953, 3.5753],
            uicm_alpha: 0.1,
            uicm_mu_coeff: -0.0268,
            uicm_sigma_coeff: 0.1586,
            eme_block: 10,
            eme_epsilon: 1e-4,
            uiconm_variant: ContrastVariant::MichelsonMean,
        }
    }
}

impl QualityConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ssim_window < 3 || self.ssim_window % 2 == 0 {
            return Err(Error::Config("ssim_window must be odd and >= 3".into()));
        }
        if !(self.ssim_sigma > 0.0) {
            return Err(Error::Config("ssim_sigma must be positive".into()));
        }
        if !(0.0..0.5).contains(&self.uicm_alpha) {
            return Err(Error::Config("uicm_alpha must be in [0, 0.5)".into()));
        }
        if self.eme_block < 2 {
            return Err(Error::Config("eme_block must be >= 2".into()));
        }
        if !(0.0..0.5).contains(&self.uciqe_percentile) || self.uciqe_percentile <= 0.0 {
            return Err(Error::Config("uciqe_percentile must be in (0, 0.5)".into()));
        }
        Ok(())
    }
}

fn check_same_shape(a: &Array3<f64>, b: &Array3<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "metric inputs differ in shape: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

fn check_rgb(image: &Array3<f64>) -> Result<()> {
    if image.dim().0 != 3 {
        return Err(Error::Shape(format!(
            "expected a 3-channel RGB image, got {} channels",
            image.dim().0
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB: `10*log10(max_val^2 / MSE)`.
/// Identical inputs give positive infinity (serialized as `inf`).
pub fn psnr(a: &Array3<f64>, b: &Array3<f64>, max_val: f64) -> Result<f64> {
    check_same_shape(a, b)?;
    let sq: Vec<f64> = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).collect();
    let mse = pairwise_sum(&sq) / sq.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_val * max_val / mse).log10())
}

/// Normalized 2-D Gaussian window (sums to 1) used by SSIM and edge loss.
pub(crate) fn gaussian_kernel2d(size: usize, sigma: f64) -> Array2<f64> {
    assert!(size % 2 == 1 && size >= 1, "kernel size must be odd");
    let c = (size / 2) as f64;
    let mut k = Array2::zeros((size, size));
    for i in 0..size {
        for j in 0..size {
            let di = i as f64 - c;
            let dj = j as f64 - c;
            k[(i, j)] = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
        }
    }
    let total = pairwise_sum(k.as_slice().unwrap());
    k.mapv_inplace(|v| v / total);
    k
}

/// Largest odd window that fits the image, capped at the configured size.
fn effective_window(h: usize, w: usize, window: usize) -> Result<usize> {
    let cap = h.min(w);
    if cap < 3 {
        return Err(Error::Shape(format!(
            "image {h}x{w} is too small for windowed SSIM (needs at least 3x3)"
        )));
    }
    let mut k = window.min(cap);
    if k % 2 == 0 {
        k -= 1;
    }
    Ok(k)
}

/// Differentiable mean SSIM over a batch of feature maps shaped `[n, c, h, w]`.
///
/// Local statistics use a Gaussian window; only fully supported (valid)
/// window positions contribute, implemented as zero-padded filtering followed
/// by a border crop. Shared by the SSIM metric and the structural loss.
pub(crate) fn ssim_index_graph(a: &Var, b: &Var, cfg: &QualityConfig) -> Result<Var> {
    let shape = a.shape().to_vec();
    if shape != b.shape() {
        return Err(Error::Shape(format!(
            "ssim inputs differ in shape: {:?} vs {:?}",
            shape,
            b.shape()
        )));
    }
    let (h, w) = (shape[2], shape[3]);
    let k = effective_window(h, w, cfg.ssim_window)?;
    let pad = (k - 1) / 2;
    let kernel = gaussian_kernel2d(k, cfg.ssim_sigma);
    let crop = |v: Var| -> Var {
        // Zero padding only pollutes the border ring; cropping it leaves
        // exactly the valid-window statistics.
        v.narrow(2, pad, h - 2 * pad).narrow(3, pad, w - 2 * pad)
    };
    let filt = |v: &Var| -> Var { crop(v.depthwise_fixed(&kernel, PadMode::Zero)) };
    let mu_a = filt(a);
    let mu_b = filt(b);
    let mu_aa = filt(&a.mul(a));
    let mu_bb = filt(&b.mul(b));
    let mu_ab = filt(&a.mul(b));
    let var_a = mu_aa.sub(&mu_a.mul(&mu_a));
    let var_b = mu_bb.sub(&mu_b.mul(&mu_b));
    let cov = mu_ab.sub(&mu_a.mul(&mu_b));
    let c1 = cfg.ssim_k1 * cfg.ssim_k1;
    let c2 = cfg.ssim_k2 * cfg.ssim_k2;
    let num = mu_a
        .mul(&mu_b)
        .mul_scalar(2.0)
        .add_scalar(c1)
        .mul(&cov.mul_scalar(2.0).add_scalar(c2));
    let den = mu_a
        .mul(&mu_a)
        .add(&mu_b.mul(&mu_b))
        .add_scalar(c1)
        .mul(&var_a.add(&var_b).add_scalar(c2));
    Ok(num.div(&den).mean_all())
}

/// Mean structural similarity between two RGB images, in `[-1, 1]`.
pub fn ssim(a: &Array3<f64>, b: &Array3<f64>) -> Result<f64> {
    ssim_with(a, b, &QualityConfig::default())
}

/// SSIM with explicit constants.
pub fn ssim_with(a: &Array3<f64>, b: &Array3<f64>, cfg: &QualityConfig) -> Result<f64> {
    check_same_shape(a, b)?;
    let (c, h, w) = a.dim();
    let g = Graph::new();
    let to_var = |img: &Array3<f64>| -> Var {
        let arr: ArrayD<f64> = img.clone().into_shape(vec![1, c, h, w]).unwrap().into_dyn();
        g.constant(arr)
    };
    let va = to_var(a);
    let vb = to_var(b);
    let idx = ssim_index_graph(&va, &vb, cfg)?;
    Ok(idx.scalar())
}

/// Component values behind one UCIQE score.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UciqeBreakdown {
    pub chroma_std: f64,
    pub luma_contrast: f64,
    pub mean_saturation: f64,
    pub score: f64,
}

/// Component values behind one UIQM score.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UiqmBreakdown {
    pub uicm: f64,
    pub uism: f64,
    pub uiconm: f64,
    pub score: f64,
}

/// sRGB in [0,1] to CIELAB (D65 white), returning (L, a, b) scaled by 1/100.
fn srgb_to_lab_scaled(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    fn lin(c: f64) -> f64 {
        if c <= 0.04045 {
            c / 12.92
        } else {
            ((c + 0.055) / 1.055).powf(2.4)
        }
    }
    let (rl, gl, bl) = (lin(r), lin(g), lin(b));
    let x = 0.412_456_4 * rl + 0.357_576_1 * gl + 0.180_437_5 * bl;
    let y = 0.212_672_9 * rl + 0.715_152_2 * gl + 0.072_175_0 * bl;
    let z = 0.019_333_9 * rl + 0.119_192_0 * gl + 0.950_304_1 * bl;
    fn f(t: f64) -> f64 {
        const DELTA3: f64 = 216.0 / 24389.0;
        if t > DELTA3 {
            t.cbrt()
        } else {
            t * (841.0 / 108.0) + 4.0 / 29.0
        }
    }
    let (fx, fy, fz) = (f(x / 0.950_47), f(y), f(z / 1.088_83));
    let l = 116.0 * fy - 16.0;
    let a = 500.0 * (fx - fy);
    let bb = 200.0 * (fy - fz);
    (l / 100.0, a / 100.0, bb / 100.0)
}

/// Linear-interpolated quantile of a sorted slice.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

fn mean(values: &[f64]) -> f64 {
    pairwise_sum(values) / values.len() as f64
}

/// UCIQE with default constants.
pub fn uciqe(image: &Array3<f64>) -> Result<f64> {
    Ok(uciqe_components(image, &QualityConfig::default())?.score)
}

/// UCIQE = w1*std(chroma) + w2*(luminance percentile spread) + w3*mean(saturation),
/// computed in CIELAB with all channels scaled to unit range.
pub fn uciqe_components(image: &Array3<f64>, cfg: &QualityConfig) -> Result<UciqeBreakdown> {
    check_rgb(image)?;
    let (_, h, w) = image.dim();
    let n = h * w;
    let mut luma = Vec::with_capacity(n);
    let mut chroma = Vec::with_capacity(n);
    let mut sat = Vec::with_capacity(n);
    for i in 0..h {
        for j in 0..w {
            let (l, a, b) = srgb_to_lab_scaled(image[(0, i, j)], image[(1, i, j)], image[(2, i, j)]);
            let c = (a * a + b * b).sqrt();
            let denom = (c * c + l * l).sqrt();
            luma.push(l);
            chroma.push(c);
            sat.push(if denom > 0.0 { c / denom } else { 0.0 });
        }
    }
    let mu_c = mean(&chroma);
    let var_terms: Vec<f64> = chroma.iter().map(|c| (c - mu_c) * (c - mu_c)).collect();
    let chroma_std = (pairwise_sum(&var_terms) / n as f64).sqrt();
    let mut sorted = luma.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let luma_contrast =
        quantile_sorted(&sorted, 1.0 - cfg.uciqe_percentile) - quantile_sorted(&sorted, cfg.uciqe_percentile);
    let mean_saturation = mean(&sat);
    let [w1, w2, w3] = cfg.uciqe_coeffs;
    Ok(UciqeBreakdown {
        chroma_std,
        luma_contrast,
        mean_saturation,
        score: w1 * chroma_std + w2 * luma_contrast + w3 * mean_saturation,
    })
}

/// UIQM with default constants.
pub fn uiqm(image: &Array3<f64>) -> Result<f64> {
    Ok(uiqm_components(image, &QualityConfig::default())?.score)
}

/// UIQM = c1*UICM + c2*UISM + c3*UIConM (colorfulness, sharpness, contrast).
pub fn uiqm_components(image: &Array3<f64>, cfg: &QualityConfig) -> Result<UiqmBreakdown> {
    check_rgb(image)?;
    let uicm = uicm_component(image, cfg);
    let uism = uism_component(image, cfg);
    let uiconm = uiconm_component(image, cfg);
    let [c1, c2, c3] = cfg.uiqm_coeffs;
    Ok(UiqmBreakdown {
        uicm,
        uism,
        uiconm,
        score: c1 * uicm + c2 * uism + c3 * uiconm,
    })
}

/// Alpha-trimmed mean: drop the lowest and highest `alpha` fraction, average
/// the rest.
fn alpha_trimmed_mean(values: &[f64], alpha: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    let trim = ((alpha * n as f64).floor() as usize).min((n - 1) / 2);
    mean(&sorted[trim..n - trim])
}

/// Colorfulness: combines trimmed means and variances of the two color
/// opponent planes RG = R-G and YB = (R+G)/2 - B. Zero for any gray image.
fn uicm_component(image: &Array3<f64>, cfg: &QualityConfig) -> f64 {
    let (_, h, w) = image.dim();
    let n = h * w;
    let mut rg = Vec::with_capacity(n);
    let mut yb = Vec::with_capacity(n);
    for i in 0..h {
        for j in 0..w {
            let (r, g, b) = (image[(0, i, j)], image[(1, i, j)], image[(2, i, j)]);
            rg.push(r - g);
            yb.push((r + g) / 2.0 - b);
        }
    }
    let mu_rg = alpha_trimmed_mean(&rg, cfg.uicm_alpha);
    let mu_yb = alpha_trimmed_mean(&yb, cfg.uicm_alpha);
    let var = |vals: &[f64], mu: f64| -> f64 {
        let sq: Vec<f64> = vals.iter().map(|v| (v - mu) * (v - mu)).collect();
        pairwise_sum(&sq) / vals.len() as f64
    };
    let s_rg = var(&rg, mu_rg);
    let s_yb = var(&yb, mu_yb);
    cfg.uicm_mu_coeff * (mu_rg * mu_rg + mu_yb * mu_yb).sqrt()
        + cfg.uicm_sigma_coeff * (s_rg + s_yb).sqrt()
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * n - 2 - i;
    }
    i as usize
}

/// Sobel gradient magnitude of one plane, reflect-padded.
fn sobel_magnitude(plane: &Array2<f64>) -> Array2<f64> {
    let (h, w) = plane.dim();
    let mut out = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let p = |di: isize, dj: isize| plane[(reflect(i as isize + di, h), reflect(j as isize + dj, w))];
            let gx = -p(-1, -1) - 2.0 * p(0, -1) - p(1, -1) + p(-1, 1) + 2.0 * p(0, 1) + p(1, 1);
            let gy = -p(-1, -1) - 2.0 * p(-1, 0) - p(-1, 1) + p(1, -1) + 2.0 * p(1, 0) + p(1, 1);
            out[(i, j)] = (gx * gx + gy * gy).sqrt();
        }
    }
    out
}

/// Iterate block extrema over a tiling anchored at the top-left corner;
/// trailing partial blocks are included so every pixel contributes.
fn block_extrema(plane: &Array2<f64>, block: usize) -> Vec<(f64, f64)> {
    let (h, w) = plane.dim();
    let mut out = Vec::new();
    let mut i = 0;
    while i < h {
        let bh = block.min(h - i);
        let mut j = 0;
        while j < w {
            let bw = block.min(w - j);
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for ii in i..i + bh {
                for jj in j..j + bw {
                    let v = plane[(ii, jj)];
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
            out.push((lo, hi));
            j += bw;
        }
        i += bh;
    }
    out
}

/// Block-based log enhancement measure: mean of log((max+eps)/(min+eps)).
fn eme(plane: &Array2<f64>, block: usize, eps: f64) -> f64 {
    let blocks = block_extrema(plane, block);
    let terms: Vec<f64> = blocks
        .iter()
        .map(|&(lo, hi)| ((hi + eps) / (lo + eps)).ln())
        .collect();
    2.0 * mean(&terms)
}

/// Sharpness: per-channel EME of the Sobel-magnitude map masked by the
/// channel itself, combined with standard luminance weights.
fn uism_component(image: &Array3<f64>, cfg: &QualityConfig) -> f64 {
    let (_, h, w) = image.dim();
    let weights = [0.299, 0.587, 0.114];
    let mut total = 0.0;
    for c in 0..3 {
        let plane = Array2::from_shape_fn((h, w), |(i, j)| image[(c, i, j)]);
        let edges = sobel_magnitude(&plane);
        let masked = &edges * &plane;
        total += weights[c] * eme(&masked, cfg.eme_block, cfg.eme_epsilon);
    }
    total
}

/// Contrast: block Michelson contrast of the luminance plane (default), or
/// the PLIP-weighted logAMEE variant over color blocks.
fn uiconm_component(image: &Array3<f64>, cfg: &QualityConfig) -> f64 {
    let (_, h, w) = image.dim();
    match cfg.uiconm_variant {
        ContrastVariant::MichelsonMean => {
            let luma = Array2::from_shape_fn((h, w), |(i, j)| {
                0.299 * image[(0, i, j)] + 0.587 * image[(1, i, j)] + 0.114 * image[(2, i, j)]
            });
            let blocks = block_extrema(&luma, cfg.eme_block);
            let terms: Vec<f64> = blocks
                .iter()
                .map(|&(lo, hi)| (hi - lo) / (hi + lo + cfg.eme_epsilon))
                .collect();
            mean(&terms)
        }
        ContrastVariant::Logamee => {
            // Extrema are taken across all three channels within each block.
            let mut mins = Array2::from_elem((h, w), f64::INFINITY);
            let mut maxs = Array2::from_elem((h, w), f64::NEG_INFINITY);
            for c in 0..3 {
                for i in 0..h {
                    for j in 0..w {
                        let v = image[(c, i, j)];
                        mins[(i, j)] = mins[(i, j)].min(v);
                        maxs[(i, j)] = maxs[(i, j)].max(v);
                    }
                }
            }
            let lo_blocks = block_extrema(&mins, cfg.eme_block);
            let hi_blocks = block_extrema(&maxs, cfg.eme_block);
            let mut total = 0.0;
            for (&(lo, _), &(_, hi)) in lo_blocks.iter().zip(hi_blocks.iter()) {
                let top = hi - lo;
                let bot = hi + lo;
                if top > 0.0 && bot > 0.0 {
                    let m = top / bot;
                    total += m * m.ln();
                }
            }
            -total / lo_blocks.len() as f64
        }
    }
}

/// One evaluated image.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub image_id: String,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub uciqe: f64,
    pub uiqm: f64,
}

/// Batch evaluation result: per-image rows plus recomputable aggregates.
#[derive(Clone, Debug)]
pub struct MetricReport {
    pub method: String,
    pub dataset: String,
    pub timestamp: String,
    pub config_hash: String,
    pub with_reference: bool,
    pub rows: Vec<MetricRow>,
    pub warnings: Vec<String>,
}

fn mean_of(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(mean(values))
    }
}

impl MetricReport {
    /// Aggregate row (id `__mean__`); each column averages the rows where it
    /// is present.
    pub fn mean_row(&self) -> MetricRow {
        let collect = |f: fn(&MetricRow) -> Option<f64>| -> Vec<f64> {
            self.rows.iter().filter_map(f).collect()
        };
        MetricRow {
            image_id: "__mean__".into(),
            psnr: mean_of(&collect(|r| r.psnr)),
            ssim: mean_of(&collect(|r| r.ssim)),
            uciqe: mean_of(&self.rows.iter().map(|r| r.uciqe).collect::<Vec<_>>()).unwrap_or(0.0),
            uiqm: mean_of(&self.rows.iter().map(|r| r.uiqm).collect::<Vec<_>>()).unwrap_or(0.0),
        }
    }

    /// Serialize as CSV with `#`-prefixed metadata lines. PSNR of identical
    /// images appears as `inf`; absent values as empty cells.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("# method: {}\n", self.method));
        out.push_str(&format!("# dataset: {}\n", self.dataset));
        out.push_str(&format!("# timestamp: {}\n", self.timestamp));
        out.push_str(&format!("# config: {}\n", self.config_hash));
        for warn in &self.warnings {
            out.push_str(&format!("# warning: {warn}\n"));
        }
        let fmt_opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        if self.with_reference {
            out.push_str("image_id,psnr,ssim,uciqe,uiqm\n");
        } else {
            out.push_str("image_id,uciqe,uiqm\n");
        }
        for row in self.rows.iter().chain(std::iter::once(&self.mean_row())) {
            if self.with_reference {
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    row.image_id,
                    fmt_opt(row.psnr),
                    fmt_opt(row.ssim),
                    row.uciqe,
                    row.uiqm
                ));
            } else {
                out.push_str(&format!("{},{},{}\n", row.image_id, row.uciqe, row.uiqm));
            }
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv_string()).map_err(Error::io(path))
    }

    /// Human-readable aligned table.
    pub fn render_table(&self) -> String {
        let fmt_opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
        let mut out = String::new();
        out.push_str(&format!(
            "{:<28} {:>10} {:>8} {:>8} {:>8}\n",
            "image", "psnr", "ssim", "uciqe", "uiqm"
        ));
        for row in self.rows.iter().chain(std::iter::once(&self.mean_row())) {
            out.push_str(&format!(
                "{:<28} {:>10} {:>8} {:>8.4} {:>8.4}\n",
                row.image_id,
                fmt_opt(row.psnr),
                fmt_opt(row.ssim),
                row.uciqe,
                row.uiqm
            ));
        }
        out
    }
}

/// Settings for a batch evaluation run.
#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub method: String,
    pub dataset: String,
    pub config_hash: String,
    pub cfg: QualityConfig,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            method: "unspecified".into(),
            dataset: "unspecified".into(),
            config_hash: String::new(),
            cfg: QualityConfig::default(),
        }
    }
}

fn image_files(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(Error::io(dir))? {
        let entry = entry.map_err(Error::io(dir))?;
        if !entry.file_type().map_err(Error::io(dir))?.is_file() {
            continue;
        }
        let name = entry.file_name().to_string_lossy().into_owned();
        let lower = name.to_ascii_lowercase();
        if lower.ends_with(".png") || lower.ends_with(".jpg") || lower.ends_with(".jpeg") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

/// Evaluate every image in `outputs`; when `truth` is given, filenames are
/// matched across the two directories and PSNR/SSIM are added. Unmatched
/// names become warnings, never hard failures. Rows are sorted by filename
/// and computed independently per image, so the report is order-stable.
pub fn evaluate(outputs: &Path, truth: Option<&Path>, opts: &EvalOptions) -> Result<MetricReport> {
    opts.cfg.validate()?;
    let out_names = image_files(outputs)?;
    if out_names.is_empty() {
        return Err(Error::Domain(format!("no images found in {}", outputs.display())));
    }
    let mut warnings = Vec::new();
    let truth_names: BTreeSet<String> = match truth {
        Some(dir) => image_files(dir)?.into_iter().collect(),
        None => BTreeSet::new(),
    };
    if truth.is_some() {
        for name in &out_names {
            if !truth_names.contains(name) {
                warnings.push(format!("no ground truth for {name}"));
            }
        }
        for name in &truth_names {
            if !out_names.contains(name) {
                warnings.push(format!("ground truth {name} has no output"));
            }
        }
    }
    let results: Vec<Result<(MetricRow, Option<String>)>> = par::map_indexed(out_names.len(), |i| {
        let name = &out_names[i];
        let img = imageio::read_rgb(outputs.join(name))?;
        let mut row = MetricRow {
            image_id: name.clone(),
            psnr: None,
            ssim: None,
            uciqe: uciqe_components(&img, &opts.cfg)?.score,
            uiqm: uiqm_components(&img, &opts.cfg)?.score,
        };
        let mut warning = None;
        if let Some(dir) = truth {
            if truth_names.contains(name) {
                let gt = imageio::read_rgb(dir.join(name))?;
                if gt.dim() == img.dim() {
                    row.psnr = Some(psnr(&img, &gt, 1.0)?);
                    row.ssim = Some(ssim_with(&img, &gt, &opts.cfg)?);
                } else {
                    warning = Some(format!(
                        "{name}: output {:?} and truth {:?} differ in size; full-reference metrics skipped",
                        img.dim(),
                        gt.dim()
                    ));
                }
            }
        }
        Ok((row, warning))
    });
    let mut rows = Vec::with_capacity(out_names.len());
    for res in results {
        let (row, warning) = res?;
        rows.push(row);
        warnings.extend(warning);
    }
    let timestamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs().to_string())
        .unwrap_or_else(|_| "0".into());
    Ok(MetricReport {
        method: opts.method.clone(),
        dataset: opts.dataset.clone(),
        timestamp,
        config_hash: opts.config_hash.clone(),
        with_reference: truth.is_some(),
        rows,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng as _, SeedableRng};

    fn noisy(base: &Array3<f64>, sigma: f64, seed: u64) -> Array3<f64> {
        let mut rng = uwr_autodiff::Rng::seed_from_u64(seed);
        base.mapv(|v| {
            let n: f64 = rng.sample::<f64, _>(rand_distr::StandardNormal) * sigma;
            (v + n).clamp(0.0, 1.0)
        })
    }

    fn random_image(h: usize, w: usize, seed: u64) -> Array3<f64> {
        let mut rng = uwr_autodiff::Rng::seed_from_u64(seed);
        Array3::from_shape_fn((3, h, w), |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn psnr_identical_is_infinite_and_offset_is_twenty_db() {
        let a = random_image(8, 8, 1);
        assert!(psnr(&a, &a, 1.0).unwrap().is_infinite());
        let a = Array3::from_elem((3, 8, 8), 0.4);
        let b = Array3::from_elem((3, 8, 8), 0.5);
        let v = psnr(&a, &b, 1.0).unwrap();
        assert!((v - 20.0).abs() < 1e-9, "got {v}");
        assert_eq!(v, psnr(&b, &a, 1.0).unwrap());
    }

    #[test]
    fn psnr_decreases_with_noise_amplitude() {
        let base = random_image(16, 16, 7);
        let p1 = psnr(&base, &noisy(&base, 0.02, 9), 1.0).unwrap();
        let p2 = psnr(&base, &noisy(&base, 0.05, 9), 1.0).unwrap();
        let p3 = psnr(&base, &noisy(&base, 0.10, 9), 1.0).unwrap();
        assert!(p1 > p2 && p2 > p3, "{p1} {p2} {p3}");
    }

    #[test]
    fn ssim_identical_is_one() {
        let a = random_image(16, 16, 3);
        let s = ssim(&a, &a).unwrap();
        assert!((s - 1.0).abs() < 1e-12, "got {s}");
        let c = Array3::from_elem((3, 16, 16), 0.5);
        assert!((ssim(&c, &c).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_is_symmetric_and_penalizes_noise() {
        let a = random_image(16, 16, 5);
        let b = noisy(&a, 0.1, 6);
        let s_ab = ssim(&a, &b).unwrap();
        let s_ba = ssim(&b, &a).unwrap();
        assert!((s_ab - s_ba).abs() < 1e-12);
        assert!(s_ab < 1.0 && s_ab > -1.0);
    }

    #[test]
    fn ssim_window_shrinks_for_small_images_and_rejects_tiny_ones() {
        let a = random_image(4, 4, 11);
        let b = noisy(&a, 0.05, 12);
        assert!(ssim(&a, &b).is_ok());
        let t = random_image(2, 2, 13);
        assert!(ssim(&t, &t).is_err());
    }

    #[test]
    fn gaussian_window_is_normalized_and_symmetric() {
        let k = gaussian_kernel2d(11, 1.5);
        assert!((k.sum() - 1.0).abs() < 1e-12);
        assert!((k[(0, 3)] - k[(0, 7)]).abs() < 1e-15);
        assert!((k[(2, 0)] - k[(8, 0)]).abs() < 1e-15);
    }

    #[test]
    fn uciqe_gray_image_has_zero_chroma_and_contrast() {
        let img = Array3::from_elem((3, 20, 20), 0.5);
        let b = uciqe_components(&img, &QualityConfig::default()).unwrap();
        assert!(b.chroma_std.abs() < 1e-9, "chroma {}", b.chroma_std);
        assert!(b.luma_contrast.abs() < 1e-9);
        assert!(b.mean_saturation.abs() < 1e-6);
    }

    #[test]
    fn uciqe_contrast_grows_with_tone_gap() {
        let cfg = QualityConfig::default();
        let two_tone = |lo: f64, hi: f64| {
            Array3::from_shape_fn((3, 20, 20), |(_, i, _)| if i < 10 { lo } else { hi })
        };
        let narrow = uciqe_components(&two_tone(0.4, 0.6), &cfg).unwrap();
        let wide = uciqe_components(&two_tone(0.1, 0.9), &cfg).unwrap();
        assert!(wide.luma_contrast > narrow.luma_contrast);
    }

    #[test]
    fn uicm_is_zero_for_gray_and_positive_magnitude_for_tinted() {
        let cfg = QualityConfig::default();
        let gray = Array3::from_elem((3, 12, 12), 0.3);
        let b = uiqm_components(&gray, &cfg).unwrap();
        assert_eq!(b.uicm, 0.0);
        let mut tinted = gray.clone();
        for i in 0..12 {
            for j in 0..12 {
                tinted[(0, i, j)] = 0.3 + 0.2 * ((i + j) % 3) as f64 / 3.0;
            }
        }
        assert!(uiqm_components(&tinted, &cfg).unwrap().uicm.abs() > 0.0);
    }

    #[test]
    fn uism_prefers_sharp_checkerboard_over_blurred() {
        let cfg = QualityConfig::default();
        let sharp = Array3::from_shape_fn(
            (3, 20, 20),
            |(_, i, j)| if (i / 2 + j / 2) % 2 == 0 { 0.9 } else { 0.1 },
        );
        // Box-blur the checkerboard to soften every edge.
        let mut blurred = sharp.clone();
        for c in 0..3 {
            for i in 0..20 {
                for j in 0..20 {
                    let mut acc = 0.0;
                    for di in -1i32..=1 {
                        for dj in -1i32..=1 {
                            let ii = (i as i32 + di).clamp(0, 19) as usize;
                            let jj = (j as i32 + dj).clamp(0, 19) as usize;
                            acc += sharp[(c, ii, jj)];
                        }
                    }
                    blurred[(c, i, j)] = acc / 9.0;
                }
            }
        }
        let s = uiqm_components(&sharp, &cfg).unwrap().uism;
        let b = uiqm_components(&blurred, &cfg).unwrap().uism;
        assert!(s > b, "sharp {s} vs blurred {b}");
    }

    #[test]
    fn uiconm_sees_contrast_and_logamee_variant_is_finite() {
        let mut cfg = QualityConfig::default();
        let flat = Array3::from_elem((3, 20, 20), 0.5);
        let contrasty = Array3::from_shape_fn(
            (3, 20, 20),
            |(_, i, j)| if (i + j) % 2 == 0 { 0.85 } else { 0.15 },
        );
        let f = uiqm_components(&flat, &cfg).unwrap().uiconm;
        let c = uiqm_components(&contrasty, &cfg).unwrap().uiconm;
        assert!(c > f, "contrasty {c} vs flat {f}");
        cfg.uiconm_variant = ContrastVariant::Logamee;
        let l = uiqm_components(&contrasty, &cfg).unwrap().uiconm;
        assert!(l.is_finite() && l >= 0.0);
    }

    #[test]
    fn no_reference_metrics_are_flip_invariant() {
        // Width is a multiple of the block size so the block tiling maps onto
        // itself under mirroring.
        let img = random_image(40, 40, 21);
        let flipped = Array3::from_shape_fn((3, 40, 40), |(c, i, j)| img[(c, i, 39 - j)]);
        let cfg = QualityConfig::default();
        let u1 = uciqe_components(&img, &cfg).unwrap();
        let u2 = uciqe_components(&flipped, &cfg).unwrap();
        assert!((u1.score - u2.score).abs() < 1e-12);
        let q1 = uiqm_components(&img, &cfg).unwrap();
        let q2 = uiqm_components(&flipped, &cfg).unwrap();
        assert!((q1.score - q2.score).abs() < 1e-12, "{} vs {}", q1.score, q2.score);
    }

    #[test]
    fn evaluate_produces_rows_and_recomputable_mean() {
        let dir = tempfile::tempdir().unwrap();
        let outs = dir.path().join("outs");
        let truths = dir.path().join("truth");
        std::fs::create_dir_all(&outs).unwrap();
        std::fs::create_dir_all(&truths).unwrap();
        for i in 0..3 {
            let img = random_image(16, 16, 100 + i);
            let gt = noisy(&img, 0.03, 200 + i);
            imageio::write_rgb(outs.join(format!("im{i}.png")), &img).unwrap();
            imageio::write_rgb(truths.join(format!("im{i}.png")), &gt).unwrap();
        }
        // One extra truth image with no matching output.
        imageio::write_rgb(truths.join("orphan.png"), &random_image(8, 8, 999)).unwrap();
        let report = evaluate(&outs, Some(&truths), &EvalOptions::default()).unwrap();
        assert_eq!(report.rows.len(), 3);
        assert!(report.rows.iter().all(|r| r.psnr.is_some() && r.ssim.is_some()));
        assert_eq!(report.warnings.len(), 1);
        let mean_row = report.mean_row();
        let expect = report.rows.iter().map(|r| r.uciqe).sum::<f64>() / 3.0;
        assert!((mean_row.uciqe - expect).abs() < 1e-12);
        let csv = report.to_csv_string();
        assert!(csv.contains("image_id,psnr,ssim,uciqe,uiqm"));
        assert!(csv.lines().any(|l| l.starts_with("__mean__,")));

        let no_ref = evaluate(&outs, None, &EvalOptions::default()).unwrap();
        assert!(no_ref.to_csv_string().contains("image_id,uciqe,uiqm"));
        assert!(!no_ref.to_csv_string().contains("psnr"));
    }

    #[test]
    fn evaluate_is_deterministic_modulo_timestamp() {
        let dir = tempfile::tempdir().unwrap();
        let outs = dir.path().join("outs");
        std::fs::create_dir_all(&outs).unwrap();
        for i in 0..2 {
            imageio::write_rgb(outs.join(format!("im{i}.png")), &random_image(12, 12, i)).unwrap();
        }
        let strip = |s: String| -> String {
            s.lines().filter(|l| !l.starts_with("# timestamp")).collect::<Vec<_>>().join("\n")
        };
        let r1 = strip(evaluate(&outs, None, &EvalOptions::default()).unwrap().to_csv_string());
        let r2 = strip(evaluate(&outs, None, &EvalOptions::default()).unwrap().to_csv_string());
        assert_eq!(r1, r2);
    }
}
