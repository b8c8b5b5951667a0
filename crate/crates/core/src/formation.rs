//! Physics-based synthesis of underwater appearance from clean RGB-D input.
//!
//! A clean image `J` seen through a water column of depth `d` becomes
//! `I_c = J_c * t_c + A_c * (1 - t_c)` per channel `c`, where the
//! transmission `t_c = exp(-beta_c * depth_scale * d)` is the fraction of
//! light surviving attenuation and `A_c` is the ambient (veiling) light.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use uwr_autodiff::par;

use crate::error::{Error, Result};

/// A clean RGB image with its aligned depth map (meters).
#[derive(Clone, Debug)]
pub struct SceneSample {
    pub clean: Array3<f64>,
    pub depth: Array2<f64>,
}

impl SceneSample {
    /// Validate and wrap a clean image + depth pair.
    pub fn new(clean: Array3<f64>, depth: Array2<f64>) -> Result<Self> {
        let (c, h, w) = clean.dim();
        if c != 3 {
            return Err(Error::Shape(format!("clean image must have 3 channels, got {c}")));
        }
        if depth.dim() != (h, w) {
            return Err(Error::Shape(format!(
                "depth {:?} does not match image {:?}",
                depth.dim(),
                (h, w)
            )));
        }
        if !clean.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(Error::Domain("clean image values must be finite and in [0, 1]".into()));
        }
        validate_depth(&depth)?;
        Ok(SceneSample { clean, depth })
    }
}

/// Per-channel attenuation and ambient light for one water type.
/// Channel order is `[r, g, b]` throughout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaterParams {
    pub label: String,
    pub beta: [f64; 3],
    pub ambient: [f64; 3],
    pub depth_scale: f64,
}

impl WaterParams {
    pub fn validate(&self) -> Result<()> {
        if self.label.is_empty() {
            return Err(Error::Domain("water type label must be non-empty".into()));
        }
        if !self.beta.iter().all(|b| b.is_finite() && *b >= 0.0) {
            return Err(Error::Domain(format!(
                "water type {}: beta components must be finite and >= 0",
                self.label
            )));
        }
        if !self.ambient.iter().all(|a| (0.0..=1.0).contains(a)) {
            return Err(Error::Domain(format!(
                "water type {}: ambient components must be in [0, 1]",
                self.label
            )));
        }
        if !(self.depth_scale.is_finite() && self.depth_scale > 0.0) {
            return Err(Error::Domain(format!(
                "water type {}: depth_scale must be positive",
                self.label
            )));
        }
        Ok(())
    }

    /// Copy with ambient light jittered uniformly by `±amount`, clamped to
    /// `[0, 1]`. Adds per-image diversity without changing the model.
    pub fn jitter_ambient(&self, rng: &mut uwr_autodiff::Rng, amount: f64) -> WaterParams {
        let mut out = self.clone();
        for a in &mut out.ambient {
            *a = (*a + rng.gen_range(-amount..=amount)).clamp(0.0, 1.0);
        }
        out
    }
}

fn validate_depth(depth: &Array2<f64>) -> Result<()> {
    if !depth.iter().all(|d| d.is_finite() && *d >= 0.0) {
        return Err(Error::Domain("depth values must be finite and >= 0".into()));
    }
    Ok(())
}

/// Per-pixel, per-channel fraction of light surviving the water column:
/// `t_c = exp(-beta_c * depth_scale * d)`. Output is `[3, h, w]` in `(0, 1]`;
/// `t = 1` exactly where `d = 0`.
pub fn transmission_map(depth: &Array2<f64>, params: &WaterParams) -> Result<Array3<f64>> {
    params.validate()?;
    validate_depth(depth)?;
    let (h, w) = depth.dim();
    let k = [
        params.beta[0] * params.depth_scale,
        params.beta[1] * params.depth_scale,
        params.beta[2] * params.depth_scale,
    ];
    let rows: Vec<[Vec<f64>; 3]> = par::map_indexed(h, |i| {
        let mut row = [vec![0.0; w], vec![0.0; w], vec![0.0; w]];
        for j in 0..w {
            let d = depth[(i, j)];
            for c in 0..3 {
                row[c][j] = (-k[c] * d).exp();
            }
        }
        row
    });
    let mut out = Array3::zeros((3, h, w));
    for (i, row) in rows.into_iter().enumerate() {
        for (c, vals) in row.into_iter().enumerate() {
            for (j, v) in vals.into_iter().enumerate() {
                out[(c, i, j)] = v;
            }
        }
    }
    Ok(out)
}

/// Apply the formation model: `I_c = J_c * t_c + A_c * (1 - t_c)`.
///
/// The result is a convex combination of the clean value and the ambient
/// light, so it cannot legitimately leave `[0, 1]`; floating-point overshoot
/// up to `1e-6` is clipped and anything larger is an error.
pub fn synthesize_underwater(sample: &SceneSample, params: &WaterParams) -> Result<Array3<f64>> {
    let t = transmission_map(&sample.depth, params)?;
    let (_, h, w) = sample.clean.dim();
    let rows: Vec<[Vec<f64>; 3]> = par::map_indexed(h, |i| {
        let mut row = [vec![0.0; w], vec![0.0; w], vec![0.0; w]];
        for c in 0..3 {
            let a = params.ambient[c];
            for j in 0..w {
                let tc = t[(c, i, j)];
                row[c][j] = sample.clean[(c, i, j)] * tc + a * (1.0 - tc);
            }
        }
        row
    });
    let mut out = Array3::zeros((3, h, w));
    for (i, row) in rows.into_iter().enumerate() {
        for (c, vals) in row.into_iter().enumerate() {
            for (j, v) in vals.into_iter().enumerate() {
                if !(-1e-6..=1.0 + 1e-6).contains(&v) {
                    return Err(Error::Domain(format!(
                        "synthesized value {v} at channel {c}, pixel ({i}, {j}) is out of range"
                    )));
                }
                out[(c, i, j)] = v.clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

/// Built-in water types. Attenuation defaults derive from per-meter
/// transmission tables for clear oceanic (type-I) and coastal (type-III)
/// water; ambient defaults are documented placeholders tuned for plausible
/// blue/green casts. All values can be overridden via [`load_water_types`].
pub fn builtin_water_types() -> Vec<WaterParams> {
    vec![
        WaterParams {
            label: "type-I".into(),
            beta: [0.1625, 0.0398, 0.0182],
            ambient: [0.32, 0.55, 0.68],
            depth_scale: 1.0,
        },
        WaterParams {
            label: "type-III".into(),
            beta: [0.2877, 0.1222, 0.1165],
            ambient: [0.28, 0.46, 0.42],
            depth_scale: 1.0,
        },
    ]
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WaterTypeFile {
    beta_r: f64,
    beta_g: f64,
    beta_b: f64,
    ambient_r: f64,
    ambient_g: f64,
    ambient_b: f64,
    #[serde(default = "default_depth_scale")]
    depth_scale: f64,
}

fn default_depth_scale() -> f64 {
    1.0
}

/// Load water types from a config file: one `[label]` section per type with
/// keys `beta_r/g/b`, `ambient_r/g/b`, and optional `depth_scale`. Entries
/// override same-labeled built-ins; unlisted built-ins are kept. The result
/// is sorted by label.
pub fn load_water_types(path: impl AsRef<Path>) -> Result<Vec<WaterParams>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
    let table: BTreeMap<String, WaterTypeFile> =
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut merged: BTreeMap<String, WaterParams> = builtin_water_types()
        .into_iter()
        .map(|p| (p.label.clone(), p))
        .collect();
    for (label, row) in table {
        let params = WaterParams {
            label: label.clone(),
            beta: [row.beta_r, row.beta_g, row.beta_b],
            ambient: [row.ambient_r, row.ambient_g, row.ambient_b],
            depth_scale: row.depth_scale,
        };
        params.validate()?;
        merged.insert(label, params);
    }
    Ok(merged.into_values().collect())
}

/// Load built-ins, optionally overridden from a config file.
pub fn water_types_from(config: Option<&Path>) -> Result<Vec<WaterParams>> {
    match config {
        Some(path) => load_water_types(path),
        None => Ok(builtin_water_types()),
    }
}
