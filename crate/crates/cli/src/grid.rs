//! Comparison-figure grids: one labeled column per method, one row per image.

use std::path::{Path, PathBuf};

use ndarray::Array3;
use uwr_core::{imageio, Error, Result};

use crate::font;

/// One method column: a verbatim label plus its image files, top to bottom.
#[derive(Clone, Debug)]
pub struct GridColumn {
    pub label: String,
    pub images: Vec<PathBuf>,
}

const GUTTER: usize = 2;
const LABEL_PAD: usize = 3;

/// Mid-gray tile with a dark cross, standing in for an unreadable image.
fn placeholder_tile(tile_h: usize, tile_w: usize) -> Array3<f64> {
    let mut tile = Array3::from_elem((3, tile_h, tile_w), 0.85);
    for i in 0..tile_h {
        let j = ((i as f64 / tile_h.max(1) as f64) * tile_w as f64) as usize;
        for dj in [j, tile_w.saturating_sub(1 + j)] {
            if dj < tile_w {
                for c in 0..3 {
                    tile[[c, i, dj]] = 0.3;
                }
            }
        }
    }
    tile
}

fn load_tile(path: &Path, tile_h: usize, tile_w: usize) -> std::result::Result<Array3<f64>, String> {
    let img = imageio::read_rgb(path).map_err(|e| e.to_string())?;
    let (_, h, w) = img.dim();
    if (h, w) == (tile_h, tile_w) {
        Ok(img)
    } else {
        Ok(imageio::resize_bilinear(&img, tile_h, tile_w))
    }
}

/// Largest scale (at least 1) at which every label fits its tile width.
fn label_scale(columns: &[GridColumn], tile_w: usize) -> usize {
    (1..=3)
        .rev()
        .find(|s| {
            columns
                .iter()
                .all(|c| font::text_width(&c.label, *s) + 2 <= tile_w)
        })
        .unwrap_or(1)
}

/// Compose the grid and write it as a lossless PNG. Unreadable or missing
/// images become placeholder tiles; the corresponding messages are returned
/// as warnings rather than failing the figure.
pub fn emit_grid(
    columns: &[GridColumn],
    tile_h: usize,
    tile_w: usize,
    out: &Path,
) -> Result<Vec<String>> {
    if columns.is_empty() {
        return Err(Error::Domain("grid needs at least one column".into()));
    }
    if tile_h < 8 || tile_w < 8 {
        return Err(Error::Config("grid tiles must be at least 8x8".into()));
    }
    let ext = out
        .extension()
        .map(|e| e.to_string_lossy().to_ascii_lowercase())
        .unwrap_or_default();
    if ext != "png" {
        return Err(Error::Config(format!(
            "grid output must be a .png file, got {}",
            out.display()
        )));
    }
    let n_rows = columns.iter().map(|c| c.images.len()).max().unwrap_or(0);
    if n_rows == 0 {
        return Err(Error::Domain("grid columns hold no images".into()));
    }
    let n_cols = columns.len();
    let scale = label_scale(columns, tile_w);
    let band = font::GLYPH_H * scale + 2 * LABEL_PAD;
    let height = band + n_rows * (tile_h + GUTTER) + GUTTER;
    let width = GUTTER + n_cols * (tile_w + GUTTER);
    let mut canvas = Array3::from_elem((3, height, width), 1.0);
    let mut warnings = Vec::new();

    for (ci, column) in columns.iter().enumerate() {
        let x0 = GUTTER + ci * (tile_w + GUTTER);
        let text_w = font::text_width(&column.label, scale);
        let text_x = x0 + (tile_w.saturating_sub(text_w)) / 2;
        font::draw_text(&mut canvas, &column.label, LABEL_PAD, text_x, scale, [0.0, 0.0, 0.0]);
        for row in 0..n_rows {
            let tile = match column.images.get(row) {
                Some(path) => load_tile(path, tile_h, tile_w).unwrap_or_else(|e| {
                    warnings.push(format!("{}: {e}; placeholder used", path.display()));
                    placeholder_tile(tile_h, tile_w)
                }),
                None => {
                    warnings.push(format!(
                        "column {:?} has no image for row {}; placeholder used",
                        column.label, row
                    ));
                    placeholder_tile(tile_h, tile_w)
                }
            };
            let y0 = band + row * (tile_h + GUTTER);
            for c in 0..3 {
                for i in 0..tile_h {
                    for j in 0..tile_w {
                        canvas[[c, y0 + i, x0 + j]] = tile[[c, i, j]];
                    }
                }
            }
        }
    }
    imageio::write_rgb(out, &canvas)?;
    Ok(warnings)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn write_toy(dir: &Path, name: &str, level: f64) -> PathBuf {
        let path = dir.join(name);
        let img = Array3::from_elem((3, 12, 10), level);
        imageio::write_rgb(&path, &img).unwrap();
        path
    }

    #[test]
    fn grid_composes_rows_by_columns_with_placeholders() {
        let dir = tempfile::tempdir().unwrap();
        let a = write_toy(dir.path(), "a.png", 0.2);
        let b = write_toy(dir.path(), "b.png", 0.6);
        let missing = dir.path().join("missing.png");
        let out = dir.path().join("grid.png");
        let columns = vec![
            GridColumn { label: "Input".into(), images: vec![a.clone(), b.clone(), missing] },
            GridColumn { label: "Ours".into(), images: vec![b, a] },
        ];
        let warnings = emit_grid(&columns, 16, 16, &out).unwrap();
        // One unreadable file plus one short column.
        assert_eq!(warnings.len(), 2);
        let img = imageio::read_rgb(&out).unwrap();
        // "Input" is wider than a 16px tile at every scale, so the label
        // falls back to scale 1.
        let band = font::GLYPH_H + 2 * LABEL_PAD;
        assert_eq!(img.dim(), (3, band + 3 * (16 + GUTTER) + GUTTER, GUTTER + 2 * (16 + GUTTER)));
    }

    #[test]
    fn grid_output_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let a = write_toy(dir.path(), "a.png", 0.4);
        let columns = vec![GridColumn { label: "M".into(), images: vec![a] }];
        let out1 = dir.path().join("g1.png");
        let out2 = dir.path().join("g2.png");
        emit_grid(&columns, 16, 16, &out1).unwrap();
        emit_grid(&columns, 16, 16, &out2).unwrap();
        assert_eq!(std::fs::read(out1).unwrap(), std::fs::read(out2).unwrap());
    }

    #[test]
    fn non_png_output_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let a = write_toy(dir.path(), "a.png", 0.4);
        let columns = vec![GridColumn { label: "M".into(), images: vec![a] }];
        let err = emit_grid(&columns, 16, 16, &dir.path().join("grid.jpg")).unwrap_err();
        assert!(err.to_string().contains("png"), "{err}");
    }
}
