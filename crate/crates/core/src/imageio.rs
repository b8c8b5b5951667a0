//! Image and depth-map file I/O.
//!
//! RGB images are held as `Array3<f64>` in `[channel, height, width]` layout
//! with values in `[0, 1]`. Depth maps are `Array2<f64>` in meters. On disk,
//! RGB is 8-bit PNG or JPEG; depth is either 16-bit grayscale PNG storing
//! millimeters, or a raw little-endian float file (see [`read_depth_uwd`]).

use std::io::{Read, Write};
use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use ndarray::{Array2, Array3, Array4, Axis};

use crate::error::{Error, Result};

/// Magic bytes of the raw float depth format.
pub const DEPTH_RAW_MAGIC: &[u8; 4] = b"UWD1";

/// Decode an 8-bit RGB image (PNG or JPEG) to float `[3, h, w]` in `[0, 1]`.
pub fn read_rgb(path: impl AsRef<Path>) -> Result<Array3<f64>> {
    let path = path.as_ref();
    let img = image::open(path)
        .map_err(|e| Error::image(path, e.to_string()))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::zeros((3, h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[(c, y as usize, x as usize)] = px.0[c] as f64 / 255.0;
        }
    }
    Ok(out)
}

/// Quantize a `[0, 1]` value to one 8-bit level.
pub fn quantize8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write an RGB image as 8-bit PNG or JPEG (chosen by extension).
pub fn write_rgb(path: impl AsRef<Path>, img: &Array3<f64>) -> Result<()> {
    let path = path.as_ref();
    let (c, h, w) = img.dim();
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let buf = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Rgb([
            quantize8(img[(0, y as usize, x as usize)]),
            quantize8(img[(1, y as usize, x as usize)]),
            quantize8(img[(2, y as usize, x as usize)]),
        ])
    });
    buf.save(path).map_err(|e| Error::image(path, e.to_string()))
}

/// Read a depth map in meters. `.uwd` files use the raw float format;
/// anything else must be a 16-bit grayscale PNG storing millimeters.
pub fn read_depth(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let path = path.as_ref();
    if path.extension().and_then(|e| e.to_str()) == Some("uwd") {
        return read_depth_uwd(path);
    }
    let img = image::open(path).map_err(|e| Error::image(path, e.to_string()))?;
    match img {
        DynamicImage::ImageLuma16(buf) => {
            let (w, h) = buf.dimensions();
            let mut out = Array2::zeros((h as usize, w as usize));
            for (x, y, px) in buf.enumerate_pixels() {
                out[(y as usize, x as usize)] = px.0[0] as f64 / 1000.0;
            }
            Ok(out)
        }
        other => Err(Error::image(
            path,
            format!(
                "depth PNG must be 16-bit grayscale (millimeters), got {:?}",
                other.color()
            ),
        )),
    }
}

/// Write a depth map (meters) as 16-bit grayscale PNG in millimeters,
/// saturating at the u16 range.
pub fn write_depth_png16(path: impl AsRef<Path>, depth_m: &Array2<f64>) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = depth_m.dim();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let mm = (depth_m[(y as usize, x as usize)] * 1000.0).round();
        Luma([mm.clamp(0.0, u16::MAX as f64) as u16])
    });
    buf.save(path).map_err(|e| Error::image(path, e.to_string()))
}

/// Read the raw float depth format: 16-byte header (magic `UWD1`,
/// u32 height, u32 width, u32 reserved, all little-endian) followed by
/// `height * width` row-major little-endian f32 meters.
pub fn read_depth_uwd(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let path = path.as_ref();
    let mut file = std::fs::File::open(path).map_err(Error::io(path))?;
    let mut header = [0u8; 16];
    file.read_exact(&mut header).map_err(Error::io(path))?;
    if &header[0..4] != DEPTH_RAW_MAGIC {
        return Err(Error::image(path, "bad magic, expected UWD1"));
    }
    let h = u32::from_le_bytes(header[4..8].try_into().expect("4 bytes")) as usize;
    let w = u32::from_le_bytes(header[8..12].try_into().expect("4 bytes")) as usize;
    let mut data = vec![0u8; h * w * 4];
    file.read_exact(&mut data).map_err(Error::io(path))?;
    let vals: Vec<f64> = data
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
        .collect();
    Array2::from_shape_vec((h, w), vals)
        .map_err(|e| Error::image(path, format!("bad payload size: {e}")))
}

/// Write a depth map in the raw float format described on [`read_depth_uwd`].
pub fn write_depth_uwd(path: impl AsRef<Path>, depth_m: &Array2<f64>) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = depth_m.dim();
    let mut bytes = Vec::with_capacity(16 + h * w * 4);
    bytes.extend_from_slice(DEPTH_RAW_MAGIC);
    bytes.extend_from_slice(&(h as u32).to_le_bytes());
    bytes.extend_from_slice(&(w as u32).to_le_bytes());
    bytes.extend_from_slice(&0u32.to_le_bytes());
    for v in depth_m.iter() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let mut file = std::fs::File::create(path).map_err(Error::io(path))?;
    file.write_all(&bytes).map_err(Error::io(path))
}

/// Bilinear resize with half-pixel-aligned sample centers.
pub fn resize_bilinear(img: &Array3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (c, h, w) = img.dim();
    if (h, w) == (out_h, out_w) {
        return img.clone();
    }
    let taps = |dst: usize, src_len: usize, out_len: usize| -> (usize, usize, f64) {
        let s = (dst as f64 + 0.5) * src_len as f64 / out_len as f64 - 0.5;
        let f = s.floor();
        let frac = s - f;
        let max = (src_len - 1) as f64;
        (
            f.clamp(0.0, max) as usize,
            (f + 1.0).clamp(0.0, max) as usize,
            frac,
        )
    };
    let mut out = Array3::zeros((c, out_h, out_w));
    for ch in 0..c {
        for i in 0..out_h {
            let (y0, y1, wy) = taps(i, h, out_h);
            for j in 0..out_w {
                let (x0, x1, wx) = taps(j, w, out_w);
                out[(ch, i, j)] = (1.0 - wy) * (1.0 - wx) * img[(ch, y0, x0)]
                    + (1.0 - wy) * wx * img[(ch, y0, x1)]
                    + wy * (1.0 - wx) * img[(ch, y1, x0)]
                    + wy * wx * img[(ch, y1, x1)];
            }
        }
    }
    out
}

/// Stack same-sized `[3, h, w]` images into a `[n, 3, h, w]` batch.
pub fn stack_images(imgs: &[Array3<f64>]) -> Result<Array4<f64>> {
    if imgs.is_empty() {
        return Err(Error::Domain("empty image batch".into()));
    }
    let (c, h, w) = imgs[0].dim();
    let mut out = Array4::zeros((imgs.len(), c, h, w));
    for (i, img) in imgs.iter().enumerate() {
        if img.dim() != (c, h, w) {
            return Err(Error::Shape(format!(
                "batch image {i} is {:?}, expected {:?}",
                img.dim(),
                (c, h, w)
            )));
        }
        out.index_axis_mut(Axis(0), i).assign(img);
    }
    Ok(out)
}
