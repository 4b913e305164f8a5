//! Grayscale PNG export of axis-aligned slices.

use std::fs;
use std::path::Path;

use rotview_core::geometry::Volume3D;

use crate::error::CliError;

/// In-plane axes `(columns, rows)` of a slice normal to `axis`.
fn plane_axes(axis: usize) -> (usize, usize) {
    match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    }
}

/// 8-bit pixels of slice `index` along `axis`, min-max windowed; a constant
/// slice maps to mid gray. Returns `(width, height, pixels)`.
pub fn slice_pixels(vol: &Volume3D, axis: usize, index: usize) -> Result<(usize, usize, Vec<u8>), CliError> {
    let dims = vol.dims();
    if axis > 2 {
        return Err(CliError::Usage(format!("slice axis must be 0, 1 or 2, got {axis}")));
    }
    if index >= dims[axis] {
        return Err(CliError::Usage(format!(
            "slice index {index} out of range for axis {axis} with {} slices",
            dims[axis]
        )));
    }
    let (u, v) = plane_axes(axis);
    let (w, h) = (dims[u], dims[v]);
    let at = |a: usize, b: usize| {
        let mut idx = [0usize; 3];
        idx[axis] = index;
        idx[u] = a;
        idx[v] = b;
        vol.get(idx[0], idx[1], idx[2])
    };
    let values: Vec<f64> = (0..h)
        .flat_map(|b| (0..w).map(move |a| (a, b)))
        .map(|(a, b)| at(a, b))
        .collect();
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| (l.min(x), h.max(x)));
    let pixels = values
        .iter()
        .map(|&x| {
            if hi > lo {
                ((x - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                128
            }
        })
        .collect();
    Ok((w, h, pixels))
}

/// Encodes the pixels of [`slice_pixels`] as PNG.
pub fn encode_slice_png(vol: &Volume3D, axis: usize, index: usize) -> Result<Vec<u8>, CliError> {
    let (w, h, pixels) = slice_pixels(vol, axis, index)?;
    let mut out = Vec::new();
    let png_err = |e: png::EncodingError| CliError::Png {
        path: "<memory>".into(),
        message: e.to_string(),
    };
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(png_err)?;
        writer.write_image_data(&pixels).map_err(png_err)?;
    }
    Ok(out)
}

/// Writes slice `index` along `axis` to `path` as an 8-bit grayscale PNG.
pub fn export_slice_png(vol: &Volume3D, axis: usize, index: usize, path: &Path) -> Result<(), CliError> {
    let bytes = encode_slice_png(vol, axis, index)?;
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}
