//! PFM, 16-bit PNG and RGB image files.

use std::io::Write;
use std::path::Path;

use himode_autograd::kernels::{bilinear_plane, LinearTaps};
use himode_autograd::Tensor;
use image::{ImageBuffer, Luma, Rgb};

use super::DepthMap;
use crate::error::{config_err, HimodeError, Result};

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| HimodeError::io(path, e))
}

/// Writes a single-channel little-endian PFM with rows top to bottom.
pub fn write_pfm(path: &Path, depth: &DepthMap) -> Result<()> {
    let mut buf = format!("Pf\n{} {}\n-1.0\n", depth.width, depth.height).into_bytes();
    buf.reserve(depth.data.len() * 4);
    for v in &depth.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| HimodeError::io(path, e))?;
    f.write_all(&buf).map_err(|e| HimodeError::io(path, e))
}

/// Reads a single-channel PFM; the sign of the scale selects endianness.
pub fn read_pfm(path: &Path) -> Result<DepthMap> {
    let bytes = read_bytes(path)?;
    let bad = |msg: &str| HimodeError::format(path, msg);
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-text header"))?);
    }
    // Exactly one whitespace byte separates the header from the data.
    pos += 1;
    match fields[0] {
        "Pf" => {}
        "PF" => return Err(bad("three-channel PFM is not a depth map")),
        _ => return Err(bad("missing Pf magic")),
    }
    let w: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    let scale: f64 = fields[3].parse().map_err(|_| bad("bad scale"))?;
    let n = w * h;
    let body = bytes.get(pos..).unwrap_or(&[]);
    if body.len() < n * 4 {
        return Err(bad("truncated pixel data"));
    }
    let data = body[..n * 4]
        .chunks_exact(4)
        .map(|c| {
            let b = [c[0], c[1], c[2], c[3]];
            if scale < 0.0 {
                f32::from_le_bytes(b)
            } else {
                f32::from_be_bytes(b)
            }
        })
        .collect();
    Ok(DepthMap::new(h, w, data))
}

/// Writes depth as 16-bit grayscale, `round(depth / scale)` clamped to the
/// representable range. Non-finite or negative depth becomes 0.
pub fn write_png16(path: &Path, depth: &DepthMap, scale: f64) -> Result<()> {
    let px: Vec<u16> = depth
        .data
        .iter()
        .map(|&d| {
            let q = f64::from(d) / scale;
            if q.is_finite() && q > 0.0 {
                q.round().min(65535.0) as u16
            } else {
                0
            }
        })
        .collect();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(depth.width as u32, depth.height as u32, px).expect("buffer size");
    img.save(path)
        .map_err(|e| HimodeError::format(path, e.to_string()))
}

pub fn read_png16(path: &Path, scale: f64) -> Result<DepthMap> {
    let bytes = read_bytes(path)?;
    let img =
        image::load_from_memory(&bytes).map_err(|e| HimodeError::format(path, e.to_string()))?;
    let gray = img.into_luma16();
    let (w, h) = gray.dimensions();
    let data = gray
        .into_raw()
        .into_iter()
        .map(|v| (f64::from(v) * scale) as f32)
        .collect();
    Ok(DepthMap::new(h as usize, w as usize, data))
}

/// Loads a depth map and its validity mask. PFM files are detected by their
/// magic; PNG files need `png_scale` (meters per unit).
pub fn load_depth(path: &Path, png_scale: Option<f64>) -> Result<(DepthMap, Vec<bool>)> {
    let bytes = read_bytes(path)?;
    let depth = if bytes.starts_with(b"Pf") || bytes.starts_with(b"PF") {
        read_pfm(path)?
    } else if bytes.starts_with(b"\x89PNG") {
        match png_scale {
            Some(s) if s > 0.0 => read_png16(path, s)?,
            _ => {
                return config_err(format!(
                    "{} is a 16-bit PNG but no depth scale was given",
                    path.display()
                ))
            }
        }
    } else {
        return Err(HimodeError::format(
            path,
            "unknown depth format (expected PFM or PNG)",
        ));
    };
    let mask = depth.valid_mask();
    Ok((depth, mask))
}

/// Bilinearly resizes `c` planes of `h x w` to `oh x ow` (half-pixel
/// centres, edge clamp).
pub fn resize_planes(data: &[f32], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    if (h, w) == (oh, ow) {
        return data.to_vec();
    }
    let ty = LinearTaps::<f32>::new(h, oh);
    let tx = LinearTaps::<f32>::new(w, ow);
    let mut out = vec![0.0; c * oh * ow];
    for (src, dst) in data.chunks(h * w).zip(out.chunks_mut(oh * ow)) {
        bilinear_plane(src, w, &ty, &tx, dst);
    }
    out
}

/// Decodes an image to `[3, H, W]` floats in `[0, 1]`, resized to `target`
/// when given.
pub fn load_image(path: &Path, target: Option<(usize, usize)>) -> Result<Tensor<f32>> {
    let bytes = read_bytes(path)?;
    let img =
        image::load_from_memory(&bytes).map_err(|e| HimodeError::format(path, e.to_string()))?;
    let rgb = img.into_rgb32f();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let raw = rgb.into_raw();
    let mut planes = vec![0.0f32; 3 * h * w];
    for (i, px) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            planes[c * h * w + i] = px[c].clamp(0.0, 1.0);
        }
    }
    let (oh, ow) = target.unwrap_or((h, w));
    let data = resize_planes(&planes, 3, h, w, oh, ow);
    Ok(Tensor::new(&[3, oh, ow], data)?)
}

/// Saves a `[3, H, W]` tensor in `[0, 1]` as an 8-bit PNG.
pub fn save_rgb_png(path: &Path, rgb: &Tensor<f32>) -> Result<()> {
    let s = rgb.shape();
    let (h, w) = (s[1], s[2]);
    let d = rgb.data();
    let mut px = Vec::with_capacity(3 * h * w);
    for i in 0..h * w {
        for c in 0..3 {
            px.push((d[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let img: ImageBuffer<Rgb<u8>, Vec<u8>> =
        ImageBuffer::from_raw(w as u32, h as u32, px).expect("buffer size");
    img.save(path)
        .map_err(|e| HimodeError::format(path, e.to_string()))
}
