use std::path::{Path, PathBuf};

use himode_autograd::Tensor;
use image::{ImageBuffer, Rgb};
use serde::{Deserialize, Serialize};

use crate::data::{load_image, write_pfm, write_png16, DepthMap};
use crate::error::{HimodeError, Result};
use crate::model::HiMode;
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictOutputs {
    pub pfm: PathBuf,
    pub png16: PathBuf,
    pub color: PathBuf,
    pub sidecar: PathBuf,
    /// Meters per 16-bit PNG unit.
    pub depth_scale: f64,
    pub height: usize,
    pub width: usize,
}

/// Colour-maps depth over `[0, d_max]`, near warm and far cool.
pub fn colorize(depth: &DepthMap, d_max: f64) -> ImageBuffer<Rgb<u8>, Vec<u8>> {
    let mut px = Vec::with_capacity(3 * depth.data.len());
    for &d in &depth.data {
        let t = (f64::from(d) / d_max).clamp(0.0, 1.0);
        let c = colorous::TURBO.eval_continuous(1.0 - t);
        px.extend_from_slice(&[c.r, c.g, c.b]);
    }
    ImageBuffer::from_raw(depth.width as u32, depth.height as u32, px).expect("buffer size")
}

/// Runs the model on one image at the configured resolution and writes
/// `depth.pfm`, `depth16.png`, `depth_color.png` and `depth.json`.
pub fn predict_to_dir(
    model: &HiMode,
    params: &ParamStore<f32>,
    image: &Path,
    out_dir: &Path,
) -> Result<PredictOutputs> {
    let cfg = &model.config;
    let rgb = load_image(image, Some((cfg.height, cfg.width)))?;
    let x = Tensor::new(&[1, 3, cfg.height, cfg.width], rgb.into_data())?;
    let d = model.predict(params, &x)?;
    let depth = DepthMap::new(cfg.height, cfg.width, d.into_data());
    std::fs::create_dir_all(out_dir).map_err(|e| HimodeError::io(out_dir, e))?;
    let scale = cfg.d_max / 65535.0;
    let out = PredictOutputs {
        pfm: out_dir.join("depth.pfm"),
        png16: out_dir.join("depth16.png"),
        color: out_dir.join("depth_color.png"),
        sidecar: out_dir.join("depth.json"),
        depth_scale: scale,
        height: cfg.height,
        width: cfg.width,
    };
    write_pfm(&out.pfm, &depth)?;
    write_png16(&out.png16, &depth, scale)?;
    colorize(&depth, cfg.d_max)
        .save(&out.color)
        .map_err(|e| HimodeError::format(&out.color, e.to_string()))?;
    let json = serde_json::to_string_pretty(&out).expect("sidecar serializes");
    std::fs::write(&out.sidecar, json).map_err(|e| HimodeError::io(&out.sidecar, e))?;
    Ok(out)
}
