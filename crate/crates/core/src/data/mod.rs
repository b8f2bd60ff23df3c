//! Image and depth files, dataset manifests and synthetic rooms.

pub mod io;
pub mod manifest;
pub mod synth;

pub use io::{
    load_depth, load_image, read_pfm, read_png16, resize_planes, save_rgb_png, write_pfm,
    write_png16,
};
pub use manifest::{
    epoch_order, iterate_split, read_manifest, DatasetManifest, ManifestRecord, Split,
};
pub use synth::{synth_room, write_synthetic_dataset, RoomSpec};

use himode_autograd::Tensor;

/// Metric depth map, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), height * width, "depth map size");
        Self {
            height,
            width,
            data,
        }
    }

    /// True where the depth is positive and finite.
    pub fn valid_mask(&self) -> Vec<bool> {
        self.data
            .iter()
            .map(|&d| d > 0.0 && d.is_finite())
            .collect()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }
}

/// One RGB panorama with its ground truth.
#[derive(Clone, Debug)]
pub struct ImageSample {
    pub id: String,
    /// `[3, H, W]` in `[0, 1]`.
    pub rgb: Tensor<f32>,
    pub depth: DepthMap,
    pub mask: Vec<bool>,
}
