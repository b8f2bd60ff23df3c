//! Equirectangular renderings of box-shaped rooms with analytic depth.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use himode_autograd::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::io::{save_rgb_png, write_pfm};
use super::manifest::{ManifestRecord, Split};
use super::{DepthMap, ImageSample};
use crate::error::{HimodeError, Result};

/// An axis-aligned room `[0, Lx] x [0, Ly] x [0, Lz]` (z up) seen from
/// `camera`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoomSpec {
    pub seed: u64,
    pub extents: [f64; 3],
    pub camera: [f64; 3],
    /// Rectangular ground-truth holes to punch into the depth map.
    pub holes: usize,
}

impl RoomSpec {
    /// A random room between 3 and 6 m wide with the camera at least 0.5 m
    /// from every wall.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let extents = [
            rng.gen_range(3.0..6.0),
            rng.gen_range(3.0..6.0),
            rng.gen_range(2.4..3.5),
        ];
        let camera = [
            rng.gen_range(0.5..extents[0] - 0.5),
            rng.gen_range(0.5..extents[1] - 0.5),
            rng.gen_range(1.0..extents[2] - 0.5),
        ];
        Self {
            seed,
            extents,
            camera,
            holes: 0,
        }
    }
}

/// Unit ray for pixel `(u, v)` of a `w x h` panorama: azimuth
/// `2 pi u / w - pi`, elevation `pi / 2 - pi v / h` (top row is the zenith).
pub fn pixel_ray(u: f64, v: f64, w: usize, h: usize) -> [f64; 3] {
    let theta = 2.0 * PI * u / w as f64 - PI;
    let phi = PI / 2.0 - PI * v / h as f64;
    [phi.cos() * theta.cos(), phi.cos() * theta.sin(), phi.sin()]
}

/// Distance from `origin` along `dir` to the nearest box wall, and which
/// wall (`2 * axis + side`) it hits.
pub fn ray_box_depth(origin: [f64; 3], dir: [f64; 3], extents: [f64; 3]) -> (f64, usize) {
    let mut best = (f64::INFINITY, 0);
    for axis in 0..3 {
        let d = dir[axis];
        if d.abs() < 1e-12 {
            continue;
        }
        let (bound, side) = if d > 0.0 {
            (extents[axis], 1)
        } else {
            (0.0, 0)
        };
        let t = (bound - origin[axis]) / d;
        if t < best.0 {
            best = (t, 2 * axis + side);
        }
    }
    best
}

fn hash01(seed: u64, a: u64, b: u64) -> f64 {
    let mut z =
        seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

/// Renders the room. Depth is exact; colour is a per-wall tint darkened
/// with distance, a 0.5 m tile pattern and a little seeded noise.
pub fn synth_room(spec: &RoomSpec, height: usize, width: usize) -> Result<ImageSample> {
    let inside = (0..3).all(|k| spec.camera[k] > 0.0 && spec.camera[k] < spec.extents[k]);
    if !inside || spec.extents.iter().any(|&l| !(l > 0.0)) {
        return Err(HimodeError::Domain(format!(
            "camera {:?} is not strictly inside a {:?} room",
            spec.camera, spec.extents
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let tints: Vec<[f64; 3]> = (0..6)
        .map(|_| {
            [
                rng.gen_range(0.3..1.0),
                rng.gen_range(0.3..1.0),
                rng.gen_range(0.3..1.0),
            ]
        })
        .collect();
    let (h, w) = (height, width);
    let mut depth = vec![0.0f32; h * w];
    let mut rgb = vec![0.0f32; 3 * h * w];
    for v in 0..h {
        for u in 0..w {
            let dir = pixel_ray(u as f64, v as f64, w, h);
            let (t, wall) = ray_box_depth(spec.camera, dir, spec.extents);
            let hit = [0, 1, 2].map(|k| spec.camera[k] + t * dir[k]);
            let axis = wall / 2;
            let (a, b) = ((axis + 1) % 3, (axis + 2) % 3);
            let tile = ((hit[a] / 0.5).floor() + (hit[b] / 0.5).floor()) as i64;
            let pattern = if tile.rem_euclid(2) == 0 { 0.08 } else { -0.08 };
            let shade = 0.35 + 0.65 * (-0.25 * t).exp();
            let i = v * w + u;
            for c in 0..3 {
                let noise = 0.04 * (hash01(spec.seed, i as u64, c as u64) - 0.5);
                rgb[c * h * w + i] =
                    (tints[wall][c] * shade + pattern + noise).clamp(0.0, 1.0) as f32;
            }
            depth[i] = t as f32;
        }
    }
    for _ in 0..spec.holes {
        let hh = rng.gen_range(1..=(h / 4).max(1));
        let hw = rng.gen_range(1..=(w / 4).max(1));
        let y0 = rng.gen_range(0..=h - hh);
        let x0 = rng.gen_range(0..=w - hw);
        for y in y0..y0 + hh {
            depth[y * w + x0..y * w + x0 + hw].fill(0.0);
        }
    }
    let depth = DepthMap::new(h, w, depth);
    let mask = depth.valid_mask();
    Ok(ImageSample {
        id: format!("room{:05}", spec.seed),
        rgb: Tensor::new(&[3, h, w], rgb)?,
        depth,
        mask,
    })
}

/// Writes `count` random rooms as `<id>.png` / `<id>.pfm` pairs plus a
/// `manifest.jsonl`, split 80/10/10 (at least one training image).
/// Returns the manifest path.
pub fn write_synthetic_dataset(
    dir: &Path,
    count: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<std::path::PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| HimodeError::io(dir, e))?;
    let n_val = count / 10;
    let n_test = count / 10;
    let n_train = count - n_val - n_test;
    let mut lines = String::new();
    for k in 0..count {
        let spec = RoomSpec::random(seed.wrapping_mul(1_000_003).wrapping_add(k as u64));
        let mut sample = synth_room(&spec, height, width)?;
        sample.id = format!("room{k:05}");
        let rgb_name = format!("{}.png", sample.id);
        let depth_name = format!("{}.pfm", sample.id);
        save_rgb_png(&dir.join(&rgb_name), &sample.rgb)?;
        write_pfm(&dir.join(&depth_name), &sample.depth)?;
        let split = if k < n_train {
            Split::Train
        } else if k < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        let rec = ManifestRecord {
            id: sample.id,
            rgb: rgb_name.into(),
            depth: depth_name.into(),
            split,
            depth_scale: None,
        };
        lines += &serde_json::to_string(&rec).expect("record serializes");
        lines.push('\n');
    }
    let path = dir.join("manifest.jsonl");
    let mut f = std::fs::File::create(&path).map_err(|e| HimodeError::io(&path, e))?;
    f.write_all(lines.as_bytes())
        .map_err(|e| HimodeError::io(&path, e))?;
    Ok(path)
}
