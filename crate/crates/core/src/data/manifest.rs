//! JSON-lines dataset manifests and deterministic batch iteration.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::io::{load_depth, load_image};
use super::ImageSample;
use crate::error::{HimodeError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = HimodeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            _ => Err(HimodeError::Config(format!(
                "unknown split {s:?} (train, val or test)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub rgb: PathBuf,
    pub depth: PathBuf,
    pub split: Split,
    /// Meters per unit for 16-bit PNG depth.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth_scale: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    /// Directory relative paths are resolved against.
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> Vec<&ManifestRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Loads one record, resizing the image to `target` and checking that
    /// the depth map matches it.
    pub fn load(&self, rec: &ManifestRecord, target: (usize, usize)) -> Result<ImageSample> {
        let rgb = load_image(&self.resolve(&rec.rgb), Some(target))?;
        let depth_path = self.resolve(&rec.depth);
        let (depth, mask) = load_depth(&depth_path, rec.depth_scale)?;
        if (depth.height, depth.width) != target {
            return Err(HimodeError::format(
                depth_path,
                format!(
                    "depth is {}x{} but the model runs at {}x{}",
                    depth.height, depth.width, target.0, target.1
                ),
            ));
        }
        Ok(ImageSample {
            id: rec.id.clone(),
            rgb,
            depth,
            mask,
        })
    }

    pub fn load_split(&self, split: Split, target: (usize, usize)) -> Result<Vec<ImageSample>> {
        self.split(split)
            .into_iter()
            .map(|r| self.load(r, target))
            .collect()
    }
}

/// Parses a JSON-lines manifest (blank lines ignored).
pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| HimodeError::io(path, e))?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new(".")))
}

pub fn parse_manifest(text: &str, root: &Path) -> Result<DatasetManifest> {
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord =
            serde_json::from_str(line).map_err(|e| HimodeError::Manifest {
                line: i + 1,
                msg: e.to_string(),
            })?;
        if !seen.insert(rec.id.clone()) {
            return Err(HimodeError::Manifest {
                line: i + 1,
                msg: format!("duplicate id {:?}", rec.id),
            });
        }
        records.push(rec);
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        records,
    })
}

/// Batches of `split` in a shuffled order fixed by `(seed, epoch)`; the
/// last batch may be partial.
pub fn iterate_split(
    manifest: &DatasetManifest,
    split: Split,
    batch: usize,
    seed: u64,
    epoch: u64,
) -> Vec<Vec<&ManifestRecord>> {
    let recs = manifest.split(split);
    let order = epoch_order(recs.len(), seed, epoch);
    let shuffled: Vec<&ManifestRecord> = order.into_iter().map(|i| recs[i]).collect();
    shuffled.chunks(batch.max(1)).map(<[_]>::to_vec).collect()
}

/// Permutation of `0..n` fixed by `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    idx.shuffle(&mut rng);
    idx
}
