//! Model, optimizer and run configuration.
//!
//! Every struct deserializes from partial JSON (missing fields take their
//! defaults) and rejects unknown fields so typos surface as usage errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{config_err, HimodeError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedMode {
    /// Patch embedding plus positional table.
    Add,
    /// Feature-axis concatenation followed by a learned projection back to width.
    ConcatProject,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    Sca,
    Mhsa,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossChoice {
    Berhu,
    L1,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alignment {
    Median,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub in_channels: usize,
    /// Output width of each of the four stages.
    pub widths: [usize; 4],
    /// Channels produced by every HNet layer.
    pub growth: usize,
    /// Stride of each stage's convolution block, 1 or 2.
    pub strides: [usize; 4],
    pub hnet_layers: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            widths: [32, 64, 128, 256],
            growth: 16,
            strides: [2, 2, 2, 2],
            hnet_layers: 8,
        }
    }
}

impl BackboneConfig {
    pub fn stride_product(&self) -> usize {
        self.strides.iter().product()
    }

    /// Layers under the usual counting: one conv block, the HNet layers and
    /// one concatenation merge per stage.
    pub fn layer_count(&self) -> usize {
        4 * (1 + self.hnet_layers + 1)
    }

    /// Spatial extent of stage `k` (0-based) for an `h x w` input.
    pub fn stage_extent(&self, k: usize, h: usize, w: usize) -> (usize, usize) {
        let s: usize = self.strides[..=k].iter().product();
        (h / s, w / s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.strides.iter().any(|&s| s != 1 && s != 2) {
            return config_err(format!(
                "backbone strides must be 1 or 2, got {:?}",
                self.strides
            ));
        }
        if self.widths.contains(&0) || self.growth == 0 || self.in_channels == 0 {
            return config_err("backbone widths, growth and input channels must be positive");
        }
        if self.hnet_layers == 0 {
            return config_err("HNet blocks need at least one layer");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub backbone: BackboneConfig,
    pub patch: usize,
    /// Token width leaving the transformer (D).
    pub embed_dim: usize,
    /// Attention key width (D_k).
    pub key_dim: usize,
    pub mhsa_heads: usize,
    /// FFN hidden width as a multiple of the block width.
    pub ffn_ratio: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub use_srb: bool,
    pub attention: AttentionKind,
    pub use_stp: bool,
    pub use_cal: bool,
    pub embed_mode: EmbedMode,
    /// Side of the square patch-grid neighbourhood used by temporal attention.
    pub stp_window: usize,
    /// Channels each pyramid level is reduced to before fusion.
    pub cal_feature_channels: usize,
    pub cal_width: usize,
    pub d_max: f64,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            height: 256,
            width: 512,
            backbone: BackboneConfig::default(),
            patch: 4,
            embed_dim: 256,
            key_dim: 192,
            mhsa_heads: 2,
            ffn_ratio: 2,
            encoder_blocks: 1,
            decoder_blocks: 1,
            use_srb: true,
            attention: AttentionKind::Sca,
            use_stp: true,
            use_cal: true,
            embed_mode: EmbedMode::Add,
            stp_window: 3,
            cal_feature_channels: 8,
            cal_width: 16,
            d_max: 10.0,
            norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// A reduced configuration that trains in minutes on one CPU core at
    /// 128x256.
    pub fn desk() -> Self {
        Self {
            height: 128,
            width: 256,
            backbone: BackboneConfig {
                widths: [8, 16, 24, 32],
                growth: 4,
                ..BackboneConfig::default()
            },
            patch: 2,
            embed_dim: 64,
            key_dim: 16,
            cal_feature_channels: 4,
            cal_width: 8,
            ..Self::default()
        }
    }

    /// The miniature end-to-end instance used by the gradient checker:
    /// 8x16 input, D=16, D_k=12.
    pub fn tiny() -> Self {
        Self {
            height: 8,
            width: 16,
            backbone: BackboneConfig {
                widths: [3, 4, 4, 6],
                growth: 2,
                strides: [2, 1, 1, 1],
                ..BackboneConfig::default()
            },
            patch: 1,
            embed_dim: 16,
            key_dim: 12,
            cal_feature_channels: 2,
            cal_width: 3,
            ..Self::default()
        }
    }

    pub fn with_resolution(mut self, height: usize, width: usize) -> Self {
        self.height = height;
        self.width = width;
        self
    }

    pub fn encoder_width(&self) -> usize {
        if self.use_srb {
            self.embed_dim / 4
        } else {
            self.embed_dim
        }
    }

    pub fn decoder_width(&self) -> usize {
        if self.use_srb {
            self.embed_dim / 2
        } else {
            self.embed_dim
        }
    }

    pub fn feature_extent(&self) -> (usize, usize) {
        self.backbone.stage_extent(3, self.height, self.width)
    }

    /// Patch grid entering the encoder.
    pub fn token_grid(&self) -> (usize, usize) {
        let (h, w) = self.feature_extent();
        (h / self.patch, w / self.patch)
    }

    /// Patch grid leaving the decoder.
    pub fn output_grid(&self) -> (usize, usize) {
        let (h, w) = self.token_grid();
        if self.use_srb {
            (h / 4, w / 4)
        } else {
            (h, w)
        }
    }

    pub fn ffn_hidden(&self, width: usize) -> usize {
        self.ffn_ratio * width
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let sp = self.backbone.stride_product();
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(sp) || !self.width.is_multiple_of(sp) {
            return config_err(format!(
                "resolution {}x{} is not divisible by the backbone stride product {sp}",
                self.height, self.width
            ));
        }
        let (fh, fw) = self.feature_extent();
        if self.patch == 0 || fh % self.patch != 0 || fw % self.patch != 0 {
            return config_err(format!(
                "final feature map {fh}x{fw} is not divisible by patch size {}",
                self.patch
            ));
        }
        if self.embed_dim == 0 || !self.embed_dim.is_multiple_of(2) {
            return config_err(format!(
                "embed_dim must be even and positive, got {}",
                self.embed_dim
            ));
        }
        if self.key_dim == 0 || !self.key_dim.is_multiple_of(2) {
            return config_err(format!(
                "key_dim must be even and positive, got {}",
                self.key_dim
            ));
        }
        if self.use_srb {
            if !self.embed_dim.is_multiple_of(16) {
                return config_err(format!(
                    "with spatial residual blocks embed_dim must be a multiple of 16, got {}",
                    self.embed_dim
                ));
            }
            let (gh, gw) = self.token_grid();
            if gh % 4 != 0 || gw % 4 != 0 {
                return config_err(format!(
                    "token grid {gh}x{gw} must be divisible by 4 for two spatial residual blocks"
                ));
            }
        }
        if self.mhsa_heads == 0 || self.ffn_ratio == 0 {
            return config_err("mhsa_heads and ffn_ratio must be positive");
        }
        if self.encoder_blocks == 0 || self.decoder_blocks == 0 {
            return config_err("at least one encoder and one decoder block are required");
        }
        if self.stp_window.is_multiple_of(2) {
            return config_err(format!("stp_window must be odd, got {}", self.stp_window));
        }
        if self.cal_feature_channels == 0 || self.cal_width == 0 {
            return config_err("context adjustment widths must be positive");
        }
        if !(self.d_max > 0.0 && self.d_max.is_finite()) {
            return config_err(format!("d_max must be positive, got {}", self.d_max));
        }
        if !(self.norm_eps > 0.0) {
            return config_err("norm_eps must be positive");
        }
        Ok(())
    }
}

/// One row of the module ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Toggles {
    pub use_srb: bool,
    pub attention: AttentionKind,
    pub use_stp: bool,
}

impl Toggles {
    /// The six module combinations of the ablation table, full model first.
    pub const TABLE: [Toggles; 6] = [
        Toggles::new(true, AttentionKind::Sca, true),
        Toggles::new(true, AttentionKind::Mhsa, true),
        Toggles::new(false, AttentionKind::Sca, true),
        Toggles::new(true, AttentionKind::Sca, false),
        Toggles::new(false, AttentionKind::Mhsa, true),
        Toggles::new(false, AttentionKind::Sca, false),
    ];

    pub const fn new(use_srb: bool, attention: AttentionKind, use_stp: bool) -> Self {
        Self {
            use_srb,
            attention,
            use_stp,
        }
    }

    pub fn apply(self, cfg: &ModelConfig) -> ModelConfig {
        ModelConfig {
            use_srb: self.use_srb,
            attention: self.attention,
            use_stp: self.use_stp,
            ..cfg.clone()
        }
    }

    pub fn label(self) -> String {
        let mark = |b: bool| if b { "+" } else { "-" };
        format!(
            "{}srb {}sca {}mhsa {}stp",
            mark(self.use_srb),
            mark(self.attention == AttentionKind::Sca),
            mark(self.attention == AttentionKind::Mhsa),
            mark(self.use_stp)
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// When set, training stops after this many optimizer steps instead of
    /// after `epochs`.
    pub steps: Option<usize>,
    pub loss: LossChoice,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            batch_size: 4,
            epochs: 55,
            steps: None,
            loss: LossChoice::Berhu,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub manifest: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub align: Alignment,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
            manifest: None,
            out_dir: PathBuf::from("runs"),
            align: Alignment::Median,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| HimodeError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HimodeError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Sets one field from a command-line style override.
    ///
    /// `key` is a dotted path (`model.embed_dim`) or a leaf name that is
    /// unique across the config (`lr`); dashes count as underscores.
    /// `value` is parsed as JSON, falling back to a plain string.
    pub fn apply_override(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.replace('-', "_");
        let mut root = serde_json::to_value(&*self).expect("config serializes");
        let path = resolve_key(&root, &key)?;
        let parsed = serde_json::from_str::<Value>(value)
            .unwrap_or_else(|_| Value::String(value.to_string()));
        let mut slot = &mut root;
        for part in &path {
            slot = slot.get_mut(part.as_str()).expect("resolved path exists");
        }
        *slot = parsed;
        *self = serde_json::from_value(root)
            .map_err(|e| HimodeError::Config(format!("bad value {value:?} for {key}: {e}")))?;
        Ok(())
    }

    /// Every dotted leaf path of the config.
    pub fn keys(&self) -> Vec<String> {
        let root = serde_json::to_value(self).expect("config serializes");
        let mut out = Vec::new();
        collect_leaves(&root, String::new(), &mut out);
        out
    }
}

fn collect_leaves(v: &Value, prefix: String, out: &mut Vec<String>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let p = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                collect_leaves(child, p, out);
            }
        }
        _ => out.push(prefix),
    }
}

fn resolve_key(root: &Value, key: &str) -> Result<Vec<String>> {
    let mut leaves = Vec::new();
    collect_leaves(root, String::new(), &mut leaves);
    if leaves.iter().any(|l| l == key) {
        return Ok(key.split('.').map(str::to_string).collect());
    }
    let suffix = format!(".{key}");
    let hits: Vec<&String> = leaves.iter().filter(|l| l.ends_with(&suffix)).collect();
    match hits.as_slice() {
        [one] => Ok(one.split('.').map(str::to_string).collect()),
        [] => config_err(format!("unknown config key {key:?}")),
        many => config_err(format!(
            "ambiguous config key {key:?}: {}",
            many.iter()
                .map(|s| s.as_str())
                .collect::<Vec<_>>()
                .join(", ")
        )),
    }
}

/// Parses `HxW` resolutions such as `256x512`.
pub fn parse_resolution(s: &str) -> Result<(usize, usize)> {
    let parsed = s
        .split_once(['x', 'X'])
        .and_then(|(h, w)| Some((h.trim().parse().ok()?, w.trim().parse().ok()?)));
    match parsed {
        Some((h, w)) => Ok((h, w)),
        None => config_err(format!("resolution must look like 256x512, got {s:?}")),
    }
}
