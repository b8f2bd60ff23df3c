//! The full depth estimation network.

use himode_autograd::{Float, Graph, Tensor, TensorError, Var};

use crate::backbone::{Backbone, FeaturePyramid};
use crate::config::ModelConfig;
use crate::error::Result;
use crate::head::{ContextAdjust, RawDepthHead};
use crate::params::{ParamBuilder, ParamStore};
use crate::srb::Srb;
use crate::tokenizer::{positional_constant, Tokenizer};
use crate::transformer::{DecoderBlock, EncoderBlock};

#[derive(Clone, Debug)]
pub struct HiMode {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub tokenizer: Tokenizer,
    pub encoders: Vec<EncoderBlock>,
    pub srb1: Option<Srb>,
    pub decoders: Vec<DecoderBlock>,
    pub srb2: Option<Srb>,
    pub head: RawDepthHead,
    pub cal: Option<ContextAdjust>,
}

/// Graph nodes produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    /// `[B, 1, H, W]` final depth (the raw map when CAL is disabled).
    pub depth: Var,
    /// `[B, 1, H, W]` raw depth decoded from tokens.
    pub raw: Var,
    pub pyramid: FeaturePyramid,
    pub encoded: Var,
    pub decoded: Var,
    /// Every attention weight tensor, encoder blocks first.
    pub attention: Vec<Var>,
}

impl HiMode {
    /// Builds the module tree and its parameters (64-bit master copy) from
    /// a seed.
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamBuilder)> {
        cfg.validate()?;
        let mut b = ParamBuilder::new(seed);
        let bc = &cfg.backbone;
        let backbone = Backbone::new(&mut b, bc);
        let enc_w = cfg.encoder_width();
        let dec_w = cfg.decoder_width();
        let tokenizer = Tokenizer::new(&mut b, bc.widths[3], cfg.patch, enc_w, cfg.embed_mode);
        let encoders = b.scoped("encoder", |b| {
            (0..cfg.encoder_blocks)
                .map(|i| b.scoped(i, |b| EncoderBlock::new(b, cfg, enc_w)))
                .collect()
        });
        let srb1 = cfg
            .use_srb
            .then(|| Srb::new(&mut b, "srb1", enc_w, cfg.norm_eps));
        let decoders = b.scoped("decoder", |b| {
            (0..cfg.decoder_blocks)
                .map(|i| b.scoped(i, |b| DecoderBlock::new(b, cfg, dec_w)))
                .collect()
        });
        let srb2 = cfg
            .use_srb
            .then(|| Srb::new(&mut b, "srb2", dec_w, cfg.norm_eps));
        let head = RawDepthHead::new(&mut b, cfg.embed_dim, cfg.patch);
        let cal = cfg.use_cal.then(|| {
            ContextAdjust::new(
                &mut b,
                bc.widths,
                cfg.cal_feature_channels,
                cfg.cal_width,
                cfg.d_max,
            )
        });
        let model = Self {
            config: cfg.clone(),
            backbone,
            tokenizer,
            encoders,
            srb1,
            decoders,
            srb2,
            head,
            cal,
        };
        Ok((model, b))
    }

    pub fn init<T: Float>(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let (model, b) = Self::build(cfg, seed)?;
        Ok((model, b.finish()))
    }

    /// Full forward pass on a `[B, 3, H, W]` image batch.
    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        p: &ParamStore<T>,
        image: Var,
    ) -> Result<ModelOutput> {
        let s = g.shape(image).to_vec();
        let cfg = &self.config;
        let pyramid = self.backbone.forward(g, p, image)?;
        let fm4 = pyramid.final_feature();
        let fs = g.shape(fm4).to_vec();
        let mut grid = (fs[2] / cfg.patch, fs[3] / cfg.patch);
        if !fs[2].is_multiple_of(cfg.patch)
            || !fs[3].is_multiple_of(cfg.patch)
            || (cfg.use_srb && (!grid.0.is_multiple_of(4) || !grid.1.is_multiple_of(4)))
        {
            return Err(TensorError::Dimension {
                op: "model_forward",
                msg: format!(
                    "input {}x{} gives a token grid incompatible with patch {} and the spatial residual blocks",
                    s[2], s[3], cfg.patch
                ),
            }
            .into());
        }
        let batch = s[0];
        let mut x = self.tokenizer.forward(g, p, fm4)?;
        let mut attention = Vec::new();
        let n = grid.0 * grid.1;
        let key_pe = positional_constant(g, batch, n, cfg.key_dim)?;
        for enc in &self.encoders {
            let (y, w) = enc.forward(g, p, x, Some(key_pe))?;
            x = y;
            attention.extend(w);
        }
        let encoded = x;
        if let Some(srb) = &self.srb1 {
            x = srb.forward(g, p, x, grid)?;
            grid = (grid.0 / 2, grid.1 / 2);
        }
        let dec_pe = positional_constant(g, batch, grid.0 * grid.1, cfg.decoder_width())?;
        for (i, dec) in self.decoders.iter().enumerate() {
            let pe = (i == 0).then_some(dec_pe);
            let (y, w) = dec.forward(g, p, x, pe, grid)?;
            x = y;
            attention.extend(w);
        }
        let decoded = x;
        if let Some(srb) = &self.srb2 {
            x = srb.forward(g, p, x, grid)?;
            grid = (grid.0 / 2, grid.1 / 2);
        }
        let raw = self.head.forward(g, p, x, grid, (s[2], s[3]))?;
        let depth = match &self.cal {
            Some(cal) => cal.forward(g, p, &pyramid, raw)?,
            None => raw,
        };
        Ok(ModelOutput {
            depth,
            raw,
            pyramid,
            encoded,
            decoded,
            attention,
        })
    }

    /// Depth for a `[B, 3, H, W]` batch without keeping the graph.
    pub fn predict<T: Float>(&self, p: &ParamStore<T>, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.constant(image.clone());
        let out = self.forward(&mut g, p, x)?;
        Ok(g.value(out.depth).clone())
    }
}

/// Parameter count of the model a config describes.
pub fn count_params(cfg: &ModelConfig) -> Result<usize> {
    let (_, b) = HiMode::build(cfg, 0)?;
    Ok(b.finish::<f32>().count())
}
