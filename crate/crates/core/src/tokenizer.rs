//! Patch extraction, linear projection and sinusoidal positional encoding.

use himode_autograd::{Float, Graph, Tensor, TensorError, Var};

use crate::config::EmbedMode;
use crate::error::{config_err, Result};
use crate::nn::Linear;
use crate::params::{ParamBuilder, ParamStore};

/// Splits `[B, C, H, W]` into row-major `p x p` patches, giving
/// `[B, N, p*p*C]` with each patch flattened as `(py, px, c)`.
pub fn patchify<T: Float>(g: &mut Graph<T>, x: Var, p: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 || p == 0 || !s[2].is_multiple_of(p) || !s[3].is_multiple_of(p) {
        return Err(TensorError::Dimension {
            op: "patchify",
            msg: format!("shape {s:?} is not divisible into {p}x{p} patches"),
        }
        .into());
    }
    let (b, c, gh, gw) = (s[0], s[1], s[2] / p, s[3] / p);
    let r = g.reshape(x, &[b, c, gh, p, gw, p])?;
    let t = g.permute(r, &[0, 2, 4, 3, 5, 1])?;
    Ok(g.reshape(t, &[b, gh * gw, p * p * c])?)
}

/// Inverse of [`patchify`] for a `gh x gw` patch grid.
pub fn fold<T: Float>(
    g: &mut Graph<T>,
    tokens: Var,
    grid: (usize, usize),
    p: usize,
) -> Result<Var> {
    let s = g.shape(tokens).to_vec();
    let (gh, gw) = grid;
    if s.len() != 3 || s[1] != gh * gw || p == 0 || !s[2].is_multiple_of(p * p) {
        return Err(TensorError::Dimension {
            op: "fold",
            msg: format!("tokens {s:?} do not match a {gh}x{gw} grid of {p}x{p} patches"),
        }
        .into());
    }
    let (b, c) = (s[0], s[2] / (p * p));
    let r = g.reshape(tokens, &[b, gh, gw, p, p, c])?;
    let t = g.permute(r, &[0, 5, 1, 3, 2, 4])?;
    Ok(g.reshape(t, &[b, c, gh * p, gw * p])?)
}

/// `[n, d]` table: even columns `sin(pos / 10000^(2i/d))`, odd columns the
/// matching cosine.
pub fn positional_encoding<T: Float>(n: usize, d: usize) -> Result<Tensor<T>> {
    if d == 0 || !d.is_multiple_of(2) {
        return config_err(format!("positional encoding width must be even, got {d}"));
    }
    let mut data = vec![T::zero(); n * d];
    for pos in 0..n {
        for i in 0..d / 2 {
            let arg = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            data[pos * d + 2 * i] = T::from_f64(arg.sin());
            data[pos * d + 2 * i + 1] = T::from_f64(arg.cos());
        }
    }
    Ok(Tensor::new(&[n, d], data)?)
}

/// Positional table repeated over a batch of `b`, as a graph constant.
pub fn positional_constant<T: Float>(
    g: &mut Graph<T>,
    b: usize,
    n: usize,
    d: usize,
) -> Result<Var> {
    let table = positional_encoding::<T>(n, d)?;
    let data = table.data().repeat(b);
    Ok(g.constant(Tensor::new(&[b, n, d], data)?))
}

/// Merges patch embeddings with positional encodings. `project` must be
/// given for [`EmbedMode::ConcatProject`].
pub fn combine_embeddings<T: Float>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    patch_emb: Var,
    pos_enc: Var,
    mode: EmbedMode,
    project: Option<&Linear>,
) -> Result<Var> {
    match (mode, project) {
        (EmbedMode::Add, _) => Ok(g.add(patch_emb, pos_enc)?),
        (EmbedMode::ConcatProject, Some(proj)) => {
            let cat = g.concat(&[patch_emb, pos_enc], 2)?;
            Ok(proj.forward(g, p, cat)?)
        }
        (EmbedMode::ConcatProject, None) => Err(TensorError::Dimension {
            op: "combine_embeddings",
            msg: "concat_project mode needs a projection".into(),
        }
        .into()),
    }
}

/// Feature map to encoder tokens.
#[derive(Clone, Debug)]
pub struct Tokenizer {
    pub patch: usize,
    pub projection: Linear,
    pub concat_projection: Option<Linear>,
    pub mode: EmbedMode,
}

impl Tokenizer {
    pub fn new(
        b: &mut ParamBuilder,
        channels: usize,
        patch: usize,
        width: usize,
        mode: EmbedMode,
    ) -> Self {
        b.scoped("tokenizer", |b| Self {
            patch,
            projection: Linear::new(b, "projection", patch * patch * channels, width),
            concat_projection: match mode {
                EmbedMode::Add => None,
                EmbedMode::ConcatProject => {
                    Some(Linear::new(b, "concat_projection", 2 * width, width))
                }
            },
            mode,
        })
    }

    /// Patch embeddings without positional information.
    pub fn embed<T: Float>(
        &self,
        g: &mut Graph<T>,
        p: &ParamStore<T>,
        feature: Var,
    ) -> Result<Var> {
        let patches = patchify(g, feature, self.patch)?;
        Ok(self.projection.forward(g, p, patches)?)
    }

    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        p: &ParamStore<T>,
        feature: Var,
    ) -> Result<Var> {
        let emb = self.embed(g, p, feature)?;
        let s = g.shape(emb).to_vec();
        let pe = positional_constant(g, s[0], s[1], s[2])?;
        combine_embeddings(g, p, emb, pe, self.mode, self.concat_projection.as_ref())
    }
}
