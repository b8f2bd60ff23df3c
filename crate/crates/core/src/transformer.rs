//! Transformer encoder (self + cross attention) and decoder (spatial and
//! temporal patches) blocks.

use std::rc::Rc;

use himode_autograd::{Float, Graph, TensorError, Var};

use crate::config::{AttentionKind, ModelConfig};
use crate::error::Result;
use crate::nn::{LayerNorm, Linear};
use crate::params::{ParamBuilder, ParamStore};

/// Attention result together with its row-stochastic weights `[.., N, N]`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    pub output: Var,
    pub weights: Var,
}

/// Applies the shared `U_QKV` projection and splits the result into
/// `(Q, K, V)` of equal width.
pub fn qkv_project<T: Float>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    u_qkv: &Linear,
    x: Var,
) -> Result<(Var, Var, Var)> {
    let y = u_qkv.forward(g, p, x)?;
    let axis = g.shape(y).len() - 1;
    let w = u_qkv.d_out / 3;
    let q = g.slice(y, axis, 0, w)?;
    let k = g.slice(y, axis, w, w)?;
    let v = g.slice(y, axis, 2 * w, w)?;
    Ok((q, k, v))
}

/// `softmax(Q K^T / sqrt(d_k)) V` over the last two axes. `mask`, when
/// given, covers the `N x N` score plane; disallowed pairs get zero weight.
pub fn attention_core<T: Float>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<Rc<Vec<bool>>>,
) -> Result<AttentionOutput> {
    let (sq, sk, sv) = (
        g.shape(q).to_vec(),
        g.shape(k).to_vec(),
        g.shape(v).to_vec(),
    );
    if sq.len() < 2 || sq != sk || sk[..sk.len() - 1] != sv[..sv.len() - 1] {
        return Err(TensorError::Shape {
            op: "attention_core",
            lhs: sq,
            rhs: sk,
        }
        .into());
    }
    let dk = *sq.last().unwrap();
    let scores = g.matmul_ext(q, k, true)?;
    let scores = g.scale(scores, T::from_f64(1.0 / (dk as f64).sqrt()));
    let weights = match mask {
        Some(m) => g.masked_softmax(scores, m)?,
        None => g.softmax(scores),
    };
    let output = g.matmul(weights, v)?;
    Ok(AttentionOutput { output, weights })
}

/// `[B, N, h*d]` to `[B, h, N, d]`.
fn split_heads<T: Float>(g: &mut Graph<T>, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let r = g.reshape(x, &[s[0], s[1], heads, s[2] / heads])?;
    Ok(g.permute(r, &[0, 2, 1, 3])?)
}

fn merge_heads<T: Float>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let t = g.permute(x, &[0, 2, 1, 3])?;
    Ok(g.reshape(t, &[s[0], s[2], s[1] * s[3]])?)
}

fn check_width<T: Float>(g: &Graph<T>, op: &'static str, x: Var, width: usize) -> Result<()> {
    let s = g.shape(x);
    if s.len() < 2 || *s.last().unwrap() != width {
        return Err(TensorError::Dimension {
            op,
            msg: format!("expected token width {width}, got shape {s:?}"),
        }
        .into());
    }
    Ok(())
}

/// Two linear layers separated by GeLU.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new(b: &mut ParamBuilder, width: usize, hidden: usize) -> Self {
        b.scoped("ffn", |b| Self {
            fc1: Linear::new(b, "fc1", width, hidden),
            fc2: Linear::new(b, "fc2", hidden, width),
        })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, p, x)?;
        let h = g.gelu(h);
        Ok(self.fc2.forward(g, p, h)?)
    }
}

/// Multi-head self-attention with `heads` heads of width `d_k`; returns
/// the projected update (no residual).
#[derive(Clone, Debug)]
pub struct Mhsa {
    pub qkv: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl Mhsa {
    pub fn new(b: &mut ParamBuilder, width: usize, d_k: usize, heads: usize) -> Self {
        b.scoped("mhsa", |b| Self {
            qkv: Linear::new(b, "qkv", width, 3 * heads * d_k),
            out: Linear::new(b, "out", heads * d_k, width),
            heads,
        })
    }

    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        p: &ParamStore<T>,
        x: Var,
    ) -> Result<(Var, Var)> {
        let (q, k, v) = qkv_project(g, p, &self.qkv, x)?;
        let q = split_heads(g, q, self.heads)?;
        let k = split_heads(g, k, self.heads)?;
        let v = split_heads(g, v, self.heads)?;
        let att = attention_core(g, q, k, v, None)?;
        let merged = merge_heads(g, att.output)?;
        Ok((self.out.forward(g, p, merged)?, att.weights))
    }
}

/// Self-attention and cross-attention sharing one `U_QKV`.
#[derive(Clone, Debug)]
pub struct Sca {
    pub qkv: Linear,
    pub self_out: Linear,
    pub cross_out: Linear,
}

#[derive(Clone, Debug)]
pub enum EncoderAttention {
    Sca(Sca),
    Mhsa(Mhsa),
}

#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub attention: EncoderAttention,
    pub norms: Vec<LayerNorm>,
    pub ffn: FeedForward,
    pub width: usize,
    pub d_k: usize,
    pub eps: f64,
}

impl EncoderBlock {
    pub fn new(b: &mut ParamBuilder, cfg: &ModelConfig, width: usize) -> Self {
        let d_k = cfg.key_dim;
        let (attention, n_norms) = match cfg.attention {
            AttentionKind::Sca => (
                EncoderAttention::Sca(b.scoped("sca", |b| Sca {
                    qkv: Linear::new(b, "qkv", width, 3 * d_k),
                    self_out: Linear::new(b, "self_out", d_k, width),
                    cross_out: Linear::new(b, "cross_out", d_k, width),
                })),
                3,
            ),
            AttentionKind::Mhsa => (
                EncoderAttention::Mhsa(Mhsa::new(b, width, d_k, cfg.mhsa_heads)),
                2,
            ),
        };
        let norms = (1..=n_norms)
            .map(|i| LayerNorm::new(b, &format!("norm{i}"), width))
            .collect();
        Self {
            attention,
            norms,
            ffn: FeedForward::new(b, width, cfg.ffn_hidden(width)),
            width,
            d_k,
            eps: cfg.norm_eps,
        }
    }

    /// `pos_enc` is a `[B, N, d_k]` positional table joined into the
    /// cross-attention query; pass `None` to run without positions.
    /// Returns the new tokens and every attention weight tensor.
    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        p: &ParamStore<T>,
        x: Var,
        pos_enc: Option<Var>,
    ) -> Result<(Var, Vec<Var>)> {
        check_width(g, "encoder_block", x, self.width)?;
        let eps = self.eps;
        match &self.attention {
            EncoderAttention::Sca(sca) => {
                let (q, k, v) = qkv_project(g, p, &sca.qkv, x)?;
                let sa = attention_core(g, q, k, v, None)?;
                let upd = sca.self_out.forward(g, p, sa.output)?;
                let r = g.add(x, upd)?;
                let h1 = self.norms[0].forward(g, p, r, eps)?;
                let mut cq = g.add(sa.output, q)?;
                if let Some(pe) = pos_enc {
                    cq = g.add(cq, pe)?;
                }
                let ca = attention_core(g, cq, k, v, None)?;
                let upd = sca.cross_out.forward(g, p, ca.output)?;
                let r = g.add(h1, upd)?;
                let h2 = self.norms[1].forward(g, p, r, eps)?;
                let f = self.ffn.forward(g, p, h2)?;
                let r = g.add(h2, f)?;
                let h3 = self.norms[2].forward(g, p, r, eps)?;
                Ok((h3, vec![sa.weights, ca.weights]))
            }
            EncoderAttention::Mhsa(mhsa) => {
                let (upd, w) = mhsa.forward(g, p, x)?;
                let r = g.add(x, upd)?;
                let h1 = self.norms[0].forward(g, p, r, eps)?;
                let f = self.ffn.forward(g, p, h1)?;
                let r = g.add(h1, f)?;
                let h2 = self.norms[1].forward(g, p, r, eps)?;
                Ok((h2, vec![w]))
            }
        }
    }
}

/// Allowed `(t, n) -> (t', m)` pairs of temporal attention: other frames
/// only, inside a `window x window` neighbourhood on the patch grid.
pub fn temporal_mask(frames: usize, grid: (usize, usize), window: usize) -> Vec<bool> {
    let (gh, gw) = grid;
    let n = gh * gw;
    let r = (window / 2) as isize;
    let tn = frames * n;
    let mut mask = vec![false; tn * tn];
    for t in 0..frames {
        for a in 0..n {
            let (ay, ax) = ((a / gw) as isize, (a % gw) as isize);
            for t2 in (0..frames).filter(|&t2| t2 != t) {
                for c in 0..n {
                    let (cy, cx) = ((c / gw) as isize, (c % gw) as isize);
                    if (ay - cy).abs() <= r && (ax - cx).abs() <= r {
                        mask[(t * n + a) * tn + t2 * n + c] = true;
                    }
                }
            }
        }
    }
    mask
}

/// Spatial and temporal patches: temporal attention across frames inside a
/// local window, then spatial attention across all tokens of each frame.
/// Both stages share one `U_QKV`.
#[derive(Clone, Debug)]
pub struct Stp {
    pub qkv: Linear,
    pub temporal_out: Linear,
    pub spatial_out: Linear,
    pub window: usize,
    pub width: usize,
}

impl Stp {
    pub fn new(b: &mut ParamBuilder, width: usize, d_k: usize, window: usize) -> Self {
        b.scoped("stp", |b| Self {
            qkv: Linear::new(b, "qkv", width, 3 * d_k),
            temporal_out: Linear::new(b, "temporal_out", d_k, width),
            spatial_out: Linear::new(b, "spatial_out", d_k, width),
            window,
            width,
        })
    }

    /// Temporal attention values before projection, `[B, T*N, d_k]`.
    pub fn temporal_attention<T: Float>(
        &self,
        g: &mut Graph<T>,
        p: &ParamStore<T>,
        x: Var,
        grid: (usize, usize),
    ) -> Result<AttentionOutput> {
        let s = g.shape(x).to_vec();
        let flat = g.reshape(x, &[s[0], s[1] * s[2], s[3]])?;
        let (q, k, v) = qkv_project(g, p, &self.qkv, flat)?;
        let mask = Rc::new(temporal_mask(s[1], grid, self.window));
        attention_core(g, q, k, v, Some(mask))
    }

    /// Spatial attention values before projection, `[B*T, N, d_k]`.
    pub fn spatial_attention<T: Float>(
        &self,
        g: &mut Graph<T>,
        p: &ParamStore<T>,
        x: Var,
    ) -> Result<AttentionOutput> {
        let s = g.shape(x).to_vec();
        let flat = g.reshape(x, &[s[0] * s[1], s[2], s[3]])?;
        let (q, k, v) = qkv_project(g, p, &self.qkv, flat)?;
        attention_core(g, q, k, v, None)
    }

    /// Spatial stage alone: `x + W_s * attention(x)`.
    pub fn spatial<T: Float>(
        &self,
        g: &mut Graph<T>,
        p: &ParamStore<T>,
        x: Var,
    ) -> Result<(Var, Var)> {
        let s = g.shape(x).to_vec();
        let att = self.spatial_attention(g, p, x)?;
        let upd = self.spatial_out.forward(g, p, att.output)?;
        let upd = g.reshape(upd, &s)?;
        Ok((g.add(x, upd)?, att.weights))
    }

    /// `x: [B, T, N, D]`. With `T = 1` there are no other frames and the
    /// temporal stage is skipped.
    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        p: &ParamStore<T>,
        x: Var,
        grid: (usize, usize),
    ) -> Result<(Var, Vec<Var>)> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[2] != grid.0 * grid.1 || s[3] != self.width || s[1] == 0 {
            return Err(TensorError::Dimension {
                op: "stp",
                msg: format!(
                    "expected B x T x {} x {}, got {s:?}",
                    grid.0 * grid.1,
                    self.width
                ),
            }
            .into());
        }
        let mut weights = Vec::new();
        let mut x = x;
        if s[1] > 1 {
            let att = self.temporal_attention(g, p, x, grid)?;
            let upd = self.temporal_out.forward(g, p, att.output)?;
            let upd = g.reshape(upd, &s)?;
            x = g.add(x, upd)?;
            weights.push(att.weights);
        }
        let (y, w) = self.spatial(g, p, x)?;
        weights.push(w);
        Ok((y, weights))
    }
}

#[derive(Clone, Debug)]
pub enum DecoderMixer {
    Stp(Stp),
    Mhsa(Mhsa),
}

#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub mixer: DecoderMixer,
    pub norm1: LayerNorm,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
    pub width: usize,
    pub eps: f64,
}

impl DecoderBlock {
    pub fn new(b: &mut ParamBuilder, cfg: &ModelConfig, width: usize) -> Self {
        let mixer = if cfg.use_stp {
            DecoderMixer::Stp(Stp::new(b, width, cfg.key_dim, cfg.stp_window))
        } else {
            DecoderMixer::Mhsa(Mhsa::new(b, width, cfg.key_dim, cfg.mhsa_heads))
        };
        Self {
            mixer,
            norm1: LayerNorm::new(b, "norm1", width),
            norm2: LayerNorm::new(b, "norm2", width),
            ffn: FeedForward::new(b, width, cfg.ffn_hidden(width)),
            width,
            eps: cfg.norm_eps,
        }
    }

    /// `x: [B, N, D]` on a `grid`; `pos_enc` (same shape) is added on entry.
    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        p: &ParamStore<T>,
        x: Var,
        pos_enc: Option<Var>,
        grid: (usize, usize),
    ) -> Result<(Var, Vec<Var>)> {
        check_width(g, "decoder_block", x, self.width)?;
        let x = match pos_enc {
            Some(pe) => g.add(x, pe)?,
            None => x,
        };
        let s = g.shape(x).to_vec();
        let (mixed, weights) = match &self.mixer {
            DecoderMixer::Stp(stp) => {
                let x4 = g.reshape(x, &[s[0], 1, s[1], s[2]])?;
                let (y, w) = stp.forward(g, p, x4, grid)?;
                (g.reshape(y, &s)?, w)
            }
            DecoderMixer::Mhsa(mhsa) => {
                let (upd, w) = mhsa.forward(g, p, x)?;
                (g.add(x, upd)?, vec![w])
            }
        };
        let h1 = self.norm1.forward(g, p, mixed, self.eps)?;
        let f = self.ffn.forward(g, p, h1)?;
        let r = g.add(h1, f)?;
        Ok((self.norm2.forward(g, p, r, self.eps)?, weights))
    }
}
