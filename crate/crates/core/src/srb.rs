//! Spatial residual block: halves the token grid and widens the tokens.

use himode_autograd::{Float, Graph, TensorError, Var};

use crate::error::Result;
use crate::nn::{map_to_tokens, tokens_to_map, Conv, LayerNorm, Linear};
use crate::params::{ParamBuilder, ParamStore};
use crate::tokenizer::positional_constant;

#[derive(Clone, Debug)]
pub struct Srb {
    /// Branch 1: normalization and linear widening, then stride-2 subsampling.
    pub norm_linear: LayerNorm,
    pub linear: Linear,
    /// Branch 3: normalization, strided 1x1 convolution and ReLU.
    pub norm_conv: LayerNorm,
    pub conv: Conv,
    pub merge: Linear,
    pub d_in: usize,
    pub d_out: usize,
    pub branch3: usize,
    pub eps: f64,
}

impl Srb {
    pub fn new(b: &mut ParamBuilder, name: &str, d_in: usize, eps: f64) -> Self {
        let d_out = 2 * d_in;
        // rounded up to even so the branch can carry a sinusoidal table
        let branch3 = (d_in / 2).max(1).next_multiple_of(2);
        b.scoped(name, |b| Self {
            norm_linear: LayerNorm::new(b, "norm_linear", d_in),
            linear: Linear::new(b, "linear", d_in, d_out),
            norm_conv: LayerNorm::new(b, "norm_conv", d_in),
            conv: Conv::new(b, "conv", d_in, branch3, 1, 2),
            merge: Linear::new(b, "merge", d_out + d_in + branch3, d_out),
            d_in,
            d_out,
            branch3,
            eps,
        })
    }

    /// Branch widths `(linear, pooling, conv)` before the merge.
    pub fn branch_widths(&self) -> (usize, usize, usize) {
        (self.d_out, self.d_in, self.branch3)
    }

    /// Outputs of the three branches as `[B, N/4, c_i]` tokens, each with
    /// its own positional table added.
    pub fn branches<T: Float>(
        &self,
        g: &mut Graph<T>,
        p: &ParamStore<T>,
        x: Var,
        grid: (usize, usize),
    ) -> Result<[Var; 3]> {
        let s = g.shape(x).to_vec();
        let (h, w) = grid;
        if s.len() != 3 || s[1] != h * w || s[2] != self.d_in {
            return Err(TensorError::Dimension {
                op: "srb_forward",
                msg: format!("expected B x {} x {}, got {s:?}", h * w, self.d_in),
            }
            .into());
        }
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::Dimension {
                op: "srb_forward",
                msg: format!("grid {h}x{w} has an odd extent"),
            }
            .into());
        }
        let b = s[0];
        let n_out = (h / 2) * (w / 2);

        let y1 = self.norm_linear.forward(g, p, x, self.eps)?;
        let y1 = self.linear.forward(g, p, y1)?;
        let y1 = tokens_to_map(g, y1, h, w)?;
        let y1 = g.subsample2d(y1, 2)?;

        let y2 = tokens_to_map(g, x, h, w)?;
        let y2 = g.zero_pad2d(y2, 1)?;
        let y2 = g.avg_pool2d(y2, 3, 2)?;

        let y3 = self.norm_conv.forward(g, p, x, self.eps)?;
        let y3 = tokens_to_map(g, y3, h, w)?;
        let y3 = self.conv.forward(g, p, y3)?;
        let y3 = g.relu(y3);

        let mut out = [y1, y2, y3];
        for y in out.iter_mut() {
            let t = map_to_tokens(g, *y)?;
            let c = g.shape(t)[2];
            let pe = positional_constant(g, b, n_out, c)?;
            *y = g.add(t, pe)?;
        }
        Ok(out)
    }

    /// `[B, h*w, D_in]` to `[B, h*w/4, D_out]`.
    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        p: &ParamStore<T>,
        x: Var,
        grid: (usize, usize),
    ) -> Result<Var> {
        let [y1, y2, y3] = self.branches(g, p, x, grid)?;
        let cat = g.concat(&[y1, y2, y3], 2)?;
        let m = self.merge.forward(g, p, cat)?;
        Ok(g.add(y1, m)?)
    }
}
