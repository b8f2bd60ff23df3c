//! Raw depth decoding from tokens and the context adjustment layer.

use himode_autograd::{Float, Graph, TensorError, Var};

use crate::backbone::FeaturePyramid;
use crate::error::Result;
use crate::nn::{Conv, Linear};
use crate::params::{ParamBuilder, ParamStore};
use crate::tokenizer::fold;

/// Per-token linear map to a `p x p` depth patch.
#[derive(Clone, Debug)]
pub struct RawDepthHead {
    pub linear: Linear,
    pub patch: usize,
}

impl RawDepthHead {
    pub fn new(b: &mut ParamBuilder, width: usize, patch: usize) -> Self {
        b.scoped("head", |b| Self {
            linear: Linear::new(b, "linear", width, patch * patch),
            patch,
        })
    }

    /// `[B, M, D]` tokens on `grid` to a `[B, 1, H, W]` map at `target`.
    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        p: &ParamStore<T>,
        tokens: Var,
        grid: (usize, usize),
        target: (usize, usize),
    ) -> Result<Var> {
        let s = g.shape(tokens).to_vec();
        if s.len() != 3 || s[1] != grid.0 * grid.1 {
            return Err(TensorError::Dimension {
                op: "unpatchify_raw_depth",
                msg: format!("{s:?} does not match a {}x{} grid", grid.0, grid.1),
            }
            .into());
        }
        let patches = self.linear.forward(g, p, tokens)?;
        unpatchify_raw_depth(g, patches, grid, self.patch, target)
    }
}

/// Folds `[B, M, p*p]` patch values on `grid` into a map and resamples it
/// bilinearly to `target`.
pub fn unpatchify_raw_depth<T: Float>(
    g: &mut Graph<T>,
    patches: Var,
    grid: (usize, usize),
    patch: usize,
    target: (usize, usize),
) -> Result<Var> {
    let map = fold(g, patches, grid, patch)?;
    let s = g.shape(map).to_vec();
    if (s[2], s[3]) == target {
        return Ok(map);
    }
    Ok(g.resize_bilinear(map, target.0, target.1)?)
}

/// Fuses the feature pyramid with the raw depth into bounded metric depth.
#[derive(Clone, Debug)]
pub struct ContextAdjust {
    pub reduce: Vec<Conv>,
    pub conv: Conv,
    pub res1: Conv,
    pub res2: Conv,
    pub out: Conv,
    pub d_max: f64,
}

impl ContextAdjust {
    pub fn new(
        b: &mut ParamBuilder,
        widths: [usize; 4],
        fm_channels: usize,
        width: usize,
        d_max: f64,
    ) -> Self {
        b.scoped("cal", |b| {
            let reduce = widths
                .iter()
                .enumerate()
                .map(|(k, &c)| Conv::new(b, &format!("reduce{}", k + 1), c, fm_channels, 1, 1))
                .collect();
            let composite = 4 * fm_channels + 1;
            Self {
                reduce,
                conv: Conv::new(b, "conv", composite, width, 3, 1),
                res1: Conv::new(b, "res1", width, width, 3, 1),
                res2: Conv::new(b, "res2", width, width, 3, 1),
                out: Conv::new(b, "out", width + composite, 1, 1, 1),
                d_max,
            }
        })
    }

    /// `raw`: `[B, 1, H, W]` at the input resolution.
    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        p: &ParamStore<T>,
        pyramid: &FeaturePyramid,
        raw: Var,
    ) -> Result<Var> {
        if !g.value(raw).all_finite() {
            return Err(TensorError::Numeric("raw depth contains non-finite values".into()).into());
        }
        let s = g.shape(raw).to_vec();
        let (h, w) = (s[2], s[3]);
        let mut parts = Vec::with_capacity(5);
        for (conv, &fm) in self.reduce.iter().zip(&pyramid.levels) {
            let r = conv.forward(g, p, fm)?;
            let fs = g.shape(r).to_vec();
            let r = if (fs[2], fs[3]) == (h, w) {
                r
            } else {
                g.resize_bilinear(r, h, w)?
            };
            parts.push(r);
        }
        parts.push(raw);
        let composite = g.concat(&parts, 1)?;
        let c = self.conv.forward(g, p, composite)?;
        let c = g.relu(c);
        let r = self.res1.forward(g, p, c)?;
        let r = g.relu(r);
        let r = self.res2.forward(g, p, r)?;
        let r = g.add(r, c)?;
        let r = g.sigmoid(r);
        let cat = g.concat(&[r, composite], 1)?;
        let o = self.out.forward(g, p, cat)?;
        let o = g.sigmoid(o);
        Ok(g.scale(o, T::from_f64(self.d_max)))
    }
}
