//! Parameterized layers shared by the model blocks.

use himode_autograd::{Float, Graph, Result, Var};

use crate::params::{ParamBuilder, ParamId, ParamStore};

/// `y = x W + b` over the last axis, `W` stored as `[d_in, d_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(b: &mut ParamBuilder, name: &str, d_in: usize, d_out: usize) -> Self {
        b.scoped(name, |b| Self {
            weight: b.kaiming("weight", &[d_in, d_out], d_in),
            bias: b.constant("bias", &[d_out], 0.0),
            d_in,
            d_out,
        })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = p.var(g, self.weight);
        let y = g.matmul(x, w)?;
        let b = p.var(g, self.bias);
        let axis = g.shape(y).len() - 1;
        g.add_bias(y, b, axis)
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl Conv {
    /// `k x k` convolution with "same" padding at stride 1.
    pub fn new(
        b: &mut ParamBuilder,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        Self::grouped(b, name, cin, cout, k, stride, 1)
    }

    pub fn depthwise(b: &mut ParamBuilder, name: &str, channels: usize, k: usize) -> Self {
        Self::grouped(b, name, channels, channels, k, 1, channels)
    }

    fn grouped(
        b: &mut ParamBuilder,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        groups: usize,
    ) -> Self {
        let cin_g = cin / groups;
        b.scoped(name, |b| Self {
            weight: b.kaiming("weight", &[cout, cin_g, k, k], cin_g * k * k),
            bias: b.constant("bias", &[cout], 0.0),
            stride,
            pad: k / 2,
            groups,
        })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = p.var(g, self.weight);
        let b = p.var(g, self.bias);
        g.conv2d(x, w, Some(b), self.stride, self.pad, self.groups)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(b: &mut ParamBuilder, name: &str, d: usize) -> Self {
        b.scoped(name, |b| Self {
            gamma: b.constant("gamma", &[d], 1.0),
            beta: b.constant("beta", &[d], 0.0),
        })
    }

    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        p: &ParamStore<T>,
        x: Var,
        eps: f64,
    ) -> Result<Var> {
        let gamma = p.var(g, self.gamma);
        let beta = p.var(g, self.beta);
        g.layer_norm(x, gamma, beta, eps)
    }
}

/// `[B, h*w, C]` tokens to a `[B, C, h, w]` map.
pub fn tokens_to_map<T: Float>(g: &mut Graph<T>, x: Var, h: usize, w: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let r = g.reshape(x, &[s[0], h, w, s[2]])?;
    g.permute(r, &[0, 3, 1, 2])
}

/// `[B, C, h, w]` map to `[B, h*w, C]` tokens.
pub fn map_to_tokens<T: Float>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let p = g.permute(x, &[0, 2, 3, 1])?;
    g.reshape(p, &[s[0], s[2] * s[3], s[1]])
}
