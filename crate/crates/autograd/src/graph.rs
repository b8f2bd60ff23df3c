//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in execution order, which is already a
//! topological order: inputs always sit at lower indices than their consumers.
//! [`Graph::backward`] walks the tape once in reverse and accumulates
//! gradients additively into every node that requires them.

use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{dim_err, shape_err, Result, TensorError};
use crate::kernels::{self, LinearTaps, Window};
use crate::scalar::{lit, Float};
use crate::tensor::{numel, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    L1,
    /// Reverse Huber with threshold `0.2 * max |error|` over the batch.
    BerHu,
}

/// Operation family of a tape record, used for reporting and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    AddBias,
    Activation,
    Softmax,
    LayerNorm,
    InstanceNorm,
    MatMul,
    Conv2d,
    Pad2d,
    AvgPool2d,
    Subsample2d,
    Resize,
    Reshape,
    Permute,
    Concat,
    Slice,
    Sum,
    Mean,
    MaskedLoss,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias {
        x: Var,
        bias: Var,
        axis: usize,
    },
    Activation(Var, Activation),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    InstanceNorm {
        x: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_b: bool,
        trans_b: bool,
    },
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
        groups: usize,
    },
    Pad2d(Var, usize),
    AvgPool2d {
        x: Var,
        k: usize,
        stride: usize,
    },
    Subsample2d(Var, usize),
    Resize {
        x: Var,
        ty: LinearTaps<T>,
        tx: LinearTaps<T>,
    },
    Reshape(Var),
    Permute {
        x: Var,
        gather: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
    MaskedLoss {
        pred: Var,
        dloss: Vec<T>,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddBias { .. } => OpKind::AddBias,
            Op::Activation(..) => OpKind::Activation,
            Op::Softmax(..) => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::InstanceNorm { .. } => OpKind::InstanceNorm,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Pad2d(..) => OpKind::Pad2d,
            Op::AvgPool2d { .. } => OpKind::AvgPool2d,
            Op::Subsample2d(..) => OpKind::Subsample2d,
            Op::Resize { .. } => OpKind::Resize,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Permute { .. } => OpKind::Permute,
            Op::Concat { .. } => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::MaskedLoss { .. } => OpKind::MaskedLoss,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// The compute graph: an append-only tape of operation records.
pub struct Graph<T: Float> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    params: HashMap<usize, Var>,
    fault: Option<OpKind>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return shape_err(op, a, b);
    }
    Ok(())
}

fn split_last2(shape: &[usize]) -> (usize, usize, usize) {
    let nd = shape.len();
    (numel(&shape[..nd - 2]), shape[nd - 2], shape[nd - 1])
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
            fault: None,
        }
    }

    /// Scales the upstream gradient of every record of `kind` by 1.5 during
    /// [`Graph::backward`]. Used to prove the gradient checker catches broken
    /// rules.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Hash of which side of zero every ReLU input lies on. Two evaluations
    /// with equal signatures sit on the same smooth piece of the graph.
    pub fn kink_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for node in &self.nodes {
            if let Op::Activation(x, Activation::Relu) = node.op {
                for &v in self.data(x) {
                    h = (h ^ u64::from(v > T::zero())).wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Gradient of the last backward pass, `None` when nothing reached `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient as a tensor, zeros when unreachable.
    pub fn grad_tensor(&self, v: Var) -> Tensor<T> {
        let shape = self.shape(v).to_vec();
        match self.grad(v) {
            Some(g) => Tensor::new(&shape, g.to_vec()).expect("grad shape"),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn input(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Inserts a learnable parameter. Repeated calls with the same `id`
    /// return the same node, so gradients from every use accumulate there.
    pub fn param(&mut self, id: usize, t: &Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(t.clone(), Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    /// `(param id, node)` pairs in insertion order.
    pub fn param_vars(&self) -> Vec<(usize, Var)> {
        let mut out: Vec<_> = self.params.iter().map(|(&k, &v)| (k, v)).collect();
        out.sort_by_key(|&(_, v)| v.0);
        out
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        same_shape(name, self.shape(a), self.shape(b))?;
        let (x, y) = (self.data(a), self.data(b));
        let data = x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(self.shape(a), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |p, q| p + q)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |p, q| p - q)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |p, q| p * q)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let t = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, c), rg)
    }

    /// Adds a 1-D `bias` broadcast along `axis` of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || self.shape(bias) != [shape[axis]] {
            return shape_err("add_bias", &shape, self.shape(bias));
        }
        let inner = numel(&shape[axis + 1..]);
        let ext = shape[axis];
        let b = self.data(bias);
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[(i / inner) % ext])
            .collect();
        let t = Tensor::new(&shape, data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(t, Op::AddBias { x, bias, axis }, rg))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let t = self.value(x).map(|v| activate(kind, v));
        let rg = self.rg(x);
        self.push(t, Op::Activation(x, kind), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Gelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        self.softmax_impl(x, None)
            .expect("unmasked softmax cannot fail")
    }

    /// Softmax over the last axis restricted to positions where `mask` is
    /// true. `mask` covers the last two axes and is broadcast over the rest.
    /// Rows with no allowed position produce zeros.
    pub fn masked_softmax(&mut self, x: Var, mask: Rc<Vec<bool>>) -> Result<Var> {
        self.softmax_impl(x, Some(mask))
    }

    fn softmax_impl(&mut self, x: Var, mask: Option<Rc<Vec<bool>>>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap_or(&1);
        let plane = if shape.len() >= 2 {
            n * shape[shape.len() - 2]
        } else {
            n
        };
        if let Some(m) = &mask {
            if m.len() != plane {
                return dim_err(
                    "masked_softmax",
                    format!(
                        "mask covers {} entries, last two axes hold {plane}",
                        m.len()
                    ),
                );
            }
        }
        let src = self.data(x);
        let mut out = vec![T::zero(); src.len()];
        for (r, (row, orow)) in src.chunks(n).zip(out.chunks_mut(n)).enumerate() {
            let moff = (r * n) % plane;
            let allowed = |j: usize| mask.as_ref().is_none_or(|m| m[moff + j]);
            let mut mx = T::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if allowed(j) && v > mx {
                    mx = v;
                }
            }
            if mx == T::neg_infinity() {
                continue;
            }
            let mut s = T::zero();
            for (j, (&v, o)) in row.iter().zip(orow.iter_mut()).enumerate() {
                if allowed(j) {
                    *o = (v - mx).exp();
                    s += *o;
                }
            }
            orow.iter_mut().for_each(|o| *o /= s);
        }
        let t = Tensor::new(&shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Softmax(x), rg))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return shape_err("layer_norm", &shape, self.shape(gamma));
        }
        let (xhat, rstd) = normalize_rows(self.data(x), d, lit(eps));
        let (g, b) = (self.data(gamma), self.data(beta));
        let data = xhat
            .iter()
            .enumerate()
            .map(|(i, &v)| v * g[i % d] + b[i % d])
            .collect();
        let t = Tensor::new(&shape, data)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Per-sample, per-channel normalization over the spatial axes of a
    /// `B x C x H x W` map (no affine parameters).
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return dim_err("instance_norm", format!("expects 4-D input, got {shape:?}"));
        }
        let (xhat, rstd) = normalize_rows(self.data(x), shape[2] * shape[3], lit(eps));
        let t = Tensor::new(&shape, xhat.clone())?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::InstanceNorm { x, xhat, rstd }, rg))
    }

    /// Matrix product over the last two axes.
    ///
    /// `a` is `[..., m, k]`; `b` is either a shared 2-D `[k, n]` matrix or a
    /// batched `[..., k, n]` with the same leading axes as `a`. With
    /// `trans_b`, `b` is stored as `[.., n, k]` and used transposed.
    pub fn matmul_ext(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return shape_err("matmul", &sa, &sb);
        }
        let (batch, m, k) = split_last2(&sa);
        let shared_b = sb.len() == 2;
        let (bb, r, c) = split_last2(&sb);
        let (kb, n) = if trans_b { (c, r) } else { (r, c) };
        let batch_ok =
            shared_b || (sb.len() == sa.len() && sb[..sb.len() - 2] == sa[..sa.len() - 2]);
        if kb != k || !batch_ok || (!shared_b && bb != batch) {
            return shape_err("matmul", &sa, &sb);
        }
        let mut out = vec![T::zero(); batch * m * n];
        let (ad, bd) = (self.data(a), self.data(b));
        if shared_b {
            kernels::gemm(false, trans_b, batch * m, n, k, ad, bd, &mut out, false);
        } else {
            for i in 0..batch {
                kernels::gemm(
                    false,
                    trans_b,
                    m,
                    n,
                    k,
                    &ad[i * m * k..(i + 1) * m * k],
                    &bd[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = n;
        let t = Tensor::new(&shape, out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            t,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_b,
                trans_b,
            },
            rg,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ext(a, b, false)
    }

    /// 2-D convolution of `x: B x Cin x H x W` with `w: Cout x Cin/groups x k x k`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sw[2] != sw[3] {
            return shape_err("conv2d", &sx, &sw);
        }
        let (b, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, cin_g, k) = (sw[0], sw[1], sw[2]);
        if groups == 0 || cin % groups != 0 || cout % groups != 0 || cin / groups != cin_g {
            return dim_err(
                "conv2d",
                format!("{cin} input / {cout} output channels incompatible with {groups} groups and weight {sw:?}"),
            );
        }
        if let Some(bv) = bias {
            if self.shape(bv) != [cout] {
                return shape_err("conv2d bias", &[cout], self.shape(bv));
            }
        }
        let win = Window {
            h,
            w: wd,
            k,
            stride,
            pad,
        };
        if !win.fits() {
            return dim_err("conv2d", format!("kernel {k} does not fit padded {h}x{wd}"));
        }
        let (oh, ow) = (win.out_h(), win.out_w());
        let cout_g = cout / groups;
        let mut out = vec![T::zero(); b * cout * oh * ow];
        let (xd, wdta) = (self.data(x), self.data(w));
        let depthwise = cin_g == 1 && cout_g == 1;
        let direct = k == 1 && stride == 1 && pad == 0;
        let mut cols = if depthwise || direct {
            Vec::new()
        } else {
            vec![T::zero(); cin_g * k * k * oh * ow]
        };
        for bi in 0..b {
            for g in 0..groups {
                let xs =
                    &xd[(bi * cin + g * cin_g) * h * wd..(bi * cin + (g + 1) * cin_g) * h * wd];
                let os = &mut out
                    [(bi * cout + g * cout_g) * oh * ow..(bi * cout + (g + 1) * cout_g) * oh * ow];
                let ws = &wdta[g * cout_g * cin_g * k * k..(g + 1) * cout_g * cin_g * k * k];
                if depthwise {
                    kernels::depthwise_plane(xs, ws, win, os);
                } else if direct {
                    kernels::gemm(false, false, cout_g, oh * ow, cin_g, ws, xs, os, false);
                } else {
                    kernels::im2col(xs, cin_g, win, &mut cols);
                    kernels::gemm(
                        false,
                        false,
                        cout_g,
                        oh * ow,
                        cin_g * k * k,
                        ws,
                        &cols,
                        os,
                        false,
                    );
                }
            }
        }
        if let Some(bv) = bias {
            let bd = self.data(bv);
            for (i, plane) in out.chunks_mut(oh * ow).enumerate() {
                let bc = bd[i % cout];
                plane.iter_mut().for_each(|v| *v += bc);
            }
        }
        let t = Tensor::new(&[b, cout, oh, ow], out)?;
        let rg = self.rg(x) || self.rg(w) || bias.is_some_and(|bv| self.rg(bv));
        Ok(self.push(
            t,
            Op::Conv2d {
                x,
                w,
                bias,
                stride,
                pad,
                groups,
            },
            rg,
        ))
    }

    /// Adds `pad` zero rows and columns on every side of the last two axes.
    pub fn zero_pad2d(&mut self, x: Var, pad: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return dim_err("zero_pad2d", format!("needs at least 2 axes, got {s:?}"));
        }
        let (lead, h, w) = split_last2(&s);
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        let mut out = vec![T::zero(); lead * ph * pw];
        let xd = self.data(x);
        for l in 0..lead {
            for y in 0..h {
                let src = &xd[(l * h + y) * w..(l * h + y + 1) * w];
                let off = (l * ph + y + pad) * pw + pad;
                out[off..off + w].copy_from_slice(src);
            }
        }
        let mut shape = s.clone();
        let nd = shape.len();
        shape[nd - 2] = ph;
        shape[nd - 1] = pw;
        let t = Tensor::new(&shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Pad2d(x, pad), rg))
    }

    /// Average pooling over the last two axes, no implicit padding.
    pub fn avg_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return dim_err("avg_pool2d", format!("needs at least 2 axes, got {s:?}"));
        }
        let (lead, h, w) = split_last2(&s);
        let win = Window {
            h,
            w,
            k,
            stride,
            pad: 0,
        };
        if !win.fits() {
            return dim_err("avg_pool2d", format!("window {k} larger than {h}x{w}"));
        }
        let (oh, ow) = (win.out_h(), win.out_w());
        let inv = T::one() / lit::<T>((k * k) as f64);
        let xd = self.data(x);
        let mut out = vec![T::zero(); lead * oh * ow];
        for l in 0..lead {
            let plane = &xd[l * h * w..(l + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::zero();
                    for ky in 0..k {
                        for kx in 0..k {
                            acc += plane[(oy * stride + ky) * w + ox * stride + kx];
                        }
                    }
                    out[(l * oh + oy) * ow + ox] = acc * inv;
                }
            }
        }
        let mut shape = s.clone();
        let nd = shape.len();
        shape[nd - 2] = oh;
        shape[nd - 1] = ow;
        let t = Tensor::new(&shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::AvgPool2d { x, k, stride }, rg))
    }

    /// Keeps every `stride`-th row and column of the last two axes.
    pub fn subsample2d(&mut self, x: Var, stride: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || stride == 0 {
            return dim_err("subsample2d", format!("bad input {s:?} / stride {stride}"));
        }
        let (lead, h, w) = split_last2(&s);
        let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
        let xd = self.data(x);
        let mut out = Vec::with_capacity(lead * oh * ow);
        for l in 0..lead {
            for oy in 0..oh {
                for ox in 0..ow {
                    out.push(xd[(l * h + oy * stride) * w + ox * stride]);
                }
            }
        }
        let mut shape = s.clone();
        let nd = shape.len();
        shape[nd - 2] = oh;
        shape[nd - 1] = ow;
        let t = Tensor::new(&shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Subsample2d(x, stride), rg))
    }

    /// Bilinear resampling of the last two axes (half-pixel centres).
    pub fn resize_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || oh == 0 || ow == 0 {
            return dim_err(
                "resize_bilinear",
                format!("cannot resize {s:?} to {oh}x{ow}"),
            );
        }
        let (lead, h, w) = split_last2(&s);
        let ty = LinearTaps::new(h, oh);
        let tx = LinearTaps::new(w, ow);
        let xd = self.data(x);
        let mut out = vec![T::zero(); lead * oh * ow];
        for l in 0..lead {
            kernels::bilinear_plane(
                &xd[l * h * w..(l + 1) * h * w],
                w,
                &ty,
                &tx,
                &mut out[l * oh * ow..(l + 1) * oh * ow],
            );
        }
        let mut shape = s.clone();
        let nd = shape.len();
        shape[nd - 2] = oh;
        shape[nd - 1] = ow;
        let t = Tensor::new(&shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Resize { x, ty, tx }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if axes.len() != s.len()
            || axes
                .iter()
                .any(|&a| a >= s.len() || std::mem::replace(&mut seen[a], true))
        {
            return dim_err("permute", format!("axes {axes:?} invalid for {s:?}"));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| s[a]).collect();
        let mut in_strides = vec![1usize; s.len()];
        for i in (0..s.len().saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * s[i + 1];
        }
        let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let total = numel(&s);
        let mut gather = Vec::with_capacity(total);
        let mut idx = vec![0usize; s.len()];
        let mut off = 0usize;
        for _ in 0..total {
            gather.push(off);
            for d in (0..idx.len()).rev() {
                idx[d] += 1;
                off += strides[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                off -= strides[d] * idx[d];
                idx[d] = 0;
            }
        }
        let xd = self.data(x);
        let data = gather.iter().map(|&i| xd[i]).collect();
        let t = Tensor::new(&out_shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Permute { x, gather }, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(
                *parts
                    .first()
                    .ok_or(TensorError::Contract("concat of nothing".into()))?,
            )
            .to_vec();
        if axis >= first.len() {
            return dim_err("concat", format!("axis {axis} out of range for {first:?}"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter()
                    .enumerate()
                    .any(|(i, &e)| i != axis && e != first[i])
            {
                return shape_err("concat", &first, s);
            }
            total += s[axis];
        }
        let outer = numel(&first[..axis]);
        let inner = numel(&first[axis + 1..]);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.data(p)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let t = Tensor::new(&shape, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            t,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return dim_err(
                "slice",
                format!("[{start}, {}) on axis {axis} of {s:?}", start + len),
            );
        }
        let outer = numel(&s[..axis]);
        let inner = numel(&s[axis + 1..]);
        let xd = self.data(x);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            data.extend_from_slice(&xd[base..base + len * inner]);
        }
        let mut shape = s.clone();
        shape[axis] = len;
        let t = Tensor::new(&shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Slice { x, axis, start }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(t, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let t = Tensor::scalar(v.sum() / lit::<T>(v.numel() as f64));
        let rg = self.rg(x);
        self.push(t, Op::Mean(x), rg)
    }

    /// Mean regression loss of `pred` against a fixed `target` over the
    /// positions where `mask` is true.
    pub fn masked_loss(
        &mut self,
        pred: Var,
        target: &Tensor<T>,
        mask: &[bool],
        kind: LossKind,
    ) -> Result<Var> {
        same_shape("masked_loss", self.shape(pred), target.shape())?;
        if mask.len() != target.numel() {
            return dim_err("masked_loss", "mask length differs from target");
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(TensorError::Contract("loss over an empty mask".into()));
        }
        let pd = self.data(pred);
        let err: Vec<T> = pd
            .iter()
            .zip(target.data())
            .zip(mask)
            .map(|((&p, &t), &m)| if m { p - t } else { T::zero() })
            .collect();
        let inv = T::one() / lit::<T>(count as f64);
        let (argmax, emax) = err
            .iter()
            .enumerate()
            .fold((0, T::zero()), |(k, m), (i, e)| {
                if e.abs() > m {
                    (i, e.abs())
                } else {
                    (k, m)
                }
            });
        let c = lit::<T>(0.2) * emax;
        let mut total = T::zero();
        let mut dloss = vec![T::zero(); err.len()];
        // The threshold depends on the largest error, so that element also
        // receives d(loss)/dc * dc/de.
        let mut dc = T::zero();
        for (e, d) in err.iter().zip(dloss.iter_mut()) {
            let a = e.abs();
            let sign = if *e > T::zero() {
                T::one()
            } else if *e < T::zero() {
                -T::one()
            } else {
                T::zero()
            };
            let (l, g) = match kind {
                LossKind::BerHu if a > c => {
                    dc += lit::<T>(0.5) - a * a / (lit::<T>(2.0) * c * c);
                    ((a * a + c * c) / (c + c), *e / c)
                }
                _ => (a, sign),
            };
            total += l;
            *d = g * inv;
        }
        if kind == LossKind::BerHu && emax > T::zero() {
            let s = if err[argmax] > T::zero() {
                T::one()
            } else {
                -T::one()
            };
            dloss[argmax] += lit::<T>(0.2) * s * dc * inv;
        }
        let value = total * inv;
        if !value.is_finite() {
            return Err(TensorError::Numeric("non-finite loss".into()));
        }
        let rg = self.rg(pred);
        Ok(self.push(Tensor::scalar(value), Op::MaskedLoss { pred, dloss }, rg))
    }

    /// Reverse pass from a scalar `loss`. Clears gradients of earlier passes.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(mut g) = self.grads[i].take() else {
                continue;
            };
            if self.nodes[i].requires_grad && !matches!(self.nodes[i].op, Op::Leaf) {
                if self.fault == Some(self.nodes[i].op.kind()) {
                    let upstream: Vec<T> = g.iter().map(|&v| v * lit(1.5)).collect();
                    self.propagate(i, &upstream);
                } else {
                    self.propagate(i, &g);
                }
                // Intermediate gradients are not needed once consumed.
                g.clear();
                g.shrink_to_fit();
                self.grads[i] = None;
            } else {
                self.grads[i] = Some(g);
            }
        }
        Ok(())
    }

    /// Returns the accumulator for `v`, or `None` when `v` needs no gradient.
    fn acc(&mut self, v: Var) -> Option<&mut [T]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(self.grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn propagate(&mut self, i: usize, g: &[T]) {
        // Move the op out so inputs can be borrowed while writing gradients.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.acc(v) {
                        add_into(d, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = self.acc(*a) {
                    add_into(d, g);
                }
                if let Some(d) = self.acc(*b) {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d -= g);
                }
            }
            Op::Mul(a, b) => {
                let bv = self.data(*b).to_vec();
                if let Some(d) = self.acc(*a) {
                    d.iter_mut()
                        .zip(g.iter().zip(&bv))
                        .for_each(|(d, (&g, &y))| *d += g * y);
                }
                let av = self.data(*a).to_vec();
                if let Some(d) = self.acc(*b) {
                    d.iter_mut()
                        .zip(g.iter().zip(&av))
                        .for_each(|(d, (&g, &x))| *d += g * x);
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                if let Some(d) = self.acc(*x) {
                    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * c);
                }
            }
            Op::AddBias { x, bias, axis } => {
                if let Some(d) = self.acc(*x) {
                    add_into(d, g);
                }
                let shape = self.shape(*x).to_vec();
                let inner = numel(&shape[axis + 1..]);
                let ext = shape[*axis];
                if let Some(d) = self.acc(*bias) {
                    for (j, &gv) in g.iter().enumerate() {
                        d[(j / inner) % ext] += gv;
                    }
                }
            }
            Op::Activation(x, kind) => {
                let kind = *kind;
                let xv = self.data(*x).to_vec();
                let yv = self.data(Var(i)).to_vec();
                if let Some(d) = self.acc(*x) {
                    for (j, dj) in d.iter_mut().enumerate() {
                        *dj += g[j] * activation_grad(kind, xv[j], yv[j]);
                    }
                }
            }
            Op::Softmax(x) => {
                let y = self.data(Var(i)).to_vec();
                let n = *self.shape(Var(i)).last().unwrap_or(&1);
                if let Some(d) = self.acc(*x) {
                    for ((drow, yrow), grow) in d.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                        let dot: T = yrow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                        for ((dv, &yv), &gv) in drow.iter_mut().zip(yrow).zip(grow) {
                            *dv += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.data(*gamma).len();
                let gam = self.data(*gamma).to_vec();
                if let Some(dg) = self.acc(*gamma) {
                    for (j, (&gv, &xh)) in g.iter().zip(xhat).enumerate() {
                        dg[j % d] += gv * xh;
                    }
                }
                if let Some(db) = self.acc(*beta) {
                    for (j, &gv) in g.iter().enumerate() {
                        db[j % d] += gv;
                    }
                }
                if let Some(dx) = self.acc(*x) {
                    let scaled: Vec<T> = g
                        .iter()
                        .enumerate()
                        .map(|(j, &gv)| gv * gam[j % d])
                        .collect();
                    normalize_backward(&scaled, xhat, rstd, d, dx);
                }
            }
            Op::InstanceNorm { x, xhat, rstd } => {
                let s = self.shape(*x).to_vec();
                let hw = s[2] * s[3];
                if let Some(dx) = self.acc(*x) {
                    normalize_backward(g, xhat, rstd, hw, dx);
                }
            }
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_b,
                trans_b,
            } => {
                let (batch, m, k, n, shared_b, trans_b) = (*batch, *m, *k, *n, *shared_b, *trans_b);
                let bv = self.data(*b).to_vec();
                if let Some(da) = self.acc(*a) {
                    if shared_b {
                        kernels::gemm(false, !trans_b, batch * m, k, n, g, &bv, da, true);
                    } else {
                        for t in 0..batch {
                            kernels::gemm(
                                false,
                                !trans_b,
                                m,
                                k,
                                n,
                                &g[t * m * n..(t + 1) * m * n],
                                &bv[t * k * n..(t + 1) * k * n],
                                &mut da[t * m * k..(t + 1) * m * k],
                                true,
                            );
                        }
                    }
                }
                let av = self.data(*a).to_vec();
                if let Some(db) = self.acc(*b) {
                    let reps = if shared_b { 1 } else { batch };
                    let rows = if shared_b { batch * m } else { m };
                    for t in 0..reps {
                        let gs = &g[t * rows * n..(t + 1) * rows * n];
                        let as_ = &av[t * rows * k..(t + 1) * rows * k];
                        let dbs = &mut db[t * k * n..(t + 1) * k * n];
                        if trans_b {
                            kernels::gemm(true, false, n, k, rows, gs, as_, dbs, true);
                        } else {
                            kernels::gemm(true, false, k, n, rows, as_, gs, dbs, true);
                        }
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                bias,
                stride,
                pad,
                groups,
            } => self.conv_backward(i, g, *x, *w, *bias, *stride, *pad, *groups),
            Op::Pad2d(x, pad) => {
                let pad = *pad;
                let (lead, h, w) = split_last2(self.shape(*x));
                let pw = w + 2 * pad;
                let ph = h + 2 * pad;
                if let Some(d) = self.acc(*x) {
                    for l in 0..lead {
                        for y in 0..h {
                            let off = (l * ph + y + pad) * pw + pad;
                            add_into(
                                &mut d[(l * h + y) * w..(l * h + y + 1) * w],
                                &g[off..off + w],
                            );
                        }
                    }
                }
            }
            Op::AvgPool2d { x, k, stride } => {
                let (k, stride) = (*k, *stride);
                let (lead, h, w) = split_last2(self.shape(*x));
                let (_, oh, ow) = split_last2(self.shape(Var(i)));
                let inv = T::one() / lit::<T>((k * k) as f64);
                if let Some(d) = self.acc(*x) {
                    for l in 0..lead {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = g[(l * oh + oy) * ow + ox] * inv;
                                for ky in 0..k {
                                    for kx in 0..k {
                                        d[l * h * w + (oy * stride + ky) * w + ox * stride + kx] +=
                                            gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Subsample2d(x, stride) => {
                let stride = *stride;
                let (lead, h, w) = split_last2(self.shape(*x));
                let (_, oh, ow) = split_last2(self.shape(Var(i)));
                if let Some(d) = self.acc(*x) {
                    let mut j = 0;
                    for l in 0..lead {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                d[(l * h + oy * stride) * w + ox * stride] += g[j];
                                j += 1;
                            }
                        }
                    }
                }
            }
            Op::Resize { x, ty, tx } => {
                let (lead, h, w) = split_last2(self.shape(*x));
                let (oh, ow) = (ty.lo.len(), tx.lo.len());
                if let Some(d) = self.acc(*x) {
                    for l in 0..lead {
                        kernels::bilinear_plane_backward(
                            &g[l * oh * ow..(l + 1) * oh * ow],
                            w,
                            ty,
                            tx,
                            &mut d[l * h * w..(l + 1) * h * w],
                        );
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(d) = self.acc(*x) {
                    add_into(d, g);
                }
            }
            Op::Permute { x, gather } => {
                if let Some(d) = self.acc(*x) {
                    for (&src, &gv) in gather.iter().zip(g) {
                        d[src] += gv;
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let first = self.shape(parts[0]).to_vec();
                let outer = numel(&first[..*axis]);
                let inner = numel(&first[axis + 1..]);
                let lens: Vec<usize> = parts
                    .iter()
                    .map(|&p| self.shape(p)[*axis] * inner)
                    .collect();
                let row: usize = lens.iter().sum();
                let mut off = 0;
                for (&p, &len) in parts.iter().zip(&lens) {
                    if let Some(d) = self.acc(p) {
                        for o in 0..outer {
                            add_into(
                                &mut d[o * len..(o + 1) * len],
                                &g[o * row + off..o * row + off + len],
                            );
                        }
                    }
                    off += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let s = self.shape(*x).to_vec();
                let len = self.shape(Var(i))[*axis];
                let outer = numel(&s[..*axis]);
                let inner = numel(&s[axis + 1..]);
                let ext = s[*axis];
                let start = *start;
                if let Some(d) = self.acc(*x) {
                    for o in 0..outer {
                        let base = (o * ext + start) * inner;
                        add_into(
                            &mut d[base..base + len * inner],
                            &g[o * len * inner..(o + 1) * len * inner],
                        );
                    }
                }
            }
            Op::Sum(x) => {
                let gv = g[0];
                if let Some(d) = self.acc(*x) {
                    d.iter_mut().for_each(|v| *v += gv);
                }
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                let gv = g[0] / lit::<T>(n as f64);
                if let Some(d) = self.acc(*x) {
                    d.iter_mut().for_each(|v| *v += gv);
                }
            }
            Op::MaskedLoss { pred, dloss } => {
                let gv = g[0];
                if let Some(d) = self.acc(*pred) {
                    d.iter_mut().zip(dloss).for_each(|(d, &l)| *d += gv * l);
                }
            }
        }
        self.nodes[i].op = op;
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &mut self,
        i: usize,
        g: &[T],
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let (b, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, cin_g, k) = (sw[0], sw[1], sw[2]);
        let win = Window {
            h,
            w: wd,
            k,
            stride,
            pad,
        };
        let (oh, ow) = (win.out_h(), win.out_w());
        let cout_g = cout / groups;
        if let Some(bv) = bias {
            if let Some(db) = self.acc(bv) {
                for (j, plane) in g.chunks(oh * ow).enumerate() {
                    db[j % cout] += plane.iter().copied().sum::<T>();
                }
            }
        }
        let need_x = self.nodes[x.0].requires_grad;
        let need_w = self.nodes[w.0].requires_grad;
        if !need_x && !need_w {
            return;
        }
        let xd = self.data(x).to_vec();
        let wv = self.data(w).to_vec();
        let mut dx = if need_x {
            vec![T::zero(); xd.len()]
        } else {
            Vec::new()
        };
        let mut dw = if need_w {
            vec![T::zero(); wv.len()]
        } else {
            Vec::new()
        };
        let depthwise = cin_g == 1 && cout_g == 1;
        let direct = k == 1 && stride == 1 && pad == 0;
        let ck = cin_g * k * k;
        let mut cols = vec![T::zero(); if depthwise { 0 } else { ck * oh * ow }];
        let mut dcols = vec![
            T::zero();
            if depthwise || !need_x {
                0
            } else {
                ck * oh * ow
            }
        ];
        let _ = i;
        for bi in 0..b {
            for gi in 0..groups {
                let xr = (bi * cin + gi * cin_g) * h * wd..(bi * cin + (gi + 1) * cin_g) * h * wd;
                let orr =
                    (bi * cout + gi * cout_g) * oh * ow..(bi * cout + (gi + 1) * cout_g) * oh * ow;
                let wr = gi * cout_g * ck..(gi + 1) * cout_g * ck;
                let gs = &g[orr];
                if depthwise {
                    kernels::depthwise_plane_backward(
                        &xd[xr.clone()],
                        &wv[wr.clone()],
                        gs,
                        win,
                        if need_x { Some(&mut dx[xr]) } else { None },
                        if need_w { Some(&mut dw[wr]) } else { None },
                    );
                    continue;
                }
                let colsref: &[T] = if direct {
                    &xd[xr.clone()]
                } else {
                    kernels::im2col(&xd[xr.clone()], cin_g, win, &mut cols);
                    &cols
                };
                if need_w {
                    kernels::gemm(
                        false,
                        true,
                        cout_g,
                        ck,
                        oh * ow,
                        gs,
                        colsref,
                        &mut dw[wr.clone()],
                        true,
                    );
                }
                if need_x {
                    if direct {
                        kernels::gemm(
                            true,
                            false,
                            ck,
                            oh * ow,
                            cout_g,
                            &wv[wr],
                            gs,
                            &mut dx[xr],
                            true,
                        );
                    } else {
                        kernels::gemm(
                            true,
                            false,
                            ck,
                            oh * ow,
                            cout_g,
                            &wv[wr],
                            gs,
                            &mut dcols,
                            false,
                        );
                        kernels::col2im(&dcols, cin_g, win, &mut dx[xr]);
                    }
                }
            }
        }
        if need_x {
            if let Some(d) = self.acc(x) {
                add_into(d, &dx);
            }
        }
        if need_w {
            if let Some(d) = self.acc(w) {
                add_into(d, &dw);
            }
        }
    }
}

fn add_into<T: Float>(d: &mut [T], g: &[T]) {
    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
}

/// Standard normal CDF.
pub fn normal_cdf<T: Float>(x: T) -> T {
    lit::<T>(0.5) * (T::one() + (x * lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub fn activate<T: Float>(kind: Activation, x: T) -> T {
    match kind {
        Activation::Relu => x.max(T::zero()),
        Activation::Gelu => x * normal_cdf(x),
        Activation::Sigmoid => T::one() / (T::one() + (-x).exp()),
    }
}

fn activation_grad<T: Float>(kind: Activation, x: T, y: T) -> T {
    match kind {
        Activation::Relu => {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        Activation::Gelu => {
            let pdf = (-(x * x) * lit(0.5)).exp() * lit(0.398_942_280_401_432_7);
            normal_cdf(x) + x * pdf
        }
        Activation::Sigmoid => y * (T::one() - y),
    }
}

/// Zero-mean / unit-variance normalization of consecutive rows of length `d`.
fn normalize_rows<T: Float>(x: &[T], d: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = Vec::with_capacity(x.len() / d.max(1));
    let inv_d = T::one() / lit::<T>(d as f64);
    for (row, out) in x.chunks(d).zip(xhat.chunks_mut(d)) {
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let r = T::one() / (var + eps).sqrt();
        for (o, &v) in out.iter_mut().zip(row) {
            *o = (v - mean) * r;
        }
        rstd.push(r);
    }
    (xhat, rstd)
}

fn normalize_backward<T: Float>(g: &[T], xhat: &[T], rstd: &[T], d: usize, dx: &mut [T]) {
    let inv_d = T::one() / lit::<T>(d as f64);
    for (((grow, xrow), &r), drow) in g
        .chunks(d)
        .zip(xhat.chunks(d))
        .zip(rstd)
        .zip(dx.chunks_mut(d))
    {
        let mg = grow.iter().copied().sum::<T>() * inv_d;
        let mgx = grow.iter().zip(xrow).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
        for ((dv, &gv), &xh) in drow.iter_mut().zip(grow).zip(xrow) {
            *dv += r * (gv - mg - xh * mgx);
        }
    }
}
