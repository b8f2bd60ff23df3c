//! 64-bit finite-difference checks of every parameter gradient of a block.

use std::time::Instant;

use himode_autograd::{Graph, OpKind, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{FeaturePyramid, HNetBlock};
use crate::config::{AttentionKind, ModelConfig};
use crate::error::{config_err, Result};
use crate::head::ContextAdjust;
use crate::model::HiMode;
use crate::params::{ParamBuilder, ParamId, ParamStore};
use crate::srb::Srb;
use crate::transformer::{DecoderBlock, EncoderBlock, Stp};

pub const BLOCKS: [&str; 6] = ["hnet", "encoder", "decoder", "srb", "cal", "end2end-tiny"];
pub const TOLERANCE: f64 = 1e-5;
/// Largest finite-difference step; halved by decades near ReLU kinks.
pub const FD_STEP: f64 = 1e-4;
pub const MIN_STEP: f64 = 1e-8;
/// Error floor as a fraction of the block's largest gradient. Tensors whose
/// true gradient vanishes (a bias feeding an instance norm) are judged on
/// absolute error at this scale instead of on rounding noise.
pub const FLOOR_FRACTION: f64 = 1e-3;
/// Coordinates checked per parameter tensor.
pub const MAX_COORDS: usize = 24;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCheck {
    pub name: String,
    pub sampled: usize,
    /// Sampled coordinates that were compared; the rest lie on a kink.
    pub checked: usize,
    pub max_rel_err: f64,
    /// Coordinates where a ReLU changed state inside the widest stencil.
    pub kinks: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockCheck {
    pub block: String,
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub worst: String,
    pub passed: bool,
    pub seconds: f64,
}

impl std::fmt::Display for BlockCheck {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<13} {} max rel err {:.3e} (worst {}) over {} tensors in {:.1}s",
            self.block,
            if self.passed { "PASS" } else { "FAIL" },
            self.max_rel_err,
            self.worst,
            self.params.len(),
            self.seconds
        )
    }
}

type LossFn = Box<dyn Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>>;

struct Fixture {
    store: ParamStore<f64>,
    loss: LossFn,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

/// `sum(out * r) / numel` for a fixed random `r`, summed over outputs.
fn probe(g: &mut Graph<f64>, outs: &[Var], weights: &[Tensor<f64>]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (&o, w) in outs.iter().zip(weights) {
        let r = g.constant(w.clone());
        let m = g.mul(o, r)?;
        let s = g.mean(m);
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    Ok(total.expect("at least one output"))
}

fn toy_transformer_config() -> ModelConfig {
    ModelConfig {
        key_dim: 6,
        mhsa_heads: 2,
        ffn_ratio: 2,
        ..ModelConfig::default()
    }
}

fn fixture(block: &str, seed: u64) -> Result<Fixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut b = ParamBuilder::new(seed);
    let fx = match block {
        "hnet" => {
            let blk = HNetBlock::new(&mut b, "hnet", 3, 2, 8, 4);
            let x = uniform(&mut rng, &[1, 3, 4, 6], -1.0, 1.0);
            let r = uniform(&mut rng, &[1, 4, 4, 6], -1.0, 1.0);
            let loss: LossFn = Box::new(move |g, p| {
                let xv = g.constant(x.clone());
                let y = blk.forward(g, p, xv)?;
                probe(g, &[y], std::slice::from_ref(&r))
            });
            (b, loss)
        }
        "encoder" => {
            let cfg = toy_transformer_config();
            let sca = b.scoped("sca_block", |b| EncoderBlock::new(b, &cfg, 8));
            let mcfg = ModelConfig {
                attention: AttentionKind::Mhsa,
                ..cfg.clone()
            };
            let mhsa = b.scoped("mhsa_block", |b| EncoderBlock::new(b, &mcfg, 8));
            let x = uniform(&mut rng, &[1, 2, 8], -1.0, 1.0);
            let pe = uniform(&mut rng, &[1, 2, 6], -1.0, 1.0);
            let r = [
                uniform(&mut rng, &[1, 2, 8], -1.0, 1.0),
                uniform(&mut rng, &[1, 2, 8], -1.0, 1.0),
            ];
            let loss: LossFn = Box::new(move |g, p| {
                let xv = g.constant(x.clone());
                let pv = g.constant(pe.clone());
                let (y1, _) = sca.forward(g, p, xv, Some(pv))?;
                let (y2, _) = mhsa.forward(g, p, xv, None)?;
                probe(g, &[y1, y2], &r)
            });
            (b, loss)
        }
        "decoder" => {
            let cfg = toy_transformer_config();
            let stp_dec = b.scoped("stp_block", |b| DecoderBlock::new(b, &cfg, 8));
            let mcfg = ModelConfig {
                use_stp: false,
                ..cfg.clone()
            };
            let mhsa_dec = b.scoped("mhsa_block", |b| DecoderBlock::new(b, &mcfg, 8));
            let stp2 = b.scoped("two_frames", |b| Stp::new(b, 8, 6, 3));
            let x = uniform(&mut rng, &[1, 2, 8], -1.0, 1.0);
            let pe = uniform(&mut rng, &[1, 2, 8], -1.0, 1.0);
            let frames = uniform(&mut rng, &[1, 2, 4, 8], -1.0, 1.0);
            let r = [
                uniform(&mut rng, &[1, 2, 8], -1.0, 1.0),
                uniform(&mut rng, &[1, 2, 8], -1.0, 1.0),
                uniform(&mut rng, &[1, 2, 4, 8], -1.0, 1.0),
            ];
            let loss: LossFn = Box::new(move |g, p| {
                let xv = g.constant(x.clone());
                let pv = g.constant(pe.clone());
                let fv = g.constant(frames.clone());
                let (y1, _) = stp_dec.forward(g, p, xv, Some(pv), (1, 2))?;
                let (y2, _) = mhsa_dec.forward(g, p, xv, Some(pv), (1, 2))?;
                let (y3, _) = stp2.forward(g, p, fv, (2, 2))?;
                probe(g, &[y1, y2, y3], &r)
            });
            (b, loss)
        }
        "srb" => {
            let srb = Srb::new(&mut b, "srb", 4, 1e-5);
            let x = uniform(&mut rng, &[1, 16, 4], -1.0, 1.0);
            let r = uniform(&mut rng, &[1, 4, 8], -1.0, 1.0);
            let loss: LossFn = Box::new(move |g, p| {
                let xv = g.constant(x.clone());
                let y = srb.forward(g, p, xv, (4, 4))?;
                probe(g, &[y], std::slice::from_ref(&r))
            });
            (b, loss)
        }
        "cal" => {
            let widths = [3, 4, 4, 6];
            let cal = ContextAdjust::new(&mut b, widths, 2, 3, 10.0);
            let fms = [
                uniform(&mut rng, &[1, 3, 4, 8], 0.0, 1.0),
                uniform(&mut rng, &[1, 4, 2, 4], 0.0, 1.0),
                uniform(&mut rng, &[1, 4, 2, 4], 0.0, 1.0),
                uniform(&mut rng, &[1, 6, 1, 2], 0.0, 1.0),
            ];
            let raw = uniform(&mut rng, &[1, 1, 8, 16], 0.0, 2.0);
            let r = uniform(&mut rng, &[1, 1, 8, 16], -1.0, 1.0);
            let loss: LossFn = Box::new(move |g, p| {
                let levels = [0, 1, 2, 3].map(|k| g.constant(fms[k].clone()));
                let rv = g.constant(raw.clone());
                let y = cal.forward(g, p, &FeaturePyramid { levels }, rv)?;
                probe(g, &[y], std::slice::from_ref(&r))
            });
            (b, loss)
        }
        "end2end-tiny" => {
            let cfg = ModelConfig::tiny();
            let (model, mb) = HiMode::build(&cfg, seed)?;
            b = mb;
            let x = uniform(&mut rng, &[1, 3, cfg.height, cfg.width], 0.0, 1.0);
            let r = uniform(&mut rng, &[1, 1, cfg.height, cfg.width], -1.0, 1.0);
            let loss: LossFn = Box::new(move |g, p| {
                let xv = g.constant(x.clone());
                let out = model.forward(g, p, xv)?;
                probe(g, &[out.depth], std::slice::from_ref(&r))
            });
            (b, loss)
        }
        other => {
            return config_err(format!(
                "unknown gradcheck block {other:?}; expected one of {}",
                BLOCKS.join(", ")
            ))
        }
    };
    Ok(Fixture {
        store: fx.0.finish(),
        loss: fx.1,
    })
}

fn sample_coords(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if n <= k {
        return (0..n).collect();
    }
    rand::seq::index::sample(rng, n, k).into_vec()
}

/// Checks the named block; `fault` corrupts one backward rule to show the
/// check catches it.
pub fn gradcheck_block(block: &str, seed: u64, fault: Option<OpKind>) -> Result<BlockCheck> {
    let start = Instant::now();
    let fx = fixture(block, seed)?;
    let mut store = fx.store;
    let mut g = Graph::new();
    if let Some(kind) = fault {
        g.inject_fault(kind);
    }
    let loss = (fx.loss)(&mut g, &store)?;
    g.backward(loss)?;
    let grads = store.grads(&g);
    drop(g);

    let eval = |store: &ParamStore<f64>| -> Result<(f64, u64)> {
        let mut g = Graph::new();
        let l = (fx.loss)(&mut g, store)?;
        Ok((g.value(l).data()[0], g.kink_signature()))
    };
    let (f0, sig0) = eval(&store)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc00d);
    let ids: Vec<ParamId> = store.ids().collect();
    let mut sampled = Vec::with_capacity(ids.len());
    for id in ids {
        let n = store.get(id).numel();
        let coords = sample_coords(n, MAX_COORDS, &mut rng);
        let mut analytic = Vec::with_capacity(coords.len());
        let mut numeric = Vec::with_capacity(coords.len());
        let mut kinks = 0;
        for &c in &coords {
            let orig = store.get(id).data()[c];
            let mut at = |delta: f64| -> Result<(f64, u64)> {
                store.get_mut(id).data_mut()[c] = orig + delta;
                let v = eval(&store);
                store.get_mut(id).data_mut()[c] = orig;
                v
            };
            let mut est = None;
            let mut h = FD_STEP;
            while est.is_none() && h >= MIN_STEP {
                let (fp, sp) = at(h)?;
                let (fm, sm) = at(-h)?;
                let (fp2, sp2) = at(2.0 * h)?;
                let (fm2, sm2) = at(-2.0 * h)?;
                let right = sp == sig0 && sp2 == sig0;
                let left = sm == sig0 && sm2 == sig0;
                est = match (right, left) {
                    (true, true) => Some((8.0 * (fp - fm) - (fp2 - fm2)) / (12.0 * h)),
                    // A ReLU input sits at zero to working precision; the
                    // analytic gradient is the derivative of the piece
                    // containing the base point.
                    (true, false) if h * 10.0 < MIN_STEP => {
                        Some((-3.0 * f0 + 4.0 * fp - fp2) / (2.0 * h))
                    }
                    (false, true) if h * 10.0 < MIN_STEP => {
                        Some((3.0 * f0 - 4.0 * fm + fm2) / (2.0 * h))
                    }
                    _ => None,
                };
                h /= 10.0;
            }
            if h < FD_STEP / 5.0 {
                kinks += 1;
            }
            // Stencils straddle a kink at every step: the derivative is
            // undefined here and the coordinate is not compared.
            if let Some(est) = est {
                analytic.push(grads[id.index()].data()[c]);
                numeric.push(est);
            }
        }
        sampled.push((id, coords.len(), analytic, numeric, kinks));
    }
    let magnitude = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let block_scale = sampled
        .iter()
        .map(|(_, _, a, n, _)| magnitude(a).max(magnitude(n)))
        .fold(0.0, f64::max);
    let floor = (FLOOR_FRACTION * block_scale).max(1e-12);
    let params: Vec<ParamCheck> = sampled
        .into_iter()
        .map(|(id, count, a, n, kinks)| {
            let diff = a
                .iter()
                .zip(&n)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            ParamCheck {
                name: store.name(id).to_string(),
                sampled: count,
                checked: a.len(),
                max_rel_err: diff / magnitude(&a).max(magnitude(&n)).max(floor),
                kinks,
            }
        })
        .collect();
    let (worst, max_rel_err) = params
        .iter()
        .map(|p| (p.name.clone(), p.max_rel_err))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap_or_default();
    Ok(BlockCheck {
        block: block.to_string(),
        passed: max_rel_err < TOLERANCE,
        params,
        max_rel_err,
        worst,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Parses an operation family name such as `matmul` or `layer_norm`.
pub fn parse_op_kind(s: &str) -> Option<OpKind> {
    let norm: String = s
        .chars()
        .filter(|c| c.is_ascii_alphanumeric())
        .collect::<String>()
        .to_lowercase();
    let all = [
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::AddBias,
        OpKind::Activation,
        OpKind::Softmax,
        OpKind::LayerNorm,
        OpKind::InstanceNorm,
        OpKind::MatMul,
        OpKind::Conv2d,
        OpKind::Pad2d,
        OpKind::AvgPool2d,
        OpKind::Subsample2d,
        OpKind::Resize,
        OpKind::Reshape,
        OpKind::Permute,
        OpKind::Concat,
        OpKind::Slice,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::MaskedLoss,
    ];
    all.into_iter()
        .find(|k| format!("{k:?}").to_lowercase() == norm)
}
