//! Depth-wise CNN feature extractor built from HNet blocks.

use himode_autograd::{Float, Graph, Result, TensorError, Var};

use crate::config::BackboneConfig;
use crate::nn::Conv;
use crate::params::{ParamBuilder, ParamStore};

const NORM_EPS: f64 = 1e-5;

/// Indices of the earlier layers feeding layer `k` (layer 0 is the block
/// input): every `k - 2^j` with `2^j` dividing `k`.
pub fn hnet_links(k: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut dv = 1;
    while dv <= k {
        if k.is_multiple_of(dv) {
            out.push(k - dv);
        }
        dv *= 2;
    }
    out
}

/// Layers whose outputs form the block output: all odd layers and the last.
pub fn hnet_outputs(layers: usize) -> Vec<usize> {
    (1..=layers)
        .filter(|&i| i % 2 == 1 || i == layers)
        .collect()
}

/// Depth-wise 3x3 then point-wise 1x1, each followed by a non-affine
/// instance norm and ReLU.
#[derive(Clone, Debug)]
pub struct DwSeparable {
    pub depthwise: Conv,
    pub pointwise: Conv,
    pub cin: usize,
    pub cout: usize,
}

impl DwSeparable {
    pub fn new(b: &mut ParamBuilder, name: &str, cin: usize, cout: usize) -> Self {
        b.scoped(name, |b| Self {
            depthwise: Conv::depthwise(b, "dw", cin, 3),
            pointwise: Conv::new(b, "pw", cin, cout, 1, 1),
            cin,
            cout,
        })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.depthwise.forward(g, p, x)?;
        let h = g.instance_norm(h, NORM_EPS)?;
        let h = g.relu(h);
        let h = self.pointwise.forward(g, p, h)?;
        let h = g.instance_norm(h, NORM_EPS)?;
        Ok(g.relu(h))
    }
}

/// Harmonic densely connected block of depth-wise separable layers.
#[derive(Clone, Debug)]
pub struct HNetBlock {
    pub layers: Vec<DwSeparable>,
    pub transition: Conv,
    pub cin: usize,
    pub cout: usize,
}

impl HNetBlock {
    pub fn new(
        b: &mut ParamBuilder,
        name: &str,
        cin: usize,
        growth: usize,
        n_layers: usize,
        cout: usize,
    ) -> Self {
        b.scoped(name, |b| {
            let width = |i: usize| if i == 0 { cin } else { growth };
            let layers = (1..=n_layers)
                .map(|k| {
                    let c: usize = hnet_links(k).into_iter().map(width).sum();
                    DwSeparable::new(b, &format!("layer{k}"), c, growth)
                })
                .collect();
            let out_c: usize = hnet_outputs(n_layers).into_iter().map(width).sum();
            Self {
                layers,
                transition: Conv::new(b, "transition", out_c, cout, 1, 1),
                cin,
                cout,
            }
        })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &ParamStore<T>, x: Var) -> Result<Var> {
        let c = g.shape(x).get(1).copied().unwrap_or(0);
        if g.shape(x).len() != 4 || c != self.cin {
            return Err(TensorError::Dimension {
                op: "hnet_block",
                msg: format!(
                    "expected {} input channels, got shape {:?}",
                    self.cin,
                    g.shape(x)
                ),
            });
        }
        let mut outs = vec![x];
        for (i, layer) in self.layers.iter().enumerate() {
            let links: Vec<Var> = hnet_links(i + 1).into_iter().map(|j| outs[j]).collect();
            let input = if links.len() == 1 {
                links[0]
            } else {
                g.concat(&links, 1)?
            };
            let y = layer.forward(g, p, input)?;
            outs.push(y);
        }
        let picked: Vec<Var> = hnet_outputs(self.layers.len())
            .into_iter()
            .map(|j| outs[j])
            .collect();
        let cat = g.concat(&picked, 1)?;
        let y = self.transition.forward(g, p, cat)?;
        let y = g.instance_norm(y, NORM_EPS)?;
        Ok(g.relu(y))
    }
}

/// Conv block, HNet block and concatenation merge at one resolution.
#[derive(Clone, Debug)]
pub struct Stage {
    pub conv: Conv,
    pub hnet: HNetBlock,
    pub merge: Conv,
}

impl Stage {
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &ParamStore<T>, x: Var) -> Result<Var> {
        let c = self.conv.forward(g, p, x)?;
        let c = g.instance_norm(c, NORM_EPS)?;
        let c = g.relu(c);
        let h = self.hnet.forward(g, p, c)?;
        let cat = g.concat(&[c, h], 1)?;
        let m = self.merge.forward(g, p, cat)?;
        let m = g.instance_norm(m, NORM_EPS)?;
        Ok(g.relu(m))
    }
}

/// The four backbone feature maps; the last one feeds the tokenizer.
#[derive(Clone, Copy, Debug)]
pub struct FeaturePyramid {
    pub levels: [Var; 4],
}

impl FeaturePyramid {
    pub fn final_feature(&self) -> Var {
        self.levels[3]
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub stages: Vec<Stage>,
    pub config: BackboneConfig,
}

impl Backbone {
    pub fn new(b: &mut ParamBuilder, cfg: &BackboneConfig) -> Self {
        b.scoped("backbone", |b| {
            let mut cin = cfg.in_channels;
            let stages = (0..4)
                .map(|k| {
                    let c = cfg.widths[k];
                    let stage = b.scoped(format!("stage{}", k + 1), |b| Stage {
                        conv: Conv::new(b, "conv", cin, c, 3, cfg.strides[k]),
                        hnet: HNetBlock::new(b, "hnet", c, cfg.growth, cfg.hnet_layers, c),
                        merge: Conv::new(b, "merge", 2 * c, c, 1, 1),
                    });
                    cin = c;
                    stage
                })
                .collect();
            Self {
                stages,
                config: cfg.clone(),
            }
        })
    }

    pub fn layer_count(&self) -> usize {
        self.stages.iter().map(|s| 2 + s.hnet.layers.len()).sum()
    }

    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        p: &ParamStore<T>,
        image: Var,
    ) -> Result<FeaturePyramid> {
        let s = g.shape(image).to_vec();
        let sp = self.config.stride_product();
        if s.len() != 4 || s[1] != self.config.in_channels {
            return Err(TensorError::Dimension {
                op: "backbone_forward",
                msg: format!(
                    "expected B x {} x H x W, got {s:?}",
                    self.config.in_channels
                ),
            });
        }
        if !s[2].is_multiple_of(sp) || !s[3].is_multiple_of(sp) {
            return Err(TensorError::Dimension {
                op: "backbone_forward",
                msg: format!(
                    "{}x{} is not divisible by the stride product {sp}",
                    s[2], s[3]
                ),
            });
        }
        let mut x = image;
        let mut levels = [image; 4];
        for (k, stage) in self.stages.iter().enumerate() {
            x = stage.forward(g, p, x)?;
            levels[k] = x;
        }
        Ok(FeaturePyramid { levels })
    }
}
