use himode_autograd::{adam_step, AdamConfig, AdamState, Graph, LossKind, Tensor, TensorError};

use crate::config::{LossChoice, RunConfig};
use crate::data::{epoch_order, ImageSample};
use crate::error::{HimodeError, Result};
use crate::metrics::{depth_metrics, DepthMetrics};
use crate::model::HiMode;
use crate::params::ParamStore;

#[derive(Clone, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainLog {
    pub step_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
    /// Unaligned metrics of the training forward passes of each epoch.
    pub epoch_metrics: Vec<DepthMetrics>,
}

/// Images, targets and masks of a batch as `[B, 3, H, W]`, `[B, 1, H, W]`
/// and a flat mask.
pub fn stack_batch(samples: &[&ImageSample]) -> Result<(Tensor<f32>, Tensor<f32>, Vec<bool>)> {
    let first = samples
        .first()
        .ok_or_else(|| HimodeError::Config("empty batch".into()))?;
    let (h, w) = (first.depth.height, first.depth.width);
    let mut rgb = Vec::with_capacity(samples.len() * 3 * h * w);
    let mut depth = Vec::with_capacity(samples.len() * h * w);
    let mut mask = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if s.rgb.shape() != [3, h, w] || (s.depth.height, s.depth.width) != (h, w) {
            return Err(HimodeError::Config(format!(
                "sample {} does not match the batch size {h}x{w}",
                s.id
            )));
        }
        rgb.extend_from_slice(s.rgb.data());
        depth.extend_from_slice(&s.depth.data);
        mask.extend_from_slice(&s.mask);
    }
    let b = samples.len();
    Ok((
        Tensor::new(&[b, 3, h, w], rgb)?,
        Tensor::new(&[b, 1, h, w], depth)?,
        mask,
    ))
}

/// Owns one model, its parameters and optimizer state.
pub struct Trainer {
    pub config: RunConfig,
    pub model: HiMode,
    pub params: ParamStore<f32>,
    pub adam: AdamState<f32>,
}

impl Trainer {
    pub fn new(config: &RunConfig) -> Result<Self> {
        let (model, params) = HiMode::init::<f32>(&config.model, config.seed)?;
        let adam = AdamState::new(params.values(), AdamConfig::with_lr(config.optim.lr));
        Ok(Self {
            config: config.clone(),
            model,
            params,
            adam,
        })
    }

    pub fn step(&self) -> usize {
        self.adam.step as usize
    }

    fn loss_kind(&self) -> LossKind {
        match self.config.optim.loss {
            LossChoice::Berhu => LossKind::BerHu,
            LossChoice::L1 => LossKind::L1,
        }
    }

    /// One optimizer step; returns the loss and the batch predictions.
    pub fn train_step(&mut self, batch: &[&ImageSample]) -> Result<(f64, Tensor<f32>)> {
        let (rgb, target, mask) = stack_batch(batch)?;
        let mut g = Graph::new();
        let x = g.constant(rgb);
        let out = self.model.forward(&mut g, &self.params, x)?;
        let step = self.step();
        let loss = match g.masked_loss(out.depth, &target, &mask, self.loss_kind()) {
            Ok(l) => l,
            Err(TensorError::Numeric(_)) => return Err(HimodeError::NonFiniteLoss { step }),
            Err(e) => return Err(e.into()),
        };
        let value = f64::from(g.value(loss).data()[0]);
        if !value.is_finite() {
            return Err(HimodeError::NonFiniteLoss { step });
        }
        g.backward(loss)?;
        let grads = self.params.grads(&g);
        if grads.iter().any(|t| !t.all_finite()) {
            return Err(HimodeError::NonFiniteLoss { step });
        }
        adam_step(self.params.values_mut(), &grads, &mut self.adam)?;
        Ok((value, g.value(out.depth).clone()))
    }

    /// Trains on in-memory samples for `optim.steps` steps (or
    /// `optim.epochs` epochs when no step budget is set), shuffling each
    /// epoch deterministically from the seed.
    pub fn fit(
        &mut self,
        samples: &[ImageSample],
        mut on_epoch: impl FnMut(usize, f64),
    ) -> Result<TrainLog> {
        if samples.is_empty() {
            return Err(HimodeError::Config("no training samples".into()));
        }
        let opt = self.config.optim.clone();
        let budget = opt.steps.unwrap_or(usize::MAX);
        let mut log = TrainLog::default();
        let mut epoch = 0u64;
        while log.step_losses.len() < budget
            && (opt.steps.is_some() || (epoch as usize) < opt.epochs)
        {
            let order = epoch_order(samples.len(), self.config.seed, epoch);
            let mut losses = Vec::new();
            let mut metrics = Vec::new();
            for chunk in order.chunks(opt.batch_size.max(1)) {
                if log.step_losses.len() >= budget {
                    break;
                }
                let batch: Vec<&ImageSample> = chunk.iter().map(|&i| &samples[i]).collect();
                let (loss, pred) = self.train_step(&batch)?;
                log.step_losses.push(loss);
                losses.push(loss);
                let hw = pred.numel() / batch.len();
                for (k, s) in batch.iter().enumerate() {
                    let p: Vec<f64> = pred.data()[k * hw..(k + 1) * hw]
                        .iter()
                        .map(|&v| f64::from(v))
                        .collect();
                    if let Ok(m) = depth_metrics(&p, &s.depth.to_f64(), &s.mask) {
                        metrics.push(m);
                    }
                }
            }
            let mean = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
            log.epoch_losses.push(mean);
            log.epoch_metrics.push(DepthMetrics::mean(&metrics));
            on_epoch(epoch as usize, mean);
            epoch += 1;
        }
        Ok(log)
    }
}
