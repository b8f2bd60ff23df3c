use himode_autograd::Tensor;

use crate::config::Alignment;
use crate::data::ImageSample;
use crate::error::Result;
use crate::metrics::{
    alignment_scale, depth_metrics, edge_metrics, ImageReport, MetricReport, EDGE_THRESHOLDS,
};
use crate::model::HiMode;
use crate::params::ParamStore;

/// Anything that maps a sample to a depth map of the same extent.
pub trait DepthPredictor {
    fn predict(&self, sample: &ImageSample) -> Result<Vec<f64>>;
}

pub struct ModelPredictor<'a> {
    pub model: &'a HiMode,
    pub params: &'a ParamStore<f32>,
}

impl DepthPredictor for ModelPredictor<'_> {
    fn predict(&self, sample: &ImageSample) -> Result<Vec<f64>> {
        let s = sample.rgb.shape();
        let x = Tensor::new(&[1, s[0], s[1], s[2]], sample.rgb.data().to_vec())?;
        let d = self.model.predict(self.params, &x)?;
        Ok(d.data().iter().map(|&v| f64::from(v)).collect())
    }
}

/// Per-image (optionally median-aligned) depth and edge metrics plus
/// their mean.
pub fn evaluate(
    predictor: &dyn DepthPredictor,
    samples: &[ImageSample],
    align: Alignment,
) -> Result<MetricReport> {
    let mut rows = Vec::with_capacity(samples.len());
    for s in samples {
        let gt = s.depth.to_f64();
        let mut pred = predictor.predict(s)?;
        let scale = match align {
            Alignment::Median => alignment_scale(&pred, &gt, &s.mask)?,
            Alignment::None => 1.0,
        };
        pred.iter_mut().for_each(|v| *v *= scale);
        let metrics = depth_metrics(&pred, &gt, &s.mask)?;
        let edges = edge_metrics(
            &pred,
            &gt,
            &s.mask,
            s.depth.height,
            s.depth.width,
            &EDGE_THRESHOLDS,
        )?;
        rows.push(ImageReport {
            id: s.id.clone(),
            scale,
            metrics,
            edges,
        });
    }
    Ok(MetricReport::new(rows))
}
