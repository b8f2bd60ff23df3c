use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Toggles};
use crate::data::ImageSample;
use crate::error::Result;
use crate::metrics::DepthMetrics;
use crate::model::HiMode;
use crate::params::ParamStore;

use super::eval::{evaluate, ModelPredictor};
use super::train::Trainer;

/// Published parameter count of the full model, shown for reference only.
pub const REFERENCE_FULL_PARAMS: f64 = 79.67e6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub toggles: Toggles,
    pub params: usize,
    pub metrics: Option<DepthMetrics>,
    pub final_loss: Option<f64>,
    pub wall_time_s: f64,
    /// Set when this arm failed to train or evaluate.
    pub failure: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    /// The full model has strictly fewer parameters than every other arm.
    pub full_is_smallest: bool,
    /// `params(no STP) - params(full)` and the count difference between
    /// the decoder's MHSA layer and its STP layer; equal when the audit
    /// passes.
    pub stp_delta: (i64, i64),
    pub reference_full_params: f64,
}

impl AblationReport {
    pub fn stp_audit_passes(&self) -> bool {
        self.stp_delta.0 == self.stp_delta.1
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!(
            "arm,params,{},final_loss,wall_time_s,failure\n",
            DepthMetrics::FIELDS.join(",")
        );
        for r in &self.rows {
            let m = match &r.metrics {
                Some(m) => m
                    .values()
                    .iter()
                    .map(|v| format!("{v:.6}"))
                    .collect::<Vec<_>>()
                    .join(","),
                None => [""; 7].join(","),
            };
            let loss = r.final_loss.map(|l| format!("{l:.6}")).unwrap_or_default();
            let fail = r.failure.clone().unwrap_or_default().replace(',', ";");
            s += &format!(
                "{},{},{m},{loss},{:.2},{fail}\n",
                r.label, r.params, r.wall_time_s
            );
        }
        s
    }
}

fn mixer_params(base: &RunConfig, use_stp: bool) -> Result<usize> {
    let mut m = Toggles::TABLE[0].apply(&base.model);
    m.use_stp = use_stp;
    let (_, b) = HiMode::build(&m, 0)?;
    let store: ParamStore<f32> = b.finish();
    let prefix = if use_stp {
        "decoder.0.stp."
    } else {
        "decoder.0.mhsa."
    };
    Ok(store.count_prefix(prefix) * m.decoder_blocks)
}

/// Trains and evaluates the six module combinations with a shared seed and
/// data. An arm that fails keeps its row with the failure recorded.
pub fn ablate(
    base: &RunConfig,
    train: &[ImageSample],
    eval: &[ImageSample],
    mut on_row: impl FnMut(&AblationRow),
) -> Result<AblationReport> {
    let mut rows = Vec::with_capacity(Toggles::TABLE.len());
    for t in Toggles::TABLE {
        let mut cfg = base.clone();
        cfg.model = t.apply(&base.model);
        let start = Instant::now();
        let params = crate::model::count_params(&cfg.model)?;
        let outcome = (|| -> Result<(f64, DepthMetrics)> {
            let mut trainer = Trainer::new(&cfg)?;
            let log = trainer.fit(train, |_, _| {})?;
            let pred = ModelPredictor {
                model: &trainer.model,
                params: &trainer.params,
            };
            let report = evaluate(&pred, eval, cfg.align)?;
            Ok((
                log.epoch_losses.last().copied().unwrap_or(f64::NAN),
                report.aggregate,
            ))
        })();
        let (metrics, final_loss, failure) = match outcome {
            Ok((l, m)) => (Some(m), Some(l), None),
            Err(e) => (None, None, Some(e.to_string())),
        };
        let row = AblationRow {
            label: t.label(),
            toggles: t,
            params,
            metrics,
            final_loss,
            wall_time_s: start.elapsed().as_secs_f64(),
            failure,
        };
        on_row(&row);
        rows.push(row);
    }
    let full = rows[0].params;
    let full_is_smallest = rows[1..].iter().all(|r| r.params > full);
    // Row 3 differs from the full model only in the decoder mixer.
    let stp_delta = (
        rows[3].params as i64 - full as i64,
        mixer_params(base, false)? as i64 - mixer_params(base, true)? as i64,
    );
    Ok(AblationReport {
        rows,
        full_is_smallest,
        stp_delta,
        reference_full_params: REFERENCE_FULL_PARAMS,
    })
}
