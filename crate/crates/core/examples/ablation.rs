//! The six-arm module ablation on a miniature model and a handful of
//! synthetic rooms.
//!
//! cargo run --example ablation [-- steps]

use himode::config::{ModelConfig, RunConfig};
use himode::data::{synth_room, RoomSpec};
use himode::harness::ablate;

fn main() -> himode::Result<()> {
    let steps: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(20);
    let mut cfg = RunConfig {
        model: ModelConfig::tiny().with_resolution(32, 64),
        ..RunConfig::default()
    };
    cfg.optim.steps = Some(steps);
    let (h, w) = (cfg.model.height, cfg.model.width);
    let rooms = |first: u64, n: u64| -> himode::Result<Vec<_>> {
        (first..first + n)
            .map(|s| synth_room(&RoomSpec::random(s), h, w))
            .collect()
    };
    let train = rooms(0, 8)?;
    let eval = rooms(100, 2)?;
    let report = ablate(&cfg, &train, &eval, |r| {
        let d1 = r.metrics.map(|m| m.delta1).unwrap_or(f64::NAN);
        println!(
            "{:<24} {:>8} params  delta1 {d1:.3}  {:.1}s",
            r.label, r.params, r.wall_time_s
        );
    })?;
    println!(
        "full model has the fewest parameters: {}",
        report.full_is_smallest
    );
    println!(
        "decoder mixer audit: {} = {} ({})",
        report.stp_delta.0,
        report.stp_delta.1,
        if report.stp_audit_passes() {
            "ok"
        } else {
            "mismatch"
        }
    );
    Ok(())
}
