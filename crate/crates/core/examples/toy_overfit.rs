//! Overfits the desk-scale model on 16 synthetic rooms at 128x256 and
//! reports the loss reduction and train-split accuracy.
//!
//! cargo run --example toy_overfit [-- steps [key value]...]
//!
//! Trailing pairs override config fields, e.g. `model.patch 1`.

use std::time::Instant;

use himode::config::{Alignment, ModelConfig, RunConfig};
use himode::data::{synth_room, RoomSpec};
use himode::harness::{evaluate, ModelPredictor, Trainer};

fn main() -> himode::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let steps: usize = args.first().and_then(|s| s.parse().ok()).unwrap_or(500);
    let mut cfg = RunConfig {
        model: ModelConfig::desk(),
        ..RunConfig::default()
    };
    cfg.optim.steps = Some(steps);
    cfg.optim.batch_size = 4;
    cfg.optim.lr = 3e-4;
    for kv in args.get(1..).unwrap_or_default().chunks(2) {
        if let [k, v] = kv {
            cfg.apply_override(k, v)?;
        }
    }

    let (h, w) = (cfg.model.height, cfg.model.width);
    let samples = (0..16)
        .map(|i| synth_room(&RoomSpec::random(1000 + i), h, w))
        .collect::<himode::Result<Vec<_>>>()?;

    let start = Instant::now();
    let mut trainer = Trainer::new(&cfg)?;
    let log = trainer.fit(&samples, |e, loss| {
        if e % 10 == 0 {
            println!(
                "epoch {e:>3}  loss {loss:.4}  {:.0}s",
                start.elapsed().as_secs_f64()
            );
        }
    })?;
    let first = log.epoch_losses[0];
    let last = *log.epoch_losses.last().expect("at least one epoch");
    let pred = ModelPredictor {
        model: &trainer.model,
        params: &trainer.params,
    };
    let report = evaluate(&pred, &samples, Alignment::Median)?;
    println!(
        "loss {first:.4} -> {last:.4} ({:.1}% reduction)",
        100.0 * (1.0 - last / first)
    );
    println!("train {}", report.aggregate);
    println!("{:.0}s", start.elapsed().as_secs_f64());
    Ok(())
}
