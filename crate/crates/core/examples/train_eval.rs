//! Trains a miniature model on synthetic rooms, saves and reloads the
//! checkpoint, then evaluates the test split.
//!
//! cargo run --example train_eval [-- steps]

use himode::config::{ModelConfig, RunConfig};
use himode::data::{read_manifest, write_synthetic_dataset, Split};
use himode::harness::{evaluate, Checkpoint, ModelPredictor, Trainer};

fn main() -> himode::Result<()> {
    let steps: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(120);
    let dir = std::env::temp_dir().join("himode_train_eval");
    let mut cfg = RunConfig {
        model: ModelConfig::tiny().with_resolution(32, 64),
        ..RunConfig::default()
    };
    cfg.optim.steps = Some(steps);
    let target = (cfg.model.height, cfg.model.width);

    let manifest = read_manifest(&write_synthetic_dataset(
        &dir.join("data"),
        20,
        target.0,
        target.1,
        1,
    )?)?;
    let train = manifest.load_split(Split::Train, target)?;
    let test = manifest.load_split(Split::Test, target)?;

    let mut trainer = Trainer::new(&cfg)?;
    let log = trainer.fit(&train, |e, loss| println!("epoch {e:>3}  loss {loss:.4}"))?;
    println!(
        "{} steps, last epoch train {}",
        log.step_losses.len(),
        log.epoch_metrics.last().expect("one epoch")
    );

    let path = dir.join("checkpoint.bin");
    Checkpoint::from_trainer(&trainer).save(&path)?;
    let ck = Checkpoint::load(&path)?;
    let model = ck.model()?;
    let report = evaluate(
        &ModelPredictor {
            model: &model,
            params: &ck.params,
        },
        &test,
        cfg.align,
    )?;
    report.write(&dir, "test_metrics")?;
    println!("test {}", report.aggregate);
    for e in &report.aggregate_edges {
        println!(
            "edges@{:.2}  P {:.3}  R {:.3}  F1 {:.3}",
            e.threshold, e.precision, e.recall, e.f1
        );
    }
    println!("reports in {}", dir.display());
    Ok(())
}
