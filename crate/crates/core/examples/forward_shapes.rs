//! Runs the default model at both supported resolutions from one config and
//! prints the output shape, range and peak memory.

use std::time::Instant;

use himode::config::ModelConfig;
use himode::model::HiMode;
use himode_autograd::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn peak_rss_mb() -> Option<f64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: f64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb / 1024.0)
}

fn main() -> himode::Result<()> {
    let base = ModelConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (h, w) in [(256, 512), (512, 1024)] {
        let cfg = base.clone().with_resolution(h, w);
        let (model, params) = HiMode::init::<f32>(&cfg, 0)?;
        let image = Tensor::new(
            &[1, 3, h, w],
            (0..3 * h * w).map(|_| rng.gen::<f32>()).collect(),
        )?;
        let start = Instant::now();
        let depth = model.predict(&params, &image)?;
        let (lo, hi) = depth
            .data()
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| {
                (a.min(v), b.max(v))
            });
        println!(
            "{h}x{w}: output {:?} in [{lo:.3}, {hi:.3}] finite {} ({} params, {:.1}s, peak rss {:.0} MB)",
            depth.shape(),
            depth.all_finite(),
            params.count(),
            start.elapsed().as_secs_f64(),
            peak_rss_mb().unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
