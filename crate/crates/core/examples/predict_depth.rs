//! Runs an untrained desk-scale model on a synthetic room and writes the
//! PFM, 16-bit PNG and colour-mapped outputs.
//!
//! cargo run --example predict_depth [-- out_dir]

use std::path::PathBuf;

use himode::config::ModelConfig;
use himode::data::{read_pfm, save_rgb_png, synth_room, RoomSpec};
use himode::harness::predict_to_dir;
use himode::model::HiMode;

fn main() -> himode::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("himode_predict"));
    let cfg = ModelConfig::desk();
    let room = synth_room(&RoomSpec::random(7), cfg.height, cfg.width)?;
    std::fs::create_dir_all(&out).map_err(|e| himode::HimodeError::io(&out, e))?;
    let image = out.join("room.png");
    save_rgb_png(&image, &room.rgb)?;

    let (model, params) = HiMode::init::<f32>(&cfg, 0)?;
    let o = predict_to_dir(&model, &params, &image, &out)?;
    let depth = read_pfm(&o.pfm)?;
    let (lo, hi) = depth
        .data
        .iter()
        .fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    println!("{}x{} depth in [{lo:.3}, {hi:.3}] m", o.height, o.width);
    println!("png16 scale {:.3e} m/unit", o.depth_scale);
    for p in [&o.pfm, &o.png16, &o.color, &o.sidecar] {
        println!("  {}", p.display());
    }
    Ok(())
}
