//! Parameter counts per block for the default model and the six ablation
//! configurations.

use himode::config::{ModelConfig, Toggles};
use himode::model::{count_params, HiMode};

fn main() -> himode::Result<()> {
    let cfg = ModelConfig::default();
    let (_, store) = HiMode::init::<f32>(&cfg, 0)?;
    println!(
        "default model, {} backbone layers",
        cfg.backbone.layer_count()
    );
    for (group, n) in store.count_by_group() {
        println!("  {group:<10} {n:>10}");
    }
    println!("  {:<10} {:>10}", "total", store.count());
    println!();
    println!("ablation arms");
    for t in Toggles::TABLE {
        println!("  {:<28} {:>10}", t.label(), count_params(&t.apply(&cfg))?);
    }
    Ok(())
}
