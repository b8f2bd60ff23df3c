//! Writes a synthetic equirectangular room dataset and checks a few depths
//! of a cube room against their closed forms.
//!
//! cargo run --example synth_dataset [-- out_dir [count]]

use std::path::PathBuf;

use himode::data::{read_manifest, synth_room, write_synthetic_dataset, RoomSpec, Split};

fn main() -> himode::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("himode_rooms"));
    let count: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(20);

    let manifest = write_synthetic_dataset(&out, count, 128, 256, 0)?;
    let m = read_manifest(&manifest)?;
    println!("{} rooms at 128x256 in {}", m.records.len(), out.display());
    for split in [Split::Train, Split::Val, Split::Test] {
        println!("  {split:<5} {}", m.split(split).len());
    }

    let cube = RoomSpec {
        seed: 0,
        extents: [2.0, 2.0, 2.0],
        camera: [1.0, 1.0, 1.0],
        holes: 0,
    };
    let (h, w) = (64, 128);
    let s = synth_room(&cube, h, w)?;
    let at = |v: usize, u: usize| s.depth.data[v * w + u];
    println!("cube room, centred camera");
    println!("  facing +x wall   {:.6} (1)", at(h / 2, w / 2));
    println!(
        "  45 deg azimuth   {:.6} (sqrt 2)",
        at(h / 2, w / 2 + w / 8)
    );
    println!("  zenith           {:.6} (1)", at(0, 0));
    Ok(())
}
