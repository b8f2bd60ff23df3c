//! Median alignment, error metrics and edge scores on small hand-made maps.

use himode::metrics::{align_depth, depth_metrics, edge_metrics, EDGE_THRESHOLDS};

fn main() -> himode::Result<()> {
    let gt = [1.0, 2.0, 4.0];
    let m = depth_metrics(&[1.1, 1.8, 5.0], &gt, &[true; 3])?;
    println!("three pixels: {m}");

    let scaled = [2.2, 3.6, 10.0];
    let aligned = align_depth(&scaled, &gt, &[true; 3])?;
    println!("prediction scaled by its median ratio: {aligned:.3?}");

    let (h, w) = (6, 8);
    let step = |lo: f64, hi: f64| -> Vec<f64> {
        (0..h * w)
            .map(|i| if i % w < w / 2 { lo } else { hi })
            .collect()
    };
    let gt = step(1.0, 3.0);
    let pred = step(1.0, 1.3);
    for e in edge_metrics(&pred, &gt, &vec![true; h * w], h, w, &EDGE_THRESHOLDS)? {
        println!(
            "edges@{:.2}  precision {:.2}  recall {:.2}  f1 {:.2}{}",
            e.threshold,
            e.precision,
            e.recall,
            e.f1,
            if e.empty_prediction {
                "  (no predicted edges)"
            } else {
                ""
            }
        );
    }
    Ok(())
}
