//! Depth evaluation: median alignment, error/accuracy metrics and edge
//! precision/recall.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{HimodeError, Result};

/// Edge thresholds (depth-gradient units) used by default.
pub const EDGE_THRESHOLDS: [f64; 3] = [0.25, 0.5, 1.0];

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

impl std::fmt::Display for DepthMetrics {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (i, (name, v)) in Self::FIELDS.iter().zip(self.values()).enumerate() {
            if i > 0 {
                f.write_str("  ")?;
            }
            write!(f, "{name} {v:.4}")?;
        }
        Ok(())
    }
}

impl DepthMetrics {
    pub const FIELDS: [&'static str; 7] = [
        "abs_rel", "sq_rel", "rmse", "rmse_log", "delta1", "delta2", "delta3",
    ];

    pub fn values(&self) -> [f64; 7] {
        [
            self.abs_rel,
            self.sq_rel,
            self.rmse,
            self.rmse_log,
            self.delta1,
            self.delta2,
            self.delta3,
        ]
    }

    fn from_values(v: [f64; 7]) -> Self {
        Self {
            abs_rel: v[0],
            sq_rel: v[1],
            rmse: v[2],
            rmse_log: v[3],
            delta1: v[4],
            delta2: v[5],
            delta3: v[6],
        }
    }

    /// Field-wise mean.
    pub fn mean(items: &[DepthMetrics]) -> DepthMetrics {
        let mut acc = [0.0; 7];
        for m in items {
            for (a, v) in acc.iter_mut().zip(m.values()) {
                *a += v;
            }
        }
        let n = items.len().max(1) as f64;
        Self::from_values(acc.map(|a| a / n))
    }
}

fn check_lengths(pred: &[f64], gt: &[f64], mask: &[bool]) -> Result<usize> {
    if pred.len() != gt.len() || gt.len() != mask.len() {
        return Err(HimodeError::Metric {
            msg: format!(
                "length mismatch: pred {}, gt {}, mask {}",
                pred.len(),
                gt.len(),
                mask.len()
            ),
            pixels: 0,
        });
    }
    let valid = mask.iter().filter(|&&m| m).count();
    if valid == 0 {
        return Err(HimodeError::Metric {
            msg: "no valid pixels".into(),
            pixels: 0,
        });
    }
    Ok(valid)
}

/// Median of `v` (mean of the two middle values for even lengths).
pub fn median(v: &mut [f64]) -> f64 {
    let n = v.len();
    let mid = n / 2;
    let (_, &mut hi, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
    if n % 2 == 1 {
        hi
    } else {
        let lo = v[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lo + hi)
    }
}

/// Scale factor `median(gt) / median(pred)` over the mask.
pub fn alignment_scale(pred: &[f64], gt: &[f64], mask: &[bool]) -> Result<f64> {
    check_lengths(pred, gt, mask)?;
    let pick = |x: &[f64]| -> Vec<f64> {
        x.iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(&v, _)| v)
            .collect()
    };
    let mp = median(&mut pick(pred));
    let mg = median(&mut pick(gt));
    if mp == 0.0 || !mp.is_finite() || !mg.is_finite() {
        return Err(HimodeError::Alignment(format!(
            "median prediction is {mp}, cannot scale to median ground truth {mg}"
        )));
    }
    Ok(mg / mp)
}

/// `pred` scaled so its masked median matches the ground truth's.
pub fn align_depth(pred: &[f64], gt: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    let s = alignment_scale(pred, gt, mask)?;
    Ok(pred.iter().map(|&v| v * s).collect())
}

/// Error and threshold-accuracy metrics over the masked pixels. Threshold
/// accuracies use a strict `< 1.25^k`.
pub fn depth_metrics(pred: &[f64], gt: &[f64], mask: &[bool]) -> Result<DepthMetrics> {
    let valid = check_lengths(pred, gt, mask)?;
    let pairs = || {
        pred.iter()
            .zip(gt)
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|((&p, &g), _)| (p, g))
    };
    let bad_gt = pairs()
        .filter(|&(_, g)| !(g > 0.0 && g.is_finite()))
        .count();
    if bad_gt > 0 {
        return Err(HimodeError::Metric {
            msg: "ground truth must be positive and finite on the mask".into(),
            pixels: bad_gt,
        });
    }
    let bad_pred = pairs()
        .filter(|&(p, _)| !(p > 0.0 && p.is_finite()))
        .count();
    if bad_pred > 0 {
        return Err(HimodeError::Metric {
            msg: "prediction must be positive and finite on the mask for log metrics".into(),
            pixels: bad_pred,
        });
    }
    let mut acc = [0.0f64; 7];
    let t1 = 1.25;
    let t2 = 1.25f64.powi(2);
    let t3 = 1.25f64.powi(3);
    for (p, g) in pairs() {
        let d = p - g;
        let r = (p / g).max(g / p);
        let dl = p.ln() - g.ln();
        acc[0] += d.abs() / g;
        acc[1] += d * d / g;
        acc[2] += d * d;
        acc[3] += dl * dl;
        acc[4] += f64::from(u8::from(r < t1));
        acc[5] += f64::from(u8::from(r < t2));
        acc[6] += f64::from(u8::from(r < t3));
    }
    let n = valid as f64;
    Ok(DepthMetrics {
        abs_rel: acc[0] / n,
        sq_rel: acc[1] / n,
        rmse: (acc[2] / n).sqrt(),
        rmse_log: (acc[3] / n).sqrt(),
        delta1: acc[4] / n,
        delta2: acc[5] / n,
        delta3: acc[6] / n,
    })
}

/// Sobel gradient magnitude of an `h x w` map with edge-replicated
/// borders. The kernels are scaled by 1/4 so a unit step gives a response
/// of 1 on the pixels beside it.
pub fn sobel_magnitude(depth: &[f64], h: usize, w: usize) -> Vec<f64> {
    let at = |y: isize, x: isize| {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        depth[y * w + x]
    };
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            out[y as usize * w + x as usize] = 0.25 * (gx * gx + gy * gy).sqrt();
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeScores {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// The prediction had no edge pixels; precision is reported as 0.
    pub empty_prediction: bool,
}

/// Edge precision, recall and F1 per threshold. A pixel is an edge when its
/// Sobel magnitude exceeds the threshold; only masked pixels count.
pub fn edge_metrics(
    pred: &[f64],
    gt: &[f64],
    mask: &[bool],
    h: usize,
    w: usize,
    thresholds: &[f64],
) -> Result<Vec<EdgeScores>> {
    check_lengths(pred, gt, mask)?;
    if pred.len() != h * w {
        return Err(HimodeError::Metric {
            msg: format!("map of {} pixels is not {h}x{w}", pred.len()),
            pixels: 0,
        });
    }
    let mp = sobel_magnitude(pred, h, w);
    let mg = sobel_magnitude(gt, h, w);
    Ok(thresholds
        .iter()
        .map(|&t| {
            let (mut np, mut ng, mut both) = (0usize, 0usize, 0usize);
            for i in (0..h * w).filter(|&i| mask[i]) {
                let (a, b) = (mp[i] > t, mg[i] > t);
                np += usize::from(a);
                ng += usize::from(b);
                both += usize::from(a && b);
            }
            let precision = if np == 0 {
                0.0
            } else {
                both as f64 / np as f64
            };
            let recall = if ng == 0 {
                0.0
            } else {
                both as f64 / ng as f64
            };
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            EdgeScores {
                threshold: t,
                precision,
                recall,
                f1,
                empty_prediction: np == 0,
            }
        })
        .collect())
}

/// Metrics of one evaluated image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageReport {
    pub id: String,
    pub scale: f64,
    pub metrics: DepthMetrics,
    pub edges: Vec<EdgeScores>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub images: Vec<ImageReport>,
    pub aggregate: DepthMetrics,
    /// Per-threshold edge scores averaged over images.
    pub aggregate_edges: Vec<EdgeScores>,
}

impl MetricReport {
    pub fn new(images: Vec<ImageReport>) -> Self {
        let ms: Vec<DepthMetrics> = images.iter().map(|r| r.metrics).collect();
        let aggregate = DepthMetrics::mean(&ms);
        let n = images.len().max(1) as f64;
        let aggregate_edges = match images.first() {
            None => Vec::new(),
            Some(first) => (0..first.edges.len())
                .map(|k| {
                    let sum = |f: fn(&EdgeScores) -> f64| {
                        images.iter().map(|r| f(&r.edges[k])).sum::<f64>() / n
                    };
                    EdgeScores {
                        threshold: first.edges[k].threshold,
                        precision: sum(|e| e.precision),
                        recall: sum(|e| e.recall),
                        f1: sum(|e| e.f1),
                        empty_prediction: images.iter().any(|r| r.edges[k].empty_prediction),
                    }
                })
                .collect(),
        };
        Self {
            images,
            aggregate,
            aggregate_edges,
        }
    }

    /// One row per image plus a final `mean` row.
    pub fn to_csv(&self) -> String {
        let mut s = format!("id,{}\n", DepthMetrics::FIELDS.join(","));
        let row = |id: &str, m: &DepthMetrics| {
            let vals: Vec<String> = m.values().iter().map(|v| format!("{v:.9}")).collect();
            format!("{id},{}\n", vals.join(","))
        };
        for r in &self.images {
            s += &row(&r.id, &r.metrics);
        }
        s += &row("mean", &self.aggregate);
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| HimodeError::io(dir, e))?;
        for (ext, body) in [("csv", self.to_csv()), ("json", self.to_json())] {
            let path = dir.join(format!("{stem}.{ext}"));
            let mut f = std::fs::File::create(&path).map_err(|e| HimodeError::io(&path, e))?;
            f.write_all(body.as_bytes())
                .map_err(|e| HimodeError::io(&path, e))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 3.0, 2.0]), 2.5);
    }

    #[test]
    fn csv_has_aggregate_row() {
        let m = DepthMetrics::default();
        let rep = MetricReport::new(vec![
            ImageReport {
                id: "a".into(),
                scale: 1.0,
                metrics: m,
                edges: vec![],
            },
            ImageReport {
                id: "b".into(),
                scale: 1.0,
                metrics: m,
                edges: vec![],
            },
        ]);
        let csv = rep.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(
            lines[0],
            "id,abs_rel,sq_rel,rmse,rmse_log,delta1,delta2,delta3"
        );
        assert!(lines[3].starts_with("mean,"));
    }
}
