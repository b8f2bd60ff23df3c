//! Acceptance suite. Runs every criterion in sequence, prints one line per
//! criterion and exits non-zero when any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use himode::config::{Alignment, AttentionKind, ModelConfig, RunConfig, Toggles};
use himode::data::{read_pfm, synth_room, write_pfm, DepthMap, ImageSample, RoomSpec};
use himode::harness::{
    ablate, evaluate, gradcheck_block, Checkpoint, ModelPredictor, Trainer, BLOCKS,
};
use himode::metrics::depth_metrics;
use himode::model::HiMode;
use himode::params::{ParamBuilder, ParamStore};
use himode::srb::Srb;
use himode::transformer::{EncoderBlock, Stp};
use himode_autograd::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn randomize(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in store.values_mut() {
        let data = (0..t.numel()).map(|_| rng.gen_range(-0.5..0.5)).collect();
        *t = Tensor::new(t.shape(), data).unwrap();
    }
}

fn rooms(n: usize, first: u64, h: usize, w: usize) -> Vec<ImageSample> {
    (0..n)
        .map(|i| synth_room(&RoomSpec::random(first + i as u64), h, w).unwrap())
        .collect()
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut worst = (0.0f64, String::new());
    let mut failed = Vec::new();
    for b in BLOCKS {
        let r = gradcheck_block(b, 0, None).map_err(|e| e.to_string())?;
        if r.max_rel_err > worst.0 {
            worst = (r.max_rel_err, format!("{b}/{}", r.worst));
        }
        let skipped = r.params.iter().any(|p| p.checked == 0);
        if !r.passed || r.max_rel_err >= 1e-5 || skipped {
            failed.push(b);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        failed.is_empty() && secs < 300.0,
        format!(
            "{} blocks, max rel err {:.2e} at {}, failing {failed:?}, {secs:.1}s (limit 1e-5, 300s)",
            BLOCKS.len(),
            worst.0,
            worst.1
        ),
    )
}

fn shape_and_range() -> Outcome {
    let base = ModelConfig::default();
    let mut parts = Vec::new();
    let mut ok = true;
    for (h, w) in [(256, 512), (512, 1024)] {
        let cfg = base.clone().with_resolution(h, w);
        let (model, p) = HiMode::init::<f32>(&cfg, 0).map_err(|e| e.to_string())?;
        let img = random(&[1, 3, h, w], 1, 0.0, 1.0).cast::<f32>();
        let d = model.predict(&p, &img).map_err(|e| e.to_string())?;
        let (lo, hi) = d
            .data()
            .iter()
            .fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        let good = d.shape() == [1, 1, h, w]
            && d.all_finite()
            && d.data()
                .iter()
                .all(|&v| (0.0..=cfg.d_max as f32).contains(&v));
        ok &= good;
        parts.push(format!("{h}x{w} -> {:?} in [{lo:.3}, {hi:.3}]", d.shape()));
    }
    check(ok, format!("{} (d_max {})", parts.join(", "), base.d_max))
}

fn scalar_metrics(pred: &[f64], gt: &[f64]) -> [f64; 7] {
    let n = pred.len() as f64;
    let mut s = [0.0; 7];
    for (&p, &g) in pred.iter().zip(gt) {
        s[0] += (p - g).abs() / g / n;
        s[1] += (p - g) * (p - g) / g / n;
        s[2] += (p - g) * (p - g) / n;
        s[3] += (p.ln() - g.ln()).powi(2) / n;
        let r = (p / g).max(g / p);
        for k in 1..=3 {
            if r < 1.25f64.powi(k) {
                s[3 + k as usize] += 1.0 / n;
            }
        }
    }
    s[2] = s[2].sqrt();
    s[3] = s[3].sqrt();
    s
}

fn metrics_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let gt: Vec<f64> = (0..32 * 64).map(|_| rng.gen_range(0.3..10.0)).collect();
        let pred: Vec<f64> = gt.iter().map(|g| g * rng.gen_range(0.5..2.0)).collect();
        let m = depth_metrics(&pred, &gt, &vec![true; gt.len()]).map_err(|e| e.to_string())?;
        for (a, b) in m.values().iter().zip(scalar_metrics(&pred, &gt)) {
            worst = worst.max((a - b).abs());
        }
    }
    let ex =
        depth_metrics(&[1.1, 1.8, 5.0], &[1.0, 2.0, 4.0], &[true; 3]).map_err(|e| e.to_string())?;
    let example_ok = (ex.abs_rel - 0.15).abs() < 1e-12
        && (ex.rmse - 0.59161).abs() < 5e-6
        && ex.delta1 == 2.0 / 3.0;
    check(
        worst <= 1e-9 && example_ok,
        format!(
            "100 maps of 32x64, max diff {worst:.1e} (limit 1e-9); example abs_rel {:.5} rmse {:.5} delta1 {:.4}",
            ex.abs_rel, ex.rmse, ex.delta1
        ),
    )
}

fn attention_invariants() -> Outcome {
    let mut worst_row = 0.0f64;
    let mut rows = 0usize;
    for attention in [AttentionKind::Sca, AttentionKind::Mhsa] {
        for use_stp in [true, false] {
            let cfg = ModelConfig {
                attention,
                use_stp,
                encoder_blocks: 2,
                decoder_blocks: 2,
                ..ModelConfig::desk()
            };
            let (model, p) = HiMode::init::<f64>(&cfg, 4).map_err(|e| e.to_string())?;
            let mut g = Graph::new();
            let x = g.constant(random(&[1, 3, cfg.height, cfg.width], 5, 0.0, 1.0));
            let out = model.forward(&mut g, &p, x).map_err(|e| e.to_string())?;
            for w in &out.attention {
                let n = *g.shape(*w).last().unwrap();
                for row in g.data(*w).chunks(n) {
                    worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
                    rows += 1;
                }
            }
        }
    }
    let mut worst_perm = 0.0f64;
    for attention in [AttentionKind::Sca, AttentionKind::Mhsa] {
        let cfg = ModelConfig {
            attention,
            ..ModelConfig::default()
        };
        let width = cfg.encoder_width();
        let mut b = ParamBuilder::new(6);
        let blk = EncoderBlock::new(&mut b, &cfg, width);
        let mut p: ParamStore<f64> = b.finish();
        randomize(&mut p, 7);
        let n = 12;
        let x = random(&[1, n, width], 8, -1.0, 1.0);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.reverse();
        perm.swap(0, 5);
        let xp: Vec<f64> = perm
            .iter()
            .flat_map(|&i| x.data()[i * width..(i + 1) * width].to_vec())
            .collect();
        let mut g = Graph::new();
        let xv = g.constant(x);
        let xpv = g.constant(Tensor::new(&[1, n, width], xp).unwrap());
        let (y, _) = blk
            .forward(&mut g, &p, xv, None)
            .map_err(|e| e.to_string())?;
        let (yp, _) = blk
            .forward(&mut g, &p, xpv, None)
            .map_err(|e| e.to_string())?;
        for (k, &i) in perm.iter().enumerate() {
            for j in 0..width {
                worst_perm =
                    worst_perm.max((g.data(yp)[k * width + j] - g.data(y)[i * width + j]).abs());
            }
        }
    }
    check(
        worst_row <= 1e-6 && worst_perm <= 1e-5,
        format!(
            "{rows} softmax rows, max |sum-1| {worst_row:.1e} (limit 1e-6); permutation max diff {worst_perm:.1e} (limit 1e-5)"
        ),
    )
}

fn ablation_structure() -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.optim.steps = Some(1);
    cfg.optim.batch_size = 1;
    let (h, w) = (cfg.model.height, cfg.model.width);
    let train = rooms(1, 500, h, w);
    let eval = rooms(1, 600, h, w);
    let rep = ablate(&cfg, &train, &eval, |_| {}).map_err(|e| e.to_string())?;
    let counts: Vec<String> = rep
        .rows
        .iter()
        .map(|r| format!("{} {}", r.label, r.params))
        .collect();
    let failures = rep.rows.iter().filter(|r| r.failure.is_some()).count();
    check(
        rep.rows.len() == 6 && rep.full_is_smallest && failures == 0 && rep.rows[0].toggles == Toggles::TABLE[0],
        format!(
            "{} rows, full smallest {}, failed arms {failures}; counts [{}] (reference {:.2}M, informational)",
            rep.rows.len(),
            rep.full_is_smallest,
            counts.join(", "),
            rep.reference_full_params / 1e6
        ),
    )
}

fn toy_overfit() -> Outcome {
    let mut cfg = RunConfig {
        model: ModelConfig::desk(),
        ..RunConfig::default()
    };
    cfg.optim.steps = Some(500);
    cfg.optim.batch_size = 4;
    cfg.optim.lr = 3e-4;
    let samples = rooms(16, 1000, cfg.model.height, cfg.model.width);
    let start = Instant::now();
    let mut t = Trainer::new(&cfg).map_err(|e| e.to_string())?;
    let log = t.fit(&samples, |_, _| {}).map_err(|e| e.to_string())?;
    let pred = ModelPredictor {
        model: &t.model,
        params: &t.params,
    };
    let rep = evaluate(&pred, &samples, Alignment::Median).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let (first, last) = (log.epoch_losses[0], *log.epoch_losses.last().unwrap());
    let reduction = 1.0 - last / first;
    check(
        reduction >= 0.5 && rep.aggregate.delta1 >= 0.9 && secs <= 900.0,
        format!(
            "loss {first:.4} -> {last:.4} ({:.1}% reduction, need 50%), train delta1 {:.4} (need 0.90), {secs:.0}s (limit 900s)",
            100.0 * reduction,
            rep.aggregate.delta1
        ),
    )
}

fn srb_contract() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    for (d_in, grid) in [(64, (8, 16)), (128, (4, 8)), (16, (2, 2))] {
        let mut b = ParamBuilder::new(9);
        let s = Srb::new(&mut b, "srb", d_in, 1e-5);
        let p: ParamStore<f64> = b.finish();
        let n = grid.0 * grid.1;
        let mut g = Graph::new();
        let x = g.constant(random(&[1, n, d_in], 10, -1.0, 1.0));
        let y = s.forward(&mut g, &p, x, grid).map_err(|e| e.to_string())?;
        ok &= g.shape(y) == [1, n / 4, 2 * d_in];
        notes.push(format!("{n}x{d_in} -> {}x{}", g.shape(y)[1], g.shape(y)[2]));
    }
    for use_srb in [true, false] {
        let cfg = ModelConfig {
            use_srb,
            ..ModelConfig::desk()
        };
        let (model, p) = HiMode::init::<f64>(&cfg, 11).map_err(|e| e.to_string())?;
        let mut g = Graph::new();
        let x = g.constant(random(&[1, 3, cfg.height, cfg.width], 12, 0.0, 1.0));
        let out = model.forward(&mut g, &p, x).map_err(|e| e.to_string())?;
        let (enc, dec) = (g.shape(out.encoded).to_vec(), g.shape(out.decoded).to_vec());
        let (gh, gw) = cfg.token_grid();
        let n = gh * gw;
        ok &= if use_srb {
            enc == [1, n, cfg.embed_dim / 4] && dec == [1, n / 4, cfg.embed_dim / 2]
        } else {
            enc == [1, n, cfg.embed_dim] && dec == enc
        };
        notes.push(format!(
            "{} encoder {:?} decoder {:?}",
            if use_srb { "with" } else { "without" },
            &enc[1..],
            &dec[1..]
        ));
    }
    check(ok, notes.join("; "))
}

fn stp_degeneracy() -> Outcome {
    let cfg = ModelConfig::default();
    let width = cfg.decoder_width();
    let mut b = ParamBuilder::new(13);
    let stp = Stp::new(&mut b, width, cfg.key_dim, cfg.stp_window);
    let mut p: ParamStore<f64> = b.finish();
    randomize(&mut p, 14);
    let mut g = Graph::new();
    let x = g.constant(random(&[2, 1, 8, width], 15, -1.0, 1.0));
    let (y, _) = stp
        .forward(&mut g, &p, x, (2, 4))
        .map_err(|e| e.to_string())?;
    let (ys, _) = stp.spatial(&mut g, &p, x).map_err(|e| e.to_string())?;
    let same = g
        .data(y)
        .iter()
        .zip(g.data(ys))
        .all(|(a, b)| a.to_bits() == b.to_bits());
    check(
        same && g.shape(y) == g.shape(ys),
        format!("T=1, {} values, bitwise equal: {same}", g.data(y).len()),
    )
}

fn determinism_and_persistence() -> Outcome {
    let mut cfg = RunConfig {
        seed: 21,
        model: ModelConfig::tiny().with_resolution(16, 32),
        ..RunConfig::default()
    };
    cfg.optim.steps = Some(6);
    cfg.optim.batch_size = 2;
    let data = rooms(5, 700, 16, 32);
    let test = rooms(3, 800, 16, 32);
    let train = || -> himode::Result<(Vec<f64>, Trainer)> {
        let mut t = Trainer::new(&cfg)?;
        let log = t.fit(&data, |_, _| {})?;
        Ok((log.step_losses, t))
    };
    let (a, t) = train().map_err(|e| e.to_string())?;
    let (b, _) = train().map_err(|e| e.to_string())?;
    let curve = a
        .iter()
        .zip(&b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let eval = |model: &HiMode, params: &ParamStore<f32>| {
        evaluate(&ModelPredictor { model, params }, &test, Alignment::Median)
            .map(|r| r.aggregate.values())
    };
    let before = eval(&t.model, &t.params).map_err(|e| e.to_string())?;
    let path = dir.path().join("ck.bin");
    Checkpoint::from_trainer(&t)
        .save(&path)
        .map_err(|e| e.to_string())?;
    let ck = Checkpoint::load(&path).map_err(|e| e.to_string())?;
    let model = ck.model().map_err(|e| e.to_string())?;
    let after = eval(&model, &ck.params).map_err(|e| e.to_string())?;
    let round = before
        .iter()
        .zip(after)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);

    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let depth = DepthMap::new(
        37,
        53,
        (0..37 * 53).map(|_| rng.gen_range(-1e3f32..1e3)).collect(),
    );
    let pfm = dir.path().join("d.pfm");
    write_pfm(&pfm, &depth).map_err(|e| e.to_string())?;
    let exact = read_pfm(&pfm).map_err(|e| e.to_string())? == depth;
    check(
        a.len() == 6 && curve <= 1e-6 && round <= 1e-7 && exact,
        format!("loss curves max diff {curve:.1e} (limit 1e-6); checkpoint eval diff {round:.1e} (limit 1e-7); PFM exact {exact}"),
    )
}

fn synthetic_oracle() -> Outcome {
    let (h, w) = (128, 256);
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut worst = 0.0f64;
    let mut count = 0;
    for room in 0..4u64 {
        let spec = RoomSpec::random(900 + room);
        let s = synth_room(&spec, h, w).map_err(|e| e.to_string())?;
        for _ in 0..250 {
            let (v, u) = (rng.gen_range(0..h), rng.gen_range(0..w));
            let theta = 2.0 * std::f64::consts::PI * u as f64 / w as f64 - std::f64::consts::PI;
            let phi = std::f64::consts::FRAC_PI_2 - std::f64::consts::PI * v as f64 / h as f64;
            let dir = [phi.cos() * theta.cos(), phi.cos() * theta.sin(), phi.sin()];
            // nearest positive crossing of the six wall planes
            let mut t = f64::INFINITY;
            for k in 0..3 {
                for plane in [0.0, spec.extents[k]] {
                    let tk = (plane - spec.camera[k]) / dir[k];
                    if tk > 0.0 && tk.is_finite() {
                        t = t.min(tk);
                    }
                }
            }
            let got = f64::from(s.depth.data[v * w + u]);
            worst = worst.max((got - t).abs());
            count += 1;
        }
    }
    check(
        worst <= 1e-6,
        format!("{count} pixels, max abs diff {worst:.1e} m (limit 1e-6)"),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient suite", gradient_suite),
        ("shape/range contract", shape_and_range),
        ("metrics oracle", metrics_oracle),
        ("attention invariants", attention_invariants),
        ("ablation structure", ablation_structure),
        ("toy overfit", toy_overfit),
        ("SRB contract", srb_contract),
        ("STP degeneracy", stp_degeneracy),
        ("determinism & persistence", determinism_and_persistence),
        ("synthetic oracle", synthetic_oracle),
    ];
    let only: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {n:>2} {tag} {name}: {detail} [{secs:.1}s]");
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
