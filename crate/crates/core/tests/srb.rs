use himode::config::ModelConfig;
use himode::model::HiMode;
use himode::params::{ParamBuilder, ParamStore};
use himode::srb::Srb;
use himode::tokenizer::positional_encoding;
use himode_autograd::{Graph, Tensor};
use proptest::prelude::*;

mod common;
use common::{oracle, random, randomize};

fn srb(d_in: usize, seed: u64) -> (Srb, ParamStore<f64>) {
    let mut b = ParamBuilder::new(seed);
    let s = Srb::new(&mut b, "srb", d_in, 1e-5);
    let mut store = b.finish();
    randomize(&mut store, seed + 1);
    (s, store)
}

/// Token `(i, j)` of an `h x w` grid, row-major.
fn token(h: usize, w: usize, i: usize, j: usize) -> usize {
    debug_assert!(i < h);
    i * w + j
}

/// The three branches and the merged output computed with plain loops on
/// one batch element.
fn reference(
    s: &Srb,
    p: &ParamStore<f64>,
    x: &[f64],
    grid: (usize, usize),
) -> ([Vec<f64>; 3], Vec<f64>) {
    let (h, w) = grid;
    let (ho, wo) = (h / 2, w / 2);
    let (d, n_out) = (s.d_in, ho * wo);
    let (c1, c2, c3) = s.branch_widths();

    let lin = oracle::linear(
        p,
        &s.linear,
        &oracle::layer_norm(p, &s.norm_linear, x, d, s.eps),
        h * w,
    );
    let mut y1 = vec![0.0; n_out * c1];
    let mut y2 = vec![0.0; n_out * c2];
    let mut y3 = vec![0.0; n_out * c3];
    let ln3 = oracle::layer_norm(p, &s.norm_conv, x, d, s.eps);
    let (cw, cb) = (p.get(s.conv.weight).data(), p.get(s.conv.bias).data());
    for i in 0..ho {
        for j in 0..wo {
            let o = i * wo + j;
            let src = token(h, w, 2 * i, 2 * j);
            y1[o * c1..(o + 1) * c1].copy_from_slice(&lin[src * c1..(src + 1) * c1]);
            // 3x3 window starting one pixel up-left; outside pixels count as zero
            for c in 0..c2 {
                let mut acc = 0.0;
                for di in 0..3 {
                    for dj in 0..3 {
                        let (r, q) = ((2 * i + di) as isize - 1, (2 * j + dj) as isize - 1);
                        if r >= 0 && q >= 0 && (r as usize) < h && (q as usize) < w {
                            acc += x[token(h, w, r as usize, q as usize) * d + c];
                        }
                    }
                }
                y2[o * c2 + c] = acc / 9.0;
            }
            for f in 0..c3 {
                let v = cb[f]
                    + (0..d)
                        .map(|c| cw[f * d + c] * ln3[src * d + c])
                        .sum::<f64>();
                y3[o * c3 + f] = v.max(0.0);
            }
        }
    }
    let mut branches = [y1, y2, y3];
    for y in branches.iter_mut() {
        let c = y.len() / n_out;
        let pe = positional_encoding::<f64>(n_out, c).unwrap();
        *y = oracle::add(y, pe.data());
    }
    let cat: Vec<f64> = (0..n_out)
        .flat_map(|o| {
            branches
                .iter()
                .flat_map(move |y| {
                    let c = y.len() / n_out;
                    y[o * c..(o + 1) * c].to_vec()
                })
                .collect::<Vec<_>>()
        })
        .collect();
    let merged = oracle::linear(p, &s.merge, &cat, n_out);
    let out = oracle::add(&branches[0], &merged);
    (branches, out)
}

#[test]
fn eight_by_eight_grid_gives_sixteen_wider_tokens() {
    let (s, p) = srb(8, 0);
    let mut g = Graph::new();
    let x = g.constant(random(&[2, 64, 8], 1));
    let y = s.forward(&mut g, &p, x, (8, 8)).unwrap();
    assert_eq!(g.shape(y), &[2, 16, 16]);
}

#[test]
fn matches_loop_reference() {
    let (s, p) = srb(6, 2);
    let grid = (4, 6);
    let xt = random(&[2, 24, 6], 3);
    let mut g = Graph::new();
    let x = g.constant(xt.clone());
    let branches = s.branches(&mut g, &p, x, grid).unwrap();
    let y = s.forward(&mut g, &p, x, grid).unwrap();
    for b in 0..2 {
        let xb = &xt.data()[b * 24 * 6..(b + 1) * 24 * 6];
        let (want_branches, want) = reference(&s, &p, xb, grid);
        for (v, w) in branches.iter().zip(&want_branches) {
            let got = &g.data(*v)[b * w.len()..(b + 1) * w.len()];
            for (a, e) in got.iter().zip(w) {
                assert!((a - e).abs() < 1e-10);
            }
        }
        let got = &g.data(y)[b * want.len()..(b + 1) * want.len()];
        for (a, e) in got.iter().zip(&want) {
            assert!((a - e).abs() < 1e-10);
        }
    }
}

#[test]
fn pooling_branch_on_constant_map() {
    let (s, p) = srb(2, 4);
    let c = 3.0;
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[1, 16, 2], c));
    let [_, y2, _] = s.branches(&mut g, &p, x, (4, 4)).unwrap();
    let pe = positional_encoding::<f64>(4, 2).unwrap();
    // corner window holds 4 real pixels, edge windows 6, the interior one 9
    let weights = [4.0 / 9.0, 6.0 / 9.0, 6.0 / 9.0, 1.0];
    for (o, wgt) in weights.iter().enumerate() {
        for ch in 0..2 {
            let v = g.data(y2)[o * 2 + ch] - pe.data()[o * 2 + ch];
            assert!((v - c * wgt).abs() < 1e-12);
        }
    }
}

#[test]
fn odd_grid_extent_is_rejected() {
    let (s, p) = srb(4, 5);
    let mut g = Graph::new();
    let x = g.constant(random(&[1, 12, 4], 6));
    assert!(s.forward(&mut g, &p, x, (3, 4)).is_err());
    let x = g.constant(random(&[1, 16, 4], 6));
    assert!(s.forward(&mut g, &p, x, (2, 4)).is_err());
}

#[test]
fn deterministic() {
    let (s, p) = srb(4, 7);
    let xt = random(&[1, 16, 4], 8);
    let run = || {
        let mut g = Graph::new();
        let x = g.constant(xt.clone());
        let y = s.forward(&mut g, &p, x, (4, 4)).unwrap();
        g.value(y).clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn every_parameter_gets_gradient() {
    let (s, p) = srb(4, 9);
    let mut g = Graph::new();
    let x = g.constant(random(&[1, 16, 4], 10));
    let y = s.forward(&mut g, &p, x, (4, 4)).unwrap();
    let r = g.constant(random(&[1, 4, 8], 11));
    let m = g.mul(y, r).unwrap();
    let loss = g.sum(m);
    g.backward(loss).unwrap();
    for (id, grad) in p.grads(&g).iter().enumerate() {
        assert!(grad.data().iter().any(|&v| v != 0.0), "{}", p.names()[id]);
    }
}

#[test]
fn model_pipeline_shapes_with_and_without_srb() {
    for use_srb in [true, false] {
        let cfg = ModelConfig {
            use_srb,
            ..ModelConfig::tiny().with_resolution(16, 32)
        };
        let (model, p) = HiMode::init::<f64>(&cfg, 12).unwrap();
        let mut g = Graph::new();
        let x = g.constant(random(&[1, 3, 16, 32], 13));
        let out = model.forward(&mut g, &p, x).unwrap();
        let (gh, gw) = cfg.token_grid();
        let n = gh * gw;
        let enc = g.shape(out.encoded).to_vec();
        let dec = g.shape(out.decoded).to_vec();
        if use_srb {
            assert_eq!(enc, [1, n, cfg.embed_dim / 4]);
            assert_eq!(dec, [1, n / 4, cfg.embed_dim / 2]);
            let y = model
                .srb2
                .as_ref()
                .unwrap()
                .forward(&mut g, &p, out.decoded, (gh / 2, gw / 2))
                .unwrap();
            assert_eq!(g.shape(y), &[1, n / 16, cfg.embed_dim]);
        } else {
            assert_eq!(enc, [1, n, cfg.embed_dim]);
            assert_eq!(dec, enc);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn length_quarters_and_width_doubles(hh in 1usize..5, hw in 1usize..5, d in 1usize..5, b in 1usize..3) {
        let (h, w, d_in) = (2 * hh, 2 * hw, 2 * d);
        let mut pb = ParamBuilder::new(0);
        let s = Srb::new(&mut pb, "srb", d_in, 1e-5);
        let p: ParamStore<f64> = pb.finish();
        let mut g = Graph::new();
        let x = g.constant(random(&[b, h * w, d_in], 1));
        let y = s.forward(&mut g, &p, x, (h, w)).unwrap();
        prop_assert_eq!(g.shape(y), &[b, h * w / 4, 2 * d_in][..]);
    }
}
