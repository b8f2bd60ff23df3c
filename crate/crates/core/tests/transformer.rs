use std::rc::Rc;

use himode::config::{AttentionKind, ModelConfig};
use himode::model::HiMode;
use himode::nn::Linear;
use himode::params::{ParamBuilder, ParamStore};
use himode::transformer::{
    attention_core, qkv_project, temporal_mask, DecoderBlock, DecoderMixer, EncoderAttention,
    EncoderBlock, Stp,
};
use himode_autograd::{Graph, Tensor};

mod common;
use common::{oracle, random, randomize};

fn toy_config(attention: AttentionKind, use_stp: bool) -> ModelConfig {
    ModelConfig {
        key_dim: 6,
        mhsa_heads: 2,
        attention,
        use_stp,
        ..ModelConfig::default()
    }
}

#[test]
fn qkv_partition_and_widths() {
    let mut b = ParamBuilder::new(0);
    let lin = Linear::new(&mut b, "qkv", 32, 3 * 192);
    let mut store: ParamStore<f64> = b.finish();
    randomize(&mut store, 1);
    let x = random(&[1, 5, 32], 2);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let (q, _, v) = qkv_project(&mut g, &store, &lin, xv).unwrap();
    for t in [q, v] {
        assert_eq!(g.shape(t), &[1, 5, 192]);
    }
    let full = oracle::linear(&store, &lin, x.data(), 5);
    for r in 0..5 {
        for j in 0..192 {
            assert!((g.data(q)[r * 192 + j] - full[r * 576 + j]).abs() < 1e-12);
            assert!((g.data(v)[r * 192 + j] - full[r * 576 + 384 + j]).abs() < 1e-12);
        }
    }
    store.get_mut(lin.bias).data_mut().fill(0.0);
    let mut g = Graph::new();
    let zero = g.constant(Tensor::zeros(&[1, 5, 32]));
    let (q, k, v) = qkv_project(&mut g, &store, &lin, zero).unwrap();
    for t in [q, k, v] {
        assert!(g.data(t).iter().all(|&e| e == 0.0));
    }
}

#[test]
fn zero_queries_give_uniform_weights_and_value_mean() {
    let mut g = Graph::new();
    let q = g.constant(Tensor::zeros(&[1, 4, 3]));
    let k = g.constant(random(&[1, 4, 3], 0));
    let vt = random(&[1, 4, 2], 1);
    let v = g.constant(vt.clone());
    let att = attention_core(&mut g, q, k, v, None).unwrap();
    assert!(g
        .data(att.weights)
        .iter()
        .all(|&w| (w - 0.25).abs() < 1e-15));
    for j in 0..2 {
        let mean = (0..4).map(|r| vt.data()[r * 2 + j]).sum::<f64>() / 4.0;
        for r in 0..4 {
            assert!((g.data(att.output)[r * 2 + j] - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn single_token_attends_to_itself() {
    let mut g = Graph::new();
    let q = g.constant(random(&[2, 1, 3], 0));
    let k = g.constant(random(&[2, 1, 3], 1));
    let v = g.constant(random(&[2, 1, 5], 2));
    let att = attention_core(&mut g, q, k, v, None).unwrap();
    assert!(g.data(att.weights).iter().all(|&w| w == 1.0));
    assert_eq!(g.value(att.output), g.value(v));
}

#[test]
fn two_token_closed_form() {
    let dk = 4usize;
    let s = (dk as f64).sqrt() * std::f64::consts::LN_2;
    let mut g = Graph::new();
    let q = g.constant(Tensor::new(&[1, 2, 4], vec![s, 0.0, 0.0, 0.0, 0.0, s, 0.0, 0.0]).unwrap());
    let k =
        g.constant(Tensor::new(&[1, 2, 4], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap());
    let v = g.constant(random(&[1, 2, 3], 0));
    let att = attention_core(&mut g, q, k, v, None).unwrap();
    let want = [2.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 2.0 / 3.0];
    for (w, e) in g.data(att.weights).iter().zip(want) {
        assert!((w - e).abs() < 1e-12);
    }
}

#[test]
fn joint_scaling_of_queries_and_keys() {
    let c = 10.0;
    let (qt, kt) = (random(&[1, 5, 6], 3), random(&[1, 5, 6], 4));
    let mut g = Graph::new();
    let (q, k) = (g.constant(qt.clone()), g.constant(kt.clone()));
    let v = g.constant(random(&[1, 5, 6], 5));
    let base = attention_core(&mut g, q, k, v, None).unwrap();
    let qc =
        g.constant(Tensor::new(&[1, 5, 6], qt.data().iter().map(|x| x * c).collect()).unwrap());
    let kc =
        g.constant(Tensor::new(&[1, 5, 6], kt.data().iter().map(|x| x * c).collect()).unwrap());
    let scores = g.matmul_ext(qc, kc, true).unwrap();
    let scores = g.scale(scores, 1.0 / (c * c * 6f64.sqrt()));
    let a = g.softmax(scores);
    for (x, y) in g.data(a).iter().zip(g.data(base.weights)) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn every_attention_row_sums_to_one() {
    for attention in [AttentionKind::Sca, AttentionKind::Mhsa] {
        for use_stp in [true, false] {
            let cfg = ModelConfig {
                attention,
                use_stp,
                encoder_blocks: 2,
                decoder_blocks: 2,
                ..ModelConfig::tiny()
            };
            let (model, store) = HiMode::init::<f64>(&cfg, 11).unwrap();
            let mut g = Graph::new();
            let x = g.constant(random(&[2, 3, cfg.height, cfg.width], 12).map(|v| v.abs()));
            let out = model.forward(&mut g, &store, x).unwrap();
            assert!(out.attention.len() >= 4);
            for w in &out.attention {
                let n = *g.shape(*w).last().unwrap();
                for row in g.data(*w).chunks(n) {
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                    assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
                }
            }
        }
    }
}

#[test]
fn zero_weight_encoder_is_identity_on_normalized_tokens() {
    for attention in [AttentionKind::Sca, AttentionKind::Mhsa] {
        let cfg = toy_config(attention, true);
        let mut b = ParamBuilder::new(0);
        let blk = EncoderBlock::new(&mut b, &cfg, 8);
        let mut store: ParamStore<f64> = b.finish();
        for id in store.ids().collect::<Vec<_>>() {
            if !store.name(id).contains("gamma") {
                let t = store.get_mut(id);
                *t = Tensor::zeros(t.shape());
            }
        }
        // rows with zero mean and unit population variance
        let row = [1.0, -1.0, 1.0, -1.0, -1.0, 1.0, -1.0, 1.0];
        let x = Tensor::new(&[1, 2, 8], [row, row.map(|v| -v)].concat()).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let pe = g.constant(random(&[1, 2, 6], 1));
        let (y, _) = blk.forward(&mut g, &store, xv, Some(pe)).unwrap();
        for (a, b) in g.data(y).iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-5, "{attention:?}");
        }
    }
}

#[test]
fn encoder_is_permutation_equivariant_without_positions() {
    for attention in [AttentionKind::Sca, AttentionKind::Mhsa] {
        let cfg = toy_config(attention, true);
        let mut b = ParamBuilder::new(3);
        let blk = EncoderBlock::new(&mut b, &cfg, 8);
        let mut store: ParamStore<f64> = b.finish();
        randomize(&mut store, 4);
        let x = random(&[1, 6, 8], 5);
        let perm = [4, 2, 0, 5, 1, 3];
        let xp: Vec<f64> = perm
            .iter()
            .flat_map(|&i| x.data()[i * 8..(i + 1) * 8].to_vec())
            .collect();
        let mut g = Graph::new();
        let xv = g.constant(x);
        let xpv = g.constant(Tensor::new(&[1, 6, 8], xp).unwrap());
        let (y, _) = blk.forward(&mut g, &store, xv, None).unwrap();
        let (yp, _) = blk.forward(&mut g, &store, xpv, None).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            for j in 0..8 {
                assert!((g.data(yp)[k * 8 + j] - g.data(y)[i * 8 + j]).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn mhsa_encoder_matches_reference() {
    let cfg = toy_config(AttentionKind::Mhsa, true);
    let mut b = ParamBuilder::new(6);
    let blk = EncoderBlock::new(&mut b, &cfg, 8);
    let mut store: ParamStore<f64> = b.finish();
    randomize(&mut store, 7);
    let EncoderAttention::Mhsa(m) = &blk.attention else {
        panic!("expected the multi-head arm");
    };
    let x = random(&[1, 5, 8], 8);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let (y, w) = blk.forward(&mut g, &store, xv, None).unwrap();
    assert_eq!(g.shape(w[0]), &[1, 2, 5, 5]);
    let want = oracle::mhsa_block(
        &store,
        m,
        [&blk.norms[0], &blk.norms[1]],
        (&blk.ffn.fc1, &blk.ffn.fc2),
        x.data(),
        5,
        8,
        cfg.norm_eps,
    );
    for (a, e) in g.data(y).iter().zip(&want) {
        assert!((a - e).abs() < 1e-10);
    }
}

#[test]
fn mhsa_decoder_matches_reference() {
    let cfg = toy_config(AttentionKind::Sca, false);
    let mut b = ParamBuilder::new(9);
    let blk = DecoderBlock::new(&mut b, &cfg, 8);
    let mut store: ParamStore<f64> = b.finish();
    randomize(&mut store, 10);
    let DecoderMixer::Mhsa(m) = &blk.mixer else {
        panic!("expected the multi-head mixer");
    };
    let x = random(&[1, 4, 8], 11);
    let pe = random(&[1, 4, 8], 12);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let pv = g.constant(pe.clone());
    let (y, _) = blk.forward(&mut g, &store, xv, Some(pv), (2, 2)).unwrap();
    let xin = oracle::add(x.data(), pe.data());
    let want = oracle::mhsa_block(
        &store,
        m,
        [&blk.norm1, &blk.norm2],
        (&blk.ffn.fc1, &blk.ffn.fc2),
        &xin,
        4,
        8,
        cfg.norm_eps,
    );
    for (a, e) in g.data(y).iter().zip(&want) {
        assert!((a - e).abs() < 1e-10);
    }
}

#[test]
fn single_frame_stp_equals_spatial_path_bitwise() {
    let mut b = ParamBuilder::new(13);
    let stp = Stp::new(&mut b, 8, 6, 3);
    let mut store: ParamStore<f64> = b.finish();
    randomize(&mut store, 14);
    let x = random(&[2, 1, 8, 8], 15);
    let mut g = Graph::new();
    let xv = g.constant(x);
    let (y, w) = stp.forward(&mut g, &store, xv, (2, 4)).unwrap();
    assert_eq!(w.len(), 1);
    let (ys, _) = stp.spatial(&mut g, &store, xv).unwrap();
    assert_eq!(g.value(y), g.value(ys));
}

#[test]
fn stp_preserves_shape_for_two_frames() {
    let mut b = ParamBuilder::new(16);
    let stp = Stp::new(&mut b, 8, 6, 3);
    let store: ParamStore<f64> = b.finish();
    let mut g = Graph::new();
    let xv = g.constant(random(&[1, 2, 8, 8], 17));
    let (y, w) = stp.forward(&mut g, &store, xv, (2, 4)).unwrap();
    assert_eq!(g.shape(y), &[1, 2, 8, 8]);
    assert_eq!(w.len(), 2);
}

#[test]
fn identical_frames_return_their_own_values() {
    let mut b = ParamBuilder::new(18);
    let stp = Stp::new(&mut b, 8, 6, 1);
    let mut store: ParamStore<f64> = b.finish();
    randomize(&mut store, 19);
    let frame = random(&[1, 1, 4, 8], 20);
    let x = Tensor::new(&[1, 2, 4, 8], frame.data().repeat(2)).unwrap();
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let att = stp.temporal_attention(&mut g, &store, xv, (2, 2)).unwrap();
    let qkv = oracle::linear(&store, &stp.qkv, x.data(), 8);
    for r in 0..8 {
        for j in 0..6 {
            assert!((g.data(att.output)[r * 6 + j] - qkv[r * 18 + 12 + j]).abs() < 1e-12);
        }
    }
}

#[test]
fn temporal_mask_excludes_own_frame_and_far_tokens() {
    let (t, grid, win) = (3, (3, 4), 3);
    let n = grid.0 * grid.1;
    let m = temporal_mask(t, grid, win);
    for a in 0..t * n {
        for c in 0..t * n {
            let (ta, na, tc, nc) = (a / n, a % n, c / n, c % n);
            let near = (na / grid.1).abs_diff(nc / grid.1) <= 1
                && (na % grid.1).abs_diff(nc % grid.1) <= 1;
            assert_eq!(m[a * t * n + c], ta != tc && near);
        }
    }
}

#[test]
fn masked_attention_zeroes_disallowed_pairs() {
    let mask = Rc::new(temporal_mask(2, (1, 3), 1));
    let mut g = Graph::new();
    let q = g.constant(random(&[1, 6, 4], 0));
    let k = g.constant(random(&[1, 6, 4], 1));
    let v = g.constant(random(&[1, 6, 4], 2));
    let att = attention_core(&mut g, q, k, v, Some(mask.clone())).unwrap();
    for (w, allowed) in g.data(att.weights).iter().zip(mask.iter()) {
        if !allowed {
            assert_eq!(*w, 0.0);
        }
    }
}

#[test]
fn gradient_reaches_encoder_through_decoder() {
    let cfg = toy_config(AttentionKind::Sca, true);
    let mut b = ParamBuilder::new(21);
    let enc = b.scoped("encoder", |b| EncoderBlock::new(b, &cfg, 8));
    let dec = b.scoped("decoder", |b| DecoderBlock::new(b, &cfg, 8));
    let store: ParamStore<f64> = b.finish();
    let mut g = Graph::new();
    let x = g.constant(random(&[1, 4, 8], 22));
    let (h, _) = enc.forward(&mut g, &store, x, None).unwrap();
    let (y, _) = dec.forward(&mut g, &store, h, None, (2, 2)).unwrap();
    let r = g.constant(random(&[1, 4, 8], 23));
    let m = g.mul(y, r).unwrap();
    let loss = g.sum(m);
    g.backward(loss).unwrap();
    let grads = store.grads(&g);
    let id = store.find("encoder.sca.qkv.weight").unwrap();
    assert!(grads[id.index()].data().iter().any(|&v| v != 0.0));
}
