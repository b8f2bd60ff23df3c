//! Helpers shared by the integration tests.
#![allow(dead_code)]

use himode::params::ParamStore;
use himode_autograd::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Replaces every parameter (including norm gains and biases) with random
/// values so oracle comparisons exercise all of them.
pub fn randomize(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in store.values_mut() {
        let data = (0..t.numel()).map(|_| rng.gen_range(-0.5..0.5)).collect();
        *t = Tensor::new(t.shape(), data).unwrap();
    }
}

/// Plain-loop reference implementations over row-major `[n, d]` matrices.
pub mod oracle {
    use himode::nn::{LayerNorm, Linear};
    use himode::params::ParamStore;
    use himode::transformer::Mhsa;

    pub fn linear(p: &ParamStore<f64>, l: &Linear, x: &[f64], n: usize) -> Vec<f64> {
        let (w, b) = (p.get(l.weight).data(), p.get(l.bias).data());
        let mut y = vec![0.0; n * l.d_out];
        for r in 0..n {
            for o in 0..l.d_out {
                let mut s = b[o];
                for i in 0..l.d_in {
                    s += x[r * l.d_in + i] * w[i * l.d_out + o];
                }
                y[r * l.d_out + o] = s;
            }
        }
        y
    }

    pub fn layer_norm(
        p: &ParamStore<f64>,
        ln: &LayerNorm,
        x: &[f64],
        d: usize,
        eps: f64,
    ) -> Vec<f64> {
        let (gamma, beta) = (p.get(ln.gamma).data(), p.get(ln.beta).data());
        let mut y = Vec::with_capacity(x.len());
        for row in x.chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            for (i, v) in row.iter().enumerate() {
                y.push((v - mean) / (var + eps).sqrt() * gamma[i] + beta[i]);
            }
        }
        y
    }

    pub fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
    }

    /// Multi-head self-attention update (before the residual).
    pub fn mhsa(p: &ParamStore<f64>, m: &Mhsa, x: &[f64], n: usize) -> Vec<f64> {
        let qkv = linear(p, &m.qkv, x, n);
        let w3 = m.qkv.d_out;
        let inner = w3 / 3;
        let dk = inner / m.heads;
        let mut merged = vec![0.0; n * inner];
        for h in 0..m.heads {
            let at = |r: usize, part: usize, j: usize| qkv[r * w3 + part * inner + h * dk + j];
            for i in 0..n {
                let scores: Vec<f64> = (0..n)
                    .map(|k| {
                        (0..dk).map(|j| at(i, 0, j) * at(k, 1, j)).sum::<f64>() / (dk as f64).sqrt()
                    })
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for j in 0..dk {
                    merged[i * inner + h * dk + j] = (0..n).map(|k| e[k] / z * at(k, 2, j)).sum();
                }
            }
        }
        linear(p, &m.out, &merged, n)
    }

    pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| x + y).collect()
    }

    /// Post-norm residual MHSA + FFN block.
    pub fn mhsa_block(
        p: &ParamStore<f64>,
        m: &Mhsa,
        norms: [&LayerNorm; 2],
        ffn: (&Linear, &Linear),
        x: &[f64],
        n: usize,
        d: usize,
        eps: f64,
    ) -> Vec<f64> {
        let h1 = layer_norm(p, norms[0], &add(x, &mhsa(p, m, x, n)), d, eps);
        let f: Vec<f64> = linear(p, ffn.0, &h1, n).into_iter().map(gelu).collect();
        let f = linear(p, ffn.1, &f, n);
        layer_norm(p, norms[1], &add(&h1, &f), d, eps)
    }
}
