//! Central finite differences and a reverse-mode cross-check.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Central-difference gradient of a scalar function, one coordinate at a time:
/// `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn finite_diff_gradient<F>(mut f: F, x: &Tensor<f64>, h: f64) -> Result<Tensor<f64>>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    let mut probe = x.clone();
    let mut out = vec![0.0; x.numel()];
    for (i, o) in out.iter_mut().enumerate() {
        *o = central_difference(&mut f, &mut probe, i, h)?;
    }
    Tensor::new(x.shape(), out)
}

fn central_difference<F>(f: &mut F, probe: &mut Tensor<f64>, i: usize, h: f64) -> Result<f64>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    let orig = probe.data()[i];
    probe.data_mut()[i] = orig + h;
    let plus = f(probe)?;
    probe.data_mut()[i] = orig - h;
    let minus = f(probe)?;
    probe.data_mut()[i] = orig;
    if !plus.is_finite() || !minus.is_finite() {
        return Err(TensorError::Numeric(format!(
            "non-finite evaluation at coordinate {i}"
        )));
    }
    Ok((plus - minus) / (2.0 * h))
}

/// Relative discrepancy between two gradient estimates over a set of
/// coordinates, normalised by the largest magnitude seen in either.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-6);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max)
        / scale
}

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub h: f64,
    /// Tensors larger than this are checked on a deterministic sample of
    /// this many coordinates.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-3,
            max_coords: 24,
            seed: 0x5eed,
        }
    }
}

/// Outcome for one checked input tensor.
#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub index: usize,
    pub checked: usize,
    pub max_rel_err: f64,
}

fn splitmix(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn sample_coords(n: usize, max: usize, state: &mut u64) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    let mut picked: Vec<usize> = (0..max)
        .map(|_| (splitmix(state) % n as u64) as usize)
        .collect();
    picked.sort_unstable();
    picked.dedup();
    picked
}

/// Compares reverse-mode gradients of `build` against central differences.
///
/// `build` receives a fresh graph plus one node per entry of `inputs` and
/// must return a scalar loss node. Every input is differentiated.
pub fn check_gradients<F>(
    inputs: &[Tensor<f64>],
    build: F,
    cfg: &GradCheckConfig,
) -> Result<Vec<TensorCheck>>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone(), true)).collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| g.grad_tensor(v)).collect();
    drop(g);

    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.input(t.clone(), false)).collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.value(loss).data()[0])
    };

    let mut state = cfg.seed;
    let mut values = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for idx in 0..inputs.len() {
        let coords = sample_coords(inputs[idx].numel(), cfg.max_coords, &mut state);
        let mut numeric = Vec::with_capacity(coords.len());
        for &c in &coords {
            let orig = values[idx].data()[c];
            values[idx].data_mut()[c] = orig + cfg.h;
            let plus = eval(&values)?;
            values[idx].data_mut()[c] = orig - cfg.h;
            let minus = eval(&values)?;
            values[idx].data_mut()[c] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(TensorError::Numeric(format!(
                    "non-finite evaluation at input {idx}, coordinate {c}"
                )));
            }
            numeric.push((plus - minus) / (2.0 * cfg.h));
        }
        let an: Vec<f64> = coords.iter().map(|&c| analytic[idx].data()[c]).collect();
        out.push(TensorCheck {
            index: idx,
            checked: coords.len(),
            max_rel_err: relative_error(&an, &numeric),
        });
    }
    Ok(out)
}
