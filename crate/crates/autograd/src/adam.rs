use crate::error::{shape_err, Result};
use crate::scalar::{lit, Float};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers and step counter for Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Float> AdamState<T> {
    /// Zero moments shaped like `params`.
    pub fn new(params: &[Tensor<T>], config: AdamConfig) -> Self {
        let zeros: Vec<Tensor<T>> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update applied in place.
pub fn adam_step<T: Float>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return shape_err("adam_step", &[params.len(), state.m.len()], &[grads.len()]);
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return shape_err("adam_step", p.shape(), g.shape());
        }
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let (b1, b2) = (lit::<T>(c.beta1), lit::<T>(c.beta2));
    let (lr, eps) = (lit::<T>(c.lr), lit::<T>(c.eps));
    let (ibc1, ibc2) = (lit::<T>(1.0 / bc1), lit::<T>(1.0 / bc2));
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mv = b1 * *mv + (T::one() - b1) * gv;
            *vv = b2 * *vv + (T::one() - b2) * gv * gv;
            let mhat = *mv * ibc1;
            let vhat = *vv * ibc2;
            *pv -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![Tensor::<f32>::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap()];
        let before = p.clone();
        let mut st = AdamState::new(&p, AdamConfig::with_lr(0.1));
        for _ in 0..5 {
            adam_step(&mut p, &[Tensor::zeros(&[3])], &mut st).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(st.step, 5);
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let mut p = vec![Tensor::<f64>::from_f64(&[3], &[0.0, 0.0, 0.0]).unwrap()];
        let g = Tensor::from_f64(&[3], &[0.3, -4.0, 1e-3]).unwrap();
        let mut st = AdamState::new(&p, AdamConfig::with_lr(0.01));
        adam_step(&mut p, &[g], &mut st).unwrap();
        let d = p[0].data();
        // |m_hat / sqrt(v_hat)| = 1 after bias correction; eps only matters for tiny g.
        assert!((d[0] + 0.01).abs() < 1e-9);
        assert!((d[1] - 0.01).abs() < 1e-9);
        assert!((d[2] + 0.01).abs() < 1e-7);
    }

    #[test]
    fn constant_gradient_drifts_monotonically() {
        let mut p = vec![Tensor::<f32>::zeros(&[1])];
        let g = Tensor::from_f64(&[1], &[2.0]).unwrap();
        let mut st = AdamState::new(&p, AdamConfig::with_lr(1e-2));
        let mut last = 0.0f32;
        for _ in 0..200 {
            adam_step(&mut p, std::slice::from_ref(&g), &mut st).unwrap();
            let now = p[0].data()[0];
            assert!(now < last);
            last = now;
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = vec![Tensor::<f32>::zeros(&[2])];
        let mut st = AdamState::new(&p, AdamConfig::default());
        let err = adam_step(&mut p, &[Tensor::zeros(&[3])], &mut st);
        assert!(err.is_err());
        assert_eq!(st.step, 0);
    }
}
