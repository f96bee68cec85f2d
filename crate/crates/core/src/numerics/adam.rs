use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
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

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// First/second moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Tensor,
    pub v: Tensor,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(shape: &[usize], cfg: AdamConfig) -> Self {
        Self {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            t: 0,
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut Tensor, grad: &Tensor, state: &mut AdamState) -> Result<()> {
    if !params.same_shape(grad) || !params.same_shape(&state.m) {
        return Err(Error::shape(
            "adam_step",
            format!(
                "params {:?}, grad {:?}, moments {:?}",
                params.shape(),
                grad.shape(),
                state.m.shape()
            ),
        ));
    }
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    let lr = state.lr;
    let eps = state.eps;
    let m = state.m.data_mut();
    let v = state.v.data_mut();
    for (((p, &g), m), v) in params
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(m.iter_mut())
        .zip(v.iter_mut())
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// A trainable tensor together with its optimiser state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub value: Tensor,
    pub adam: AdamState,
}

impl Param {
    pub fn new(value: Tensor, cfg: AdamConfig) -> Self {
        let adam = AdamState::new(value.shape(), cfg);
        Self { value, adam }
    }

    pub fn step(&mut self, grad: &Tensor) -> Result<()> {
        adam_step(&mut self.value, grad, &mut self.adam)
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.adam.lr = lr;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Textbook Adam on plain slices, written independently of `adam_step`.
    fn reference(p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], t: i32, cfg: AdamConfig) {
        for i in 0..p.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mh = m[i] / (1.0 - cfg.beta1.powi(t));
            let vh = v[i] / (1.0 - cfg.beta2.powi(t));
            p[i] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
    }

    #[test]
    fn zero_grad_leaves_params() {
        let mut p = Tensor::vector(vec![1.0, -2.0, 3.0]);
        let before = p.clone();
        let mut s = AdamState::new(p.shape(), AdamConfig::default());
        adam_step(&mut p, &Tensor::zeros(&[3]), &mut s).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn first_step_matches_reference() {
        let cfg = AdamConfig {
            lr: 0.01,
            eps: 1e-3,
            ..AdamConfig::default()
        };
        let g = [0.5, -2.0, 1e-4];
        let mut p = Tensor::vector(vec![0.0; 3]);
        let mut s = AdamState::new(&[3], cfg);
        adam_step(&mut p, &Tensor::vector(g.to_vec()), &mut s).unwrap();

        let (mut rp, mut rm, mut rv) = ([0.0; 3], [0.0; 3], [0.0; 3]);
        reference(&mut rp, &g, &mut rm, &mut rv, 1, cfg);
        for i in 0..3 {
            assert!((p.data()[i] - rp[i]).abs() < 1e-15);
            // first step: |Δ| = lr·|g| / (|g| + eps)
            let expect = cfg.lr * g[i].abs() / (g[i].abs() + cfg.eps);
            assert!((p.data()[i].abs() - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn many_steps_match_reference() {
        let cfg = AdamConfig::with_lr(0.003);
        let mut p = Tensor::vector(vec![0.3, -0.7]);
        let mut s = AdamState::new(&[2], cfg);
        let (mut rp, mut rm, mut rv) = ([0.3, -0.7], [0.0; 2], [0.0; 2]);
        for t in 1..=25 {
            let g = [(t as f64).sin(), 0.1 * t as f64];
            adam_step(&mut p, &Tensor::vector(g.to_vec()), &mut s).unwrap();
            reference(&mut rp, &g, &mut rm, &mut rv, t, cfg);
        }
        assert!((p.data()[0] - rp[0]).abs() < 1e-14);
        assert!((p.data()[1] - rp[1]).abs() < 1e-14);
    }

    #[test]
    fn repeated_steps_move_against_gradient() {
        let mut p = Tensor::vector(vec![0.0, 0.0]);
        let mut s = AdamState::new(&[2], AdamConfig::default());
        let g = Tensor::vector(vec![1.0, -3.0]);
        adam_step(&mut p, &g, &mut s).unwrap();
        let mid = p.clone();
        adam_step(&mut p, &g, &mut s).unwrap();
        assert!(mid.data()[0] < 0.0 && p.data()[0] < mid.data()[0]);
        assert!(mid.data()[1] > 0.0 && p.data()[1] > mid.data()[1]);
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut p = Tensor::vector(vec![1.0, 2.0]);
        let mut s = AdamState::new(&[2], AdamConfig::with_lr(0.0));
        for _ in 0..5 {
            adam_step(&mut p, &Tensor::vector(vec![4.0, -1.0]), &mut s).unwrap();
        }
        assert_eq!(p.data(), &[1.0, 2.0]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = Tensor::vector(vec![1.0, 2.0]);
        let mut s = AdamState::new(&[2], AdamConfig::default());
        assert!(adam_step(&mut p, &Tensor::zeros(&[3]), &mut s).is_err());
    }
}
