use serde::{Deserialize, Serialize};

use super::fault;
use crate::error::{Error, Result};
use crate::numerics::{AdamConfig, Param, RngState, Tensor};
use crate::numerics::{gemm, gemm_acc};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Init {
    Zeros,
    /// Uniform in ±sqrt(6 / (fan_in + fan_out)).
    Glorot,
    /// Uniform in ±sqrt(6 / fan_in); for layers followed by ReLU.
    He,
    /// Uniform in ±a.
    Uniform(f64),
}

/// Affine map `y = x Wᵀ + b` with `W: [out × in]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearLayer {
    pub weight: Param,
    pub bias: Param,
}

#[derive(Clone, Debug)]
pub struct LinearCache {
    x: Tensor,
}

impl LinearCache {
    pub fn input(&self) -> &Tensor {
        &self.x
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearGrads {
    pub dw: Tensor,
    pub db: Tensor,
}

impl LinearGrads {
    pub fn zeros_for(layer: &LinearLayer) -> Self {
        Self {
            dw: Tensor::zeros_like(&layer.weight.value),
            db: Tensor::zeros_like(&layer.bias.value),
        }
    }

    pub fn add_assign(&mut self, other: &LinearGrads) -> Result<()> {
        self.dw.add_assign(&other.dw)?;
        self.db.add_assign(&other.db)
    }
}

impl LinearLayer {
    pub fn new(
        in_dim: usize,
        out_dim: usize,
        init: Init,
        rng: &mut RngState,
        adam: AdamConfig,
    ) -> Self {
        let limit = match init {
            Init::Zeros => 0.0,
            Init::Glorot => (6.0 / (in_dim + out_dim) as f64).sqrt(),
            Init::He => (6.0 / in_dim as f64).sqrt(),
            Init::Uniform(a) => a,
        };
        let w = if limit == 0.0 {
            Tensor::zeros(&[out_dim, in_dim])
        } else {
            rng.uniform_tensor(&[out_dim, in_dim], -limit, limit)
        };
        Self {
            weight: Param::new(w, adam),
            bias: Param::new(Tensor::zeros(&[out_dim]), adam),
        }
    }

    pub fn from_weights(w: Tensor, b: Tensor, adam: AdamConfig) -> Result<Self> {
        if w.shape().len() != 2 || b.len() != w.rows() {
            return Err(Error::shape(
                "LinearLayer::from_weights",
                format!("W {:?}, b {:?}", w.shape(), b.shape()),
            ));
        }
        let b = b.reshape(&[w.rows()])?;
        Ok(Self {
            weight: Param::new(w, adam),
            bias: Param::new(b, adam),
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.rows()
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, LinearCache)> {
        if x.cols() != self.in_dim() {
            return Err(Error::shape(
                "linear_forward",
                format!("input has {} features, layer expects {}", x.cols(), self.in_dim()),
            ));
        }
        let y = gemm(x, false, &self.weight.value, true)?.add_row_vector(&self.bias.value)?;
        Ok((y, LinearCache { x: x.clone() }))
    }

    /// Returns `(dx, grads)`.
    pub fn backward(&self, cache: &LinearCache, dy: &Tensor) -> Result<(Tensor, LinearGrads)> {
        let grads = self.param_grads(cache, dy)?;
        let dx = self.input_grad(dy)?;
        Ok((dx, grads))
    }

    /// `dy · W`, the gradient with respect to the layer input.
    pub fn input_grad(&self, dy: &Tensor) -> Result<Tensor> {
        if dy.cols() != self.out_dim() {
            return Err(Error::shape(
                "linear_backward",
                format!("dy has {} features, layer produces {}", dy.cols(), self.out_dim()),
            ));
        }
        gemm(dy, false, &self.weight.value, false)
    }

    pub fn param_grads(&self, cache: &LinearCache, dy: &Tensor) -> Result<LinearGrads> {
        if dy.rows() != cache.x.rows() || dy.cols() != self.out_dim() {
            return Err(Error::shape(
                "linear_backward",
                format!("dy {:?} vs cached input {:?}", dy.shape(), cache.x.shape()),
            ));
        }
        let mut dw = Tensor::zeros_like(&self.weight.value);
        gemm_acc(1.0, dy, true, &cache.x, false, 0.0, &mut dw)?;
        if fault::linear_backward_corrupted() {
            dw = dw.scale(1.05);
        }
        Ok(LinearGrads {
            dw,
            db: dy.sum_rows(),
        })
    }

    pub fn apply(&mut self, grads: &LinearGrads) -> Result<()> {
        self.weight.step(&grads.dw)?;
        self.bias.step(&grads.db)
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.weight.set_lr(lr);
        self.bias.set_lr(lr);
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.weight.value, &self.bias.value]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight.value, &mut self.bias.value]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, max_relative_error};

    fn layer(w: &[&[f64]], b: &[f64]) -> LinearLayer {
        LinearLayer::from_weights(
            Tensor::from_rows(w).unwrap(),
            Tensor::vector(b.to_vec()),
            AdamConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn identity_weights_pass_input_through() {
        let l = LinearLayer::from_weights(Tensor::eye(3), Tensor::zeros(&[3]), AdamConfig::default())
            .unwrap();
        let x = Tensor::from_rows(&[[1.0, -2.0, 0.5]]).unwrap();
        assert_eq!(l.forward(&x).unwrap().0, x);
    }

    #[test]
    fn hand_computed_output() {
        let l = layer(&[&[1.0, 1.0]], &[1.0]);
        let (y, _) = l.forward(&Tensor::from_rows(&[[2.0, 3.0]]).unwrap()).unwrap();
        assert_eq!(y.data(), &[6.0]);
    }

    #[test]
    fn zero_batch_rows_equal_bias() {
        let l = layer(&[&[1.0, 2.0], &[3.0, 4.0]], &[0.5, -0.5]);
        let (y, _) = l.forward(&Tensor::zeros(&[3, 2])).unwrap();
        for r in 0..3 {
            assert_eq!(y.row(r), &[0.5, -0.5]);
        }
    }

    #[test]
    fn zero_upstream_gradient() {
        let mut rng = RngState::new(2);
        let l = LinearLayer::new(4, 3, Init::Glorot, &mut rng, AdamConfig::default());
        let x = rng.uniform_tensor(&[5, 4], -1.0, 1.0);
        let (_, cache) = l.forward(&x).unwrap();
        let (dx, g) = l.backward(&cache, &Tensor::zeros(&[5, 3])).unwrap();
        assert_eq!(dx.max_abs() + g.dw.max_abs() + g.db.max_abs(), 0.0);
    }

    #[test]
    fn scalar_weight_gradient_is_dy_times_x() {
        let l = layer(&[&[0.7]], &[0.1]);
        let x = Tensor::from_rows(&[[3.0]]).unwrap();
        let (_, cache) = l.forward(&x).unwrap();
        let (dx, g) = l.backward(&cache, &Tensor::from_rows(&[[2.0]]).unwrap()).unwrap();
        assert_eq!(g.dw.data(), &[6.0]);
        assert_eq!(g.db.data(), &[2.0]);
        assert!((dx.data()[0] - 1.4).abs() < 1e-15);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = RngState::new(5);
        for _ in 0..10 {
            let (b, i, o) = (1 + rng.below(4) as usize, 1 + rng.below(6) as usize, 1 + rng.below(6) as usize);
            let l = LinearLayer::new(i, o, Init::Glorot, &mut rng, AdamConfig::default());
            let x = rng.uniform_tensor(&[b, i], -1.0, 1.0);
            let probe = rng.uniform_tensor(&[b, o], -1.0, 1.0);
            let loss = |l: &LinearLayer, x: &Tensor| l.forward(x).unwrap().0.dot(&probe).unwrap();
            let (_, cache) = l.forward(&x).unwrap();
            let (dx, g) = l.backward(&cache, &probe).unwrap();

            let num_dx = finite_diff_grad(|x| loss(&l, x), &x, 1e-6);
            assert!(max_relative_error(&dx, &num_dx, 1e-8) < 1e-6);
            let num_dw = finite_diff_grad(
                |w| {
                    let mut l2 = l.clone();
                    l2.weight.value = w.clone();
                    loss(&l2, &x)
                },
                &l.weight.value,
                1e-6,
            );
            assert!(max_relative_error(&g.dw, &num_dw, 1e-8) < 1e-6);
            let num_db = finite_diff_grad(
                |bb| {
                    let mut l2 = l.clone();
                    l2.bias.value = bb.clone();
                    loss(&l2, &x)
                },
                &l.bias.value,
                1e-6,
            );
            assert!(max_relative_error(&g.db, &num_db, 1e-8) < 1e-6);
        }
    }

    #[test]
    fn shape_errors() {
        let l = layer(&[&[1.0, 1.0]], &[0.0]);
        assert!(l.forward(&Tensor::zeros(&[1, 3])).is_err());
        let (_, cache) = l.forward(&Tensor::zeros(&[2, 2])).unwrap();
        assert!(l.backward(&cache, &Tensor::zeros(&[3, 1])).is_err());
    }

    #[test]
    fn fault_hook_perturbs_weight_gradient() {
        let l = layer(&[&[1.0, 1.0]], &[0.0]);
        let (_, cache) = l.forward(&Tensor::from_rows(&[[1.0, 2.0]]).unwrap()).unwrap();
        let dy = Tensor::from_rows(&[[1.0]]).unwrap();
        let good = l.backward(&cache, &dy).unwrap().1.dw;
        let bad = fault::with_corrupted_linear_backward(|| l.backward(&cache, &dy).unwrap().1.dw);
        assert_ne!(good, bad);
        assert_eq!(good, l.backward(&cache, &dy).unwrap().1.dw);
    }
}
