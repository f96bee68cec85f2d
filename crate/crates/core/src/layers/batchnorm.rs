use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{AdamConfig, Param, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BnMode {
    Train,
    Eval,
}

/// Per-feature batch normalisation with learned scale and shift.
///
/// Running statistics are exponential averages of the (biased) batch mean and
/// variance: `running = momentum * running + (1 - momentum) * batch`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormLayer {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Clone, Debug)]
pub struct BatchNormCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
    mode: BnMode,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormGrads {
    pub dgamma: Tensor,
    pub dbeta: Tensor,
}

impl BatchNormLayer {
    pub fn new(features: usize, adam: AdamConfig) -> Self {
        Self {
            gamma: Param::new(Tensor::full(&[features], 1.0), adam),
            beta: Param::new(Tensor::zeros(&[features]), adam),
            running_mean: Tensor::zeros(&[features]),
            running_var: Tensor::full(&[features], 1.0),
            momentum: 0.9,
            eps: 1e-5,
        }
    }

    pub fn features(&self) -> usize {
        self.gamma.value.len()
    }

    /// Train mode normalises with batch statistics and updates the running
    /// averages; eval mode uses the running averages only.
    pub fn forward(&mut self, x: &Tensor, mode: BnMode) -> Result<(Tensor, BatchNormCache)> {
        let (n, d) = (x.rows(), x.cols());
        if d != self.features() {
            return Err(Error::shape(
                "batchnorm_forward",
                format!("{} features, layer has {}", d, self.features()),
            ));
        }
        let (mean, var) = match mode {
            BnMode::Train => {
                if n < 2 {
                    return Err(Error::shape(
                        "batchnorm_forward",
                        "train mode needs a batch of at least 2",
                    ));
                }
                let mut mean = vec![0.0; d];
                for r in 0..n {
                    for (m, &v) in mean.iter_mut().zip(x.row(r)) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0; d];
                for r in 0..n {
                    for ((s, &v), &m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= n as f64);
                let mo = self.momentum;
                for j in 0..d {
                    let rm = &mut self.running_mean.data_mut()[j];
                    *rm = mo * *rm + (1.0 - mo) * mean[j];
                    let rv = &mut self.running_var.data_mut()[j];
                    *rv = mo * *rv + (1.0 - mo) * var[j];
                }
                (mean, var)
            }
            BnMode::Eval => (
                self.running_mean.data().to_vec(),
                self.running_var.data().to_vec(),
            ),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut xhat = x.clone();
        let mut y = x.clone();
        let (g, b) = (self.gamma.value.data(), self.beta.value.data());
        for r in 0..n {
            let xr = xhat.row_mut(r);
            for j in 0..d {
                xr[j] = (xr[j] - mean[j]) * inv_std[j];
            }
            let yr = y.row_mut(r);
            for j in 0..d {
                yr[j] = g[j] * xhat.get(r, j) + b[j];
            }
        }
        Ok((y, BatchNormCache { xhat, inv_std, mode }))
    }

    pub fn backward(&self, cache: &BatchNormCache, dy: &Tensor) -> Result<(Tensor, BatchNormGrads)> {
        if !dy.same_shape(&cache.xhat) {
            return Err(Error::shape(
                "batchnorm_backward",
                format!("dy {:?} vs {:?}", dy.shape(), cache.xhat.shape()),
            ));
        }
        let (n, d) = (dy.rows(), dy.cols());
        let g = self.gamma.value.data();
        let mut dgamma = vec![0.0; d];
        let mut dbeta = vec![0.0; d];
        for r in 0..n {
            for j in 0..d {
                dgamma[j] += dy.get(r, j) * cache.xhat.get(r, j);
                dbeta[j] += dy.get(r, j);
            }
        }
        let mut dx = Tensor::zeros(&[n, d]);
        match cache.mode {
            BnMode::Train => {
                // dx = γ·σ⁻¹/n · (n·dy − Σdy − x̂·Σ(dy·x̂))
                let nf = n as f64;
                for r in 0..n {
                    for j in 0..d {
                        let v = nf * dy.get(r, j) - dbeta[j] - cache.xhat.get(r, j) * dgamma[j];
                        dx.set(r, j, g[j] * cache.inv_std[j] * v / nf);
                    }
                }
            }
            BnMode::Eval => {
                for r in 0..n {
                    for j in 0..d {
                        dx.set(r, j, g[j] * cache.inv_std[j] * dy.get(r, j));
                    }
                }
            }
        }
        Ok((
            dx,
            BatchNormGrads {
                dgamma: Tensor::vector(dgamma),
                dbeta: Tensor::vector(dbeta),
            },
        ))
    }

    pub fn apply(&mut self, grads: &BatchNormGrads) -> Result<()> {
        self.gamma.step(&grads.dgamma)?;
        self.beta.step(&grads.dbeta)
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.gamma.set_lr(lr);
        self.beta.set_lr(lr);
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.gamma.value, &self.beta.value]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.gamma.value, &mut self.beta.value]
    }
}
