use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::layers::{
    relu_backward, relu_forward, BatchNormCache, BatchNormGrads, BatchNormLayer, BnMode, Init,
    LinearCache, LinearGrads, LinearLayer, ReluCache,
};
use crate::numerics::{AdamConfig, RngState, Tensor};

/// Shape of a regression network: `(linear → [batchnorm] → relu)* → linear`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpShape {
    pub in_dim: usize,
    pub out_dim: usize,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub batchnorm: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Hidden {
    linear: LinearLayer,
    bn: Option<BatchNormLayer>,
}

/// The network family shared by synthetic-gradient and synthetic-input
/// models. The output layer starts at exactly zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    shape: MlpShape,
    hidden: Vec<Hidden>,
    out: LinearLayer,
}

#[derive(Clone, Debug)]
pub struct MlpCache {
    hidden: Vec<(LinearCache, Option<BatchNormCache>, ReluCache)>,
    out: LinearCache,
    y: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrads {
    hidden: Vec<(LinearGrads, Option<BatchNormGrads>)>,
    out: LinearGrads,
}

impl Mlp {
    pub fn new(shape: MlpShape, rng: &mut RngState, adam: AdamConfig) -> Self {
        let mut hidden = Vec::with_capacity(shape.hidden_layers);
        let mut d = shape.in_dim;
        for _ in 0..shape.hidden_layers {
            hidden.push(Hidden {
                linear: LinearLayer::new(d, shape.hidden_width, Init::He, rng, adam),
                bn: shape
                    .batchnorm
                    .then(|| BatchNormLayer::new(shape.hidden_width, adam)),
            });
            d = shape.hidden_width;
        }
        let out = LinearLayer::new(d, shape.out_dim, Init::Zeros, rng, adam);
        Self { shape, hidden, out }
    }

    pub fn shape(&self) -> MlpShape {
        self.shape
    }

    pub fn forward(&mut self, x: &Tensor, mode: BnMode) -> Result<(Tensor, MlpCache)> {
        let mut caches = Vec::with_capacity(self.hidden.len());
        let mut a = x.clone();
        for layer in &mut self.hidden {
            let (z, lc) = layer.linear.forward(&a)?;
            let (z, bc) = match &mut layer.bn {
                Some(bn) => {
                    let (z, c) = bn.forward(&z, mode)?;
                    (z, Some(c))
                }
                None => (z, None),
            };
            let (r, rc) = relu_forward(&z);
            caches.push((lc, bc, rc));
            a = r;
        }
        let (y, out) = self.out.forward(&a)?;
        Ok((y.clone(), MlpCache { hidden: caches, out, y }))
    }

    /// The output stored in a cache from [`Mlp::forward`].
    pub fn forward_output(&self, cache: &MlpCache) -> Tensor {
        cache.y.clone()
    }

    pub fn backward(&self, cache: &MlpCache, dy: &Tensor) -> Result<(Tensor, MlpGrads)> {
        let (mut d, out) = self.out.backward(&cache.out, dy)?;
        let mut grads = Vec::with_capacity(self.hidden.len());
        for (layer, (lc, bc, rc)) in self.hidden.iter().zip(&cache.hidden).rev() {
            let dz = relu_backward(rc, &d)?;
            let (dz, bg) = match (&layer.bn, bc) {
                (Some(bn), Some(bc)) => {
                    let (dz, g) = bn.backward(bc, &dz)?;
                    (dz, Some(g))
                }
                _ => (dz, None),
            };
            let (dx, lg) = layer.linear.backward(lc, &dz)?;
            grads.push((lg, bg));
            d = dx;
        }
        grads.reverse();
        Ok((d, MlpGrads { hidden: grads, out }))
    }

    pub fn apply(&mut self, grads: &MlpGrads) -> Result<()> {
        for (layer, (lg, bg)) in self.hidden.iter_mut().zip(&grads.hidden) {
            layer.linear.apply(lg)?;
            if let (Some(bn), Some(bg)) = (&mut layer.bn, bg) {
                bn.apply(bg)?;
            }
        }
        self.out.apply(&grads.out)
    }

    pub fn set_lr(&mut self, lr: f64) {
        for layer in &mut self.hidden {
            layer.linear.set_lr(lr);
            if let Some(bn) = &mut layer.bn {
                bn.set_lr(lr);
            }
        }
        self.out.set_lr(lr);
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = Vec::new();
        for layer in &self.hidden {
            p.extend(layer.linear.params());
            if let Some(bn) = &layer.bn {
                p.extend(bn.params());
            }
        }
        p.extend(self.out.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = Vec::new();
        for layer in &mut self.hidden {
            p.extend(layer.linear.params_mut());
            if let Some(bn) = &mut layer.bn {
                p.extend(bn.params_mut());
            }
        }
        p.extend(self.out.params_mut());
        p
    }

    /// The final regression layer.
    pub fn output_layer(&self) -> &LinearLayer {
        &self.out
    }

    pub fn output_layer_mut(&mut self) -> &mut LinearLayer {
        &mut self.out
    }
}

impl MlpGrads {
    /// Every gradient tensor, in the same order as [`Mlp::params`].
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = Vec::new();
        for (lg, bg) in &self.hidden {
            v.extend([&lg.dw, &lg.db]);
            if let Some(bg) = bg {
                v.extend([&bg.dgamma, &bg.dbeta]);
            }
        }
        v.extend([&self.out.dw, &self.out.db]);
        v
    }

    pub fn sq_norm(&self) -> f64 {
        let mut s = self.out.dw.sq_norm() + self.out.db.sq_norm();
        for (lg, bg) in &self.hidden {
            s += lg.dw.sq_norm() + lg.db.sq_norm();
            if let Some(bg) = bg {
                s += bg.dgamma.sq_norm() + bg.dbeta.sq_norm();
            }
        }
        s
    }

    pub fn add_assign(&mut self, o: &MlpGrads) -> Result<()> {
        self.out.add_assign(&o.out)?;
        for ((a, ab), (b, bb)) in self.hidden.iter_mut().zip(&o.hidden) {
            a.add_assign(b)?;
            if let (Some(x), Some(y)) = (ab, bb) {
                x.dgamma.add_assign(&y.dgamma)?;
                x.dbeta.add_assign(&y.dbeta)?;
            }
        }
        Ok(())
    }
}
