use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    argmax_rows, relu_backward, relu_forward, BatchNormCache, BatchNormGrads, BatchNormLayer,
    BnMode, Init, LinearCache, LinearGrads, LinearLayer, ReluCache,
};
use crate::numerics::{AdamConfig, RngState, Tensor};
use crate::synthetic::{Conditioning, SgConfig, SgModel, SyntheticInputModel};

/// Where synthetic-gradient interfaces sit. Interface `k` is the output of
/// the `k`-th layer, counted from 1.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    None,
    After(Vec<usize>),
    Every,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FfSpec {
    pub input_dim: usize,
    /// Total layer count including the classifier.
    pub layers: usize,
    pub hidden: usize,
    pub classes: usize,
    pub placement: Placement,
    pub sg: SgConfig,
    /// Architecture of the synthetic-input models; `None` builds none.
    pub synthetic_inputs: Option<SgConfig>,
    pub adam: AdamConfig,
    /// Learning rate of the synthetic models; the trunk rate when `None`.
    pub sg_lr: Option<f64>,
}

impl FfSpec {
    pub fn mnist(layers: usize, placement: Placement, sg: SgConfig) -> Self {
        Self {
            input_dim: 784,
            layers,
            hidden: 256,
            classes: 10,
            placement,
            sg,
            synthetic_inputs: None,
            adam: AdamConfig::with_lr(3e-5),
            sg_lr: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers < 2 {
            return Err(Error::Config("a network needs at least two layers".into()));
        }
        if let Placement::After(ks) = &self.placement {
            if let Some(&k) = ks.iter().find(|&&k| k == 0 || k >= self.layers) {
                return Err(Error::Config(format!(
                    "interface after layer {k} outside [1, {}]",
                    self.layers - 1
                )));
            }
        }
        if let Conditioning::Label(c) = self.sg.conditioning {
            if c != self.classes {
                return Err(Error::Config(format!(
                    "conditioning on {c} classes but the classifier has {}",
                    self.classes
                )));
            }
        }
        Ok(())
    }

    /// Whether interface `i` (0-based: output of layer `i`) is decoupled.
    pub fn decoupled(&self, i: usize) -> bool {
        i + 1 < self.layers
            && match &self.placement {
                Placement::None => false,
                Placement::Every => true,
                Placement::After(ks) => ks.contains(&(i + 1)),
            }
    }
}

/// Linear, then batch-norm and ReLU unless it is the classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub linear: LinearLayer,
    pub bn: Option<BatchNormLayer>,
}

#[derive(Clone, Debug)]
pub struct BlockCache {
    linear: LinearCache,
    post: Option<(BatchNormCache, ReluCache)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockGrads {
    pub linear: LinearGrads,
    pub bn: Option<BatchNormGrads>,
}

impl BlockGrads {
    pub fn add_assign(&mut self, o: &BlockGrads) -> Result<()> {
        self.linear.add_assign(&o.linear)?;
        if let (Some(a), Some(b)) = (&mut self.bn, &o.bn) {
            a.dgamma.add_assign(&b.dgamma)?;
            a.dbeta.add_assign(&b.dbeta)?;
        }
        Ok(())
    }

    pub fn sq_norm(&self) -> f64 {
        let mut s = self.linear.dw.sq_norm() + self.linear.db.sq_norm();
        if let Some(b) = &self.bn {
            s += b.dgamma.sq_norm() + b.dbeta.sq_norm();
        }
        s
    }
}

impl Block {
    pub fn hidden(in_dim: usize, out: usize, rng: &mut RngState, adam: AdamConfig) -> Self {
        Self {
            linear: LinearLayer::new(in_dim, out, Init::He, rng, adam),
            bn: Some(BatchNormLayer::new(out, adam)),
        }
    }

    pub fn classifier(in_dim: usize, out: usize, rng: &mut RngState, adam: AdamConfig) -> Self {
        Self {
            linear: LinearLayer::new(in_dim, out, Init::Glorot, rng, adam),
            bn: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor, mode: BnMode) -> Result<(Tensor, BlockCache)> {
        let (z, linear) = self.linear.forward(x)?;
        match &mut self.bn {
            None => Ok((z, BlockCache { linear, post: None })),
            Some(bn) => {
                let (z, bc) = bn.forward(&z, mode)?;
                let (y, rc) = relu_forward(&z);
                Ok((
                    y,
                    BlockCache {
                        linear,
                        post: Some((bc, rc)),
                    },
                ))
            }
        }
    }

    pub fn backward(&self, cache: &BlockCache, dy: &Tensor) -> Result<(Tensor, BlockGrads)> {
        let (dz, bn) = match (&self.bn, &cache.post) {
            (Some(bn), Some((bc, rc))) => {
                let d = relu_backward(rc, dy)?;
                let (d, g) = bn.backward(bc, &d)?;
                (d, Some(g))
            }
            _ => (dy.clone(), None),
        };
        let (dx, linear) = self.linear.backward(&cache.linear, &dz)?;
        Ok((dx, BlockGrads { linear, bn }))
    }

    pub fn apply(&mut self, g: &BlockGrads) -> Result<()> {
        self.linear.apply(&g.linear)?;
        if let (Some(bn), Some(g)) = (&mut self.bn, &g.bn) {
            bn.apply(g)?;
        }
        Ok(())
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.linear.set_lr(lr);
        if let Some(bn) = &mut self.bn {
            bn.set_lr(lr);
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.linear.params();
        if let Some(bn) = &self.bn {
            p.extend(bn.params());
        }
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.linear.params_mut();
        if let Some(bn) = &mut self.bn {
            p.extend(bn.params_mut());
        }
        p
    }
}

/// A fully-connected classifier with optional synthetic-gradient models on
/// its interfaces and synthetic-input models feeding its layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FfNetwork {
    pub spec: FfSpec,
    pub blocks: Vec<Block>,
    /// `sgs[i]` serves the output of layer `i`; present where decoupled.
    pub sgs: Vec<Option<SgModel>>,
    /// `synth_inputs[i]` predicts the output of layer `i` from the raw input.
    pub synth_inputs: Vec<Option<SyntheticInputModel>>,
}

impl FfNetwork {
    pub fn new(spec: FfSpec, rng: &mut RngState) -> Result<Self> {
        spec.validate()?;
        let mut blocks = Vec::with_capacity(spec.layers);
        let mut d = spec.input_dim;
        for _ in 0..spec.layers - 1 {
            blocks.push(Block::hidden(d, spec.hidden, rng, spec.adam));
            d = spec.hidden;
        }
        blocks.push(Block::classifier(d, spec.classes, rng, spec.adam));
        let sg_adam = AdamConfig {
            lr: spec.sg_lr.unwrap_or(spec.adam.lr),
            ..spec.adam
        };
        let sgs = (0..spec.layers - 1)
            .map(|i| {
                spec.decoupled(i)
                    .then(|| SgModel::new(spec.hidden, spec.hidden, spec.sg, rng, sg_adam))
            })
            .collect();
        let synth_inputs = (0..spec.layers - 1)
            .map(|_| {
                spec.synthetic_inputs.map(|cfg| {
                    SyntheticInputModel::new(spec.input_dim, spec.hidden, cfg, rng, sg_adam)
                })
            })
            .collect();
        Ok(Self {
            spec,
            blocks,
            sgs,
            synth_inputs,
        })
    }

    pub fn layers(&self) -> usize {
        self.blocks.len()
    }

    /// Trunk learning rate; synthetic models keep their ratio to it.
    pub fn set_lr(&mut self, lr: f64) {
        let ratio = self.spec.sg_lr.map_or(1.0, |s| s / self.spec.adam.lr);
        for b in &mut self.blocks {
            b.set_lr(lr);
        }
        for m in self.sgs.iter_mut().flatten() {
            m.set_lr(lr * ratio);
        }
        for m in self.synth_inputs.iter_mut().flatten() {
            m.set_lr(lr * ratio);
        }
    }

    /// Plain chained forward.
    pub fn forward(&mut self, x: &Tensor, mode: BnMode) -> Result<Tensor> {
        let mut h = x.clone();
        for b in &mut self.blocks {
            h = b.forward(&h, mode)?.0;
        }
        Ok(h)
    }

    /// Classification error rate of an eval-mode forward, in batches.
    pub fn error_rate(&mut self, images: &Tensor, labels: &[usize], batch: usize) -> Result<f64> {
        let n = labels.len();
        let mut wrong = 0;
        let mut start = 0;
        while start < n {
            let idx: Vec<usize> = (start..(start + batch).min(n)).collect();
            let logits = self.forward(&images.select_rows(&idx), BnMode::Eval)?;
            wrong += argmax_rows(&logits)
                .iter()
                .zip(&idx)
                .filter(|(p, &i)| **p != labels[i])
                .count();
            start += batch;
        }
        Ok(wrong as f64 / n.max(1) as f64)
    }

    /// Every trunk parameter tensor, bottom-up.
    pub fn trunk_params(&self) -> Vec<&Tensor> {
        self.blocks.iter().flat_map(|b| b.params()).collect()
    }

    /// Layer ranges `[start, end]` between decoupled interfaces.
    pub fn modules(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut start = 0;
        for i in 0..self.layers() {
            if i + 1 == self.layers() || self.spec.decoupled(i) {
                out.push((start, i));
                start = i + 1;
            }
        }
        out
    }
}
