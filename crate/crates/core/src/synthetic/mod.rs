//! Synthetic-gradient models, their label-conditioned variant, and
//! synthetic-input models.

mod mlp;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{l2_loss, BnMode};
use crate::numerics::{AdamConfig, RngState, Tensor};
pub use mlp::{Mlp, MlpCache, MlpGrads, MlpShape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    None,
    /// The one-hot label over this many classes is appended to the input.
    Label(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgConfig {
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub batchnorm: bool,
    pub conditioning: Conditioning,
}

impl SgConfig {
    /// Two hidden layers, batch-normalised, unconditional.
    pub fn dni(width: usize) -> Self {
        Self {
            hidden_layers: 2,
            hidden_width: width,
            batchnorm: true,
            conditioning: Conditioning::None,
        }
    }

    /// Linear model on `[h; onehot(label)]`.
    pub fn cdni(classes: usize) -> Self {
        Self {
            hidden_layers: 0,
            hidden_width: 0,
            batchnorm: false,
            conditioning: Conditioning::Label(classes),
        }
    }
}

/// Outcome of one regression step.
#[derive(Clone, Debug)]
pub struct RegressionStep {
    /// L2 loss before the parameter update.
    pub loss: f64,
    /// Gradient of that loss with respect to the model input (conditioning
    /// channels excluded).
    pub dinput: Tensor,
}

/// An [`Mlp`] trained by L2 regression, remembering its last forward pass so
/// a following update on the same input can reuse it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Regressor {
    net: Mlp,
    version: u64,
    #[serde(skip)]
    last: Option<Record>,
}

#[derive(Clone, Debug)]
struct Record {
    input: Tensor,
    version: u64,
    cache: MlpCache,
}

impl PartialEq for Record {
    fn eq(&self, o: &Self) -> bool {
        self.input == o.input && self.version == o.version
    }
}

impl Regressor {
    pub fn new(shape: MlpShape, rng: &mut RngState, adam: AdamConfig) -> Self {
        Self {
            net: Mlp::new(shape, rng, adam),
            version: 0,
            last: None,
        }
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        self.last = None;
        self.version += 1;
        &mut self.net
    }

    fn check_in(&self, x: &Tensor) -> Result<()> {
        let want = self.net.shape().in_dim;
        if x.shape().len() != 2 || x.cols() != want {
            return Err(Error::shape(
                "regressor",
                format!("input {:?}, model expects {want} features", x.shape()),
            ));
        }
        Ok(())
    }

    pub fn predict(&mut self, x: &Tensor, mode: BnMode) -> Result<Tensor> {
        self.check_in(x)?;
        let (y, cache) = self.net.forward(x, mode)?;
        self.last = Some(Record {
            input: x.clone(),
            version: self.version,
            cache,
        });
        Ok(y)
    }

    /// L2 loss and parameter gradients against `target`, without updating.
    /// Reuses the cached forward when it was computed on this exact input
    /// with the current parameters, otherwise runs a fresh train-mode forward.
    pub fn grads(&mut self, x: &Tensor, target: &Tensor) -> Result<(f64, Tensor, MlpGrads)> {
        self.check_in(x)?;
        let reuse = matches!(&self.last, Some(r) if r.version == self.version && r.input == *x);
        if !reuse {
            self.predict(x, BnMode::Train)?;
        }
        let rec = self.last.as_ref().expect("forward recorded");
        let pred = self.net.forward_output(&rec.cache);
        if !pred.same_shape(target) {
            return Err(Error::shape(
                "regression target",
                format!("prediction {:?} vs target {:?}", pred.shape(), target.shape()),
            ));
        }
        let (loss, dpred) = l2_loss(&pred, target)?;
        let (dx, g) = self.net.backward(&rec.cache, &dpred)?;
        Ok((loss, dx, g))
    }

    pub fn apply(&mut self, g: &MlpGrads) -> Result<()> {
        self.net.apply(g)?;
        self.version += 1;
        self.last = None;
        Ok(())
    }

    /// One Adam step on `‖M(x) − target‖² / B`.
    pub fn update(&mut self, x: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
        let (loss, dx, g) = self.grads(x, target)?;
        self.apply(&g)?;
        Ok((loss, dx))
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.net.set_lr(lr);
    }
}

/// Synthetic-gradient model: activation (plus optional label) → predicted
/// gradient of the loss with respect to that activation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgModel {
    config: SgConfig,
    input_dim: usize,
    output_dim: usize,
    reg: Regressor,
}

impl SgModel {
    pub fn new(
        input_dim: usize,
        output_dim: usize,
        config: SgConfig,
        rng: &mut RngState,
        adam: AdamConfig,
    ) -> Self {
        let extra = match config.conditioning {
            Conditioning::None => 0,
            Conditioning::Label(c) => c,
        };
        let shape = MlpShape {
            in_dim: input_dim + extra,
            out_dim: output_dim,
            hidden_layers: config.hidden_layers,
            hidden_width: config.hidden_width,
            batchnorm: config.batchnorm,
        };
        Self {
            config,
            input_dim,
            output_dim,
            reg: Regressor::new(shape, rng, adam),
        }
    }

    /// Model for an LSTM interface: predicts `[dh; dc]` from `h`.
    pub fn for_lstm(units: usize, config: SgConfig, rng: &mut RngState, adam: AdamConfig) -> Self {
        Self::new(units, 2 * units, config, rng, adam)
    }

    pub fn config(&self) -> SgConfig {
        self.config
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn regressor(&self) -> &Regressor {
        &self.reg
    }

    pub fn regressor_mut(&mut self) -> &mut Regressor {
        &mut self.reg
    }

    fn model_input(&self, h: &Tensor, labels: Option<&[usize]>) -> Result<Tensor> {
        if h.shape().len() != 2 || h.cols() != self.input_dim {
            return Err(Error::shape(
                "sg_predict",
                format!("h {:?}, model expects {} features", h.shape(), self.input_dim),
            ));
        }
        match (self.config.conditioning, labels) {
            (Conditioning::None, None) => Ok(h.clone()),
            (Conditioning::Label(c), Some(l)) => {
                if l.len() != h.rows() {
                    return Err(Error::shape("sg_predict", "one label per row required"));
                }
                h.hcat(&Tensor::one_hot(l, c)?)
            }
            (Conditioning::None, Some(_)) => Err(Error::Config(
                "labels passed to an unconditional synthetic-gradient model".into(),
            )),
            (Conditioning::Label(_), None) => Err(Error::Config(
                "conditional synthetic-gradient model needs labels".into(),
            )),
        }
    }

    pub fn predict(&mut self, h: &Tensor, labels: Option<&[usize]>, mode: BnMode) -> Result<Tensor> {
        let x = self.model_input(h, labels)?;
        self.reg.predict(&x, mode)
    }

    /// Loss, `∂loss/∂h` and parameter gradients against a detached target.
    pub fn grads(
        &mut self,
        h: &Tensor,
        labels: Option<&[usize]>,
        target: &Tensor,
    ) -> Result<(f64, Tensor, MlpGrads)> {
        let x = self.model_input(h, labels)?;
        let (loss, dx, g) = self.reg.grads(&x, target)?;
        let dh = if dx.cols() == self.input_dim {
            dx
        } else {
            dx.split_cols(self.input_dim)?.0
        };
        Ok((loss, dh, g))
    }

    pub fn apply(&mut self, g: &MlpGrads) -> Result<()> {
        self.reg.apply(g)
    }

    pub fn update(
        &mut self,
        h: &Tensor,
        labels: Option<&[usize]>,
        target: &Tensor,
    ) -> Result<RegressionStep> {
        let (loss, dinput, g) = self.grads(h, labels, target)?;
        self.apply(&g)?;
        Ok(RegressionStep { loss, dinput })
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.reg.set_lr(lr);
    }
}

/// Synthetic-input model: raw network input → predicted activation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticInputModel {
    reg: Regressor,
}

impl SyntheticInputModel {
    pub fn new(
        input_dim: usize,
        output_dim: usize,
        config: SgConfig,
        rng: &mut RngState,
        adam: AdamConfig,
    ) -> Self {
        let shape = MlpShape {
            in_dim: input_dim,
            out_dim: output_dim,
            hidden_layers: config.hidden_layers,
            hidden_width: config.hidden_width,
            batchnorm: config.batchnorm,
        };
        Self {
            reg: Regressor::new(shape, rng, adam),
        }
    }

    pub fn regressor(&self) -> &Regressor {
        &self.reg
    }

    pub fn regressor_mut(&mut self) -> &mut Regressor {
        &mut self.reg
    }

    pub fn predict(&mut self, x: &Tensor, mode: BnMode) -> Result<Tensor> {
        self.reg.predict(x, mode)
    }

    pub fn update(&mut self, x: &Tensor, target: &Tensor) -> Result<f64> {
        Ok(self.reg.update(x, target)?.0)
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.reg.set_lr(lr);
    }
}
