use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    argmax_rows, l2_loss, masked_softmax_xent, sigmoid, sigmoid_bce, BnMode, Init, LinearGrads, LinearLayer, LstmCache, LstmCore, LstmGrads,
};
use crate::numerics::{AdamConfig, RngState, Tensor};
use crate::synthetic::{Conditioning, MlpGrads, SgConfig, SgModel};

/// How readout logits are turned into a loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    /// Independent sigmoid per channel (Copy tasks).
    #[default]
    Bernoulli,
    /// Softmax over channels; targets are one-hot (character streams).
    Categorical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TbpttConfig {
    /// Unroll length.
    pub t: usize,
    pub dni: bool,
    pub aux: bool,
    /// Multiplier on the synthetic gradient where the core consumes it.
    #[serde(default = "default_sg_scale")]
    pub sg_scale: f64,
    #[serde(default)]
    pub backprop_sg_error_into_core: bool,
    #[serde(default)]
    pub output: OutputKind,
}

fn default_sg_scale() -> f64 {
    0.1
}

impl TbpttConfig {
    pub fn new(t: usize, dni: bool, aux: bool) -> Self {
        Self {
            t,
            dni,
            aux,
            sg_scale: default_sg_scale(),
            backprop_sg_error_into_core: false,
            output: OutputKind::Bernoulli,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t == 0 {
            return Err(Error::Config("unroll length must be positive".into()));
        }
        if self.aux && (!self.dni || self.t < 2) {
            return Err(Error::Config("the auxiliary task needs DNI and T ≥ 2".into()));
        }
        Ok(())
    }
}

/// LSTM core with a linear readout, plus the synthetic-gradient model on
/// the `(h, c)` state and the auxiliary head that predicts it `T` steps on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RnnModel {
    pub core: LstmCore,
    pub readout: LinearLayer,
    pub sg: Option<SgModel>,
    pub aux: Option<LinearLayer>,
}

impl RnnModel {
    pub fn new(
        in_dim: usize,
        units: usize,
        out_dim: usize,
        cfg: &TbpttConfig,
        rng: &mut RngState,
        adam: AdamConfig,
    ) -> Self {
        let sg_cfg = SgConfig {
            hidden_layers: 1,
            hidden_width: units,
            batchnorm: false,
            conditioning: Conditioning::None,
        };
        Self {
            core: LstmCore::new(in_dim, units, rng, adam),
            readout: LinearLayer::new(units, out_dim, Init::Glorot, rng, adam),
            sg: cfg.dni.then(|| SgModel::for_lstm(units, sg_cfg, rng, adam)),
            aux: cfg
                .aux
                .then(|| LinearLayer::new(units, 2 * units, Init::Zeros, rng, adam)),
        }
    }

    pub fn units(&self) -> usize {
        self.core.units()
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.core.set_lr(lr);
        self.readout.set_lr(lr);
        if let Some(sg) = &mut self.sg {
            sg.set_lr(lr);
        }
        if let Some(a) = &mut self.aux {
            a.set_lr(lr);
        }
    }
}

/// State carried from one window to the next.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowState {
    pub h: Tensor,
    pub c: Tensor,
    /// The last step of the previous window: the one extra core kept beyond
    /// the current unroll, through which gradients on the window-start
    /// state reach the parameters.
    pub retained: Option<LstmCache>,
    /// A synthetic gradient was predicted on `h` at the end of the previous
    /// window and still awaits its bootstrapped target.
    pub pending: bool,
    pub windows: u64,
}

impl WindowState {
    pub fn new(batch: usize, units: usize) -> Self {
        Self {
            h: Tensor::zeros(&[batch, units]),
            c: Tensor::zeros(&[batch, units]),
            retained: None,
            pending: false,
            windows: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RnnGrads {
    pub core: LstmGrads,
    pub readout: LinearGrads,
    pub sg: Option<MlpGrads>,
    pub aux: Option<LinearGrads>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowReport {
    /// Σ over steps of the batch-mean output loss.
    pub task_loss: f64,
    pub sg_loss: Option<f64>,
    pub aux_loss: Option<f64>,
    /// Sigmoid output probabilities per step, `[B × out]`.
    #[serde(skip)]
    pub probs: Vec<Tensor>,
}

fn split_state(g: &Tensor, u: usize) -> Result<(Tensor, Tensor)> {
    g.split_cols(u)
}

/// `(loss, ∂loss/∂logits, probabilities)` for one step.
pub fn output_loss(
    kind: OutputKind,
    logits: &Tensor,
    targets: &Tensor,
    weights: &[f64],
) -> Result<(f64, Tensor, Tensor)> {
    match kind {
        OutputKind::Bernoulli => {
            let (l, g) = sigmoid_bce(logits, targets, weights)?;
            Ok((l, g, logits.map(sigmoid)))
        }
        OutputKind::Categorical => {
            let labels = argmax_rows(targets);
            let mask: Vec<bool> = weights.iter().map(|&w| w != 0.0).collect();
            let (l, g) = masked_softmax_xent(logits, &labels, &mask)?;
            let mut p = logits.clone();
            for r in 0..p.rows() {
                let row = p.row_mut(r);
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                row.iter_mut().for_each(|v| *v = (*v - mx).exp());
                let z: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= z);
            }
            Ok((l, g, p))
        }
    }
}

/// Gradients for one truncated-BPTT window without updating anything.
///
/// Steps: unroll `T` steps; inject `sg_scale · δ̂ / B` on the final state;
/// backpropagate through the window; regress the prediction made on the
/// window-start state toward `B ×` the resulting window-start gradient;
/// train the auxiliary head at the window start toward the detached `δ̂`. `weights[t]` masks rows of step `t`.
pub fn window_grads(
    model: &mut RnnModel,
    cfg: &TbpttConfig,
    state: &mut WindowState,
    xs: &[Tensor],
    ys: &[Tensor],
    weights: &[Vec<f64>],
) -> Result<(WindowReport, RnnGrads)> {
    cfg.validate()?;
    if xs.len() != cfg.t || ys.len() != cfg.t || weights.len() != cfg.t {
        return Err(Error::shape(
            "window_step",
            format!("window of {} / {} / {} steps, T = {}", xs.len(), ys.len(), weights.len(), cfg.t),
        ));
    }
    if cfg.dni && state.windows > 0 && !state.pending {
        return Err(Error::State("no pending synthetic gradient for this window".into()));
    }
    let u = model.units();
    let batch = state.h.rows();
    let bf = batch as f64;
    let (h0, c0) = (state.h.clone(), state.c.clone());

    // (1) unroll
    let mut caches = Vec::with_capacity(cfg.t);
    let mut hs = Vec::with_capacity(cfg.t);
    let mut dlogits = Vec::with_capacity(cfg.t);
    let mut probs = Vec::with_capacity(cfg.t);
    let mut task_loss = 0.0;
    let (mut h, mut c) = (h0.clone(), c0.clone());
    for t in 0..cfg.t {
        let (hn, cn, cache) = model.core.step(&xs[t], &h, &c)?;
        let (logits, _) = model.readout.forward(&hn)?;
        let (loss, dl, p) = output_loss(cfg.output, &logits, &ys[t], &weights[t])?;
        task_loss += loss;
        probs.push(p);
        dlogits.push(dl);
        caches.push(cache);
        hs.push(hn.clone());
        h = hn;
        c = cn;
    }

    // (2) synthetic gradient on the final state
    let delta_hat = match &mut model.sg {
        Some(sg) if cfg.dni => Some(sg.predict(&h, None, BnMode::Train)?),
        _ => None,
    };
    let (mut dh, mut dc) = match &delta_hat {
        Some(d) => split_state(&d.scale(cfg.sg_scale / bf), u)?,
        None => (Tensor::zeros(&[batch, u]), Tensor::zeros(&[batch, u])),
    };

    // (3) BPTT
    let mut core_g = LstmGrads::zeros_for(&model.core);
    let mut readout_g = LinearGrads::zeros_for(&model.readout);
    for t in (0..cfg.t).rev() {
        let (_, rc) = model.readout.forward(&hs[t])?;
        let (dhr, rg) = model.readout.backward(&rc, &dlogits[t])?;
        readout_g.add_assign(&rg)?;
        dh.add_assign(&dhr)?;
        let sg = model.core.backward(&caches[t], &dh, &dc)?;
        core_g.add_assign(&sg.params)?;
        dh = sg.dh_prev;
        dc = sg.dc_prev;
    }

    // (4) bootstrapped target for the prediction made on the window start
    let mut sg_loss = None;
    let mut sg_g = None;
    if let (Some(sg), Some(_)) = (&mut model.sg, &delta_hat) {
        if state.pending {
            let target = dh.hcat(&dc)?.scale(bf);
            let (loss, dinput, g) = sg.grads(&h0, None, &target)?;
            sg_loss = Some(loss);
            sg_g = Some(g);
            if cfg.backprop_sg_error_into_core {
                if let Some(ret) = &state.retained {
                    let zero = Tensor::zeros(&[batch, u]);
                    core_g.add_assign(&model.core.backward(ret, &dinput, &zero)?.params)?;
                }
            }
        }
    }

    // auxiliary prediction of δ̂ from the window-start state
    let mut aux_loss = None;
    let mut aux_g = None;
    if let (Some(aux), Some(d_end)) = (&model.aux, &delta_hat) {
        if cfg.aux {
            let (pred, cache) = aux.forward(&h0)?;
            let (loss, dpred) = l2_loss(&pred, d_end)?;
            let (dh0, g) = aux.backward(&cache, &dpred)?;
            aux_loss = Some(loss);
            aux_g = Some(g);
            if let Some(ret) = &state.retained {
                let zero = Tensor::zeros(&[batch, u]);
                core_g.add_assign(&model.core.backward(ret, &dh0, &zero)?.params)?;
            }
        }
    }

    state.h = h;
    state.c = c;
    state.retained = caches.pop();
    state.pending = delta_hat.is_some();
    state.windows += 1;
    Ok((
        WindowReport {
            task_loss,
            sg_loss,
            aux_loss,
            probs,
        },
        RnnGrads {
            core: core_g,
            readout: readout_g,
            sg: sg_g,
            aux: aux_g,
        },
    ))
}

pub fn apply_grads(model: &mut RnnModel, g: &RnnGrads) -> Result<()> {
    model.core.apply(&g.core)?;
    model.readout.apply(&g.readout)?;
    if let (Some(sg), Some(gs)) = (&mut model.sg, &g.sg) {
        sg.apply(gs)?;
    }
    if let (Some(aux), Some(ga)) = (&mut model.aux, &g.aux) {
        aux.apply(ga)?;
    }
    Ok(())
}

/// One window: [`window_grads`] followed by an Adam step on every part.
pub fn window_step(
    model: &mut RnnModel,
    cfg: &TbpttConfig,
    state: &mut WindowState,
    xs: &[Tensor],
    ys: &[Tensor],
    weights: &[Vec<f64>],
) -> Result<WindowReport> {
    let (report, grads) = window_grads(model, cfg, state, xs, ys, weights)?;
    apply_grads(model, &grads)?;
    Ok(report)
}
