use serde::{Deserialize, Serialize};

use super::network::{BlockCache, BlockGrads, FfNetwork};
use crate::bp_lambda::{mix_step, LambdaSchedule};
use crate::error::{Error, Result};
use crate::layers::{softmax_xent, BnMode};
use crate::numerics::{RngState, Tensor};
use crate::synthetic::Conditioning;

/// Discrepancy between a synthetic and a true gradient.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradDiagnostics {
    /// `‖δ̂ − δ‖`
    pub l2: f64,
    /// Cosine similarity; 0 when either vector is zero.
    pub cosine: f64,
    /// Fraction of elements whose signs differ, zero counting as its own sign.
    pub sign_error: f64,
}

pub fn gradient_diagnostics(pred: &Tensor, truth: &Tensor) -> Result<GradDiagnostics> {
    let l2 = pred.sub(truth)?.norm();
    let (np, nt) = (pred.norm(), truth.norm());
    let cosine = if np == 0.0 || nt == 0.0 {
        0.0
    } else {
        pred.dot(truth)? / (np * nt)
    };
    let sign = |v: f64| (v > 0.0) as i8 - (v < 0.0) as i8;
    let wrong = pred
        .data()
        .iter()
        .zip(truth.data())
        .filter(|(&a, &b)| sign(a) != sign(b))
        .count();
    Ok(GradDiagnostics {
        l2,
        cosine,
        sign_error: wrong as f64 / pred.len().max(1) as f64,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainStepReport {
    /// Classification loss, when the classifier ran.
    pub task_loss: Option<f64>,
    /// Regression loss of each interface's synthetic-gradient model, when it
    /// was trained this step.
    pub sg_losses: Vec<Option<f64>>,
    /// Regression loss of each synthetic-input model trained this step.
    pub input_losses: Vec<Option<f64>>,
    pub updated: Vec<bool>,
    /// Synthetic versus true gradient at each interface that consumed one,
    /// in the model's per-example units.
    pub diagnostics: Vec<Option<GradDiagnostics>>,
}

impl TrainStepReport {
    fn new(layers: usize) -> Self {
        Self {
            task_loss: None,
            sg_losses: vec![None; layers - 1],
            input_losses: vec![None; layers - 1],
            updated: vec![false; layers],
            diagnostics: vec![None; layers - 1],
        }
    }
}

/// Random visiting order and per-layer update coin flips.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateScheduler {
    pub p_update: f64,
    pub rng: RngState,
}

impl UpdateScheduler {
    pub fn new(p_update: f64, rng: RngState) -> Result<Self> {
        if !(0.0..=1.0).contains(&p_update) {
            return Err(Error::Config(format!("p_update {p_update} outside [0, 1]")));
        }
        Ok(Self { p_update, rng })
    }
}

/// Exponential average of past true gradients at each interface.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StaleGradientCache {
    pub decay: f64,
    pub ema: Vec<Option<Tensor>>,
}

impl StaleGradientCache {
    pub fn new(interfaces: usize, decay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::Config(format!("decay {decay} outside [0, 1]")));
        }
        Ok(Self {
            decay,
            ema: vec![None; interfaces],
        })
    }

    /// The first gradient seeds the average; later ones are blended in as
    /// `ema ← decay·ema + (1 − decay)·g`.
    pub fn refresh(&mut self, i: usize, g: &Tensor) -> Result<()> {
        match &mut self.ema[i] {
            None => self.ema[i] = Some(g.clone()),
            Some(e) => {
                if !e.same_shape(g) {
                    return Err(Error::shape(
                        "stale gradient",
                        format!("cached {:?} vs new {:?}", e.shape(), g.shape()),
                    ));
                }
                *e = e.scale(self.decay);
                e.axpy(1.0 - self.decay, g)?;
            }
        }
        Ok(())
    }
}

fn cond<'a>(net: &FfNetwork, labels: &'a [usize]) -> Option<&'a [usize]> {
    matches!(net.spec.sg.conditioning, Conditioning::Label(_)).then_some(labels)
}

fn check_batch(x: &Tensor, labels: &[usize]) -> Result<f64> {
    if x.rows() != labels.len() {
        return Err(Error::shape(
            "ff step",
            format!("{} inputs, {} labels", x.rows(), labels.len()),
        ));
    }
    Ok(x.rows() as f64)
}

struct Forward {
    /// `hs[i]` is the output of layer `i`; the logits come last.
    hs: Vec<Tensor>,
    caches: Vec<BlockCache>,
}

fn forward_all(net: &mut FfNetwork, x: &Tensor) -> Result<Forward> {
    let mut hs = Vec::with_capacity(net.layers());
    let mut caches = Vec::with_capacity(net.layers());
    let mut h = x.clone();
    for b in &mut net.blocks {
        let (y, c) = b.forward(&h, BnMode::Train)?;
        caches.push(c);
        hs.push(y.clone());
        h = y;
    }
    Ok(Forward { hs, caches })
}

/// Backward through layers `a..=b` from a gradient on the output of `b`.
/// Returns the gradient at the input of `a` and the grads bottom-up.
fn local_backward(
    net: &FfNetwork,
    caches: &[BlockCache],
    a: usize,
    b: usize,
    signal: Tensor,
) -> Result<(Tensor, Vec<BlockGrads>)> {
    let mut d = signal;
    let mut grads = Vec::with_capacity(b + 1 - a);
    for i in (a..=b).rev() {
        let (dx, g) = net.blocks[i].backward(&caches[i - a], &d)?;
        grads.push(g);
        d = dx;
    }
    grads.reverse();
    Ok((d, grads))
}

fn apply_range(net: &mut FfNetwork, a: usize, grads: &[BlockGrads], report: &mut TrainStepReport) -> Result<()> {
    for (k, g) in grads.iter().enumerate() {
        net.blocks[a + k].apply(g)?;
        report.updated[a + k] = true;
    }
    Ok(())
}

/// True gradients of the batch-mean loss at every interface, from a clone so
/// the network (including batch-norm running statistics) is left untouched.
pub fn true_interface_grads(net: &FfNetwork, x: &Tensor, labels: &[usize]) -> Result<Vec<Tensor>> {
    let mut probe = net.clone();
    let fwd = forward_all(&mut probe, x)?;
    let (_, mut d) = softmax_xent(fwd.hs.last().expect("layers"), labels)?;
    let mut out = vec![Tensor::zeros(&[0]); net.layers() - 1];
    for i in (0..net.layers()).rev() {
        if i + 1 < net.layers() {
            out[i] = d.clone();
        }
        d = probe.blocks[i].backward(&fwd.caches[i], &d)?.0;
    }
    Ok(out)
}

/// One step of exact backpropagation.
pub fn backprop_step(net: &mut FfNetwork, x: &Tensor, labels: &[usize]) -> Result<TrainStepReport> {
    check_batch(x, labels)?;
    let mut report = TrainStepReport::new(net.layers());
    let fwd = forward_all(net, x)?;
    let (loss, d) = softmax_xent(fwd.hs.last().expect("layers"), labels)?;
    report.task_loss = Some(loss);
    let top = net.layers() - 1;
    let (_, grads) = local_backward(net, &fwd.caches, 0, top, d)?;
    apply_range(net, 0, &grads, &mut report)?;
    Ok(report)
}

/// Backprop with the gradient at interface `i` replaced by the BP(λ)
/// mixture `λ_i·(backpropagated) + (1 − λ_i)·(synthetic)`. Synthetic
/// models at interfaces with `λ_i < 1` regress toward the unrolled target.
pub fn bp_lambda_step(
    net: &mut FfNetwork,
    x: &Tensor,
    labels: &[usize],
    schedule: &LambdaSchedule,
) -> Result<TrainStepReport> {
    let batch = check_batch(x, labels)?;
    schedule.validate()?;
    let c = cond(net, labels);
    let top = net.layers() - 1;
    let mut report = TrainStepReport::new(net.layers());
    let fwd = forward_all(net, x)?;
    let lambdas = (0..top).map(|i| schedule.lambda(i)).collect::<Result<Vec<_>>>()?;
    let mut synth: Vec<Option<Tensor>> = vec![None; top];
    for i in 0..top {
        if lambdas[i] < 1.0 {
            let sg = net.sgs[i]
                .as_mut()
                .ok_or_else(|| Error::Config(format!("λ < 1 at interface {} without a model", i + 1)))?;
            synth[i] = Some(sg.predict(&fwd.hs[i], c, BnMode::Train)?.scale(1.0 / batch));
        }
    }
    let (loss, d_top) = softmax_xent(&fwd.hs[top], labels)?;
    report.task_loss = Some(loss);
    let mut grads = Vec::with_capacity(net.layers());
    let (mut back, g) = net.blocks[top].backward(&fwd.caches[top], &d_top)?;
    grads.push(g);
    let mut targets: Vec<Option<Tensor>> = vec![None; top];
    for i in (0..top).rev() {
        if lambdas[i] < 1.0 {
            targets[i] = Some(back.scale(batch));
        }
        let through = back.clone();
        let g_bar = mix_step(&back, move |_| Ok(through), synth[i].as_ref(), lambdas[i])?;
        let (dx, g) = net.blocks[i].backward(&fwd.caches[i], &g_bar)?;
        grads.push(g);
        back = dx;
    }
    grads.reverse();
    apply_range(net, 0, &grads, &mut report)?;
    for i in 0..top {
        if let Some(t) = &targets[i] {
            let sg = net.sgs[i].as_mut().expect("checked above");
            report.sg_losses[i] = Some(sg.update(&fwd.hs[i], c, t)?.loss);
        }
    }
    Ok(report)
}

/// Decoupled training: modules between synthetic-gradient interfaces run
/// bottom-up, each updating from the synthetic gradient on its output as
/// soon as it has forwarded.
pub fn dni_step(net: &mut FfNetwork, x: &Tensor, labels: &[usize], diagnostics: bool) -> Result<TrainStepReport> {
    dni_step_with_hook(net, x, labels, diagnostics, |_, _| {})
}

/// [`dni_step`] with `hook(m, net)` called before module `m` runs.
pub fn dni_step_with_hook(
    net: &mut FfNetwork,
    x: &Tensor,
    labels: &[usize],
    diagnostics: bool,
    mut hook: impl FnMut(usize, &mut FfNetwork),
) -> Result<TrainStepReport> {
    let batch = check_batch(x, labels)?;
    let c = cond(net, labels);
    let top = net.layers() - 1;
    let truth = if diagnostics {
        Some(true_interface_grads(net, x, labels)?)
    } else {
        None
    };
    let mut report = TrainStepReport::new(net.layers());
    let mut input = x.clone();
    for (m, (a, b)) in net.modules().into_iter().enumerate() {
        hook(m, net);
        let mut caches = Vec::with_capacity(b + 1 - a);
        let mut h = input.clone();
        for i in a..=b {
            let (y, cache) = net.blocks[i].forward(&h, BnMode::Train)?;
            caches.push(cache);
            h = y;
        }
        let signal = if b == top {
            let (loss, d) = softmax_xent(&h, labels)?;
            report.task_loss = Some(loss);
            d
        } else {
            let sg = net.sgs[b].as_mut().ok_or_else(|| {
                Error::Config(format!("decoupled interface {} has no model", b + 1))
            })?;
            let pred = sg.predict(&h, c, BnMode::Train)?;
            if let Some(t) = &truth {
                report.diagnostics[b] = Some(gradient_diagnostics(&pred, &t[b].scale(batch))?);
            }
            pred.scale(1.0 / batch)
        };
        let (d_in, grads) = local_backward(net, &caches, a, b, signal)?;
        apply_range(net, a, &grads, &mut report)?;
        if a > 0 {
            let sg = net.sgs[a - 1].as_mut().expect("module boundary has a model");
            report.sg_losses[a - 1] = Some(sg.update(&input, c, &d_in.scale(batch))?.loss);
        }
        input = h;
    }
    Ok(report)
}

/// Full forward, then modules visited in a random order, each doing its
/// backward pass and update with probability `p_update`. A module that is
/// skipped also skips training the model on the interface below it.
pub fn stochastic_dni_step(
    net: &mut FfNetwork,
    x: &Tensor,
    labels: &[usize],
    sched: &mut UpdateScheduler,
) -> Result<TrainStepReport> {
    let batch = check_batch(x, labels)?;
    let c = cond(net, labels);
    let top = net.layers() - 1;
    let mut report = TrainStepReport::new(net.layers());
    let fwd = forward_all(net, x)?;
    let modules = net.modules();
    let mut signals = Vec::with_capacity(modules.len());
    for &(_, b) in &modules {
        if b == top {
            let (loss, d) = softmax_xent(&fwd.hs[top], labels)?;
            report.task_loss = Some(loss);
            signals.push(d);
        } else {
            let sg = net.sgs[b]
                .as_mut()
                .ok_or_else(|| Error::Config(format!("decoupled interface {} has no model", b + 1)))?;
            signals.push(sg.predict(&fwd.hs[b], c, BnMode::Train)?.scale(1.0 / batch));
        }
    }
    let order = sched.rng.permutation(modules.len());
    for m in order {
        if !sched.rng.bernoulli(sched.p_update) {
            continue;
        }
        let (a, b) = modules[m];
        let signal = std::mem::replace(&mut signals[m], Tensor::zeros(&[0]));
        let (d_in, grads) = local_backward(net, &fwd.caches[a..=b], a, b, signal)?;
        apply_range(net, a, &grads, &mut report)?;
        if a > 0 {
            let sg = net.sgs[a - 1].as_mut().expect("module boundary has a model");
            report.sg_losses[a - 1] = Some(sg.update(&fwd.hs[a - 1], c, &d_in.scale(batch))?.loss);
        }
    }
    Ok(report)
}

/// Backprop in which each layer does its backward pass and update with
/// probability `p_update`; a skipped layer passes nothing further down.
pub fn stochastic_backprop_step(
    net: &mut FfNetwork,
    x: &Tensor,
    labels: &[usize],
    sched: &mut UpdateScheduler,
) -> Result<TrainStepReport> {
    check_batch(x, labels)?;
    let mut report = TrainStepReport::new(net.layers());
    let fwd = forward_all(net, x)?;
    let top = net.layers() - 1;
    let (loss, mut d) = softmax_xent(&fwd.hs[top], labels)?;
    report.task_loss = Some(loss);
    let active: Vec<bool> = (0..net.layers()).map(|_| sched.rng.bernoulli(sched.p_update)).collect();
    for i in (0..net.layers()).rev() {
        if !active[i] {
            break;
        }
        let (dx, g) = net.blocks[i].backward(&fwd.caches[i], &d)?;
        net.blocks[i].apply(&g)?;
        report.updated[i] = true;
        d = dx;
    }
    Ok(report)
}

/// Every layer is independently busy with probability `1 − p_update` and
/// then neither forwards nor updates. An active layer reads the true
/// activation of the layer below when that layer ran, otherwise the
/// synthetic input predicted from the raw batch. Synthetic-gradient models
/// train only when both neighbours ran; synthetic-input models train toward
/// the true activation whenever their producer ran.
pub fn complete_unlock_step(
    net: &mut FfNetwork,
    x: &Tensor,
    labels: &[usize],
    sched: &mut UpdateScheduler,
) -> Result<TrainStepReport> {
    let batch = check_batch(x, labels)?;
    let c = cond(net, labels);
    let top = net.layers() - 1;
    if net.sgs.iter().any(Option::is_none) || net.synth_inputs.iter().any(Option::is_none) {
        return Err(Error::Config(
            "complete unlock needs synthetic-gradient and synthetic-input models at every interface".into(),
        ));
    }
    let mut report = TrainStepReport::new(net.layers());
    let active: Vec<bool> = (0..net.layers()).map(|_| sched.rng.bernoulli(sched.p_update)).collect();
    let mut below: Option<Tensor> = None;
    for i in 0..net.layers() {
        if !active[i] {
            below = None;
            continue;
        }
        let input = match (i, below.take()) {
            (0, _) => x.clone(),
            (_, Some(h)) => h,
            (_, None) => net.synth_inputs[i - 1]
                .as_mut()
                .expect("checked")
                .predict(x, BnMode::Train)?,
        };
        let (h, cache) = net.blocks[i].forward(&input, BnMode::Train)?;
        let signal = if i == top {
            let (loss, d) = softmax_xent(&h, labels)?;
            report.task_loss = Some(loss);
            d
        } else {
            let sg = net.sgs[i].as_mut().expect("checked");
            sg.predict(&h, c, BnMode::Train)?.scale(1.0 / batch)
        };
        let (dx, g) = net.blocks[i].backward(&cache, &signal)?;
        net.blocks[i].apply(&g)?;
        report.updated[i] = true;
        if i > 0 && active[i - 1] {
            let sg = net.sgs[i - 1].as_mut().expect("checked");
            report.sg_losses[i - 1] = Some(sg.update(&input, c, &dx.scale(batch))?.loss);
        }
        if i < top {
            let si = net.synth_inputs[i].as_mut().expect("checked");
            report.input_losses[i] = Some(si.update(x, &h)?);
        }
        below = Some(h);
    }
    Ok(report)
}

/// Decoupled training where each interface consumes an exponential average
/// of earlier true gradients instead of a synthetic one. The average is
/// refreshed with this step's true gradients after the updates.
pub fn stale_gradient_step(
    net: &mut FfNetwork,
    x: &Tensor,
    labels: &[usize],
    cache: &mut StaleGradientCache,
) -> Result<TrainStepReport> {
    check_batch(x, labels)?;
    let top = net.layers() - 1;
    if cache.ema.len() != top {
        return Err(Error::Config(format!(
            "stale cache covers {} interfaces, network has {top}",
            cache.ema.len()
        )));
    }
    let mut report = TrainStepReport::new(net.layers());
    let fwd = forward_all(net, x)?;
    let (loss, d_top) = softmax_xent(&fwd.hs[top], labels)?;
    report.task_loss = Some(loss);
    // true gradients from the forward-time weights
    let mut truth = vec![Tensor::zeros(&[0]); top];
    let mut d = d_top.clone();
    for i in (0..net.layers()).rev() {
        if i < top {
            truth[i] = d.clone();
        }
        if i > 0 {
            d = net.blocks[i].backward(&fwd.caches[i], &d)?.0;
        }
    }
    let modules = net.modules();
    let mut all = Vec::new();
    for &(a, b) in &modules {
        let signal = if b == top {
            d_top.clone()
        } else {
            cache.ema[b].clone().unwrap_or_else(|| Tensor::zeros_like(&fwd.hs[b]))
        };
        let (_, grads) = local_backward(net, &fwd.caches[a..=b], a, b, signal)?;
        all.push((a, grads));
    }
    for (a, grads) in all {
        apply_range(net, a, &grads, &mut report)?;
    }
    for &(_, b) in &modules {
        if b < top {
            cache.refresh(b, &truth[b])?;
        }
    }
    Ok(report)
}
