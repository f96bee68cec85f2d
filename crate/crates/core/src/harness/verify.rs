use serde::Serialize;

use super::checkpoint::{decode, encode, Checkpoint};
use super::config::{BpLambdaCheckConfig, Experiment, ExperimentConfig};
use super::run::{Data, TrainerState};
use crate::bp_lambda::{geometric_weights, mix_step, LambdaSchedule};
use crate::error::Result;
use crate::ff::{backprop_step, bp_lambda_step, dni_step, FfNetwork, FfSpec, Placement};
use crate::layers::fault::with_corrupted_linear_backward;
use crate::layers::{
    relu_backward, relu_forward, sigmoid_bce, softmax_xent, standardize_backward, standardize_forward,
    BatchNormLayer, BnMode, Init, LinearLayer, LstmCore,
};
use crate::numerics::{adam_step, finite_diff_grad, max_relative_error, AdamConfig, AdamState, RngState, Tensor};
use crate::rnn::crosscheck::{bp_lambda_crosscheck, FixtureShape};
use crate::synthetic::{SgConfig, SgModel, SyntheticInputModel};

const FD_TOL: f64 = 1e-4;
const FD_FLOOR: f64 = 1e-6;
const FD_H: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Linear layers return a wrong weight gradient.
    LinearBackward,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failed(&self) -> Vec<&'static str> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.name).collect()
    }
}

/// A check yields the measured error and the bound it must stay under.
type Check = fn() -> Result<(f64, f64)>;

const CHECKS: &[(&str, Check)] = &[
    ("adam_first_step_matches_reference", adam_first_step),
    ("linear_backward_fd", linear_backward),
    ("relu_backward_fd", relu_backward_fd),
    ("batchnorm_backward_fd", batchnorm_backward),
    ("standardize_backward_fd", standardize_backward_fd),
    ("softmax_xent_grad_fd", softmax_xent_grad),
    ("sigmoid_bce_grad_fd", sigmoid_bce_grad),
    ("lstm_step_backward_fd", lstm_step_backward),
    ("lstm_unroll_bptt_fd", lstm_unroll_bptt),
    ("sg_models_start_at_zero", sg_zero_init),
    ("sg_regression_grad_fd", sg_regression_grad),
    ("bp_lambda_one_equals_backprop", bp_one_equals_backprop),
    ("first_dni_step_updates_top_only", first_dni_step_top_only),
    ("geometric_weights_on_simplex", geometric_simplex),
    ("oracle_sg_mixing_is_exact", oracle_mixing),
    ("recurrent_bp_lambda_matches_window_trainer", recurrent_crosscheck),
    ("checkpoint_round_trip", checkpoint_round_trip),
];

pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|(n, _)| *n).collect()
}

/// Runs the built-in invariant suite, optionally with a fault injected.
pub fn verify(fault: Option<Fault>) -> VerifyReport {
    let run_all = || {
        CHECKS
            .iter()
            .map(|(name, f)| match f() {
                Ok((err, bound)) => CheckResult {
                    name,
                    passed: err < bound,
                    detail: if bound == f64::MIN_POSITIVE {
                        format!("{err:.3e} (must be 0)")
                    } else {
                        format!("{err:.3e} (bound {bound:.0e})")
                    },
                },
                Err(e) => CheckResult {
                    name,
                    passed: false,
                    detail: format!("error: {e}"),
                },
            })
            .collect()
    };
    let checks = match fault {
        None => run_all(),
        Some(Fault::LinearBackward) => with_corrupted_linear_backward(run_all),
    };
    VerifyReport { checks }
}

fn fd(analytic: &Tensor, f: impl FnMut(&Tensor) -> f64, x: &Tensor) -> f64 {
    max_relative_error(analytic, &finite_diff_grad(f, x, FD_H), FD_FLOOR)
}

fn probe(y: &Tensor, p: &Tensor) -> f64 {
    y.dot(p).expect("probe shapes")
}

fn adam_first_step() -> Result<(f64, f64)> {
    let cfg = AdamConfig::default();
    let p0 = Tensor::vector(vec![1.0, -2.0, 0.5, 0.0]);
    let g = Tensor::vector(vec![0.1, -0.3, 1e-9, 2.0]);
    let mut p = p0.clone();
    adam_step(&mut p, &g, &mut AdamState::new(&[4], cfg))?;
    let mut err: f64 = 0.0;
    for j in 0..4 {
        let m = (1.0 - cfg.beta1) * g.data()[j] / (1.0 - cfg.beta1);
        let v = (1.0 - cfg.beta2) * g.data()[j].powi(2) / (1.0 - cfg.beta2);
        let want = p0.data()[j] - cfg.lr * m / (v.sqrt() + cfg.eps);
        err = err.max((p.data()[j] - want).abs());
    }
    Ok((err, 1e-15))
}

fn linear_backward() -> Result<(f64, f64)> {
    let mut rng = RngState::new(11);
    let layer = LinearLayer::new(4, 3, Init::Uniform(0.7), &mut rng, AdamConfig::default());
    let x = rng.uniform_tensor(&[5, 4], -1.0, 1.0);
    let p = rng.uniform_tensor(&[5, 3], -1.0, 1.0);
    let (_, cache) = layer.forward(&x)?;
    let (dx, g) = layer.backward(&cache, &p)?;
    let ex = fd(&dx, |x| probe(&layer.forward(x).unwrap().0, &p), &x);
    let ew = fd(
        &g.dw,
        |w| {
            let mut l = layer.clone();
            l.weight.value = w.clone();
            probe(&l.forward(&x).unwrap().0, &p)
        },
        &layer.weight.value,
    );
    let eb = fd(
        &g.db,
        |b| {
            let mut l = layer.clone();
            l.bias.value = b.clone();
            probe(&l.forward(&x).unwrap().0, &p)
        },
        &layer.bias.value,
    );
    Ok((ex.max(ew).max(eb), FD_TOL))
}

fn relu_backward_fd() -> Result<(f64, f64)> {
    let mut rng = RngState::new(12);
    // keep inputs away from the kink
    let x = rng.uniform_tensor(&[4, 5], 0.1, 1.0).zip_map(&rng.uniform_tensor(&[4, 5], -1.0, 1.0), |a, s| a * s.signum())?;
    let p = rng.uniform_tensor(&[4, 5], -1.0, 1.0);
    let (_, cache) = relu_forward(&x);
    let dx = relu_backward(&cache, &p)?;
    Ok((fd(&dx, |x| probe(&relu_forward(x).0, &p), &x), FD_TOL))
}

fn batchnorm_backward() -> Result<(f64, f64)> {
    let mut rng = RngState::new(13);
    let mut bn = BatchNormLayer::new(3, AdamConfig::default());
    bn.gamma.value = rng.uniform_tensor(&[3], 0.5, 1.5);
    bn.beta.value = rng.uniform_tensor(&[3], -0.5, 0.5);
    let x = rng.uniform_tensor(&[6, 3], -2.0, 2.0);
    let p = rng.uniform_tensor(&[6, 3], -1.0, 1.0);
    let (_, cache) = bn.forward(&x, BnMode::Train)?;
    let (dx, g) = bn.backward(&cache, &p)?;
    let out = |bn: &BatchNormLayer, x: &Tensor| probe(&bn.clone().forward(x, BnMode::Train).unwrap().0, &p);
    let ex = fd(&dx, |x| out(&bn, x), &x);
    let eg = fd(
        &g.dgamma,
        |gm| {
            let mut b = bn.clone();
            b.gamma.value = gm.clone();
            out(&b, &x)
        },
        &bn.gamma.value,
    );
    Ok((ex.max(eg), FD_TOL))
}

fn standardize_backward_fd() -> Result<(f64, f64)> {
    let mut rng = RngState::new(14);
    let x = rng.uniform_tensor(&[3, 6], -2.0, 2.0);
    let p = rng.uniform_tensor(&[3, 6], -1.0, 1.0);
    let (_, cache) = standardize_forward(&x);
    let dx = standardize_backward(&cache, &p)?;
    Ok((fd(&dx, |x| probe(&standardize_forward(x).0, &p), &x), FD_TOL))
}

fn softmax_xent_grad() -> Result<(f64, f64)> {
    let mut rng = RngState::new(15);
    let z = rng.uniform_tensor(&[4, 5], -2.0, 2.0);
    let labels = [0, 3, 4, 1];
    let (_, g) = softmax_xent(&z, &labels)?;
    Ok((fd(&g, |z| softmax_xent(z, &labels).unwrap().0, &z), FD_TOL))
}

fn sigmoid_bce_grad() -> Result<(f64, f64)> {
    let mut rng = RngState::new(16);
    let z = rng.uniform_tensor(&[3, 4], -3.0, 3.0);
    let y = rng.uniform_tensor(&[3, 4], 0.0, 1.0).map(|v| (v > 0.5) as u8 as f64);
    let w = [1.0, 0.0, 0.5];
    let (_, g) = sigmoid_bce(&z, &y, &w)?;
    Ok((fd(&g, |z| sigmoid_bce(z, &y, &w).unwrap().0, &z), FD_TOL))
}

fn lstm_step_backward() -> Result<(f64, f64)> {
    let mut rng = RngState::new(17);
    let core = LstmCore::new(3, 4, &mut rng, AdamConfig::default());
    let x = rng.uniform_tensor(&[2, 3], -1.0, 1.0);
    let h = rng.uniform_tensor(&[2, 4], -1.0, 1.0);
    let c = rng.uniform_tensor(&[2, 4], -1.0, 1.0);
    let ph = rng.uniform_tensor(&[2, 4], -1.0, 1.0);
    let pc = rng.uniform_tensor(&[2, 4], -1.0, 1.0);
    let loss = |core: &LstmCore, x: &Tensor, h: &Tensor, c: &Tensor| {
        let (h2, c2, _) = core.step(x, h, c).unwrap();
        probe(&h2, &ph) + probe(&c2, &pc)
    };
    let (_, _, cache) = core.step(&x, &h, &c)?;
    let g = core.backward(&cache, &ph, &pc)?;
    let mut e = fd(&g.dx, |x| loss(&core, x, &h, &c), &x);
    e = e.max(fd(&g.dh_prev, |h| loss(&core, &x, h, &c), &h));
    e = e.max(fd(&g.dc_prev, |c| loss(&core, &x, &h, c), &c));
    e = e.max(fd(
        &g.params.dwx,
        |w| {
            let mut k = core.clone();
            k.wx.value = w.clone();
            loss(&k, &x, &h, &c)
        },
        &core.wx.value,
    ));
    Ok((e, FD_TOL))
}

fn lstm_unroll_bptt() -> Result<(f64, f64)> {
    let mut rng = RngState::new(18);
    let (t, b, i, u) = (4, 2, 3, 4);
    let core = LstmCore::new(i, u, &mut rng, AdamConfig::default());
    let xs: Vec<Tensor> = (0..t).map(|_| rng.uniform_tensor(&[b, i], -1.0, 1.0)).collect();
    let ps: Vec<Tensor> = (0..t).map(|_| rng.uniform_tensor(&[b, u], -1.0, 1.0)).collect();
    let loss = |core: &LstmCore| {
        let (mut h, mut c) = core.zero_state(b);
        let mut l = 0.0;
        for k in 0..t {
            let (h2, c2, _) = core.step(&xs[k], &h, &c).unwrap();
            l += probe(&h2, &ps[k]);
            (h, c) = (h2, c2);
        }
        l
    };
    let (mut h, mut c) = core.zero_state(b);
    let mut caches = Vec::with_capacity(t);
    for x in &xs {
        let (h2, c2, cache) = core.step(x, &h, &c)?;
        caches.push(cache);
        (h, c) = (h2, c2);
    }
    let mut dh = Tensor::zeros(&[b, u]);
    let mut dc = Tensor::zeros(&[b, u]);
    let mut dwh = Tensor::zeros_like(&core.wh.value);
    for k in (0..t).rev() {
        dh.add_assign(&ps[k])?;
        let g = core.backward(&caches[k], &dh, &dc)?;
        dwh.add_assign(&g.params.dwh)?;
        (dh, dc) = (g.dh_prev, g.dc_prev);
    }
    let e = fd(
        &dwh,
        |w| {
            let mut k = core.clone();
            k.wh.value = w.clone();
            loss(&k)
        },
        &core.wh.value,
    );
    Ok((e, FD_TOL))
}

fn sg_zero_init() -> Result<(f64, f64)> {
    let mut rng = RngState::new(19);
    let adam = AdamConfig::default();
    let h = rng.uniform_tensor(&[4, 6], -3.0, 3.0);
    let labels = [0, 1, 2, 1];
    let mut worst: f64 = 0.0;
    let mut dni = SgModel::new(6, 6, SgConfig::dni(8), &mut rng, adam);
    worst = worst.max(dni.predict(&h, None, BnMode::Train)?.max_abs());
    let mut cdni = SgModel::new(6, 6, SgConfig::cdni(3), &mut rng, adam);
    worst = worst.max(cdni.predict(&h, Some(&labels), BnMode::Train)?.max_abs());
    let lstm_cfg = SgConfig { batchnorm: false, hidden_layers: 1, ..SgConfig::dni(6) };
    let mut lstm = SgModel::for_lstm(6, lstm_cfg, &mut rng, adam);
    worst = worst.max(lstm.predict(&h, None, BnMode::Eval)?.max_abs());
    let mut inp = SyntheticInputModel::new(6, 5, SgConfig::dni(8), &mut rng, adam);
    worst = worst.max(inp.predict(&h, BnMode::Train)?.max_abs());
    // exactly zero, so any positive value fails
    Ok((worst, f64::MIN_POSITIVE))
}

fn sg_regression_grad() -> Result<(f64, f64)> {
    let mut rng = RngState::new(20);
    let cfg = SgConfig { batchnorm: false, ..SgConfig::dni(5) };
    let mut sg = SgModel::new(4, 4, cfg, &mut rng, AdamConfig::default());
    for p in sg.regressor_mut().net_mut().params_mut() {
        *p = rng.uniform_tensor(p.shape(), -0.5, 0.5);
    }
    let h = rng.uniform_tensor(&[3, 4], -1.0, 1.0);
    let target = rng.uniform_tensor(&[3, 4], -1.0, 1.0);
    let (_, dh, _) = sg.grads(&h, None, &target)?;
    let e = fd(&dh, |h| sg.clone().grads(h, None, &target).unwrap().0, &h);
    Ok((e, FD_TOL))
}

fn small_net(placement: Placement, seed: u64) -> Result<FfNetwork> {
    let mut spec = FfSpec::mnist(4, placement, SgConfig::dni(8));
    spec.input_dim = 6;
    spec.hidden = 5;
    spec.classes = 3;
    spec.adam = AdamConfig::with_lr(1e-2);
    FfNetwork::new(spec, &mut RngState::new(seed))
}

fn batch(rng: &mut RngState) -> (Tensor, Vec<usize>) {
    let x = rng.uniform_tensor(&[8, 6], -1.0, 1.0);
    let y = (0..8).map(|_| rng.below(3) as usize).collect();
    (x, y)
}

fn max_param_diff(a: &FfNetwork, b: &FfNetwork) -> Result<f64> {
    let mut d: f64 = 0.0;
    for (p, q) in a.trunk_params().into_iter().zip(b.trunk_params()) {
        d = d.max(p.max_abs_diff(q)?);
    }
    Ok(d)
}

fn bp_one_equals_backprop() -> Result<(f64, f64)> {
    let mut a = small_net(Placement::Every, 21)?;
    let mut b = a.clone();
    let mut rng = RngState::new(22);
    for _ in 0..10 {
        let (x, y) = batch(&mut rng);
        backprop_step(&mut a, &x, &y)?;
        bp_lambda_step(&mut b, &x, &y, &LambdaSchedule::Constant(1.0))?;
    }
    // bitwise equality expected; the bound only admits zero
    Ok((max_param_diff(&a, &b)?, f64::MIN_POSITIVE))
}

fn first_dni_step_top_only() -> Result<(f64, f64)> {
    let mut net = small_net(Placement::Every, 23)?;
    let before = net.clone();
    let (x, y) = batch(&mut RngState::new(24));
    dni_step(&mut net, &x, &y, false)?;
    let top = net.layers() - 1;
    let mut lower: f64 = 0.0;
    for i in 0..top {
        for (p, q) in net.blocks[i].params().into_iter().zip(before.blocks[i].params()) {
            lower = lower.max(p.max_abs_diff(q)?);
        }
    }
    let top_moved = net.blocks[top]
        .params()
        .into_iter()
        .zip(before.blocks[top].params())
        .any(|(p, q)| p != q);
    // a top layer that did not move counts as a failure too
    Ok((if top_moved { lower } else { f64::INFINITY }, f64::MIN_POSITIVE))
}

fn geometric_simplex() -> Result<(f64, f64)> {
    let mut rng = RngState::new(25);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let k = 1 + rng.below(8) as usize;
        let lambdas: Vec<f64> = (0..k).map(|_| rng.uniform()).collect();
        let w = geometric_weights(&lambdas)?;
        if w.iter().any(|&c| c < 0.0) {
            return Ok((f64::INFINITY, 1e-12));
        }
        worst = worst.max((w.iter().sum::<f64>() - 1.0).abs());
    }
    Ok((worst, 1e-12))
}

fn oracle_mixing() -> Result<(f64, f64)> {
    let mut rng = RngState::new(26);
    let (k, d) = (6, 4);
    let js: Vec<Tensor> = (0..k).map(|_| rng.uniform_tensor(&[d, d], -0.8, 0.8)).collect();
    let mut truth = vec![rng.uniform_tensor(&[1, d], -1.0, 1.0)];
    for j in js.iter().rev() {
        let next = truth.last().expect("seeded").matmul(&j.transpose())?;
        truth.push(next);
    }
    truth.reverse();
    // truth[i] is the true gradient at position i; truth[k] is the top one
    let mut g = truth[k].clone();
    let mut worst: f64 = 0.0;
    for i in (0..k).rev() {
        let lambda = rng.uniform();
        let j = &js[i];
        g = mix_step(&g, |g| g.matmul(&j.transpose()), Some(&truth[i]), lambda)?;
        worst = worst.max(g.max_abs_diff(&truth[i])?);
    }
    Ok((worst, 1e-12))
}

fn recurrent_crosscheck() -> Result<(f64, f64)> {
    let shape = FixtureShape {
        t: 3,
        windows: 3,
        in_dim: 3,
        units: 4,
        out_dim: 2,
        batch: 2,
    };
    let diffs = bp_lambda_crosscheck(shape, 27)?;
    let worst = diffs
        .iter()
        .map(|d| d.core.max(d.readout).max(d.sg.unwrap_or(0.0)))
        .fold(0.0, f64::max);
    Ok((worst, 1e-10))
}

fn checkpoint_round_trip() -> Result<(f64, f64)> {
    let config = ExperimentConfig {
        seed: 28,
        budget: 2,
        out_dir: "verify".into(),
        log_every: 1,
        checkpoint_every: 0,
        experiment: Experiment::BpLambdaCheck(BpLambdaCheckConfig {
            t: 2,
            windows: 2,
            units: 3,
            batch: 2,
            input_dim: 2,
            output_dim: 2,
        }),
    };
    let mut state = TrainerState::new(&config, &Data::None)?;
    state.step(&Data::None)?;
    let ck = Checkpoint { config, state };
    let back = decode(&encode(&ck)?)?;
    Ok((if back == ck { 0.0 } else { 1.0 }, 0.5))
}
