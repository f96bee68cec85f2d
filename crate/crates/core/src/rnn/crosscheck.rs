//! Runs the window trainer and the recurrent BP(λ) fold with `λ_k = 0` at
//! every window boundary on the same fixture and compares their parameter
//! gradients window by window.

use serde::{Deserialize, Serialize};

use super::window::{apply_grads, window_grads, RnnGrads, RnnModel, TbpttConfig, WindowState};
use crate::bp_lambda::{recurrent_fold, unrolled_target, LambdaSchedule};
use crate::error::Result;
use crate::layers::{sigmoid_bce, BnMode, LstmCache, LstmGrads, LinearGrads};
use crate::numerics::{AdamConfig, RngState, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixtureShape {
    pub t: usize,
    pub windows: usize,
    pub in_dim: usize,
    pub units: usize,
    pub out_dim: usize,
    pub batch: usize,
}

/// Largest absolute difference per parameter group in one window.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowDiff {
    pub core: f64,
    pub readout: f64,
    /// `None` in the first window, which has no pending prediction.
    pub sg: Option<f64>,
}

pub struct Fixture {
    pub cfg: TbpttConfig,
    pub model: RnnModel,
    pub xs: Vec<Tensor>,
    pub ys: Vec<Tensor>,
    pub ws: Vec<Vec<f64>>,
}

/// Learning rate 0, hand-set non-zero synthetic-gradient weights.
pub fn fixture(shape: FixtureShape, seed: u64) -> Fixture {
    let cfg = TbpttConfig::new(shape.t, true, false);
    let mut rng = RngState::new(seed);
    let mut model = RnnModel::new(shape.in_dim, shape.units, shape.out_dim, &cfg, &mut rng, AdamConfig::with_lr(0.0));
    let sg = model.sg.as_mut().expect("dni enabled");
    for p in sg.regressor_mut().net_mut().params_mut() {
        *p = rng.uniform_tensor(p.shape(), -0.4, 0.4);
    }
    let n = shape.t * shape.windows;
    let xs = (0..n).map(|_| rng.uniform_tensor(&[shape.batch, shape.in_dim], -1.0, 1.0)).collect();
    let ys = (0..n)
        .map(|_| rng.uniform_tensor(&[shape.batch, shape.out_dim], 0.0, 1.0).map(|v| v.round()))
        .collect();
    let ws = (0..n)
        .map(|_| (0..shape.batch).map(|_| if rng.bernoulli(0.7) { 1.0 } else { 0.0 }).collect())
        .collect();
    Fixture { cfg, model, xs, ys, ws }
}

/// Per-window gradients from the window trainer.
pub fn trainer_route(f: &Fixture) -> Result<Vec<RnnGrads>> {
    let mut model = f.model.clone();
    let b = f.xs[0].rows();
    let mut st = WindowState::new(b, model.units());
    let t = f.cfg.t;
    let mut out = Vec::new();
    for w in 0..f.xs.len() / t {
        let r = w * t..(w + 1) * t;
        let (_, g) = window_grads(&mut model, &f.cfg, &mut st, &f.xs[r.clone()], &f.ys[r.clone()], &f.ws[r])?;
        apply_grads(&mut model, &g)?;
        out.push(g);
    }
    Ok(out)
}

fn max_abs(pairs: &[(&Tensor, &Tensor)]) -> Result<f64> {
    pairs
        .iter()
        .try_fold(0.0f64, |m, (a, b)| Ok(m.max(a.max_abs_diff(b)?)))
}

/// Per-window gradients from the recurrent fold over the state `[h; c]`,
/// position `j` being the state after step `j`.
pub fn fold_route(f: &Fixture) -> Result<Vec<RnnGrads>> {
    let mut m = f.model.clone();
    let (t, n) = (f.cfg.t, f.xs.len());
    let b = f.xs[0].rows();
    let bf = b as f64;
    let u = m.units();
    let (mut h, mut c) = m.core.zero_state(b);
    let mut hs = vec![h.clone()];
    let mut caches: Vec<LstmCache> = Vec::with_capacity(n);
    let mut dlogits = Vec::with_capacity(n);
    for j in 0..n {
        let (hn, cn, cache) = m.core.step(&f.xs[j], &h, &c)?;
        let (logits, _) = m.readout.forward(&hn)?;
        dlogits.push(sigmoid_bce(&logits, &f.ys[j], &f.ws[j])?.1);
        caches.push(cache);
        hs.push(hn.clone());
        h = hn;
        c = cn;
    }
    let zero_c = Tensor::zeros(&[b, u]);
    let mut dl = vec![Tensor::zeros(&[b, 2 * u])];
    for j in 1..=n {
        dl.push(m.readout.input_grad(&dlogits[j - 1])?.hcat(&zero_c)?);
    }
    let sg = m.sg.as_mut().expect("dni enabled");
    let mut preds = vec![None; n + 1];
    for w in 1..=n / t {
        preds[w * t] = Some(sg.predict(&hs[w * t], None, BnMode::Train)?);
    }
    let core = &m.core;
    let jvp = |j: usize, g: &Tensor| -> Result<Tensor> {
        let (gh, gc) = g.split_cols(u)?;
        let (a, bb) = core.backward_state(&caches[j], &gh, &gc)?;
        a.hcat(&bb)
    };
    let schedule = LambdaSchedule::ZeroEvery(t);
    let scale = f.cfg.sg_scale;
    let consumed = recurrent_fold(
        n + 1,
        &schedule,
        None,
        |j| Ok(dl[j].clone()),
        |j, g| jvp(j, g),
        |j| {
            Ok(Some(match &preds[j] {
                Some(p) => p.scale(scale / bf),
                None => Tensor::zeros(&[b, 2 * u]),
            }))
        },
    )?;

    let mut out = Vec::new();
    for w in 0..n / t {
        let mut gc = LstmGrads::zeros_for(core);
        let mut gr = LinearGrads::zeros_for(&m.readout);
        for j in w * t + 1..=(w + 1) * t {
            let (gh, gcc) = consumed[j].split_cols(u)?;
            gc.add_assign(&core.backward(&caches[j - 1], &gh, &gcc)?.params)?;
            let (_, rc) = m.readout.forward(&hs[j])?;
            gr.add_assign(&m.readout.param_grads(&rc, &dlogits[j - 1])?)?;
        }
        let sg_g = if w == 0 {
            None
        } else {
            let start = w * t;
            let target = unrolled_target(&consumed[start + 1], |g| jvp(start, g))?.scale(bf);
            let mut probe = m.sg.clone().expect("dni enabled");
            Some(probe.grads(&hs[start], None, &target)?.2)
        };
        out.push(RnnGrads {
            core: gc,
            readout: gr,
            sg: sg_g,
            aux: None,
        });
    }
    Ok(out)
}

pub fn compare(a: &[RnnGrads], b: &[RnnGrads]) -> Result<Vec<WindowDiff>> {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let core = max_abs(&[(&x.core.dwx, &y.core.dwx), (&x.core.dwh, &y.core.dwh), (&x.core.db, &y.core.db)])?;
            let readout = max_abs(&[(&x.readout.dw, &y.readout.dw), (&x.readout.db, &y.readout.db)])?;
            let sg = match (&x.sg, &y.sg) {
                (Some(p), Some(q)) => {
                    let pairs: Vec<_> = p.tensors().into_iter().zip(q.tensors()).collect();
                    Some(max_abs(&pairs)?)
                }
                (None, None) => None,
                _ => Some(f64::INFINITY),
            };
            Ok(WindowDiff { core, readout, sg })
        })
        .collect()
}

pub fn bp_lambda_crosscheck(shape: FixtureShape, seed: u64) -> Result<Vec<WindowDiff>> {
    let f = fixture(shape, seed);
    compare(&trainer_route(&f)?, &fold_route(&f)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn routes_agree() {
        let shape = FixtureShape {
            t: 3,
            windows: 3,
            in_dim: 4,
            units: 5,
            out_dim: 3,
            batch: 4,
        };
        let diffs = bp_lambda_crosscheck(shape, 1).unwrap();
        assert_eq!(diffs.len(), 3);
        assert!(diffs[0].sg.is_none());
        for d in &diffs {
            assert!(d.core < 1e-10 && d.readout < 1e-10, "{d:?}");
        }
        assert!(diffs[1].sg.unwrap() < 1e-10 && diffs[2].sg.unwrap() < 1e-10, "{diffs:?}");
    }
}
