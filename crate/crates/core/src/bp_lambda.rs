//! Recursive mixing of backpropagated and synthetic gradients.
//!
//! With `J_k = ∂h_{k+1}/∂h_k` the estimators are
//!
//! ```text
//! ḡ_k = λ_k · ḡ_{k+1} J_k + (1 − λ_k) · g_k                 (chain)
//! ḡ_k = ∂l_k/∂h_k + λ_k · ḡ_{k+1} J_k + (1 − λ_k) · g_k     (recurrent)
//! ```
//!
//! where `g_k` is a synthetic gradient. λ = 1 everywhere is backprop; λ = 0
//! everywhere uses only the synthetic gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaSchedule {
    /// `λ_k` for each position `k`, counted from zero.
    Positions(Vec<f64>),
    /// `λ_k = 0` iff `k mod n == 0`, else 1: truncation every `n` steps.
    ZeroEvery(usize),
    Constant(f64),
}

impl LambdaSchedule {
    pub fn validate(&self) -> Result<()> {
        match self {
            LambdaSchedule::Positions(v) => v.iter().try_for_each(|&l| check_lambda(l)),
            LambdaSchedule::ZeroEvery(0) => Err(Error::Config("truncation period must be positive".into())),
            LambdaSchedule::ZeroEvery(_) => Ok(()),
            LambdaSchedule::Constant(l) => check_lambda(*l),
        }
    }

    pub fn lambda(&self, k: usize) -> Result<f64> {
        let l = match self {
            LambdaSchedule::Positions(v) => *v.get(k).ok_or_else(|| {
                Error::Config(format!("no λ for position {k} (schedule has {})", v.len()))
            })?,
            LambdaSchedule::ZeroEvery(n) => {
                if *n == 0 {
                    return Err(Error::Config("truncation period must be positive".into()));
                }
                if k % n == 0 {
                    0.0
                } else {
                    1.0
                }
            }
            LambdaSchedule::Constant(l) => *l,
        };
        check_lambda(l)?;
        Ok(l)
    }
}

fn check_lambda(l: f64) -> Result<()> {
    if (0.0..=1.0).contains(&l) {
        Ok(())
    } else {
        Err(Error::Lambda(l))
    }
}

/// One step of the chain recursion.
///
/// `jvp_back` maps `ḡ_{k+1}` to `ḡ_{k+1} J_k` and is only called when
/// `λ_k > 0`; `g_synth` is only read when `λ_k < 1`. At λ = 1 the result is
/// exactly `jvp_back(ḡ_{k+1})`, with no extra arithmetic.
pub fn mix_step(
    g_next: &Tensor,
    jvp_back: impl FnOnce(&Tensor) -> Result<Tensor>,
    g_synth: Option<&Tensor>,
    lambda: f64,
) -> Result<Tensor> {
    check_lambda(lambda)?;
    let synth = || {
        g_synth.ok_or_else(|| Error::Config(format!("λ = {lambda} needs a synthetic gradient")))
    };
    if lambda == 1.0 {
        return jvp_back(g_next);
    }
    if lambda == 0.0 {
        return Ok(synth()?.clone());
    }
    let back = jvp_back(g_next)?;
    let mut out = synth()?.scale(1.0 - lambda);
    out.axpy(lambda, &back)?;
    Ok(out)
}

/// `z̄_k = ḡ_{k+1} J_k`, detached for use as a regression target.
pub fn unrolled_target(g_next: &Tensor, jvp_back: impl FnOnce(&Tensor) -> Result<Tensor>) -> Result<Tensor> {
    jvp_back(g_next)
}

/// One step of the recurrent recursion: the immediate loss gradient plus
/// [`mix_step`].
pub fn recurrent_mix_step(
    dl_k: &Tensor,
    g_next: &Tensor,
    jvp_back: impl FnOnce(&Tensor) -> Result<Tensor>,
    g_synth: Option<&Tensor>,
    lambda: f64,
) -> Result<Tensor> {
    let mut g = mix_step(g_next, jvp_back, g_synth, lambda)?;
    if !g.same_shape(dl_k) {
        return Err(Error::shape(
            "recurrent_mix_step",
            format!("loss gradient {:?} vs mixed {:?}", dl_k.shape(), g.shape()),
        ));
    }
    g.add_assign(dl_k)?;
    Ok(g)
}

/// Weights of the geometric mixture that the chain recursion expands to.
///
/// For `lambdas = (λ_k, …, λ_{K−1})` returns `(c^k, …, c^K)` with
/// `c^n = (1 − λ_n) ∏_{j=k}^{n−1} λ_j` for `n < K` and `c^K = 1 − Σ_{n<K} c^n`,
/// the weight on the true gradient at the top of the chain.
pub fn geometric_weights(lambdas: &[f64]) -> Result<Vec<f64>> {
    lambdas.iter().try_for_each(|&l| check_lambda(l))?;
    let mut out = Vec::with_capacity(lambdas.len() + 1);
    let mut prod = 1.0;
    let mut sum = 0.0;
    for &l in lambdas {
        let c = (1.0 - l) * prod;
        out.push(c);
        sum += c;
        prod *= l;
    }
    // 1 − Σ equals the product of all λ; rounding can push it a hair below 0.
    out.push((1.0 - sum).max(0.0));
    Ok(out)
}

/// Runs the recurrent recursion over `n` positions, from the last back to the
/// first, and returns every `ḡ_k`.
///
/// `dl(k)` is the immediate loss gradient, `jvp(k, g)` maps `ḡ_{k+1}` to
/// `ḡ_{k+1} J_k`, and `synth(k)` supplies `g_k`. The position after the last
/// one contributes nothing unless `tail` is given, in which case it is used as
/// `ḡ_n`.
pub fn recurrent_fold(
    n: usize,
    schedule: &LambdaSchedule,
    tail: Option<Tensor>,
    mut dl: impl FnMut(usize) -> Result<Tensor>,
    mut jvp: impl FnMut(usize, &Tensor) -> Result<Tensor>,
    mut synth: impl FnMut(usize) -> Result<Option<Tensor>>,
) -> Result<Vec<Tensor>> {
    let mut out: Vec<Tensor> = Vec::with_capacity(n);
    let mut next = tail;
    for k in (0..n).rev() {
        let dl_k = dl(k)?;
        let lambda = schedule.lambda(k)?;
        let g_synth = if lambda < 1.0 { synth(k)? } else { None };
        let g = match &next {
            Some(g_next) => recurrent_mix_step(&dl_k, g_next, |g| jvp(k, g), g_synth.as_ref(), lambda)?,
            None => {
                // Nothing flows back from beyond the sequence.
                let zero = Tensor::zeros_like(&dl_k);
                let mut g = mix_step(&zero, |z| Ok(z.clone()), g_synth.as_ref(), lambda)?;
                g.add_assign(&dl_k)?;
                g
            }
        };
        next = Some(g.clone());
        out.push(g);
    }
    out.reverse();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: f64) -> Tensor {
        Tensor::vector(vec![v])
    }

    #[test]
    fn lambda_one_is_backprop_and_zero_is_synthetic() {
        let g = mix_step(&s(2.0), |g| Ok(g.scale(3.0)), Some(&s(-7.0)), 1.0).unwrap();
        assert_eq!(g.data(), &[6.0]);
        let g = mix_step(&s(2.0), |_| panic!("not called"), Some(&s(-7.0)), 0.0).unwrap();
        assert_eq!(g.data(), &[-7.0]);
    }

    #[test]
    fn out_of_range_lambda_is_rejected() {
        assert!(matches!(
            mix_step(&s(1.0), |g| Ok(g.clone()), Some(&s(1.0)), 1.5),
            Err(Error::Lambda(_))
        ));
        assert!(LambdaSchedule::Positions(vec![0.2, -0.1]).validate().is_err());
    }

    #[test]
    fn three_interface_scalar_chain_by_hand() {
        // h1 → h2 → h3 with J1 = a, J2 = b; true gradient at h3 is t.
        // ḡ2 = λ2 (t b) + (1 − λ2) g2,  ḡ1 = λ1 (ḡ2 a) + (1 − λ1) g1
        let (a, b, t, g1, g2) = (2.0, -3.0, 0.5, 1.25, -4.0);
        let (l1, l2) = (0.5, 1.0);
        let gb2 = mix_step(&s(t), |g| Ok(g.scale(b)), Some(&s(g2)), l2).unwrap();
        let gb1 = mix_step(&gb2, |g| Ok(g.scale(a)), Some(&s(g1)), l1).unwrap();
        let hand = l1 * (l2 * t * b + (1.0 - l2) * g2) * a + (1.0 - l1) * g1;
        assert!((gb1.data()[0] - hand).abs() < 1e-15);
    }

    #[test]
    fn hand_weights() {
        let w = geometric_weights(&[0.5, 0.5]).unwrap();
        assert_eq!(w, vec![0.5, 0.25, 0.25]);
        assert_eq!(geometric_weights(&[1.0, 1.0, 1.0]).unwrap(), vec![0.0, 0.0, 0.0, 1.0]);
        assert_eq!(geometric_weights(&[0.0, 0.0]).unwrap(), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn unrolled_target_of_zero_is_zero() {
        let z = unrolled_target(&Tensor::zeros(&[2, 3]), |g| Ok(g.scale(5.0))).unwrap();
        assert_eq!(z, Tensor::zeros(&[2, 3]));
    }

    #[test]
    fn zero_every_rule() {
        let sch = LambdaSchedule::ZeroEvery(3);
        let v: Vec<f64> = (0..7).map(|k| sch.lambda(k).unwrap()).collect();
        assert_eq!(v, vec![0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn two_step_scalar_rnn_by_hand() {
        // h_{k+1} = w h_k + x_k, l_k = ½ (h_k − y_k)², λ = (0, 1), g_0 synthetic
        let (w, h, y, g0) = ([0.0, 0.7], [0.3, -1.1], [1.0, 0.5], 2.5);
        let out = recurrent_fold(
            2,
            &LambdaSchedule::Positions(vec![0.0, 1.0]),
            None,
            |k| Ok(s(h[k] - y[k])),
            |k, g| Ok(g.scale(w[k + 1])),
            |_| Ok(Some(s(g0))),
        )
        .unwrap();
        let g1 = h[1] - y[1];
        let g0_mixed = (h[0] - y[0]) + g0;
        assert_eq!(out[1].data()[0], g1);
        assert!((out[0].data()[0] - g0_mixed).abs() < 1e-15);
    }

    #[test]
    fn zero_losses_reduce_to_mix_step() {
        let a = recurrent_mix_step(&s(0.0), &s(3.0), |g| Ok(g.scale(2.0)), Some(&s(1.0)), 0.25).unwrap();
        let b = mix_step(&s(3.0), |g| Ok(g.scale(2.0)), Some(&s(1.0)), 0.25).unwrap();
        assert_eq!(a, b);
    }
}
