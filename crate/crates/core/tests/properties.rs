use dni::bp_lambda::{geometric_weights, mix_step};
use dni::ff::gradient_diagnostics;
use dni::layers::{relu_backward, relu_forward, BatchNormLayer, BnMode, Init, LinearLayer, LstmCore};
use dni::multinet::stream_labels;
use dni::numerics::{adam_step, finite_diff_grad, max_relative_error, AdamConfig, AdamState, RngState, Tensor};
use dni::synthetic::{Conditioning, SgConfig, SgModel, SyntheticInputModel};
use dni::tasks::{bits_error, gen_copy, gen_repeat_copy, Curriculum, TaskKind};
use proptest::prelude::*;

const FD_H: f64 = 1e-5;
const FD_FLOOR: f64 = 1e-6;
const FD_TOL: f64 = 1e-4;

fn probe(y: &Tensor, p: &Tensor) -> f64 {
    y.dot(p).unwrap()
}

proptest! {
    #[test]
    fn matmul_is_associative(seed in any::<u64>(), m in 1usize..7, k in 1usize..7, n in 1usize..7, p in 1usize..7) {
        let mut rng = RngState::new(seed);
        let a = rng.uniform_tensor(&[m, k], -1.0, 1.0);
        let b = rng.uniform_tensor(&[k, n], -1.0, 1.0);
        let c = rng.uniform_tensor(&[n, p], -1.0, 1.0);
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        prop_assert!(max_relative_error(&left, &right, 1.0) < 1e-9);
    }

    #[test]
    fn tensor_ops_keep_finite_values(seed in any::<u64>(), r in 1usize..6, c in 1usize..6, s in -1e3f64..1e3) {
        let mut rng = RngState::new(seed);
        let a = rng.uniform_tensor(&[r, c], -10.0, 10.0);
        let b = rng.uniform_tensor(&[r, c], -10.0, 10.0);
        prop_assert_eq!(a.len(), r * c);
        for t in [a.add(&b).unwrap(), a.sub(&b).unwrap(), a.mul(&b).unwrap(), a.scale(s), a.transpose(), a.matmul(&b.transpose()).unwrap()] {
            prop_assert!(t.is_finite());
            prop_assert_eq!(t.len(), t.shape().iter().product::<usize>());
        }
        let (l, rr) = a.hcat(&b).unwrap().split_cols(c).unwrap();
        prop_assert_eq!((l, rr), (a, b));
    }

    #[test]
    fn one_hot_rows_have_a_single_one(labels in prop::collection::vec(0usize..7, 1..20)) {
        let t = Tensor::one_hot(&labels, 7).unwrap();
        for (r, &l) in labels.iter().enumerate() {
            prop_assert_eq!(t.row(r).iter().sum::<f64>(), 1.0);
            prop_assert_eq!(t.get(r, l), 1.0);
        }
    }

    #[test]
    fn adam_with_zero_lr_is_identity(seed in any::<u64>(), n in 1usize..10, steps in 1usize..5) {
        let mut rng = RngState::new(seed);
        let p0 = rng.uniform_tensor(&[n], -5.0, 5.0);
        let mut p = p0.clone();
        let mut st = AdamState::new(&[n], AdamConfig::with_lr(0.0));
        for _ in 0..steps {
            adam_step(&mut p, &rng.uniform_tensor(&[n], -5.0, 5.0), &mut st).unwrap();
        }
        prop_assert_eq!(p, p0);
    }

    #[test]
    fn adam_moves_against_the_gradient_sign(seed in any::<u64>(), n in 1usize..10) {
        let mut rng = RngState::new(seed);
        let p0 = rng.uniform_tensor(&[n], -1.0, 1.0);
        let g = rng.uniform_tensor(&[n], -1.0, 1.0);
        let mut p = p0.clone();
        adam_step(&mut p, &g, &mut AdamState::new(&[n], AdamConfig::default())).unwrap();
        for j in 0..n {
            let step = p.data()[j] - p0.data()[j];
            prop_assert!(step * g.data()[j] <= 0.0);
            // a first Adam step never exceeds the learning rate in size
            prop_assert!(step.abs() <= AdamConfig::default().lr * (1.0 + 1e-12));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn equal_seeds_give_equal_streams(seed in any::<u64>()) {
        let mut a = RngState::new(seed);
        let mut b = RngState::new(seed);
        for _ in 0..10_000 {
            prop_assert_eq!(a.next_u64(), b.next_u64());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn linear_backward_matches_finite_differences(seed in any::<u64>(), b in 1usize..6, i in 1usize..9, o in 1usize..9) {
        let mut rng = RngState::new(seed);
        let layer = LinearLayer::new(i, o, Init::Uniform(1.0), &mut rng, AdamConfig::default());
        let x = rng.uniform_tensor(&[b, i], -1.0, 1.0);
        let p = rng.uniform_tensor(&[b, o], -1.0, 1.0);
        let (_, cache) = layer.forward(&x).unwrap();
        let (dx, g) = layer.backward(&cache, &p).unwrap();
        let nx = finite_diff_grad(|x| probe(&layer.forward(x).unwrap().0, &p), &x, FD_H);
        prop_assert!(max_relative_error(&dx, &nx, FD_FLOOR) < FD_TOL);
        let w = layer.params()[0].clone();
        let nw = finite_diff_grad(|w| {
            let mut l = layer.clone();
            *l.params_mut()[0] = w.clone();
            probe(&l.forward(&x).unwrap().0, &p)
        }, &w, FD_H);
        prop_assert!(max_relative_error(&g.dw, &nw, FD_FLOOR) < FD_TOL);
    }

    #[test]
    fn relu_backward_matches_finite_differences(seed in any::<u64>(), b in 1usize..6, f in 1usize..9) {
        let mut rng = RngState::new(seed);
        // keep inputs away from the kink
        let x = rng.uniform_tensor(&[b, f], -1.0, 1.0).map(|v| if v.abs() < 1e-3 { 0.5 } else { v });
        let p = rng.uniform_tensor(&[b, f], -1.0, 1.0);
        let (_, cache) = relu_forward(&x);
        let dx = relu_backward(&cache, &p).unwrap();
        let nx = finite_diff_grad(|x| probe(&relu_forward(x).0, &p), &x, FD_H);
        prop_assert!(max_relative_error(&dx, &nx, FD_FLOOR) < FD_TOL);
    }

    #[test]
    fn batchnorm_backward_matches_finite_differences(seed in any::<u64>(), b in 2usize..7, f in 1usize..9) {
        let mut rng = RngState::new(seed);
        let mut bn = BatchNormLayer::new(f, AdamConfig::default());
        *bn.params_mut()[0] = rng.uniform_tensor(&[f], 0.5, 1.5);
        *bn.params_mut()[1] = rng.uniform_tensor(&[f], -0.5, 0.5);
        let x = rng.uniform_tensor(&[b, f], -2.0, 2.0);
        let p = rng.uniform_tensor(&[b, f], -1.0, 1.0);
        let (y, cache) = bn.clone().forward(&x, BnMode::Train).unwrap();
        let (dx, g) = bn.backward(&cache, &p).unwrap();
        let nx = finite_diff_grad(|x| probe(&bn.clone().forward(x, BnMode::Train).unwrap().0, &p), &x, FD_H);
        prop_assert!(max_relative_error(&dx, &nx, FD_FLOOR) < FD_TOL);
        let gamma = bn.params()[0].clone();
        let ng = finite_diff_grad(|gm| {
            let mut l = bn.clone();
            *l.params_mut()[0] = gm.clone();
            probe(&l.forward(&x, BnMode::Train).unwrap().0, &p)
        }, &gamma, FD_H);
        prop_assert!(max_relative_error(&g.dgamma, &ng, FD_FLOOR) < FD_TOL);
        // (y − β)/γ has zero mean per feature
        for j in 0..f {
            let mean: f64 = (0..b).map(|r| (y.get(r, j) - bn.params()[1].data()[j]) / gamma.data()[j]).sum::<f64>() / b as f64;
            prop_assert!(mean.abs() < 1e-9);
        }
    }

    #[test]
    fn lstm_unroll_matches_finite_differences(seed in any::<u64>(), b in 1usize..4, i in 1usize..5, u in 1usize..6) {
        let steps = 5;
        let mut rng = RngState::new(seed);
        let core = LstmCore::new(i, u, &mut rng, AdamConfig::default());
        let xs: Vec<Tensor> = (0..steps).map(|_| rng.uniform_tensor(&[b, i], -1.0, 1.0)).collect();
        let ps: Vec<Tensor> = (0..steps).map(|_| rng.uniform_tensor(&[b, u], -1.0, 1.0)).collect();
        let loss = |core: &LstmCore| {
            let (mut h, mut c) = core.zero_state(b);
            let mut l = 0.0;
            for k in 0..steps {
                let (h2, c2, _) = core.step(&xs[k], &h, &c).unwrap();
                l += probe(&h2, &ps[k]);
                (h, c) = (h2, c2);
            }
            l
        };
        let (mut h, mut c) = core.zero_state(b);
        let mut caches = Vec::new();
        for x in &xs {
            let (h2, c2, cache) = core.step(x, &h, &c).unwrap();
            prop_assert!(h2.data().iter().all(|v| v.abs() < 1.0));
            prop_assert_eq!(h2.shape(), &[b, u]);
            prop_assert_eq!(c2.shape(), &[b, u]);
            caches.push(cache);
            (h, c) = (h2, c2);
        }
        let mut dh = Tensor::zeros(&[b, u]);
        let mut dc = Tensor::zeros(&[b, u]);
        let mut grads: Vec<Tensor> = core.params().into_iter().map(Tensor::zeros_like).collect();
        for k in (0..steps).rev() {
            dh.add_assign(&ps[k]).unwrap();
            let g = core.backward(&caches[k], &dh, &dc).unwrap();
            for (acc, d) in grads.iter_mut().zip([&g.params.dwx, &g.params.dwh, &g.params.db]) {
                acc.add_assign(d).unwrap();
            }
            (dh, dc) = (g.dh_prev, g.dc_prev);
        }
        for (which, analytic) in grads.iter().enumerate() {
            let at = core.params()[which].clone();
            let numeric = finite_diff_grad(|w| {
                let mut k = core.clone();
                *k.params_mut()[which] = w.clone();
                loss(&k)
            }, &at, FD_H);
            prop_assert!(max_relative_error(analytic, &numeric, FD_FLOOR) < FD_TOL, "param {}", which);
        }
    }
}

proptest! {
    #[test]
    fn fresh_sg_models_output_exact_zero(
        seed in any::<u64>(),
        b in 1usize..6,
        i in 1usize..9,
        o in 1usize..9,
        hidden in 0usize..3,
        bn in any::<bool>(),
        classes in prop::option::of(1usize..5),
    ) {
        let mut rng = RngState::new(seed);
        let cfg = SgConfig {
            hidden_layers: hidden,
            hidden_width: 6,
            batchnorm: bn,
            conditioning: classes.map_or(Conditioning::None, Conditioning::Label),
        };
        let mut sg = SgModel::new(i, o, cfg, &mut rng, AdamConfig::default());
        let h = rng.uniform_tensor(&[b.max(2), i], -100.0, 100.0);
        let labels: Option<Vec<usize>> = classes.map(|c| (0..b.max(2)).map(|_| rng.below(c as u64) as usize).collect());
        let out = sg.predict(&h, labels.as_deref(), BnMode::Train).unwrap();
        prop_assert_eq!(out.shape(), &[b.max(2), o]);
        prop_assert!(out.data().iter().all(|&v| v == 0.0));
        let mut si = SyntheticInputModel::new(i, o, cfg_without_labels(cfg), &mut rng, AdamConfig::default());
        prop_assert!(si.predict(&h, BnMode::Train).unwrap().data().iter().all(|&v| v == 0.0));
        let mut lstm = SgModel::for_lstm(i, cfg_without_labels(cfg), &mut rng, AdamConfig::default());
        prop_assert_eq!(lstm.output_dim(), 2 * i);
        prop_assert_eq!(lstm.predict(&h, None, BnMode::Train).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn constant_label_is_a_constant_extra_input(seed in any::<u64>(), label in 0usize..4, b in 1usize..6) {
        let mut rng = RngState::new(seed);
        let cfg = SgConfig { batchnorm: false, ..SgConfig::cdni(4) };
        let mut sg = SgModel::new(5, 3, cfg, &mut rng, AdamConfig::default());
        for p in sg.regressor_mut().net_mut().params_mut() {
            *p = rng.uniform_tensor(p.shape(), -1.0, 1.0);
        }
        let h = rng.uniform_tensor(&[b, 5], -1.0, 1.0);
        let labels = vec![label; b];
        let got = sg.predict(&h, Some(&labels), BnMode::Eval).unwrap();
        let extra = Tensor::one_hot(&labels, 4).unwrap();
        let want = sg.regressor_mut().net_mut().forward(&h.hcat(&extra).unwrap(), BnMode::Eval).unwrap().0;
        prop_assert_eq!(got, want);
    }

    #[test]
    fn geometric_weights_lie_on_the_simplex(lambdas in prop::collection::vec(0.0f64..=1.0, 0..9)) {
        let w = geometric_weights(&lambdas).unwrap();
        prop_assert_eq!(w.len(), lambdas.len() + 1);
        prop_assert!(w.iter().all(|&c| (0.0..=1.0).contains(&c)));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn oracle_synthetic_gradients_make_mixing_exact(seed in any::<u64>(), k in 1usize..7, d in 1usize..5, lambdas in prop::collection::vec(0.0f64..=1.0, 6)) {
        let mut rng = RngState::new(seed);
        let js: Vec<Tensor> = (0..k).map(|_| rng.uniform_tensor(&[d, d], -0.9, 0.9)).collect();
        // truth[i] = truth[i + 1]·J_i, truth[k] the top gradient
        let mut truth = vec![Tensor::zeros(&[2, d]); k + 1];
        truth[k] = rng.uniform_tensor(&[2, d], -1.0, 1.0);
        for i in (0..k).rev() {
            truth[i] = truth[i + 1].matmul(&js[i]).unwrap();
        }
        let mut g = truth[k].clone();
        for i in (0..k).rev() {
            g = mix_step(&g, |g| g.matmul(&js[i]), Some(&truth[i]), lambdas[i]).unwrap();
            prop_assert!(g.max_abs_diff(&truth[i]).unwrap() < 1e-12);
        }
    }

    #[test]
    fn mixing_endpoints_are_exact(seed in any::<u64>(), d in 1usize..5) {
        let mut rng = RngState::new(seed);
        let j = rng.uniform_tensor(&[d, d], -1.0, 1.0);
        let g = rng.uniform_tensor(&[3, d], -1.0, 1.0);
        let s = rng.uniform_tensor(&[3, d], -1.0, 1.0);
        prop_assert_eq!(mix_step(&g, |g| g.matmul(&j), Some(&s), 1.0).unwrap(), g.matmul(&j).unwrap());
        prop_assert_eq!(mix_step(&g, |g| g.matmul(&j), Some(&s), 0.0).unwrap(), s);
    }

    #[test]
    fn gradient_diagnostics_are_bounded(seed in any::<u64>(), r in 1usize..5, c in 1usize..6, zero_pred in any::<bool>()) {
        let mut rng = RngState::new(seed);
        let pred = if zero_pred { Tensor::zeros(&[r, c]) } else { rng.uniform_tensor(&[r, c], -1.0, 1.0) };
        let truth = rng.uniform_tensor(&[r, c], -1.0, 1.0);
        let g = gradient_diagnostics(&pred, &truth).unwrap();
        prop_assert!((0.0..=1.0).contains(&g.sign_error));
        prop_assert!(g.cosine.abs() <= 1.0 + 1e-12);
        prop_assert!(g.l2 >= 0.0);
    }

    #[test]
    fn copy_episodes_have_the_documented_layout(n in 1usize..12, r in 1usize..5, seed in any::<u64>()) {
        let c = gen_copy(n, &mut RngState::new(seed)).unwrap();
        prop_assert_eq!(c.t_task, n + 3);
        prop_assert_eq!(c.steps(), 2 * n + 2);
        prop_assert_eq!(c.mask.iter().filter(|&&m| m).count(), n + 1);
        let rc = gen_repeat_copy(n, r, &mut RngState::new(seed)).unwrap();
        prop_assert_eq!(rc.t_task, n * r + 3);
        prop_assert_eq!(rc.mask.iter().filter(|&&m| m).count(), n * r + 1);
        // answers repeat the presented symbols in order
        let header = rc.steps() - n * r - 1;
        for k in 0..n * r {
            prop_assert_eq!(&rc.targets.row(header + k)[..8], &rc.inputs.row(k % n)[..8]);
        }
    }

    #[test]
    fn bits_error_is_non_negative_and_zero_for_the_truth(n in 1usize..6, seed in any::<u64>()) {
        let mut rng = RngState::new(seed);
        let ep = gen_copy(n, &mut rng).unwrap();
        prop_assert!(bits_error(&ep.targets, &ep).unwrap().abs() < 1e-9);
        let guess = rng.uniform_tensor(ep.targets.shape(), 0.01, 0.99);
        prop_assert!(bits_error(&guess, &ep).unwrap() > 0.0);
    }

    #[test]
    fn curriculum_levels_only_grow(bits in prop::collection::vec(0.0f64..0.3, 1..400), repeat in any::<bool>()) {
        let kind = if repeat { TaskKind::RepeatCopy } else { TaskKind::Copy };
        let mut cur = Curriculum::with_window(kind, 5);
        let mut last = (cur.level_pair(), cur.max_solved);
        for b in bits {
            let t = cur.t_task();
            cur.record(b, t);
            let now = (cur.level_pair(), cur.max_solved);
            prop_assert!(now.0 .0 >= last.0 .0 && now.0 .1 >= last.0 .1 && now.1 >= last.1);
            if !repeat {
                prop_assert_eq!(now.0 .1, 1);
            }
            last = now;
        }
    }

    #[test]
    fn stream_counts_fit_their_windows(digits in prop::collection::vec(0usize..10, 1..40), t in 2usize..5) {
        let l = stream_labels(&digits, t);
        prop_assert!(l.count_odd <= t.min(digits.len()));
        prop_assert!(l.count_threes <= (t * t).min(digits.len()));
    }
}

fn cfg_without_labels(cfg: SgConfig) -> SgConfig {
    SgConfig {
        conditioning: Conditioning::None,
        ..cfg
    }
}
