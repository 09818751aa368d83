use metaxl_core::autodiff::{grad, Graph, ParamSet};
use metaxl_core::bilevel::{
    inner_step, joint_step, lookahead, meta_gradient, metaxl_step, train, BilevelProblem,
    EncoderProblem, JtSchedule, MetaGradMode, Method, ScalarToy, TrainConfig, TrainState,
};
use metaxl_core::data::{Dataset, Example, ExampleLabels, Role, TaskKind};
use metaxl_core::encoder::{tokenize, Batch, EncoderConfig, EncoderParams};
use metaxl_core::rtn::RtnParams;
use metaxl_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MODES: [MetaGradMode; 3] = [
    MetaGradMode::Unrolled,
    MetaGradMode::AnalyticExpansion,
    MetaGradMode::FdHvp,
];

fn toy_cfg(alpha: f64, beta: f64) -> TrainConfig {
    TrainConfig {
        alpha,
        beta,
        clip_norm: None,
        theta_on_target: false,
        ..TrainConfig::default()
    }
}

fn scalar(p: &ParamSet, name: &str) -> f64 {
    p.get(name).unwrap().item().unwrap()
}

#[test]
fn toy_inner_step_matches_hand_computation() {
    let g = Graph::new();
    let th = ScalarToy::theta(1.0).to_vars(&g);
    let ph = ScalarToy::phi(0.0).to_vars(&g);
    let inner = inner_step(&ScalarToy, &th, &ph, &(), 0.1, None, true).unwrap();
    assert!((inner.theta_prime["theta"].item().unwrap() - 0.8).abs() < 1e-15);
}

#[test]
fn inner_step_fixed_points() {
    let g = Graph::new();
    let th = ScalarToy::theta(0.7).to_vars(&g);
    let ph = ScalarToy::phi(0.7).to_vars(&g);
    let inner = inner_step(&ScalarToy, &th, &ph, &(), 0.1, None, true).unwrap();
    assert_eq!(inner.theta_prime["theta"].item().unwrap(), 0.7);

    let ph = ScalarToy::phi(-2.0).to_vars(&g);
    let inner = inner_step(&ScalarToy, &th, &ph, &(), 0.0, None, true).unwrap();
    assert_eq!(inner.theta_prime["theta"].item().unwrap(), 0.7);
}

#[test]
fn toy_meta_gradient_in_every_mode() {
    for (mode, tol) in MODES.into_iter().zip([1e-9, 1e-9, 1e-4]) {
        let mg = meta_gradient(
            &ScalarToy,
            &ScalarToy::theta(1.0),
            &ScalarToy::phi(0.0),
            &(),
            &(),
            0.1,
            mode,
        )
        .unwrap();
        let v = scalar(&mg, "phi");
        assert!((v - 0.32).abs() < tol, "{mode:?}: {v}");
    }
    // Central differences of L_t(θ'(φ)) on φ.
    let outer = |phi: f64| {
        let tp = 1.0 - 0.1 * 2.0 * (1.0 - phi);
        tp * tp
    };
    let fd = (outer(1e-5) - outer(-1e-5)) / 2e-5;
    assert!((fd - 0.32).abs() < 1e-9);
}

#[test]
fn toy_metaxl_step_with_unit_beta() {
    let mut st = TrainState::new(ScalarToy::theta(1.0), ScalarToy::phi(0.0));
    metaxl_step(&ScalarToy, &mut st, &(), None, &(), &toy_cfg(0.1, 1.0)).unwrap();
    assert!((scalar(&st.theta, "theta") - 0.8).abs() < 1e-12);
    assert!((scalar(&st.phi, "phi") + 0.32).abs() < 1e-12);
    assert_eq!(st.step, 1);
    assert_eq!(st.history.len(), 1);
}

#[test]
fn toy_fifty_steps_follow_the_simulation() {
    let (alpha, beta) = (0.4, 0.2);
    let mut st = TrainState::new(ScalarToy::theta(1.0), ScalarToy::phi(0.0));
    let (mut th, mut ph) = (1.0f64, 0.0f64);
    let mut outer = Vec::new();
    for _ in 0..50 {
        let loss = metaxl_step(&ScalarToy, &mut st, &(), None, &(), &toy_cfg(alpha, beta)).unwrap();
        let tp = th - alpha * 2.0 * (th - ph);
        ph -= beta * 2.0 * tp * 2.0 * alpha;
        th = tp;
        assert!((scalar(&st.theta, "theta") - th).abs() < 1e-12);
        assert!((scalar(&st.phi, "phi") - ph).abs() < 1e-12);
        outer.push(loss.target.unwrap());
    }
    for w in outer[5..].windows(2) {
        assert!(w[1] < w[0], "outer loss rose: {w:?}");
    }
    assert!((th - ph).abs() < 1e-9);
    assert_eq!(st.history.len(), st.step);
}

#[test]
fn non_finite_step_leaves_state_untouched() {
    let mut st = TrainState::new(ScalarToy::theta(1e200), ScalarToy::phi(0.0));
    let before = st.clone();
    let err = metaxl_step(&ScalarToy, &mut st, &(), None, &(), &toy_cfg(0.1, 1.0)).unwrap_err();
    assert!(matches!(err, Error::NonFinite { .. }));
    assert_eq!(st, before);
}

fn tiny_config(n_layers: usize) -> EncoderConfig {
    EncoderConfig {
        d_model: 8,
        n_layers,
        n_heads: 2,
        d_ffn: 8,
        max_len: 12,
        n_labels: 5,
        ..EncoderConfig::default()
    }
}

fn random_batch(rng: &mut ChaCha8Rng, n: usize, role: Role) -> Batch {
    let examples: Vec<Example> = (0..n)
        .map(|_| {
            let len = rng.random_range(3..=8);
            let text: Vec<u8> = (0..len).map(|_| rng.random_range(b'a'..=b'h')).collect();
            let tokens = tokenize(&text, 12);
            let labels = tokens
                .iter()
                .enumerate()
                .map(|(i, _)| (i > 0 && i + 1 < tokens.len()).then(|| rng.random_range(0..5)))
                .collect();
            Example {
                tokens,
                labels: ExampleLabels::Token(labels),
                word_lens: Vec::new(),
            }
        })
        .collect();
    let refs: Vec<_> = examples.iter().collect();
    Batch::from_examples(&refs, role).unwrap()
}

struct Tiny {
    problem: EncoderProblem,
    theta: ParamSet,
    phi: ParamSet,
    source: Batch,
    target: Batch,
}

fn tiny(seed: u64, placement: usize) -> Tiny {
    let config = tiny_config(2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut phi = RtnParams::init(8, 3, seed + 100).unwrap().to_param_set();
    for name in ["b1", "b2"] {
        for v in phi.get_mut(name).unwrap().data_mut() {
            *v = rng.random_range(-0.3..0.3);
        }
    }
    Tiny {
        problem: EncoderProblem::new(config.clone(), placement, false),
        theta: EncoderParams::init(&config, seed).unwrap().params,
        phi,
        source: random_batch(&mut rng, 2, Role::Source),
        target: random_batch(&mut rng, 2, Role::Target),
    }
}

fn rel_err(a: &ParamSet, b: &ParamSet) -> f64 {
    a.axpy(-1.0, b).unwrap().l2_norm() / b.l2_norm().max(1e-300)
}

#[test]
fn encoder_meta_gradient_matches_finite_differences() {
    let t = tiny(1, 1);
    let alpha = 0.1;
    let mg = meta_gradient(
        &t.problem,
        &t.theta,
        &t.phi,
        &t.source,
        &t.target,
        alpha,
        MetaGradMode::Unrolled,
    )
    .unwrap();
    let outer = |phi: &ParamSet| {
        let g = Graph::new();
        let th = t.theta.to_vars(&g);
        let ph = phi.to_constants(&g);
        let inner = inner_step(&t.problem, &th, &ph, &t.source, alpha, None, false).unwrap();
        let tp = ParamSet::from_vars(&inner.theta_prime);
        let g2 = Graph::new();
        t.problem
            .target_loss(&tp.to_constants(&g2), &t.target)
            .unwrap()
            .item()
            .unwrap()
    };
    let eps = 1e-4;
    let mut fd = t.phi.zeros_like();
    for name in t.phi.names().cloned().collect::<Vec<_>>() {
        for i in 0..t.phi.get(&name).unwrap().numel() {
            let mut plus = t.phi.clone();
            plus.get_mut(&name).unwrap().data_mut()[i] += eps;
            let mut minus = t.phi.clone();
            minus.get_mut(&name).unwrap().data_mut()[i] -= eps;
            fd.get_mut(&name).unwrap().data_mut()[i] = (outer(&plus) - outer(&minus)) / (2.0 * eps);
        }
    }
    let err = rel_err(&mg, &fd);
    assert!(err < 1e-4, "relative error {err}");
    assert!(mg.l2_norm() > 1e-8);
}

fn outer_direction(t: &Tiny, alpha: f64) -> ParamSet {
    let la = lookahead(
        &t.problem,
        &t.theta,
        &t.phi,
        &t.source,
        &t.target,
        alpha,
        None,
        MetaGradMode::Unrolled,
    )
    .unwrap();
    let g = Graph::new();
    let tp = la.theta_prime.to_vars(&g);
    let lt = t.problem.target_loss(&tp, &t.target).unwrap();
    ParamSet::from_vars(&grad(lt, &tp, false).unwrap())
}

/// `-α (∇φ L_s(θ + εv) - ∇φ L_s(θ - εv)) / 2ε` with `ε = scale / ‖v‖`.
fn mixed_fd(t: &Tiny, v: &ParamSet, alpha: f64, scale: f64) -> ParamSet {
    let eps = scale / v.l2_norm();
    let at = |th: &ParamSet| {
        let g = Graph::new();
        let th = th.to_constants(&g);
        let ph = t.phi.to_vars(&g);
        let l = t.problem.source_loss(&th, &ph, &t.source).unwrap();
        ParamSet::from_vars(&grad(l, &ph, false).unwrap())
    };
    at(&t.theta.axpy(eps, v).unwrap())
        .axpy(-1.0, &at(&t.theta.axpy(-eps, v).unwrap()))
        .unwrap()
        .scaled(-alpha / (2.0 * eps))
}

#[test]
fn meta_gradient_modes_agree_on_random_tiny_models() {
    let alpha = 0.05;
    let mut smooth_cases = 0;
    for seed in 0..6 {
        for placement in 0..3 {
            let t = tiny(seed, placement);
            let get = |mode| {
                meta_gradient(
                    &t.problem, &t.theta, &t.phi, &t.source, &t.target, alpha, mode,
                )
                .unwrap()
            };
            let unrolled = get(MetaGradMode::Unrolled);
            let analytic = get(MetaGradMode::AnalyticExpansion);
            let e = rel_err(&analytic, &unrolled);
            assert!(e < 1e-8, "seed {seed} placement {placement}: {e}");

            // The finite difference is only meaningful when ∇φ L_s is smooth
            // on θ ± εv; a ReLU kink inside the segment shows up as
            // disagreement between the full and the half step.
            let v = outer_direction(&t, alpha);
            let smooth = rel_err(
                &mixed_fd(&t, &v, alpha, 0.005),
                &mixed_fd(&t, &v, alpha, 0.01),
            ) < 1e-3;
            if smooth {
                smooth_cases += 1;
                let e = rel_err(&get(MetaGradMode::FdHvp), &unrolled);
                assert!(e < 1e-2, "seed {seed} placement {placement}: {e}");
            }
        }
    }
    assert!(smooth_cases >= 12, "only {smooth_cases} smooth cases");
}

#[test]
fn small_step_mixed_derivative_matches_unrolled_everywhere() {
    let alpha = 0.05;
    for seed in 0..6 {
        for placement in 0..3 {
            let t = tiny(seed, placement);
            let unrolled = meta_gradient(
                &t.problem,
                &t.theta,
                &t.phi,
                &t.source,
                &t.target,
                alpha,
                MetaGradMode::Unrolled,
            )
            .unwrap();
            let fd = mixed_fd(&t, &outer_direction(&t, alpha), alpha, 1e-5);
            let e = rel_err(&fd, &unrolled);
            assert!(e < 1e-6, "seed {seed} placement {placement}: {e}");
        }
    }
}

#[test]
fn meta_gradient_vanishes_without_a_phi_path() {
    let mut t = tiny(2, 1);
    t.problem.hook_enabled = false;
    for mode in MODES {
        let mg = meta_gradient(
            &t.problem, &t.theta, &t.phi, &t.source, &t.target, 0.1, mode,
        )
        .unwrap();
        assert!(
            mg.iter().all(|(_, v)| v.data().iter().all(|&x| x == 0.0)),
            "{mode:?}"
        );
    }
}

#[test]
fn zero_alpha_freezes_everything() {
    let t = tiny(3, 1);
    let mut st = TrainState::new(t.theta.clone(), t.phi.clone());
    let cfg = TrainConfig {
        alpha: 0.0,
        beta: 0.5,
        ..TrainConfig::default()
    };
    metaxl_step(&t.problem, &mut st, &t.source, None, &t.target, &cfg).unwrap();
    assert_eq!(st.theta, t.theta);
    assert_eq!(st.phi, t.phi);
}

#[test]
fn zero_beta_reduces_to_a_joint_rtn_source_step() {
    let t = tiny(4, 2);
    let cfg = TrainConfig {
        alpha: 0.1,
        beta: 0.0,
        theta_on_target: false,
        ..TrainConfig::default()
    };
    let mut a = TrainState::new(t.theta.clone(), t.phi.clone());
    metaxl_step(&t.problem, &mut a, &t.source, None, &t.target, &cfg).unwrap();
    assert_eq!(a.phi, t.phi);
    let mut b = TrainState::new(t.theta.clone(), t.phi.clone());
    joint_step(
        &t.problem,
        &mut b,
        Some(&t.source),
        None,
        false,
        0.1,
        cfg.clip_norm,
    )
    .unwrap();
    assert_eq!(a.theta, b.theta);
}

#[test]
fn source_update_ignores_beta_and_target_batch() {
    let t = tiny(5, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let other_target = random_batch(&mut rng, 3, Role::Target);
    let run = |beta: f64, target: &Batch| {
        let cfg = TrainConfig {
            alpha: 0.1,
            beta,
            theta_on_target: false,
            ..TrainConfig::default()
        };
        let mut st = TrainState::new(t.theta.clone(), t.phi.clone());
        metaxl_step(&t.problem, &mut st, &t.source, None, target, &cfg).unwrap();
        st
    };
    let base = run(0.0, &t.target);
    let varied = run(0.7, &other_target);
    assert_eq!(base.theta, varied.theta);
    assert_ne!(base.phi, varied.phi);

    // The lookahead θ' equals the applied update.
    let la = lookahead(
        &t.problem,
        &t.theta,
        &t.phi,
        &t.source,
        &t.target,
        0.1,
        Some(5.0),
        MetaGradMode::Unrolled,
    )
    .unwrap();
    assert_eq!(la.theta_prime, base.theta);
}

#[test]
fn identity_transformation_reproduces_alternating_joint_training() {
    let t = tiny(6, 1);
    let mut problem = t.problem.clone();
    problem.residual = true;
    let mut phi = t.phi.clone();
    for name in ["w2", "b2"] {
        for v in phi.get_mut(name).unwrap().data_mut() {
            *v = 0.0;
        }
    }
    let cfg = TrainConfig {
        alpha: 0.2,
        beta: 0.0,
        clip_norm: Some(1.0),
        theta_on_target: true,
        ..TrainConfig::default()
    };
    let mut plain = problem.clone();
    plain.hook_enabled = false;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut meta = TrainState::new(t.theta.clone(), phi.clone());
    let mut jt = TrainState::new(t.theta.clone(), ParamSet::new());
    for _ in 0..5 {
        let s = random_batch(&mut rng, 2, Role::Source);
        let tg = random_batch(&mut rng, 2, Role::Target);
        metaxl_step(&problem, &mut meta, &s, None, &tg, &cfg).unwrap();
        joint_step(
            &plain,
            &mut jt,
            Some(&s),
            None,
            false,
            cfg.alpha,
            cfg.clip_norm,
        )
        .unwrap();
        joint_step(
            &plain,
            &mut jt,
            None,
            Some(&tg),
            false,
            cfg.alpha,
            cfg.clip_norm,
        )
        .unwrap();
        assert_eq!(meta.theta, jt.theta);
    }
    assert_eq!(meta.phi, phi);
}

fn separable(n: usize, seed: u64, role: Role) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let examples = (0..n)
        .map(|i| {
            let label = i % 2;
            let (lo, hi) = if label == 0 {
                (b'a', b'm')
            } else {
                (b'n', b'z')
            };
            let len = rng.random_range(3..=8);
            let text: Vec<u8> = (0..len).map(|_| rng.random_range(lo..=hi)).collect();
            Example {
                tokens: tokenize(&text, 16),
                labels: ExampleLabels::Sequence(label),
                word_lens: Vec::new(),
            }
        })
        .collect();
    Dataset::new(TaskKind::SequenceClassification, role, 2, examples).unwrap()
}

fn sequence_config() -> EncoderConfig {
    EncoderConfig {
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ffn: 32,
        max_len: 16,
        task_kind: TaskKind::SequenceClassification,
        n_labels: 2,
        ..EncoderConfig::default()
    }
}

#[test]
fn target_only_fits_a_separable_task() {
    let enc = sequence_config();
    let data = separable(64, 0, Role::Target);
    let cfg = TrainConfig {
        method: Method::TargetOnly,
        steps: 200,
        batch_source: 8,
        batch_target: 8,
        eval_every: 200,
        ..TrainConfig::default()
    };
    let out = train(&cfg, &enc, &data, &data, &data).unwrap();
    let losses: Vec<f64> = out
        .report
        .history
        .iter()
        .map(|l| l.target.unwrap())
        .collect();
    assert_eq!(losses.len(), 200);
    let windows: Vec<f64> = losses
        .chunks(10)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    for w in windows.windows(2) {
        assert!(w[1] < w[0], "window means {windows:?}");
    }
    let final_model = EncoderParams {
        config: enc.clone(),
        params: out.final_state.theta.clone(),
    };
    let report = metaxl_core::bilevel::evaluate(&final_model, &data, 64).unwrap();
    assert_eq!(report.f1, 1.0);
}

#[test]
fn joint_training_without_source_is_target_only() {
    let enc = sequence_config();
    let data = separable(24, 1, Role::Target);
    let empty = data.select(&[]).with_role(Role::Source);
    let base = TrainConfig {
        steps: 12,
        batch_source: 4,
        batch_target: 4,
        eval_every: 5,
        seed: 9,
        ..TrainConfig::default()
    };
    let a = train(
        &TrainConfig {
            method: Method::TargetOnly,
            ..base.clone()
        },
        &enc,
        &empty,
        &data,
        &data,
    )
    .unwrap();
    let b = train(
        &TrainConfig {
            method: Method::Jt,
            ..base.clone()
        },
        &enc,
        &empty,
        &data,
        &data,
    )
    .unwrap();
    let c = train(
        &TrainConfig {
            method: Method::Jt,
            jt_schedule: JtSchedule::Alternating,
            ..base
        },
        &enc,
        &empty,
        &data,
        &data,
    )
    .unwrap();
    assert_eq!(a.final_state.theta, b.final_state.theta);
    assert_eq!(a.report, b.report);
    assert_eq!(a.final_state.theta, c.final_state.theta);
}

#[test]
fn metaxl_training_is_deterministic_and_keeps_history_in_step() {
    let enc = sequence_config();
    let target = separable(16, 2, Role::Target);
    let source = separable(40, 3, Role::Source);
    let cfg = TrainConfig {
        method: Method::Metaxl,
        steps: 6,
        batch_source: 4,
        batch_target: 4,
        eval_every: 3,
        bottleneck_r: 4,
        ..TrainConfig::default()
    };
    let a = train(&cfg, &enc, &source, &target, &target).unwrap();
    let b = train(&cfg, &enc, &source, &target, &target).unwrap();
    assert_eq!(a.final_state, b.final_state);
    assert_eq!(a.final_state.history.len(), a.final_state.step);
    assert_eq!(a.report.evals.len(), 2);
    let shapes = |p: &ParamSet| {
        p.iter()
            .map(|(k, v)| (k.clone(), v.shape().to_vec()))
            .collect::<Vec<_>>()
    };
    let init_phi = RtnParams::init(16, 4, 0).unwrap().to_param_set();
    assert_eq!(shapes(&a.final_state.phi), shapes(&init_phi));

    let fresh = TrainConfig {
        fresh_lookahead_batch: true,
        ..cfg.clone()
    };
    assert!(train(&fresh, &enc, &source, &target, &target).is_ok());
    let empty = source.select(&[]);
    assert!(train(&cfg, &enc, &empty, &target, &target).is_err());
    assert!(train(&cfg, &enc, &source, &empty.with_role(Role::Target), &target).is_err());
}
