mod common;

use common::{central_diff, normal_matrix, op_grad_error, random_spd, rel_err, rng};
use mlrl_core::envs::EnvSpec;
use mlrl_core::gaussian::{self, fit_gaussian, kl_divergence_tape, KlWeights, PenaltyOptions, TapeGaussian};
use mlrl_core::policy::{collect_rollouts, Policy};
use mlrl_core::reward::{
    batch_return_bounds, rating_cross_entropy, rating_cross_entropy_fixed_bounds, rating_loss_and_grad,
    NormalizationGrad, RatingLossConfig, RewardModel,
};
use mlrl_core::segments::{sample_segments, FeatureMode, SyntheticRater};
use mlrl_core::tensor::{Matrix, Tape, Var};
use mlrl_core::trainer::{
    combined_gradient, fit_class_dists, policy_feature_dist_tape, rollout_returns, PenaltySign, StepConfig, Terms,
};

const TOL: f64 = 1e-3;

fn check(name: &str, x0: &Matrix, build: impl Fn(&mut Tape, Var) -> Var) {
    let err = op_grad_error(x0, build, 1e-6);
    assert!(err < 1e-6, "{name}: relative error {err:e}");
}

#[test]
fn elementwise_and_reduction_ops() {
    let mut r = rng(1);
    let x = normal_matrix(&mut r, 3, 4);
    let other = normal_matrix(&mut r, 3, 4);
    let row = normal_matrix(&mut r, 1, 4);
    let pos = x.map(|v| v.abs() + 0.5);
    check("tanh", &x, |t, a| t.tanh(a));
    check("sigmoid", &x, |t, a| t.sigmoid(a));
    check("exp", &x, |t, a| t.exp(a));
    check("log", &pos, |t, a| t.log(a).unwrap());
    check("square", &x, |t, a| t.square(a));
    check("neg", &x, |t, a| t.neg(a));
    check("scale", &x, |t, a| t.scale(a, -2.5));
    check("add_scalar", &x, |t, a| t.add_scalar(a, 3.0));
    check("add_const", &x, |t, a| t.add_const(a, &other).unwrap());
    check("add", &x, |t, a| {
        let b = t.constant(other.clone());
        t.add(a, b).unwrap()
    });
    check("sub", &x, |t, a| {
        let b = t.square(a);
        t.sub(b, a).unwrap()
    });
    check("mul", &x, |t, a| {
        let b = t.tanh(a);
        t.mul(a, b).unwrap()
    });
    check("min", &x, |t, a| {
        let b = t.constant(other.clone());
        t.min(a, b).unwrap()
    });
    check("clamp", &x, |t, a| t.clamp(a, -0.7, 0.7));
    check("add_row", &x, |t, a| {
        let b = t.constant(row.clone());
        t.add_row(a, b).unwrap()
    });
    check("sub_row", &x, |t, a| {
        let m = t.mean_rows(a);
        t.sub_row(a, m).unwrap()
    });
    check("mul_row", &x, |t, a| {
        let m = t.sum_rows(a);
        t.mul_row(a, m).unwrap()
    });
    check("mul_scalar", &x, |t, a| {
        let s = t.mean(a);
        t.mul_scalar(a, s).unwrap()
    });
    check("sum", &x, |t, a| t.sum(a));
    check("sum_cols", &x, |t, a| t.sum_cols(a));
    check("transpose", &x, |t, a| t.transpose(a));
    check("reshape", &x, |t, a| t.reshape(a, 2, 6).unwrap());
    check("hcat", &x, |t, a| {
        let b = t.square(a);
        t.hcat(a, b).unwrap()
    });
    check("slice_cols", &x, |t, a| t.slice_cols(a, 1, 2).unwrap());
    check("log_softmax_rows", &x, |t, a| t.log_softmax_rows(a));
    check("pick_per_row", &x, |t, a| t.pick_per_row(a, &[3, 0, 2]).unwrap());
    let col = normal_matrix(&mut r, 6, 1);
    check("group_weighted_sum", &col, |t, a| t.group_weighted_sum(a, &[1.0, 0.5, 0.25]).unwrap());
}

/// `(A + Aᵀ)/2`, so perturbing one entry keeps the input symmetric.
fn sym(t: &mut Tape, a: Var) -> Var {
    let at = t.transpose(a);
    let s = t.add(a, at).unwrap();
    t.scale(s, 0.5)
}

#[test]
fn matrix_ops() {
    let mut r = rng(2);
    let x = normal_matrix(&mut r, 3, 4);
    let w = normal_matrix(&mut r, 4, 2);
    check("matmul left", &x, |t, a| {
        let b = t.constant(w.clone());
        t.matmul(a, b).unwrap()
    });
    check("matmul right", &w, |t, b| {
        let a = t.constant(x.clone());
        t.matmul(a, b).unwrap()
    });
    let s = random_spd(&mut r, 3);
    let rhs = normal_matrix(&mut r, 3, 2);
    check("trace", &s, |t, a| t.trace(a).unwrap());
    check("cholesky", &s, |t, a| {
        let a = sym(t, a);
        t.cholesky(a).unwrap()
    });
    check("logdet_spd", &s, |t, a| {
        let a = sym(t, a);
        t.logdet_spd(a).unwrap()
    });
    check("solve_spd matrix", &s, |t, a| {
        let a = sym(t, a);
        let b = t.constant(rhs.clone());
        t.solve_spd(a, b).unwrap()
    });
    check("solve_spd rhs", &rhs, |t, b| {
        let a = t.constant(s.clone());
        t.solve_spd(a, b).unwrap()
    });
}

fn rated_batch(seed: u64, count: usize) -> (EnvSpec, Vec<(mlrl_core::segments::Segment, usize)>) {
    let spec = EnvSpec::by_name("point-mass").unwrap();
    let mut r = rng(seed);
    let actor = Policy::new(&spec, 4, -0.5, &mut r);
    let rater = SyntheticRater::calibrate(&spec, 4, 5, 0.99).unwrap();
    let segs = sample_segments(&actor, &spec, count, 5, seed, 0.99, 0).unwrap();
    let rated = segs
        .into_iter()
        .map(|s| {
            let c = rater.rate(&s).unwrap();
            (s, c)
        })
        .collect();
    (spec, rated)
}

#[test]
fn reward_cross_entropy_matches_finite_differences() {
    for seed in 0..20u64 {
        let (spec, rated) = rated_batch(seed, 6);
        let batch: Vec<_> = rated.iter().map(|(s, c)| (s, *c)).collect();
        let mut r = rng(100 + seed);
        let model = RewardModel::new(spec.state_dim, spec.action_dim, 5, &mut r);
        for mode in [NormalizationGrad::Full, NormalizationGrad::StopGradient] {
            let mut cfg = RatingLossConfig::new(4, 20.0, 0.99).unwrap();
            cfg.normalization_grad = mode;
            let (_, analytic) = rating_loss_and_grad(&model, &batch, &cfg).unwrap();
            let (lo, hi) = batch_return_bounds(&model, &batch, cfg.gamma).unwrap();
            let base = model.net().params_flat();
            let numeric = central_diff(
                |p| {
                    let mut m = model.clone();
                    m.net_mut().set_params_flat(p).unwrap();
                    match mode {
                        NormalizationGrad::Full => rating_cross_entropy(&m, &batch, &cfg).unwrap(),
                        NormalizationGrad::StopGradient => {
                            rating_cross_entropy_fixed_bounds(&m, &batch, &cfg, lo, hi).unwrap()
                        }
                    }
                },
                &base,
                1e-6,
            );
            let err = rel_err(&analytic, &numeric, 1e-8);
            assert!(err < TOL, "seed {seed} {mode:?}: {err:e}");
        }
    }
}

fn small_policy_setup(seed: u64) -> (EnvSpec, Policy, mlrl_core::policy::Rollouts) {
    let spec = EnvSpec::by_name("point-mass").unwrap().with_episode_len(10);
    let mut r = rng(200 + seed);
    let policy = Policy::new(&spec, 6, -0.5, &mut r);
    assert!(policy.num_params() <= 200);
    let rollouts = collect_rollouts(&policy, &spec, 4, seed).unwrap();
    (spec, policy, rollouts)
}

fn with_params(policy: &Policy, p: &[f64]) -> Policy {
    let mut q = policy.clone();
    q.set_params_flat(p).unwrap();
    q
}

#[test]
fn kl_path_gradient_wrt_policy_parameters() {
    for seed in 0..20u64 {
        let (_, policy, rollouts) = small_policy_setup(seed);
        let mut r = rng(300 + seed);
        let d = rollouts.states.cols() + rollouts.actions.cols();
        let class_x = normal_matrix(&mut r, 30, d);
        let class = fit_gaussian(&class_x, 1e-3).unwrap();
        for noise in [false, true] {
            let value = |pol: &Policy| -> (f64, Vec<f64>) {
                let mut tape = Tape::new();
                let vars = pol.register(&mut tape);
                let dpi =
                    policy_feature_dist_tape(&mut tape, pol, &vars, &rollouts, 1e-3, FeatureMode::Pooled, 5, noise)
                        .unwrap();
                let c = TapeGaussian::constant(&mut tape, &class);
                let kl = kl_divergence_tape(&mut tape, c, dpi, true).unwrap();
                tape.backward(kl).unwrap();
                let mut g = pol.net().grads_flat(&tape, &vars.net);
                g.extend_from_slice(tape.grad_or_zeros(vars.log_std).data());
                (tape.value(kl).item(), g)
            };
            let (_, analytic) = value(&policy);
            let numeric = central_diff(|p| value(&with_params(&policy, p)).0, &policy.params_flat(), 1e-6);
            let err = rel_err(&analytic, &numeric, 1e-8);
            assert!(err < TOL, "seed {seed} noise {noise}: {err:e}");
        }
    }
}

#[test]
fn policy_dist_mean_moves_with_weights() {
    let (_, policy, rollouts) = small_policy_setup(3);
    let mean_of = |pol: &Policy| -> Vec<f64> {
        let mut tape = Tape::new();
        let vars = pol.register(&mut tape);
        let g = policy_feature_dist_tape(&mut tape, pol, &vars, &rollouts, 1e-3, FeatureMode::Pooled, 5, false)
            .unwrap();
        tape.value(g.mean).data().to_vec()
    };
    let base = policy.params_flat();
    let dim = mean_of(&policy).len();
    for k in 0..dim {
        let analytic = {
            let mut tape = Tape::new();
            let vars = policy.register(&mut tape);
            let g = policy_feature_dist_tape(&mut tape, &policy, &vars, &rollouts, 1e-3, FeatureMode::Pooled, 5, false)
                .unwrap();
            let picked = tape.slice_cols(g.mean, k, 1).unwrap();
            let s = tape.sum(picked);
            tape.backward(s).unwrap();
            let mut g = policy.net().grads_flat(&tape, &vars.net);
            g.extend_from_slice(tape.grad_or_zeros(vars.log_std).data());
            g
        };
        let numeric = central_diff(|p| mean_of(&with_params(&policy, p))[k], &base, 1e-6);
        assert!(rel_err(&analytic, &numeric, 1e-10) < 1e-4, "component {k}");
    }
}

fn step_inputs(
    seed: u64,
) -> (Policy, mlrl_core::policy::Rollouts, Vec<f64>, Vec<(usize, Option<gaussian::GaussianDist>)>, StepConfig) {
    let (spec, policy, rollouts) = small_policy_setup(seed);
    let mut r = rng(400 + seed);
    let reward = RewardModel::new(spec.state_dim, spec.action_dim, 5, &mut r);
    let returns = rollout_returns(&rollouts, &reward, 0.99).unwrap();
    let (_, rated) = rated_batch(500 + seed, 40);
    let mut ds = mlrl_core::segments::RatingDataset::new(4);
    for (s, c) in rated {
        ds.insert_rated(s, c).unwrap();
    }
    let dists = fit_class_dists(&ds, 1e-3, FeatureMode::Pooled).unwrap();
    let cfg = StepConfig {
        gamma: 0.99,
        omega: gaussian::default_weights(4).unwrap(),
        kl_penalty: true,
        penalty_sign: PenaltySign::Literal,
        action_noise: false,
        penalty: PenaltyOptions::default(),
        lambda_rel: 1e-3,
        feature_mode: FeatureMode::Pooled,
        j: 5,
        clip: None,
    };
    (policy, rollouts, returns, dists, cfg)
}

#[test]
fn combined_step_gradient_matches_finite_differences() {
    for seed in 0..20u64 {
        let (policy, rollouts, returns, dists, mut cfg) = step_inputs(seed);
        cfg.penalty_sign = if seed % 2 == 0 { PenaltySign::Literal } else { PenaltySign::PushAway };
        cfg.action_noise = seed % 4 < 2;
        let (analytic, _) = combined_gradient(&policy, &rollouts, &returns, &dists, &cfg, None, Terms::Both).unwrap();
        let numeric = central_diff(
            |p| {
                combined_gradient(&with_params(&policy, p), &rollouts, &returns, &dists, &cfg, None, Terms::Both)
                    .unwrap()
                    .1
                    .objective
            },
            &policy.params_flat(),
            1e-6,
        );
        let err = rel_err(&analytic, &numeric, 1e-8);
        assert!(err < TOL, "seed {seed}: {err:e}");
    }
}

#[test]
fn combined_gradient_is_objective_minus_penalty_gradient() {
    for seed in 0..5u64 {
        let (policy, rollouts, returns, dists, cfg) = step_inputs(seed);
        let run = |terms| combined_gradient(&policy, &rollouts, &returns, &dists, &cfg, None, terms).unwrap().0;
        let both = run(Terms::Both);
        let surrogate = run(Terms::SurrogateOnly);
        let penalty = run(Terms::PenaltyOnly);
        for i in 0..both.len() {
            assert!((both[i] - (surrogate[i] + penalty[i])).abs() < 1e-12, "component {i}");
        }
    }
}

#[test]
fn vanishing_penalty_gives_the_plain_step() {
    let (policy, rollouts, returns, dists, mut cfg) = step_inputs(1);
    cfg.kl_penalty = false;
    let (ablated, _) = combined_gradient(&policy, &rollouts, &returns, &dists, &cfg, None, Terms::Both).unwrap();
    let (plain, _) =
        combined_gradient(&policy, &rollouts, &returns, &dists, &cfg, None, Terms::SurrogateOnly).unwrap();
    for (a, b) in ablated.iter().zip(&plain) {
        assert!((a - b).abs() < 1e-12);
    }
    cfg.kl_penalty = true;
    cfg.omega = KlWeights::new(vec![3e-300, 2e-300, 1e-300]).unwrap();
    let (tiny, _) = combined_gradient(&policy, &rollouts, &returns, &dists, &cfg, None, Terms::Both).unwrap();
    for (a, b) in tiny.iter().zip(&plain) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn fitted_kl_gradient_wrt_feature_rows() {
    let mut r = rng(9);
    let x = normal_matrix(&mut r, 12, 3);
    let class = fit_gaussian(&normal_matrix(&mut r, 20, 3), 1e-3).unwrap();
    for lambda_rel in [0.0, 1e-3] {
        let err = op_grad_error(
            &x,
            |t, a| {
                let (g, _) = gaussian::fit_gaussian_tape(t, a, lambda_rel).unwrap();
                let c = TapeGaussian::constant(t, &class);
                kl_divergence_tape(t, c, g, true).unwrap()
            },
            1e-6,
        );
        assert!(err < 1e-5, "lambda_rel {lambda_rel}: {err:e}");
    }
}
