//! The two-phase training loop: reward learning from ratings, then policy
//! optimization against the learned reward with class-distribution penalties.

use std::fmt::Write as _;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::envs::EnvSpec;
use crate::error::{Error, Result};
use crate::gaussian::{
    self, fit_gaussian_tape, weighted_penalty_tape, GaussianDist, KlDirection, KlWeights, PenaltyOptions,
    PenaltyReport,
};
use crate::nn::{Optimizer, OptimizerKind};
use crate::policy::{collect_rollouts, Actor, Policy, PolicyVars, Rollouts};
use crate::reward::{
    train_reward_model, NormalizationGrad, RatingLossConfig, RewardModel, RewardTrainConfig,
};
use crate::rng::{self, STREAM_EVAL, STREAM_POLICY_INIT, STREAM_REWARD_INIT};
use crate::segments::{sample_segments, FeatureMode, RatingDataset, RatingQueue, Segment, SyntheticRater};
use crate::tensor::{Matrix, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RaterKind {
    Synthetic,
    Human,
}

impl RaterKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(RaterKind::Synthetic),
            "human" => Ok(RaterKind::Human),
            other => Err(Error::config(format!(
                "unknown rater `{other}` (expected synthetic or human)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RaterKind::Synthetic => "synthetic",
            RaterKind::Human => "human",
        }
    }
}

/// How the weighted class KL enters the ascent objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltySign {
    /// `J = surrogate − Σ ω_i·KL_i`, ascent shrinks the divergence to failed classes.
    Literal,
    /// `J = surrogate + Σ ω_i·KL_i`, ascent grows the divergence to failed classes.
    PushAway,
}

impl PenaltySign {
    pub fn name(self) -> &'static str {
        match self {
            PenaltySign::Literal => "literal",
            PenaltySign::PushAway => "push_away",
        }
    }

    fn factor(self) -> f64 {
        match self {
            PenaltySign::Literal => -1.0,
            PenaltySign::PushAway => 1.0,
        }
    }
}

/// Every hyperparameter of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub env: String,
    pub episode_len: usize,
    /// Number of rating classes.
    pub n: usize,
    /// Segment length.
    pub j: usize,
    pub gamma: f64,
    /// Policy learning rate.
    pub alpha: f64,
    pub policy_optimizer: OptimizerKind,
    /// Rollout episodes per policy cycle.
    pub batch_size: usize,
    /// Reward-learning cycles.
    pub m_cycles: usize,
    /// Policy-learning cycles.
    pub t_cycles: usize,
    pub omega: KlWeights,
    /// When false the class penalty is dropped entirely (the ω ≡ 0 ablation).
    pub kl_penalty: bool,
    pub penalty_sign: PenaltySign,
    /// Adds the policy's action variance to `D_π`.
    pub policy_dist_noise: bool,
    pub kl_direction: KlDirection,
    pub include_dim_constant: bool,
    pub k_steepness: f64,
    /// Class boundaries `R̄_0..R̄_n`; empty means equally spaced.
    pub boundaries: Vec<f64>,
    pub lambda_rel: f64,
    pub feature_mode: FeatureMode,
    pub seed: u64,
    pub eval_episodes: usize,
    pub eval_every: usize,
    pub rater: RaterKind,
    /// Clipped-surrogate ratio bound; `None` uses the plain score-function step.
    pub clip: Option<f64>,
    pub update_epochs: usize,
    pub segments_per_cycle: usize,
    pub reward_steps: usize,
    pub reward_lr: f64,
    pub reward_optimizer: OptimizerKind,
    pub reward_batch_size: usize,
    /// Linear decay target of the reward learning rate within each cycle.
    pub reward_final_lr_fraction: f64,
    pub reward_width: usize,
    pub normalization_grad: NormalizationGrad,
    pub policy_width: usize,
    pub init_log_std: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            env: "point-mass-reach".into(),
            episode_len: EnvSpec::DEFAULT_EPISODE_LEN,
            n: 4,
            j: 25,
            gamma: 0.99,
            alpha: 5e-5,
            policy_optimizer: OptimizerKind::Sgd,
            batch_size: 64,
            m_cycles: 5,
            t_cycles: 100,
            omega: gaussian::default_weights(4).expect("n = 4 is valid"),
            kl_penalty: true,
            penalty_sign: PenaltySign::PushAway,
            policy_dist_noise: true,
            kl_direction: KlDirection::ClassToPolicy,
            include_dim_constant: true,
            k_steepness: crate::reward::DEFAULT_K_STEEPNESS,
            boundaries: Vec::new(),
            lambda_rel: gaussian::DEFAULT_LAMBDA_REL,
            feature_mode: FeatureMode::Pooled,
            seed: 0,
            eval_episodes: 20,
            eval_every: 10,
            rater: RaterKind::Synthetic,
            clip: None,
            update_epochs: 1,
            segments_per_cycle: 100,
            reward_steps: 1000,
            reward_lr: 5e-5,
            reward_optimizer: OptimizerKind::Sgd,
            reward_batch_size: 64,
            reward_final_lr_fraction: 1.0,
            reward_width: crate::reward::DEFAULT_REWARD_WIDTH,
            normalization_grad: NormalizationGrad::Full,
            policy_width: 64,
            init_log_std: -0.5,
        }
    }
}

impl TrainerConfig {
    pub fn env_spec(&self) -> Result<EnvSpec> {
        let mut spec = EnvSpec::by_name(&self.env)?.with_episode_len(self.episode_len);
        spec.seed = self.seed;
        spec.validate()?;
        Ok(spec)
    }

    pub fn rating_loss(&self) -> Result<RatingLossConfig> {
        let mut cfg = if self.boundaries.is_empty() {
            RatingLossConfig::new(self.n, self.k_steepness, self.gamma)?
        } else {
            RatingLossConfig::with_boundaries(self.n, self.boundaries.clone(), self.k_steepness, self.gamma)?
        };
        cfg.normalization_grad = self.normalization_grad;
        Ok(cfg)
    }

    /// Checks every constraint before a run starts.
    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, msg: String| Err(Error::config(format!("{field}: {msg}")));
        let spec = self.env_spec()?;
        if !(2..=6).contains(&self.n) {
            return fail("n", format!("{} must be in 2..=6", self.n));
        }
        if self.omega.len() != self.n - 1 {
            return fail(
                "omega",
                format!("needs n - 1 = {} weights, got {}", self.n - 1, self.omega.len()),
            );
        }
        if self.j == 0 || self.j > spec.episode_len {
            return fail("j", format!("{} must be in 1..={}", self.j, spec.episode_len));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return fail("gamma", format!("{} must be in [0, 1)", self.gamma));
        }
        for (name, v) in [("alpha", self.alpha), ("reward_lr", self.reward_lr)] {
            if !(v > 0.0) || !v.is_finite() {
                return fail(name, format!("{v} must be positive"));
            }
        }
        if self.m_cycles == 0 {
            return fail("m_cycles", "must be at least 1".into());
        }
        if self.batch_size < 1 || self.batch_size * spec.episode_len < 2 {
            return fail("batch_size", "needs at least two rollout steps".into());
        }
        if !(self.lambda_rel >= 0.0) || !self.lambda_rel.is_finite() {
            return fail("lambda_rel", format!("{} must be >= 0", self.lambda_rel));
        }
        if self.eval_episodes == 0 {
            return fail("eval_episodes", "must be at least 1".into());
        }
        if self.eval_every == 0 {
            return fail("eval_every", "must be at least 1".into());
        }
        if self.segments_per_cycle == 0 {
            return fail("segments_per_cycle", "must be at least 1".into());
        }
        if self.update_epochs == 0 {
            return fail("update_epochs", "must be at least 1".into());
        }
        if let Some(eps) = self.clip {
            if !(eps > 0.0 && eps < 1.0) {
                return fail("clip", format!("{eps} must be in (0, 1)"));
            }
        }
        if self.reward_width == 0 || self.policy_width == 0 {
            return fail("width", "network widths must be positive".into());
        }
        if !(crate::policy::LOG_STD_MIN..=crate::policy::LOG_STD_MAX).contains(&self.init_log_std) {
            return fail("init_log_std", format!("{} outside [-5, 2]", self.init_log_std));
        }
        if self.feature_mode == FeatureMode::Flattened && spec.episode_len % self.j != 0 {
            return fail(
                "feature_mode",
                "flattened features need episode_len to be a multiple of j".into(),
            );
        }
        self.rating_loss()?;
        Ok(())
    }

    pub fn step_config(&self) -> StepConfig {
        StepConfig {
            gamma: self.gamma,
            omega: self.omega.clone(),
            kl_penalty: self.kl_penalty,
            penalty_sign: self.penalty_sign,
            action_noise: self.policy_dist_noise,
            penalty: PenaltyOptions {
                include_dim_constant: self.include_dim_constant,
                direction: self.kl_direction,
            },
            lambda_rel: self.lambda_rel,
            feature_mode: self.feature_mode,
            j: self.j,
            clip: self.clip,
        }
    }
}

/// Settings of a single combined policy step.
#[derive(Debug, Clone)]
pub struct StepConfig {
    pub gamma: f64,
    pub omega: KlWeights,
    pub kl_penalty: bool,
    pub penalty_sign: PenaltySign,
    pub action_noise: bool,
    pub penalty: PenaltyOptions,
    pub lambda_rel: f64,
    pub feature_mode: FeatureMode,
    pub j: usize,
    pub clip: Option<f64>,
}

/// Fits one Gaussian per penalized class `0..n−2`; empty or unfittable
/// classes map to `None`.
pub fn fit_class_dists(
    dataset: &RatingDataset,
    lambda_rel: f64,
    mode: FeatureMode,
) -> Result<Vec<(usize, Option<GaussianDist>)>> {
    let mut out = Vec::with_capacity(dataset.n().saturating_sub(1));
    for class in 0..dataset.n().saturating_sub(1) {
        let dist = match dataset.class_features(class, mode) {
            Ok(x) => match gaussian::fit_gaussian(&x, lambda_rel) {
                Ok(g) => Some(g),
                Err(Error::InsufficientSamples { .. }) => None,
                Err(e) => return Err(e),
            },
            Err(Error::EmptyClass(_)) => None,
            Err(e) => return Err(e),
        };
        out.push((class, dist));
    }
    Ok(out)
}

/// Learned-reward returns of each rollout episode.
pub fn rollout_returns(rollouts: &Rollouts, reward: &RewardModel, gamma: f64) -> Result<Vec<f64>> {
    reward.windowed_returns(&rollouts.features(), rollouts.len, gamma)
}

/// Per-step weights `(R̂_b − mean R̂)/B` of the score-function surrogate.
fn advantage_weights(returns: &[f64], len: usize) -> Vec<f64> {
    let b = returns.len() as f64;
    let baseline = returns.iter().sum::<f64>() / b;
    returns
        .iter()
        .flat_map(|r| std::iter::repeat_n((r - baseline) / b, len))
        .collect()
}

/// Recorded score-function surrogate `(1/B)·Σ_b (R̂_b − R̄)·Σ_t log π(a_t|s_t)`.
///
/// Its gradient is the baselined policy gradient; `R̂` comes from `reward`
/// only.
pub fn discounted_objective_tape(
    tape: &mut Tape,
    policy: &Policy,
    vars: &PolicyVars,
    rollouts: &Rollouts,
    reward: &RewardModel,
    gamma: f64,
) -> Result<Var> {
    if rollouts.episodes == 0 || rollouts.steps() == 0 {
        return Err(Error::EmptyBatch("no rollouts".into()));
    }
    let returns = rollout_returns(rollouts, reward, gamma)?;
    surrogate_from_returns(tape, policy, vars, rollouts, &returns, None, None)
}

fn surrogate_from_returns(
    tape: &mut Tape,
    policy: &Policy,
    vars: &PolicyVars,
    rollouts: &Rollouts,
    returns: &[f64],
    clip: Option<f64>,
    old_log_prob: Option<&Matrix>,
) -> Result<Var> {
    let weights = Matrix::column(&advantage_weights(returns, rollouts.len));
    let states = tape.constant(rollouts.states.clone());
    let logp = policy.log_prob_tape(tape, vars, states, &rollouts.raw_actions)?;
    match (clip, old_log_prob) {
        (Some(eps), Some(old)) => {
            let old = tape.constant(old.clone());
            let diff = tape.sub(logp, old)?;
            let ratio = tape.exp(diff);
            let clipped = tape.clamp(ratio, 1.0 - eps, 1.0 + eps);
            let w = tape.constant(weights);
            let a = tape.mul(ratio, w)?;
            let b = tape.mul(clipped, w)?;
            let m = tape.min(a, b)?;
            Ok(tape.sum(m))
        }
        _ => {
            let w = tape.constant(weights);
            let weighted = tape.mul(logp, w)?;
            Ok(tape.sum(weighted))
        }
    }
}

/// Value of the surrogate and its flat gradient.
pub fn discounted_objective(
    policy: &Policy,
    rollouts: &Rollouts,
    reward: &RewardModel,
    gamma: f64,
) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let vars = policy.register(&mut tape);
    let j = discounted_objective_tape(&mut tape, policy, &vars, rollouts, reward, gamma)?;
    tape.backward(j)?;
    Ok((tape.value(j).item(), flat_grad(policy, &tape, &vars)))
}

fn flat_grad(policy: &Policy, tape: &Tape, vars: &PolicyVars) -> Vec<f64> {
    let mut g = policy.net().grads_flat(tape, &vars.net);
    g.extend_from_slice(tape.grad_or_zeros(vars.log_std).data());
    g
}

/// Feature rows `[s_t, μ_θ(s_t)]` of the current batch, reshaped into whole
/// windows in flattened mode.
fn policy_features_tape(
    tape: &mut Tape,
    policy: &Policy,
    vars: &PolicyVars,
    rollouts: &Rollouts,
    mode: FeatureMode,
    j: usize,
) -> Result<Var> {
    let states = tape.constant(rollouts.states.clone());
    let mean = policy.mean_tape(tape, vars, states)?;
    let x = tape.hcat(states, mean)?;
    match mode {
        FeatureMode::Pooled => Ok(x),
        FeatureMode::Flattened => {
            let (rows, d) = tape.shape(x);
            if rollouts.len % j != 0 {
                return Err(Error::config("flattened features need episode_len to be a multiple of j"));
            }
            tape.reshape(x, rows / j, j * d)
        }
    }
}

/// Recorded `D_π`: Gaussian over the policy's `(s, μ_θ(s))` rows. With
/// `action_noise` the policy variance `σ²` is added on the action diagonal,
/// giving the covariance of `(s, a)` with `a ~ π_θ(·|s)`.
pub fn policy_feature_dist_tape(
    tape: &mut Tape,
    policy: &Policy,
    vars: &PolicyVars,
    rollouts: &Rollouts,
    lambda_rel: f64,
    mode: FeatureMode,
    j: usize,
    action_noise: bool,
) -> Result<gaussian::TapeGaussian> {
    let x = policy_features_tape(tape, policy, vars, rollouts, mode, j)?;
    let (mut g, _) = fit_gaussian_tape(tape, x, lambda_rel)?;
    if action_noise {
        let d = tape.shape(g.cov).0;
        let (sd, ad) = (policy.state_dim(), policy.action_dim());
        let step = sd + ad;
        let blocks = d / step;
        let mut select = Matrix::zeros(ad, d);
        for b in 0..blocks {
            for k in 0..ad {
                select.data_mut()[k * d + b * step + sd + k] = 1.0;
            }
        }
        let ls = tape.clamp(vars.log_std, crate::policy::LOG_STD_MIN, crate::policy::LOG_STD_MAX);
        let two_ls = tape.scale(ls, 2.0);
        let var = tape.exp(two_ls);
        let select = tape.constant(select);
        let row = tape.matmul(var, select)?;
        let ones = tape.constant(Matrix::filled(d, 1, 1.0));
        let spread = tape.matmul(ones, row)?;
        let eye = tape.constant(Matrix::identity(d));
        let diag = tape.mul(spread, eye)?;
        g.cov = tape.add(g.cov, diag)?;
    }
    Ok(g)
}

pub fn policy_feature_dist(policy: &Policy, rollouts: &Rollouts, lambda_rel: f64) -> Result<GaussianDist> {
    let x = rollouts.states.hcat(&policy.mean(&rollouts.states)?)?;
    gaussian::fit_gaussian(&x, lambda_rel)
}

/// What one combined step saw and did.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    /// Surrogate combined with the signed penalty.
    pub objective: f64,
    pub surrogate: f64,
    pub penalty: PenaltyReport,
    pub grad_norm: f64,
    pub mean_learned_return: f64,
}

impl StepDiagnostics {
    pub fn dump(&self) -> String {
        serde_json::to_string(self).unwrap_or_else(|_| format!("{self:?}"))
    }
}

/// Which terms of the combined objective to differentiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Terms {
    Both,
    SurrogateOnly,
    PenaltyOnly,
}

/// Gradient of `surrogate − Σ ω_i·KL_i` with respect to the flat policy
/// parameters, without applying it.
pub fn combined_gradient(
    policy: &Policy,
    rollouts: &Rollouts,
    returns: &[f64],
    class_dists: &[(usize, Option<GaussianDist>)],
    cfg: &StepConfig,
    old_log_prob: Option<&Matrix>,
    terms: Terms,
) -> Result<(Vec<f64>, StepDiagnostics)> {
    let mut tape = Tape::new();
    let vars = policy.register(&mut tape);
    let surrogate = surrogate_from_returns(&mut tape, policy, &vars, rollouts, returns, cfg.clip, old_log_prob)?;
    let mut diag = StepDiagnostics {
        surrogate: tape.value(surrogate).item(),
        mean_learned_return: returns.iter().sum::<f64>() / returns.len() as f64,
        ..Default::default()
    };
    let mut penalty: Option<Var> = None;
    if cfg.kl_penalty && class_dists.iter().any(|(_, d)| d.is_some()) {
        let dpi = policy_feature_dist_tape(
            &mut tape,
            policy,
            &vars,
            rollouts,
            cfg.lambda_rel,
            cfg.feature_mode,
            cfg.j,
            cfg.action_noise,
        )?;
        let (p, report) = weighted_penalty_tape(&mut tape, class_dists, dpi, &cfg.omega, cfg.penalty)?;
        debug_assert!(report.terms.iter().all(|t| t.class < cfg.omega.len()));
        penalty = p;
        diag.penalty = report;
    } else if cfg.kl_penalty {
        diag.penalty.skipped = class_dists.iter().map(|(c, _)| *c).collect();
    }
    let root = match (terms, penalty) {
        (Terms::SurrogateOnly, _) | (Terms::Both, None) => surrogate,
        (Terms::PenaltyOnly, None) => tape.scale(surrogate, 0.0),
        (Terms::PenaltyOnly, Some(p)) => tape.scale(p, cfg.penalty_sign.factor()),
        (Terms::Both, Some(p)) => {
            let signed = tape.scale(p, cfg.penalty_sign.factor());
            tape.add(surrogate, signed)?
        }
    };
    diag.objective = diag.surrogate + cfg.penalty_sign.factor() * diag.penalty.total;
    tape.backward(root)?;
    let g = flat_grad(policy, &tape, &vars);
    diag.grad_norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok((g, diag))
}

/// One update of the policy: ascent on `surrogate − penalty`, repeated
/// `epochs` times on the same batch. NaN or infinite gradients abort.
pub fn combined_gradient_step(
    policy: &mut Policy,
    rollouts: &Rollouts,
    reward: &RewardModel,
    class_dists: &[(usize, Option<GaussianDist>)],
    cfg: &StepConfig,
    opt: &mut Optimizer,
    epochs: usize,
) -> Result<Vec<StepDiagnostics>> {
    let returns = rollout_returns(rollouts, reward, cfg.gamma)?;
    let old = match cfg.clip {
        Some(_) => Some(Matrix::column(&policy.log_prob(&rollouts.states, &rollouts.raw_actions)?)),
        None => None,
    };
    let mut out = Vec::with_capacity(epochs);
    for _ in 0..epochs.max(1) {
        let (g, diag) = combined_gradient(policy, rollouts, &returns, class_dists, cfg, old.as_ref(), Terms::Both)?;
        if g.iter().any(|v| !v.is_finite()) || !diag.objective.is_finite() {
            return Err(Error::NonFiniteGradient(diag.dump()));
        }
        let mut params = policy.params_flat();
        opt.ascend(&mut params, &g);
        policy.set_params_flat(&params)?;
        out.push(diag);
    }
    Ok(out)
}

/// Mean and standard error of undiscounted true returns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub mean: f64,
    pub stderr: f64,
    pub returns: Vec<f64>,
}

impl EvalResult {
    pub fn from_returns(returns: Vec<f64>) -> Self {
        let n = returns.len() as f64;
        let mean = returns.iter().sum::<f64>() / n;
        let stderr = if returns.len() > 1 {
            let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        } else {
            0.0
        };
        Self { mean, stderr, returns }
    }
}

/// Deterministic episodes scored with the hidden reward.
pub fn evaluate(actor: &dyn Actor, spec: &EnvSpec, episodes: usize, seed: u64) -> Result<EvalResult> {
    if episodes == 0 {
        return Err(Error::config("evaluation needs at least one episode"));
    }
    let mut returns = Vec::with_capacity(episodes);
    for e in 0..episodes {
        let mut r = rng::stream(seed, &[STREAM_EVAL, e as u64]);
        let mut env = crate::envs::Env::new(spec.clone(), rng::derive_seed(seed, &[STREAM_EVAL, e as u64]));
        let mut total = 0.0;
        loop {
            let a = actor.act(env.state(), false, &mut r)?;
            let step = env.step(&a)?;
            total += step.true_reward;
            if step.done {
                break;
            }
        }
        returns.push(total);
    }
    Ok(EvalResult::from_returns(returns))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRecord {
    pub cycle: usize,
    pub env_steps: u64,
    pub mean_return: f64,
    pub stderr: f64,
}

/// Evaluation records of a run, in cycle order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LearningCurve {
    pub records: Vec<CurveRecord>,
}

impl LearningCurve {
    pub const HEADER: &'static str = "cycle,env_steps,mean_return,stderr";

    pub fn push(&mut self, rec: CurveRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if rec.cycle <= last.cycle {
                return Err(Error::InvalidInput(format!(
                    "curve cycles must increase ({} after {})",
                    rec.cycle, last.cycle
                )));
            }
        }
        self.records.push(rec);
        Ok(())
    }

    pub fn final_return(&self) -> Option<f64> {
        self.records.last().map(|r| r.mean_return)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(s, "{},{},{},{}", r.cycle, r.env_steps, r.mean_return, r.stderr);
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == Self::HEADER => {}
            _ => {
                return Err(Error::Parse {
                    line: 1,
                    msg: format!("expected header `{}`", Self::HEADER),
                })
            }
        }
        let mut curve = LearningCurve::default();
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse { line: i + 2, msg };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(err(format!("expected 4 fields, got {}", f.len())));
            }
            let rec = CurveRecord {
                cycle: f[0].trim().parse().map_err(|e| err(format!("cycle: {e}")))?,
                env_steps: f[1].trim().parse().map_err(|e| err(format!("env_steps: {e}")))?,
                mean_return: f[2].trim().parse().map_err(|e| err(format!("mean_return: {e}")))?,
                stderr: f[3].trim().parse().map_err(|e| err(format!("stderr: {e}")))?,
            };
            curve.push(rec).map_err(|e| err(e.to_string()))?;
        }
        Ok(curve)
    }
}

/// Live progress, shared with the rating service.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainerStatus {
    pub phase: String,
    pub cycle: usize,
    pub n: usize,
    pub buffer_sizes: Vec<usize>,
    pub eval_return: Option<f64>,
}

pub type SharedQueue = Arc<Mutex<RatingQueue>>;
pub type SharedStatus = Arc<Mutex<TrainerStatus>>;

/// Connections to the outside world during a run.
#[derive(Debug, Clone, Default)]
pub struct RunHooks {
    pub queue: Option<SharedQueue>,
    pub status: Option<SharedStatus>,
    /// How often the trainer checks the queue while waiting for ratings.
    pub poll: Option<Duration>,
}

/// Source of ratings for phase 1.
pub trait Rater {
    fn rate(&mut self, segments: Vec<Segment>, spec: &EnvSpec) -> Result<Vec<(Segment, usize)>>;
}

impl Rater for SyntheticRater {
    fn rate(&mut self, segments: Vec<Segment>, _spec: &EnvSpec) -> Result<Vec<(Segment, usize)>> {
        segments
            .into_iter()
            .map(|s| {
                let c = SyntheticRater::rate(self, &s)?;
                Ok((s, c))
            })
            .collect()
    }
}

/// Publishes segments to the shared queue and blocks until all of them are
/// rated. Ratings are taken only here, between cycles.
pub struct QueueRater {
    pub queue: SharedQueue,
    pub poll: Duration,
}

impl Rater for QueueRater {
    fn rate(&mut self, segments: Vec<Segment>, spec: &EnvSpec) -> Result<Vec<(Segment, usize)>> {
        let wanted = segments.len();
        {
            let mut q = self.queue.lock().map_err(|_| Error::Startup("rating queue poisoned".into()))?;
            for s in segments {
                q.enqueue(s, spec)?;
            }
        }
        let mut rated = Vec::with_capacity(wanted);
        while rated.len() < wanted {
            std::thread::sleep(self.poll);
            let mut q = self.queue.lock().map_err(|_| Error::Startup("rating queue poisoned".into()))?;
            rated.extend(q.drain_rated());
        }
        Ok(rated)
    }
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub curve: LearningCurve,
    pub reward_model: RewardModel,
    pub policy: Policy,
    pub dataset: RatingDataset,
    pub reward_losses: Vec<f64>,
    pub diagnostics: Vec<StepDiagnostics>,
}

fn publish(status: &Option<SharedStatus>, f: impl FnOnce(&mut TrainerStatus)) {
    if let Some(s) = status {
        if let Ok(mut g) = s.lock() {
            f(&mut g);
        }
    }
}

/// Phase 1: `M` cycles of sampling from the initial policy, rating, and
/// reward-model updates.
pub fn reward_phase(
    cfg: &TrainerConfig,
    spec: &EnvSpec,
    policy: &Policy,
    rater: &mut dyn Rater,
    status: &Option<SharedStatus>,
) -> Result<(RatingDataset, RewardModel, Vec<f64>, u64)> {
    let loss_cfg = cfg.rating_loss()?;
    let mut r = rng::stream(cfg.seed, &[STREAM_REWARD_INIT]);
    let mut model = RewardModel::new(spec.state_dim, spec.action_dim, cfg.reward_width, &mut r);
    let mut dataset = RatingDataset::new(cfg.n);
    let mut losses = Vec::new();
    let mut env_steps = 0u64;
    for cycle in 0..cfg.m_cycles {
        let segs = sample_segments(
            policy,
            spec,
            cfg.segments_per_cycle,
            cfg.j,
            cfg.seed,
            cfg.gamma,
            cycle as u64,
        )?;
        env_steps += (cfg.segments_per_cycle * spec.episode_len) as u64;
        for (s, c) in rater.rate(segs, spec)? {
            dataset.insert_rated(s, c)?;
        }
        let train = RewardTrainConfig {
            steps: cfg.reward_steps,
            lr: cfg.reward_lr,
            optimizer: cfg.reward_optimizer,
            batch_size: cfg.reward_batch_size,
            seed: rng::derive_seed(cfg.seed, &[cycle as u64]),
            final_lr_fraction: cfg.reward_final_lr_fraction,
        };
        let (m, h) = train_reward_model(&model, &dataset, &loss_cfg, &train)?;
        model = m;
        info!(
            "reward cycle {cycle}: buffers {:?}, last loss {:?}",
            dataset.buffer_sizes(),
            h.last()
        );
        losses.extend(h);
        publish(status, |s| {
            s.phase = "reward".into();
            s.cycle = cycle + 1;
            s.buffer_sizes = dataset.buffer_sizes();
        });
    }
    Ok((dataset, model, losses, env_steps))
}

/// Phase 2: `T` cycles of rollouts and combined steps against a fixed reward
/// model and dataset. Evaluates before the first update, every `eval_every`
/// cycles, and after the last one.
pub fn policy_phase(
    cfg: &TrainerConfig,
    spec: &EnvSpec,
    mut policy: Policy,
    reward: &RewardModel,
    dataset: &RatingDataset,
    env_steps_before: u64,
    status: &Option<SharedStatus>,
) -> Result<(Policy, LearningCurve, Vec<StepDiagnostics>)> {
    let mut curve = LearningCurve::default();
    let mut diags = Vec::new();
    if cfg.t_cycles == 0 {
        return Ok((policy, curve, diags));
    }
    let step_cfg = cfg.step_config();
    let class_dists = if cfg.kl_penalty {
        fit_class_dists(dataset, cfg.lambda_rel, cfg.feature_mode)?
    } else {
        Vec::new()
    };
    let mut opt = Optimizer::new(cfg.policy_optimizer, cfg.alpha, policy.num_params());
    let mut env_steps = env_steps_before;
    let eval_seed = rng::derive_seed(cfg.seed, &[STREAM_EVAL]);
    let record = |cycle: usize, policy: &Policy, env_steps: u64, curve: &mut LearningCurve| -> Result<()> {
        let ev = evaluate(policy, spec, cfg.eval_episodes, eval_seed)?;
        info!("policy cycle {cycle}: true return {:.3} ± {:.3}", ev.mean, ev.stderr);
        publish(status, |s| s.eval_return = Some(ev.mean));
        curve.push(CurveRecord {
            cycle,
            env_steps,
            mean_return: ev.mean,
            stderr: ev.stderr,
        })
    };
    record(0, &policy, env_steps, &mut curve)?;
    for cycle in 1..=cfg.t_cycles {
        let rollouts = collect_rollouts(
            &policy,
            spec,
            cfg.batch_size,
            rng::derive_seed(cfg.seed, &[rng::STREAM_POLICY_ROLLOUTS, cycle as u64]),
        )?;
        env_steps += rollouts.steps() as u64;
        let d = combined_gradient_step(
            &mut policy,
            &rollouts,
            reward,
            &class_dists,
            &step_cfg,
            &mut opt,
            cfg.update_epochs,
        )?;
        debug!("cycle {cycle}: {}", d.last().map(|x| x.dump()).unwrap_or_default());
        diags.extend(d);
        publish(status, |s| {
            s.phase = "policy".into();
            s.cycle = cycle;
        });
        if cycle % cfg.eval_every == 0 || cycle == cfg.t_cycles {
            record(cycle, &policy, env_steps, &mut curve)?;
        }
    }
    Ok((policy, curve, diags))
}

pub fn initial_policy(cfg: &TrainerConfig, spec: &EnvSpec) -> Policy {
    let mut r = rng::stream(cfg.seed, &[STREAM_POLICY_INIT]);
    Policy::new(spec, cfg.policy_width, cfg.init_log_std, &mut r)
}

/// Runs both phases end to end. With the synthetic rater the result is a
/// pure function of `cfg`.
pub fn run_training(cfg: &TrainerConfig, hooks: &RunHooks) -> Result<RunOutput> {
    cfg.validate()?;
    let spec = cfg.env_spec()?;
    let policy = initial_policy(cfg, &spec);
    publish(&hooks.status, |s| {
        s.n = cfg.n;
        s.phase = "reward".into();
        s.buffer_sizes = vec![0; cfg.n];
    });
    let mut rater: Box<dyn Rater> = match cfg.rater {
        RaterKind::Synthetic => Box::new(SyntheticRater::calibrate(&spec, cfg.n, cfg.j, cfg.gamma)?),
        RaterKind::Human => {
            let queue = hooks
                .queue
                .clone()
                .ok_or_else(|| Error::Startup("human rating needs a reachable rating queue".into()))?;
            Box::new(QueueRater {
                queue,
                poll: hooks.poll.unwrap_or(Duration::from_millis(200)),
            })
        }
    };
    let (dataset, reward_model, reward_losses, steps) =
        reward_phase(cfg, &spec, &policy, rater.as_mut(), &hooks.status)?;
    let (policy, curve, diagnostics) =
        policy_phase(cfg, &spec, policy, &reward_model, &dataset, steps, &hooks.status)?;
    Ok(RunOutput {
        curve,
        reward_model,
        policy,
        dataset,
        reward_losses,
        diagnostics,
    })
}
