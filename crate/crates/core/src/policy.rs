//! Action sources: the trainable Gaussian policy plus the random and
//! scripted baselines used for calibration.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::envs::EnvSpec;
use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp, MlpVars};
use crate::rng::{self, Rng, STREAM_POLICY_ROLLOUTS};
use crate::tensor::{Matrix, Tape, Var};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
pub const POLICY_HIDDEN_LAYERS: usize = 3;

/// Anything that maps a state to an action.
pub trait Actor {
    fn act(&self, state: &[f64], stochastic: bool, rng: &mut Rng) -> Result<Vec<f64>>;
}

/// Uniform actions over the bounds.
#[derive(Debug, Clone)]
pub struct RandomActor {
    spec: EnvSpec,
}

impl RandomActor {
    pub fn new(spec: EnvSpec) -> Self {
        Self { spec }
    }
}

impl Actor for RandomActor {
    fn act(&self, _state: &[f64], _stochastic: bool, rng: &mut Rng) -> Result<Vec<f64>> {
        Ok(self
            .spec
            .action_low
            .iter()
            .zip(&self.spec.action_high)
            .map(|(lo, hi)| rng.random_range(*lo..=*hi))
            .collect())
    }
}

/// The hand-written controller shipped with each environment.
#[derive(Debug, Clone)]
pub struct ScriptedActor {
    spec: EnvSpec,
}

impl ScriptedActor {
    pub fn new(spec: EnvSpec) -> Self {
        Self { spec }
    }
}

impl Actor for ScriptedActor {
    fn act(&self, state: &[f64], _stochastic: bool, _rng: &mut Rng) -> Result<Vec<f64>> {
        if state.len() != self.spec.state_dim {
            return Err(Error::dim("state dimension mismatch"));
        }
        Ok(self.spec.scripted_action(state))
    }
}

/// Diagonal Gaussian policy. The mean is `mid + half·tanh(net(s))`, so it
/// always lies inside the action bounds; the log-std is a free vector
/// clamped to `[LOG_STD_MIN, LOG_STD_MAX]` when used.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    net: Mlp,
    log_std: Vec<f64>,
    mid: Vec<f64>,
    half: Vec<f64>,
}

/// Tape handles of a [`Policy`].
#[derive(Debug, Clone)]
pub struct PolicyVars {
    pub net: MlpVars,
    pub log_std: Var,
}

impl Policy {
    pub fn new(spec: &EnvSpec, width: usize, init_log_std: f64, rng: &mut Rng) -> Self {
        let mut sizes = vec![spec.state_dim];
        sizes.extend(std::iter::repeat_n(width, POLICY_HIDDEN_LAYERS));
        sizes.push(spec.action_dim);
        let net = Mlp::new(&sizes, Activation::Tanh, Activation::Tanh, rng);
        Self::from_parts(net, vec![init_log_std; spec.action_dim], spec).expect("consistent sizes")
    }

    pub fn from_parts(net: Mlp, log_std: Vec<f64>, spec: &EnvSpec) -> Result<Self> {
        if net.input_dim() != spec.state_dim || net.output_dim() != spec.action_dim {
            return Err(Error::dim("policy network does not match the environment"));
        }
        if log_std.len() != spec.action_dim {
            return Err(Error::dim("log_std length must equal action_dim"));
        }
        if net.output_activation() != Activation::Tanh {
            return Err(Error::config("policy output activation must be tanh"));
        }
        let mid = spec
            .action_low
            .iter()
            .zip(&spec.action_high)
            .map(|(l, h)| 0.5 * (l + h))
            .collect();
        let half = spec
            .action_low
            .iter()
            .zip(&spec.action_high)
            .map(|(l, h)| 0.5 * (h - l))
            .collect();
        Ok(Self {
            net,
            log_std,
            mid,
            half,
        })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn state_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.net.output_dim()
    }

    /// Raw, unclamped log-std parameters.
    pub fn log_std_raw(&self) -> &[f64] {
        &self.log_std
    }

    pub fn log_std(&self) -> Vec<f64> {
        self.log_std
            .iter()
            .map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.net.num_params() + self.log_std.len()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut p = self.net.params_flat();
        p.extend_from_slice(&self.log_std);
        p
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::dim(format!(
                "expected {} policy parameters, got {}",
                self.num_params(),
                params.len()
            )));
        }
        let n = self.net.num_params();
        self.net.set_params_flat(&params[..n])?;
        self.log_std.copy_from_slice(&params[n..]);
        Ok(())
    }

    /// Mean actions for a batch of states.
    pub fn mean(&self, states: &Matrix) -> Result<Matrix> {
        let mut out = self.net.forward(states)?;
        for i in 0..out.rows() {
            for ((v, m), h) in out.row_mut(i).iter_mut().zip(&self.mid).zip(&self.half) {
                *v = m + h * *v;
            }
        }
        Ok(out)
    }

    fn check_state(&self, s: &[f64]) -> Result<()> {
        if s.len() != self.state_dim() {
            return Err(Error::dim(format!(
                "policy expects {} state entries, got {}",
                self.state_dim(),
                s.len()
            )));
        }
        Ok(())
    }

    /// Mean plus Gaussian noise, before clamping.
    pub fn sample_raw(&self, state: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
        self.check_state(state)?;
        let mean = self.mean(&Matrix::row_vector(state))?.into_data();
        Ok(mean
            .iter()
            .zip(self.log_std())
            .map(|(m, ls)| {
                let z: f64 = StandardNormal.sample(rng);
                m + ls.exp() * z
            })
            .collect())
    }

    pub fn clamp(&self, action: &[f64]) -> Vec<f64> {
        action
            .iter()
            .zip(self.mid.iter().zip(&self.half))
            .map(|(a, (m, h))| a.clamp(m - h, m + h))
            .collect()
    }

    pub fn register(&self, tape: &mut Tape) -> PolicyVars {
        PolicyVars {
            net: self.net.register(tape),
            log_std: tape.param(Matrix::row_vector(&self.log_std)),
        }
    }

    /// Recorded mean actions, `rows(states) × action_dim`.
    pub fn mean_tape(&self, tape: &mut Tape, vars: &PolicyVars, states: Var) -> Result<Var> {
        let t = self.net.forward_tape(tape, &vars.net, states)?;
        let half = tape.constant(Matrix::row_vector(&self.half));
        let mid = tape.constant(Matrix::row_vector(&self.mid));
        let scaled = tape.mul_row(t, half)?;
        tape.add_row(scaled, mid)
    }

    /// Recorded `log π(a_t | s_t)` per row, `N × 1`.
    pub fn log_prob_tape(&self, tape: &mut Tape, vars: &PolicyVars, states: Var, actions: &Matrix) -> Result<Var> {
        let n = tape.shape(states).0;
        if actions.shape() != (n, self.action_dim()) {
            return Err(Error::dim("actions do not match states"));
        }
        let mean = self.mean_tape(tape, vars, states)?;
        let ls = tape.clamp(vars.log_std, LOG_STD_MIN, LOG_STD_MAX);
        let neg_ls = tape.neg(ls);
        let inv_std = tape.exp(neg_ls);
        let a = tape.constant(actions.clone());
        let diff = tape.sub(a, mean)?;
        let z = tape.mul_row(diff, inv_std)?;
        let z2 = tape.square(z);
        let maha = tape.sum_cols(z2);
        let maha = tape.scale(maha, -0.5);
        let sum_ls = tape.sum(ls);
        let norm = tape.add_scalar(
            sum_ls,
            0.5 * self.action_dim() as f64 * (2.0 * std::f64::consts::PI).ln(),
        );
        let ones = tape.constant(Matrix::filled(n, 1, 1.0));
        let norm_col = tape.mul_scalar(ones, norm)?;
        tape.sub(maha, norm_col)
    }

    /// Value-level log density of each row, `N` entries.
    pub fn log_prob(&self, states: &Matrix, actions: &Matrix) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let s = tape.constant(states.clone());
        let lp = self.log_prob_tape(&mut tape, &vars, s, actions)?;
        Ok(tape.value(lp).data().to_vec())
    }
}

impl Actor for Policy {
    fn act(&self, state: &[f64], stochastic: bool, rng: &mut Rng) -> Result<Vec<f64>> {
        let a = if stochastic {
            self.sample_raw(state, rng)?
        } else {
            self.check_state(state)?;
            self.mean(&Matrix::row_vector(state))?.into_data()
        };
        Ok(self.clamp(&a))
    }
}

/// Whole-episode rollouts stacked row-wise, episode by episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollouts {
    /// `(episodes·len) × state_dim`
    pub states: Matrix,
    /// Sampled actions before clamping; these are scored by `log π`.
    pub raw_actions: Matrix,
    /// Actions the environment executed.
    pub actions: Matrix,
    pub episodes: usize,
    pub len: usize,
}

impl Rollouts {
    pub fn steps(&self) -> usize {
        self.states.rows()
    }

    /// `[states | executed actions]`, one row per step.
    pub fn features(&self) -> Matrix {
        self.states.hcat(&self.actions).expect("equal rows")
    }
}

/// Runs `episodes` stochastic episodes of the policy. Reward is not recorded.
pub fn collect_rollouts(policy: &Policy, spec: &EnvSpec, episodes: usize, seed: u64) -> Result<Rollouts> {
    if episodes == 0 {
        return Err(Error::EmptyBatch("need at least one rollout episode".into()));
    }
    let len = spec.episode_len;
    let mut states = Vec::with_capacity(episodes * len * spec.state_dim);
    let mut raw = Vec::with_capacity(episodes * len * spec.action_dim);
    let mut executed = Vec::with_capacity(episodes * len * spec.action_dim);
    for e in 0..episodes {
        let mut r = rng::stream(seed, &[STREAM_POLICY_ROLLOUTS, e as u64]);
        let mut s = spec.reset(r.random());
        for _ in 0..len {
            let a = policy.sample_raw(&s, &mut r)?;
            let ac = policy.clamp(&a);
            let (next, _) = spec.transition(&s, &ac)?;
            states.extend_from_slice(&s);
            raw.extend_from_slice(&a);
            executed.extend_from_slice(&ac);
            s = next;
        }
    }
    let n = episodes * len;
    Ok(Rollouts {
        states: Matrix::new(n, spec.state_dim, states)?,
        raw_actions: Matrix::new(n, spec.action_dim, raw)?,
        actions: Matrix::new(n, spec.action_dim, executed)?,
        episodes,
        len,
    })
}
