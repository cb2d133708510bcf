//! Deterministic toy continuous-control environments.
//!
//! Each environment exposes a hidden ground-truth reward in `[0, 1]`. The
//! learner never sees it: it reaches the synthetic rater through
//! [`crate::segments::Segment::true_return`] and the evaluator through
//! [`StepResult::true_reward`], and nothing else.
//!
//! Actions outside the bounds are clamped, not rejected.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, STREAM_RESET};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EnvKind {
    /// 2-D point mass steered by acceleration toward a goal at the origin.
    PointMassReach,
    /// Cart with a hinged pole; reward tracks how upright the pole is.
    CartpoleBalanceLite,
    /// 1-D walker rewarded for holding a target velocity.
    LineWalk,
}

impl EnvKind {
    pub const ALL: [EnvKind; 3] = [
        EnvKind::PointMassReach,
        EnvKind::CartpoleBalanceLite,
        EnvKind::LineWalk,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EnvKind::PointMassReach => "point-mass-reach",
            EnvKind::CartpoleBalanceLite => "cartpole-balance-lite",
            EnvKind::LineWalk => "line-walk",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "point-mass-reach" | "point-mass" => Ok(EnvKind::PointMassReach),
            "cartpole-balance-lite" | "cartpole" => Ok(EnvKind::CartpoleBalanceLite),
            "line-walk" => Ok(EnvKind::LineWalk),
            other => Err(Error::config(format!(
                "unknown environment `{other}` (expected point-mass-reach, cartpole-balance-lite or line-walk)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub name: String,
    pub kind: EnvKind,
    pub state_dim: usize,
    pub action_dim: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub episode_len: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub next_state: Vec<f64>,
    pub done: bool,
    /// Evaluation-only channel.
    pub true_reward: f64,
}

mod point_mass {
    pub const DT: f64 = 0.1;
    pub const DAMPING: f64 = 0.9;
    pub const ACCEL: f64 = 3.0;
    pub const GOAL: [f64; 2] = [0.0, 0.0];
    pub const BOUND: f64 = 1.0;
    pub const D_MAX: f64 = std::f64::consts::SQRT_2;
}

mod cartpole {
    pub const GRAVITY: f64 = 9.8;
    pub const MASS_CART: f64 = 1.0;
    pub const MASS_POLE: f64 = 0.1;
    pub const HALF_LENGTH: f64 = 0.5;
    pub const FORCE: f64 = 10.0;
    pub const TAU: f64 = 0.04;
    pub const TRACK: f64 = 2.4;
    pub const INIT_ANGLE: f64 = 0.3;
}

mod line_walk {
    pub const DAMPING: f64 = 0.8;
    pub const GAIN: f64 = 0.5;
    pub const DT: f64 = 0.1;
    pub const TARGET_VELOCITY: f64 = 1.5;
    pub const WIDTH: f64 = 0.75;
    pub const V_INIT: f64 = 2.5;
}

impl EnvSpec {
    pub const DEFAULT_EPISODE_LEN: usize = 50;

    pub fn new(kind: EnvKind) -> Self {
        let (state_dim, action_dim) = match kind {
            EnvKind::PointMassReach => (4, 2),
            EnvKind::CartpoleBalanceLite => (4, 1),
            EnvKind::LineWalk => (2, 1),
        };
        Self {
            name: kind.name().to_string(),
            kind,
            state_dim,
            action_dim,
            action_low: vec![-1.0; action_dim],
            action_high: vec![1.0; action_dim],
            episode_len: Self::DEFAULT_EPISODE_LEN,
            seed: 0,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        Ok(Self::new(EnvKind::from_name(name)?))
    }

    pub fn with_episode_len(mut self, episode_len: usize) -> Self {
        self.episode_len = episode_len;
        self
    }

    pub fn feature_dim(&self) -> usize {
        self.state_dim + self.action_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.state_dim == 0 || self.action_dim == 0 || self.episode_len == 0 {
            return Err(Error::config("environment dimensions must be positive"));
        }
        if self.action_low.len() != self.action_dim || self.action_high.len() != self.action_dim {
            return Err(Error::config("action bounds must match action_dim"));
        }
        if self
            .action_low
            .iter()
            .zip(&self.action_high)
            .any(|(lo, hi)| lo >= hi)
        {
            return Err(Error::config("action bounds need low < high"));
        }
        Ok(())
    }

    pub fn clamp_action(&self, action: &[f64]) -> Vec<f64> {
        action
            .iter()
            .zip(self.action_low.iter().zip(&self.action_high))
            .map(|(a, (lo, hi))| a.clamp(*lo, *hi))
            .collect()
    }

    /// Deterministic initial state for `(self, seed)`.
    pub fn reset(&self, seed: u64) -> Vec<f64> {
        let mut r = rng::stream(seed, &[STREAM_RESET, self.kind as u64]);
        match self.kind {
            EnvKind::PointMassReach => {
                let b = point_mass::BOUND;
                vec![r.random_range(-b..b), r.random_range(-b..b), 0.0, 0.0]
            }
            EnvKind::CartpoleBalanceLite => {
                let a = cartpole::INIT_ANGLE;
                vec![
                    r.random_range(-0.5..0.5),
                    r.random_range(-0.1..0.1),
                    r.random_range(-a..a),
                    r.random_range(-0.1..0.1),
                ]
            }
            EnvKind::LineWalk => {
                let v = line_walk::V_INIT;
                vec![r.random_range(-1.0..1.0), r.random_range(-v..v)]
            }
        }
    }

    /// Stateless transition. Returns the next state and the hidden reward of
    /// taking `action` in `state`.
    pub fn transition(&self, state: &[f64], action: &[f64]) -> Result<(Vec<f64>, f64)> {
        if state.len() != self.state_dim || action.len() != self.action_dim {
            return Err(Error::dim(format!(
                "{}: expected state {} / action {}, got {} / {}",
                self.name,
                self.state_dim,
                self.action_dim,
                state.len(),
                action.len()
            )));
        }
        if state.iter().chain(action).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "{}: non-finite state or action",
                self.name
            )));
        }
        let a = self.clamp_action(action);
        let out = match self.kind {
            EnvKind::PointMassReach => point_mass_step(state, &a),
            EnvKind::CartpoleBalanceLite => cartpole_step(state, &a),
            EnvKind::LineWalk => line_walk_step(state, &a),
        };
        Ok(out)
    }

    /// Hand-written controller that performs well on this environment.
    pub fn scripted_action(&self, state: &[f64]) -> Vec<f64> {
        let raw = match self.kind {
            EnvKind::PointMassReach => {
                let (kp, kd) = (2.0, 1.6);
                vec![
                    -kp * (state[0] - point_mass::GOAL[0]) - kd * state[2],
                    -kp * (state[1] - point_mass::GOAL[1]) - kd * state[3],
                ]
            }
            EnvKind::CartpoleBalanceLite => {
                vec![1.5 * state[2] + 0.4 * state[3] + 0.05 * state[0] + 0.1 * state[1]]
            }
            EnvKind::LineWalk => {
                vec![(line_walk::TARGET_VELOCITY - line_walk::DAMPING * state[1]) / line_walk::GAIN]
            }
        };
        self.clamp_action(&raw)
    }

    /// 2-D drawing of `state` in normalized `[0,1]²` coordinates.
    pub fn render_frame(&self, state: &[f64]) -> Result<Vec<Primitive>> {
        if state.len() != self.state_dim {
            return Err(Error::dim(format!(
                "{}: expected state of length {}",
                self.name, self.state_dim
            )));
        }
        let unit = |v: f64, bound: f64| ((v / bound).clamp(-1.0, 1.0) + 1.0) / 2.0;
        let frame = match self.kind {
            EnvKind::PointMassReach => vec![
                Primitive::Circle {
                    x: unit(state[0], point_mass::BOUND),
                    y: unit(state[1], point_mass::BOUND),
                    r: 0.03,
                    label: "agent".into(),
                },
                Primitive::Circle {
                    x: unit(point_mass::GOAL[0], point_mass::BOUND),
                    y: unit(point_mass::GOAL[1], point_mass::BOUND),
                    r: 0.04,
                    label: "goal".into(),
                },
            ],
            EnvKind::CartpoleBalanceLite => {
                let cx = 0.3 + 0.4 * unit(state[0], cartpole::TRACK);
                let cy = 0.4;
                let len = 0.3;
                let theta = if state[2].is_finite() { state[2] } else { 0.0 };
                vec![
                    Primitive::Line {
                        x0: 0.05,
                        y0: cy,
                        x1: 0.95,
                        y1: cy,
                        label: "track".into(),
                    },
                    Primitive::Circle {
                        x: cx,
                        y: cy,
                        r: 0.03,
                        label: "cart".into(),
                    },
                    Primitive::Line {
                        x0: cx,
                        y0: cy,
                        x1: cx + len * theta.sin(),
                        y1: cy + len * theta.cos(),
                        label: "pole".into(),
                    },
                ]
            }
            EnvKind::LineWalk => {
                let x = if state[0].is_finite() {
                    state[0].rem_euclid(10.0) / 10.0
                } else {
                    0.0
                };
                vec![
                    Primitive::Line {
                        x0: 0.0,
                        y0: 0.5,
                        x1: 1.0,
                        y1: 0.5,
                        label: "track".into(),
                    },
                    Primitive::Circle {
                        x,
                        y: 0.5,
                        r: 0.03,
                        label: "walker".into(),
                    },
                    Primitive::Text {
                        x: 0.05,
                        y: 0.9,
                        text: format!("v = {:.2}", state[1]),
                    },
                ]
            }
        };
        Ok(frame)
    }
}

/// Drawing primitive used to replay segments for human rating.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Primitive {
    Circle { x: f64, y: f64, r: f64, label: String },
    Line { x0: f64, y0: f64, x1: f64, y1: f64, label: String },
    Text { x: f64, y: f64, text: String },
}

impl Primitive {
    pub fn coordinates(&self) -> Vec<f64> {
        match self {
            Primitive::Circle { x, y, r, .. } => vec![*x, *y, *r],
            Primitive::Line { x0, y0, x1, y1, .. } => vec![*x0, *y0, *x1, *y1],
            Primitive::Text { x, y, .. } => vec![*x, *y],
        }
    }
}

/// Render by environment name.
pub fn render_frame(name: &str, state: &[f64]) -> Result<Vec<Primitive>> {
    EnvSpec::by_name(name)?.render_frame(state)
}

fn point_mass_step(s: &[f64], a: &[f64]) -> (Vec<f64>, f64) {
    use point_mass::*;
    let mut next = vec![0.0; 4];
    for k in 0..2 {
        let mut v = DAMPING * s[2 + k] + DT * ACCEL * a[k];
        let mut p = s[k] + DT * v;
        if p.abs() > BOUND {
            p = p.clamp(-BOUND, BOUND);
            v = 0.0;
        }
        next[k] = p;
        next[2 + k] = v;
    }
    let d = ((next[0] - GOAL[0]).powi(2) + (next[1] - GOAL[1]).powi(2)).sqrt();
    let reward = 1.0 - (d / D_MAX).min(1.0);
    (next, reward)
}

fn cartpole_step(s: &[f64], a: &[f64]) -> (Vec<f64>, f64) {
    use cartpole::*;
    let (x, x_dot, theta, theta_dot) = (s[0], s[1], s[2], s[3]);
    let force = FORCE * a[0];
    let total_mass = MASS_CART + MASS_POLE;
    let pole_ml = MASS_POLE * HALF_LENGTH;
    let (sin, cos) = theta.sin_cos();
    let temp = (force + pole_ml * theta_dot * theta_dot * sin) / total_mass;
    let theta_acc = (GRAVITY * sin - cos * temp)
        / (HALF_LENGTH * (4.0 / 3.0 - MASS_POLE * cos * cos / total_mass));
    let x_acc = temp - pole_ml * theta_acc * cos / total_mass;

    let mut x_dot_n = x_dot + TAU * x_acc;
    let mut x_n = x + TAU * x_dot_n;
    if x_n.abs() > TRACK {
        x_n = x_n.clamp(-TRACK, TRACK);
        x_dot_n = 0.0;
    }
    let theta_dot_n = theta_dot + TAU * theta_acc;
    let theta_n = wrap_angle(theta + TAU * theta_dot_n);
    let reward = (1.0 + theta_n.cos()) / 2.0;
    (vec![x_n, x_dot_n, theta_n, theta_dot_n], reward)
}

fn wrap_angle(t: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    (t + std::f64::consts::PI).rem_euclid(two_pi) - std::f64::consts::PI
}

fn line_walk_step(s: &[f64], a: &[f64]) -> (Vec<f64>, f64) {
    use line_walk::*;
    let v = DAMPING * s[1] + GAIN * a[0];
    let x = s[0] + DT * v;
    let z = (v - TARGET_VELOCITY) / WIDTH;
    (vec![x, v], (-z * z).exp())
}

/// Stateful wrapper that tracks the step count and signals the episode end.
#[derive(Debug, Clone)]
pub struct Env {
    spec: EnvSpec,
    state: Vec<f64>,
    t: usize,
}

impl Env {
    pub fn new(spec: EnvSpec, seed: u64) -> Self {
        let state = spec.reset(seed);
        Self { spec, state, t: 0 }
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn state(&self) -> &[f64] {
        &self.state
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        if self.t >= self.spec.episode_len {
            return Err(Error::InvalidInput("episode already finished".into()));
        }
        let (next, reward) = self.spec.transition(&self.state, action)?;
        self.state = next.clone();
        self.t += 1;
        Ok(StepResult {
            next_state: next,
            done: self.t == self.spec.episode_len,
            true_reward: reward,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn reset_is_deterministic() {
        let spec = EnvSpec::by_name("point-mass-reach").unwrap();
        assert_eq!(spec.reset(0), spec.reset(0));
    }

    #[test]
    fn different_seeds_give_different_states() {
        for kind in EnvKind::ALL {
            let spec = EnvSpec::new(kind);
            for s in 0..100u64 {
                assert_ne!(spec.reset(2 * s), spec.reset(2 * s + 1), "{kind:?} seed {s}");
            }
        }
    }

    #[test]
    fn cartpole_state_has_four_components() {
        let spec = EnvSpec::by_name("cartpole-balance-lite").unwrap();
        assert_eq!(spec.reset(3).len(), 4);
        assert_eq!(spec.state_dim, 4);
    }

    #[test]
    fn unknown_name_is_config_error() {
        assert!(matches!(EnvSpec::by_name("walker"), Err(Error::Config(_))));
        assert!(matches!(render_frame("walker", &[0.0]), Err(Error::Config(_))));
    }

    #[test]
    fn point_mass_at_goal_is_rewarded_fully() {
        let spec = EnvSpec::new(EnvKind::PointMassReach);
        let (next, r) = spec.transition(&[0.0, 0.0, 0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_eq!(r, 1.0);
        assert_eq!(next, vec![0.0; 4]);
    }

    #[test]
    fn transition_is_deterministic() {
        for kind in EnvKind::ALL {
            let spec = EnvSpec::new(kind);
            let s = spec.reset(9);
            let a = vec![0.3; spec.action_dim];
            assert_eq!(spec.transition(&s, &a).unwrap(), spec.transition(&s, &a).unwrap());
        }
    }

    #[test]
    fn nan_input_rejected() {
        let spec = EnvSpec::new(EnvKind::LineWalk);
        assert!(matches!(
            spec.transition(&[f64::NAN, 0.0], &[0.0]),
            Err(Error::InvalidInput(_))
        ));
        assert!(matches!(
            spec.transition(&[0.0, 0.0], &[f64::NAN]),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn random_rollouts_keep_reward_in_unit_interval() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for kind in EnvKind::ALL {
            let spec = EnvSpec::new(kind).with_episode_len(200);
            let mut env = Env::new(spec.clone(), 4);
            for t in 0..200 {
                let a: Vec<f64> = (0..spec.action_dim).map(|_| rng.random_range(-2.0..2.0)).collect();
                let step = env.step(&a).unwrap();
                assert!((0.0..=1.0).contains(&step.true_reward));
                assert!(step.next_state.iter().all(|v| v.is_finite()));
                assert_eq!(step.done, t == 199);
            }
            assert!(env.step(&vec![0.0; spec.action_dim]).is_err());
        }
    }

    #[test]
    fn point_mass_frame_has_agent_and_goal() {
        let spec = EnvSpec::new(EnvKind::PointMassReach);
        let frame = spec.render_frame(&[0.2, -0.4, 0.0, 0.0]).unwrap();
        assert_eq!(frame.len(), 2);
        assert!(frame.iter().all(|p| matches!(p, Primitive::Circle { .. })));
    }

    #[test]
    fn upright_pole_is_drawn_vertical() {
        let spec = EnvSpec::new(EnvKind::CartpoleBalanceLite);
        let frame = spec.render_frame(&[0.7, 0.0, 0.0, 0.0]).unwrap();
        let pole = frame
            .iter()
            .find_map(|p| match p {
                Primitive::Line { x0, x1, label, .. } if label == "pole" => Some((*x0, *x1)),
                _ => None,
            })
            .unwrap();
        assert!((pole.0 - pole.1).abs() < 1e-9);
    }

    #[test]
    fn frame_coordinates_stay_in_unit_square() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
        for kind in EnvKind::ALL {
            let spec = EnvSpec::new(kind);
            for _ in 0..1000 {
                let s: Vec<f64> = (0..spec.state_dim).map(|_| rng.random_range(-20.0..20.0)).collect();
                for p in spec.render_frame(&s).unwrap() {
                    assert!(p.coordinates().iter().all(|c| (0.0..=1.0).contains(c)), "{p:?}");
                }
            }
        }
    }

    #[test]
    fn primitives_serialize_with_kind_tag() {
        let p = Primitive::Circle {
            x: 0.5,
            y: 0.25,
            r: 0.03,
            label: "agent".into(),
        };
        let json = serde_json::to_string(&p).unwrap();
        assert!(json.contains("\"kind\":\"circle\""), "{json}");
    }
}
