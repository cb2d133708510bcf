//! Reward learning from ratings: per-step reward network, batch-normalized
//! segment returns, class probabilities and the rating cross-entropy.

use log::warn;
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp, MlpVars, Optimizer, OptimizerKind};
use crate::rng::{self, Rng, STREAM_REWARD_BATCHES};
use crate::segments::{RatingDataset, Segment};
use crate::tensor::{Matrix, Tape, Var};

pub const DEFAULT_K_STEEPNESS: f64 = 20.0;
pub const DEFAULT_REWARD_WIDTH: usize = 64;
pub const REWARD_HIDDEN_LAYERS: usize = 3;

/// `r̂(s, a) ∈ [0, 1]`: tanh hidden layers and a sigmoid output.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardModel {
    net: Mlp,
}

impl RewardModel {
    pub fn new(state_dim: usize, action_dim: usize, width: usize, rng: &mut Rng) -> Self {
        let mut sizes = vec![state_dim + action_dim];
        sizes.extend(std::iter::repeat_n(width, REWARD_HIDDEN_LAYERS));
        sizes.push(1);
        Self {
            net: Mlp::new(&sizes, Activation::Tanh, Activation::Sigmoid, rng),
        }
    }

    pub fn from_mlp(net: Mlp) -> Result<Self> {
        if net.output_dim() != 1 {
            return Err(Error::dim("reward network must have one output"));
        }
        if net.output_activation() != Activation::Sigmoid {
            return Err(Error::config("reward network output must be squashed by a sigmoid"));
        }
        Ok(Self { net })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn predict_reward(&self, s: &[f64], a: &[f64]) -> Result<f64> {
        if s.len() + a.len() != self.input_dim() {
            return Err(Error::dim(format!(
                "reward model expects {} inputs, got {} + {}",
                self.input_dim(),
                s.len(),
                a.len()
            )));
        }
        let x: Vec<f64> = s.iter().chain(a).copied().collect();
        Ok(self.net.forward(&Matrix::row_vector(&x))?.item())
    }

    /// Rewards for each row of a `[states | actions]` feature matrix.
    pub fn predict_batch(&self, features: &Matrix) -> Result<Vec<f64>> {
        Ok(self.net.forward(features)?.into_data())
    }

    /// `Σ_t γ^t r̂(s_t, a_t)`.
    pub fn segment_return(&self, segment: &Segment, gamma: f64) -> Result<f64> {
        if segment.is_empty() {
            return Err(Error::EmptyBatch("segment has no steps".into()));
        }
        let r = self.predict_batch(&segment.features())?;
        Ok(discounted_sum(&r, gamma))
    }

    /// Returns of consecutive `len`-step windows of rewards predicted for `features`.
    pub fn windowed_returns(&self, features: &Matrix, len: usize, gamma: f64) -> Result<Vec<f64>> {
        let r = self.predict_batch(features)?;
        Ok(r.chunks(len).map(|c| discounted_sum(c, gamma)).collect())
    }
}

pub fn discounts(len: usize, gamma: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(len);
    let mut d = 1.0;
    for _ in 0..len {
        out.push(d);
        d *= gamma;
    }
    out
}

pub fn discounted_sum(rewards: &[f64], gamma: f64) -> f64 {
    rewards
        .iter()
        .zip(discounts(rewards.len(), gamma))
        .map(|(r, d)| r * d)
        .sum()
}

/// Min-max normalization to `[0, 1]`; a constant batch maps to 0.5.
pub fn normalize_batch(returns: &[f64]) -> Vec<f64> {
    let lo = returns.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = returns.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        returns.iter().map(|r| (r - lo) / (hi - lo)).collect()
    } else {
        vec![0.5; returns.len()]
    }
}

/// Class boundaries, steepness and discount of the rating likelihood.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingLossConfig {
    pub n: usize,
    /// `R̄_0 = 0 < R̄_1 < … < R̄_n = 1`.
    pub boundaries: Vec<f64>,
    pub k_steepness: f64,
    pub gamma: f64,
    pub normalization_grad: NormalizationGrad,
}

impl RatingLossConfig {
    /// Equally spaced boundaries `R̄_i = i/n`.
    pub fn new(n: usize, k_steepness: f64, gamma: f64) -> Result<Self> {
        let boundaries = (0..=n).map(|i| i as f64 / n as f64).collect();
        Self::with_boundaries(n, boundaries, k_steepness, gamma)
    }

    pub fn with_boundaries(n: usize, boundaries: Vec<f64>, k_steepness: f64, gamma: f64) -> Result<Self> {
        let cfg = Self {
            n,
            boundaries,
            k_steepness,
            gamma,
            normalization_grad: NormalizationGrad::Full,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::config(format!("n = {} must be at least 2", self.n)));
        }
        if self.boundaries.len() != self.n + 1 {
            return Err(Error::config(format!(
                "boundaries need n + 1 = {} entries, got {}",
                self.n + 1,
                self.boundaries.len()
            )));
        }
        if self.boundaries[0] != 0.0 || self.boundaries[self.n] != 1.0 {
            return Err(Error::config("boundaries must start at 0 and end at 1"));
        }
        if self.boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("boundaries must be strictly increasing"));
        }
        if !(self.k_steepness > 0.0) || !self.k_steepness.is_finite() {
            return Err(Error::config(format!(
                "k_steepness must be positive, got {}",
                self.k_steepness
            )));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::config(format!("gamma must be in [0, 1), got {}", self.gamma)));
        }
        Ok(())
    }

    /// Per-class logits are `-k·R̃² + c1_i·R̃ + c0_i`.
    fn logit_coefficients(&self) -> (Vec<f64>, Vec<f64>) {
        let k = self.k_steepness;
        let b = &self.boundaries;
        let c1 = (0..self.n).map(|i| k * (b[i] + b[i + 1])).collect();
        let c0 = (0..self.n).map(|i| -k * b[i] * b[i + 1]).collect();
        (c1, c0)
    }
}

/// `Q(i) = softmax_i(−k(R̃ − R̄_i)(R̃ − R̄_{i+1}))`.
pub fn class_probabilities(r_tilde: f64, cfg: &RatingLossConfig) -> Vec<f64> {
    let b = &cfg.boundaries;
    let logits: Vec<f64> = (0..cfg.n)
        .map(|i| -cfg.k_steepness * (r_tilde - b[i]) * (r_tilde - b[i + 1]))
        .collect();
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

/// How the batch min and max of `R̂` enter the gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationGrad {
    /// Min and max are constants.
    StopGradient,
    /// Gradient also flows into the segments attaining the min and max.
    Full,
}

/// Recorded rating cross-entropy `−Σ_σ log Q_σ(label_σ)`, summed over the batch.
pub fn rating_cross_entropy_tape(
    tape: &mut Tape,
    model: &RewardModel,
    vars: &MlpVars,
    batch: &[(&Segment, usize)],
    cfg: &RatingLossConfig,
) -> Result<Var> {
    cross_entropy_inner(tape, model, vars, batch, cfg, None)
}

/// Cross-entropy with the normalization bounds pinned to `(lo, hi)`.
pub fn rating_cross_entropy_fixed_bounds(
    model: &RewardModel,
    batch: &[(&Segment, usize)],
    cfg: &RatingLossConfig,
    lo: f64,
    hi: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = model.net.register(&mut tape);
    let loss = cross_entropy_inner(&mut tape, model, &vars, batch, cfg, Some((lo, hi)))?;
    Ok(tape.value(loss).item())
}

/// Batch min and max of the predicted returns.
pub fn batch_return_bounds(model: &RewardModel, batch: &[(&Segment, usize)], gamma: f64) -> Result<(f64, f64)> {
    let r = batch
        .iter()
        .map(|(s, _)| model.segment_return(s, gamma))
        .collect::<Result<Vec<_>>>()?;
    Ok((
        r.iter().cloned().fold(f64::INFINITY, f64::min),
        r.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    ))
}

fn cross_entropy_inner(
    tape: &mut Tape,
    model: &RewardModel,
    vars: &MlpVars,
    batch: &[(&Segment, usize)],
    cfg: &RatingLossConfig,
    pinned: Option<(f64, f64)>,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch("rating loss needs at least one segment".into()));
    }
    let j = batch[0].0.len();
    let mut labels = Vec::with_capacity(batch.len());
    let mut feats = Vec::with_capacity(batch.len());
    for (seg, label) in batch {
        if *label >= cfg.n {
            return Err(Error::ClassRange { class: *label, n: cfg.n });
        }
        if seg.len() != j {
            return Err(Error::dim("segments in a batch must share one length"));
        }
        labels.push(*label);
        feats.push(seg.features());
    }
    let refs: Vec<&Matrix> = feats.iter().collect();
    let x = tape.constant(Matrix::vcat(&refs)?);
    let r = model.net.forward_tape(tape, vars, x)?;
    let returns = tape.group_weighted_sum(r, &discounts(j, cfg.gamma))?;

    let vals = tape.value(returns).data().to_vec();
    let (imin, imax) = vals.iter().enumerate().fold((0, 0), |(a, b), (i, &v)| {
        (if v < vals[a] { i } else { a }, if v > vals[b] { i } else { b })
    });
    let (lo, hi) = pinned.unwrap_or((vals[imin], vals[imax]));
    let b = batch.len();
    let r_tilde = if !(hi > lo) {
        tape.constant(Matrix::filled(b, 1, 0.5))
    } else if pinned.is_none() && cfg.normalization_grad == NormalizationGrad::Full {
        // (R̂ − R̂_min)/(R̂_max − R̂_min) with both extremes on the tape.
        let select = |k: usize, rows: usize| Matrix::from_fn(rows, b, move |_, c| if c == k { 1.0 } else { 0.0 });
        let spread_min = tape.constant(select(imin, b));
        let mins = tape.matmul(spread_min, returns)?;
        let num = tape.sub(returns, mins)?;
        let pick_max = tape.constant(select(imax, 1));
        let pick_min = tape.constant(select(imin, 1));
        let rmax = tape.matmul(pick_max, returns)?;
        let rmin = tape.matmul(pick_min, returns)?;
        let span = tape.sub(rmax, rmin)?;
        let log_span = tape.log(span)?;
        let neg = tape.neg(log_span);
        let inv = tape.exp(neg);
        tape.mul_scalar(num, inv)?
    } else {
        let shifted = tape.add_scalar(returns, -lo);
        tape.scale(shifted, 1.0 / (hi - lo))
    };

    let (c1, c0) = cfg.logit_coefficients();
    let sq = tape.square(r_tilde);
    let neg_k = tape.constant(Matrix::filled(1, cfg.n, -cfg.k_steepness));
    let quad = tape.matmul(sq, neg_k)?;
    let c1 = tape.constant(Matrix::row_vector(&c1));
    let lin = tape.matmul(r_tilde, c1)?;
    let logits = tape.add(quad, lin)?;
    let c0 = tape.constant(Matrix::row_vector(&c0));
    let logits = tape.add_row(logits, c0)?;
    let logq = tape.log_softmax_rows(logits);
    let picked = tape.pick_per_row(logq, &labels)?;
    let total = tape.sum(picked);
    Ok(tape.neg(total))
}

pub fn rating_cross_entropy(
    model: &RewardModel,
    batch: &[(&Segment, usize)],
    cfg: &RatingLossConfig,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = model.net.register(&mut tape);
    let loss = rating_cross_entropy_tape(&mut tape, model, &vars, batch, cfg)?;
    Ok(tape.value(loss).item())
}

/// Loss and flat parameter gradient for one batch.
pub fn rating_loss_and_grad(
    model: &RewardModel,
    batch: &[(&Segment, usize)],
    cfg: &RatingLossConfig,
) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let vars = model.net.register(&mut tape);
    let loss = rating_cross_entropy_tape(&mut tape, model, &vars, batch, cfg)?;
    tape.backward(loss)?;
    Ok((tape.value(loss).item(), model.net.grads_flat(&tape, &vars)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardTrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    /// Segments per minibatch; 0 uses the whole dataset every step.
    pub batch_size: usize,
    pub seed: u64,
    /// Learning rate at the last step as a fraction of `lr`, decayed linearly.
    pub final_lr_fraction: f64,
}

impl Default for RewardTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            lr: 5e-5,
            optimizer: OptimizerKind::Sgd,
            batch_size: 0,
            seed: 0,
            final_lr_fraction: 1.0,
        }
    }
}

/// Gradient descent on the rating cross-entropy. Returns the trained model
/// and the per-step minibatch losses.
pub fn train_reward_model(
    model: &RewardModel,
    dataset: &RatingDataset,
    cfg: &RatingLossConfig,
    train: &RewardTrainConfig,
) -> Result<(RewardModel, Vec<f64>)> {
    let mut model = model.clone();
    if train.steps == 0 {
        return Ok((model, Vec::new()));
    }
    cfg.validate()?;
    if !(train.final_lr_fraction > 0.0 && train.final_lr_fraction <= 1.0) {
        return Err(Error::config(format!(
            "final_lr_fraction must be in (0, 1], got {}",
            train.final_lr_fraction
        )));
    }
    if dataset.is_empty() {
        return Err(Error::EmptyBatch("rating dataset is empty".into()));
    }
    if dataset.distinct_classes() < 2 {
        warn!(
            "rating dataset uses a single class; normalized returns collapse and the loss carries no ranking signal"
        );
    }
    let all: Vec<(&Segment, usize)> = dataset.iter().collect();
    let mut rng = rng::stream(train.seed, &[STREAM_REWARD_BATCHES]);
    let mut opt = Optimizer::new(train.optimizer, train.lr, model.net.num_params());
    let mut params = model.net.params_flat();
    let mut history = Vec::with_capacity(train.steps);
    for step in 0..train.steps {
        let progress = step as f64 / (train.steps - 1).max(1) as f64;
        opt.set_lr(train.lr * (1.0 - (1.0 - train.final_lr_fraction) * progress));
        let batch: Vec<(&Segment, usize)> = if train.batch_size == 0 || train.batch_size >= all.len() {
            all.clone()
        } else {
            let mut idx = index::sample(&mut rng, all.len(), train.batch_size).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| all[i]).collect()
        };
        let (loss, grad) = rating_loss_and_grad(&model, &batch, cfg)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(format!("reward loss {loss}")));
        }
        history.push(loss);
        opt.descend(&mut params, &grad);
        model.net.set_params_flat(&params)?;
    }
    Ok((model, history))
}

/// Predicted classes for a labeled set, normalizing returns across the set.
pub fn predict_classes(model: &RewardModel, segments: &[&Segment], cfg: &RatingLossConfig) -> Result<Vec<usize>> {
    let returns = segments
        .iter()
        .map(|s| model.segment_return(s, cfg.gamma))
        .collect::<Result<Vec<_>>>()?;
    Ok(normalize_batch(&returns)
        .into_iter()
        .map(|r| argmax(&class_probabilities(r, cfg)))
        .collect())
}

/// Predicted classes with returns normalized by the min and max over
/// `labeled ∪ reference`.
pub fn predict_classes_with_reference(
    model: &RewardModel,
    segments: &[&Segment],
    reference: &[&Segment],
    cfg: &RatingLossConfig,
) -> Result<Vec<usize>> {
    let ret = |s: &&Segment| model.segment_return(s, cfg.gamma);
    let own = segments.iter().map(ret).collect::<Result<Vec<_>>>()?;
    let refs = reference.iter().map(ret).collect::<Result<Vec<_>>>()?;
    let lo = own.iter().chain(&refs).cloned().fold(f64::INFINITY, f64::min);
    let hi = own.iter().chain(&refs).cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(own
        .iter()
        .map(|r| {
            let g = if hi > lo { (r - lo) / (hi - lo) } else { 0.5 };
            argmax(&class_probabilities(g, cfg))
        })
        .collect())
}

/// Accuracy with normalization anchored on a reference set, typically the
/// training segments.
pub fn rating_accuracy_with_reference(
    model: &RewardModel,
    labeled: &[(&Segment, usize)],
    reference: &[&Segment],
    cfg: &RatingLossConfig,
) -> Result<f64> {
    if labeled.is_empty() {
        return Err(Error::EmptyBatch("accuracy needs at least one segment".into()));
    }
    let segs: Vec<&Segment> = labeled.iter().map(|(s, _)| *s).collect();
    let pred = predict_classes_with_reference(model, &segs, reference, cfg)?;
    let hits = pred.iter().zip(labeled).filter(|(p, (_, l))| *p == l).count();
    Ok(hits as f64 / labeled.len() as f64)
}

/// Fraction of segments whose predicted class equals the label.
pub fn rating_accuracy(model: &RewardModel, labeled: &[(&Segment, usize)], cfg: &RatingLossConfig) -> Result<f64> {
    if labeled.is_empty() {
        return Err(Error::EmptyBatch("accuracy needs at least one segment".into()));
    }
    let segs: Vec<&Segment> = labeled.iter().map(|(s, _)| *s).collect();
    let pred = predict_classes(model, &segs, cfg)?;
    let hits = pred
        .iter()
        .zip(labeled)
        .filter(|(p, (_, l))| *p == l)
        .count();
    Ok(hits as f64 / labeled.len() as f64)
}
