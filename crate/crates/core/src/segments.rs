//! Rated segments: sampling, synthetic rating, per-class buffers, the human
//! rating queue, and the line-delimited dataset format.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::envs::{EnvSpec, Primitive};
use crate::error::{Error, Result};
use crate::policy::{Actor, RandomActor, ScriptedActor};
use crate::rng::{self, STREAM_RATER_SETUP, STREAM_RATING_SAMPLES};
use crate::tensor::Matrix;

/// Fixed-length window of `(state, action)` pairs; the unit that is rated.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub id: String,
    pub env_name: String,
    /// `j × state_dim`
    pub states: Matrix,
    /// `j × action_dim`
    pub actions: Matrix,
    /// Discounted ground-truth return, visible only to the synthetic rater.
    pub true_return: Option<f64>,
    pub created_at_cycle: u64,
}

impl Segment {
    pub fn new(
        id: impl Into<String>,
        env_name: impl Into<String>,
        states: Matrix,
        actions: Matrix,
        true_return: Option<f64>,
        created_at_cycle: u64,
    ) -> Result<Self> {
        if states.rows() != actions.rows() || states.rows() == 0 {
            return Err(Error::dim(format!(
                "segment needs equal, nonzero row counts (states {}, actions {})",
                states.rows(),
                actions.rows()
            )));
        }
        Ok(Self {
            id: id.into(),
            env_name: env_name.into(),
            states,
            actions,
            true_return,
            created_at_cycle,
        })
    }

    pub fn len(&self) -> usize {
        self.states.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.states.rows() == 0
    }

    /// Per-timestep `[s_t, a_t]` rows.
    pub fn features(&self) -> Matrix {
        self.states
            .hcat(&self.actions)
            .expect("segment invariant: equal row counts")
    }

    /// All steps concatenated into one row.
    pub fn flattened(&self) -> Vec<f64> {
        self.features().into_data()
    }
}

/// Draws `count` segments of length `j` from rollouts of `actor`.
///
/// Each segment comes from its own episode, seeded from `seed`, starting at a
/// uniformly drawn offset. Deterministic in `(actor, spec, count, j, seed)`.
pub fn sample_segments(
    actor: &dyn Actor,
    spec: &EnvSpec,
    count: usize,
    j: usize,
    seed: u64,
    gamma: f64,
    cycle: u64,
) -> Result<Vec<Segment>> {
    if j == 0 || j > spec.episode_len {
        return Err(Error::config(format!(
            "segment length {j} must be in 1..={}",
            spec.episode_len
        )));
    }
    if count == 0 {
        return Err(Error::config("segment count must be at least 1"));
    }
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let mut r = rng::stream(seed, &[STREAM_RATING_SAMPLES, cycle, i as u64]);
        let start = r.random_range(0..=spec.episode_len - j);
        let mut state = spec.reset(rng::derive_seed(seed, &[cycle, i as u64]));
        let mut states = Vec::with_capacity(j * spec.state_dim);
        let mut actions = Vec::with_capacity(j * spec.action_dim);
        let mut ret = 0.0;
        let mut discount = 1.0;
        for t in 0..start + j {
            let a = actor.act(&state, true, &mut r)?;
            let (next, reward) = spec.transition(&state, &a)?;
            if t >= start {
                states.extend_from_slice(&state);
                actions.extend_from_slice(&a);
                ret += discount * reward;
                discount *= gamma;
            }
            state = next;
        }
        out.push(Segment::new(
            format!("c{cycle}-{seed}-{i}"),
            spec.name.clone(),
            Matrix::new(j, spec.state_dim, states)?,
            Matrix::new(j, spec.action_dim, actions)?,
            Some(ret),
            cycle,
        )?);
    }
    Ok(out)
}

/// Bins a normalized return `g ∈ [0,1]` into one of `n` classes. Bin edges
/// rate upward.
pub fn rate_normalized(g: f64, n: usize) -> usize {
    let g = g.clamp(0.0, 1.0);
    ((g * n as f64).floor() as usize).min(n - 1)
}

/// Oracle rating from the hidden return.
pub fn synthetic_rate(segment: &Segment, n: usize, return_low: f64, return_high: f64) -> Result<usize> {
    if return_high <= return_low {
        return Err(Error::config(format!(
            "rater bounds need high > low (got {return_low}..{return_high})"
        )));
    }
    if n == 0 {
        return Err(Error::config("rater needs at least one class"));
    }
    let ret = segment
        .true_return
        .ok_or_else(|| Error::OracleUnavailable(segment.id.clone()))?;
    Ok(rate_normalized(
        (ret - return_low) / (return_high - return_low),
        n,
    ))
}

/// Synthetic rater with fixed return bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticRater {
    pub n: usize,
    pub return_low: f64,
    pub return_high: f64,
}

impl SyntheticRater {
    pub const CALIBRATION_ROLLOUTS: usize = 200;

    /// Fixes the bin bounds from random-action and scripted-controller
    /// segments. The calibration seed depends only on the environment, so
    /// bins mean the same thing in every run.
    pub fn calibrate(spec: &EnvSpec, n: usize, j: usize, gamma: f64) -> Result<Self> {
        let seed = rng::derive_seed(STREAM_RATER_SETUP, &[spec.kind as u64]);
        let random = sample_segments(
            &RandomActor::new(spec.clone()),
            spec,
            Self::CALIBRATION_ROLLOUTS,
            j,
            seed,
            gamma,
            0,
        )?;
        let scripted = sample_segments(
            &ScriptedActor::new(spec.clone()),
            spec,
            Self::CALIBRATION_ROLLOUTS,
            j,
            seed ^ 1,
            gamma,
            0,
        )?;
        let returns: Vec<f64> = random
            .iter()
            .chain(&scripted)
            .filter_map(|s| s.true_return)
            .collect();
        let low = returns.iter().cloned().fold(f64::INFINITY, f64::min);
        let high = returns.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !(high > low) {
            return Err(Error::config(format!(
                "calibration for {} produced a degenerate return range",
                spec.name
            )));
        }
        Ok(Self {
            n,
            return_low: low,
            return_high: high,
        })
    }

    pub fn rate(&self, segment: &Segment) -> Result<usize> {
        synthetic_rate(segment, self.n, self.return_low, self.return_high)
    }
}

/// How class trajectories are turned into feature rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureMode {
    /// One row per timestep: `[s_t, a_t]`.
    Pooled,
    /// One row per segment: all steps concatenated.
    Flattened,
}

impl FeatureMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pooled" => Ok(FeatureMode::Pooled),
            "flattened" => Ok(FeatureMode::Flattened),
            other => Err(Error::config(format!(
                "unknown feature_mode `{other}` (expected pooled or flattened)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureMode::Pooled => "pooled",
            FeatureMode::Flattened => "flattened",
        }
    }
}

/// Per-class buffers `R_0..R_{n-1}` plus the label of every stored segment.
#[derive(Debug, Clone, PartialEq)]
pub struct RatingDataset {
    n: usize,
    buffers: Vec<Vec<Segment>>,
    labels: BTreeMap<String, usize>,
}

const DATASET_FORMAT: &str = "mlrl-rating-dataset";
const DATASET_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    format: String,
    version: u32,
    n: usize,
}

#[derive(Serialize, Deserialize)]
struct SegmentRecord {
    id: String,
    env: String,
    class: usize,
    states: Vec<Vec<f64>>,
    actions: Vec<Vec<f64>>,
    true_return: Option<f64>,
    created_at_cycle: u64,
}

fn matrix_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

impl RatingDataset {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            buffers: vec![Vec::new(); n],
            labels: BTreeMap::new(),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn buffer(&self, class: usize) -> &[Segment] {
        &self.buffers[class]
    }

    pub fn buffer_sizes(&self) -> Vec<usize> {
        self.buffers.iter().map(Vec::len).collect()
    }

    pub fn label(&self, id: &str) -> Option<usize> {
        self.labels.get(id).copied()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.labels.contains_key(id)
    }

    /// Every stored segment with its class, buffer by buffer.
    pub fn iter(&self) -> impl Iterator<Item = (&Segment, usize)> {
        self.buffers
            .iter()
            .enumerate()
            .flat_map(|(c, b)| b.iter().map(move |s| (s, c)))
    }

    pub fn distinct_classes(&self) -> usize {
        self.buffers.iter().filter(|b| !b.is_empty()).count()
    }

    /// Appends `segment` to `buffers[class]`. The dataset is unchanged on error.
    pub fn insert_rated(&mut self, segment: Segment, class: usize) -> Result<()> {
        if class >= self.n {
            return Err(Error::ClassRange { class, n: self.n });
        }
        if self.labels.contains_key(&segment.id) {
            return Err(Error::Duplicate(segment.id));
        }
        if let Some((first, _)) = self.iter().next() {
            if first.env_name != segment.env_name
                || first.states.shape() != segment.states.shape()
                || first.actions.shape() != segment.actions.shape()
            {
                return Err(Error::dim(format!(
                    "segment `{}` does not match the dataset's environment or shape",
                    segment.id
                )));
            }
        }
        self.labels.insert(segment.id.clone(), class);
        self.buffers[class].push(segment);
        Ok(())
    }

    /// Feature matrix of class `class` used to fit its Gaussian.
    ///
    /// Pooled: `(#segments·j) × (state_dim + action_dim)` with rows in
    /// segment order then time order. Flattened: one row per segment.
    pub fn class_features(&self, class: usize, mode: FeatureMode) -> Result<Matrix> {
        if class >= self.n {
            return Err(Error::ClassRange { class, n: self.n });
        }
        let buf = &self.buffers[class];
        if buf.is_empty() {
            return Err(Error::EmptyClass(class));
        }
        match mode {
            FeatureMode::Pooled => {
                let feats: Vec<Matrix> = buf.iter().map(Segment::features).collect();
                let refs: Vec<&Matrix> = feats.iter().collect();
                Matrix::vcat(&refs)
            }
            FeatureMode::Flattened => {
                let rows: Vec<Vec<f64>> = buf.iter().map(Segment::flattened).collect();
                Matrix::from_rows(&rows)
            }
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        let header = DatasetHeader {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            n: self.n,
        };
        writeln!(w, "{}", serde_json::to_string(&header).map_err(io_err)?)?;
        for (seg, class) in self.iter() {
            let rec = SegmentRecord {
                id: seg.id.clone(),
                env: seg.env_name.clone(),
                class,
                states: matrix_rows(&seg.states),
                actions: matrix_rows(&seg.actions),
                true_return: seg.true_return,
                created_at_cycle: seg.created_at_cycle,
            };
            writeln!(w, "{}", serde_json::to_string(&rec).map_err(io_err)?)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let reader = BufReader::new(fs::File::open(path)?);
        let mut lines = reader.lines();
        let header_line = lines.next().ok_or(Error::Parse {
            line: 1,
            msg: "missing header".into(),
        })??;
        let header: DatasetHeader = serde_json::from_str(&header_line).map_err(|e| Error::Parse {
            line: 1,
            msg: format!("bad header: {e}"),
        })?;
        if header.format != DATASET_FORMAT || header.version != DATASET_VERSION {
            return Err(Error::Parse {
                line: 1,
                msg: format!(
                    "unsupported dataset format {} v{}",
                    header.format, header.version
                ),
            });
        }
        let mut ds = RatingDataset::new(header.n);
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |msg: String| Error::Parse { line: lineno, msg };
            let rec: SegmentRecord =
                serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
            let states = Matrix::from_rows(&rec.states).map_err(|e| parse_err(e.to_string()))?;
            let actions = Matrix::from_rows(&rec.actions).map_err(|e| parse_err(e.to_string()))?;
            let seg = Segment::new(
                rec.id,
                rec.env,
                states,
                actions,
                rec.true_return,
                rec.created_at_cycle,
            )
            .map_err(|e| parse_err(e.to_string()))?;
            ds.insert_rated(seg, rec.class)
                .map_err(|e| parse_err(e.to_string()))?;
        }
        Ok(ds)
    }
}

fn io_err(e: serde_json::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "status", content = "rating")]
pub enum RatingStatus {
    Pending,
    Rated(usize),
}

/// A segment waiting for a human rating, with its replay frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingRating {
    pub segment_id: String,
    pub frames: Vec<Vec<Primitive>>,
    #[serde(skip)]
    pub status: Option<RatingStatus>,
}

/// Hand-off between rating producers (the HTTP service) and the trainer.
///
/// Producers call [`RatingQueue::submit`]; the trainer alone calls
/// [`RatingQueue::drain_rated`] at cycle boundaries and owns the buffers.
#[derive(Debug)]
pub struct RatingQueue {
    n: usize,
    pending: VecDeque<(Segment, PendingRating)>,
    rated: Vec<(Segment, usize)>,
}

impl RatingQueue {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            pending: VecDeque::new(),
            rated: Vec::new(),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Queues `segment` for rating, rendering one frame per timestep.
    pub fn enqueue(&mut self, segment: Segment, spec: &EnvSpec) -> Result<()> {
        if self.pending.iter().any(|(s, _)| s.id == segment.id)
            || self.rated.iter().any(|(s, _)| s.id == segment.id)
        {
            return Err(Error::Duplicate(segment.id));
        }
        let frames = (0..segment.len())
            .map(|t| spec.render_frame(segment.states.row(t)))
            .collect::<Result<Vec<_>>>()?;
        let view = PendingRating {
            segment_id: segment.id.clone(),
            frames,
            status: Some(RatingStatus::Pending),
        };
        self.pending.push_back((segment, view));
        Ok(())
    }

    /// Pending segments in arrival order.
    pub fn pending(&self) -> Vec<PendingRating> {
        self.pending.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    pub fn rated_len(&self) -> usize {
        self.rated.len()
    }

    /// Records a rating; the segment leaves the pending set.
    pub fn submit(&mut self, segment_id: &str, rating: usize) -> Result<()> {
        if rating >= self.n {
            return Err(Error::ClassRange {
                class: rating,
                n: self.n,
            });
        }
        let pos = self
            .pending
            .iter()
            .position(|(s, _)| s.id == segment_id)
            .ok_or_else(|| Error::UnknownSegment(segment_id.to_string()))?;
        let (seg, _) = self.pending.remove(pos).expect("position is valid");
        self.rated.push((seg, rating));
        Ok(())
    }

    /// Takes every rated segment, in submission order.
    pub fn drain_rated(&mut self) -> Vec<(Segment, usize)> {
        std::mem::take(&mut self.rated)
    }
}
