//! Plain-text checkpoints for reward models and policies.
//!
//! ```text
//! mlrl-checkpoint 1
//! kind reward
//! activations tanh sigmoid
//! layers 4
//! layer 6 64
//! w <in*out values, row-major>
//! b <out values>
//! ...
//! log_std <values>        (policies only)
//! ```
//!
//! Floats use Rust's shortest round-trip formatting, so `load(save(x)) == x`.

use std::fmt::Write as _;
use std::path::Path;

use crate::envs::EnvSpec;
use crate::error::{Error, Result};
use crate::nn::{Activation, Linear, Mlp};
use crate::policy::Policy;
use crate::reward::RewardModel;
use crate::tensor::Matrix;

const MAGIC: &str = "mlrl-checkpoint";
const VERSION: u32 = 1;

fn join(values: &[f64]) -> String {
    let mut s = String::new();
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{v:?}");
    }
    s
}

fn write_mlp(out: &mut String, kind: &str, net: &Mlp) {
    let _ = writeln!(out, "{MAGIC} {VERSION}");
    let _ = writeln!(out, "kind {kind}");
    let _ = writeln!(
        out,
        "activations {} {}",
        net.hidden_activation().name(),
        net.output_activation().name()
    );
    let _ = writeln!(out, "layers {}", net.layers().len());
    for l in net.layers() {
        let _ = writeln!(out, "layer {} {}", l.weight.rows(), l.weight.cols());
        let _ = writeln!(out, "w {}", join(l.weight.data()));
        let _ = writeln!(out, "b {}", join(l.bias.data()));
    }
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            inner: text.lines().enumerate(),
        }
    }

    /// Next non-empty line split into its keyword and the rest.
    fn expect(&mut self, key: &str) -> Result<(usize, &'a str)> {
        for (i, line) in self.inner.by_ref() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (k, rest) = line.split_once(' ').unwrap_or((line, ""));
            if k != key {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("expected `{key}`, found `{k}`"),
                });
            }
            return Ok((i + 1, rest.trim()));
        }
        Err(Error::Parse {
            line: 0,
            msg: format!("unexpected end of file, expected `{key}`"),
        })
    }
}

fn parse_floats(line: usize, s: &str, expected: usize) -> Result<Vec<f64>> {
    let v = s
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Parse {
            line,
            msg: e.to_string(),
        })?;
    if v.len() != expected {
        return Err(Error::Parse {
            line,
            msg: format!("expected {expected} values, got {}", v.len()),
        });
    }
    Ok(v)
}

fn parse_usizes(line: usize, s: &str) -> Result<Vec<usize>> {
    s.split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Parse {
            line,
            msg: e.to_string(),
        })
}

fn read_mlp<'a>(lines: &mut Lines<'a>, kind: &str) -> Result<Mlp> {
    let (ln, header) = lines.expect(MAGIC)?;
    if header != VERSION.to_string() {
        return Err(Error::Parse {
            line: ln,
            msg: format!("unsupported checkpoint version `{header}`"),
        });
    }
    let (ln, k) = lines.expect("kind")?;
    if k != kind {
        return Err(Error::Parse {
            line: ln,
            msg: format!("expected a {kind} checkpoint, found `{k}`"),
        });
    }
    let (ln, acts) = lines.expect("activations")?;
    let acts: Vec<&str> = acts.split_whitespace().collect();
    if acts.len() != 2 {
        return Err(Error::Parse {
            line: ln,
            msg: "expected hidden and output activations".into(),
        });
    }
    let hidden = Activation::parse(acts[0])?;
    let output = Activation::parse(acts[1])?;
    let (ln, count) = lines.expect("layers")?;
    let count = parse_usizes(ln, count)?;
    if count.len() != 1 {
        return Err(Error::Parse {
            line: ln,
            msg: "expected a layer count".into(),
        });
    }
    let mut layers = Vec::with_capacity(count[0]);
    for _ in 0..count[0] {
        let (ln, shape) = lines.expect("layer")?;
        let shape = parse_usizes(ln, shape)?;
        if shape.len() != 2 {
            return Err(Error::Parse {
                line: ln,
                msg: "expected `layer <in> <out>`".into(),
            });
        }
        let (ln, w) = lines.expect("w")?;
        let w = parse_floats(ln, w, shape[0] * shape[1])?;
        let (ln, b) = lines.expect("b")?;
        let b = parse_floats(ln, b, shape[1])?;
        layers.push(Linear {
            weight: Matrix::new(shape[0], shape[1], w)?,
            bias: Matrix::new(1, shape[1], b)?,
        });
    }
    Mlp::from_layers(layers, hidden, output)
}

pub fn reward_to_string(model: &RewardModel) -> String {
    let mut s = String::new();
    write_mlp(&mut s, "reward", model.net());
    s
}

pub fn reward_from_str(text: &str) -> Result<RewardModel> {
    let mut lines = Lines::new(text);
    RewardModel::from_mlp(read_mlp(&mut lines, "reward")?)
}

pub fn policy_to_string(policy: &Policy) -> String {
    let mut s = String::new();
    write_mlp(&mut s, "policy", policy.net());
    let _ = writeln!(s, "log_std {}", join(policy.log_std_raw()));
    s
}

/// Action bounds come from `spec`; the network must match its dimensions.
pub fn policy_from_str(text: &str, spec: &EnvSpec) -> Result<Policy> {
    let mut lines = Lines::new(text);
    let net = read_mlp(&mut lines, "policy")?;
    let (ln, ls) = lines.expect("log_std")?;
    let log_std = parse_floats(ln, ls, net.output_dim())?;
    Policy::from_parts(net, log_std, spec)
}

pub fn save_reward(model: &RewardModel, path: &Path) -> Result<()> {
    Ok(std::fs::write(path, reward_to_string(model))?)
}

pub fn load_reward(path: &Path) -> Result<RewardModel> {
    reward_from_str(&std::fs::read_to_string(path)?)
}

pub fn save_policy(policy: &Policy, path: &Path) -> Result<()> {
    Ok(std::fs::write(path, policy_to_string(policy))?)
}

pub fn load_policy(path: &Path, spec: &EnvSpec) -> Result<Policy> {
    policy_from_str(&std::fs::read_to_string(path)?, spec)
}
