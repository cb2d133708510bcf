//! Reading finished runs back from disk, comparing groups, and exporting
//! plot data.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use mlrl_core::trainer::{EvalResult, LearningCurve};
use mlrl_core::{Error, Result};

use crate::manifest::{RunManifest, CURVE_FILE, MANIFEST_FILE};

/// One seed's finished run.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub env: String,
    pub curve: LearningCurve,
}

/// All seeds of one algorithm, named after the group directory.
#[derive(Debug, Clone)]
pub struct RunGroup {
    pub name: String,
    pub runs: Vec<SeedRun>,
}

fn seed_of(dir: &Path) -> Option<u64> {
    dir.file_name()?.to_str()?.strip_prefix("seed")?.parse().ok()
}

fn load_seed(dir: &Path) -> Result<SeedRun> {
    let seed = seed_of(dir).ok_or_else(|| Error::Comparison(format!("{} is not a seed directory", dir.display())))?;
    let curve_path = dir.join(CURVE_FILE);
    let text = std::fs::read_to_string(&curve_path)
        .map_err(|e| Error::Comparison(format!("{}: {e}", curve_path.display())))?;
    let curve = LearningCurve::from_csv(&text)?;
    let manifest = RunManifest::load(&dir.join(MANIFEST_FILE))?;
    let env = manifest.trainer_config()?.env;
    Ok(SeedRun { seed, env, curve })
}

/// Loads `dir/seed*`. With `seeds`, each listed seed directory must exist.
pub fn load_group(dir: &Path, seeds: Option<&[u64]>) -> Result<RunGroup> {
    if !dir.is_dir() {
        return Err(Error::Comparison(format!("run directory {} not found", dir.display())));
    }
    let name = dir
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("runs")
        .to_string();
    let mut paths: Vec<PathBuf> = match seeds {
        Some(list) => list.iter().map(|s| dir.join(format!("seed{s}"))).collect(),
        None => std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir() && seed_of(p).is_some())
            .collect(),
    };
    paths.sort_by_key(|p| seed_of(p));
    let mut runs = Vec::with_capacity(paths.len());
    for p in paths {
        if !p.is_dir() {
            return Err(Error::Comparison(format!("missing seed directory {}", p.display())));
        }
        runs.push(load_seed(&p)?);
    }
    Ok(RunGroup { name, runs })
}

/// Mean and standard error of final returns for one group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSummary {
    pub name: String,
    pub seeds: usize,
    pub final_return: EvalResult,
    pub improvement_pct: f64,
}

/// `(variant − baseline) / |baseline|`, in percent.
pub fn improvement(baseline: f64, variant: f64) -> f64 {
    if baseline == variant {
        0.0
    } else {
        100.0 * (variant - baseline) / baseline.abs()
    }
}

/// Table-style signed percentage, `+60.00%`, `-3.10%`, `0.00%`.
pub fn format_pct(p: f64) -> String {
    if p == 0.0 {
        "0.00%".into()
    } else {
        format!("{p:+.2}%")
    }
}

pub fn compare(groups: &[RunGroup], baseline: &str) -> Result<Vec<GroupSummary>> {
    if groups.len() < 2 {
        return Err(Error::Comparison("need at least two run groups".into()));
    }
    let env = groups[0].runs.first().map(|r| r.env.clone());
    for g in groups {
        if g.runs.len() < 2 {
            return Err(Error::Comparison(format!(
                "group {} has {} seed(s), need at least 2",
                g.name,
                g.runs.len()
            )));
        }
        for r in &g.runs {
            if Some(&r.env) != env.as_ref() {
                return Err(Error::Comparison(format!(
                    "group {} seed {} ran {} but {} was expected",
                    g.name,
                    r.seed,
                    r.env,
                    env.clone().unwrap_or_default()
                )));
            }
        }
    }
    let finals = |g: &RunGroup| -> Result<EvalResult> {
        let v = g
            .runs
            .iter()
            .map(|r| {
                r.curve
                    .final_return()
                    .ok_or_else(|| Error::Comparison(format!("group {} seed {} has an empty curve", g.name, r.seed)))
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(EvalResult::from_returns(v))
    };
    let base = groups
        .iter()
        .find(|g| g.name == baseline)
        .ok_or_else(|| Error::Comparison(format!("baseline group {baseline} not among the inputs")))?;
    let base_mean = finals(base)?.mean;
    groups
        .iter()
        .map(|g| {
            let f = finals(g)?;
            Ok(GroupSummary {
                name: g.name.clone(),
                seeds: g.runs.len(),
                improvement_pct: improvement(base_mean, f.mean),
                final_return: f,
            })
        })
        .collect()
}

pub fn summary_table(rows: &[GroupSummary]) -> String {
    let mut s = String::from("group,seeds,final_mean,final_stderr,improvement\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{:.2},{:.2},{}",
            r.name,
            r.seeds,
            r.final_return.mean,
            r.final_return.stderr,
            format_pct(r.improvement_pct)
        );
    }
    s
}

pub const PLOT_HEADER: &str = "kind,algorithm,seed,cycle,value,stderr";

/// Raw per-seed rows followed by per-cycle mean and standard error rows.
pub fn plot_data(groups: &[RunGroup]) -> String {
    let mut s = String::from(PLOT_HEADER);
    s.push('\n');
    for g in groups {
        let mut cycles: Vec<usize> = Vec::new();
        for r in &g.runs {
            for rec in &r.curve.records {
                let _ = writeln!(s, "raw,{},{},{},{},", g.name, r.seed, rec.cycle, rec.mean_return);
                if !cycles.contains(&rec.cycle) {
                    cycles.push(rec.cycle);
                }
            }
        }
        cycles.sort_unstable();
        for c in cycles {
            let values: Vec<f64> = g
                .runs
                .iter()
                .filter_map(|r| r.curve.records.iter().find(|x| x.cycle == c).map(|x| x.mean_return))
                .collect();
            let agg = EvalResult::from_returns(values);
            let _ = writeln!(s, "mean,{},,{},{},{}", g.name, c, agg.mean, agg.stderr);
        }
    }
    s
}
