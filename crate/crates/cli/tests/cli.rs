use std::path::Path;
use std::process::Command;

use clap::Parser;
use mlrl_cli::manifest::{RunManifest, CURVE_FILE, MANIFEST_FILE};
use mlrl_cli::runs::{format_pct, improvement, PLOT_HEADER};
use mlrl_cli::{parse_seeds, run, Cli};
use mlrl_core::trainer::{CurveRecord, EvalResult, LearningCurve, TrainerConfig};

const TINY: &str = "\
env = point-mass
episode_len = 10
j = 5
m_cycles = 1
segments_per_cycle = 8
reward_steps = 5
reward_lr = 0.001
reward_optimizer = adam
reward_width = 4
reward_batch_size = 4
t_cycles = 2
eval_every = 1
eval_episodes = 2
batch_size = 2
policy_width = 4
";

fn mlrl(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_mlrl")).args(args).output().unwrap()
}

fn cli(args: &[&str]) -> Cli {
    Cli::parse_from(std::iter::once("mlrl").chain(args.iter().copied()))
}

fn write_config(dir: &Path) -> String {
    let p = dir.join("pm_n4.cfg");
    std::fs::write(&p, TINY).unwrap();
    p.to_str().unwrap().to_string()
}

/// A finished run with a hand-made curve.
fn fake_run(group: &Path, seed: u64, env: &str, finals: &[f64]) {
    let dir = group.join(format!("seed{seed}"));
    std::fs::create_dir_all(&dir).unwrap();
    let mut curve = LearningCurve::default();
    for (i, v) in finals.iter().enumerate() {
        curve
            .push(CurveRecord {
                cycle: i * 10,
                env_steps: i as u64 * 100,
                mean_return: *v,
                stderr: 0.0,
            })
            .unwrap();
    }
    std::fs::write(dir.join(CURVE_FILE), curve.to_csv()).unwrap();
    let cfg = TrainerConfig {
        env: env.into(),
        seed,
        ..Default::default()
    };
    RunManifest::new(&cfg, &[seed], &dir).save(&dir.join(MANIFEST_FILE)).unwrap();
}

#[test]
fn seed_lists_parse() {
    assert_eq!(parse_seeds("0..9").unwrap(), (0..10).collect::<Vec<_>>());
    assert_eq!(parse_seeds("3").unwrap(), vec![3]);
    assert_eq!(parse_seeds("1,4,7").unwrap(), vec![1, 4, 7]);
    assert!(parse_seeds("9..1").is_err());
    assert!(parse_seeds("x").is_err());
}

#[test]
fn train_writes_artifacts_under_the_config_stem() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let out = Command::new(env!("CARGO_BIN_EXE_mlrl"))
        .current_dir(tmp.path())
        .args(["train", "--config", &cfg, "--seed", "3"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = tmp.path().join("runs/pm_n4/seed3");
    for f in ["curve.csv", "policy.ckpt", "reward.ckpt", "dataset.jsonl", "manifest.json"] {
        assert!(dir.join(f).is_file(), "{f}");
    }
    let m = RunManifest::load(&dir.join(MANIFEST_FILE)).unwrap();
    assert_eq!(m.seed, 3);
    assert_eq!(m.trainer_config().unwrap().seed, 3);
}

#[test]
fn seed_range_fans_out() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let group = tmp.path().join("g");
    run(&cli(&[
        "train", "--config", &cfg, "--rater", "synthetic", "--seeds", "0..2", "--out", group.to_str().unwrap(),
    ]))
    .unwrap();
    for s in 0..=2 {
        let m = RunManifest::load(&group.join(format!("seed{s}/manifest.json"))).unwrap();
        assert_eq!(m.seeds, vec![0, 1, 2]);
        assert!(group.join(format!("seed{s}/curve.csv")).is_file());
    }
}

#[test]
fn rerun_from_manifest_reproduces_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    run(&cli(&["train", "--config", &cfg, "--seed", "5", "--set", "alpha=0.001", "--out", a.to_str().unwrap()]))
        .unwrap();
    let manifest = a.join("seed5/manifest.json");
    run(&cli(&["train", "--from-manifest", manifest.to_str().unwrap(), "--out", b.to_str().unwrap()])).unwrap();
    for f in ["curve.csv", "policy.ckpt", "reward.ckpt", "dataset.jsonl"] {
        let x = std::fs::read(a.join("seed5").join(f)).unwrap();
        let y = std::fs::read(b.join("seed5").join(f)).unwrap();
        assert_eq!(x, y, "{f}");
    }
}

#[test]
fn bad_configs_exit_with_code_two() {
    let out = mlrl(&["train", "--set", "omega=0.5,1.0", "--set", "n=3"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("weights must be strictly descending"));

    let out = mlrl(&["train", "--set", "learning_rate=0.1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown key `learning_rate`"));

    let out = mlrl(&["train", "--set", "n=9"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains('n'));
}

#[test]
fn busy_port_is_a_startup_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let held = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let port = held.local_addr().unwrap().port().to_string();
    let out = mlrl(&["serve", "--config", &cfg, "--port", &port, "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("startup error"));
}

#[test]
fn improvement_arithmetic_and_format() {
    assert_eq!(format_pct(improvement(100.0, 160.0)), "+60.00%");
    assert_eq!(format_pct(improvement(100.0, 100.0)), "0.00%");
    assert_eq!(format_pct(improvement(-50.0, -25.0)), "+50.00%");
    assert_eq!(format_pct(improvement(200.0, 190.0)), "-5.00%");
}

#[test]
fn compare_reports_mean_stderr_and_improvement() {
    let tmp = tempfile::tempdir().unwrap();
    let base = tmp.path().join("rbrl");
    let kl = tmp.path().join("rbrl-kl");
    for (s, v) in [(0, 90.0), (1, 110.0)] {
        fake_run(&base, s, "point-mass-reach", &[0.0, v]);
        fake_run(&kl, s, "point-mass-reach", &[0.0, v * 1.6]);
    }
    let out = tmp.path().join("table.csv");
    run(&cli(&[
        "compare", base.to_str().unwrap(), kl.to_str().unwrap(), "--baseline", "rbrl", "--out", out.to_str().unwrap(),
    ]))
    .unwrap();
    let table = std::fs::read_to_string(out).unwrap();
    let se = EvalResult::from_returns(vec![90.0, 110.0]).stderr;
    assert!(table.contains(&format!("rbrl,2,100.00,{se:.2},0.00%")), "{table}");
    assert!(table.contains("rbrl-kl,2,160.00,") && table.contains("+60.00%"), "{table}");
}

#[test]
fn identical_groups_compare_at_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for s in 0..3 {
        fake_run(&a, s, "line-walk", &[1.0, 2.0 + s as f64]);
        fake_run(&b, s, "line-walk", &[1.0, 2.0 + s as f64]);
    }
    let groups = vec![
        mlrl_cli::runs::load_group(&a, None).unwrap(),
        mlrl_cli::runs::load_group(&b, None).unwrap(),
    ];
    let rows = mlrl_cli::runs::compare(&groups, "a").unwrap();
    assert!(rows.iter().all(|r| format_pct(r.improvement_pct) == "0.00%"));
}

#[test]
fn mismatched_envs_fail_comparison() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for s in 0..2 {
        fake_run(&a, s, "point-mass-reach", &[1.0]);
        fake_run(&b, s, "line-walk", &[1.0]);
    }
    let out = mlrl(&["compare", a.to_str().unwrap(), b.to_str().unwrap(), "--baseline", "a"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("comparison error"));
}

#[test]
fn missing_seed_directory_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for s in 0..2 {
        fake_run(&a, s, "point-mass-reach", &[1.0]);
        fake_run(&b, s, "point-mass-reach", &[1.0]);
    }
    let out = mlrl(&["compare", a.to_str().unwrap(), b.to_str().unwrap(), "--baseline", "a", "--seeds", "0..2"]);
    assert_ne!(out.status.code(), Some(0));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains(&a.join("seed2").display().to_string()), "{err}");
}

#[test]
fn plot_export_counts_rows_and_recomputes_stderr() {
    let tmp = tempfile::tempdir().unwrap();
    let g = tmp.path().join("alg");
    let seeds = 10;
    let points = 50;
    let value = |s: usize, c: usize| (s * 7 + c * 3) as f64 % 11.0;
    for s in 0..seeds {
        let finals: Vec<f64> = (0..points).map(|c| value(s, c)).collect();
        fake_run(&g, s as u64, "point-mass-reach", &finals);
    }
    let out = tmp.path().join("plot.csv");
    run(&cli(&["export-plot-data", g.to_str().unwrap(), "--out", out.to_str().unwrap()])).unwrap();
    let text = std::fs::read_to_string(out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], PLOT_HEADER);
    let raw = lines.iter().filter(|l| l.starts_with("raw,")).count();
    let mean: Vec<&&str> = lines.iter().filter(|l| l.starts_with("mean,")).collect();
    assert_eq!(raw, seeds * points);
    assert_eq!(mean.len(), points);

    let fields: Vec<&str> = mean[7].split(',').collect();
    let cycle: usize = fields[3].parse().unwrap();
    let xs: Vec<f64> = (0..seeds).map(|s| value(s, cycle / 10)).collect();
    let m = xs.iter().sum::<f64>() / seeds as f64;
    let sd = (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (seeds as f64 - 1.0)).sqrt();
    let got: f64 = fields[5].parse().unwrap();
    assert!((got - sd / (seeds as f64).sqrt()).abs() < 1e-12);
}

#[test]
fn empty_plot_export_is_header_only() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("plot.csv");
    run(&cli(&["export-plot-data", "--out", out.to_str().unwrap()])).unwrap();
    assert_eq!(std::fs::read_to_string(out).unwrap(), format!("{PLOT_HEADER}\n"));
}
