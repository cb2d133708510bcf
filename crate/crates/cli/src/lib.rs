//! Command-line driver: training runs, the human rating service, and
//! post-hoc comparison of finished runs.

pub mod manifest;
pub mod runs;
pub mod server;

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use mlrl_core::config;
use mlrl_core::segments::RatingQueue;
use mlrl_core::trainer::{run_training, RaterKind, RunHooks, RunOutput, TrainerConfig, TrainerStatus};
use mlrl_core::{checkpoint, Error, Result};

use manifest::{RunManifest, CURVE_FILE, DATASET_FILE, MANIFEST_FILE, POLICY_FILE, REWARD_FILE};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

pub const DEFAULT_PORT: u16 = 8080;

#[derive(Debug, Parser)]
#[command(name = "mlrl", version, about = "Rating-based reward learning with class-distribution penalties")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one or more seeds. Artifacts go to <out>/seed<N>/.
    Train(TrainArgs),
    /// Train with human ratings collected over HTTP.
    Serve(ServeArgs),
    /// Summarize final returns of run groups against a baseline group.
    Compare(CompareArgs),
    /// Write learning curves in long format for plotting.
    ExportPlotData(ExportArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Config file of `key = value` lines. Defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Single seed, overriding the config.
    #[arg(long, conflicts_with = "seeds")]
    pub seed: Option<u64>,
    /// Seed list: `0..9` (inclusive) or `1,4,7`.
    #[arg(long)]
    pub seeds: Option<String>,
    /// Config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Group directory; defaults to runs/<config stem>.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// `synthetic` or `human`. Human rating starts the rating service.
    #[arg(long)]
    pub rater: Option<String>,
    /// Port for the rating service when `--rater human`.
    #[arg(long, default_value_t = DEFAULT_PORT)]
    pub port: u16,
    /// Re-run the configuration recorded in a manifest.
    #[arg(long, conflicts_with_all = ["config", "seeds", "overrides"])]
    pub from_manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, default_value_t = DEFAULT_PORT)]
    pub port: u16,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Group directories, each holding seed<N>/ subdirectories.
    #[arg(required = true)]
    pub groups: Vec<PathBuf>,
    /// Name of the baseline group directory.
    #[arg(long)]
    pub baseline: String,
    #[arg(long)]
    pub seeds: Option<String>,
    /// Write the table here as well as to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    pub groups: Vec<PathBuf>,
    #[arg(long)]
    pub seeds: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

/// `0..9` is inclusive; `3` and `1,4,7` are literal lists.
pub fn parse_seeds(spec: &str) -> Result<Vec<u64>> {
    let bad = || Error::config(format!("seeds: cannot parse `{spec}`"));
    if let Some((a, b)) = spec.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
        if b < a {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    spec.split(',').map(|s| s.trim().parse().map_err(|_| bad())).collect()
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_config() {
        EXIT_CONFIG
    } else {
        EXIT_RUNTIME
    }
}

fn load_config(args: &RunArgs) -> Result<TrainerConfig> {
    let base = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::config(format!("cannot read {}: {e}", p.display())))?;
            config::parse(&text)?
        }
        None => TrainerConfig::default(),
    };
    config::apply_overrides(&base, &args.overrides)
}

fn group_dir(args: &RunArgs) -> PathBuf {
    args.out.clone().unwrap_or_else(|| {
        let stem = args
            .config
            .as_ref()
            .and_then(|p| p.file_stem())
            .and_then(|s| s.to_str())
            .unwrap_or("default");
        Path::new("runs").join(stem)
    })
}

fn seed_list(args: &RunArgs, cfg: &TrainerConfig) -> Result<Vec<u64>> {
    Ok(match (&args.seeds, args.seed) {
        (Some(s), _) => parse_seeds(s)?,
        (None, Some(s)) => vec![s],
        (None, None) => vec![cfg.seed],
    })
}

pub fn seed_dir(group: &Path, seed: u64) -> PathBuf {
    group.join(format!("seed{seed}"))
}

/// Writes every artifact of `out` and its manifest into `dir`.
pub fn write_run(out: &RunOutput, mut manifest: RunManifest, dir: &Path) -> Result<RunManifest> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(CURVE_FILE), out.curve.to_csv())?;
    checkpoint::save_policy(&out.policy, &dir.join(POLICY_FILE))?;
    checkpoint::save_reward(&out.reward_model, &dir.join(REWARD_FILE))?;
    out.dataset.save(dir.join(DATASET_FILE))?;
    manifest.artifacts = [CURVE_FILE, POLICY_FILE, REWARD_FILE, DATASET_FILE]
        .iter()
        .map(|s| s.to_string())
        .collect();
    manifest.finished_at = manifest::unix_now();
    manifest.save(&dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Trains `cfg` with the synthetic rater and writes the run into `dir`.
pub fn train_synthetic(cfg: &TrainerConfig, seeds: &[u64], dir: &Path) -> Result<RunManifest> {
    let manifest = RunManifest::new(cfg, seeds, dir);
    let out = run_training(cfg, &RunHooks::default())?;
    write_run(&out, manifest, dir)
}

/// Shared state of a human-rated run.
pub fn human_hooks(n: usize) -> (RunHooks, server::AppState) {
    let queue = Arc::new(Mutex::new(RatingQueue::new(n)));
    let status = Arc::new(Mutex::new(TrainerStatus {
        n,
        buffer_sizes: vec![0; n],
        phase: "starting".into(),
        ..Default::default()
    }));
    let hooks = RunHooks {
        queue: Some(queue.clone()),
        status: Some(status.clone()),
        poll: Some(Duration::from_millis(200)),
    };
    (hooks, server::AppState { queue, status })
}

/// Binds `port`, serves the rating endpoints, and trains until done.
pub fn train_human(cfg: &TrainerConfig, seeds: &[u64], dir: &Path, port: u16) -> Result<RunManifest> {
    let addr = SocketAddr::from(([127, 0, 0, 1], port));
    let listener =
        std::net::TcpListener::bind(addr).map_err(|e| Error::Startup(format!("cannot bind {addr}: {e}")))?;
    listener.set_nonblocking(true)?;
    let rt = tokio::runtime::Runtime::new()?;
    let (hooks, state) = human_hooks(cfg.n);
    let manifest = RunManifest::new(cfg, seeds, dir);
    let cfg = cfg.clone();
    let dir = dir.to_path_buf();
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::from_std(listener)?;
        log::info!("rating service on http://{addr}/");
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let trainer = tokio::task::spawn_blocking(move || {
            let res = run_training(&cfg, &hooks).and_then(|out| write_run(&out, manifest, &dir));
            let _ = tx.send(());
            res
        });
        axum::serve(listener, server::router(state))
            .with_graceful_shutdown(async {
                let _ = rx.await;
            })
            .await?;
        trainer
            .await
            .map_err(|e| Error::Startup(format!("trainer thread failed: {e}")))?
    })
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let (cfg, seeds, group) = match &args.from_manifest {
        Some(path) => {
            let m = RunManifest::load(path)?;
            let cfg = m.trainer_config()?;
            let seeds = vec![args.run.seed.unwrap_or(m.seed)];
            let group = args
                .run
                .out
                .clone()
                .unwrap_or_else(|| m.out_dir.parent().map(Path::to_path_buf).unwrap_or_default());
            (cfg, seeds, group)
        }
        None => {
            let cfg = load_config(&args.run)?;
            let seeds = seed_list(&args.run, &cfg)?;
            (cfg, seeds, group_dir(&args.run))
        }
    };
    let rater = match &args.rater {
        Some(r) => RaterKind::parse(r)?,
        None => cfg.rater,
    };
    for &seed in &seeds {
        let run_cfg = TrainerConfig {
            seed,
            rater,
            ..cfg.clone()
        };
        run_cfg.validate()?;
        let dir = seed_dir(&group, seed);
        log::info!("training seed {seed} into {}", dir.display());
        match rater {
            RaterKind::Synthetic => train_synthetic(&run_cfg, &seeds, &dir)?,
            RaterKind::Human => train_human(&run_cfg, &seeds, &dir, args.port)?,
        };
        println!("{}", dir.display());
    }
    Ok(())
}

fn cmd_serve(args: &ServeArgs) -> Result<()> {
    let cfg = load_config(&args.run)?;
    let seed = seed_list(&args.run, &cfg)?;
    let [seed] = seed[..] else {
        return Err(Error::config("serve takes a single seed"));
    };
    let cfg = TrainerConfig {
        seed,
        rater: RaterKind::Human,
        ..cfg
    };
    cfg.validate()?;
    let dir = seed_dir(&group_dir(&args.run), seed);
    train_human(&cfg, &[seed], &dir, args.port)?;
    println!("{}", dir.display());
    Ok(())
}

fn load_groups(dirs: &[PathBuf], seeds: &Option<String>) -> Result<Vec<runs::RunGroup>> {
    let seeds = seeds.as_deref().map(parse_seeds).transpose()?;
    dirs.iter().map(|d| runs::load_group(d, seeds.as_deref())).collect()
}

fn cmd_compare(args: &CompareArgs) -> Result<()> {
    let groups = load_groups(&args.groups, &args.seeds)?;
    let table = runs::summary_table(&runs::compare(&groups, &args.baseline)?);
    print!("{table}");
    if let Some(out) = &args.out {
        std::fs::write(out, &table)?;
    }
    Ok(())
}

fn cmd_export(args: &ExportArgs) -> Result<()> {
    let groups = load_groups(&args.groups, &args.seeds)?;
    std::fs::write(&args.out, runs::plot_data(&groups))?;
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Serve(a) => cmd_serve(a),
        Command::Compare(a) => cmd_compare(a),
        Command::ExportPlotData(a) => cmd_export(a),
    }
}
