//! `apis`: generate datasets, run and sweep experiments, evaluate checkpoints,
//! replay point sets into other models and serve human annotation sessions.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration error.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use apis_core::driver::{
    add_soft_reports, resume_experiment, run_experiment, run_root, run_sweep, Data, ExperimentConfig, RunDir,
};
use apis_core::eval::dataset_map;
use apis_core::segmodel::checkpoint::read_checkpoint;
use apis_core::segmodel::{PredictionMode, ScheduleKind};
use apis_core::selection::SubsetMode;
use apis_core::synthgen::{generate_dataset, write_dataset, DatasetMeta};
use apis_core::Error;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "apis", version, about = "Active point-supervised instance segmentation lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        train: usize,
        #[arg(long, default_value_t = 100)]
        test: usize,
        /// Scene generator settings as JSON (keys of the scene config).
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one experiment (point strategy, full-mask baseline or transfer).
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Run directory; defaults to `$APIS_RUN_ROOT/<name>`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue an interrupted run found in the run directory.
        #[arg(long)]
        resume: bool,
    },
    /// Run every strategy with every seed and summarize.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Comma-separated strategy tokens.
        #[arg(long, value_delimiter = ',')]
        strategies: Option<Vec<String>>,
        /// Also run the schedule and transfer comparisons.
        #[arg(long)]
        soft_reports: bool,
        /// Heads of the transfer target model.
        #[arg(long, default_value_t = 8)]
        target_heads: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a run's checkpoint on its test split.
    Eval {
        #[arg(long)]
        run: PathBuf,
        /// Defaults to the last completed step.
        #[arg(long)]
        step: Option<u32>,
        /// Include per-instance results.
        #[arg(long)]
        per_instance: bool,
    },
    /// Replay a run's point sets into another model configuration.
    Transfer {
        #[arg(long)]
        from: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve human annotation sessions over HTTP.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Session directory; defaults to `$APIS_RUN_ROOT/sessions`.
        #[arg(long)]
        root: Option<PathBuf>,
    },
}

/// Flags overriding keys of a JSON config file.
#[derive(Args, Default)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long = "train")]
    n_train: Option<usize>,
    #[arg(long = "test")]
    n_test: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    metric: Option<String>,
    #[arg(long)]
    mode: Option<PredictionMode>,
    #[arg(long)]
    steps: Option<u32>,
    #[arg(long, value_parser = parse_schedule)]
    schedule: Option<ScheduleKind>,
    #[arg(long)]
    budget_points: Option<usize>,
    #[arg(long, value_parser = parse_subset)]
    budget_instance_selection: Option<SubsetMode>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    replicas: Option<usize>,
    #[arg(long)]
    from_scratch: bool,
    #[arg(long)]
    dump_eval: bool,
}

fn parse_schedule(s: &str) -> Result<ScheduleKind, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("unknown schedule `{s}`"))
}

fn parse_subset(s: &str) -> Result<SubsetMode, String> {
    serde_json::from_value(serde_json::Value::String(s.replace('-', "_"))).map_err(|_| format!("unknown mode `{s}`"))
}

impl ConfigArgs {
    fn resolve(self) -> Result<ExperimentConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
                    field: "config".into(),
                    message: format!("{}: {e}", path.display()),
                })?;
                ExperimentConfig::from_json(&text)?
            }
            None => ExperimentConfig::default(),
        };
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = self.$field {
                    cfg.$field = v;
                }
            )*};
        }
        set!(name, data_seed, n_train, n_test, seed, strategy, mode, steps, schedule, heads, replicas);
        set!(budget_instance_selection);
        if self.data_dir.is_some() {
            cfg.data_dir = self.data_dir;
        }
        if self.metric.is_some() {
            cfg.metric = self.metric;
        }
        if self.budget_points.is_some() {
            cfg.budget_points = self.budget_points;
        }
        cfg.from_scratch |= self.from_scratch;
        cfg.dump_eval |= self.dump_eval;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run_dir(out: Option<PathBuf>, cfg: &ExperimentConfig) -> PathBuf {
    out.unwrap_or_else(|| run_root().join(&cfg.name))
}

fn execute(command: Command) -> Result<(), Error> {
    match command {
        Command::GenData {
            seed,
            train,
            test,
            scene,
            out,
        } => {
            if train == 0 {
                return Err(Error::Config {
                    field: "train".into(),
                    message: "must be at least 1".into(),
                });
            }
            if test == 0 {
                return Err(Error::Config {
                    field: "test".into(),
                    message: "must be at least 1".into(),
                });
            }
            let config = match scene {
                Some(path) => {
                    let text = std::fs::read_to_string(&path).map_err(|e| Error::Config {
                        field: "scene".into(),
                        message: format!("{}: {e}", path.display()),
                    })?;
                    serde_json::from_str(&text).map_err(|e| Error::Config {
                        field: "scene".into(),
                        message: e.to_string(),
                    })?
                }
                None => Default::default(),
            };
            let (tr, te) = generate_dataset(seed, train, test, &config)?;
            let meta = DatasetMeta {
                seed: Some(seed),
                config: Some(config),
            };
            write_dataset(&out, &tr, &te, &meta)?;
            println!("train Q = {}", tr.q());
            println!("test Q = {}", te.q());
        }
        Command::Run { cfg, out, resume } => {
            let cfg = cfg.resolve()?;
            let dir = run_dir(out, &cfg);
            let data = Data::load(&cfg)?;
            let report = if resume && RunDir::new(&dir).config().exists() {
                resume_experiment(&dir, data)?
            } else {
                run_experiment(cfg, data, Some(dir.clone()))?
            };
            print_metrics(&report.metrics);
            eprintln!("run directory: {}", dir.display());
        }
        Command::Sweep {
            cfg,
            seeds,
            strategies,
            soft_reports,
            target_heads,
            out,
        } => {
            let mut cfg = cfg.resolve()?;
            if let Some(s) = seeds {
                cfg.seeds = s;
            }
            if let Some(s) = strategies {
                cfg.strategies = s;
            }
            cfg.validate()?;
            let root = run_dir(out, &cfg);
            let data = Data::load(&cfg)?;
            let mut summary = run_sweep(&cfg, &data, Some(&root))?;
            if soft_reports {
                add_soft_reports(&mut summary, &cfg, &data, &root, target_heads)?;
                summary.write(&root)?;
            }
            for f in summary.failures() {
                eprintln!(
                    "run {} seed {} failed: {}",
                    f.strategy,
                    f.seed,
                    f.error.as_deref().unwrap_or_default()
                );
            }
            for s in &summary.soft {
                let verdict = match s.holds {
                    Some(true) => "holds",
                    Some(false) => "violated",
                    None => "n/a",
                };
                println!("{}: {verdict} ({})", s.name, s.detail);
            }
            println!("summary: {}", root.join("sweep_summary.csv").display());
        }
        Command::Eval { run, step, per_instance } => {
            let dir = RunDir::new(&run);
            let cfg = ExperimentConfig::from_json(&dir.read(&dir.config())?)?;
            let step = match step {
                Some(s) => s,
                None => last_step(&run)?,
            };
            let (model, _) = read_checkpoint(&run, step)?;
            let data = Data::load(&cfg)?;
            let mut report = dataset_map(&model, &data.test)?;
            if !per_instance {
                report.instances.clear();
            }
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Transfer { from, cfg, out } => {
            let mut cfg = cfg.resolve()?;
            if cfg.name == ExperimentConfig::default().name {
                cfg.name = format!(
                    "{}-transfer",
                    from.file_name().map_or("run".into(), |n| n.to_string_lossy().into_owned())
                );
            }
            cfg.transfer_from = Some(from);
            let dir = run_dir(out, &cfg);
            let data = Data::load(&cfg)?;
            let report = run_experiment(cfg, data, Some(dir.clone()))?;
            print_metrics(&report.metrics);
            eprintln!("run directory: {}", dir.display());
        }
        Command::Serve { addr, root } => {
            let root = root.unwrap_or_else(|| run_root().join("sessions"));
            let rt = tokio::runtime::Runtime::new().map_err(|e| Error::Io {
                path: root.clone(),
                source: e,
            })?;
            eprintln!("serving {} on http://{addr}", root.display());
            rt.block_on(apis_service::serve(root, addr))
                .map_err(|e| Error::InvalidValue(e.to_string()))?;
        }
    }
    Ok(())
}

fn last_step(run: &Path) -> Result<u32, Error> {
    let dir = RunDir::new(run);
    let rows = apis_core::driver::artifacts::metrics_from_csv(&dir.read(&dir.metrics())?)?;
    rows.last()
        .map(|r| r.step)
        .ok_or_else(|| Error::InvalidValue(format!("{} has no completed step", run.display())))
}

fn print_metrics(rows: &[apis_core::driver::MetricsRow]) {
    println!("step  points  masks  budget_s   iou     mAP");
    for r in rows {
        println!(
            "{:>4}  {:>6}  {:>5}  {:>8.1}  {:.4}  {:.4}",
            r.step, r.n_points, r.n_masks, r.budget_seconds, r.test_mean_iou, r.test_map
        );
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config { .. }) => {
            eprintln!("configuration error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
