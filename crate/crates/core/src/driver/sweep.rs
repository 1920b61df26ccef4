//! Strategy × seed sweeps and their seed-averaged summary.
//!
//! `sweep_summary.csv` is long-format: one row per (kind, strategy, step,
//! metric). `mean` rows aggregate one strategy over seeds; `diff` rows
//! aggregate seed-paired differences `strategy − baseline`; `soft` rows carry
//! directional checks that are reported but never enforced.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use super::artifacts::{MetricsRow, RunDir, RunReport};
use super::config::ExperimentConfig;
use super::experiment::{run_experiment, Data};
use crate::error::{Error, Result};
use crate::segmodel::ScheduleKind;

/// Metrics aggregated by a sweep, by `metrics.csv` column name.
pub const SUMMARY_METRICS: [&str; 9] = [
    "budget_seconds",
    "test_mean_iou",
    "test_map",
    "ap_small",
    "ap_medium",
    "ap_large",
    "point_acc",
    "new_point_misclass_ratio",
    "mean_boundary_dist",
];

pub fn metric_value(row: &MetricsRow, metric: &str) -> Option<f64> {
    match metric {
        "budget_seconds" => Some(row.budget_seconds),
        "test_mean_iou" => Some(row.test_mean_iou),
        "test_map" => Some(row.test_map),
        "ap_small" => row.ap_small,
        "ap_medium" => row.ap_medium,
        "ap_large" => row.ap_large,
        "point_acc" => row.point_acc,
        "new_point_misclass_ratio" => row.new_point_misclass_ratio,
        "mean_boundary_dist" => row.mean_boundary_dist,
        _ => None,
    }
}

/// One run of a sweep; `report` is absent when the run failed outright.
#[derive(Clone, Debug, Serialize)]
pub struct SweepRun {
    pub strategy: String,
    pub seed: u64,
    pub dir: Option<PathBuf>,
    pub report: Option<RunReport>,
    pub error: Option<String>,
}

impl SweepRun {
    fn metrics(&self) -> &[MetricsRow] {
        self.report.as_ref().map_or(&[], |r| &r.metrics)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub kind: &'static str,
    pub strategy: String,
    pub baseline: String,
    pub step: u32,
    pub metric: String,
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation; absent for a single observation.
    pub sd: Option<f64>,
}

/// A directional expectation checked after the fact.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SoftReport {
    pub name: String,
    /// `None` when the sweep lacks the runs the check needs.
    pub holds: Option<bool>,
    pub detail: String,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct SweepSummary {
    pub runs: Vec<SweepRun>,
    pub rows: Vec<SummaryRow>,
    pub soft: Vec<SoftReport>,
}

/// Mean and sample standard deviation.
pub fn mean_sd(xs: &[f64]) -> Option<(f64, Option<f64>)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let sd = (xs.len() > 1).then(|| (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    Some((mean, sd))
}

impl SweepSummary {
    pub fn from_runs(strategies: &[String], runs: Vec<SweepRun>) -> Self {
        let steps = runs.iter().flat_map(|r| r.metrics().iter().map(|m| m.step)).max();
        let mut rows = Vec::new();
        let at = |run: &SweepRun, step: u32, metric: &str| {
            run.metrics()
                .iter()
                .find(|m| m.step == step)
                .and_then(|m| metric_value(m, metric))
        };
        for step in steps.map_or(1..=0, |s| 0..=s) {
            for metric in SUMMARY_METRICS {
                for s in strategies {
                    let xs: Vec<f64> = runs
                        .iter()
                        .filter(|r| &r.strategy == s)
                        .filter_map(|r| at(r, step, metric))
                        .collect();
                    if let Some((mean, sd)) = mean_sd(&xs) {
                        rows.push(SummaryRow {
                            kind: "mean",
                            strategy: s.clone(),
                            baseline: String::new(),
                            step,
                            metric: metric.to_string(),
                            n: xs.len(),
                            mean,
                            sd,
                        });
                    }
                }
                for (i, a) in strategies.iter().enumerate() {
                    for b in &strategies[i + 1..] {
                        let xs: Vec<f64> = runs
                            .iter()
                            .filter(|r| &r.strategy == a)
                            .filter_map(|ra| {
                                let rb = runs.iter().find(|r| &r.strategy == b && r.seed == ra.seed)?;
                                Some(at(ra, step, metric)? - at(rb, step, metric)?)
                            })
                            .collect();
                        if let Some((mean, sd)) = mean_sd(&xs) {
                            rows.push(SummaryRow {
                                kind: "diff",
                                strategy: a.clone(),
                                baseline: b.clone(),
                                step,
                                metric: metric.to_string(),
                                n: xs.len(),
                                mean,
                                sd,
                            });
                        }
                    }
                }
            }
        }
        let mut summary = Self {
            runs,
            rows,
            soft: Vec::new(),
        };
        summary.soft.push(bucket_report(&summary));
        summary
    }

    /// Seed-averaged `metric` of `strategy` at `step`.
    pub fn mean(&self, strategy: &str, step: u32, metric: &str) -> Option<f64> {
        self.find("mean", strategy, "", step, metric).map(|r| r.mean)
    }

    /// Seed-paired mean of `a − b` at `step`, in either orientation.
    pub fn diff(&self, a: &str, b: &str, step: u32, metric: &str) -> Option<f64> {
        self.find("diff", a, b, step, metric)
            .map(|r| r.mean)
            .or_else(|| self.find("diff", b, a, step, metric).map(|r| -r.mean))
    }

    pub fn last_step(&self) -> Option<u32> {
        self.rows.iter().map(|r| r.step).max()
    }

    pub fn failures(&self) -> impl Iterator<Item = &SweepRun> {
        self.runs.iter().filter(|r| r.error.is_some())
    }

    fn find(&self, kind: &str, strategy: &str, baseline: &str, step: u32, metric: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| {
            r.kind == kind && r.strategy == strategy && r.baseline == baseline && r.step == step && r.metric == metric
        })
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["kind", "strategy", "baseline", "step", "metric", "n", "mean", "sd"])?;
        let fmt = |x: f64| format!("{x:.6}");
        for r in &self.rows {
            w.write_record([
                r.kind.to_string(),
                r.strategy.clone(),
                r.baseline.clone(),
                r.step.to_string(),
                r.metric.clone(),
                r.n.to_string(),
                fmt(r.mean),
                r.sd.map(fmt).unwrap_or_default(),
            ])?;
        }
        for s in &self.soft {
            let holds = match s.holds {
                Some(true) => "holds",
                Some(false) => "violated",
                None => "n/a",
            };
            w.write_record(["soft", s.name.as_str(), holds, "", s.detail.as_str(), "", "", ""])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidValue(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        let dir = RunDir::new(root);
        dir.create()?;
        dir.write(&root.join("sweep_summary.csv"), &self.to_csv()?)?;
        dir.write(&root.join("sweep.json"), &(serde_json::to_string_pretty(self)? + "\n"))
    }
}

/// Entropy's AP gain over Random should be largest on large instances.
fn bucket_report(summary: &SweepSummary) -> SoftReport {
    let name = "entropy-gain-largest-on-large".to_string();
    let step = summary.last_step().unwrap_or(0);
    let gains: Vec<Option<f64>> = ["ap_small", "ap_medium", "ap_large"]
        .iter()
        .map(|m| summary.diff("entropy", "random", step, m))
        .collect();
    match gains[..] {
        [Some(s), Some(m), Some(l)] => SoftReport {
            name,
            holds: Some(l >= s && l >= m),
            detail: format!("step {step} dAP small {s:+.4} medium {m:+.4} large {l:+.4}"),
        },
        _ => SoftReport {
            name,
            holds: None,
            detail: "needs entropy and random runs with all size buckets populated".into(),
        },
    }
}

/// Runs `cfg.strategies × cfg.seeds`, each into `<root>/<strategy>_seed<k>`.
///
/// Individual failures are recorded and the sweep carries on.
pub fn run_sweep(cfg: &ExperimentConfig, data: &Data, root: Option<&Path>) -> Result<SweepSummary> {
    if cfg.seeds.len() < 2 {
        return Err(Error::config("seeds", "a sweep needs at least two seeds"));
    }
    if cfg.strategies.is_empty() {
        return Err(Error::config("strategies", "a sweep needs at least one strategy"));
    }
    cfg.validate()?;
    let jobs: Vec<(String, u64)> = cfg
        .strategies
        .iter()
        .flat_map(|s| cfg.seeds.iter().map(move |&k| (s.clone(), k)))
        .collect();
    let runs = jobs
        .into_par_iter()
        .map(|(strategy, seed)| {
            let name = format!("{}_seed{seed}", strategy.replace(':', "-"));
            let run_cfg = ExperimentConfig {
                name: name.clone(),
                strategy: strategy.clone(),
                seed,
                ..cfg.clone()
            };
            let dir = root.map(|r| r.join(&name));
            let result = run_experiment(run_cfg, data.clone(), dir.clone());
            let (report, error) = match result {
                Ok(r) => (Some(r), None),
                Err(e) => (None, Some(e.to_string())),
            };
            SweepRun {
                strategy,
                seed,
                dir,
                report,
                error,
            }
        })
        .collect();
    let summary = SweepSummary::from_runs(&cfg.strategies, runs);
    if let Some(root) = root {
        summary.write(root)?;
    }
    Ok(summary)
}

fn gap_at_end(summary: &SweepSummary) -> Option<(u32, f64)> {
    let step = summary.last_step()?;
    Some((step, summary.diff("entropy", "random", step, "test_map")?))
}

/// Runs the extra sweeps behind the schedule and transfer checks and adds
/// their outcomes to `summary`.
///
/// Entropy and random are re-run under the short and long schedules; then the
/// native entropy point sets are replayed into a target with `target_heads`
/// heads and compared against that target's own entropy and random runs.
pub fn add_soft_reports(
    summary: &mut SweepSummary,
    cfg: &ExperimentConfig,
    data: &Data,
    root: &Path,
    target_heads: usize,
) -> Result<()> {
    let pair = ExperimentConfig {
        strategies: vec!["entropy".into(), "random".into()],
        ..cfg.clone()
    };
    let mut gaps = Vec::new();
    for kind in [ScheduleKind::Short, ScheduleKind::Long] {
        let c = ExperimentConfig {
            schedule: kind,
            ..pair.clone()
        };
        let label = serde_json::to_value(kind)?.as_str().unwrap_or_default().to_string();
        gaps.push(gap_at_end(&run_sweep(&c, data, Some(&root.join(format!("schedule-{label}"))))?));
    }
    summary.soft.push(match gaps[..] {
        [Some((_, short)), Some((step, long))] => SoftReport {
            name: "long-schedule-widens-gap".into(),
            holds: Some(long > short),
            detail: format!("step {step} entropy-random mAP short {short:+.4} long {long:+.4}"),
        },
        _ => SoftReport {
            name: "long-schedule-widens-gap".into(),
            holds: None,
            detail: "schedule sweeps produced no comparable runs".into(),
        },
    });

    let target = ExperimentConfig {
        heads: target_heads,
        ..pair.clone()
    };
    let native_root = root.join("transfer-source");
    let native = run_sweep(
        &ExperimentConfig {
            strategies: vec!["entropy".into()],
            ..cfg.clone()
        },
        data,
        Some(&native_root),
    )?;
    let target_root = root.join("transfer-target");
    let baselines = run_sweep(&target, data, Some(&target_root))?;
    let transferred: Vec<SweepRun> = native
        .runs
        .par_iter()
        .filter_map(|src| {
            let src_dir = src.dir.clone()?;
            src.error.is_none().then_some(())?;
            let name = format!("transferred_seed{}", src.seed);
            let c = ExperimentConfig {
                name: name.clone(),
                strategy: "entropy".into(),
                seed: src.seed,
                transfer_from: Some(src_dir),
                ..target.clone()
            };
            let dir = target_root.join(&name);
            let result = run_experiment(c, data.clone(), Some(dir.clone()));
            Some(SweepRun {
                strategy: "transferred".into(),
                seed: src.seed,
                dir: Some(dir),
                error: result.as_ref().err().map(ToString::to_string),
                report: result.ok(),
            })
        })
        .collect();
    let step = cfg.steps;
    let score = |runs: &[SweepRun], strategy: &str| {
        let xs: Vec<f64> = runs
            .iter()
            .filter(|r| r.strategy == strategy)
            .filter_map(|r| r.metrics().iter().find(|m| m.step == step).map(|m| m.test_map))
            .collect();
        mean_sd(&xs).map(|(m, _)| m)
    };
    let transfer = score(&transferred, "transferred");
    summary.soft.push(
        match (transfer, score(&baselines.runs, "entropy"), score(&baselines.runs, "random")) {
            (Some(t), Some(e), Some(r)) => SoftReport {
                name: "transfer-between-native-and-random".into(),
                holds: Some(t <= e && t >= r),
                detail: format!("step {step} mAP native {e:.4} transferred {t:.4} random {r:.4}"),
            },
            _ => SoftReport {
                name: "transfer-between-native-and-random".into(),
                holds: None,
                detail: "transfer runs produced no comparable results".into(),
            },
        },
    );
    summary.runs.extend(transferred);
    Ok(())
}
