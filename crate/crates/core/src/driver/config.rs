//! Experiment configuration, read from and written to `config.json`.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::budget::CostModel;
use crate::error::{Error, Result};
use crate::segmodel::{ModelConfig, PredictionMode, ScheduleKind};
use crate::selection::{AfisLevel, AfisMetric, AfisSelector, PointStrategy, SubsetMode};
use crate::synthgen::SceneConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnotatorKind {
    Simulated,
    Human,
}

/// What a run does at each step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StrategySpec {
    Points(PointStrategy),
    Afis(AfisSelector),
}

impl StrategySpec {
    pub fn parse(token: &str, metric: Option<&str>) -> Result<Self> {
        if let Ok(level) = token.parse::<AfisLevel>() {
            let metric = metric
                .ok_or_else(|| Error::config("metric", format!("`{token}` needs a metric")))?
                .parse::<AfisMetric>()
                .map_err(|e| Error::config("metric", e.to_string()))?;
            return Ok(StrategySpec::Afis(AfisSelector { level, metric }));
        }
        token
            .parse::<PointStrategy>()
            .map(StrategySpec::Points)
            .map_err(|e| Error::config("strategy", e.to_string()))
    }

    pub fn label(&self) -> String {
        match self {
            StrategySpec::Points(s) => s.token().to_string(),
            StrategySpec::Afis(a) => format!("{}:{}", a.level.token(), a.metric.token()),
        }
    }
}

/// All run parameters. Keys are stable; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub name: String,
    /// Dataset directory; generated in memory from `data_seed` when absent.
    pub data_dir: Option<PathBuf>,
    pub data_seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub scene: SceneConfig,
    pub seed: u64,
    pub strategy: String,
    /// AFIS selection metric.
    pub metric: Option<String>,
    pub mode: PredictionMode,
    pub steps: u32,
    pub schedule: ScheduleKind,
    /// Points per step; all instances when absent.
    pub budget_points: Option<usize>,
    pub budget_instance_selection: SubsetMode,
    pub heads: usize,
    /// Model copies for mode M.
    pub replicas: usize,
    pub scales: Vec<f64>,
    pub lambda: f64,
    pub batch_size: usize,
    pub t_point: f64,
    pub t_mask: f64,
    pub from_scratch: bool,
    pub annotator: AnnotatorKind,
    /// Source run whose point sets are replayed instead of selecting.
    pub transfer_from: Option<PathBuf>,
    pub dump_eval: bool,
    /// Sweep axes.
    pub seeds: Vec<u64>,
    pub strategies: Vec<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        Self {
            name: "run".into(),
            data_dir: None,
            data_seed: 0,
            n_train: 200,
            n_test: 100,
            scene: SceneConfig::default(),
            seed: 0,
            strategy: "entropy".into(),
            metric: None,
            mode: PredictionMode::A,
            steps: 5,
            schedule: ScheduleKind::Default,
            budget_points: None,
            budget_instance_selection: SubsetMode::Random,
            heads: model.heads,
            replicas: 3,
            scales: model.scales,
            lambda: model.lambda,
            batch_size: 256,
            t_point: 0.9,
            t_mask: 79.2,
            from_scratch: false,
            annotator: AnnotatorKind::Simulated,
            transfer_from: None,
            dump_eval: false,
            seeds: vec![0, 1, 2, 3, 4],
            strategies: vec!["entropy".into(), "random".into()],
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| {
            let msg = e.to_string();
            let field = msg
                .split('`')
                .nth(1)
                .filter(|_| msg.starts_with("unknown field"))
                .unwrap_or("config")
                .to_string();
            Error::Config { field, message: msg }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialization") + "\n"
    }

    pub fn spec(&self) -> Result<StrategySpec> {
        StrategySpec::parse(&self.strategy, self.metric.as_deref())
    }

    pub fn costs(&self) -> Result<CostModel> {
        let c = CostModel::from_seconds(self.t_point, self.t_mask)
            .map_err(|e| Error::config("t_point", e.to_string()))?;
        if c.point_ms == 0 {
            return Err(Error::config("t_point", "must be positive"));
        }
        if c.mask_ms == 0 {
            return Err(Error::config("t_mask", "must be positive"));
        }
        Ok(c)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            heads: self.heads,
            replicas: if self.mode == PredictionMode::M { self.replicas } else { 1 },
            scales: self.scales.clone(),
            lambda: self.lambda,
            init_std: ModelConfig::default().init_std,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::config("name", "must be a non-empty plain directory name"));
        }
        if self.steps < 1 {
            return Err(Error::config("steps", "must be at least 1"));
        }
        if self.data_dir.is_none() {
            if self.n_train == 0 {
                return Err(Error::config("n_train", "must be at least 1"));
            }
            if self.n_test == 0 {
                return Err(Error::config("n_test", "must be at least 1"));
            }
        }
        let spec = self.spec()?;
        if let (StrategySpec::Afis(_), AnnotatorKind::Human) = (spec, self.annotator) {
            return Err(Error::config("annotator", "mask annotation runs are simulation-only"));
        }
        if self.budget_points == Some(0) {
            return Err(Error::config("budget_points", "must be at least 1"));
        }
        if self.heads == 0 {
            return Err(Error::config("heads", "must be at least 1"));
        }
        if self.mode == PredictionMode::M && self.replicas < 2 {
            return Err(Error::config("replicas", "mode M needs at least 2 replicas"));
        }
        if self.mode == PredictionMode::S && self.scales.is_empty() {
            return Err(Error::config("scales", "mode S needs at least one scale"));
        }
        if self.scales.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(Error::config("scales", "blur sigmas must be finite and non-negative"));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::config("lambda", "must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        self.costs()?;
        self.scene.validate()?;
        for s in &self.strategies {
            StrategySpec::parse(s, self.metric.as_deref())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        assert_eq!(ExperimentConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = ExperimentConfig::from_json(r#"{"stepz": 3}"#).unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "stepz"), "{err}");
    }

    #[test]
    fn strategy_tokens() {
        let c = ExperimentConfig {
            strategy: "afis-instance".into(),
            metric: Some("min-det-loss".into()),
            ..ExperimentConfig::default()
        };
        assert_eq!(
            c.spec().unwrap(),
            StrategySpec::Afis(AfisSelector {
                level: AfisLevel::Instance,
                metric: AfisMetric::MinDetLoss
            })
        );
        let bad = ExperimentConfig {
            strategy: "afis-image".into(),
            ..ExperimentConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config { ref field, .. }) if field == "metric"));
        let bad = ExperimentConfig {
            steps: 0,
            ..ExperimentConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config { ref field, .. }) if field == "steps"));
    }
}
