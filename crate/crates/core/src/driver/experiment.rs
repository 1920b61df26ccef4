//! The active-learning loop as an explicit state machine.
//!
//! Each step is split into [`Experiment::plan`] (choose what to ask) and
//! [`Experiment::complete`] (ask, merge, train, evaluate, persist). A
//! simulated run calls both back to back; a human session plans, waits for
//! every answer, then completes with the collected answers. Because the
//! audit trail is written in `complete` in query order, both produce the
//! same artifacts when the answers agree.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;

use super::artifacts::{
    metrics_from_csv, metrics_to_csv, oracle_log_text, parse_oracle_log, AfisStepRecord, MetricsRow, RunDir,
    RunReport,
};
use super::config::{ExperimentConfig, StrategySpec};
use crate::budget::{millis_to_seconds, CostModel};
use crate::error::{Error, Result};
use crate::eval::{boundary_distance_stats, dataset_map, misclassification_ratio, point_accuracy};
use crate::oracle::{Annotator, AuditTrail, PointQuery, QueryKind, SimulatedOracle};
use crate::points::{merge_point_set, PointAnnotation, PointSet};
use crate::rng::{derive_seed, stream};
use crate::segmodel::checkpoint::{read_checkpoint, write_checkpoint, CheckpointMeta};
use crate::segmodel::{
    predict_region, train, ImageViews, ModelState, PredictionMode, PredictionSet, Supervision,
    TrainSchedule,
};
use crate::selection::{
    afis_scores, afis_select, select_instances_under_budget, select_point, select_point_by_error, uniform_scores,
    AfisMetric, AfisSelector, ErrorMode, PointStrategy, SelectionDomain,
};
use crate::synthgen::{generate_dataset, read_dataset, LabeledSplit};
use crate::types::{Bitmask, InstanceKey};
use crate::uncertainty::mean_map;

/// Train and test splits shared by the runs of a sweep.
#[derive(Clone, Debug)]
pub struct Data {
    pub train: Arc<LabeledSplit>,
    pub test: Arc<LabeledSplit>,
}

impl Data {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let (train, test) = match &cfg.data_dir {
            Some(dir) => {
                let (train, test, _) = read_dataset(dir)?;
                (train, test)
            }
            None => generate_dataset(cfg.data_seed, cfg.n_train, cfg.n_test, &cfg.scene)?,
        };
        Ok(Self {
            train: Arc::new(train),
            test: Arc::new(test),
        })
    }
}

/// Work chosen for one step, fixed before any answer is seen.
#[derive(Clone, Debug, PartialEq)]
pub struct Plan {
    pub step: u32,
    pub queries: Vec<PointQuery>,
    pub masks: Vec<InstanceKey>,
    /// Instances with no unlabeled box pixel left.
    pub skipped: Vec<InstanceKey>,
}

/// Answers point queries from an existing point set (transfer runs).
struct Replay {
    labels: HashMap<(InstanceKey, u32, u32), u8>,
}

impl Annotator for Replay {
    fn answer_point(&self, q: &PointQuery) -> Result<u8> {
        self.labels
            .get(&(q.key(), q.x, q.y))
            .copied()
            .ok_or(Error::AnnotatorTimeout(q.query_id))
    }

    fn answer_mask(&self, _key: InstanceKey) -> Result<Bitmask> {
        Err(Error::Unsupported("mask queries in transfer runs"))
    }
}

pub struct Experiment {
    cfg: ExperimentConfig,
    spec: StrategySpec,
    costs: CostModel,
    data: Data,
    dir: Option<RunDir>,
    model: Option<ModelState>,
    points: PointSet,
    masks: BTreeMap<InstanceKey, Bitmask>,
    trail: AuditTrail,
    metrics: Vec<MetricsRow>,
    train_iters_cum: u64,
    skipped: Vec<String>,
    afis: Vec<AfisStepRecord>,
    source: Option<PointSet>,
}

fn source_points(cfg: &ExperimentConfig, data: &Data) -> Result<Option<PointSet>> {
    let Some(src) = &cfg.transfer_from else {
        return Ok(None);
    };
    let path = RunDir::new(src).points(cfg.steps);
    let text = std::fs::read_to_string(&path).map_err(|_| Error::MissingPointSets(src.clone()))?;
    let set = PointSet::from_json(&text, &data.train.dataset)?;
    if set.step() < cfg.steps {
        return Err(Error::MissingPointSets(src.clone()));
    }
    Ok(Some(set))
}

impl Experiment {
    /// Starts a fresh run; `dir` receives artifacts when given.
    pub fn new(cfg: ExperimentConfig, data: Data, dir: Option<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        let spec = cfg.spec()?;
        let costs = cfg.costs()?;
        let source = source_points(&cfg, &data)?;
        if source.is_some() && matches!(spec, StrategySpec::Afis(_)) {
            return Err(Error::config("transfer_from", "transfer replays point sets only"));
        }
        let dir = dir.map(RunDir::new);
        if let Some(d) = &dir {
            d.create()?;
            d.write(&d.config(), &cfg.to_json())?;
        }
        Ok(Self {
            cfg,
            spec,
            costs,
            data,
            dir,
            model: None,
            points: PointSet::default(),
            masks: BTreeMap::new(),
            trail: AuditTrail::new(costs),
            metrics: Vec::new(),
            train_iters_cum: 0,
            skipped: Vec::new(),
            afis: Vec::new(),
            source,
        })
    }

    /// Reopens a run directory after its last completed step.
    pub fn resume(dir: &Path, data: Data) -> Result<Self> {
        let run = RunDir::new(dir);
        let cfg = ExperimentConfig::from_json(&run.read(&run.config())?)?;
        let mut exp = Experiment::new(cfg, data, None)?;
        exp.dir = Some(run.clone());
        let metrics = match run.read(&run.metrics()) {
            Ok(text) => metrics_from_csv(&text)?,
            Err(_) => return Ok(exp),
        };
        let Some(last) = metrics.last().map(|r| r.step) else {
            return Ok(exp);
        };
        let (model, meta) = read_checkpoint(dir, last)?;
        exp.train_iters_cum = meta.train_iters_cum;
        exp.model = Some(model);
        if let StrategySpec::Points(_) = exp.spec {
            exp.points = PointSet::from_json(&run.read(&run.points(last))?, &exp.data.train.dataset)?;
        }
        let log = parse_oracle_log(&run.read(&run.oracle_log()).unwrap_or_default())?;
        let log: Vec<_> = log.into_iter().filter(|r| r.step <= last).collect();
        let oracle = SimulatedOracle::new(exp.data.train.clone());
        for r in log.iter().filter(|r| r.kind == QueryKind::Mask) {
            exp.masks.insert(r.instance, oracle.answer_mask(r.instance)?);
        }
        exp.trail = AuditTrail::replay(exp.costs, log);
        if let Ok(text) = run.read(&run.report()) {
            let report: RunReport = serde_json::from_str(&text)?;
            exp.skipped = report.skipped_instances;
            exp.afis = report.afis.into_iter().filter(|a| a.step <= last).collect();
        }
        exp.metrics = metrics;
        Ok(exp)
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn data(&self) -> &Data {
        &self.data
    }

    pub fn metrics(&self) -> &[MetricsRow] {
        &self.metrics
    }

    pub fn points(&self) -> &PointSet {
        &self.points
    }

    pub fn model(&self) -> Option<&ModelState> {
        self.model.as_ref()
    }

    pub fn trail(&self) -> &AuditTrail {
        &self.trail
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_ref().map(|d| d.root.as_path())
    }

    /// The step that `plan` would prepare, or `None` when finished.
    pub fn next_step(&self) -> Option<u32> {
        let next = self.metrics.last().map_or(0, |r| r.step + 1);
        (next <= self.cfg.steps).then_some(next)
    }

    fn q(&self) -> usize {
        self.data.train.q()
    }

    /// Points charged to this step's allocation.
    fn step_point_budget(&self, step: u32) -> usize {
        if step == 0 {
            self.q()
        } else {
            self.cfg.budget_points.map_or(self.q(), |b| b.min(self.q()))
        }
    }

    fn allocated_ms(&self, step: u32) -> u64 {
        (0..=step).map(|s| self.step_point_budget(s) as u64 * self.costs.point_ms).sum()
    }

    /// Chooses the queries (or masks) of the next step.
    pub fn plan(&self) -> Result<Plan> {
        let step = self
            .next_step()
            .ok_or_else(|| Error::InvalidValue("run already finished".into()))?;
        let mut plan = Plan {
            step,
            queries: Vec::new(),
            masks: Vec::new(),
            skipped: Vec::new(),
        };
        match self.spec {
            StrategySpec::Afis(sel) => plan.masks = self.plan_masks(step, sel)?,
            StrategySpec::Points(_) if self.source.is_some() => {
                let src = self.source.as_ref().expect("checked");
                let base = self.trail.log().len() as u64;
                plan.queries = src
                    .at_step(step)
                    .enumerate()
                    .map(|(i, p)| query(base + i as u64, p.key(), (p.x, p.y), step))
                    .collect();
            }
            StrategySpec::Points(strategy) => {
                let picks = if step == 0 {
                    self.initial_points()
                } else {
                    self.select_points(step, strategy)?
                };
                let base = self.trail.log().len() as u64;
                let mut i = 0;
                for (key, pick) in picks {
                    match pick {
                        Some(xy) => {
                            plan.queries.push(query(base + i, key, xy, step));
                            i += 1;
                        }
                        None => plan.skipped.push(key),
                    }
                }
            }
        }
        Ok(plan)
    }

    fn initial_points(&self) -> Vec<(InstanceKey, Option<(u32, u32)>)> {
        self.data
            .train
            .dataset
            .instances()
            .iter()
            .map(|rec| {
                let key = rec.key();
                let mut rng = stream(self.cfg.seed, "init-point", &[key.image_id as u64, key.instance_id as u64]);
                let b = rec.bbox;
                let x = rng.random_range(b.x_min..=b.x_max);
                let y = rng.random_range(b.y_min..=b.y_max);
                (key, Some((x, y)))
            })
            .collect()
    }

    fn eligible(&self, step: u32) -> Result<Vec<InstanceKey>> {
        let pool: Vec<InstanceKey> = self.data.train.dataset.instances().iter().map(|r| r.key()).collect();
        let budget = self.step_point_budget(step);
        if budget >= pool.len() {
            return Ok(pool);
        }
        let model = self.model.as_ref().expect("planned after init");
        let scores = match self.cfg.budget_instance_selection {
            crate::selection::SubsetMode::Random => BTreeMap::new(),
            crate::selection::SubsetMode::MinDetLoss => {
                afis_scores(model, &self.data.train.dataset, AfisMetric::MinDetLoss, PredictionMode::A)?.instance
            }
        };
        let mut rng = stream(self.cfg.seed, "subset", &[step as u64]);
        Ok(select_instances_under_budget(
            self.cfg.budget_instance_selection,
            budget,
            &pool,
            &scores,
            &mut rng,
        ))
    }

    fn select_points(&self, step: u32, strategy: PointStrategy) -> Result<Vec<(InstanceKey, Option<(u32, u32)>)>> {
        let model = self.model.as_ref().expect("planned after init");
        let eligible = self.eligible(step)?;
        let mut by_image: BTreeMap<u32, Vec<InstanceKey>> = BTreeMap::new();
        for k in &eligible {
            by_image.entry(k.image_id).or_default().push(*k);
        }
        let mode = self.cfg.mode;
        let train = &self.data.train;
        let scales: &[f64] = if mode == PredictionMode::S { &model.scales } else { &[] };
        let picked: Vec<Vec<(InstanceKey, Option<(u32, u32)>)>> = by_image
            .par_iter()
            .map(|(&image_id, keys)| {
                let image = train.dataset.image(image_id).ok_or(Error::UnknownInstance(keys[0]))?;
                let views = if strategy == PointStrategy::Random {
                    None
                } else {
                    Some(ImageViews::new(image, scales)?)
                };
                keys.iter()
                    .map(|&key| {
                        let rec = train.dataset.instance(key).ok_or(Error::UnknownInstance(key))?;
                        let domain = SelectionDomain::new(rec.bbox, self.points.labeled_pixels(key));
                        if domain.is_empty() {
                            return Ok((key, None));
                        }
                        let ps = match &views {
                            Some(v) => predict_region(model, v, rec, rec.bbox, mode)?,
                            None => PredictionSet {
                                key,
                                region: rec.bbox,
                                maps: Vec::new(),
                                mode,
                            },
                        };
                        let xy = match strategy {
                            PointStrategy::MaxError | PointStrategy::LeastError => {
                                let truth = train.mask(key).ok_or(Error::UnknownInstance(key))?;
                                let m = if strategy == PointStrategy::MaxError {
                                    ErrorMode::Max
                                } else {
                                    ErrorMode::Min
                                };
                                select_point_by_error(m, &mean_map(&ps)?, rec.bbox, truth, &domain)?
                            }
                            _ => {
                                let keys = [step as u64, key.image_id as u64, key.instance_id as u64];
                                let mut rng = stream(self.cfg.seed, "select", &keys);
                                select_point(strategy, &ps, &domain, &mut rng)?
                            }
                        };
                        Ok((key, Some(xy)))
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        Ok(picked.into_iter().flatten().collect())
    }

    fn plan_masks(&self, step: u32, sel: AfisSelector) -> Result<Vec<InstanceKey>> {
        let dataset = &self.data.train.dataset;
        let (metric, scores) = match &self.model {
            Some(model) if step > 0 => (sel.metric, afis_scores(model, dataset, sel.metric, self.cfg.mode)?),
            _ => (
                AfisMetric::Random,
                uniform_scores(dataset),
            ),
        };
        let budget_ms = self.step_point_budget(step) as u64 * self.costs.point_ms;
        let mut rng = stream(self.cfg.seed, "afis", &[step as u64]);
        let annotated = self.trail.masked();
        Ok(afis_select(
            &scores,
            AfisSelector { level: sel.level, metric },
            budget_ms,
            &self.costs,
            annotated,
            &mut rng,
        ))
    }

    fn schedule(&self, step: u32) -> (TrainSchedule, bool) {
        let seed = derive_seed(self.cfg.seed, "train", &[step as u64]);
        if step == 0 || self.cfg.from_scratch {
            (TrainSchedule::initial(seed, self.cfg.batch_size), true)
        } else {
            (TrainSchedule::fine_tune(self.cfg.schedule, seed, self.cfg.batch_size), false)
        }
    }

    /// Asks `annotator` every planned question, then trains and evaluates.
    pub fn complete(&mut self, plan: &Plan, annotator: &dyn Annotator) -> Result<MetricsRow> {
        if Some(plan.step) != self.next_step() {
            return Err(Error::InvalidValue(format!("plan for step {} is stale", plan.step)));
        }
        let step = plan.step;
        let replay;
        let annotator: &dyn Annotator = match &self.source {
            Some(src) => {
                replay = Replay {
                    labels: src.points().iter().map(|p| ((p.key(), p.x, p.y), p.label)).collect(),
                };
                &replay
            }
            None => annotator,
        };
        let dataset = &self.data.train.dataset;

        let mut new_points = Vec::with_capacity(plan.queries.len());
        for q in &plan.queries {
            let label = self.trail.query_point_label(annotator, dataset, q)?;
            new_points.push(PointAnnotation {
                image_id: q.image_id,
                instance_id: q.instance_id,
                x: q.x,
                y: q.y,
                label,
                step,
            });
        }
        let base = self.trail.log().len() as u64;
        for (i, &key) in plan.masks.iter().enumerate() {
            let mask = self.trail.query_instance_mask(annotator, key, base + i as u64, step)?;
            self.masks.insert(key, mask);
        }
        self.skipped.extend(plan.skipped.iter().map(|k| format!("step {step}: {k}")));

        let misclass = match (&self.model, step) {
            (Some(m), s) if s > 0 && matches!(self.spec, StrategySpec::Points(_)) => {
                misclassification_ratio(m, dataset, &new_points)?
            }
            _ => None,
        };
        if step == 0 {
            self.points = PointSet::initial(new_points.clone(), dataset)?;
        } else if !new_points.is_empty() {
            self.points = merge_point_set(&self.points, &new_points, dataset)?.set;
        }

        let (schedule, fresh) = self.schedule(step);
        let start = match (&self.model, fresh) {
            (Some(m), false) => m.clone(),
            _ => ModelState::init(&self.cfg.model_config(), derive_seed(self.cfg.seed, "model", &[]))?,
        };
        let supervision = Supervision {
            points: self.points.points(),
            masks: &self.masks,
        };
        let model = train(&start, dataset, supervision, &schedule)?;
        self.train_iters_cum += schedule.iterations as u64;

        let report = dataset_map(&model, &self.data.test)?;
        let point_acc = if self.points.is_empty() {
            None
        } else {
            Some(point_accuracy(&model, dataset, self.points.points())?)
        };
        let boundary = boundary_distance_stats(&new_points, &self.data.train)?.map(|b| b.mean);
        let row = MetricsRow {
            step,
            n_points: self.points.len() as u64,
            n_masks: self.masks.len() as u64,
            budget_seconds: millis_to_seconds(self.allocated_ms(step)),
            train_iters_cum: self.train_iters_cum,
            test_mean_iou: report.mean_iou,
            test_map: report.map,
            ap_small: report.ap_small,
            ap_medium: report.ap_medium,
            ap_large: report.ap_large,
            point_acc,
            new_point_misclass_ratio: misclass,
            mean_boundary_dist: boundary,
        };
        if let StrategySpec::Afis(_) = self.spec {
            let images: std::collections::BTreeSet<u32> = plan.masks.iter().map(|k| k.image_id).collect();
            self.afis.push(AfisStepRecord {
                step,
                masks: plan.masks.len(),
                images: images.len(),
                mean_instances_per_image: (!images.is_empty())
                    .then(|| plan.masks.len() as f64 / images.len() as f64),
            });
        }
        self.model = Some(model);
        self.metrics.push(row.clone());
        self.persist(step, &schedule, report.instances.as_slice())?;
        Ok(row)
    }

    fn persist(&self, step: u32, schedule: &TrainSchedule, evals: &[crate::eval::InstanceEval]) -> Result<()> {
        let Some(dir) = &self.dir else {
            return Ok(());
        };
        let model = self.model.as_ref().expect("trained");
        if let StrategySpec::Points(_) = self.spec {
            dir.write(&dir.points(step), &self.points.to_json())?;
        } else {
            let keys: Vec<_> = self.masks.keys().collect();
            dir.write(
                &dir.root.join(format!("masks_step_{step}.json")),
                &(serde_json::to_string_pretty(&keys)? + "\n"),
            )?;
        }
        let meta = CheckpointMeta {
            step,
            seed: schedule.seed,
            lambda: self.cfg.lambda,
            replicas: model.members.len(),
            scales: model.scales.clone(),
            iterations: schedule.iterations,
            lr0: schedule.lr0,
            decay_points: schedule.decay_points.clone(),
            batch_size: schedule.batch_size,
            train_iters_cum: self.train_iters_cum,
        };
        write_checkpoint(&dir.root, model, &meta)?;
        if self.cfg.dump_eval {
            dir.write(&dir.eval_dump(step), &(serde_json::to_string_pretty(evals)? + "\n"))?;
        }
        dir.write(&dir.oracle_log(), &oracle_log_text(self.trail.log()))?;
        dir.write(&dir.metrics(), &metrics_to_csv(&self.metrics)?)?;
        dir.write(&dir.report(), &(serde_json::to_string_pretty(&self.report(None))? + "\n"))
    }

    pub fn report(&self, error: Option<String>) -> RunReport {
        let steps_completed = self.metrics.last().map_or(0, |r| r.step);
        RunReport {
            name: self.cfg.name.clone(),
            strategy: self.spec.label(),
            mode: self.cfg.mode.tag().to_string(),
            seed: self.cfg.seed,
            oracle_assisted: matches!(self.spec, StrategySpec::Points(s) if s.oracle_assisted()),
            transfer_from: self.cfg.transfer_from.clone(),
            steps_completed,
            steps_planned: self.cfg.steps,
            finished: self.next_step().is_none(),
            skipped_instances: self.skipped.clone(),
            afis: self.afis.clone(),
            error,
            metrics: self.metrics.clone(),
        }
    }

    /// Writes a report carrying `error`, keeping completed steps.
    pub fn record_failure(&self, error: &Error) -> Result<()> {
        if let Some(dir) = &self.dir {
            let report = self.report(Some(error.to_string()));
            dir.write(&dir.report(), &(serde_json::to_string_pretty(&report)? + "\n"))?;
        }
        Ok(())
    }

    /// Runs every remaining step against `annotator`.
    pub fn run_to_end(&mut self, annotator: &dyn Annotator) -> Result<RunReport> {
        while self.next_step().is_some() {
            let result = self.plan().and_then(|plan| self.complete(&plan, annotator));
            if let Err(e) = result {
                self.record_failure(&e)?;
                return Err(e);
            }
        }
        Ok(self.report(None))
    }
}

fn query(query_id: u64, key: InstanceKey, (x, y): (u32, u32), step: u32) -> PointQuery {
    PointQuery {
        query_id,
        image_id: key.image_id,
        instance_id: key.instance_id,
        x,
        y,
        step,
    }
}

/// Runs `cfg` to completion with the simulated oracle.
pub fn run_experiment(cfg: ExperimentConfig, data: Data, dir: Option<PathBuf>) -> Result<RunReport> {
    let oracle = SimulatedOracle::new(data.train.clone());
    let mut exp = Experiment::new(cfg, data, dir)?;
    exp.run_to_end(&oracle)
}

/// Continues an interrupted simulated run in place.
pub fn resume_experiment(dir: &Path, data: Data) -> Result<RunReport> {
    let oracle = SimulatedOracle::new(data.train.clone());
    let mut exp = Experiment::resume(dir, data)?;
    exp.run_to_end(&oracle)
}
