//! Minibatch SGD on point (and dense mask) supervision.
//!
//! Every head of every replica trains on its own bootstrap resample of the
//! supervision pool with its own batch stream, which is what makes the heads
//! disagree on pixels the data does not pin down.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::features::{FeatureContext, FeatureVector, BIAS, FEATURE_DIM};
use super::model::{dot, logistic, ModelState, Sample};
use crate::error::{Error, Result};
use crate::points::PointAnnotation;
use crate::rng::stream;
use crate::types::{Bitmask, Dataset, InstanceKey};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Short,
    Default,
    Long,
}

impl ScheduleKind {
    pub fn iterations(self) -> usize {
        match self {
            ScheduleKind::Short => 333,
            ScheduleKind::Default => 1000,
            ScheduleKind::Long => 3000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub iterations: usize,
    pub lr0: f64,
    /// Iterations at which the rate is multiplied by 0.1.
    pub decay_points: Vec<usize>,
    pub batch_size: usize,
    pub seed: u64,
}

pub const INIT_ITERATIONS: usize = 3000;

impl TrainSchedule {
    /// Training of the first model from scratch.
    pub fn initial(seed: u64, batch_size: usize) -> Self {
        Self {
            iterations: INIT_ITERATIONS,
            lr0: 0.1,
            decay_points: vec![2000, 2667],
            batch_size,
            seed,
        }
    }

    /// Per-step fine-tuning with decays at one and two thirds.
    pub fn fine_tune(kind: ScheduleKind, seed: u64, batch_size: usize) -> Self {
        let n = kind.iterations();
        Self {
            iterations: n,
            lr0: 0.1,
            decay_points: vec![n / 3, 2 * n / 3],
            batch_size,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.lr0 > 0.0) {
            return Err(Error::config("lr0", "must be positive"));
        }
        let increasing = self.decay_points.windows(2).all(|w| w[0] < w[1]);
        let bounded = self.decay_points.iter().all(|&d| d < self.iterations);
        if !increasing || (self.iterations > 0 && !bounded) {
            return Err(Error::config(
                "decay_points",
                "must be strictly increasing and below the iteration count",
            ));
        }
        Ok(())
    }

    pub fn learning_rate(&self, iteration: usize) -> f64 {
        let passed = self.decay_points.iter().filter(|&&d| iteration >= d).count();
        self.lr0 * 0.1f64.powi(passed as i32)
    }
}

/// Annotations available for training.
#[derive(Clone, Copy, Debug)]
pub struct Supervision<'a> {
    pub points: &'a [PointAnnotation],
    /// Full visible masks; every box pixel becomes a sample.
    pub masks: &'a BTreeMap<InstanceKey, Bitmask>,
}

/// Turns supervision into `(feature, label)` samples, points first.
pub fn collect_samples(dataset: &Dataset, supervision: Supervision<'_>) -> Result<Vec<Sample>> {
    let mut contexts: HashMap<InstanceKey, FeatureContext> = HashMap::new();
    let mut context = |key: InstanceKey| -> Result<FeatureContext> {
        if let Some(c) = contexts.get(&key) {
            return Ok(c.clone());
        }
        let rec = dataset.instance(key).ok_or(Error::UnknownInstance(key))?;
        let image = dataset.image(key.image_id).ok_or(Error::UnknownInstance(key))?;
        let c = FeatureContext::new(image, rec.bbox)?;
        contexts.insert(key, c.clone());
        Ok(c)
    };
    let mut samples = Vec::new();
    for p in supervision.points {
        let ctx = context(p.key())?;
        let image = dataset.image(p.image_id).expect("checked by context");
        samples.push((ctx.features(image, p.x, p.y), p.label as f64));
    }
    for (&key, mask) in supervision.masks {
        let ctx = context(key)?;
        let image = dataset.image(key.image_id).expect("checked by context");
        for (x, y) in ctx.bbox.pixels() {
            samples.push((ctx.features(image, x, y), mask.get(x, y) as u8 as f64));
        }
    }
    Ok(samples)
}

fn train_head(
    mut w: FeatureVector,
    lambda: f64,
    samples: &[Sample],
    schedule: &TrainSchedule,
    member: usize,
    head: usize,
) -> FeatureVector {
    let n = samples.len();
    let keys = [member as u64, head as u64];
    let mut boot_rng = stream(schedule.seed, "bootstrap", &keys);
    let boot: Vec<u32> = (0..n).map(|_| boot_rng.random_range(0..n) as u32).collect();
    let mut rng = stream(schedule.seed, "batch", &keys);
    let bs = schedule.batch_size as f64;
    for it in 0..schedule.iterations {
        let lr = schedule.learning_rate(it);
        let mut g = [0.0; FEATURE_DIM];
        for _ in 0..schedule.batch_size {
            let (f, y) = &samples[boot[rng.random_range(0..n)] as usize];
            let r = logistic(dot(&w, f)) - y;
            for j in 0..FEATURE_DIM {
                g[j] += r * f[j];
            }
        }
        for j in 0..FEATURE_DIM {
            let mut gj = g[j] / bs;
            if j != BIAS {
                gj += 2.0 * lambda * w[j];
            }
            w[j] -= lr * gj;
        }
    }
    w
}

/// Trains every head of every replica from `state` on `samples`.
pub fn train_samples(state: &ModelState, samples: &[Sample], schedule: &TrainSchedule) -> Result<ModelState> {
    schedule.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptySupervision);
    }
    if schedule.iterations == 0 {
        return Ok(state.clone());
    }
    let jobs: Vec<(usize, usize)> = state
        .members
        .iter()
        .enumerate()
        .flat_map(|(m, p)| (0..p.heads.len()).map(move |k| (m, k)))
        .collect();
    let trained: Vec<FeatureVector> = jobs
        .par_iter()
        .map(|&(m, k)| {
            let p = &state.members[m];
            train_head(p.heads[k], p.lambda, samples, schedule, m, k)
        })
        .collect();
    let mut next = state.clone();
    for (&(m, k), w) in jobs.iter().zip(trained) {
        next.members[m].heads[k] = w;
    }
    if !next.members.iter().all(|p| p.is_finite()) {
        return Err(Error::NonFinite);
    }
    Ok(next)
}

/// Fine-tunes (or trains) `state` on all available supervision.
pub fn train(
    state: &ModelState,
    dataset: &Dataset,
    supervision: Supervision<'_>,
    schedule: &TrainSchedule,
) -> Result<ModelState> {
    let samples = collect_samples(dataset, supervision)?;
    train_samples(state, &samples, schedule)
}
