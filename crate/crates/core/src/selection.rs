//! Point selection, GIoU and the full-mask (AFIS) selectors.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::budget::CostModel;
use crate::error::{Error, Result};
use crate::segmodel::{predict_region, predicted_box, ImageViews, ModelState, PredictionMode, PredictionSet};
use crate::types::{BBox, Bitmask, Dataset, InstanceKey};
use crate::uncertainty::{entropy_unchecked, mean_map, variance_map};

/// Fraction of the box size added on each side when predicting boxes.
pub const DETECTION_DILATION: f64 = 0.25;
/// Loss assigned to undetected instances.
pub const UNDETECTED_LOSS: f64 = 2.0;

/// Candidate pixels of one instance: its box minus already-labeled pixels.
#[derive(Clone, Debug)]
pub struct SelectionDomain {
    pub bbox: BBox,
    excluded: HashSet<(u32, u32)>,
}

impl SelectionDomain {
    pub fn new(bbox: BBox, labeled: impl IntoIterator<Item = (u32, u32)>) -> Self {
        Self {
            bbox,
            excluded: labeled.into_iter().filter(|&(x, y)| bbox.contains(x, y)).collect(),
        }
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        self.bbox.contains(x, y) && !self.excluded.contains(&(x, y))
    }

    pub fn len(&self) -> usize {
        self.bbox.area() as usize - self.excluded.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Candidates in row-major order.
    pub fn pixels(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.bbox.pixels().filter(|p| !self.excluded.contains(p))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PointStrategy {
    Random,
    Entropy,
    Variance,
    LowestEntropy,
    MaxError,
    LeastError,
}

impl PointStrategy {
    pub const ALL: [PointStrategy; 6] = [
        PointStrategy::Random,
        PointStrategy::Entropy,
        PointStrategy::Variance,
        PointStrategy::LowestEntropy,
        PointStrategy::MaxError,
        PointStrategy::LeastError,
    ];

    pub fn token(self) -> &'static str {
        match self {
            PointStrategy::Random => "random",
            PointStrategy::Entropy => "entropy",
            PointStrategy::Variance => "variance",
            PointStrategy::LowestEntropy => "lowest-entropy",
            PointStrategy::MaxError => "max-error",
            PointStrategy::LeastError => "least-error",
        }
    }

    /// Strategies that read ground truth to choose points.
    pub fn oracle_assisted(self) -> bool {
        matches!(self, PointStrategy::MaxError | PointStrategy::LeastError)
    }
}

macro_rules! token_enum {
    ($ty:ty, $all:expr, $what:literal) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.token())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                $all.into_iter()
                    .find(|v| v.token() == s)
                    .ok_or_else(|| Error::InvalidValue(format!(concat!("unknown ", $what, " `{}`"), s)))
            }
        }

        impl Serialize for $ty {
            fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
                s.serialize_str(self.token())
            }
        }

        impl<'de> Deserialize<'de> for $ty {
            fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

token_enum!(PointStrategy, PointStrategy::ALL, "strategy");

/// Picks the first domain pixel minimizing `key` (row-major tie-break).
fn arg_best<K: PartialOrd>(domain: &SelectionDomain, mut key: impl FnMut(u32, u32) -> K) -> Result<(u32, u32)> {
    let mut best: Option<((u32, u32), K)> = None;
    for (x, y) in domain.pixels() {
        let k = key(x, y);
        let better = match &best {
            None => true,
            Some((_, b)) => k.partial_cmp(b) == Some(Ordering::Less),
        };
        if better {
            best = Some(((x, y), k));
        }
    }
    best.map(|(p, _)| p).ok_or(Error::EmptyDomain(InstanceKey::new(u32::MAX, u32::MAX)))
}

fn uniform(domain: &SelectionDomain, rng: &mut impl Rng) -> Result<(u32, u32)> {
    let n = domain.len();
    if n == 0 {
        return Err(Error::EmptyDomain(InstanceKey::new(u32::MAX, u32::MAX)));
    }
    Ok(domain.pixels().nth(rng.random_range(0..n)).expect("index below domain size"))
}

/// One point for one instance.
///
/// Entropy ranks by `H(mean)`; equal float entropies are ordered by the exact
/// distance of the mean from 0.5, which `H` is strictly monotone in.
pub fn select_point(
    strategy: PointStrategy,
    ps: &PredictionSet,
    domain: &SelectionDomain,
    rng: &mut impl Rng,
) -> Result<(u32, u32)> {
    let tagged = |r: Result<(u32, u32)>| {
        r.map_err(|e| match e {
            Error::EmptyDomain(_) => Error::EmptyDomain(ps.key),
            e => e,
        })
    };
    if domain.is_empty() {
        return Err(Error::EmptyDomain(ps.key));
    }
    if strategy == PointStrategy::Random || ps.maps.is_empty() {
        return tagged(uniform(domain, rng));
    }
    let at = |x: u32, y: u32| ps.region.offset(x, y);
    let result = match strategy {
        PointStrategy::Variance if ps.maps.len() >= 2 => {
            let v = variance_map(ps)?.values;
            arg_best(domain, |x, y| -v[at(x, y)])
        }
        PointStrategy::Entropy | PointStrategy::Variance => {
            // Entropy is strictly decreasing in |p - 0.5|; ranking by the
            // distance itself keeps logarithm rounding out of the comparison.
            let m = mean_map(ps)?;
            arg_best(domain, |x, y| (m[at(x, y)] - 0.5).abs())
        }
        PointStrategy::LowestEntropy => {
            let m = mean_map(ps)?;
            arg_best(domain, |x, y| -(m[at(x, y)] - 0.5).abs())
        }
        PointStrategy::MaxError | PointStrategy::LeastError => {
            return Err(Error::Unsupported("error-driven strategies need ground truth"))
        }
        PointStrategy::Random => unreachable!(),
    };
    tagged(result)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorMode {
    Max,
    Min,
}

/// Diagnostic selection by `|mean - truth|`.
pub fn select_point_by_error(
    mode: ErrorMode,
    mean: &[f64],
    region: BBox,
    truth: &Bitmask,
    domain: &SelectionDomain,
) -> Result<(u32, u32)> {
    let err = |x: u32, y: u32| (mean[region.offset(x, y)] - truth.get(x, y) as u8 as f64).abs();
    match mode {
        ErrorMode::Max => arg_best(domain, |x, y| -err(x, y)),
        ErrorMode::Min => arg_best(domain, err),
    }
}

/// Generalized IoU with inclusive-pixel areas.
pub fn giou(a: BBox, b: BBox) -> f64 {
    let ix = a.x_max.min(b.x_max) as i64 - a.x_min.max(b.x_min) as i64 + 1;
    let iy = a.y_max.min(b.y_max) as i64 - a.y_min.max(b.y_min) as i64 + 1;
    let inter = (ix.max(0) * iy.max(0)) as f64;
    let union = a.area() as f64 + b.area() as f64 - inter;
    let enclosing = BBox {
        x_min: a.x_min.min(b.x_min),
        y_min: a.y_min.min(b.y_min),
        x_max: a.x_max.max(b.x_max),
        y_max: a.y_max.max(b.y_max),
    }
    .area() as f64;
    inter / union - (enclosing - union) / enclosing
}

pub fn detection_loss(predicted: Option<BBox>, truth: BBox) -> f64 {
    predicted.map_or(UNDETECTED_LOSS, |p| 1.0 - giou(p, truth))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AfisLevel {
    Image,
    Instance,
}

impl AfisLevel {
    pub const ALL: [AfisLevel; 2] = [AfisLevel::Image, AfisLevel::Instance];

    pub fn token(self) -> &'static str {
        match self {
            AfisLevel::Image => "afis-image",
            AfisLevel::Instance => "afis-instance",
        }
    }
}

token_enum!(AfisLevel, AfisLevel::ALL, "AFIS level");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AfisMetric {
    MeanEntropy,
    MinDetLoss,
    MaxDetLoss,
    Random,
}

impl AfisMetric {
    pub const ALL: [AfisMetric; 4] = [
        AfisMetric::MeanEntropy,
        AfisMetric::MinDetLoss,
        AfisMetric::MaxDetLoss,
        AfisMetric::Random,
    ];

    pub fn token(self) -> &'static str {
        match self {
            AfisMetric::MeanEntropy => "mean-entropy",
            AfisMetric::MinDetLoss => "min-det-loss",
            AfisMetric::MaxDetLoss => "max-det-loss",
            AfisMetric::Random => "random",
        }
    }
}

token_enum!(AfisMetric, AfisMetric::ALL, "AFIS metric");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AfisSelector {
    pub level: AfisLevel,
    pub metric: AfisMetric,
}

/// Per-instance and per-image acquisition scores.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AfisScores {
    pub instance: BTreeMap<InstanceKey, f64>,
    pub image: BTreeMap<u32, f64>,
}

impl AfisScores {
    /// Image scores as the mean of their instances' scores.
    pub fn from_instances(instance: BTreeMap<InstanceKey, f64>) -> Self {
        let mut sums: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
        for (k, v) in &instance {
            let e = sums.entry(k.image_id).or_default();
            e.0 += v;
            e.1 += 1;
        }
        let image = sums.into_iter().map(|(id, (s, n))| (id, s / n as f64)).collect();
        Self { instance, image }
    }
}

/// Mean in-box entropy of the mean prediction.
pub fn mean_entropy_score(ps: &PredictionSet) -> Result<f64> {
    let m = mean_map(ps)?;
    Ok(m.iter().map(|&p| entropy_unchecked(p)).sum::<f64>() / m.len() as f64)
}

/// Equal scores for every instance, for random selection.
pub fn uniform_scores(dataset: &Dataset) -> AfisScores {
    AfisScores::from_instances(dataset.instances().iter().map(|r| (r.key(), 0.0)).collect())
}

/// Scores every instance of `dataset` under `metric` (zero for `Random`).
pub fn afis_scores(
    state: &ModelState,
    dataset: &Dataset,
    metric: AfisMetric,
    mode: PredictionMode,
) -> Result<AfisScores> {
    if metric == AfisMetric::Random {
        return Ok(uniform_scores(dataset));
    }
    let scales: &[f64] = if mode == PredictionMode::S { &state.scales } else { &[] };
    let per_image: Vec<Vec<(InstanceKey, f64)>> = dataset
        .images()
        .par_iter()
        .map(|entry| {
            let views = ImageViews::new(&entry.raster, scales)?;
            let (w, h) = (entry.raster.width(), entry.raster.height());
            dataset
                .instances_of(entry.id)
                .map(|rec| {
                    let score = if metric == AfisMetric::MeanEntropy {
                        mean_entropy_score(&predict_region(state, &views, rec, rec.bbox, mode)?)?
                    } else {
                        let region = rec.bbox.dilate(DETECTION_DILATION, w, h);
                        let ps = predict_region(state, &views, rec, region, mode)?;
                        let pred = predicted_box(&mean_map(&ps)?, region, 0.5);
                        detection_loss(pred, rec.bbox)
                    };
                    Ok((rec.key(), score))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(AfisScores::from_instances(per_image.into_iter().flatten().collect()))
}

/// Orders candidates best-first; equal scores keep candidate order.
fn rank<T: Copy>(items: &mut Vec<(T, f64)>, metric: AfisMetric, rng: &mut impl Rng) {
    match metric {
        AfisMetric::MeanEntropy | AfisMetric::MaxDetLoss => items.sort_by(|a, b| b.1.total_cmp(&a.1)),
        AfisMetric::MinDetLoss => items.sort_by(|a, b| a.1.total_cmp(&b.1)),
        AfisMetric::Random => items.shuffle(rng),
    }
}

/// Greedy mask-annotation choice within `budget_ms`.
///
/// Instance level stops at the first instance that would overflow; image
/// level takes whole images and skips any image that would overflow.
pub fn afis_select(
    scores: &AfisScores,
    selector: AfisSelector,
    budget_ms: u64,
    costs: &CostModel,
    annotated: &BTreeSet<InstanceKey>,
    rng: &mut impl Rng,
) -> Vec<InstanceKey> {
    let mask_ms = costs.mask_ms;
    let mut remaining = budget_ms;
    let mut chosen = Vec::new();
    match selector.level {
        AfisLevel::Instance => {
            let mut items: Vec<(InstanceKey, f64)> = scores
                .instance
                .iter()
                .filter(|(k, _)| !annotated.contains(k))
                .map(|(&k, &v)| (k, v))
                .collect();
            rank(&mut items, selector.metric, rng);
            for (k, _) in items {
                if mask_ms > remaining {
                    break;
                }
                remaining -= mask_ms;
                chosen.push(k);
            }
        }
        AfisLevel::Image => {
            let mut pending: BTreeMap<u32, Vec<InstanceKey>> = BTreeMap::new();
            for k in scores.instance.keys().filter(|k| !annotated.contains(k)) {
                pending.entry(k.image_id).or_default().push(*k);
            }
            let mut items: Vec<(u32, f64)> = scores
                .image
                .iter()
                .filter(|(id, _)| pending.contains_key(id))
                .map(|(&id, &v)| (id, v))
                .collect();
            rank(&mut items, selector.metric, rng);
            for (id, _) in items {
                let keys = &pending[&id];
                let cost = keys.len() as u64 * mask_ms;
                if cost <= remaining {
                    remaining -= cost;
                    chosen.extend_from_slice(keys);
                }
            }
        }
    }
    chosen
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsetMode {
    Random,
    MinDetLoss,
}

/// Instances receiving a point this step when the budget is below the pool.
/// Returned in pool order.
pub fn select_instances_under_budget(
    mode: SubsetMode,
    budget: usize,
    pool: &[InstanceKey],
    scores: &BTreeMap<InstanceKey, f64>,
    rng: &mut impl Rng,
) -> Vec<InstanceKey> {
    if budget >= pool.len() {
        return pool.to_vec();
    }
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    match mode {
        SubsetMode::Random => idx.shuffle(rng),
        SubsetMode::MinDetLoss => idx.sort_by(|&a, &b| {
            let s = |i: usize| scores.get(&pool[i]).copied().unwrap_or(UNDETECTED_LOSS);
            s(a).total_cmp(&s(b))
        }),
    }
    idx.truncate(budget);
    idx.sort_unstable();
    idx.into_iter().map(|i| pool[i]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn bx(a: u32, b: u32, c: u32, d: u32) -> BBox {
        BBox::new(a, b, c, d).unwrap()
    }

    fn set(region: BBox, maps: Vec<Vec<f64>>) -> PredictionSet {
        PredictionSet {
            key: InstanceKey::new(0, 0),
            region,
            maps,
            mode: PredictionMode::A,
        }
    }

    #[test]
    fn uniform_map_picks_first_pixel() {
        let b = bx(2, 3, 4, 5);
        let ps = set(b, vec![vec![0.5; 9]]);
        let d = SelectionDomain::new(b, []);
        let mut rng = stream(0, "t", &[]);
        assert_eq!(select_point(PointStrategy::Entropy, &ps, &d, &mut rng).unwrap(), (2, 3));
        let d = SelectionDomain::new(b, [(2, 3)]);
        assert_eq!(select_point(PointStrategy::Entropy, &ps, &d, &mut rng).unwrap(), (3, 3));
    }

    #[test]
    fn single_uncertain_pixel_wins() {
        let b = bx(0, 0, 4, 4);
        let mut m = vec![0.99; 25];
        m[b.offset(3, 1)] = 0.5;
        let ps = set(b, vec![m.clone(), m]);
        let d = SelectionDomain::new(b, []);
        let mut rng = stream(0, "t", &[]);
        assert_eq!(select_point(PointStrategy::Entropy, &ps, &d, &mut rng).unwrap(), (3, 1));
        assert_eq!(select_point(PointStrategy::LowestEntropy, &ps, &d, &mut rng).unwrap(), (0, 0));
    }

    #[test]
    fn empty_set_and_random_are_seeded() {
        let b = bx(0, 0, 7, 7);
        let ps = set(b, vec![]);
        let d = SelectionDomain::new(b, [(0, 0)]);
        let pick = |s| select_point(PointStrategy::Entropy, &ps, &d, &mut stream(s, "t", &[])).unwrap();
        assert_eq!(pick(4), pick(4));
        let all: HashSet<_> = (0..40).map(pick).collect();
        assert!(all.len() > 10 && !all.contains(&(0, 0)));
    }

    #[test]
    fn single_map_variance_falls_back_to_entropy() {
        let b = bx(0, 0, 2, 0);
        let ps = set(b, vec![vec![0.9, 0.45, 0.2]]);
        let d = SelectionDomain::new(b, []);
        let mut rng = stream(0, "t", &[]);
        assert_eq!(select_point(PointStrategy::Variance, &ps, &d, &mut rng).unwrap(), (1, 0));
    }

    #[test]
    fn exhausted_domain_is_reported() {
        let b = bx(0, 0, 0, 1);
        let mut ps = set(b, vec![vec![0.5; 2]]);
        ps.key = InstanceKey::new(3, 1);
        let d = SelectionDomain::new(b, [(0, 0), (0, 1)]);
        let mut rng = stream(0, "t", &[]);
        assert!(matches!(
            select_point(PointStrategy::Entropy, &ps, &d, &mut rng),
            Err(Error::EmptyDomain(k)) if k == InstanceKey::new(3, 1)
        ));
    }

    #[test]
    fn error_selection() {
        let b = bx(0, 0, 3, 3);
        let mut truth = Bitmask::new(4, 4);
        let mut mean = vec![0.0; 16];
        for (x, y) in b.pixels() {
            truth.set(x, y, x < 2);
            mean[b.offset(x, y)] = if x < 2 { 1.0 } else { 0.0 };
        }
        let d = SelectionDomain::new(b, []);
        assert_eq!(select_point_by_error(ErrorMode::Max, &mean, b, &truth, &d).unwrap(), (0, 0));
        mean[b.offset(2, 2)] = 0.99;
        mean[b.offset(1, 0)] = 0.7;
        assert_eq!(select_point_by_error(ErrorMode::Max, &mean, b, &truth, &d).unwrap(), (2, 2));
        assert_eq!(select_point_by_error(ErrorMode::Min, &mean, b, &truth, &d).unwrap(), (0, 0));
    }

    #[test]
    fn giou_cases() {
        let a = bx(0, 0, 1, 1);
        assert_eq!(giou(a, a), 1.0);
        assert_eq!(detection_loss(Some(a), a), 0.0);
        assert_eq!(giou(a, bx(2, 0, 3, 1)), 0.0);
        assert!((detection_loss(Some(bx(1, 1, 2, 2)), a) - (1.0 - (1.0 / 7.0 - 2.0 / 9.0))).abs() < 1e-15);
        assert_eq!(detection_loss(None, a), 2.0);
    }

    fn keys(pairs: &[(u32, u32)]) -> Vec<InstanceKey> {
        pairs.iter().map(|&(i, j)| InstanceKey::new(i, j)).collect()
    }

    #[test]
    fn afis_instance_level_takes_best_within_budget() {
        let scores = AfisScores::from_instances(
            keys(&[(0, 0), (0, 1), (1, 0), (2, 0), (2, 1)])
                .into_iter()
                .zip([0.1, 0.5, 0.3, 0.9, 0.2])
                .collect(),
        );
        let c = CostModel::default();
        let sel = AfisSelector {
            level: AfisLevel::Instance,
            metric: AfisMetric::MeanEntropy,
        };
        let mut rng = stream(0, "t", &[]);
        let got = afis_select(&scores, sel, 3 * c.mask_ms, &c, &BTreeSet::new(), &mut rng);
        assert_eq!(got, keys(&[(2, 0), (0, 1), (1, 0)]));
        let min = AfisSelector {
            metric: AfisMetric::MinDetLoss,
            ..sel
        };
        let got = afis_select(&scores, min, 3 * c.mask_ms + 1, &c, &BTreeSet::new(), &mut rng);
        assert_eq!(got, keys(&[(0, 0), (2, 1), (1, 0)]));
    }

    #[test]
    fn afis_image_level_skips_overflowing_images() {
        let mut inst = BTreeMap::new();
        for j in 0..4 {
            inst.insert(InstanceKey::new(0, j), 0.9);
        }
        for j in 0..2 {
            inst.insert(InstanceKey::new(1, j), 0.1);
        }
        let scores = AfisScores::from_instances(inst);
        assert_eq!(scores.image[&0], 0.9);
        let c = CostModel::default();
        let sel = AfisSelector {
            level: AfisLevel::Image,
            metric: AfisMetric::MeanEntropy,
        };
        let mut rng = stream(0, "t", &[]);
        let got = afis_select(&scores, sel, 3 * c.mask_ms, &c, &BTreeSet::new(), &mut rng);
        assert_eq!(got, keys(&[(1, 0), (1, 1)]));
        let done: BTreeSet<_> = keys(&[(0, 0), (0, 1)]).into_iter().collect();
        let got = afis_select(&scores, sel, 3 * c.mask_ms, &c, &done, &mut rng);
        assert_eq!(got, keys(&[(0, 2), (0, 3)]));
    }

    #[test]
    fn subset_under_budget() {
        let pool = keys(&[(0, 0), (0, 1), (1, 0)]);
        let scores: BTreeMap<_, _> = pool.iter().copied().zip([0.2, 1.5, 0.1]).collect();
        let mut rng = stream(0, "t", &[]);
        let got = select_instances_under_budget(SubsetMode::MinDetLoss, 2, &pool, &scores, &mut rng);
        assert_eq!(got, keys(&[(0, 0), (1, 0)]));
        let all = select_instances_under_budget(SubsetMode::Random, 5, &pool, &scores, &mut rng);
        assert_eq!(all, pool);
        let big: Vec<_> = (0..860).map(|i| InstanceKey::new(i, 0)).collect();
        let got = select_instances_under_budget(SubsetMode::Random, 100, &big, &BTreeMap::new(), &mut rng);
        assert_eq!(got.len(), 100);
        assert_eq!(got.iter().collect::<HashSet<_>>().len(), 100);
    }

    #[test]
    fn tokens_roundtrip() {
        for s in PointStrategy::ALL {
            assert_eq!(s.token().parse::<PointStrategy>().unwrap(), s);
            assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{}\"", s.token()));
        }
        assert_eq!("afis-image".parse::<AfisLevel>().unwrap(), AfisLevel::Image);
        assert_eq!("min-det-loss".parse::<AfisMetric>().unwrap(), AfisMetric::MinDetLoss);
        assert!("entropyy".parse::<PointStrategy>().is_err());
    }
}
