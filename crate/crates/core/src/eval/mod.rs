//! Mask quality, point accuracy and boundary statistics.
//!
//! Predictions are matched to ground truth by instance identity (boxes are
//! given), so "mAP" here is the mean over IoU thresholds of the fraction of
//! instances whose mask IoU clears the threshold.

pub mod edt;

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::points::PointAnnotation;
use crate::segmodel::{FeatureContext, ModelState};
use crate::synthgen::LabeledSplit;
use crate::types::{Bitmask, Dataset, ImageRaster, InstanceKey, InstanceRecord};

pub use edt::{boundary_pixels, squared_distance_transform, BoundaryDistance};

/// Foreground threshold; ties count as foreground.
pub const THRESHOLD: f64 = 0.5;
/// IoU thresholds are `(50 + 5 i) / 100` for `i` in `0..10`.
pub const N_THRESHOLDS: usize = 10;

pub fn threshold(i: usize) -> f64 {
    (50 + 5 * i) as f64 / 100.0
}

/// Intersection and union pixel counts.
pub fn overlap(pred: &Bitmask, gt: &Bitmask) -> Result<(u64, u64)> {
    if pred.extent() != gt.extent() {
        return Err(Error::ExtentMismatch(pred.extent(), gt.extent()));
    }
    let mut inter = 0;
    let mut union = 0;
    for (&a, &b) in pred.bits().iter().zip(gt.bits()) {
        inter += (a && b) as u64;
        union += (a || b) as u64;
    }
    Ok((inter, union))
}

/// `|pred & gt| / |pred | gt|`, 1 when both are empty.
pub fn mask_iou(pred: &Bitmask, gt: &Bitmask) -> Result<f64> {
    let (i, u) = overlap(pred, gt)?;
    Ok(if u == 0 { 1.0 } else { i as f64 / u as f64 })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeBucket {
    Small,
    Medium,
    Large,
}

/// Visible-area thresholds: small below `medium_min`, large above `large_above`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeBuckets {
    pub medium_min: u64,
    pub large_above: u64,
}

impl Default for SizeBuckets {
    fn default() -> Self {
        Self {
            medium_min: 64,
            large_above: 256,
        }
    }
}

impl SizeBuckets {
    pub fn bucket(&self, area: u64) -> SizeBucket {
        if area < self.medium_min {
            SizeBucket::Small
        } else if area <= self.large_above {
            SizeBucket::Medium
        } else {
            SizeBucket::Large
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceEval {
    pub key: InstanceKey,
    pub intersection: u64,
    pub union: u64,
    pub iou: f64,
    pub area: u64,
    pub bucket: SizeBucket,
}

impl InstanceEval {
    /// Exact integer test of `iou >= threshold(i)`.
    pub fn passes(&self, i: usize) -> bool {
        if self.union == 0 {
            return true;
        }
        self.intersection * 100 >= (50 + 5 * i as u64) * self.union
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub mean_iou: f64,
    pub ap: Vec<f64>,
    pub map: f64,
    pub ap_small: Option<f64>,
    pub ap_medium: Option<f64>,
    pub ap_large: Option<f64>,
    pub instances: Vec<InstanceEval>,
}

fn bucket_map(evals: &[&InstanceEval]) -> Option<f64> {
    if evals.is_empty() {
        return None;
    }
    let n = evals.len() as f64;
    let sum: f64 = (0..N_THRESHOLDS)
        .map(|i| evals.iter().filter(|e| e.passes(i)).count() as f64 / n)
        .sum();
    Some(sum / N_THRESHOLDS as f64)
}

impl MapReport {
    pub fn from_instances(instances: Vec<InstanceEval>) -> Result<Self> {
        if instances.is_empty() {
            return Err(Error::InvalidValue("no instances to evaluate".into()));
        }
        let n = instances.len() as f64;
        let ap: Vec<f64> = (0..N_THRESHOLDS)
            .map(|i| instances.iter().filter(|e| e.passes(i)).count() as f64 / n)
            .collect();
        let map = ap.iter().sum::<f64>() / N_THRESHOLDS as f64;
        let of = |b: SizeBucket| bucket_map(&instances.iter().filter(|e| e.bucket == b).collect::<Vec<_>>());
        Ok(Self {
            mean_iou: instances.iter().map(|e| e.iou).sum::<f64>() / n,
            ap_small: of(SizeBucket::Small),
            ap_medium: of(SizeBucket::Medium),
            ap_large: of(SizeBucket::Large),
            ap,
            map,
            instances,
        })
    }
}

/// Mean prediction of the primary model's heads thresholded inside the box.
pub fn predict_mask(state: &ModelState, image: &ImageRaster, rec: &InstanceRecord) -> Result<Bitmask> {
    let ctx = FeatureContext::new(image, rec.bbox)?;
    let mut mask = Bitmask::new(image.width(), image.height());
    let model = state.primary();
    for (x, y) in rec.bbox.pixels() {
        if model.mean_probability(&ctx.features(image, x, y)) >= THRESHOLD {
            mask.set(x, y, true);
        }
    }
    Ok(mask)
}

/// Evaluates every instance of `split` from its predicted mask.
pub fn evaluate_masks(
    split: &LabeledSplit,
    buckets: SizeBuckets,
    predict: impl Fn(&ImageRaster, &InstanceRecord) -> Result<Bitmask> + Sync,
) -> Result<MapReport> {
    let evals = split
        .dataset
        .instances()
        .par_iter()
        .map(|rec| {
            let key = rec.key();
            let gt = split.mask(key).ok_or(Error::UnknownInstance(key))?;
            let image = split.dataset.image(key.image_id).ok_or(Error::UnknownInstance(key))?;
            let pred = predict(image, rec)?;
            let (intersection, union) = overlap(&pred, gt)?;
            Ok(InstanceEval {
                key,
                intersection,
                union,
                iou: if union == 0 { 1.0 } else { intersection as f64 / union as f64 },
                area: gt.count(),
                bucket: buckets.bucket(gt.count()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    MapReport::from_instances(evals)
}

pub fn dataset_map(state: &ModelState, split: &LabeledSplit) -> Result<MapReport> {
    evaluate_masks(split, SizeBuckets::default(), |img, rec| predict_mask(state, img, rec))
}

/// Thresholded mean predictions of the primary model at the given points.
pub fn point_predictions(state: &ModelState, dataset: &Dataset, points: &[PointAnnotation]) -> Result<Vec<u8>> {
    let mut contexts: HashMap<InstanceKey, FeatureContext> = HashMap::new();
    let model = state.primary();
    points
        .iter()
        .map(|p| {
            let key = p.key();
            let rec = dataset.instance(key).ok_or(Error::UnknownInstance(key))?;
            let image = dataset.image(key.image_id).ok_or(Error::UnknownInstance(key))?;
            if !contexts.contains_key(&key) {
                contexts.insert(key, FeatureContext::new(image, rec.bbox)?);
            }
            let f = contexts[&key].features(image, p.x, p.y);
            Ok((model.mean_probability(&f) >= THRESHOLD) as u8)
        })
        .collect()
}

/// Fraction of points whose thresholded prediction equals the label.
pub fn point_accuracy(state: &ModelState, dataset: &Dataset, points: &[PointAnnotation]) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    let pred = point_predictions(state, dataset, points)?;
    let correct = pred.iter().zip(points).filter(|(y, p)| **y == p.label).count();
    Ok(correct as f64 / points.len() as f64)
}

/// Fraction of `points` the (pre-update) model gets wrong; `None` if empty.
pub fn misclassification_ratio(
    state: &ModelState,
    dataset: &Dataset,
    points: &[PointAnnotation],
) -> Result<Option<f64>> {
    if points.is_empty() {
        return Ok(None);
    }
    Ok(Some(1.0 - point_accuracy(state, dataset, points)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryStats {
    pub mean: f64,
    /// Counts per one-pixel bin; the last bin collects everything beyond.
    pub histogram: Vec<u64>,
    pub distances: Vec<f64>,
}

pub const HISTOGRAM_BINS: usize = 16;

/// Distance of each point to its instance's visible-mask boundary.
pub fn boundary_distances(points: &[PointAnnotation], split: &LabeledSplit) -> Result<Vec<f64>> {
    let mut maps: HashMap<InstanceKey, BoundaryDistance> = HashMap::new();
    points
        .iter()
        .map(|p| {
            let key = p.key();
            if !maps.contains_key(&key) {
                let mask = split.mask(key).ok_or(Error::UnknownInstance(key))?;
                maps.insert(key, BoundaryDistance::new(mask).ok_or(Error::EmptyMask(key))?);
            }
            Ok(maps[&key].at(p.x, p.y))
        })
        .collect()
}

/// Mean boundary distance and histogram; `None` when there are no points.
pub fn boundary_distance_stats(points: &[PointAnnotation], split: &LabeledSplit) -> Result<Option<BoundaryStats>> {
    if points.is_empty() {
        return Ok(None);
    }
    let distances = boundary_distances(points, split)?;
    let mut histogram = vec![0; HISTOGRAM_BINS];
    for d in &distances {
        histogram[(d.floor() as usize).min(HISTOGRAM_BINS - 1)] += 1;
    }
    Ok(Some(BoundaryStats {
        mean: distances.iter().sum::<f64>() / distances.len() as f64,
        histogram,
        distances,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmodel::{ModelConfig, ModelParams};
    use crate::types::{BBox, ImageEntry};

    fn square(w: u32, x0: u32, x1: u32, y0: u32, y1: u32) -> Bitmask {
        let mut m = Bitmask::new(w, w);
        for y in y0..=y1 {
            for x in x0..=x1 {
                m.set(x, y, true);
            }
        }
        m
    }

    #[test]
    fn iou_cases() {
        let full = square(4, 0, 3, 0, 3);
        let left = square(4, 0, 1, 0, 3);
        assert_eq!(mask_iou(&full, &full).unwrap(), 1.0);
        assert_eq!(mask_iou(&left, &square(4, 2, 3, 0, 3)).unwrap(), 0.0);
        assert_eq!(mask_iou(&left, &full).unwrap(), 0.5);
        assert_eq!(mask_iou(&Bitmask::new(4, 4), &Bitmask::new(4, 4)).unwrap(), 1.0);
        assert!(matches!(mask_iou(&full, &Bitmask::new(5, 4)), Err(Error::ExtentMismatch(..))));
    }

    fn eval(i: u64, u: u64, area: u64) -> InstanceEval {
        InstanceEval {
            key: InstanceKey::new(0, area as u32),
            intersection: i,
            union: u,
            iou: i as f64 / u as f64,
            area,
            bucket: SizeBuckets::default().bucket(area),
        }
    }

    #[test]
    fn ap_threshold_counting() {
        let r = MapReport::from_instances(vec![eval(7, 10, 10), eval(70, 100, 100)]).unwrap();
        assert_eq!(r.ap, vec![1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(r.map, 0.5);
        assert_eq!(r.ap_small, Some(0.5));
        assert_eq!(r.ap_large, None);
        assert!(r.ap.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn bucket_edges() {
        let b = SizeBuckets::default();
        assert_eq!(b.bucket(63), SizeBucket::Small);
        assert_eq!(b.bucket(64), SizeBucket::Medium);
        assert_eq!(b.bucket(256), SizeBucket::Medium);
        assert_eq!(b.bucket(257), SizeBucket::Large);
    }

    fn toy() -> (Dataset, Vec<PointAnnotation>) {
        let img = ImageEntry {
            id: 0,
            raster: ImageRaster::new(8, 8, vec![[0.5; 3]; 64]).unwrap(),
        };
        let rec = InstanceRecord {
            image_id: 0,
            instance_id: 0,
            category_id: 0,
            bbox: BBox::new(0, 0, 7, 7).unwrap(),
        };
        let pts = (0..4)
            .map(|i| PointAnnotation {
                image_id: 0,
                instance_id: 0,
                x: i,
                y: 0,
                label: (i == 3) as u8,
                step: 0,
            })
            .collect();
        (Dataset::new(vec![img], vec![rec]).unwrap(), pts)
    }

    #[test]
    fn point_accuracy_threshold_convention() {
        let (ds, pts) = toy();
        let mut state = ModelState::init(&ModelConfig::default(), 0).unwrap();
        state.members[0] = ModelParams::zeros(4, 0.0);
        let zeros: Vec<_> = pts.iter().map(|p| PointAnnotation { label: 0, ..*p }).collect();
        assert_eq!(point_accuracy(&state, &ds, &zeros).unwrap(), 0.0);
        assert_eq!(point_accuracy(&state, &ds, &pts).unwrap(), 0.25);
        // all four points sit left of center, so 10 u - 1 < 0 predicts 0 everywhere
        for w in &mut state.members[0].heads {
            w[0] = 10.0;
            w[8] = -1.0;
        }
        let acc = point_accuracy(&state, &ds, &pts).unwrap();
        let pred = point_predictions(&state, &ds, &pts).unwrap();
        assert_eq!(pred, vec![0, 0, 0, 0]);
        assert_eq!(acc, 0.75);
        assert_eq!(misclassification_ratio(&state, &ds, &pts).unwrap(), Some(0.25));
        assert_eq!(misclassification_ratio(&state, &ds, &[]).unwrap(), None);
        assert!(matches!(point_accuracy(&state, &ds, &[]), Err(Error::EmptyPointSet)));
    }
}
