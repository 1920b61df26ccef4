//! Prediction sets in the three diversity modes.

use serde::{Deserialize, Serialize};

use super::features::{FeatureContext, FeatureVector};
use super::model::{forward, ModelParams, ModelState};
use crate::error::{Error, Result};
use crate::types::{BBox, ImageRaster, InstanceKey, InstanceRecord};

/// Source of prediction diversity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PredictionMode {
    /// Heads of one model.
    A,
    /// Heads of all replicas.
    M,
    /// Heads on blurred copies of the image.
    S,
}

impl PredictionMode {
    pub fn tag(self) -> char {
        match self {
            PredictionMode::A => 'A',
            PredictionMode::M => 'M',
            PredictionMode::S => 'S',
        }
    }
}

impl std::str::FromStr for PredictionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(PredictionMode::A),
            "M" | "m" => Ok(PredictionMode::M),
            "S" | "s" => Ok(PredictionMode::S),
            _ => Err(Error::InvalidValue(format!("unknown prediction mode `{s}`"))),
        }
    }
}

/// K probability maps over a shared region, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    pub key: InstanceKey,
    pub region: BBox,
    pub maps: Vec<Vec<f64>>,
    pub mode: PredictionMode,
}

impl PredictionSet {
    pub fn k(&self) -> usize {
        self.maps.len()
    }

    pub fn value(&self, k: usize, x: u32, y: u32) -> f64 {
        self.maps[k][self.region.offset(x, y)]
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian blur with clamped edges; `sigma == 0` returns a copy.
pub fn gaussian_blur(image: &ImageRaster, sigma: f64) -> Result<ImageRaster> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidValue(format!("blur sigma {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as i64;
    let (w, h) = (image.width() as i64, image.height() as i64);
    let src = image.pixels();
    let pass = |src: &[[f64; 3]], horizontal: bool| -> Vec<[f64; 3]> {
        let mut out = vec![[0.0; 3]; src.len()];
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0; 3];
                for (t, kv) in kernel.iter().enumerate() {
                    let d = t as i64 - r;
                    let (sx, sy) = if horizontal {
                        ((x + d).clamp(0, w - 1), y)
                    } else {
                        (x, (y + d).clamp(0, h - 1))
                    };
                    let p = src[(sy * w + sx) as usize];
                    for c in 0..3 {
                        acc[c] += kv * p[c];
                    }
                }
                out[(y * w + x) as usize] = acc.map(|v| v.clamp(0.0, 1.0));
            }
        }
        out
    };
    let blurred = pass(&pass(src, true), false);
    ImageRaster::new(image.width(), image.height(), blurred)
}

/// An image together with its blurred copies, one per model scale.
#[derive(Clone, Debug)]
pub struct ImageViews {
    pub original: ImageRaster,
    pub scaled: Vec<ImageRaster>,
}

impl ImageViews {
    pub fn new(image: &ImageRaster, scales: &[f64]) -> Result<Self> {
        Ok(Self {
            original: image.clone(),
            scaled: scales
                .iter()
                .map(|&s| gaussian_blur(image, s))
                .collect::<Result<_>>()?,
        })
    }
}

fn head_maps(params: &ModelParams, features: &[FeatureVector], out: &mut Vec<Vec<f64>>) {
    for w in &params.heads {
        out.push(features.iter().map(|f| forward(w, f)).collect());
    }
}

fn region_features(image: &ImageRaster, bbox: BBox, region: BBox) -> Result<Vec<FeatureVector>> {
    Ok(FeatureContext::new(image, bbox)?.region_features(image, region))
}

/// Prediction set over `region` (the box, or a dilation of it).
pub fn predict_region(
    state: &ModelState,
    views: &ImageViews,
    record: &InstanceRecord,
    region: BBox,
    mode: PredictionMode,
) -> Result<PredictionSet> {
    let image = &views.original;
    if !region.fits_in(image.width(), image.height()) {
        return Err(Error::DegenerateBox(format!("region {region} exceeds the image")));
    }
    let mut maps = Vec::new();
    match mode {
        PredictionMode::A => {
            let f = region_features(image, record.bbox, region)?;
            head_maps(state.primary(), &f, &mut maps);
        }
        PredictionMode::M => {
            if state.members.len() < 2 {
                return Err(Error::ModeUnavailable('M'));
            }
            let f = region_features(image, record.bbox, region)?;
            for member in &state.members {
                head_maps(member, &f, &mut maps);
            }
        }
        PredictionMode::S => {
            if views.scaled.is_empty() || views.scaled.len() != state.scales.len() {
                return Err(Error::ModeUnavailable('S'));
            }
            for scaled in &views.scaled {
                let f = region_features(scaled, record.bbox, region)?;
                head_maps(state.primary(), &f, &mut maps);
            }
        }
    }
    Ok(PredictionSet {
        key: record.key(),
        region,
        maps,
        mode,
    })
}

/// Prediction set over the instance box.
pub fn predict_instance(
    state: &ModelState,
    image: &ImageRaster,
    record: &InstanceRecord,
    mode: PredictionMode,
) -> Result<PredictionSet> {
    let scales: &[f64] = if mode == PredictionMode::S { &state.scales } else { &[] };
    let views = ImageViews::new(image, scales)?;
    predict_region(state, &views, record, record.bbox, mode)
}

/// Tight box of region pixels with `mean >= threshold`; `None` means undetected.
pub fn predicted_box(mean: &[f64], region: BBox, threshold: f64) -> Option<BBox> {
    let mut found: Option<BBox> = None;
    for ((x, y), &p) in region.pixels().zip(mean) {
        if p < threshold {
            continue;
        }
        found = Some(match found {
            None => BBox {
                x_min: x,
                y_min: y,
                x_max: x,
                y_max: y,
            },
            Some(b) => BBox {
                x_min: b.x_min.min(x),
                y_min: b.y_min.min(y),
                x_max: b.x_max.max(x),
                y_max: b.y_max.max(y),
            },
        });
    }
    found
}
