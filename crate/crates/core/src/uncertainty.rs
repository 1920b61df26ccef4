//! Entropy and committee-variance maps over prediction sets.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segmodel::PredictionSet;
use crate::types::BBox;

/// Binary entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::DomainError(p));
    }
    Ok(entropy_unchecked(p))
}

#[inline]
pub(crate) fn entropy_unchecked(p: f64) -> f64 {
    let term = |q: f64| if q > 0.0 { -q * q.ln() } else { 0.0 };
    term(p) + term(1.0 - p)
}

/// Element-wise mean of the K maps.
pub fn mean_map(ps: &PredictionSet) -> Result<Vec<f64>> {
    let Some(first) = ps.maps.first() else {
        return Err(Error::EmptyPredictionSet);
    };
    let k = ps.maps.len() as f64;
    let mut out = first.clone();
    for map in &ps.maps[1..] {
        for (o, v) in out.iter_mut().zip(map) {
            *o += v;
        }
    }
    for o in &mut out {
        *o /= k;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UncertaintyMetric {
    Entropy,
    Variance,
}

impl UncertaintyMetric {
    /// Largest attainable value, used to scale debug images.
    pub fn max_value(self) -> f64 {
        match self {
            UncertaintyMetric::Entropy => std::f64::consts::LN_2,
            UncertaintyMetric::Variance => 0.25,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyMap {
    pub region: BBox,
    pub values: Vec<f64>,
    pub metric: UncertaintyMetric,
}

impl UncertaintyMap {
    /// Writes the map as an 8-bit PGM scaled by the metric's maximum.
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let max = self.metric.max_value();
        let mut bytes = format!("P5\n{} {}\n255\n", self.region.width(), self.region.height()).into_bytes();
        bytes.extend(
            self.values
                .iter()
                .map(|v| ((v / max).clamp(0.0, 1.0) * 255.0).round() as u8),
        );
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }
}

pub fn entropy_map(ps: &PredictionSet) -> Result<UncertaintyMap> {
    let mean = mean_map(ps)?;
    Ok(UncertaintyMap {
        region: ps.region,
        values: mean.into_iter().map(entropy_unchecked).collect(),
        metric: UncertaintyMetric::Entropy,
    })
}

/// Population variance across the K maps; needs K >= 2.
pub fn variance_map(ps: &PredictionSet) -> Result<UncertaintyMap> {
    if ps.maps.len() < 2 {
        return Err(Error::InsufficientPredictions(ps.maps.len()));
    }
    let mean = mean_map(ps)?;
    let k = ps.maps.len() as f64;
    let mut values = vec![0.0; mean.len()];
    for map in &ps.maps {
        for ((v, p), m) in values.iter_mut().zip(map).zip(&mean) {
            *v += (p - m) * (p - m);
        }
    }
    for v in &mut values {
        *v /= k;
    }
    Ok(UncertaintyMap {
        region: ps.region,
        values,
        metric: UncertaintyMetric::Variance,
    })
}
