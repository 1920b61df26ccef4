//! Logistic heads, their loss and its exact gradient.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::features::{FeatureVector, BIAS, FEATURE_DIM};
use crate::error::{Error, Result};
use crate::rng::stream;

/// Emitted probabilities are kept strictly inside (0, 1).
pub const PROB_EPS: f64 = 1e-12;

#[inline]
pub fn dot(w: &FeatureVector, f: &FeatureVector) -> f64 {
    w.iter().zip(f.iter()).map(|(a, b)| a * b).sum()
}

#[inline]
pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
#[inline]
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Binary cross-entropy of `logistic(z)` against `label`.
#[inline]
pub fn bce_from_logit(z: f64, label: f64) -> f64 {
    softplus(z) - label * z
}

/// Weights of the anchor heads of one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub heads: Vec<FeatureVector>,
    pub lambda: f64,
}

impl ModelParams {
    pub fn zeros(heads: usize, lambda: f64) -> Self {
        Self {
            heads: vec![[0.0; FEATURE_DIM]; heads],
            lambda,
        }
    }

    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn is_finite(&self) -> bool {
        self.heads.iter().flatten().all(|w| w.is_finite())
    }

    /// Mean head probability.
    pub fn mean_probability(&self, f: &FeatureVector) -> f64 {
        let n = self.heads.len() as f64;
        self.heads.iter().map(|w| forward(w, f)).sum::<f64>() / n
    }
}

#[inline]
pub fn forward(w: &FeatureVector, f: &FeatureVector) -> f64 {
    logistic(dot(w, f)).clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Probability of head `k` at feature `f`.
pub fn forward_head(params: &ModelParams, k: usize, f: &FeatureVector) -> f64 {
    forward(&params.heads[k], f)
}

/// One supervised pixel.
pub type Sample = (FeatureVector, f64);

/// `(loss, gradient)` of the mean over heads and batch of the binary
/// cross-entropy plus `lambda * sum_k |w_k|^2` (bias excluded).
pub fn loss_and_grad(params: &ModelParams, batch: &[Sample]) -> Result<(f64, Vec<FeatureVector>)> {
    if batch.is_empty() {
        return Err(Error::EmptySupervision);
    }
    if params.heads.is_empty() {
        return Err(Error::InvalidValue("model has no heads".into()));
    }
    let k = params.heads.len() as f64;
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(params.heads.len());
    for w in &params.heads {
        let mut g = [0.0; FEATURE_DIM];
        let mut head_loss = 0.0;
        for (f, y) in batch {
            let z = dot(w, f);
            head_loss += bce_from_logit(z, *y);
            let r = logistic(z) - y;
            for j in 0..FEATURE_DIM {
                g[j] += r * f[j];
            }
        }
        loss += head_loss / (n * k);
        for j in 0..FEATURE_DIM {
            g[j] /= n * k;
            if j != BIAS {
                loss += params.lambda * w[j] * w[j];
                g[j] += 2.0 * params.lambda * w[j];
            }
        }
        grads.push(g);
    }
    Ok((loss, grads))
}

/// Anchor heads plus the settings that shape prediction sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub heads: usize,
    /// Independently trained copies; more than one enables mode M.
    pub replicas: usize,
    /// Blur sigmas (pixels) for mode S.
    pub scales: Vec<f64>,
    pub lambda: f64,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            heads: 4,
            replicas: 1,
            scales: vec![0.0, 1.0, 2.0],
            lambda: 1e-4,
            init_std: 0.01,
        }
    }
}

/// The learner: one or more replicas of the multi-head model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub members: Vec<ModelParams>,
    pub scales: Vec<f64>,
}

impl ModelState {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        if config.heads == 0 || config.replicas == 0 {
            return Err(Error::config("heads", "heads and replicas must be at least 1"));
        }
        if config.scales.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::config("scales", "blur sigmas must be non-negative"));
        }
        let normal = Normal::new(0.0, config.init_std)
            .map_err(|e| Error::config("init_std", e.to_string()))?;
        let members = (0..config.replicas)
            .map(|m| ModelParams {
                heads: (0..config.heads)
                    .map(|k| {
                        let mut rng = stream(seed, "init", &[m as u64, k as u64]);
                        std::array::from_fn(|_| normal.sample(&mut rng))
                    })
                    .collect(),
                lambda: config.lambda,
            })
            .collect();
        Ok(Self {
            members,
            scales: config.scales.clone(),
        })
    }

    pub fn primary(&self) -> &ModelParams {
        &self.members[0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weights_give_half() {
        let p = ModelParams::zeros(4, 1e-4);
        let f = [0.3, -0.1, 0.2, 0.5, 0.5, 0.5, 0.1, 0.4, 1.0];
        for k in 0..4 {
            assert_eq!(forward_head(&p, k, &f), 0.5);
        }
        let (loss, _) = loss_and_grad(&p, &[(f, 1.0), (f, 0.0)]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn saturation_and_hand_weights() {
        let mut p = ModelParams::zeros(1, 0.0);
        p.heads[0][BIAS] = 10.0;
        let f = [0.0, 0.0, 0.0, 0.2, 0.2, 0.2, 0.1, 0.1, 1.0];
        assert!(forward_head(&p, 0, &f) > 0.9999);

        let mut q = ModelParams::zeros(1, 0.0);
        q.heads[0][0] = 1.0;
        let g = [0.25, 0.0, 0.25, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0];
        // 1 / (1 + e^-0.25) evaluated at 30 digits: 0.5621765008857981...
        assert!((forward_head(&q, 0, &g) - 0.562_176_500_885_798_1).abs() < 1e-15);
    }

    #[test]
    fn single_point_loss_term() {
        // logit with logistic(z) = 0.9 is ln 9
        let mut p = ModelParams::zeros(1, 0.0);
        p.heads[0][BIAS] = 9f64.ln();
        let f = [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0];
        let (loss, _) = loss_and_grad(&p, &[(f, 1.0)]).unwrap();
        // -ln 0.9 = 0.105360515657826...
        assert!((loss - 0.105_360_515_657_826_3).abs() < 1e-12);
    }

    #[test]
    fn l2_excludes_bias() {
        let mut p = ModelParams::zeros(1, 0.5);
        p.heads[0][BIAS] = 3.0;
        p.heads[0][0] = 2.0;
        let f = [0.0; FEATURE_DIM];
        let (loss, grad) = loss_and_grad(&p, &[(f, 0.0)]).unwrap();
        assert!((loss - (std::f64::consts::LN_2 + 0.5 * 4.0)).abs() < 1e-12);
        assert_eq!(grad[0][0], 2.0);
        assert_eq!(grad[0][BIAS], 0.0);
    }

    #[test]
    fn init_is_seeded_and_small() {
        let cfg = ModelConfig::default();
        let a = ModelState::init(&cfg, 1).unwrap();
        assert_eq!(a, ModelState::init(&cfg, 1).unwrap());
        assert_ne!(a, ModelState::init(&cfg, 2).unwrap());
        assert!(a.members[0].heads.iter().flatten().all(|w| w.abs() < 0.06));
    }

    #[test]
    fn empty_batch_is_rejected() {
        assert!(matches!(
            loss_and_grad(&ModelParams::zeros(1, 0.0), &[]),
            Err(Error::EmptySupervision)
        ));
    }
}
