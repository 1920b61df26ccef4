//! Deterministic synthetic scenes: gradient background, back-to-front painted
//! shapes with uniform colors and Gaussian pixel noise, and the per-instance
//! visible masks left after occlusion.

mod io;
mod shapes;

pub use io::{encode_ppm, read_dataset, write_dataset, DatasetMeta};
pub use shapes::ShapeKind;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream};
use crate::types::{Bitmask, Dataset, ImageEntry, ImageRaster, InstanceKey, InstanceRecord};
use shapes::Shape;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub image_size: u32,
    /// Inclusive range of instances per image.
    pub instances_per_image: [u32; 2],
    pub shape_palette: Vec<ShapeKind>,
    pub noise_sigma: f64,
    pub min_visible_area: u64,
    /// Minimum RGB distance of every shape color from the background mean.
    pub min_color_distance: f64,
    /// Per-channel spread between the two background gradient endpoints.
    pub gradient_amplitude: f64,
    /// Shape radius range in pixels at 64 px image size; scaled with `image_size`.
    pub radius_range: [f64; 2],
    /// Subsamples per pixel side for color rendering (1 = hard edges).
    pub supersample: u32,
    /// Inclusive range of unlabeled distractor shapes painted behind the
    /// instances as background clutter.
    pub clutter: [u32; 2],
    pub max_attempts: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            instances_per_image: [1, 6],
            shape_palette: ShapeKind::ALL.to_vec(),
            noise_sigma: 0.05,
            min_visible_area: 25,
            min_color_distance: 0.2,
            gradient_amplitude: 0.3,
            radius_range: [4.0, 14.0],
            supersample: 2,
            clutter: [3, 6],
            max_attempts: 200,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < crate::types::MIN_IMAGE_SIDE {
            return Err(Error::config("image_size", "must be at least 8"));
        }
        let [lo, hi] = self.instances_per_image;
        if lo == 0 || lo > hi {
            return Err(Error::config("instances_per_image", "range must be non-empty and start at 1 or more"));
        }
        if self.shape_palette.is_empty() {
            return Err(Error::config("shape_palette", "must not be empty"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::config("noise_sigma", "must be non-negative"));
        }
        if self.min_visible_area < 1 {
            return Err(Error::config("min_visible_area", "must be at least 1"));
        }
        if !(self.min_color_distance >= 0.0 && self.min_color_distance < 0.8) {
            return Err(Error::config("min_color_distance", "must lie in [0, 0.8)"));
        }
        let [rlo, rhi] = self.radius_range;
        if !(rlo > 0.0 && rlo < rhi) {
            return Err(Error::config("radius_range", "must be a non-empty positive range"));
        }
        if self.clutter[0] > self.clutter[1] {
            return Err(Error::config("clutter", "range must be non-empty"));
        }
        if self.supersample == 0 {
            return Err(Error::config("supersample", "must be at least 1"));
        }
        if self.max_attempts == 0 {
            return Err(Error::config("max_attempts", "must be at least 1"));
        }
        Ok(())
    }
}

/// Visible ground truth of one scene; `masks[i]` belongs to instance id `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneTruth {
    pub masks: Vec<Bitmask>,
    /// Paint order of each instance (0 = back-most).
    pub z_order: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledScene {
    pub image: ImageRaster,
    pub records: Vec<InstanceRecord>,
    pub truth: SceneTruth,
}

/// A dataset together with the hidden truth, aligned with `dataset.images()`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSplit {
    pub dataset: Dataset,
    pub truths: Vec<SceneTruth>,
}

impl LabeledSplit {
    pub fn from_scenes(scenes: Vec<LabeledScene>) -> Result<Self> {
        let mut images = Vec::with_capacity(scenes.len());
        let mut records = Vec::new();
        let mut truths = Vec::with_capacity(scenes.len());
        for (id, scene) in scenes.into_iter().enumerate() {
            let id = id as u32;
            images.push(ImageEntry {
                id,
                raster: scene.image,
            });
            records.extend(scene.records.into_iter().map(|mut r| {
                r.image_id = id;
                r
            }));
            truths.push(scene.truth);
        }
        Ok(Self {
            dataset: Dataset::new(images, records)?,
            truths,
        })
    }

    /// Visible mask of `key`.
    pub fn mask(&self, key: InstanceKey) -> Option<&Bitmask> {
        self.dataset.instance(key)?;
        let pos = self.dataset.image_position(key.image_id)?;
        self.truths.get(pos)?.masks.get(key.instance_id as usize)
    }

    pub fn q(&self) -> usize {
        self.dataset.q()
    }
}

fn color_distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[inline]
fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

struct Background {
    c0: [f64; 3],
    c1: [f64; 3],
    dir: (f64, f64),
    t_min: f64,
    t_span: f64,
}

impl Background {
    fn sample<R: Rng>(size: u32, amplitude: f64, rng: &mut R) -> Self {
        let c0: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.15..0.85));
        let c1: [f64; 3] =
            std::array::from_fn(|i| (c0[i] + rng.random_range(-amplitude..=amplitude)).clamp(0.0, 1.0));
        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        let dir = (theta.cos(), theta.sin());
        let s = size as f64;
        let corners = [(0.0, 0.0), (s, 0.0), (0.0, s), (s, s)].map(|(x, y)| x * dir.0 + y * dir.1);
        let t_min = corners.iter().cloned().fold(f64::INFINITY, f64::min);
        let t_max = corners.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Self {
            c0,
            c1,
            dir,
            t_min,
            t_span: (t_max - t_min).max(1e-9),
        }
    }

    fn mean(&self) -> [f64; 3] {
        std::array::from_fn(|i| 0.5 * (self.c0[i] + self.c1[i]))
    }

    fn at(&self, x: f64, y: f64) -> [f64; 3] {
        let t = ((x * self.dir.0 + y * self.dir.1) - self.t_min) / self.t_span;
        std::array::from_fn(|i| self.c0[i] + (self.c1[i] - self.c0[i]) * t)
    }
}

fn try_scene(rng: &mut crate::rng::StreamRng, config: &SceneConfig) -> Result<Option<LabeledScene>> {
    let size = config.image_size;
    let n = rng.random_range(config.instances_per_image[0]..=config.instances_per_image[1]) as usize;
    let bg = Background::sample(size, config.gradient_amplitude, rng);
    let bg_mean = bg.mean();
    let scale = size as f64 / 64.0;
    let [rlo, rhi] = config.radius_range;

    // Clutter first (behind everything), then the instances.
    let n_clutter = rng.random_range(config.clutter[0]..=config.clutter[1]) as usize;
    let mut painted: Vec<(ShapeKind, Shape, [f64; 3])> = Vec::with_capacity(n_clutter + n);
    for i in 0..n_clutter + n {
        let kind = config.shape_palette[rng.random_range(0..config.shape_palette.len())];
        let cx = rng.random_range(0.0..size as f64);
        let cy = rng.random_range(0.0..size as f64);
        let radius = rng.random_range(rlo..rhi) * scale;
        let shape = Shape::sample(kind, cx, cy, radius, rng);
        let color = loop {
            let c: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
            if i < n_clutter || color_distance(c, bg_mean) >= config.min_color_distance {
                break c;
            }
        };
        painted.push((kind, shape, color));
    }

    // Ownership at pixel centers: the top-most covering shape.
    let npx = (size * size) as usize;
    let mut owner: Vec<Option<usize>> = vec![None; npx];
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            owner[(y * size + x) as usize] = painted.iter().rposition(|(_, s, _)| s.contains(px, py));
        }
    }
    let mut masks = vec![Bitmask::new(size, size); n];
    for y in 0..size {
        for x in 0..size {
            if let Some(i) = owner[(y * size + x) as usize] {
                if i >= n_clutter {
                    masks[i - n_clutter].set(x, y, true);
                }
            }
        }
    }
    if masks.iter().any(|m| m.count() < config.min_visible_area) {
        return Ok(None);
    }

    let noise = Normal::new(0.0, config.noise_sigma.max(0.0))
        .map_err(|e| Error::config("noise_sigma", e.to_string()))?;
    let ss = config.supersample;
    let mut pixels = Vec::with_capacity(npx);
    for y in 0..size {
        for x in 0..size {
            let mut c = [0.0; 3];
            if ss == 1 {
                c = match owner[(y * size + x) as usize] {
                    Some(i) => painted[i].2,
                    None => bg.at(x as f64 + 0.5, y as f64 + 0.5),
                };
            } else {
                for sy in 0..ss {
                    for sx in 0..ss {
                        let px = x as f64 + (sx as f64 + 0.5) / ss as f64;
                        let py = y as f64 + (sy as f64 + 0.5) / ss as f64;
                        let sub = match painted.iter().rposition(|(_, s, _)| s.contains(px, py)) {
                            Some(i) => painted[i].2,
                            None => bg.at(px, py),
                        };
                        for k in 0..3 {
                            c[k] += sub[k];
                        }
                    }
                }
                let w = (ss * ss) as f64;
                c = c.map(|v| v / w);
            }
            let noisy: [f64; 3] = std::array::from_fn(|k| {
                let e = if config.noise_sigma > 0.0 {
                    noise.sample(rng)
                } else {
                    0.0
                };
                quantize(c[k] + e)
            });
            pixels.push(noisy);
        }
    }

    let mut records = Vec::with_capacity(n);
    for (i, (kind, _, _)) in painted[n_clutter..].iter().enumerate() {
        let bbox = masks[i].tight_box().expect("mask area checked above");
        records.push(InstanceRecord {
            image_id: 0,
            instance_id: i as u32,
            category_id: kind.category(),
            bbox,
        });
    }
    Ok(Some(LabeledScene {
        image: ImageRaster::new(size, size, pixels)?,
        records,
        truth: SceneTruth {
            masks,
            z_order: (0..n as u32).collect(),
        },
    }))
}

/// Generates one scene; identical `(seed, config)` gives identical scenes.
pub fn generate_scene(seed: u64, config: &SceneConfig) -> Result<LabeledScene> {
    config.validate()?;
    for attempt in 0..config.max_attempts {
        let mut rng = stream(seed, "scene", &[attempt as u64]);
        if let Some(scene) = try_scene(&mut rng, config)? {
            return Ok(scene);
        }
    }
    Err(Error::GenerationExhausted {
        attempts: config.max_attempts,
    })
}

/// Scene seed of image `index` in `split`; prefix-stable in the split size.
pub fn scene_seed(seed: u64, split: &str, index: usize) -> u64 {
    derive_seed(seed, split, &[index as u64])
}

pub fn generate_split(seed: u64, split: &str, count: usize, config: &SceneConfig) -> Result<LabeledSplit> {
    let scenes = (0..count)
        .into_par_iter()
        .map(|i| generate_scene(scene_seed(seed, split, i), config))
        .collect::<Result<Vec<_>>>()?;
    LabeledSplit::from_scenes(scenes)
}

/// Train and test splits from disjoint sub-seeds.
pub fn generate_dataset(
    seed: u64,
    n_train: usize,
    n_test: usize,
    config: &SceneConfig,
) -> Result<(LabeledSplit, LabeledSplit)> {
    if n_train == 0 {
        return Err(Error::config("n_train", "must be at least 1"));
    }
    if n_test == 0 {
        return Err(Error::config("n_test", "must be at least 1"));
    }
    config.validate()?;
    Ok((
        generate_split(seed, "train", n_train, config)?,
        generate_split(seed, "test", n_test, config)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scene_is_deterministic() {
        let cfg = SceneConfig::default();
        assert_eq!(generate_scene(0, &cfg).unwrap(), generate_scene(0, &cfg).unwrap());
        assert_ne!(generate_scene(0, &cfg).unwrap(), generate_scene(1, &cfg).unwrap());
    }

    #[test]
    fn visible_masks_are_disjoint_and_boxes_tight() {
        let cfg = SceneConfig::default();
        for seed in 0..20 {
            let scene = generate_scene(seed, &cfg).unwrap();
            let size = cfg.image_size;
            for y in 0..size {
                for x in 0..size {
                    let owners = scene.truth.masks.iter().filter(|m| m.get(x, y)).count();
                    assert!(owners <= 1);
                }
            }
            for (rec, mask) in scene.records.iter().zip(&scene.truth.masks) {
                assert!(mask.count() >= cfg.min_visible_area);
                assert_eq!(mask.tight_box(), Some(rec.bbox));
                // removing any border row/column loses mask pixels
                let b = rec.bbox;
                assert!((b.x_min..=b.x_max).any(|x| mask.get(x, b.y_min)));
                assert!((b.x_min..=b.x_max).any(|x| mask.get(x, b.y_max)));
                assert!((b.y_min..=b.y_max).any(|y| mask.get(b.x_min, y)));
                assert!((b.y_min..=b.y_max).any(|y| mask.get(b.x_max, y)));
            }
        }
    }

    #[test]
    fn over_packed_config_exhausts() {
        let cfg = SceneConfig {
            image_size: 16,
            instances_per_image: [50, 50],
            ..SceneConfig::default()
        };
        assert!(matches!(
            generate_scene(0, &cfg),
            Err(Error::GenerationExhausted { .. })
        ));
    }

    #[test]
    fn categories_follow_shape_kind() {
        let cfg = SceneConfig {
            shape_palette: vec![ShapeKind::Triangle],
            ..SceneConfig::default()
        };
        let scene = generate_scene(5, &cfg).unwrap();
        assert!(scene.records.iter().all(|r| r.category_id == 2));
    }

    #[test]
    fn split_prefix_is_stable() {
        let cfg = SceneConfig::default();
        let small = generate_split(7, "train", 3, &cfg).unwrap();
        let large = generate_split(7, "train", 5, &cfg).unwrap();
        for i in 0..3 {
            assert_eq!(small.dataset.images()[i], large.dataset.images()[i]);
            assert_eq!(small.truths[i], large.truths[i]);
        }
    }

    #[test]
    fn invalid_sizes_name_the_field() {
        let err = generate_dataset(0, 0, 1, &SceneConfig::default()).unwrap_err();
        assert!(err.to_string().contains("n_train"));
    }
}
