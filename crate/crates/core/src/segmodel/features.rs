//! Handcrafted per-pixel features conditioned on an instance box.
//!
//! Layout: `[u, v, r, R, G, B, dc_in, dc_out, 1]` where `(u, v)` are
//! box-normalized offsets of the pixel center from the box center, `r` their
//! norm, `dc_in` the color distance to the median color of the central patch
//! (a quarter of the box area) and `dc_out` the distance to the median color
//! of a two-pixel ring around the box.

use crate::error::{Error, Result};
use crate::types::{BBox, ImageRaster};

pub const FEATURE_DIM: usize = 9;
pub const BIAS: usize = FEATURE_DIM - 1;

pub type FeatureVector = [f64; FEATURE_DIM];

const RING: u32 = 2;

fn median_color(mut samples: Vec<[f64; 3]>) -> [f64; 3] {
    debug_assert!(!samples.is_empty());
    let mid = (samples.len() - 1) / 2;
    std::array::from_fn(|c| {
        samples.sort_by(|a, b| a[c].total_cmp(&b[c]));
        samples[mid][c]
    })
}

fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Per-(image, box) constants shared by every pixel's features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureContext {
    pub bbox: BBox,
    center: (f64, f64),
    size: (f64, f64),
    pub color_in: [f64; 3],
    pub color_out: [f64; 3],
}

impl FeatureContext {
    pub fn new(image: &ImageRaster, bbox: BBox) -> Result<Self> {
        if !bbox.fits_in(image.width(), image.height()) {
            return Err(Error::DegenerateBox(format!("{bbox} exceeds the image")));
        }
        let (w, h) = (bbox.width(), bbox.height());
        let (pw, ph) = (w.div_ceil(2), h.div_ceil(2));
        let (px0, py0) = (bbox.x_min + (w - pw) / 2, bbox.y_min + (h - ph) / 2);
        let patch: Vec<_> = (py0..py0 + ph)
            .flat_map(|y| (px0..px0 + pw).map(move |x| (x, y)))
            .map(|(x, y)| image.rgb(x, y))
            .collect();
        if patch.is_empty() {
            return Err(Error::DegenerateBox(format!("{bbox} has an empty central patch")));
        }

        let outer = BBox {
            x_min: bbox.x_min.saturating_sub(RING),
            y_min: bbox.y_min.saturating_sub(RING),
            x_max: (bbox.x_max + RING).min(image.width() - 1),
            y_max: (bbox.y_max + RING).min(image.height() - 1),
        };
        let mut ring: Vec<_> = outer
            .pixels()
            .filter(|&(x, y)| !bbox.contains(x, y))
            .map(|(x, y)| image.rgb(x, y))
            .collect();
        if ring.is_empty() {
            // box spans the whole image: use its own border
            ring = bbox
                .pixels()
                .filter(|&(x, y)| x == bbox.x_min || x == bbox.x_max || y == bbox.y_min || y == bbox.y_max)
                .map(|(x, y)| image.rgb(x, y))
                .collect();
        }

        Ok(Self {
            bbox,
            center: (
                (bbox.x_min + bbox.x_max + 1) as f64 / 2.0,
                (bbox.y_min + bbox.y_max + 1) as f64 / 2.0,
            ),
            size: (w as f64, h as f64),
            color_in: median_color(patch),
            color_out: median_color(ring),
        })
    }

    #[inline]
    pub fn features(&self, image: &ImageRaster, x: u32, y: u32) -> FeatureVector {
        let u = (x as f64 + 0.5 - self.center.0) / self.size.0;
        let v = (y as f64 + 0.5 - self.center.1) / self.size.1;
        let rgb = image.rgb(x, y);
        [
            u,
            v,
            (u * u + v * v).sqrt(),
            rgb[0],
            rgb[1],
            rgb[2],
            distance(rgb, self.color_in),
            distance(rgb, self.color_out),
            1.0,
        ]
    }

    /// Features for every pixel of `region`, row-major.
    pub fn region_features(&self, image: &ImageRaster, region: BBox) -> Vec<FeatureVector> {
        region.pixels().map(|(x, y)| self.features(image, x, y)).collect()
    }
}

/// Features of one pixel for one box. `(x, y)` may lie outside the box.
pub fn extract_features(image: &ImageRaster, bbox: BBox, x: u32, y: u32) -> Result<FeatureVector> {
    if x >= image.width() || y >= image.height() {
        return Err(Error::InvalidValue(format!("pixel ({x}, {y}) outside the image")));
    }
    Ok(FeatureContext::new(image, bbox)?.features(image, x, y))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(color: [f64; 3]) -> ImageRaster {
        ImageRaster::new(16, 16, vec![color; 256]).unwrap()
    }

    #[test]
    fn center_and_corner_offsets() {
        let img = flat([0.2, 0.4, 0.6]);
        let b = BBox::new(2, 3, 6, 9).unwrap(); // 5 x 7
        let f = extract_features(&img, b, 4, 6).unwrap();
        assert_eq!((f[0], f[1], f[2]), (0.0, 0.0, 0.0));
        let c = extract_features(&img, b, 2, 3).unwrap();
        assert!((c[0] + 0.4).abs() < 1e-12); // (w - 1) / (2w) with w = 5
        assert!((c[1] + 3.0 / 7.0).abs() < 1e-12);
        let c = extract_features(&img, b, 6, 9).unwrap();
        assert!((c[0] - 0.4).abs() < 1e-12);
        assert_eq!(c[BIAS], 1.0);
        assert_eq!(&c[3..6], &[0.2, 0.4, 0.6]);
        assert_eq!(c[6], 0.0);
    }

    #[test]
    fn in_box_features_are_bounded() {
        let mut px = vec![[0.0; 3]; 256];
        for (i, p) in px.iter_mut().enumerate() {
            *p = [(i % 7) as f64 / 6.0, (i % 5) as f64 / 4.0, (i % 3) as f64 / 2.0];
        }
        let img = ImageRaster::new(16, 16, px).unwrap();
        let b = BBox::new(0, 0, 15, 15).unwrap();
        let ctx = FeatureContext::new(&img, b).unwrap();
        for f in ctx.region_features(&img, b) {
            assert!(f[0].abs() <= 0.5 && f[1].abs() <= 0.5);
            assert!(f[2] <= 0.5f64.sqrt());
            assert!(f[6] <= 3f64.sqrt() && f[7] <= 3f64.sqrt());
        }
    }

    #[test]
    fn single_pixel_box() {
        let img = flat([0.5; 3]);
        let b = BBox::new(0, 0, 0, 0).unwrap();
        let f = extract_features(&img, b, 0, 0).unwrap();
        assert_eq!((f[0], f[1]), (0.0, 0.0));
    }
}
