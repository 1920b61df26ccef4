//! Images, boxes, instance records and the dataset container.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_IMAGE_SIDE: u32 = 8;

/// RGB image with channels in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRaster {
    width: u32,
    height: u32,
    pixels: Vec<[f64; 3]>,
}

impl ImageRaster {
    pub fn new(width: u32, height: u32, pixels: Vec<[f64; 3]>) -> Result<Self> {
        if width < MIN_IMAGE_SIDE || height < MIN_IMAGE_SIDE {
            return Err(Error::InvalidValue(format!(
                "image {width}x{height} is smaller than {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}"
            )));
        }
        if pixels.len() != (width * height) as usize {
            return Err(Error::InvalidValue(format!(
                "expected {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        if let Some(bad) = pixels
            .iter()
            .flatten()
            .find(|c| !(0.0..=1.0).contains(*c))
        {
            return Err(Error::InvalidValue(format!("channel value {bad} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    #[inline]
    pub fn rgb(&self, x: u32, y: u32) -> [f64; 3] {
        self.pixels[(y * self.width + x) as usize]
    }

    pub fn pixels(&self) -> &[[f64; 3]] {
        &self.pixels
    }

    pub fn full_box(&self) -> BBox {
        BBox {
            x_min: 0,
            y_min: 0,
            x_max: self.width - 1,
            y_max: self.height - 1,
        }
    }
}

/// Axis-aligned box with inclusive integer pixel bounds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
}

impl BBox {
    pub fn new(x_min: u32, y_min: u32, x_max: u32, y_max: u32) -> Result<Self> {
        if x_min > x_max || y_min > y_max {
            return Err(Error::DegenerateBox(format!(
                "[{x_min}, {y_min}, {x_max}, {y_max}]"
            )));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn width(&self) -> u32 {
        self.x_max - self.x_min + 1
    }

    pub fn height(&self) -> u32 {
        self.y_max - self.y_min + 1
    }

    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    #[inline]
    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    pub fn fits_in(&self, width: u32, height: u32) -> bool {
        self.x_max < width && self.y_max < height
    }

    /// Row-major offset of `(x, y)` inside the box. Caller guarantees containment.
    #[inline]
    pub fn offset(&self, x: u32, y: u32) -> usize {
        ((y - self.y_min) * self.width() + (x - self.x_min)) as usize
    }

    /// Pixel coordinates in row-major order (y, then x).
    pub fn pixels(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        (self.y_min..=self.y_max).flat_map(move |y| (self.x_min..=self.x_max).map(move |x| (x, y)))
    }

    /// Grows each side by `ceil(fraction * side length)`, clipped to the image.
    pub fn dilate(&self, fraction: f64, width: u32, height: u32) -> BBox {
        let dx = (fraction * self.width() as f64).ceil() as u32;
        let dy = (fraction * self.height() as f64).ceil() as u32;
        BBox {
            x_min: self.x_min.saturating_sub(dx),
            y_min: self.y_min.saturating_sub(dy),
            x_max: (self.x_max + dx).min(width - 1),
            y_max: (self.y_max + dy).min(height - 1),
        }
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.x_min, self.y_min, self.x_max, self.y_max)
    }
}

/// Dataset-wide instance identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct InstanceKey {
    pub image_id: u32,
    pub instance_id: u32,
}

impl InstanceKey {
    pub fn new(image_id: u32, instance_id: u32) -> Self {
        Self {
            image_id,
            instance_id,
        }
    }
}

impl fmt::Display for InstanceKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.image_id, self.instance_id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub image_id: u32,
    pub instance_id: u32,
    pub category_id: u8,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

impl InstanceRecord {
    pub fn key(&self) -> InstanceKey {
        InstanceKey::new(self.image_id, self.instance_id)
    }
}

/// Binary grid, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bitmask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl Bitmask {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            bits: vec![false; (width * height) as usize],
        }
    }

    pub fn from_bits(width: u32, height: u32, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != (width * height) as usize {
            return Err(Error::InvalidValue(format!(
                "mask of {width}x{height} needs {} bits, got {}",
                width * height,
                bits.len()
            )));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn extent(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[(y * self.width + x) as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        self.bits[(y * self.width + x) as usize] = value;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> u64 {
        self.bits.iter().filter(|b| **b).count() as u64
    }

    /// Tightest box around the set pixels, `None` for an empty mask.
    pub fn tight_box(&self) -> Option<BBox> {
        let mut acc: Option<BBox> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if !self.get(x, y) {
                    continue;
                }
                acc = Some(match acc {
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
        }
        acc
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageEntry {
    pub id: u32,
    pub raster: ImageRaster,
}

/// Images plus their box/category annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Vec<ImageEntry>,
    instances: Vec<InstanceRecord>,
    image_index: BTreeMap<u32, usize>,
    instance_index: BTreeMap<InstanceKey, usize>,
}

impl Dataset {
    pub fn new(images: Vec<ImageEntry>, instances: Vec<InstanceRecord>) -> Result<Self> {
        let mut image_index = BTreeMap::new();
        for (i, img) in images.iter().enumerate() {
            if image_index.insert(img.id, i).is_some() {
                return Err(Error::InvalidValue(format!("duplicate image id {}", img.id)));
            }
        }
        let mut instance_index = BTreeMap::new();
        for (i, rec) in instances.iter().enumerate() {
            let Some(&img) = image_index.get(&rec.image_id) else {
                return Err(Error::InvalidValue(format!(
                    "instance {} references unknown image",
                    rec.key()
                )));
            };
            let raster = &images[img].raster;
            if !rec.bbox.fits_in(raster.width(), raster.height()) {
                return Err(Error::InvalidValue(format!(
                    "box {} of instance {} exceeds its image",
                    rec.bbox,
                    rec.key()
                )));
            }
            if instance_index.insert(rec.key(), i).is_some() {
                return Err(Error::InvalidValue(format!("duplicate instance {}", rec.key())));
            }
        }
        Ok(Self {
            images,
            instances,
            image_index,
            instance_index,
        })
    }

    pub fn images(&self) -> &[ImageEntry] {
        &self.images
    }

    pub fn instances(&self) -> &[InstanceRecord] {
        &self.instances
    }

    /// Total instance count Q.
    pub fn q(&self) -> usize {
        self.instances.len()
    }

    pub fn image(&self, id: u32) -> Option<&ImageRaster> {
        self.image_index.get(&id).map(|&i| &self.images[i].raster)
    }

    pub fn image_position(&self, id: u32) -> Option<usize> {
        self.image_index.get(&id).copied()
    }

    pub fn instance(&self, key: InstanceKey) -> Option<&InstanceRecord> {
        self.instance_index.get(&key).map(|&i| &self.instances[i])
    }

    pub fn instance_position(&self, key: InstanceKey) -> Option<usize> {
        self.instance_index.get(&key).copied()
    }

    pub fn instances_of(&self, image_id: u32) -> impl Iterator<Item = &InstanceRecord> {
        let lo = InstanceKey::new(image_id, 0);
        let hi = InstanceKey::new(image_id, u32::MAX);
        self.instance_index
            .range(lo..=hi)
            .map(move |(_, &i)| &self.instances[i])
    }
}
