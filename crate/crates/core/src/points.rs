//! The growing ledger of yes/no point labels.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Dataset, InstanceKey};

/// One answered point query. Field order is the on-disk order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PointAnnotation {
    pub image_id: u32,
    pub instance_id: u32,
    pub x: u32,
    pub y: u32,
    pub label: u8,
    pub step: u32,
}

impl PointAnnotation {
    pub fn key(&self) -> InstanceKey {
        InstanceKey::new(self.image_id, self.instance_id)
    }

    fn slot(&self) -> (InstanceKey, u32, u32) {
        (self.key(), self.x, self.y)
    }

    fn check(&self, dataset: &Dataset) -> Result<()> {
        let rec = dataset
            .instance(self.key())
            .ok_or(Error::UnknownInstance(self.key()))?;
        if !rec.bbox.contains(self.x, self.y) {
            return Err(Error::OutOfBox {
                key: self.key(),
                x: self.x,
                y: self.y,
            });
        }
        if self.label > 1 {
            return Err(Error::InvalidValue(format!("label {} not in {{0, 1}}", self.label)));
        }
        Ok(())
    }
}

/// All points labeled up to and including `step`.
#[derive(Clone, Debug, Default)]
pub struct PointSet {
    points: Vec<PointAnnotation>,
    step: u32,
    taken: HashSet<(InstanceKey, u32, u32)>,
}

impl PartialEq for PointSet {
    fn eq(&self, other: &Self) -> bool {
        self.points == other.points && self.step == other.step
    }
}

/// Result of [`merge_point_set`].
#[derive(Clone, Debug)]
pub struct Merge {
    pub set: PointSet,
    /// True when no points were added; the step counter is then unchanged.
    pub noop: bool,
}

impl PointSet {
    /// Builds the initial set. All points must carry step 0.
    pub fn initial(points: Vec<PointAnnotation>, dataset: &Dataset) -> Result<Self> {
        let mut set = PointSet::default();
        for p in points {
            if p.step != 0 {
                return Err(Error::InvalidValue(format!(
                    "initial point carries step {}",
                    p.step
                )));
            }
            set.insert(p, dataset)?;
        }
        Ok(set)
    }

    fn insert(&mut self, p: PointAnnotation, dataset: &Dataset) -> Result<()> {
        p.check(dataset)?;
        if !self.taken.insert(p.slot()) {
            return Err(Error::DuplicatePoint {
                key: p.key(),
                x: p.x,
                y: p.y,
            });
        }
        self.points.push(p);
        Ok(())
    }

    pub fn points(&self) -> &[PointAnnotation] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn step(&self) -> u32 {
        self.step
    }

    pub fn contains(&self, key: InstanceKey, x: u32, y: u32) -> bool {
        self.taken.contains(&(key, x, y))
    }

    /// Labeled pixels of one instance.
    pub fn labeled_pixels(&self, key: InstanceKey) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.points
            .iter()
            .filter(move |p| p.key() == key)
            .map(|p| (p.x, p.y))
    }

    /// Points added at exactly `step`.
    pub fn at_step(&self, step: u32) -> impl Iterator<Item = &PointAnnotation> {
        self.points.iter().filter(move |p| p.step == step)
    }

    /// Points with step `<= step`, in insertion order.
    pub fn truncated(&self, step: u32) -> PointSet {
        let points: Vec<_> = self.points.iter().copied().filter(|p| p.step <= step).collect();
        let taken = points.iter().map(|p| p.slot()).collect();
        PointSet {
            points,
            step: step.min(self.step),
            taken,
        }
    }

    pub fn to_json(&self) -> String {
        // Vec of plain structs cannot fail to serialize.
        serde_json::to_string_pretty(&self.points).expect("point serialization") + "\n"
    }

    pub fn from_json(text: &str, dataset: &Dataset) -> Result<Self> {
        let points: Vec<PointAnnotation> = serde_json::from_str(text)?;
        let mut set = PointSet::default();
        for p in points {
            set.step = set.step.max(p.step);
            set.insert(p, dataset)?;
        }
        Ok(set)
    }
}

/// Union of `previous` with `new_points`, advancing the step by one.
pub fn merge_point_set(
    previous: &PointSet,
    new_points: &[PointAnnotation],
    dataset: &Dataset,
) -> Result<Merge> {
    if new_points.is_empty() {
        return Ok(Merge {
            set: previous.clone(),
            noop: true,
        });
    }
    let mut set = previous.clone();
    set.step = previous.step + 1;
    for &p in new_points {
        set.insert(p, dataset)?;
    }
    Ok(Merge { set, noop: false })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    Duplicate { key: InstanceKey, x: u32, y: u32 },
    OutOfBox { key: InstanceKey, x: u32, y: u32 },
    UnknownInstance { key: InstanceKey },
    InvalidLabel { key: InstanceKey, label: u8 },
}

/// Every invariant violation of `set` against `dataset`; empty iff valid.
pub fn validate_point_set(set: &PointSet, dataset: &Dataset) -> Vec<Violation> {
    let mut seen = HashSet::new();
    let mut report = Vec::new();
    for p in set.points() {
        let key = p.key();
        match dataset.instance(key) {
            None => report.push(Violation::UnknownInstance { key }),
            Some(rec) if !rec.bbox.contains(p.x, p.y) => report.push(Violation::OutOfBox {
                key,
                x: p.x,
                y: p.y,
            }),
            Some(_) => {}
        }
        if p.label > 1 {
            report.push(Violation::InvalidLabel { key, label: p.label });
        }
        if !seen.insert(p.slot()) {
            report.push(Violation::Duplicate { key, x: p.x, y: p.y });
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{BBox, ImageEntry, ImageRaster, InstanceRecord};

    fn toy_dataset() -> Dataset {
        let img = ImageEntry {
            id: 0,
            raster: ImageRaster::new(8, 8, vec![[0.5; 3]; 64]).unwrap(),
        };
        let recs = vec![
            InstanceRecord {
                image_id: 0,
                instance_id: 0,
                category_id: 0,
                bbox: BBox::new(0, 0, 3, 3).unwrap(),
            },
            InstanceRecord {
                image_id: 0,
                instance_id: 1,
                category_id: 1,
                bbox: BBox::new(4, 4, 7, 6).unwrap(),
            },
        ];
        Dataset::new(vec![img], recs).unwrap()
    }

    fn pt(instance_id: u32, x: u32, y: u32, step: u32) -> PointAnnotation {
        PointAnnotation {
            image_id: 0,
            instance_id,
            x,
            y,
            label: 1,
            step,
        }
    }

    #[test]
    fn merge_grows_by_q() {
        let ds = toy_dataset();
        let p0 = PointSet::initial(vec![pt(0, 1, 1, 0), pt(1, 5, 5, 0)], &ds).unwrap();
        let m = merge_point_set(&p0, &[pt(0, 2, 2, 1), pt(1, 6, 5, 1)], &ds).unwrap();
        assert!(!m.noop);
        assert_eq!(m.set.len(), 4);
        assert_eq!(m.set.step(), 1);
        assert!(validate_point_set(&m.set, &ds).is_empty());
    }

    #[test]
    fn merge_rejects_duplicates_and_out_of_box() {
        let ds = toy_dataset();
        let p0 = PointSet::initial(vec![pt(0, 1, 1, 0)], &ds).unwrap();
        assert!(matches!(
            merge_point_set(&p0, &[pt(0, 1, 1, 1)], &ds),
            Err(Error::DuplicatePoint { .. })
        ));
        assert!(matches!(
            merge_point_set(&p0, &[pt(0, 4, 1, 1)], &ds),
            Err(Error::OutOfBox { .. })
        ));
    }

    #[test]
    fn empty_merge_is_noop() {
        let ds = toy_dataset();
        let p0 = PointSet::initial(vec![pt(0, 1, 1, 0)], &ds).unwrap();
        let m = merge_point_set(&p0, &[], &ds).unwrap();
        assert!(m.noop);
        assert_eq!(m.set, p0);
        assert_eq!(m.set.step(), 0);
    }

    #[test]
    fn validation_reports() {
        let ds = toy_dataset();
        let corner = PointSet::initial(vec![pt(0, 3, 3, 0)], &ds).unwrap();
        assert!(validate_point_set(&corner, &ds).is_empty());

        let other = toy_dataset();
        let mut set = PointSet::default();
        set.points.push(pt(9, 0, 0, 0));
        assert_eq!(
            validate_point_set(&set, &other),
            vec![Violation::UnknownInstance {
                key: InstanceKey::new(0, 9)
            }]
        );
    }

    #[test]
    fn json_field_order_and_roundtrip() {
        let ds = toy_dataset();
        let p0 = PointSet::initial(vec![pt(1, 7, 6, 0)], &ds).unwrap();
        let text = p0.to_json();
        let compact: String = text.split_whitespace().collect();
        assert_eq!(
            compact,
            r#"[{"image_id":0,"instance_id":1,"x":7,"y":6,"label":1,"step":0}]"#
        );
        assert_eq!(PointSet::from_json(&text, &ds).unwrap(), p0);
    }
}
