//! Annotators and the audit trail.
//!
//! An [`Annotator`] only produces answers. Charging the budget, rejecting
//! invalid or duplicate queries and logging happen in [`AuditTrail`], so a
//! simulated run and a human-backed run record byte-identical logs when the
//! answers agree.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::budget::{millis_to_seconds, BudgetLedger, CostModel};
use crate::error::{Error, Result};
use crate::synthgen::LabeledSplit;
use crate::types::{Bitmask, Dataset, InstanceKey};

/// A yes/no question about one pixel of one instance's box.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PointQuery {
    pub query_id: u64,
    pub image_id: u32,
    pub instance_id: u32,
    pub x: u32,
    pub y: u32,
    pub step: u32,
}

impl PointQuery {
    pub fn key(&self) -> InstanceKey {
        InstanceKey::new(self.image_id, self.instance_id)
    }
}

pub trait Annotator: Send + Sync {
    /// 1 iff the pixel belongs to the queried instance.
    fn answer_point(&self, query: &PointQuery) -> Result<u8>;

    fn answer_mask(&self, key: InstanceKey) -> Result<Bitmask>;
}

/// Answers from the hidden visible masks.
#[derive(Clone, Debug)]
pub struct SimulatedOracle {
    truth: Arc<LabeledSplit>,
}

impl SimulatedOracle {
    pub fn new(truth: Arc<LabeledSplit>) -> Self {
        Self { truth }
    }

    fn mask(&self, key: InstanceKey) -> Result<&Bitmask> {
        self.truth.mask(key).ok_or(Error::UnknownInstance(key))
    }
}

impl Annotator for SimulatedOracle {
    fn answer_point(&self, q: &PointQuery) -> Result<u8> {
        let key = q.key();
        let rec = self
            .truth
            .dataset
            .instance(key)
            .ok_or(Error::UnknownInstance(key))?;
        if !rec.bbox.contains(q.x, q.y) {
            return Err(Error::OutOfBox { key, x: q.x, y: q.y });
        }
        Ok(self.mask(key)?.get(q.x, q.y) as u8)
    }

    fn answer_mask(&self, key: InstanceKey) -> Result<Bitmask> {
        self.mask(key).cloned()
    }
}

/// Answers supplied from outside (a human session or a replayed log).
#[derive(Clone, Debug, Default)]
pub struct RemoteAnnotator {
    answers: BTreeMap<u64, u8>,
}

impl RemoteAnnotator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn provide(&mut self, query_id: u64, label: u8) -> Result<()> {
        if label > 1 {
            return Err(Error::InvalidValue(format!("label {label} not in {{0, 1}}")));
        }
        self.answers.insert(query_id, label);
        Ok(())
    }

    pub fn has_answer(&self, query_id: u64) -> bool {
        self.answers.contains_key(&query_id)
    }
}

impl Annotator for RemoteAnnotator {
    fn answer_point(&self, q: &PointQuery) -> Result<u8> {
        self.answers
            .get(&q.query_id)
            .copied()
            .ok_or(Error::AnnotatorTimeout(q.query_id))
    }

    fn answer_mask(&self, _key: InstanceKey) -> Result<Bitmask> {
        Err(Error::Unsupported("mask queries (full-mask runs are simulation-only)"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryKind {
    Point,
    Mask,
}

/// One line of `oracle_log.jsonl`.
///
/// `wall_time` is the annotation clock: cumulative charged seconds after this
/// query. It is deterministic so human and simulated logs stay comparable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub query_id: u64,
    pub instance: InstanceKey,
    pub x: Option<u32>,
    pub y: Option<u32>,
    pub label: Option<u8>,
    pub wall_time: f64,
    pub kind: QueryKind,
    pub step: u32,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub redundant: bool,
}

impl AuditRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("audit record serialization") + "\n"
    }
}

/// Budget ledger plus append-only query log.
#[derive(Clone, Debug, PartialEq)]
pub struct AuditTrail {
    pub ledger: BudgetLedger,
    log: Vec<AuditRecord>,
    masked: BTreeSet<InstanceKey>,
}

impl AuditTrail {
    pub fn new(costs: CostModel) -> Self {
        Self {
            ledger: BudgetLedger::new(costs),
            log: Vec::new(),
            masked: BTreeSet::new(),
        }
    }

    pub fn log(&self) -> &[AuditRecord] {
        &self.log
    }

    pub fn masked(&self) -> &BTreeSet<InstanceKey> {
        &self.masked
    }

    /// Asks `annotator` for a point label, charging one point.
    pub fn query_point_label(
        &mut self,
        annotator: &dyn Annotator,
        dataset: &Dataset,
        q: &PointQuery,
    ) -> Result<u8> {
        let key = q.key();
        let rec = dataset.instance(key).ok_or(Error::UnknownInstance(key))?;
        if !rec.bbox.contains(q.x, q.y) {
            return Err(Error::OutOfBox { key, x: q.x, y: q.y });
        }
        let label = annotator.answer_point(q)?;
        if label > 1 {
            return Err(Error::InvalidValue(format!("label {label} not in {{0, 1}}")));
        }
        self.ledger.charge_point();
        self.log.push(AuditRecord {
            query_id: q.query_id,
            instance: key,
            x: Some(q.x),
            y: Some(q.y),
            label: Some(label),
            wall_time: self.ledger.spent(),
            kind: QueryKind::Point,
            step: q.step,
            redundant: self.masked.contains(&key),
        });
        Ok(label)
    }

    /// Asks for a full visible mask, charging one mask. Each instance at most once.
    pub fn query_instance_mask(
        &mut self,
        annotator: &dyn Annotator,
        key: InstanceKey,
        query_id: u64,
        step: u32,
    ) -> Result<Bitmask> {
        if self.masked.contains(&key) {
            return Err(Error::DuplicateMaskQuery(key));
        }
        let mask = annotator.answer_mask(key)?;
        self.ledger.charge_mask();
        self.masked.insert(key);
        self.log.push(AuditRecord {
            query_id,
            instance: key,
            x: None,
            y: None,
            label: None,
            wall_time: self.ledger.spent(),
            kind: QueryKind::Mask,
            step,
            redundant: false,
        });
        Ok(mask)
    }

    /// Rebuilds a trail from logged records (for resuming runs).
    pub fn replay(costs: CostModel, records: Vec<AuditRecord>) -> Self {
        let mut trail = Self::new(costs);
        for r in records {
            match r.kind {
                QueryKind::Point => trail.ledger.charge_point(),
                QueryKind::Mask => {
                    trail.ledger.charge_mask();
                    trail.masked.insert(r.instance);
                }
            }
            trail.log.push(r);
        }
        trail
    }

    pub fn spent_seconds(&self) -> f64 {
        millis_to_seconds(self.ledger.spent_ms())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate_split, SceneConfig};

    fn split() -> Arc<LabeledSplit> {
        Arc::new(generate_split(11, "train", 3, &SceneConfig::default()).unwrap())
    }

    fn query(key: InstanceKey, x: u32, y: u32) -> PointQuery {
        PointQuery {
            query_id: 0,
            image_id: key.image_id,
            instance_id: key.instance_id,
            x,
            y,
            step: 0,
        }
    }

    #[test]
    fn simulated_answers_match_truth_exhaustively() {
        let s = split();
        let oracle = SimulatedOracle::new(s.clone());
        for rec in s.dataset.instances() {
            let mask = s.mask(rec.key()).unwrap();
            for (x, y) in rec.bbox.pixels() {
                let label = oracle.answer_point(&query(rec.key(), x, y)).unwrap();
                assert_eq!(label == 1, mask.get(x, y));
            }
        }
    }

    #[test]
    fn occluded_pixel_is_negative() {
        // find a box pixel owned by another instance
        let cfg = SceneConfig::default();
        for seed in 0..50 {
            let s = Arc::new(generate_split(seed, "occ", 1, &cfg).unwrap());
            let oracle = SimulatedOracle::new(s.clone());
            for rec in s.dataset.instances() {
                for (x, y) in rec.bbox.pixels() {
                    let other = s
                        .dataset
                        .instances()
                        .iter()
                        .filter(|o| o.key() != rec.key())
                        .any(|o| s.mask(o.key()).unwrap().get(x, y));
                    if other {
                        assert_eq!(oracle.answer_point(&query(rec.key(), x, y)).unwrap(), 0);
                        return;
                    }
                }
            }
        }
        panic!("no occluded pixel found in 50 scenes");
    }

    #[test]
    fn trail_charges_and_rejects() {
        let s = split();
        let oracle = SimulatedOracle::new(s.clone());
        let mut trail = AuditTrail::new(CostModel::default());
        let rec = s.dataset.instances()[0];
        let key = rec.key();

        let mask = trail.query_instance_mask(&oracle, key, 0, 0).unwrap();
        assert_eq!(&mask, s.mask(key).unwrap());
        assert_eq!(trail.ledger.spent(), 79.2);
        assert!(matches!(
            trail.query_instance_mask(&oracle, key, 1, 0),
            Err(Error::DuplicateMaskQuery(_))
        ));

        let mut q = query(key, rec.bbox.x_min, rec.bbox.y_min);
        q.query_id = 2;
        trail.query_point_label(&oracle, &s.dataset, &q).unwrap();
        assert!(trail.log().last().unwrap().redundant);
        assert_eq!(trail.ledger.spent_ms(), 79_200 + 900);
        assert_eq!(trail.log().len(), 2);

        let outside = query(key, rec.bbox.x_max + 1, rec.bbox.y_min);
        if rec.bbox.x_max + 1 < 64 {
            assert!(matches!(
                trail.query_point_label(&oracle, &s.dataset, &outside),
                Err(Error::OutOfBox { .. })
            ));
        }
        let unknown = query(InstanceKey::new(99, 0), 0, 0);
        assert!(matches!(
            trail.query_point_label(&oracle, &s.dataset, &unknown),
            Err(Error::UnknownInstance(_))
        ));
        // failed queries are not charged
        assert_eq!(trail.log().len(), 2);

        let replayed = AuditTrail::replay(CostModel::default(), trail.log().to_vec());
        assert_eq!(replayed, trail);
    }

    #[test]
    fn remote_annotator_waits_for_answers() {
        let mut remote = RemoteAnnotator::new();
        let q = query(InstanceKey::new(0, 0), 0, 0);
        assert!(matches!(remote.answer_point(&q), Err(Error::AnnotatorTimeout(0))));
        remote.provide(0, 1).unwrap();
        assert_eq!(remote.answer_point(&q).unwrap(), 1);
        assert!(remote.provide(1, 2).is_err());
    }
}
