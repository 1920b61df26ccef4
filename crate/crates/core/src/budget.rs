//! Annotation cost accounting.
//!
//! Costs are held in integer milliseconds so that point/mask budget
//! equivalences (for example 88 points = 1 mask at 0.9 s / 79.2 s) are exact.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_POINT_SECONDS: f64 = 0.9;
pub const DEFAULT_MASK_SECONDS: f64 = 79.2;

/// Per-query annotation costs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostModel {
    pub point_ms: u64,
    pub mask_ms: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            point_ms: 900,
            mask_ms: 79_200,
        }
    }
}

fn to_millis(name: &str, seconds: f64) -> Result<u64> {
    if !seconds.is_finite() || seconds < 0.0 {
        return Err(Error::InvalidConstant(format!("{name} = {seconds}")));
    }
    let ms = seconds * 1000.0;
    let rounded = ms.round();
    if (ms - rounded).abs() > 1e-6 {
        return Err(Error::InvalidConstant(format!(
            "{name} = {seconds} s is finer than millisecond resolution"
        )));
    }
    Ok(rounded as u64)
}

impl CostModel {
    pub fn from_seconds(t_point: f64, t_mask: f64) -> Result<Self> {
        Ok(Self {
            point_ms: to_millis("t_point", t_point)?,
            mask_ms: to_millis("t_mask", t_mask)?,
        })
    }

    pub fn t_point(&self) -> f64 {
        self.point_ms as f64 / 1000.0
    }

    pub fn t_mask(&self) -> f64 {
        self.mask_ms as f64 / 1000.0
    }

    pub fn cost_ms(&self, n_points: u64, n_masks: u64) -> u64 {
        n_points * self.point_ms + n_masks * self.mask_ms
    }

    /// `n_points * t_point + n_masks * t_mask` in seconds.
    pub fn budget_cost(&self, n_points: u64, n_masks: u64) -> f64 {
        millis_to_seconds(self.cost_ms(n_points, n_masks))
    }

    /// Mask count whose time equals that of `n_points` point queries,
    /// rounded to the nearest whole mask (half rounds up).
    pub fn budget_equivalent_masks(&self, n_points: u64) -> Result<u64> {
        if self.mask_ms == 0 {
            return Err(Error::InvalidConstant("t_mask must be positive".into()));
        }
        Ok((2 * n_points * self.point_ms + self.mask_ms) / (2 * self.mask_ms))
    }

    /// Masks that fit into `budget_ms` without overspending.
    pub fn masks_affordable_ms(&self, budget_ms: u64) -> Result<u64> {
        if self.mask_ms == 0 {
            return Err(Error::InvalidConstant("t_mask must be positive".into()));
        }
        Ok(budget_ms / self.mask_ms)
    }
}

pub fn millis_to_seconds(ms: u64) -> f64 {
    ms as f64 / 1000.0
}

/// Seconds spent on answered queries.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetLedger {
    pub costs: CostModel,
    pub n_points: u64,
    pub n_masks: u64,
}

impl BudgetLedger {
    pub fn new(costs: CostModel) -> Self {
        Self {
            costs,
            n_points: 0,
            n_masks: 0,
        }
    }

    pub fn charge_point(&mut self) {
        self.n_points += 1;
    }

    pub fn charge_mask(&mut self) {
        self.n_masks += 1;
    }

    pub fn spent_ms(&self) -> u64 {
        self.costs.cost_ms(self.n_points, self.n_masks)
    }

    pub fn spent(&self) -> f64 {
        millis_to_seconds(self.spent_ms())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_cost_constants() {
        let c = CostModel::default();
        assert_eq!(c.budget_cost(1, 0), 0.9);
        assert_eq!(c.budget_cost(0, 0), 0.0);
        assert_eq!(c.budget_cost(860_000, 0), 774_000.0);
        assert_eq!(c.budget_equivalent_masks(860_000).unwrap(), 9773);
        assert_eq!(c.budget_equivalent_masks(0).unwrap(), 0);
        assert_eq!(c.budget_equivalent_masks(88).unwrap(), 1);
        assert_eq!(c.budget_equivalent_masks(87).unwrap(), 1);
        assert_eq!(c.budget_equivalent_masks(43).unwrap(), 0);
        assert_eq!(c.masks_affordable_ms(600 * 900).unwrap(), 6);
        assert_eq!(c.masks_affordable_ms(860_000 * 900).unwrap(), 9772);
    }

    #[test]
    fn invalid_constants() {
        let c = CostModel::from_seconds(0.9, 0.0).unwrap();
        assert!(matches!(c.budget_equivalent_masks(10), Err(Error::InvalidConstant(_))));
        assert!(CostModel::from_seconds(-1.0, 1.0).is_err());
        assert!(CostModel::from_seconds(0.0001, 1.0).is_err());
        assert_eq!(CostModel::from_seconds(0.9, 79.2).unwrap(), CostModel::default());
    }

    #[test]
    fn ledger_spent_matches_counts() {
        let mut l = BudgetLedger::new(CostModel::default());
        l.charge_point();
        l.charge_point();
        l.charge_mask();
        assert_eq!(l.spent_ms(), 2 * 900 + 79_200);
        assert_eq!(l.spent(), 81.0);
    }

    proptest! {
        #[test]
        fn cost_is_linear(a in 0u64..1_000_000, b in 0u64..1000, c in 0u64..1_000_000, d in 0u64..1000) {
            let m = CostModel::default();
            prop_assert_eq!(m.cost_ms(a + c, b + d), m.cost_ms(a, b) + m.cost_ms(c, d));
        }

        #[test]
        fn equivalent_masks_bracket(n in 0u64..10_000_000, point in 1u64..5_000, mask in 1u64..200_000) {
            let m = CostModel { point_ms: point, mask_ms: mask };
            let k = m.budget_equivalent_masks(n).unwrap();
            // within half a mask of the exact ratio
            prop_assert!(2 * k * mask <= 2 * n * point + mask);
            prop_assert!(2 * n * point < (2 * k + 1) * mask);
            let f = m.masks_affordable_ms(n * point).unwrap();
            prop_assert!(f * mask <= n * point && n * point < (f + 1) * mask);
            prop_assert!(k == f || k == f + 1);
        }
    }
}
