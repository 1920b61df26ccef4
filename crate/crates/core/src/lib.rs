//! Desk-scale laboratory for active point-supervised instance segmentation.
//!
//! A learner is given the category and box of every instance and grows a set
//! of yes/no point labels one point per instance per step. Points are chosen
//! by uncertainty of the learner's own mask predictions (entropy of the mean
//! prediction, or committee variance) and the learner is fine-tuned on the
//! labeled points only. Baselines are random points and budget-equalized
//! full-mask annotation of selected images or instances.
//!
//! Module map:
//!
//! - [`types`], [`points`], [`budget`]: shared domain values and ledgers.
//! - [`synthgen`]: synthetic multi-instance scenes with hidden visible masks.
//! - [`oracle`]: simulated annotator and the audit trail.
//! - [`segmodel`]: box-conditioned multi-head pixel classifier.
//! - [`uncertainty`]: entropy and disagreement maps.
//! - [`selection`]: point selection, GIoU and the full-mask selectors.
//! - [`eval`]: IoU/mAP, point accuracy, boundary distances.
//! - [`driver`]: the active-learning loop, run directories and sweeps.

pub mod budget;
pub mod driver;
pub mod error;
pub mod eval;
pub mod oracle;
pub mod points;
pub mod rng;
pub mod segmodel;
pub mod selection;
pub mod synthgen;
pub mod types;
pub mod uncertainty;

pub use error::{Error, Result};
