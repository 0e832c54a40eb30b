//! Multi-dataset training for partially labeled volumetric segmentation.
//!
//! Datasets keep disjoint class namespaces even when they delineate the same
//! anatomy, the network predicts every class through its own sigmoid head, and
//! the loss only looks at the classes a sample's dataset actually annotates.
//!
//! Module map:
//! - [`collection`]: manifests, class namespaces, `MTVL` volume files.
//! - [`phantom`]: synthetic collections with conflicting annotation protocols.
//! - [`ndnet`]: dense tensors, a reverse-mode tape, and the 3-D U-Net.
//! - [`losses`]: masked sigmoid BCE + batch dice, plus the softmax baseline.
//! - [`sampling`]: 1/sqrt(n) case sampling, patch extraction, LR schedules.
//! - [`trainer`]: training, fine-tuning, checkpoints, sliding-window inference.
//! - [`eval`]: dice tables, group aggregates, paired t-test, CSV reports.

pub mod collection;
pub mod error;
pub mod eval;
pub mod losses;
pub mod ndnet;
pub mod phantom;
pub mod rng;
pub mod sampling;
pub mod trainer;

pub use error::{Error, Result};
