//! Segmentation training with mined out-of-distribution negatives and
//! positive-negative ratio balancing.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

pub mod balance;
pub mod dataset;
pub mod error;
pub mod metrics;
pub mod ood;
pub mod pipeline;
pub mod seed;
pub mod segtrain;
pub mod store;
pub mod synth;

pub use dataset::{ClassList, DatasetManifest, LabeledRegion, Patch, Role};
pub use error::{Error, Result};
