//! Tooling for measuring whether cross-modal attention in image-text models is a
//! faithful, text-sensitive localization signal.
//!
//! The crate is organized bottom-up:
//!
//! - [`corpus`]: instances, annotations, the validated JSON loader and a seeded
//!   synthetic chest-film generator.
//! - [`saliency`]: attention maps to pixel scores and box labels to pixel labels.
//! - [`metrics`]: AUROC, average precision, IOU/precision at top-q%, entropy,
//!   symmetric KL, Pearson correlation, contrastive accuracy.
//! - [`synthtext`]: rule-based sentences from (condition, context, locations).
//! - [`perturb`]: seeded text and label corruptions.
//! - [`subsets`]: evaluation subsets and large-box trimming.
//! - [`model`]: a small two-tower model with a tape-based gradient engine.
//! - [`runner`]: evaluation grids and report export.

pub mod corpus;
pub mod error;
pub mod heatmap;
pub mod metrics;
pub mod model;
pub mod perturb;
pub mod runner;
pub mod saliency;
pub mod seed;
pub mod subsets;
pub mod synthtext;

pub use error::{Error, Result};
