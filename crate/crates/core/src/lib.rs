//! Cascaded CT pipeline for chemotherapy-response prediction.
//!
//! Stage I classifies axial slices to crop along z, stage II segments
//! pancreas and tumour to crop in-plane and to supply mask channels, and
//! stage III classifies the cropped study. [`pipeline`] composes the stages
//! into the six cumulative ablation rows.

pub mod checkpoint;
pub mod error;
pub mod io;
mod layers;
pub mod metrics;
pub mod phantom;
pub mod pipeline;
pub mod stage1;
pub mod stage2;
pub mod stage3;
pub mod volume;

pub use error::{Error, Result};
