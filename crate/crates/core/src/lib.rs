//! Focus-oriented training for a tiny vision transformer.
//!
//! A reverse-mode autodiff core drives a small ViT grader. Training adds two
//! auxiliary objectives: gradient-based focus localization with a three-region
//! consistency constraint ([`frl`]), and per-biomarker supervised contrastive
//! alignment of multi-view features ([`mca`]). Inference uses the image alone.

pub mod data;
pub mod error;
pub mod frl;
pub mod mca;
pub mod model;
pub mod numerics;
pub mod trace;
pub mod train;

pub use error::{Error, Result};
