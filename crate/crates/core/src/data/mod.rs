//! Synthetic dataset generation, on-disk format, augmentation, and splits.

mod augment;
mod dataset;
mod generate;
pub mod pnm;
mod split;

pub use augment::Augment;
pub use dataset::{load_dataset, save_dataset, save_sample, LABELS_FILE};
pub use generate::{generate, generate_sample, GeneratorConfig};
pub use split::{kfold_split, Fold};

use crate::mca::BiomarkerPanel;
use crate::numerics::Tensor;

/// Number of grade classes (II, III, IV).
pub const NUM_GRADES: usize = 3;

/// One region-of-interest image with its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub patient_id: String,
    /// 0, 1, 2 for grades II, III, IV.
    pub grade: usize,
    /// Absent when the dataset carries no biomarker columns.
    pub panel: Option<BiomarkerPanel>,
    /// `[H, W, 3]` in `[0, 1]`, multiples of 1/255.
    pub image: Tensor<f32>,
    /// Row-major `[H, W]` ground-truth diagnostic region, when known.
    pub focus_mask: Option<Vec<bool>>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }
}

/// Grade as written on disk (2, 3, 4).
pub fn grade_to_disk(grade: usize) -> usize {
    grade + 2
}

/// Rounds to the nearest multiple of 1/255.
pub fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}
