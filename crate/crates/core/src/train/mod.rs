//! Two-pass training, optimizer and schedule, evaluation metrics, and
//! patient-level cross-validation.

mod cv;
mod metrics;
mod optim;
mod trainer;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use cv::{
    cross_validate, embedding_cohesion, evaluate, focus_iou, grade_probabilities, pooled_features, resolved_config,
    train_fold, CvOutcome, FoldOutcome, StepLog,
};
pub use metrics::{accuracy, average_precision, cohen_kappa, compute_metrics, roc_auc, Metrics, MetricsReport};
pub use optim::{cosine_lr, AdamW};
pub use trainer::{objective, Batch, LossBreakdown, Objective, Trainer};

use crate::error::{Error, Result};

/// Which auxiliary objectives are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Three-region classification, consistency, and alignment.
    #[default]
    Full,
    /// Cross-entropy on global views plus alignment over global views only.
    NoFrl,
    /// Three-region classification and consistency, no alignment.
    NoMca,
    /// Cross-entropy on global views only.
    Baseline,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Baseline, Ablation::NoFrl, Ablation::NoMca, Ablation::Full];

    pub fn uses_frl(self) -> bool {
        matches!(self, Ablation::Full | Ablation::NoMca)
    }

    pub fn uses_mca(self) -> bool {
        matches!(self, Ablation::Full | Ablation::NoFrl)
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoFrl => "no_frl",
            Ablation::NoMca => "no_mca",
            Ablation::Baseline => "baseline",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation {s:?} (expected full, no_frl, no_mca or baseline)")))
    }
}

/// Optimization and objective settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub tau: f64,
    pub theta: f64,
    pub ablation: Ablation,
    pub seed: u64,
    pub folds: usize,
    pub augment: bool,
    pub proj_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 0.01,
            betas: [0.9, 0.999],
            eps: 1e-8,
            epochs: 20,
            batch_size: 4,
            lambda1: 0.2,
            lambda2: 0.2,
            tau: 0.07,
            theta: 0.5,
            ablation: Ablation::Full,
            seed: 0,
            folds: 5,
            augment: true,
            proj_dim: crate::mca::DEFAULT_PROJ_DIM,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be non-negative, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return bad(format!("betas must lie in [0, 1), got {:?}", self.betas));
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return bad(format!("loss weights must be non-negative, got {} and {}", self.lambda1, self.lambda2));
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return bad(format!("theta must lie in (0, 1), got {}", self.theta));
        }
        if self.batch_size < 2 {
            return Err(Error::BatchSize {
                got: self.batch_size,
                min: 2,
            });
        }
        if self.folds < 2 {
            return bad(format!("need at least 2 folds, got {}", self.folds));
        }
        if self.proj_dim == 0 {
            return bad("proj_dim must be positive".into());
        }
        Ok(())
    }
}

/// Derives an independent seed for a named purpose and index.
pub fn derive_seed(seed: u64, purpose: u64, index: u64) -> u64 {
    use rand::{RngCore, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((purpose << 32) | index);
    rng.next_u64()
}
