//! Tiny vision-transformer grader and its parameter storage.

pub mod checkpoint;
mod params;
mod vit;

use std::path::Path;

pub use params::ParamSet;
pub use vit::{ForwardCache, ModelConfig, Vit, VitOutputs};

pub(crate) use params::{trunc_normal, INIT_STD};

use crate::error::Result;
use crate::numerics::Scalar;

impl<T: Scalar> Vit<T> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self.config())?;
        checkpoint::save(path, &json, self.params())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (json, params) = checkpoint::load(path)?;
        let config: ModelConfig = serde_json::from_str(&json)?;
        Vit::from_params(config, params)
    }
}
