use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape hyper-parameters of a [`super::TinyModel`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub context_len: usize,
    pub seed: u32,
}

impl ModelConfig {
    /// The reference victim: 2 layers, 4 heads, width 64, gated MLP of 128.
    pub fn reference(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            context_len: 64,
            seed: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Input(format!("{name} must be at least 1")));
        }
        if self.context_len < 2 {
            return Err(Error::Input("context_len must be at least 2".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Input(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}
