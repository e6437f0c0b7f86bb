use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::{ops, Error, Result};

/// MLP nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
}

impl Activation {
    pub fn apply(self, x: &Tensor) -> Result<Tensor> {
        match self {
            Activation::Gelu => ops::gelu(x),
            Activation::Relu => Ok(x.relu()?),
        }
    }
}

/// Shape hyperparameters of a BERT-style encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub intermediate_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub max_seq_len: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl ModelConfig {
    /// A small configuration suitable for CPU training on desk-scale corpora.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            hidden_dim: 32,
            intermediate_dim: 64,
            num_blocks: 2,
            num_heads: 4,
            max_seq_len: 64,
            activation: Activation::Gelu,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("hidden_dim", self.hidden_dim),
            ("intermediate_dim", self.intermediate_dim),
            ("num_heads", self.num_heads),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.intermediate_dim <= self.hidden_dim {
            return Err(Error::Config(format!(
                "intermediate_dim {} must exceed hidden_dim {}",
                self.intermediate_dim, self.hidden_dim
            )));
        }
        Ok(())
    }
}

/// Initialization scheme recorded alongside the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitScheme {
    pub seed: u64,
    pub weight_std: f64,
}

impl InitScheme {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            weight_std: 0.02,
        }
    }
}
