use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lmcore::tokenizer::VOCAB_SIZE;

/// How gate weights are normalized over the selected experts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateNormalization {
    /// Softmax over the selected logits only; gates sum to 1.
    #[default]
    SelectedSoftmax,
    /// Softmax over all logits, then unselected entries are zeroed without
    /// renormalizing.
    FullSoftmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RoutingConfig {
    #[serde(default)]
    pub gate: GateNormalization,
    /// Whether selection biases also shift the gate logits.
    #[serde(default)]
    pub bias_in_gate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// Experts per layer, the public one included.
    pub n_experts: usize,
    pub top_k: usize,
    #[serde(default)]
    pub routing: RoutingConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            hidden_dim: 128,
            n_heads: 4,
            ffn_dim: 512,
            vocab_size: VOCAB_SIZE,
            max_seq_len: 256,
            n_experts: 1,
            top_k: 1,
            routing: RoutingConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_layers", self.n_layers),
            ("hidden_dim", self.hidden_dim),
            ("n_heads", self.n_heads),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("n_experts", self.n_experts),
            ("top_k", self.top_k),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.hidden_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} is not divisible by n_heads {}",
                self.hidden_dim, self.n_heads
            )));
        }
        if self.top_k > self.n_experts {
            return Err(Error::Config(format!(
                "top_k {} exceeds n_experts {}",
                self.top_k, self.n_experts
            )));
        }
        if self.vocab_size < VOCAB_SIZE {
            return Err(Error::Config(format!("vocab_size must be at least {VOCAB_SIZE}")));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.n_heads
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_defaults_are_valid() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!((c.n_layers, c.hidden_dim, c.n_heads, c.ffn_dim), (4, 128, 4, 512));
        assert_eq!((c.vocab_size, c.max_seq_len), (259, 256));
    }

    #[test]
    fn rejects_bad_shapes() {
        let mut c = ModelConfig::default();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.top_k = 2;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
