use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tokenizer::VOCAB_SIZE;

/// Architecture of the decoder-only transformer.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    /// MLP hidden width as a multiple of `d_model`.
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    pub seed: u64,
}

fn default_mlp_ratio() -> usize {
    4
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: VOCAB_SIZE,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            max_seq_len: 128,
            mlp_ratio: 4,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < VOCAB_SIZE {
            return Err(Error::Config(format!("vocab_size must be at least {VOCAB_SIZE}")));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers < 2 {
            return Err(Error::Config("n_layers must be at least 2".into()));
        }
        if self.max_seq_len == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("max_seq_len and mlp_ratio must be positive".into()));
        }
        Ok(())
    }

    pub fn d_ff(&self) -> usize {
        self.d_model * self.mlp_ratio
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).into()
    }

    pub fn digest_hex(&self) -> String {
        hex::encode(self.digest())
    }
}
