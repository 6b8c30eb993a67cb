use phs_tensor::{Float, ParamId, ParamStore, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompt::{DeskTokenizer, TokenSequence, Tokenizer, MAX_TOKENS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TextEncoderConfig {
    /// Fixed embedding table over the prompt vocabulary plus sinusoidal
    /// positions.
    Desk { dim: usize },
    /// A CLIP-compatible encoder loaded from disk (declared, not bundled).
    Pretrained { dim: usize, weights: String },
}

impl TextEncoderConfig {
    pub fn dim(&self) -> usize {
        match self {
            TextEncoderConfig::Desk { dim } | TextEncoderConfig::Pretrained { dim, .. } => *dim,
        }
    }
}

/// Token sequences → `[n, 77, dim]` embeddings.
#[derive(Clone, Debug)]
pub struct DeskTextEncoder {
    table: ParamId,
    dim: usize,
}

impl DeskTextEncoder {
    pub const PREFIX: &'static str = "text_encoder.";

    pub fn new<T: Float, R: Rng + ?Sized>(store: &mut ParamStore<T>, tokenizer: &DeskTokenizer, dim: usize, rng: &mut R) -> Self {
        let vocab = tokenizer.vocab_size();
        let table = store.insert(format!("{}token_embedding", Self::PREFIX), Tensor::randn(&[vocab, dim], rng));
        Self { table, dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn encode<T: Float>(&self, store: &ParamStore<T>, tokens: &[TokenSequence]) -> Result<Tensor<T>> {
        let table = store.get(self.table);
        let vocab = table.shape()[0];
        let d = self.dim;
        let mut out = Tensor::zeros(&[tokens.len(), MAX_TOKENS, d]);
        let o = out.data_mut();
        for (b, seq) in tokens.iter().enumerate() {
            if seq.ids.len() != MAX_TOKENS {
                return Err(Error::InvalidArgument(format!("token sequence of length {}", seq.ids.len())));
            }
            for (p, &id) in seq.ids.iter().enumerate() {
                let id = id as usize;
                if id >= vocab {
                    return Err(Error::InvalidArgument(format!("token id {id} outside vocabulary of {vocab}")));
                }
                let row = &table.data()[id * d..(id + 1) * d];
                let dst = &mut o[(b * MAX_TOKENS + p) * d..(b * MAX_TOKENS + p + 1) * d];
                for (k, (v, &e)) in dst.iter_mut().zip(row).enumerate() {
                    let freq = (-(10000f64.ln()) * (k / 2 * 2) as f64 / d as f64).exp();
                    let angle = p as f64 * freq;
                    let pos = if k % 2 == 0 { angle.sin() } else { angle.cos() };
                    *v = e + T::lit(0.1 * pos);
                }
            }
        }
        Ok(out)
    }
}
