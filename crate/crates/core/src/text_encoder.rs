//! Bidirectional recurrent text encoder: per-word features and a sentence
//! embedding for captions and concatenated QA texts.

use candle_core::{DType, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::TextBatch;
use crate::error::{Error, Result};
use crate::nn::{dropout, CellKind, Embedding, ParamStore, RecurrentCell};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextEncoderConfig {
    /// Filled in from the dataset vocabulary when models are built.
    pub vocab_size: usize,
    pub embedding_dim: usize,
    /// Per direction; word and sentence features have `2 * hidden_dim` entries.
    pub hidden_dim: usize,
    pub dropout_rate: f64,
    pub cell: CellKind,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TextEncoderConfig {
    pub fn desk() -> Self {
        Self {
            vocab_size: 0,
            embedding_dim: 64,
            hidden_dim: 64,
            dropout_rate: 0.0,
            cell: CellKind::Lstm,
        }
    }

    pub fn full() -> Self {
        Self {
            vocab_size: 0,
            embedding_dim: 300,
            hidden_dim: 128,
            dropout_rate: 0.5,
            cell: CellKind::Lstm,
        }
    }

    pub fn feature_dim(&self) -> usize {
        2 * self.hidden_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.embedding_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("text encoder dims must all be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config("text.dropout_rate must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Encoded text batch.
#[derive(Debug, Clone)]
pub struct TextFeatures {
    /// (B, D, T); columns at or beyond a sequence's length are zero.
    pub words: Tensor,
    /// (B, D)
    pub sentence: Tensor,
    /// (B, T), 1 for valid positions.
    pub mask: Tensor,
    pub lengths: Vec<usize>,
}

impl TextFeatures {
    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    pub fn detach(&self) -> Self {
        Self {
            words: self.words.detach(),
            sentence: self.sentence.detach(),
            mask: self.mask.clone(),
            lengths: self.lengths.clone(),
        }
    }
}

pub struct TextEncoder {
    pub config: TextEncoderConfig,
    pub store: ParamStore,
    embedding: Embedding,
    forward_cell: RecurrentCell,
    backward_cell: RecurrentCell,
}

impl TextEncoder {
    pub fn new(config: &TextEncoderConfig, dtype: DType, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(dtype);
        let embedding = Embedding::new(&mut store, "embed", config.vocab_size, config.embedding_dim, rng)?;
        let forward_cell = RecurrentCell::new(&mut store, "fwd", config.cell, config.embedding_dim, config.hidden_dim, rng)?;
        let backward_cell = RecurrentCell::new(&mut store, "bwd", config.cell, config.embedding_dim, config.hidden_dim, rng)?;
        Ok(Self {
            config: config.clone(),
            store,
            embedding,
            forward_cell,
            backward_cell,
        })
    }

    pub fn encode(&self, batch: &TextBatch) -> Result<TextFeatures> {
        self.encode_inner(batch, None)
    }

    /// Training-mode encoding with seeded embedding dropout.
    pub fn encode_train(&self, batch: &TextBatch, rng: &mut ChaCha8Rng) -> Result<TextFeatures> {
        self.encode_inner(batch, Some(rng))
    }

    fn encode_inner(&self, batch: &TextBatch, rng: Option<&mut ChaCha8Rng>) -> Result<TextFeatures> {
        if batch.is_empty() {
            return Err(Error::InvalidInput("empty text batch".into()));
        }
        let vocab = self.config.vocab_size as u32;
        if let Some(bad) = batch.ids.iter().flatten().find(|&&id| id >= vocab) {
            return Err(Error::InvalidInput(format!(
                "token id {bad} out of range for vocabulary of size {vocab}"
            )));
        }
        let (ids, mask) = batch.tensors(self.store.dtype())?;
        let mut x = self.embedding.forward(&ids)?;
        if let Some(rng) = rng {
            x = dropout(&x, self.config.dropout_rate, rng)?;
        }
        let (fwd, h_fwd) = self.forward_cell.run(&x, &mask, false)?;
        let (bwd, h_bwd) = self.backward_cell.run(&x, &mask, true)?;
        let words = Tensor::cat(&[fwd, bwd], 2)?.transpose(1, 2)?.contiguous()?;
        let sentence = Tensor::cat(&[h_fwd, h_bwd], 1)?;
        Ok(TextFeatures {
            words,
            sentence,
            mask,
            lengths: batch.lengths.clone(),
        })
    }
}
