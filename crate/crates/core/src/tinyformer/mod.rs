//! A small Transformer binary classifier trained from scratch.

mod attention;
mod checkpoint;
mod dilution;
mod gradcheck;
mod model;
mod train;
mod vocab;

pub use attention::{self_attention, self_attention_masked, AttentionLayer};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use dilution::{attention_dilution_report, dilution_from_scores, DilutionReport, NoteDilution, ScoredNote};
pub use gradcheck::{gradient_check, gradient_check_with, GradCheckOptions};
pub use model::{Block, Hyper, LayerNorm, TransformerModel, Weights};
pub use train::{curve_csv, train, EpochStats};
pub use vocab::{Vocab, MASK_ID, PAD_ID, PAD_TOKEN, UNK_ID, UNK_TOKEN};

use ndarray::{Array2, Axis};

use crate::corpus::TokenSeq;
use crate::error::{Error, Result};

/// Decision threshold: at risk iff the probability is strictly above it.
pub const THRESHOLD: f64 = 0.5;

pub fn at_risk(probability: f64) -> bool {
    probability > THRESHOLD
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentAttention {
    pub tokens: Vec<String>,
    /// `[layer][head]`, each an n×n row-stochastic matrix.
    pub layers: Vec<Vec<Array2<f64>>>,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub segments: Vec<SegmentAttention>,
    /// Attention received by each input token: column mean of every
    /// attention matrix, averaged over layers and heads. Sums to 1 per segment.
    pub token_scores: Vec<f64>,
}

impl AttentionTrace {
    /// Largest deviation of any attention row sum from 1.
    pub fn max_row_sum_error(&self) -> f64 {
        self.segments
            .iter()
            .flat_map(|s| s.layers.iter().flatten())
            .flat_map(|a| a.sum_axis(Axis(1)).into_iter())
            .map(|s| (s - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probability: f64,
    pub at_risk: bool,
    pub trace: AttentionTrace,
}

pub(crate) fn received_attention(layers: &[Vec<Array2<f64>>], n: usize) -> Vec<f64> {
    let mut scores = vec![0.0; n];
    let mut count = 0usize;
    for a in layers.iter().flatten() {
        for (s, col) in scores.iter_mut().zip(a.columns()) {
            *s += col.sum() / n as f64;
        }
        count += 1;
    }
    scores.iter_mut().for_each(|s| *s /= count.max(1) as f64);
    scores
}

impl TransformerModel {
    /// Scores a note; long inputs are split into `max_len` segments whose
    /// probabilities are averaged.
    pub fn predict(&self, tokens: &TokenSeq) -> Result<Prediction> {
        if tokens.is_empty() {
            return Err(Error::InvalidInput("cannot score an empty token sequence".into()));
        }
        let mut segments = Vec::new();
        let mut token_scores = Vec::with_capacity(tokens.len());
        for chunk in tokens.chunks(self.hyper.max_len) {
            let cache = self.forward(&self.vocab.encode(chunk))?;
            let layers = cache.attention();
            token_scores.extend(received_attention(&layers, chunk.len()));
            segments.push(SegmentAttention {
                tokens: chunk.to_vec(),
                layers,
                probability: model::sigmoid(cache.logit),
            });
        }
        let probability = segments.iter().map(|s| s.probability).sum::<f64>() / segments.len() as f64;
        Ok(Prediction {
            probability,
            at_risk: at_risk(probability),
            trace: AttentionTrace { segments, token_scores },
        })
    }

    /// Probability only; skips building the attention trace.
    pub fn probability(&self, tokens: &[String]) -> Result<f64> {
        if tokens.is_empty() {
            return Err(Error::InvalidInput("cannot score an empty token sequence".into()));
        }
        let mut total = 0.0;
        let mut count = 0;
        for chunk in tokens.chunks(self.hyper.max_len) {
            total += self.probability_ids(&self.vocab.encode(chunk))?;
            count += 1;
        }
        Ok(total / count as f64)
    }
}
