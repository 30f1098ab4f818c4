//! How much attention SL tokens draw compared with the average token.

use serde::{Deserialize, Serialize};

use super::model::TransformerModel;
use crate::corpus::{tokenize_note, Corpus};
use crate::error::Result;
use crate::lexicon::{sl_mask, SlLexicon};

/// A tokenized note with one attention score per token.
#[derive(Debug, Clone)]
pub struct ScoredNote {
    pub note_id: String,
    pub tokens: Vec<String>,
    pub token_scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoteDilution {
    pub note_id: String,
    pub token_count: usize,
    pub sl_token_count: usize,
    pub all_mean: f64,
    /// Absent when the note has no SL tokens.
    pub sl_mean: Option<f64>,
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DilutionReport {
    pub notes: Vec<NoteDilution>,
    pub token_count: usize,
    pub sl_token_count: usize,
    /// Mean score over every token in the corpus.
    pub all_mean: Option<f64>,
    /// Mean score over every SL token in the corpus.
    pub sl_mean: Option<f64>,
    pub ratio: Option<f64>,
}

fn mean(sum: f64, n: usize) -> Option<f64> {
    (n > 0).then(|| sum / n as f64)
}

pub fn dilution_from_scores(notes: &[ScoredNote], lex: &SlLexicon) -> DilutionReport {
    let mut per_note = Vec::with_capacity(notes.len());
    let (mut all_sum, mut all_n, mut sl_sum, mut sl_n) = (0.0, 0usize, 0.0, 0usize);
    for note in notes {
        let mask = sl_mask(&note.tokens, lex);
        let n_all = note.token_scores.len();
        let note_all: f64 = note.token_scores.iter().sum();
        let (note_sl, n_sl) = note
            .token_scores
            .iter()
            .zip(&mask)
            .filter(|(_, &m)| m)
            .fold((0.0, 0usize), |(s, n), (v, _)| (s + v, n + 1));
        all_sum += note_all;
        all_n += n_all;
        sl_sum += note_sl;
        sl_n += n_sl;
        let all_mean = mean(note_all, n_all).unwrap_or(0.0);
        let sl_mean = mean(note_sl, n_sl);
        per_note.push(NoteDilution {
            note_id: note.note_id.clone(),
            token_count: n_all,
            sl_token_count: n_sl,
            all_mean,
            sl_mean,
            ratio: sl_mean.filter(|_| all_mean > 0.0).map(|s| s / all_mean),
        });
    }
    let all_mean = mean(all_sum, all_n);
    let sl_mean = mean(sl_sum, sl_n);
    let ratio = match (sl_mean, all_mean) {
        (Some(s), Some(a)) if a > 0.0 => Some(s / a),
        _ => None,
    };
    DilutionReport {
        notes: per_note,
        token_count: all_n,
        sl_token_count: sl_n,
        all_mean,
        sl_mean,
        ratio,
    }
}

/// Runs the model over every non-empty note and summarizes attention on SL tokens.
pub fn attention_dilution_report(model: &TransformerModel, corpus: &Corpus, lex: &SlLexicon) -> Result<DilutionReport> {
    let mut scored = Vec::with_capacity(corpus.len());
    for note in &corpus.notes {
        let tokens = tokenize_note(note);
        if tokens.is_empty() {
            continue;
        }
        let prediction = model.predict(&tokens)?;
        scored.push(ScoredNote {
            note_id: note.note_id.clone(),
            tokens: tokens.tokens,
            token_scores: prediction.trace.token_scores,
        });
    }
    Ok(dilution_from_scores(&scored, lex))
}
