//! Perturbation-based explanations: leave-one-out masking, input reduction
//! and appended adversarial sentences, per note and over a test set.

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, tokenize_note, Corpus, TokenSeq, MASK_TOKEN};
use crate::error::{Error, Result};
use crate::fairmetrics::{
    compute_metrics, csv_err, finish_csv, fmt6, racial_gap, ConfusionCounts, MetricValues, MetricsReport,
};
use crate::lexicon::{detect, remove_random_nonsl, remove_sl, sl_mask, SlLexicon};
use crate::tinyformer::TransformerModel;

/// A black-box probability model over token sequences.
pub trait Scorer: Sync {
    fn score(&self, tokens: &[String]) -> Result<f64>;
}

impl Scorer for TransformerModel {
    fn score(&self, tokens: &[String]) -> Result<f64> {
        self.probability(tokens)
    }
}

impl<S: Scorer + ?Sized> Scorer for &S {
    fn score(&self, tokens: &[String]) -> Result<f64> {
        (**self).score(tokens)
    }
}

/// Scores and checks the result lies in [0, 1].
pub fn checked_score(s: &dyn Scorer, tokens: &[String]) -> Result<f64> {
    let p = s.score(tokens)?;
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidInput(format!("scorer returned {p}, outside [0, 1]")));
    }
    Ok(p)
}

/// Fixed probabilities keyed by the space-joined token sequence.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ReplayScorer {
    table: HashMap<String, f64>,
}

impl ReplayScorer {
    pub fn new() -> Self {
        ReplayScorer::default()
    }

    pub fn insert(&mut self, tokens: &[String], probability: f64) {
        self.table.insert(tokens.join(" "), probability);
    }

    /// Keys are tokenized first, so raw sentences work as keys.
    pub fn insert_text(&mut self, text: &str, probability: f64) {
        self.insert(&tokenize(text), probability);
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl Scorer for ReplayScorer {
    fn score(&self, tokens: &[String]) -> Result<f64> {
        let key = tokens.join(" ");
        self.table.get(&key).copied().ok_or(Error::ReplayMiss(key))
    }
}

/// Wraps a closure as a scorer.
pub struct FnScorer<F>(pub F);

impl<F: Fn(&[String]) -> f64 + Sync> Scorer for FnScorer<F> {
    fn score(&self, tokens: &[String]) -> Result<f64> {
        Ok((self.0)(tokens))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenImportance {
    pub token: String,
    pub position: usize,
    pub masked_probability: f64,
    /// masked - original
    pub delta: f64,
    /// original - masked
    pub drop: f64,
    /// 1 is the token whose masking lowers the probability most.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub original_probability: f64,
    /// In position order.
    pub tokens: Vec<TokenImportance>,
    /// Positions in rank order.
    pub ranking: Vec<usize>,
}

impl ImportanceReport {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["position", "token", "masked_probability", "delta", "drop", "rank"])
            .map_err(csv_err)?;
        for t in &self.tokens {
            w.write_record([
                t.position.to_string(),
                t.token.clone(),
                fmt6(t.masked_probability),
                fmt6(t.delta),
                fmt6(t.drop),
                t.rank.to_string(),
            ])
            .map_err(csv_err)?;
        }
        finish_csv(w)
    }
}

pub fn mask_at(tokens: &[String], position: usize) -> Vec<String> {
    let mut masked = tokens.to_vec();
    masked[position] = MASK_TOKEN.to_string();
    masked
}

/// Masks every position in turn.
pub fn leave_one_out(s: &dyn Scorer, t: &[String]) -> Result<ImportanceReport> {
    let all: Vec<usize> = (0..t.len()).collect();
    leave_one_out_at(s, t, &all)
}

/// Leave-one-out restricted to `positions`; ranks are among those positions.
pub fn leave_one_out_at(s: &dyn Scorer, t: &[String], positions: &[usize]) -> Result<ImportanceReport> {
    if t.is_empty() {
        return Err(Error::InvalidInput("leave-one-out needs at least one token".into()));
    }
    let mut seen = vec![false; t.len()];
    for &p in positions {
        if p >= t.len() || std::mem::replace(&mut seen[p], true) {
            return Err(Error::InvalidInput(format!("position {p} is out of range or repeated")));
        }
    }
    let original = checked_score(s, t)?;
    let mut tokens = Vec::with_capacity(positions.len());
    for &position in positions {
        let masked_probability = checked_score(s, &mask_at(t, position)).map_err(|e| Error::ScorerAt {
            position,
            source: Box::new(e),
        })?;
        tokens.push(TokenImportance {
            token: t[position].clone(),
            position,
            masked_probability,
            delta: masked_probability - original,
            drop: original - masked_probability,
            rank: 0,
        });
    }
    tokens.sort_by_key(|ti| ti.position);
    let mut order: Vec<usize> = (0..tokens.len()).collect();
    order.sort_by(|&a, &b| {
        tokens[a]
            .delta
            .total_cmp(&tokens[b].delta)
            .then(tokens[a].position.cmp(&tokens[b].position))
    });
    for (rank, &i) in order.iter().enumerate() {
        tokens[i].rank = rank + 1;
    }
    Ok(ImportanceReport {
        original_probability: original,
        ranking: order.iter().map(|&i| tokens[i].position).collect(),
        tokens,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopRule {
    /// Stop after this many deletions (or at one token).
    Budget(usize),
    /// Delete until one token remains.
    SingleToken,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReductionStep {
    pub removed_token: String,
    /// Position in the sequence before this deletion.
    pub removed_position: usize,
    pub probability: f64,
    pub remaining: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReductionTrace {
    pub original_probability: f64,
    pub steps: Vec<ReductionStep>,
}

impl ReductionTrace {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["step", "removed_token", "removed_position", "probability", "remaining"])
            .map_err(csv_err)?;
        w.write_record(["0", "", "", &fmt6(self.original_probability), ""])
            .map_err(csv_err)?;
        for (i, s) in self.steps.iter().enumerate() {
            w.write_record([
                (i + 1).to_string(),
                s.removed_token.clone(),
                s.removed_position.to_string(),
                fmt6(s.probability),
                s.remaining.join(" "),
            ])
            .map_err(csv_err)?;
        }
        finish_csv(w)
    }
}

/// Repeatedly deletes the least important token (largest leave-one-out
/// delta; ties go to the rightmost) and records the new probability.
pub fn input_reduction(s: &dyn Scorer, t: &[String], stop: StopRule) -> Result<ReductionTrace> {
    if t.len() < 2 {
        return Err(Error::InvalidInput("input reduction needs at least two tokens".into()));
    }
    let budget = match stop {
        StopRule::Budget(k) => k.min(t.len() - 1),
        StopRule::SingleToken => t.len() - 1,
    };
    let original_probability = checked_score(s, t)?;
    let mut current = t.to_vec();
    let mut steps = Vec::with_capacity(budget);
    for _ in 0..budget {
        let report = leave_one_out(s, &current)?;
        let victim = report
            .tokens
            .iter()
            .max_by(|a, b| a.delta.total_cmp(&b.delta).then(a.position.cmp(&b.position)))
            .expect("nonempty sequence");
        let position = victim.position;
        let removed_token = current.remove(position);
        let probability = checked_score(s, &current)?;
        steps.push(ReductionStep {
            removed_token,
            removed_position: position,
            probability,
            remaining: current.clone(),
        });
    }
    Ok(ReductionTrace {
        original_probability,
        steps,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceEffect {
    pub tokens: Vec<String>,
    pub original_probability: f64,
    pub probability: f64,
    /// probability - original, as a fraction.
    pub delta: f64,
}

pub fn append_sentence(t: &[String], sentence: &str) -> Vec<String> {
    let mut out = t.to_vec();
    out.extend(tokenize(sentence).tokens);
    out
}

/// Appends `tokenize(sentence)` and rescores.
pub fn add_sentence(s: &dyn Scorer, t: &[String], sentence: &str) -> Result<SentenceEffect> {
    let original_probability = checked_score(s, t)?;
    let tokens = append_sentence(t, sentence);
    let probability = checked_score(s, &tokens)?;
    Ok(SentenceEffect {
        tokens,
        original_probability,
        probability,
        delta: probability - original_probability,
    })
}

pub const DEFAULT_SENTENCES: [&str; 5] = [
    "Pt is a Caucasian.",
    "Pt is an African American.",
    "Pt has a history of drug abuse.",
    "Pt is a Caucasian and has a history of drug abuse.",
    "Pt is an African American and has a history of drug abuse.",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub condition: String,
    pub metrics: MetricsReport,
    /// Change against the first row, percentage points.
    pub delta_pp: MetricValues,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub sample_count: usize,
    /// Set when no sample qualified; `rows` is then empty.
    pub empty: bool,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    fn from_rows(sample_count: usize, rows: Vec<(String, MetricsReport)>) -> Self {
        let base = rows.first().map(|(_, m)| *m);
        let rows = rows
            .into_iter()
            .map(|(condition, metrics)| ComparisonRow {
                delta_pp: base.map(|b| racial_gap(&b, &metrics)).unwrap_or_default(),
                condition,
                metrics,
            })
            .collect();
        ComparisonTable {
            sample_count,
            empty: false,
            rows,
        }
    }

    fn empty() -> Self {
        ComparisonTable {
            sample_count: 0,
            empty: true,
            rows: Vec::new(),
        }
    }

    pub fn row(&self, condition: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.condition == condition)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "condition",
            "accuracy",
            "precision",
            "recall",
            "recall_delta_pp",
            "recall_positive",
            "recall_positive_delta_pp",
            "f1",
            "f1_delta_pp",
        ])
        .map_err(csv_err)?;
        for r in &self.rows {
            let m = &r.metrics;
            w.write_record([
                r.condition.clone(),
                fmt6(m.accuracy),
                fmt6(m.precision),
                fmt6(m.recall),
                fmt6(r.delta_pp.recall),
                fmt6(m.recall_positive),
                fmt6(r.delta_pp.recall_positive),
                fmt6(m.f1),
                fmt6(r.delta_pp.f1),
            ])
            .map_err(csv_err)?;
        }
        finish_csv(w)
    }
}

/// Scores a sequence; an empty one (everything removed) counts as 0.
fn score_or_zero(s: &dyn Scorer, tokens: &[String]) -> Result<f64> {
    if tokens.is_empty() {
        Ok(0.0)
    } else {
        checked_score(s, tokens)
    }
}

fn mean_report(reports: &[MetricsReport]) -> MetricsReport {
    let values: Vec<MetricValues> = reports.iter().map(MetricValues::from).collect();
    let m = MetricValues::mean(&values);
    let n = reports.len().max(1) as f64;
    MetricsReport {
        accuracy: m.accuracy,
        precision: m.precision,
        recall: m.recall,
        recall_positive: m.recall_positive,
        recall_negative: reports.iter().map(|r| r.recall_negative).sum::<f64>() / n,
        f1: m.f1,
        precision_defined: reports.iter().all(|r| r.precision_defined),
        recall_positive_defined: reports.iter().all(|r| r.recall_positive_defined),
        recall_negative_defined: reports.iter().all(|r| r.recall_negative_defined),
        counts: reports.first().map(|r| r.counts).unwrap_or_default(),
    }
}

/// FNV-1a over the note id, mixed with the repetition and seed.
fn sample_seed(note_id: &str, rep: usize, seed: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in note_id
        .bytes()
        .chain((rep as u64).to_le_bytes())
        .chain(seed.to_le_bytes())
    {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

struct SampleOutcome {
    label: u8,
    original: f64,
    sl_removed: f64,
    random: Vec<f64>,
}

/// Compares the original notes, SL-removed notes and `random_reps` draws of
/// equal-count random non-SL removal, over the SL-containing samples only.
/// The random row averages each metric over the repetitions.
pub fn global_leave_one_out(
    s: &dyn Scorer,
    test: &Corpus,
    lex: &SlLexicon,
    random_reps: usize,
    seed: u64,
) -> Result<ComparisonTable> {
    if test.is_empty() {
        return Err(Error::InvalidInput("test corpus is empty".into()));
    }
    let mut samples: Vec<(&str, u8, TokenSeq)> = test
        .notes
        .iter()
        .map(|n| (n.note_id.as_str(), n.label, tokenize_note(n)))
        .filter(|(_, _, t)| !detect(t, lex).is_empty())
        .collect();
    if samples.is_empty() {
        return Ok(ComparisonTable::empty());
    }
    samples.sort_by(|a, b| a.0.cmp(b.0));
    let outcomes: Vec<SampleOutcome> = samples
        .par_iter()
        .map(|(id, label, t)| {
            let stripped = remove_sl(t, lex);
            let available = sl_mask(t, lex).iter().filter(|m| !**m).count();
            let n = (t.len() - stripped.len()).min(available);
            let random = (0..random_reps)
                .map(|rep| {
                    let reduced = remove_random_nonsl(t, n, sample_seed(id, rep, seed), lex)?;
                    score_or_zero(s, &reduced)
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok(SampleOutcome {
                label: *label,
                original: score_or_zero(s, t)?,
                sl_removed: score_or_zero(s, &stripped)?,
                random,
            })
        })
        .collect::<Result<_>>()?;

    let report = |pick: &dyn Fn(&SampleOutcome) -> f64| {
        compute_metrics(&ConfusionCounts::from_scores(
            outcomes.iter().map(|o| (o.label, pick(o))),
        ))
    };
    let mut rows = vec![
        ("original".to_string(), report(&|o| o.original)?),
        ("sl_removed".to_string(), report(&|o| o.sl_removed)?),
    ];
    if random_reps > 0 {
        let per_rep = (0..random_reps)
            .map(|rep| report(&|o| o.random[rep]))
            .collect::<Result<Vec<_>>>()?;
        rows.push(("random_removal".to_string(), mean_report(&per_rep)));
    }
    Ok(ComparisonTable::from_rows(outcomes.len(), rows))
}

/// Appends each sentence to every test note and compares metrics with the
/// unmodified notes.
pub fn global_add_sentence(s: &dyn Scorer, test: &Corpus, sentences: &[String]) -> Result<ComparisonTable> {
    if test.is_empty() {
        return Err(Error::InvalidInput("test corpus is empty".into()));
    }
    let mut samples: Vec<(&str, u8, TokenSeq)> = test
        .notes
        .iter()
        .map(|n| (n.note_id.as_str(), n.label, tokenize_note(n)))
        .collect();
    samples.sort_by(|a, b| a.0.cmp(b.0));
    let scores: Vec<Vec<f64>> = samples
        .par_iter()
        .map(|(_, _, t)| {
            let mut row = vec![score_or_zero(s, t)?];
            for sentence in sentences {
                row.push(score_or_zero(s, &append_sentence(t, sentence))?);
            }
            Ok(row)
        })
        .collect::<Result<_>>()?;
    let labels: Vec<u8> = samples.iter().map(|(_, l, _)| *l).collect();
    let mut rows = Vec::with_capacity(sentences.len() + 1);
    for (col, name) in std::iter::once("original")
        .chain(sentences.iter().map(String::as_str))
        .enumerate()
    {
        let cc = ConfusionCounts::from_scores(labels.iter().zip(&scores).map(|(&l, r)| (l, r[col])));
        rows.push((name.to_string(), compute_metrics(&cc)?));
    }
    Ok(ComparisonTable::from_rows(samples.len(), rows))
}
