//! Note data model, JSONL ingestion/export, preprocessing, tokenization and
//! segmentation.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::ops::Deref;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reserved mask token. Uppercase, so [`tokenize`] can never produce it.
pub const MASK_TOKEN: &str = "[MASK]";

/// Category excluded by default during preprocessing.
pub const DISCHARGE_CATEGORY: &str = "Discharge summary";

/// Default minimum note length, in whitespace-delimited words.
pub const DEFAULT_MIN_WORDS: usize = 20;

/// One clinical note. Field order is the canonical JSONL key order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Note {
    pub note_id: String,
    pub patient_id: String,
    pub clinician_ids: Vec<String>,
    pub category: String,
    pub group: String,
    pub label: u8,
    pub window_hours: f64,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    pub notes: Vec<Note>,
    pub split_assignment: BTreeMap<String, Split>,
    pub variant_tag: String,
}

impl Corpus {
    /// Builds a corpus, rejecting duplicate note ids and invalid labels.
    pub fn new(notes: Vec<Note>, variant_tag: impl Into<String>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(notes.len());
        for note in &notes {
            validate_note(note).map_err(Error::InvalidInput)?;
            if !seen.insert(note.note_id.as_str()) {
                return Err(Error::DuplicateNoteId(note.note_id.clone()));
            }
        }
        Ok(Corpus {
            notes,
            split_assignment: BTreeMap::new(),
            variant_tag: variant_tag.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.notes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.notes.is_empty()
    }

    pub fn note(&self, note_id: &str) -> Option<&Note> {
        self.notes.iter().find(|n| n.note_id == note_id)
    }

    /// Distinct group labels, sorted.
    pub fn groups(&self) -> Vec<String> {
        self.notes
            .iter()
            .map(|n| n.group.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Keeps the notes satisfying `keep`, carrying their split assignments along.
    pub fn filtered(&self, mut keep: impl FnMut(&Note) -> bool) -> Corpus {
        let notes: Vec<Note> = self.notes.iter().filter(|n| keep(n)).cloned().collect();
        let split_assignment = notes
            .iter()
            .filter_map(|n| self.split_assignment.get(&n.note_id).map(|s| (n.note_id.clone(), *s)))
            .collect();
        Corpus {
            notes,
            split_assignment,
            variant_tag: self.variant_tag.clone(),
        }
    }

    /// Rewrites every note's text, keeping ids, metadata and splits.
    pub fn map_text(&self, tag: &str, mut f: impl FnMut(&Note) -> String) -> Corpus {
        let notes = self
            .notes
            .iter()
            .map(|n| Note {
                text: f(n),
                ..n.clone()
            })
            .collect();
        Corpus {
            notes,
            split_assignment: self.split_assignment.clone(),
            variant_tag: tag.to_string(),
        }
    }

    /// Notes assigned to `split`. Unassigned notes are never returned.
    pub fn split_notes(&self, split: Split) -> Vec<&Note> {
        self.notes
            .iter()
            .filter(|n| self.split_assignment.get(&n.note_id) == Some(&split))
            .collect()
    }

    pub fn subset(&self, split: Split) -> Corpus {
        self.filtered(|n| self.split_assignment.get(&n.note_id) == Some(&split))
    }

    /// Assigns whole patients to train/test, stratified on the patient label
    /// (max over the patient's notes). Deterministic given `seed`.
    pub fn assign_patient_split(&mut self, test_fraction: f64, seed: u64) -> Result<()> {
        if !(0.0..=1.0).contains(&test_fraction) {
            return Err(Error::InvalidInput(format!(
                "test_fraction {test_fraction} outside [0, 1]"
            )));
        }
        let mut patient_label: BTreeMap<&str, u8> = BTreeMap::new();
        for n in &self.notes {
            let e = patient_label.entry(n.patient_id.as_str()).or_insert(0);
            *e = (*e).max(n.label);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut test_patients: HashSet<&str> = HashSet::new();
        for class in [0u8, 1] {
            let mut members: Vec<&str> = patient_label
                .iter()
                .filter(|(_, &l)| l == class)
                .map(|(p, _)| *p)
                .collect();
            members.shuffle(&mut rng);
            let n_test = (members.len() as f64 * test_fraction).round() as usize;
            test_patients.extend(members.into_iter().take(n_test));
        }
        self.split_assignment = self
            .notes
            .iter()
            .map(|n| {
                let split = if test_patients.contains(n.patient_id.as_str()) {
                    Split::Test
                } else {
                    Split::Train
                };
                (n.note_id.clone(), split)
            })
            .collect();
        Ok(())
    }
}

fn validate_note(note: &Note) -> std::result::Result<(), String> {
    if note.label > 1 {
        return Err(format!("label must be 0 or 1, got {}", note.label));
    }
    if !note.window_hours.is_finite() || note.window_hours < 0.0 {
        return Err(format!(
            "window_hours must be a nonnegative number, got {}",
            note.window_hours
        ));
    }
    if note.text.trim().is_empty() {
        return Err(format!("note {:?} has empty text", note.note_id));
    }
    Ok(())
}

/// Parses corpus JSONL. Blank lines are skipped; line numbers are 1-based.
pub fn parse_jsonl(reader: impl BufRead) -> Result<Corpus> {
    let mut notes = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::MalformedLine {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let note: Note = serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
            line: line_no,
            message: e.to_string(),
        })?;
        validate_note(&note).map_err(|message| Error::MalformedLine { line: line_no, message })?;
        if !seen.insert(note.note_id.clone()) {
            return Err(Error::DuplicateNoteId(note.note_id));
        }
        notes.push(note);
    }
    Ok(Corpus {
        notes,
        split_assignment: BTreeMap::new(),
        variant_tag: "original".to_string(),
    })
}

pub fn ingest(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(BufReader::new(file))
}

/// Serializes the corpus as JSONL with LF line endings.
pub fn to_jsonl(corpus: &Corpus) -> String {
    let mut out = String::new();
    for note in &corpus.notes {
        // Serializing a plain struct of strings and numbers cannot fail.
        let line = serde_json::to_string(note).expect("note serialization");
        let _ = writeln!(out, "{line}");
    }
    out
}

pub fn export(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_jsonl(corpus)).map_err(|e| Error::io(path, e))
}

/// Drops notes in excluded categories and notes shorter than `min_words`
/// whitespace-delimited words.
pub fn preprocess(corpus: &Corpus, min_words: usize, exclude_categories: &BTreeSet<String>) -> Corpus {
    corpus.filtered(|n| !exclude_categories.contains(&n.category) && n.text.split_whitespace().count() >= min_words)
}

/// [`preprocess`] with the default rules: 20 words, no discharge summaries.
pub fn preprocess_default(corpus: &Corpus) -> Corpus {
    let exclude = BTreeSet::from([DISCHARGE_CATEGORY.to_string()]);
    preprocess(corpus, DEFAULT_MIN_WORDS, &exclude)
}

/// Keeps notes written within `horizon_hours` of admission. Pass
/// `f64::INFINITY` for no filtering.
pub fn window_filter(corpus: &Corpus, horizon_hours: f64) -> Result<Corpus> {
    if horizon_hours.is_nan() || horizon_hours <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "horizon_hours must be positive, got {horizon_hours}"
        )));
    }
    Ok(corpus.filtered(|n| n.window_hours <= horizon_hours))
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenSeq {
    pub tokens: Vec<String>,
    pub origin_note_id: String,
}

impl TokenSeq {
    pub fn new(tokens: Vec<String>, origin_note_id: impl Into<String>) -> Self {
        TokenSeq {
            tokens,
            origin_note_id: origin_note_id.into(),
        }
    }

    pub fn from_strs(tokens: &[&str]) -> Self {
        TokenSeq::new(tokens.iter().map(|t| t.to_string()).collect(), "")
    }

    pub fn join(&self) -> String {
        self.tokens.join(" ")
    }
}

impl Deref for TokenSeq {
    type Target = [String];

    fn deref(&self) -> &[String] {
        &self.tokens
    }
}

fn is_punct(c: char) -> bool {
    !c.is_alphanumeric() && !c.is_whitespace()
}

/// Lowercases and splits text into word and punctuation tokens. De-identification
/// placeholders (`[** ... **]`) survive as single tokens.
pub fn tokenize(text: &str) -> TokenSeq {
    let lower = text.to_lowercase();
    let mut tokens = Vec::new();
    let mut word = String::new();
    let mut pos = 0;
    while pos < lower.len() {
        let rest = &lower[pos..];
        if let Some(inner) = rest.strip_prefix("[**") {
            if let Some(end) = inner.find("**]") {
                flush(&mut word, &mut tokens);
                let len = 3 + end + 3;
                tokens.push(rest[..len].to_string());
                pos += len;
                continue;
            }
        }
        let c = rest.chars().next().expect("non-empty remainder");
        if c.is_whitespace() {
            flush(&mut word, &mut tokens);
        } else if is_punct(c) {
            flush(&mut word, &mut tokens);
            tokens.push(c.to_string());
        } else {
            word.push(c);
        }
        pos += c.len_utf8();
    }
    flush(&mut word, &mut tokens);
    TokenSeq::new(tokens, "")
}

fn flush(word: &mut String, tokens: &mut Vec<String>) {
    if !word.is_empty() {
        tokens.push(std::mem::take(word));
    }
}

pub fn tokenize_note(note: &Note) -> TokenSeq {
    let mut seq = tokenize(&note.text);
    seq.origin_note_id = note.note_id.clone();
    seq
}

/// Splits into contiguous chunks of at most `max_len` tokens.
pub fn segment(tokens: &TokenSeq, max_len: usize) -> Result<Vec<TokenSeq>> {
    if max_len == 0 {
        return Err(Error::InvalidInput("max_len must be at least 1".into()));
    }
    Ok(tokens
        .tokens
        .chunks(max_len)
        .map(|c| TokenSeq::new(c.to_vec(), tokens.origin_note_id.clone()))
        .collect())
}
