//! Stigmatizing-language (SL) lexicon: detection, removal and the matched
//! random-removal control.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, tokenize_note, Corpus, TokenSeq};
use crate::error::{Error, Result};

/// Default SL keywords, in source order.
pub const DEFAULT_ENTRIES: [&str; 33] = [
    "adherence",
    "nonadherent",
    "compliance",
    "unwilling",
    "abuse",
    "belligerent",
    "drug seeking",
    "abuser",
    "difficult patient",
    "refused",
    "refuses",
    "noncompliance",
    "argumentative",
    "cheat",
    "abuses",
    "malingering",
    "user",
    "secondary gain",
    "in denial",
    "refuse",
    "compliant",
    "substance abuse",
    "nonadherence",
    "degenerate",
    "drug problem",
    "combative",
    "fake",
    "been clean",
    "noncompliant",
    "addicted",
    "narcotics",
    "habit",
    "adherent",
];

/// Terms dropped from the source list because they usually describe the
/// patient's condition in ICU notes ("cardiac failure", "glycemic control").
pub const DEFAULT_EXCLUDED: [&str; 7] = [
    "fail",
    "fails",
    "failed",
    "failure",
    "control",
    "controls",
    "controlled",
];

#[derive(Debug, Clone, PartialEq)]
pub struct SlLexicon {
    entries: Vec<String>,
    excluded: Vec<String>,
    entry_tokens: Vec<Vec<String>>,
    /// First token -> entry indices, longest entry first.
    by_first: HashMap<String, Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlMatch {
    pub entry: String,
    pub start_token: usize,
    /// Inclusive.
    pub end_token: usize,
}

impl Default for SlLexicon {
    fn default() -> Self {
        SlLexicon::new(
            DEFAULT_ENTRIES.iter().map(|s| s.to_string()).collect(),
            DEFAULT_EXCLUDED.iter().map(|s| s.to_string()).collect(),
        )
        .expect("default lexicon is valid")
    }
}

impl SlLexicon {
    pub fn new(entries: Vec<String>, excluded: Vec<String>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidInput("lexicon has no entries".into()));
        }
        let mut seen = HashSet::new();
        let mut entry_tokens = Vec::with_capacity(entries.len());
        for e in &entries {
            if e.to_lowercase() != *e {
                return Err(Error::InvalidInput(format!("lexicon entry {e:?} is not lowercase")));
            }
            if !seen.insert(e.as_str()) {
                return Err(Error::InvalidInput(format!("duplicate lexicon entry {e:?}")));
            }
            let toks = tokenize(e).tokens;
            if toks.is_empty() {
                return Err(Error::InvalidInput(format!("lexicon entry {e:?} has no tokens")));
            }
            entry_tokens.push(toks);
        }
        let mut by_first: HashMap<String, Vec<usize>> = HashMap::new();
        for (i, toks) in entry_tokens.iter().enumerate() {
            by_first.entry(toks[0].clone()).or_default().push(i);
        }
        for idxs in by_first.values_mut() {
            // Longest first; equal lengths keep list order.
            idxs.sort_by_key(|&i| std::cmp::Reverse(entry_tokens[i].len()));
        }
        Ok(SlLexicon {
            entries,
            excluded,
            entry_tokens,
            by_first,
        })
    }

    /// Parses the one-entry-per-line format; `#` starts a comment.
    pub fn parse(text: &str) -> Vec<String> {
        text.lines()
            .map(|l| l.split('#').next().unwrap_or("").trim())
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect()
    }

    pub fn from_text(entries: &str, excluded: Option<&str>) -> Result<Self> {
        SlLexicon::new(Self::parse(entries), excluded.map(Self::parse).unwrap_or_default())
    }

    pub fn load(path: impl AsRef<Path>, excluded_path: Option<&Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let excluded = match excluded_path {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
            None => None,
        };
        Self::from_text(&text, excluded.as_deref())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# SL lexicon, one lowercase entry per line\n");
        for e in &self.entries {
            out.push_str(e);
            out.push('\n');
        }
        out
    }

    pub fn entries(&self) -> &[String] {
        &self.entries
    }

    pub fn excluded(&self) -> &[String] {
        &self.excluded
    }

    pub fn entry_tokens(&self) -> &[Vec<String>] {
        &self.entry_tokens
    }
}

/// Leftmost-longest, non-overlapping whole-token matches.
pub fn detect(tokens: &[String], lex: &SlLexicon) -> Vec<SlMatch> {
    let mut matches = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let hit = lex.by_first.get(&tokens[i]).and_then(|cands| {
            cands.iter().copied().find(|&e| {
                let et = &lex.entry_tokens[e];
                tokens.len() - i >= et.len() && tokens[i..i + et.len()] == et[..]
            })
        });
        match hit {
            Some(e) => {
                let len = lex.entry_tokens[e].len();
                matches.push(SlMatch {
                    entry: lex.entries[e].clone(),
                    start_token: i,
                    end_token: i + len - 1,
                });
                i += len;
            }
            None => i += 1,
        }
    }
    matches
}

pub fn is_sl_note(tokens: &[String], lex: &SlLexicon) -> bool {
    !detect(tokens, lex).is_empty()
}

/// Per-position flag: true when the token lies inside an SL match.
pub fn sl_mask(tokens: &[String], lex: &SlLexicon) -> Vec<bool> {
    let mut mask = vec![false; tokens.len()];
    for m in detect(tokens, lex) {
        mask[m.start_token..=m.end_token].iter_mut().for_each(|f| *f = true);
    }
    mask
}

/// Deletes every SL match. Repeats until no match remains, since deleting a
/// span can join its neighbours into a new phrase.
pub fn remove_sl(tokens: &TokenSeq, lex: &SlLexicon) -> TokenSeq {
    let mut current = tokens.tokens.clone();
    loop {
        let mask = sl_mask(&current, lex);
        if !mask.iter().any(|&m| m) {
            break;
        }
        current = current
            .into_iter()
            .zip(mask)
            .filter(|(_, m)| !m)
            .map(|(t, _)| t)
            .collect();
    }
    TokenSeq::new(current, tokens.origin_note_id.clone())
}

/// Text form of [`remove_sl`]. Text without SL is returned unchanged;
/// otherwise the surviving tokens are joined with single spaces.
pub fn remove_sl_text(text: &str, lex: &SlLexicon) -> String {
    let tokens = tokenize(text);
    if is_sl_note(&tokens, lex) {
        remove_sl(&tokens, lex).join()
    } else {
        text.to_string()
    }
}

fn entry_multiset(matches: &[SlMatch]) -> BTreeMap<&str, usize> {
    let mut counts = BTreeMap::new();
    for m in matches {
        *counts.entry(m.entry.as_str()).or_insert(0) += 1;
    }
    counts
}

const MAX_RESAMPLES: usize = 64;

/// Deletes `n` uniformly chosen non-SL tokens. SL tokens are never touched,
/// and draws that would create a new SL match are rejected and redrawn.
pub fn remove_random_nonsl(tokens: &TokenSeq, n: usize, seed: u64, lex: &SlLexicon) -> Result<TokenSeq> {
    let original = detect(tokens, lex);
    let mut mask = vec![false; tokens.len()];
    for m in &original {
        mask[m.start_token..=m.end_token].iter_mut().for_each(|f| *f = true);
    }
    let candidates: Vec<usize> = (0..tokens.len()).filter(|&i| !mask[i]).collect();
    if n > candidates.len() {
        return Err(Error::TooManyRemovals {
            requested: n,
            available: candidates.len(),
        });
    }
    if n == 0 {
        return Ok(tokens.clone());
    }
    let want = entry_multiset(&original);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_RESAMPLES {
        let drop: HashSet<usize> = index::sample(&mut rng, candidates.len(), n)
            .into_iter()
            .map(|k| candidates[k])
            .collect();
        let out: Vec<String> = tokens
            .iter()
            .enumerate()
            .filter(|(i, _)| !drop.contains(i))
            .map(|(_, t)| t.clone())
            .collect();
        if entry_multiset(&detect(&out, lex)) == want {
            return Ok(TokenSeq::new(out, tokens.origin_note_id.clone()));
        }
    }
    Err(Error::InvalidInput(format!(
        "could not remove {n} tokens without creating new SL matches"
    )))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlCount {
    pub notes: usize,
    pub sl_notes: usize,
    pub sl_pct: f64,
}

impl SlCount {
    fn add(&mut self, sl: bool) {
        self.notes += 1;
        self.sl_notes += sl as usize;
    }

    fn finish(&mut self) {
        self.sl_pct = pct(self.sl_notes, self.notes);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryCount {
    /// Notes containing the entry at least once.
    pub notes: usize,
    /// Percentage of all notes.
    pub note_pct: f64,
    /// Total occurrences.
    pub term_frequency: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlStatistics {
    pub overall: SlCount,
    pub by_group: BTreeMap<String, SlCount>,
    pub by_category: BTreeMap<String, SlCount>,
    pub by_entry: BTreeMap<String, EntryCount>,
}

impl SlStatistics {
    /// `b - a` SL-note percentage gap in percentage points, when both groups exist.
    pub fn group_gap_pp(&self, a: &str, b: &str) -> Option<f64> {
        Some(self.by_group.get(b)?.sl_pct - self.by_group.get(a)?.sl_pct)
    }
}

fn pct(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

pub fn sl_statistics(corpus: &Corpus, lex: &SlLexicon) -> SlStatistics {
    let empty = SlCount {
        notes: 0,
        sl_notes: 0,
        sl_pct: 0.0,
    };
    let mut overall = empty.clone();
    let mut by_group: BTreeMap<String, SlCount> = BTreeMap::new();
    let mut by_category: BTreeMap<String, SlCount> = BTreeMap::new();
    let mut by_entry: BTreeMap<String, EntryCount> = BTreeMap::new();
    for note in &corpus.notes {
        let matches = detect(&tokenize_note(note), lex);
        let sl = !matches.is_empty();
        overall.add(sl);
        by_group
            .entry(note.group.clone())
            .or_insert_with(|| empty.clone())
            .add(sl);
        by_category
            .entry(note.category.clone())
            .or_insert_with(|| empty.clone())
            .add(sl);
        for (entry, count) in entry_multiset(&matches) {
            let e = by_entry.entry(entry.to_string()).or_insert(EntryCount {
                notes: 0,
                note_pct: 0.0,
                term_frequency: 0,
            });
            e.notes += 1;
            e.term_frequency += count;
        }
    }
    overall.finish();
    by_group.values_mut().for_each(SlCount::finish);
    by_category.values_mut().for_each(SlCount::finish);
    for e in by_entry.values_mut() {
        e.note_pct = pct(e.notes, overall.notes);
    }
    SlStatistics {
        overall,
        by_group,
        by_category,
        by_entry,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(text: &str) -> TokenSeq {
        tokenize(text)
    }

    #[test]
    fn default_lexicon_shape() {
        let lex = SlLexicon::default();
        assert_eq!(lex.entries().len(), 33);
        assert_eq!(lex.excluded().len(), 7);
        for ex in DEFAULT_EXCLUDED {
            assert!(!lex.entries().iter().any(|e| e == ex));
        }
    }

    #[test]
    fn figure_one_note_is_flagged() {
        let lex = SlLexicon::default();
        let t = toks(
            "pt is a long time abuser of etoh, s/p CVA in [**2184**] w/ minimal sequelae. \
             pt has been noncompliant for years regarding medical care",
        );
        let found: Vec<String> = detect(&t, &lex).into_iter().map(|m| m.entry).collect();
        assert_eq!(found, vec!["abuser", "noncompliant"]);
        assert!(is_sl_note(&t, &lex));
    }

    #[test]
    fn excluded_terms_do_not_match() {
        let lex = SlLexicon::default();
        assert!(detect(&toks("cardiac failure , glycemic control"), &lex).is_empty());
        assert!(!is_sl_note(&toks("patient resting comfortably , vitals stable"), &lex));
    }

    #[test]
    fn phrase_wins_over_parts() {
        let lex = SlLexicon::default();
        let m = detect(&toks("pt denies drug seeking behavior"), &lex);
        assert_eq!(
            m,
            vec![SlMatch {
                entry: "drug seeking".into(),
                start_token: 2,
                end_token: 3
            }]
        );
        let m = detect(&toks("history of substance abuse"), &lex);
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].entry, "substance abuse");
    }

    #[test]
    fn remove_sl_deletes_spans() {
        let lex = SlLexicon::default();
        let out = remove_sl(&toks("He was very combative."), &lex);
        assert_eq!(out.tokens, vec!["he", "was", "very", "."]);
        let clean = toks("vitals stable overnight");
        assert_eq!(remove_sl(&clean, &lex), clean);
    }

    #[test]
    fn remove_sl_reaches_fixed_point() {
        // Deleting "abuser" joins "drug" and "seeking" into a new phrase.
        let lex = SlLexicon::default();
        let out = remove_sl(&toks("drug abuser seeking help"), &lex);
        assert!(detect(&out, &lex).is_empty());
        assert_eq!(out.tokens, vec!["help"]);
    }

    #[test]
    fn random_removal_contract() {
        let lex = SlLexicon::default();
        let t = toks("the pt was combative and refused meds again today at noon");
        assert_eq!(remove_random_nonsl(&t, 0, 1, &lex).unwrap(), t);
        let a = remove_random_nonsl(&t, 3, 42, &lex).unwrap();
        let b = remove_random_nonsl(&t, 3, 42, &lex).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), t.len() - 3);
        let entries = |s: &[String]| detect(s, &lex).into_iter().map(|m| m.entry).collect::<Vec<_>>();
        assert_eq!(entries(&a), entries(&t));
        assert!(matches!(
            remove_random_nonsl(&t, 10, 1, &lex),
            Err(Error::TooManyRemovals {
                requested: 10,
                available: 9
            })
        ));
    }

    #[test]
    fn lexicon_file_format() {
        let lex = SlLexicon::from_text("# header\nabuser\n\ndrug seeking # phrase\n", Some("fail\n")).unwrap();
        assert_eq!(lex.entries(), ["abuser", "drug seeking"]);
        assert_eq!(lex.excluded(), ["fail"]);
        assert!(SlLexicon::from_text("Abuser\n", None).is_err());
        assert!(SlLexicon::from_text("a\na\n", None).is_err());
        assert!(SlLexicon::from_text("# nothing\n", None).is_err());
        let round = SlLexicon::from_text(&SlLexicon::default().to_text(), None).unwrap();
        assert_eq!(round.entries(), SlLexicon::default().entries());
    }

    #[test]
    fn statistics_single_note() {
        use crate::corpus::Note;
        let c = Corpus::new(
            vec![Note {
                note_id: "n1".into(),
                patient_id: "p1".into(),
                clinician_ids: vec![],
                category: "Nursing".into(),
                group: "black".into(),
                label: 0,
                window_hours: 0.0,
                text: "long time abuser".into(),
            }],
            "original",
        )
        .unwrap();
        let s = sl_statistics(&c, &SlLexicon::default());
        assert_eq!(s.by_entry["abuser"].term_frequency, 1);
        assert_eq!(s.by_entry.len(), 1);
        assert_eq!(s.overall.sl_pct, 100.0);
        assert_eq!(s.by_group["black"].sl_pct, 100.0);
    }
}
