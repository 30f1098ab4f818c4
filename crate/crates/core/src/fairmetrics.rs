//! Classification metrics, group slices, racial gaps and the training/removal
//! experiment matrix.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::ops::Add;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::carenet::{central_sl_removal, CareGraph};
use crate::corpus::{tokenize_note, window_filter, Corpus, Split};
use crate::error::{Error, Result};
use crate::lexicon::{remove_sl_text, SlLexicon};
use crate::tinyformer::{at_risk, train, Hyper};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn record(&mut self, label: u8, predicted: bool) {
        match (label == 1, predicted) {
            (true, true) => self.tp += 1,
            (false, true) => self.fp += 1,
            (true, false) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    /// Counts from `(label, probability)` pairs at the fixed threshold.
    pub fn from_scores(scores: impl IntoIterator<Item = (u8, f64)>) -> Self {
        let mut cc = ConfusionCounts::default();
        for (label, p) in scores {
            cc.record(label, at_risk(p));
        }
        cc
    }
}

impl Add for ConfusionCounts {
    type Output = ConfusionCounts;

    fn add(self, o: ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

/// All rates are fractions in [0, 1]. A rate whose denominator is zero is
/// reported as 0 with its `*_defined` flag cleared.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    /// Macro average of the positive- and negative-class recalls.
    pub recall: f64,
    pub recall_positive: f64,
    pub recall_negative: f64,
    /// Harmonic mean of `precision` and `recall_positive`.
    pub f1: f64,
    pub precision_defined: bool,
    pub recall_positive_defined: bool,
    pub recall_negative_defined: bool,
    pub counts: ConfusionCounts,
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, false)
    } else {
        (num as f64 / den as f64, true)
    }
}

pub fn compute_metrics(cc: &ConfusionCounts) -> Result<MetricsReport> {
    let total = cc.total();
    if total == 0 {
        return Err(Error::EmptyCounts);
    }
    let (precision, precision_defined) = ratio(cc.tp, cc.tp + cc.fp);
    let (recall_positive, recall_positive_defined) = ratio(cc.tp, cc.tp + cc.fn_);
    let (recall_negative, recall_negative_defined) = ratio(cc.tn, cc.tn + cc.fp);
    let f1 = if precision + recall_positive > 0.0 {
        2.0 * precision * recall_positive / (precision + recall_positive)
    } else {
        0.0
    };
    Ok(MetricsReport {
        accuracy: (cc.tp + cc.tn) as f64 / total as f64,
        precision,
        recall: (recall_positive + recall_negative) / 2.0,
        recall_positive,
        recall_negative,
        f1,
        precision_defined,
        recall_positive_defined,
        recall_negative_defined,
        counts: *cc,
    })
}

/// The five headline metrics, as fractions or (for gaps) percentage points.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub recall_positive: f64,
    pub f1: f64,
}

impl MetricValues {
    fn zip(self, o: MetricValues, f: impl Fn(f64, f64) -> f64) -> MetricValues {
        MetricValues {
            accuracy: f(self.accuracy, o.accuracy),
            precision: f(self.precision, o.precision),
            recall: f(self.recall, o.recall),
            recall_positive: f(self.recall_positive, o.recall_positive),
            f1: f(self.f1, o.f1),
        }
    }

    fn scale(self, k: f64) -> MetricValues {
        self.zip(self, |a, _| a * k)
    }

    pub fn mean(values: &[MetricValues]) -> MetricValues {
        let sum = values
            .iter()
            .fold(MetricValues::default(), |acc, v| acc.zip(*v, |a, b| a + b));
        sum.scale(1.0 / values.len().max(1) as f64)
    }
}

impl From<&MetricsReport> for MetricValues {
    fn from(m: &MetricsReport) -> Self {
        MetricValues {
            accuracy: m.accuracy,
            precision: m.precision,
            recall: m.recall,
            recall_positive: m.recall_positive,
            f1: m.f1,
        }
    }
}

/// `b - a` for every metric, in percentage points.
pub fn racial_gap(a: &MetricsReport, b: &MetricsReport) -> MetricValues {
    MetricValues::from(b).zip(MetricValues::from(a), |x, y| (x - y) * 100.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NotePrediction {
    pub note_id: String,
    pub probability: f64,
}

/// Confusion counts over the predictions whose notes belong to `group`.
/// An empty slice is an error unless `allow_empty` is set.
pub fn group_slice(
    predictions: &[NotePrediction],
    corpus: &Corpus,
    group: &str,
    allow_empty: bool,
) -> Result<ConfusionCounts> {
    let known = corpus.groups();
    if !known.iter().any(|g| g == group) {
        return Err(Error::UnknownGroup {
            group: group.to_string(),
            known,
        });
    }
    let by_id: HashMap<&str, (&str, u8)> = corpus
        .notes
        .iter()
        .map(|n| (n.note_id.as_str(), (n.group.as_str(), n.label)))
        .collect();
    let mut cc = ConfusionCounts::default();
    for p in predictions {
        let &(g, label) = by_id
            .get(p.note_id.as_str())
            .ok_or_else(|| Error::MissingMetadata(format!("prediction for unknown note {:?}", p.note_id)))?;
        if g == group {
            cc.record(label, at_risk(p.probability));
        }
    }
    if cc.total() == 0 && !allow_empty {
        return Err(Error::EmptySlice(group.to_string()));
    }
    Ok(cc)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Window {
    Full,
    Hours(f64),
}

impl fmt::Display for Window {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Window::Full => f.write_str("full"),
            Window::Hours(h) => write!(f, "{h}h"),
        }
    }
}

impl FromStr for Window {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "full" {
            return Ok(Window::Full);
        }
        s.strip_suffix('h')
            .and_then(|h| h.parse::<f64>().ok())
            .filter(|h| *h > 0.0 && h.is_finite())
            .map(Window::Hours)
            .ok_or_else(|| Error::InvalidConfig(format!("window {s:?} is neither \"full\" nor like \"24h\"")))
    }
}

impl Serialize for Window {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Window {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Original,
    SlRemoved,
    CentralSlRemoved,
}

impl Variant {
    pub fn tag(&self) -> &'static str {
        match self {
            Variant::Original => "original",
            Variant::SlRemoved => "sl_removed",
            Variant::CentralSlRemoved => "central_sl_removed",
        }
    }
}

/// Minuend and subtrahend groups for gap rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapSpec {
    pub minuend: String,
    pub subtrahend: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub windows: Vec<Window>,
    pub variants: Vec<Variant>,
    pub groups: Vec<String>,
    pub gap: Option<GapSpec>,
    pub test_fraction: f64,
    pub hyper: Hyper,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            windows: vec![Window::Full, Window::Hours(24.0)],
            variants: vec![Variant::Original, Variant::SlRemoved, Variant::CentralSlRemoved],
            groups: vec!["white".into(), "black".into()],
            gap: Some(GapSpec {
                minuend: "black".into(),
                subtrahend: "white".into(),
            }),
            test_fraction: 0.2,
            hyper: Hyper::default(),
            seeds: (0..10).collect(),
        }
    }
}

pub const ALL_SLICE: &str = "all";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Setting {
    pub window: Window,
    pub variant: Variant,
    pub slice: String,
}

impl Setting {
    pub fn id(&self) -> String {
        format!("{}/{}/{}", self.window, self.variant.tag(), self.slice)
    }
}

/// Every (window, variant, slice) combination, in report order.
pub fn enumerate_settings(cfg: &ExperimentConfig) -> Vec<Setting> {
    let slices: Vec<String> = std::iter::once(ALL_SLICE.to_string())
        .chain(cfg.groups.iter().cloned())
        .collect();
    let mut out = Vec::new();
    for &window in &cfg.windows {
        for &variant in &cfg.variants {
            for slice in &slices {
                out.push(Setting {
                    window,
                    variant,
                    slice: slice.clone(),
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettingResult {
    pub id: String,
    pub setting: Setting,
    pub per_seed: Vec<SeedMetrics>,
    pub mean: MetricValues,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub window: Window,
    pub variant: Variant,
    pub minuend: String,
    pub subtrahend: String,
    /// Minuend minus subtrahend per seed, percentage points.
    pub per_seed: Vec<MetricValues>,
    pub mean: MetricValues,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentMatrix {
    pub config: ExperimentConfig,
    pub settings: Vec<SettingResult>,
    pub gaps: Vec<GapRow>,
}

impl ExperimentMatrix {
    pub fn setting(&self, id: &str) -> Option<&SettingResult> {
        self.settings.iter().find(|s| s.id == id)
    }

    pub fn gap(&self, window: Window, variant: Variant) -> Option<&GapRow> {
        self.gaps.iter().find(|g| g.window == window && g.variant == variant)
    }

    /// One row per setting with mean metrics (fractions).
    pub fn to_csv(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Row<'a> {
            setting: &'a str,
            window: String,
            variant: &'a str,
            slice: &'a str,
            seeds: usize,
            accuracy: String,
            precision: String,
            recall: String,
            recall_positive: String,
            f1: String,
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        for s in &self.settings {
            let m = &s.mean;
            w.serialize(Row {
                setting: &s.id,
                window: s.setting.window.to_string(),
                variant: s.setting.variant.tag(),
                slice: &s.setting.slice,
                seeds: s.per_seed.len(),
                accuracy: fmt6(m.accuracy),
                precision: fmt6(m.precision),
                recall: fmt6(m.recall),
                recall_positive: fmt6(m.recall_positive),
                f1: fmt6(m.f1),
            })
            .map_err(csv_err)?;
        }
        finish_csv(w)
    }

    /// One row per gap, means in percentage points.
    pub fn gaps_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "window",
            "variant",
            "gap",
            "accuracy_pp",
            "precision_pp",
            "recall_pp",
            "recall_positive_pp",
            "f1_pp",
        ])
        .map_err(csv_err)?;
        for g in &self.gaps {
            let m = &g.mean;
            w.write_record([
                g.window.to_string(),
                g.variant.tag().to_string(),
                format!("{}-{}", g.minuend, g.subtrahend),
                fmt6(m.accuracy),
                fmt6(m.precision),
                fmt6(m.recall),
                fmt6(m.recall_positive),
                fmt6(m.f1),
            ])
            .map_err(csv_err)?;
        }
        finish_csv(w)
    }

    /// One row per setting and seed.
    pub fn runs_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "setting",
            "seed",
            "tp",
            "fp",
            "fn",
            "tn",
            "accuracy",
            "precision",
            "recall",
            "recall_positive",
            "f1",
        ])
        .map_err(csv_err)?;
        for s in &self.settings {
            for r in &s.per_seed {
                let m = &r.metrics;
                let c = &m.counts;
                w.write_record([
                    s.id.clone(),
                    r.seed.to_string(),
                    c.tp.to_string(),
                    c.fp.to_string(),
                    c.fn_.to_string(),
                    c.tn.to_string(),
                    fmt6(m.accuracy),
                    fmt6(m.precision),
                    fmt6(m.recall),
                    fmt6(m.recall_positive),
                    fmt6(m.f1),
                ])
                .map_err(csv_err)?;
            }
        }
        finish_csv(w)
    }
}

pub(crate) fn fmt6(v: f64) -> String {
    format!("{v:.6}")
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::InvalidInput(format!("csv: {e}"))
}

pub(crate) fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::InvalidInput(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn check_metadata(corpus: &Corpus, cfg: &ExperimentConfig) -> Result<()> {
    let need_clinicians = cfg.variants.contains(&Variant::CentralSlRemoved);
    for n in &corpus.notes {
        if n.group.trim().is_empty() {
            return Err(Error::MissingMetadata(format!("note {:?} has no group", n.note_id)));
        }
        if need_clinicians && n.clinician_ids.is_empty() {
            return Err(Error::MissingMetadata(format!(
                "note {:?} has no clinician ids",
                n.note_id
            )));
        }
    }
    let known = corpus.groups();
    let mut wanted: Vec<&String> = cfg.groups.iter().collect();
    if let Some(gap) = &cfg.gap {
        wanted.extend([&gap.minuend, &gap.subtrahend]);
        for g in [&gap.minuend, &gap.subtrahend] {
            if !cfg.groups.contains(g) {
                return Err(Error::InvalidConfig(format!(
                    "gap group {g:?} is not among the configured groups"
                )));
            }
        }
    }
    for g in wanted {
        if !known.contains(g) {
            return Err(Error::UnknownGroup {
                group: g.clone(),
                known: known.clone(),
            });
        }
    }
    if cfg.seeds.is_empty() || cfg.windows.is_empty() || cfg.variants.is_empty() {
        return Err(Error::InvalidConfig(
            "seeds, windows and variants must be nonempty".into(),
        ));
    }
    if !(cfg.test_fraction > 0.0 && cfg.test_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "test_fraction {} must lie strictly between 0 and 1",
            cfg.test_fraction
        )));
    }
    cfg.hyper.validate()
}

/// Derives a corpus variant. The input is never modified.
pub fn derive_variant(corpus: &Corpus, variant: Variant, lex: &SlLexicon, graph: &CareGraph) -> Result<Corpus> {
    Ok(match variant {
        Variant::Original => corpus.clone(),
        Variant::SlRemoved => corpus.map_text(variant.tag(), |n| remove_sl_text(&n.text, lex)),
        Variant::CentralSlRemoved => central_sl_removal(corpus, graph, lex)?,
    })
}

struct Unit {
    window: Window,
    variant: Variant,
    seed: u64,
}

/// Test-set predictions for one trained run. Notes left without tokens are
/// scored 0.
fn run_unit(
    corpus: &Corpus,
    lex: &SlLexicon,
    graph: &CareGraph,
    cfg: &ExperimentConfig,
    unit: &Unit,
) -> Result<(Corpus, Vec<NotePrediction>)> {
    let mut split = corpus.clone();
    split.assign_patient_split(cfg.test_fraction, unit.seed)?;
    let windowed = match unit.window {
        Window::Full => split,
        Window::Hours(h) => window_filter(&split, h)?,
    };
    let variant = derive_variant(&windowed, unit.variant, lex, graph)?;
    let train_set = variant.subset(Split::Train).filtered(|n| !tokenize_note(n).is_empty());
    let test_set = variant.subset(Split::Test);
    if test_set.is_empty() {
        return Err(Error::InvalidInput(format!(
            "window {} leaves no test notes for seed {}",
            unit.window, unit.seed
        )));
    }
    let model = train(&train_set, &cfg.hyper, unit.seed)?;
    let mut preds = Vec::with_capacity(test_set.len());
    for n in &test_set.notes {
        let tokens = tokenize_note(n);
        let probability = if tokens.is_empty() {
            0.0
        } else {
            model.probability(&tokens)?
        };
        preds.push(NotePrediction {
            note_id: n.note_id.clone(),
            probability,
        });
    }
    Ok((test_set, preds))
}

/// Trains one model per (window, variant, seed), evaluates every slice on the
/// held-out patients, and aggregates means and gap rows across seeds.
/// `jobs` caps the number of concurrent training runs.
pub fn run_experiment_matrix(
    corpus: &Corpus,
    lex: &SlLexicon,
    graph: &CareGraph,
    cfg: &ExperimentConfig,
    jobs: Option<usize>,
) -> Result<ExperimentMatrix> {
    check_metadata(corpus, cfg)?;
    let settings = enumerate_settings(cfg);
    let mut units = Vec::new();
    for &window in &cfg.windows {
        for &variant in &cfg.variants {
            for &seed in &cfg.seeds {
                units.push(Unit { window, variant, seed });
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    let outcomes: Vec<Result<(Corpus, Vec<NotePrediction>)>> =
        pool.install(|| units.par_iter().map(|u| run_unit(corpus, lex, graph, cfg, u)).collect());

    // (window, variant, seed) -> slice -> metrics
    let mut by_unit: BTreeMap<(String, Variant, u64), BTreeMap<String, MetricsReport>> = BTreeMap::new();
    let key = |w: Window, v: Variant, s: u64| (w.to_string(), v, s);
    for (unit, outcome) in units.iter().zip(outcomes) {
        let (test_set, preds) = outcome?;
        let mut slices = BTreeMap::new();
        let all =
            ConfusionCounts::from_scores(preds.iter().zip(&test_set.notes).map(|(p, n)| (n.label, p.probability)));
        slices.insert(ALL_SLICE.to_string(), compute_metrics(&all)?);
        for g in &cfg.groups {
            let cc = group_slice(&preds, &test_set, g, true).or_else(|e| match e {
                Error::UnknownGroup { .. } => Ok(ConfusionCounts::default()),
                e => Err(e),
            })?;
            let m = compute_metrics(&cc)
                .map_err(|_| Error::EmptySlice(format!("{g} (window {}, seed {})", unit.window, unit.seed)))?;
            slices.insert(g.clone(), m);
        }
        by_unit.insert(key(unit.window, unit.variant, unit.seed), slices);
    }

    let results = settings
        .into_iter()
        .map(|setting| {
            let per_seed: Vec<SeedMetrics> = cfg
                .seeds
                .iter()
                .map(|&seed| SeedMetrics {
                    seed,
                    metrics: by_unit[&key(setting.window, setting.variant, seed)][&setting.slice],
                })
                .collect();
            let values: Vec<MetricValues> = per_seed.iter().map(|r| MetricValues::from(&r.metrics)).collect();
            SettingResult {
                id: setting.id(),
                setting,
                mean: MetricValues::mean(&values),
                per_seed,
            }
        })
        .collect();

    let mut gaps = Vec::new();
    if let Some(spec) = &cfg.gap {
        for &window in &cfg.windows {
            for &variant in &cfg.variants {
                let per_seed: Vec<MetricValues> = cfg
                    .seeds
                    .iter()
                    .map(|&seed| {
                        let slices = &by_unit[&key(window, variant, seed)];
                        racial_gap(&slices[&spec.subtrahend], &slices[&spec.minuend])
                    })
                    .collect();
                gaps.push(GapRow {
                    window,
                    variant,
                    minuend: spec.minuend.clone(),
                    subtrahend: spec.subtrahend.clone(),
                    mean: MetricValues::mean(&per_seed),
                    per_seed,
                });
            }
        }
    }
    Ok(ExperimentMatrix {
        config: cfg.clone(),
        settings: results,
        gaps,
    })
}
