//! Python bindings. Structured results cross the boundary as plain dicts and
//! lists (via `json.loads`), so they need no extra Python classes.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyModule;
use serde::Serialize;

use sl_audit::carenet::{self, CareGraph};
use sl_audit::corpus::{self, Split};
use sl_audit::explain::{self, StopRule};
use sl_audit::fairmetrics::{self, ConfusionCounts, ExperimentConfig};
use sl_audit::lexicon::{self, SlLexicon};
use sl_audit::synthgen::{self, SynthConfig};
use sl_audit::tinyformer::{self, Hyper, TransformerModel};

fn err(e: sl_audit::Error) -> PyErr {
    match e {
        sl_audit::Error::Io { .. } | sl_audit::Error::NonFiniteLoss { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    PyModule::import(py, "json")?.call_method1("loads", (text,))
}

fn parse<T: serde::de::DeserializeOwned + Default>(json: Option<&str>) -> PyResult<T> {
    match json {
        None => Ok(T::default()),
        Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(e.to_string())),
    }
}

#[pyclass(name = "Lexicon", module = "sl_audit_py", frozen)]
struct PyLexicon(SlLexicon);

#[pymethods]
impl PyLexicon {
    /// Default lexicon, or one read from entry/exclusion text.
    #[new]
    #[pyo3(signature = (entries=None, excluded=None))]
    fn new(entries: Option<&str>, excluded: Option<&str>) -> PyResult<Self> {
        match entries {
            None => Ok(PyLexicon(SlLexicon::default())),
            Some(e) => SlLexicon::from_text(e, excluded).map(PyLexicon).map_err(err),
        }
    }

    fn entries(&self) -> Vec<String> {
        self.0.entries().to_vec()
    }

    fn excluded(&self) -> Vec<String> {
        self.0.excluded().to_vec()
    }

    /// Matched entries in text order.
    fn detect(&self, text: &str) -> Vec<String> {
        lexicon::detect(&corpus::tokenize(text), &self.0)
            .into_iter()
            .map(|m| m.entry)
            .collect()
    }

    fn is_sl(&self, text: &str) -> bool {
        lexicon::is_sl_note(&corpus::tokenize(text), &self.0)
    }

    fn remove(&self, text: &str) -> String {
        lexicon::remove_sl_text(text, &self.0)
    }

    fn statistics<'py>(&self, py: Python<'py>, corpus: &PyCorpus) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &lexicon::sl_statistics(&corpus.0, &self.0))
    }
}

#[pyclass(name = "Corpus", module = "sl_audit_py")]
struct PyCorpus(corpus::Corpus);

#[pymethods]
impl PyCorpus {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        corpus::ingest(path).map(PyCorpus).map_err(err)
    }

    #[staticmethod]
    fn from_jsonl(text: &str) -> PyResult<Self> {
        corpus::parse_jsonl(text.as_bytes()).map(PyCorpus).map_err(err)
    }

    /// Synthetic corpus; `config` is a JSON object of generator settings.
    #[staticmethod]
    #[pyo3(signature = (config=None))]
    fn synthesize(py: Python<'_>, config: Option<&str>) -> PyResult<Self> {
        let cfg: SynthConfig = parse(config)?;
        py.detach(|| synthgen::generate(&cfg)).map(PyCorpus).map_err(err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        corpus::export(&self.0, path).map_err(err)
    }

    fn to_jsonl(&self) -> String {
        corpus::to_jsonl(&self.0)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn notes<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.0.notes)
    }

    fn groups(&self) -> Vec<String> {
        self.0.groups()
    }

    fn assign_patient_split(&mut self, test_fraction: f64, seed: u64) -> PyResult<()> {
        self.0.assign_patient_split(test_fraction, seed).map_err(err)
    }

    fn train_part(&self) -> Self {
        PyCorpus(self.0.subset(Split::Train))
    }

    fn test_part(&self) -> Self {
        PyCorpus(self.0.subset(Split::Test))
    }

    fn window(&self, horizon_hours: f64) -> PyResult<Self> {
        corpus::window_filter(&self.0, horizon_hours).map(PyCorpus).map_err(err)
    }

    fn without_sl(&self, lexicon: &PyLexicon) -> Self {
        let lex = &lexicon.0;
        PyCorpus(self.0.map_text("sl_removed", |n| lexicon::remove_sl_text(&n.text, lex)))
    }
}

#[pyclass(name = "Model", module = "sl_audit_py", frozen)]
struct PyModel(TransformerModel);

#[pymethods]
impl PyModel {
    /// Trains on every note of `corpus`; `hyper` is a JSON object.
    #[staticmethod]
    #[pyo3(signature = (corpus, seed=0, hyper=None))]
    fn train(py: Python<'_>, corpus: &PyCorpus, seed: u64, hyper: Option<&str>) -> PyResult<Self> {
        let hyper: Hyper = parse(hyper)?;
        let c = &corpus.0;
        py.detach(|| tinyformer::train(c, &hyper, seed))
            .map(PyModel)
            .map_err(err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        tinyformer::load_checkpoint(path).map(PyModel).map_err(err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        tinyformer::save_checkpoint(&self.0, path).map_err(err)
    }

    fn probability(&self, text: &str) -> PyResult<f64> {
        self.0.probability(&corpus::tokenize(text)).map_err(err)
    }

    /// Per-token attention received, paired with the tokens.
    fn attention(&self, text: &str) -> PyResult<Vec<(String, f64)>> {
        let tokens = corpus::tokenize(text);
        let p = self.0.predict(&tokens).map_err(err)?;
        Ok(tokens.tokens.into_iter().zip(p.trace.token_scores).collect())
    }

    fn training_curve<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.0.training_curve)
    }

    fn leave_one_out<'py>(&self, py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
        let tokens = corpus::tokenize(text);
        let r = py.detach(|| explain::leave_one_out(&self.0, &tokens)).map_err(err)?;
        to_py(py, &r)
    }

    #[pyo3(signature = (text, budget=None))]
    fn input_reduction<'py>(&self, py: Python<'py>, text: &str, budget: Option<usize>) -> PyResult<Bound<'py, PyAny>> {
        let tokens = corpus::tokenize(text);
        let stop = budget.map_or(StopRule::SingleToken, StopRule::Budget);
        let r = py
            .detach(|| explain::input_reduction(&self.0, &tokens, stop))
            .map_err(err)?;
        to_py(py, &r)
    }

    fn add_sentence<'py>(&self, py: Python<'py>, text: &str, sentence: &str) -> PyResult<Bound<'py, PyAny>> {
        let r = explain::add_sentence(&self.0, &corpus::tokenize(text), sentence).map_err(err)?;
        to_py(py, &r)
    }

    /// Metrics over a labelled corpus, overall and for `groups`.
    #[pyo3(signature = (corpus, groups=Vec::new()))]
    fn evaluate<'py>(&self, py: Python<'py>, corpus: &PyCorpus, groups: Vec<String>) -> PyResult<Bound<'py, PyAny>> {
        let c = &corpus.0;
        let scored: Vec<(String, u8, f64)> = py
            .detach(|| {
                c.notes
                    .iter()
                    .map(|n| {
                        let t = corpus::tokenize_note(n);
                        let p = if t.is_empty() { Ok(0.0) } else { self.0.probability(&t) };
                        p.map(|p| (n.group.clone(), n.label, p))
                    })
                    .collect::<sl_audit::Result<_>>()
            })
            .map_err(err)?;
        let mut out = serde_json::Map::new();
        let mut slices = vec![("all".to_string(), None)];
        slices.extend(groups.into_iter().map(|g| (g.clone(), Some(g))));
        for (name, group) in slices {
            let cc = ConfusionCounts::from_scores(
                scored
                    .iter()
                    .filter(|(g, _, _)| group.as_ref().is_none_or(|want| want == g))
                    .map(|(_, l, p)| (*l, *p)),
            );
            let report = fairmetrics::compute_metrics(&cc).map_err(err)?;
            out.insert(
                name,
                serde_json::to_value(report).map_err(|e| PyRuntimeError::new_err(e.to_string()))?,
            );
        }
        to_py(py, &out)
    }
}

#[pyclass(name = "CareGraph", module = "sl_audit_py", frozen)]
struct PyCareGraph(CareGraph);

#[pymethods]
impl PyCareGraph {
    #[new]
    fn new(corpus: &PyCorpus, lexicon: &PyLexicon) -> Self {
        PyCareGraph(carenet::build_graph(&corpus.0, &lexicon.0))
    }

    fn node_count(&self) -> usize {
        self.0.nodes.len()
    }

    fn edge_count(&self) -> usize {
        self.0.edges.len()
    }

    fn strengths(&self) -> Vec<(String, u64)> {
        self.0.nodes.values().map(|n| (n.id.clone(), n.strength)).collect()
    }

    /// `(central, non_central)` clinician ids.
    fn centrality_split(&self) -> PyResult<(Vec<String>, Vec<String>)> {
        let s = carenet::centrality_split(&self.0).map_err(err)?;
        Ok((s.central.into_iter().collect(), s.non_central.into_iter().collect()))
    }

    fn sl_stats<'py>(&self, py: Python<'py>, corpus: &PyCorpus, lexicon: &PyLexicon) -> PyResult<Bound<'py, PyAny>> {
        let s = carenet::centrality_sl_stats(&self.0, &corpus.0, &lexicon.0).map_err(err)?;
        to_py(py, &s)
    }

    fn central_sl_removed(&self, corpus: &PyCorpus, lexicon: &PyLexicon) -> PyResult<PyCorpus> {
        carenet::central_sl_removal(&corpus.0, &self.0, &lexicon.0)
            .map(PyCorpus)
            .map_err(err)
    }

    #[pyo3(signature = (floor=None))]
    fn to_gexf(&self, floor: Option<f64>) -> String {
        carenet::to_gexf(&self.0, floor)
    }

    #[pyo3(signature = (floor=None))]
    fn to_dot(&self, floor: Option<f64>) -> String {
        carenet::to_dot(&self.0, floor)
    }
}

#[pyfunction]
fn tokenize(text: &str) -> Vec<String> {
    corpus::tokenize(text).tokens
}

/// Metrics from confusion counts.
#[pyfunction]
#[pyo3(name = "compute_metrics")]
fn metrics<'py>(py: Python<'py>, tp: u64, fp: u64, fn_: u64, tn: u64) -> PyResult<Bound<'py, PyAny>> {
    let cc = ConfusionCounts { tp, fp, fn_, tn };
    to_py(py, &fairmetrics::compute_metrics(&cc).map_err(err)?)
}

/// Full experiment matrix; `config` is a JSON experiment config.
#[pyfunction]
#[pyo3(signature = (corpus, lexicon, config=None, jobs=None))]
fn run_experiment<'py>(
    py: Python<'py>,
    corpus: &PyCorpus,
    lexicon: &PyLexicon,
    config: Option<&str>,
    jobs: Option<usize>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg: ExperimentConfig = parse(config)?;
    let (c, lex) = (&corpus.0, &lexicon.0);
    let m = py
        .detach(|| {
            let g = carenet::build_graph(c, lex);
            fairmetrics::run_experiment_matrix(c, lex, &g, &cfg, jobs)
        })
        .map_err(err)?;
    to_py(py, &m)
}

#[pymodule]
fn sl_audit_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyLexicon>()?;
    m.add_class::<PyCorpus>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyCareGraph>()?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add("MASK_TOKEN", corpus::MASK_TOKEN)?;
    Ok(())
}
