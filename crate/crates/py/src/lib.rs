//! Python bindings: facts, the LLM output parser, metrics, graph
//! export/import, corpus loading and the end-to-end run.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::path::PathBuf;

use llhkg::corpus::{load_hyperred_with, split_dataset as core_split, LoadOptions};
use llhkg::evaluation::{soft_scores as core_soft, strict_scores as core_strict};
use llhkg::gateway::{stub_embed as core_stub_embed, StubEmbedder};
use llhkg::hrkg::ExportFormat;
use llhkg::pipeline::{Overrides, Selection, Session};
use llhkg::{Document, HrkGraph, HyperRelationalFact, StrictMode};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyAny;

fn value_error(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn json_to_py<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(value_error)?;
    py.import("json")?.call_method1("loads", (text,))
}

/// A hyper-relational fact: (subject, relation, object) plus qualifiers.
#[pyclass(name = "Fact", module = "llhkg_py", frozen, from_py_object)]
#[derive(Clone)]
pub struct PyFact(pub HyperRelationalFact);

#[pymethods]
impl PyFact {
    #[new]
    #[pyo3(signature = (subject, relation, object, qualifiers = Vec::new()))]
    fn new(subject: &str, relation: &str, object: &str, qualifiers: Vec<(String, String)>) -> PyResult<Self> {
        HyperRelationalFact::new(subject, relation, object, qualifiers)
            .map(PyFact)
            .map_err(value_error)
    }

    #[staticmethod]
    fn parse_canonical(text: &str) -> PyResult<Self> {
        HyperRelationalFact::parse_canonical(text).map(PyFact).map_err(value_error)
    }

    #[getter]
    fn subject(&self) -> &str {
        self.0.subject()
    }

    #[getter]
    fn relation(&self) -> &str {
        self.0.relation()
    }

    #[getter]
    fn object(&self) -> &str {
        self.0.object()
    }

    #[getter]
    fn qualifiers(&self) -> Vec<(String, String)> {
        self.0
            .qualifiers()
            .iter()
            .map(|q| (q.key().to_string(), q.value().to_string()))
            .collect()
    }

    fn canonical(&self) -> String {
        self.0.canonical()
    }

    fn triple_key(&self) -> String {
        self.0.triple_key()
    }

    fn __eq__(&self, other: &Bound<'_, PyAny>) -> bool {
        other.cast::<PyFact>().is_ok_and(|o| o.get().0 == self.0)
    }

    fn __hash__(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.0.hash(&mut h);
        h.finish()
    }

    fn __repr__(&self) -> String {
        format!("Fact({:?})", self.0.canonical())
    }
}

/// A corpus document with its gold facts.
#[pyclass(name = "Document", module = "llhkg_py", frozen, from_py_object)]
#[derive(Clone)]
pub struct PyDocument(pub Document);

#[pymethods]
impl PyDocument {
    #[new]
    #[pyo3(signature = (id, text, gold = Vec::new()))]
    fn new(id: &str, text: &str, gold: Vec<PyFact>) -> Self {
        PyDocument(Document::new(id, text, gold.into_iter().map(|f| f.0).collect()))
    }

    #[getter]
    fn id(&self) -> &str {
        &self.0.id
    }

    #[getter]
    fn text(&self) -> &str {
        &self.0.text
    }

    #[getter]
    fn gold(&self) -> Vec<PyFact> {
        self.0.gold.iter().cloned().map(PyFact).collect()
    }

    fn __repr__(&self) -> String {
        format!("Document({:?}, {} gold facts)", self.0.id, self.0.gold.len())
    }
}

/// Set of facts with canonical-json and flat-tsv serializations.
#[pyclass(name = "Graph", module = "llhkg_py")]
pub struct PyGraph(HrkGraph);

fn export_format(name: &str) -> PyResult<ExportFormat> {
    name.parse().map_err(value_error)
}

#[pymethods]
impl PyGraph {
    #[new]
    #[pyo3(signature = (facts = Vec::new(), source_ids = Vec::new()))]
    fn new(facts: Vec<PyFact>, source_ids: Vec<String>) -> Self {
        let mut graph = HrkGraph::new().insert(facts.into_iter().map(|f| f.0));
        for id in source_ids {
            graph.add_source_id(id);
        }
        PyGraph(graph)
    }

    #[staticmethod]
    #[pyo3(name = "import_", signature = (data, format = "canonical-json"))]
    fn import(data: &str, format: &str) -> PyResult<Self> {
        HrkGraph::import(data.as_bytes(), export_format(format)?)
            .map(PyGraph)
            .map_err(value_error)
    }

    #[pyo3(signature = (format = "canonical-json"))]
    fn export(&self, format: &str) -> PyResult<String> {
        String::from_utf8(self.0.export(export_format(format)?)).map_err(value_error)
    }

    fn add(&mut self, facts: Vec<PyFact>) {
        self.0.extend(facts.into_iter().map(|f| f.0));
    }

    fn facts(&self) -> Vec<PyFact> {
        self.0.facts().cloned().map(PyFact).collect()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

fn unwrap_facts(facts: Vec<PyFact>) -> Vec<HyperRelationalFact> {
    facts.into_iter().map(|f| f.0).collect()
}

/// Parses raw LLM text into `(facts, diagnostics)`; raises `ValueError`
/// when no JSON array of facts can be recovered.
#[pyfunction]
fn parse_llm_output<'py>(py: Python<'py>, text: &str) -> PyResult<(Vec<PyFact>, Bound<'py, PyAny>)> {
    let parsed = llhkg::parse_llm_output(text).map_err(value_error)?;
    let diagnostics = json_to_py(py, &parsed.diagnostics)?;
    Ok((parsed.facts.into_iter().map(PyFact).collect(), diagnostics))
}

/// The offline hashed bag-of-words embedding (unit length, 256 dims).
#[pyfunction]
fn stub_embed(text: &str) -> Vec<f64> {
    core_stub_embed(text).values().to_vec()
}

/// Soft (precision, recall, f1) with the stub embedder.
#[pyfunction]
fn soft_scores(pred: Vec<PyFact>, gold: Vec<PyFact>) -> PyResult<(f64, f64, f64)> {
    let prf = core_soft(&unwrap_facts(pred), &unwrap_facts(gold), &StubEmbedder).map_err(value_error)?;
    Ok((prf.precision, prf.recall, prf.f1))
}

/// Exact-match (precision, recall, f1); `mode` is "full" or "triple".
#[pyfunction]
#[pyo3(signature = (pred, gold, mode = "full"))]
fn strict_scores(pred: Vec<PyFact>, gold: Vec<PyFact>, mode: &str) -> PyResult<(f64, f64, f64)> {
    let mode = match mode {
        "full" => StrictMode::Full,
        "triple" => StrictMode::TripleOnly,
        other => return Err(value_error(format!("unknown strict mode `{other}`"))),
    };
    let prf = core_strict(&unwrap_facts(pred), &unwrap_facts(gold), mode);
    Ok((prf.precision, prf.recall, prf.f1))
}

#[pyfunction]
#[pyo3(signature = (path, lenient = false))]
fn load_hyperred(path: PathBuf, lenient: bool) -> PyResult<Vec<PyDocument>> {
    let loaded = load_hyperred_with(&path, LoadOptions { lenient }).map_err(|e| PyIOError::new_err(e.to_string()))?;
    Ok(loaded.documents.into_iter().map(PyDocument).collect())
}

/// Seeded (train, dev, test) split.
#[pyfunction]
#[pyo3(signature = (docs, seed, fractions = (0.8, 0.1, 0.1)))]
fn split_dataset(
    docs: Vec<PyDocument>,
    seed: u64,
    fractions: (f64, f64, f64),
) -> PyResult<(Vec<PyDocument>, Vec<PyDocument>, Vec<PyDocument>)> {
    let docs: Vec<Document> = docs.into_iter().map(|d| d.0).collect();
    let split = core_split(&docs, seed, fractions).map_err(value_error)?;
    let wrap = |v: Vec<Document>| v.into_iter().map(PyDocument).collect();
    Ok((wrap(split.train), wrap(split.dev), wrap(split.test)))
}

/// Extract, correct and evaluate per the config file; returns the score
/// report as a dict.
#[pyfunction]
#[pyo3(signature = (config, mock = false, no_correct = false, limit = None))]
fn run<'py>(
    py: Python<'py>,
    config: PathBuf,
    mock: bool,
    no_correct: bool,
    limit: Option<usize>,
) -> PyResult<Bound<'py, PyAny>> {
    let overrides = Overrides {
        mock,
        no_correct,
        seed: None,
    };
    let report = py
        .detach(|| {
            let session = Session::load(&config, &overrides)?;
            let docs = session.select(&Selection {
                limit,
                ..Selection::default()
            })?;
            session.run(&docs).map(|r| r.report)
        })
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    json_to_py(py, &report)
}

#[pymodule]
pub fn llhkg_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyFact>()?;
    m.add_class::<PyDocument>()?;
    m.add_class::<PyGraph>()?;
    m.add_function(wrap_pyfunction!(parse_llm_output, m)?)?;
    m.add_function(wrap_pyfunction!(stub_embed, m)?)?;
    m.add_function(wrap_pyfunction!(soft_scores, m)?)?;
    m.add_function(wrap_pyfunction!(strict_scores, m)?)?;
    m.add_function(wrap_pyfunction!(load_hyperred, m)?)?;
    m.add_function(wrap_pyfunction!(split_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}
