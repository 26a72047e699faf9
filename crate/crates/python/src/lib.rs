//! Python bindings. Models run in single precision; data crosses the boundary
//! as flat lists and structured results as plain dicts.

use mftnet::data::{synth_generate, SynthSpec};
use mftnet::interpret::{
    attribute_trials, channel_scores, class_average_map, deletion_test, ChannelScores, DeletionMode,
};
use mftnet::model::{load_checkpoint, save_checkpoint};
use mftnet::training::{evaluate, train, TrainConfig};
use mftnet::{build_model, verify, Model, ModelConfig, TrialSet, Variant};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::de::DeserializeOwned;
use serde::Serialize;

create_exception!(mftnet_py, MftnetError, PyException);

fn err(e: impl std::fmt::Display) -> PyErr {
    MftnetError::new_err(e.to_string())
}

/// Converts through JSON so every serde type maps onto dicts and lists.
fn to_py<'py>(py: Python<'py>, value: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(err)?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Keyword arguments onto a serde config; unknown keys are rejected.
fn from_kwargs<T: DeserializeOwned + Default>(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<T> {
    let Some(kwargs) = kwargs else {
        return Ok(T::default());
    };
    let py = kwargs.py();
    let text: String = py
        .import("json")?
        .call_method1("dumps", (kwargs,))?
        .extract()?;
    serde_json::from_str(&text).map_err(err)
}

fn parse_variant(s: &str) -> PyResult<Variant> {
    s.parse().map_err(err)
}

fn parse_mode(s: &str) -> PyResult<DeletionMode> {
    match s {
        "most-important" | "most" => Ok(DeletionMode::MostImportant),
        "least-important" | "least" => Ok(DeletionMode::LeastImportant),
        other => Err(MftnetError::new_err(format!(
            "unknown deletion mode {other:?} (expected most-important or least-important)"
        ))),
    }
}

/// Labelled trials `[n, C, T]` of one subject and session.
#[pyclass(name = "TrialSet", module = "mftnet_py", frozen)]
struct PyTrialSet {
    inner: TrialSet,
}

#[pymethods]
impl PyTrialSet {
    /// `data` is row-major `[n, C, T]`; labels are 0 (left) or 1 (right).
    #[new]
    #[pyo3(signature = (data, labels, channels, samples, sample_rate=250.0, subject=1, session=1))]
    fn new(
        data: Vec<f32>,
        labels: Vec<u8>,
        channels: usize,
        samples: usize,
        sample_rate: f32,
        subject: u32,
        session: u32,
    ) -> PyResult<Self> {
        TrialSet::new(
            data,
            labels,
            channels,
            samples,
            sample_rate,
            subject,
            session,
        )
        .map(|inner| Self { inner })
        .map_err(err)
    }

    /// Reads an ETF file.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        TrialSet::load(path)
            .map(|inner| Self { inner })
            .map_err(err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(err)
    }

    #[getter]
    fn channels(&self) -> usize {
        self.inner.channels()
    }

    #[getter]
    fn samples(&self) -> usize {
        self.inner.samples()
    }

    #[getter]
    fn sample_rate(&self) -> f32 {
        self.inner.sample_rate()
    }

    #[getter]
    fn subject(&self) -> u32 {
        self.inner.subject()
    }

    #[getter]
    fn session(&self) -> u32 {
        self.inner.session()
    }

    #[getter]
    fn labels(&self) -> Vec<u8> {
        self.inner.labels().to_vec()
    }

    /// One trial, row-major `[C, T]`.
    fn trial(&self, i: usize) -> PyResult<Vec<f32>> {
        if i >= self.inner.len() {
            return Err(pyo3::exceptions::PyIndexError::new_err(format!(
                "trial {i} out of range for {} trials",
                self.inner.len()
            )));
        }
        Ok(self.inner.trial(i).to_vec())
    }

    fn subset(&self, indices: Vec<usize>) -> PyResult<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.inner.len()) {
            return Err(pyo3::exceptions::PyIndexError::new_err(format!(
                "trial {bad} out of range for {} trials",
                self.inner.len()
            )));
        }
        Ok(Self {
            inner: self.inner.subset(&indices),
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "TrialSet(n={}, channels={}, samples={}, subject={}, session={})",
            self.inner.len(),
            self.inner.channels(),
            self.inner.samples(),
            self.inner.subject(),
            self.inner.session()
        )
    }
}

/// The decoder or one of its ablations.
#[pyclass(name = "Model", module = "mftnet_py")]
struct PyModel {
    inner: Model<f32>,
}

impl PyModel {
    fn check_extent(&self, set: &TrialSet) -> PyResult<()> {
        let cfg = self.inner.config();
        if (set.channels(), set.samples()) != (cfg.channels, cfg.samples) {
            return Err(MftnetError::new_err(format!(
                "model expects {}x{} trials, got {}x{}",
                cfg.channels,
                cfg.samples,
                set.channels(),
                set.samples()
            )));
        }
        Ok(())
    }

    fn scores_from(&self, scores: Vec<f64>) -> PyResult<ChannelScores> {
        if scores.len() != self.inner.config().channels {
            return Err(MftnetError::new_err(format!(
                "{} scores for {} channels",
                scores.len(),
                self.inner.config().channels
            )));
        }
        Ok(ChannelScores::from_scores(scores))
    }
}

#[pymethods]
impl PyModel {
    /// Further `ModelConfig` fields may be passed as keyword arguments.
    #[new]
    #[pyo3(signature = (channels=32, samples=1000, variant="full", seed=42, **config))]
    fn new(
        channels: usize,
        samples: usize,
        variant: &str,
        seed: u64,
        config: Option<&Bound<'_, PyDict>>,
    ) -> PyResult<Self> {
        let cfg = ModelConfig {
            channels,
            samples,
            ..from_kwargs::<ModelConfig>(config)?
        }
        .with_variant(parse_variant(variant)?);
        build_model(&cfg, seed)
            .map(|inner| Self { inner })
            .map_err(err)
    }

    /// Reads an MFTW checkpoint.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        load_checkpoint(path)
            .map(|inner| Self { inner })
            .map_err(err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_checkpoint(&self.inner, path).map_err(err)
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.inner.variant().as_str()
    }

    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, self.inner.config())
    }

    /// `{"trainable", "non_trainable", "breakdown": [...]}`.
    fn parameter_count<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.count_parameters())
    }

    /// Class probabilities, one row per trial.
    #[pyo3(signature = (trials, batch_size=32))]
    fn predict_proba(
        &self,
        py: Python<'_>,
        trials: &PyTrialSet,
        batch_size: usize,
    ) -> PyResult<Vec<Vec<f64>>> {
        self.check_extent(&trials.inner)?;
        let n = self.inner.config().classes;
        let eval = py
            .detach(|| evaluate(&self.inner, &trials.inner, batch_size))
            .map_err(err)?;
        Ok(eval.probs.chunks(n).map(<[f64]>::to_vec).collect())
    }

    /// `{"loss", "accuracy", "correct"}` in inference mode.
    #[pyo3(signature = (trials, batch_size=32))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        trials: &PyTrialSet,
        batch_size: usize,
    ) -> PyResult<Bound<'py, PyDict>> {
        self.check_extent(&trials.inner)?;
        let eval = py
            .detach(|| evaluate(&self.inner, &trials.inner, batch_size))
            .map_err(err)?;
        let out = PyDict::new(py);
        out.set_item("loss", eval.loss)?;
        out.set_item("accuracy", eval.accuracy)?;
        out.set_item("correct", eval.correct)?;
        Ok(out)
    }

    /// Trains in place and returns the history. Keyword arguments are
    /// `TrainConfig` fields (epochs, batch_size, lr, seed, restore_best, ...).
    #[pyo3(signature = (train_set, val_set=None, **config))]
    fn train<'py>(
        &mut self,
        py: Python<'py>,
        train_set: &PyTrialSet,
        val_set: Option<&PyTrialSet>,
        config: Option<&Bound<'_, PyDict>>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let cfg: TrainConfig = from_kwargs(config)?;
        let model = &mut self.inner;
        let history = py
            .detach(|| train(model, &train_set.inner, val_set.map(|v| &v.inner), &cfg))
            .map_err(err)?;
        to_py(py, &history)
    }

    /// Gradient×Input maps for every trial, targeting the true class.
    /// With `correct_only`, misclassified trials are dropped.
    #[pyo3(signature = (trials, correct_only=true, batch_size=32))]
    fn attribute<'py>(
        &self,
        py: Python<'py>,
        trials: &PyTrialSet,
        correct_only: bool,
        batch_size: usize,
    ) -> PyResult<Bound<'py, PyAny>> {
        self.check_extent(&trials.inner)?;
        let maps = py.detach(|| {
            let set = &trials.inner;
            let idx: Vec<usize> = (0..set.len()).collect();
            let targets: Vec<usize> = set.labels().iter().map(|&l| l as usize).collect();
            attribute_trials(&self.inner, set, &idx, &targets, batch_size)
        });
        let mut maps = maps.map_err(err)?;
        if correct_only {
            maps.retain(|m| m.predicted == m.target);
        }
        to_py(py, &maps)
    }

    /// Per-channel mean |attribution| over correctly classified trials,
    /// `{"scores", "ranking"}`.
    #[pyo3(signature = (trials, batch_size=32))]
    fn channel_scores<'py>(
        &self,
        py: Python<'py>,
        trials: &PyTrialSet,
        batch_size: usize,
    ) -> PyResult<Bound<'py, PyAny>> {
        self.check_extent(&trials.inner)?;
        let scores = py
            .detach(|| {
                let set = &trials.inner;
                let idx: Vec<usize> = (0..set.len()).collect();
                let targets: Vec<usize> = set.labels().iter().map(|&l| l as usize).collect();
                let mut maps = attribute_trials(&self.inner, set, &idx, &targets, batch_size)?;
                maps.retain(|m| m.predicted == m.target);
                channel_scores(&maps)
            })
            .map_err(err)?;
        to_py(py, &scores)
    }

    /// Mean attribution over correctly classified trials of `class_`.
    #[pyo3(signature = (trials, class_, batch_size=32))]
    fn class_map<'py>(
        &self,
        py: Python<'py>,
        trials: &PyTrialSet,
        class_: usize,
        batch_size: usize,
    ) -> PyResult<Bound<'py, PyAny>> {
        self.check_extent(&trials.inner)?;
        let map = py
            .detach(|| class_average_map(&self.inner, &trials.inner, class_, batch_size))
            .map_err(err)?;
        to_py(py, &map)
    }

    /// True-class confidence as channels are zeroed in score order. The
    /// returned dict carries the curve plus its trapezoidal `auc`.
    #[pyo3(signature = (trials, scores, fractions, mode="most-important", class_=None, batch_size=32))]
    #[allow(clippy::too_many_arguments)]
    fn deletion_test<'py>(
        &self,
        py: Python<'py>,
        trials: &PyTrialSet,
        scores: Vec<f64>,
        fractions: Vec<f64>,
        mode: &str,
        class_: Option<usize>,
        batch_size: usize,
    ) -> PyResult<Bound<'py, PyAny>> {
        self.check_extent(&trials.inner)?;
        let scores = self.scores_from(scores)?;
        let mode = parse_mode(mode)?;
        let curve = py
            .detach(|| {
                deletion_test(
                    &self.inner,
                    &trials.inner,
                    &scores,
                    &fractions,
                    mode,
                    class_,
                    batch_size,
                )
            })
            .map_err(err)?;
        let auc = curve.auc();
        let out = to_py(py, &curve)?;
        out.set_item("auc", auc)?;
        Ok(out)
    }

    fn __repr__(&self) -> String {
        let cfg = self.inner.config();
        format!(
            "Model(variant={:?}, channels={}, samples={}, trainable={})",
            self.inner.variant().as_str(),
            cfg.channels,
            cfg.samples,
            self.inner.count_parameters().trainable
        )
    }
}

/// Planted-channel synthetic trials; returns `(trials, plants)` where plants
/// is `{"left": [...], "right": [...]}`.
#[pyfunction]
#[pyo3(signature = (n_per_class=50, channels=32, samples=1000, seed=42, snr=1.0, sample_rate=250.0, subject=1, session=1))]
#[allow(clippy::too_many_arguments)]
fn synth<'py>(
    py: Python<'py>,
    n_per_class: usize,
    channels: usize,
    samples: usize,
    seed: u64,
    snr: f64,
    sample_rate: f32,
    subject: u32,
    session: u32,
) -> PyResult<(PyTrialSet, Bound<'py, PyAny>)> {
    let (inner, plants) = synth_generate(&SynthSpec {
        n_per_class,
        channels,
        samples,
        seed,
        snr,
        sample_rate,
        subject,
        session,
    })
    .map_err(err)?;
    Ok((PyTrialSet { inner }, to_py(py, &plants)?))
}

/// Trainable parameter totals of the four variants at the given extent.
#[pyfunction]
#[pyo3(signature = (channels=32, samples=1000))]
fn parameter_counts<'py>(
    py: Python<'py>,
    channels: usize,
    samples: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let out = PyDict::new(py);
    for v in Variant::ALL {
        let cfg = ModelConfig {
            channels,
            samples,
            ..ModelConfig::default()
        }
        .with_variant(v);
        let model = build_model::<f32>(&cfg, 0).map_err(err)?;
        out.set_item(v.as_str(), model.count_parameters().trainable)?;
    }
    Ok(out)
}

/// Double-precision finite-difference checks of every layer and of each
/// model variant; one dict per check.
#[pyfunction]
#[pyo3(signature = (seed=42))]
fn gradcheck<'py>(py: Python<'py>, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let results = py
        .detach(|| verify::full_suite::<f64>(seed, verify::EPSILON))
        .map_err(err)?;
    to_py(py, &results)
}

#[pymodule]
fn mftnet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("MftnetError", m.py().get_type::<MftnetError>())?;
    m.add_class::<PyTrialSet>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(parameter_counts, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
