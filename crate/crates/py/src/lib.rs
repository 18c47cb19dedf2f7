//! Python bindings: build, train, load and query the tagger, and compute
//! attention heat maps and tag-wise contribution maps.
//!
//! Matrices cross the boundary as lists of row lists.

use std::path::PathBuf;

use attn_tagger::autodiff::{grad_check, op_case, Tensor};
use attn_tagger::dsp::{extract_window, load_wav, log_mel, resample_linear, DspConfig, ModelInput, PcmClip};
use attn_tagger::introspection::{self, ContributionMap};
use attn_tagger::model::{
    build_model, load_checkpoint, predict_tags, save_checkpoint, AttentionOverride, AttentionTensor, CheckpointError,
    Model, ModelConfig,
};
use attn_tagger::training::{self, Label, SynthSpec, TrainConfig, TAGS};
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn checkpoint_err(e: CheckpointError) -> PyErr {
    match e {
        CheckpointError::Io(m) => PyOSError::new_err(m),
        other => value_err(other),
    }
}

fn matrix(rows: &[Vec<f32>]) -> PyResult<(Vec<f32>, usize, usize)> {
    let n_rows = rows.len();
    let n_cols = rows.first().map_or(0, Vec::len);
    if n_rows == 0 || n_cols == 0 || rows.iter().any(|r| r.len() != n_cols) {
        return Err(value_err("expected a non-empty list of equal-length rows"));
    }
    Ok((rows.concat(), n_rows, n_cols))
}

fn to_rows(values: &[f32], cols: usize) -> Vec<Vec<f32>> {
    values.chunks(cols).map(<[f32]>::to_vec).collect()
}

fn model_input(rows: &[Vec<f32>]) -> PyResult<ModelInput> {
    let (v, n_mels, frames) = matrix(rows)?;
    ModelInput::new(v, n_mels, frames).map_err(value_err)
}

fn attention_override(rows: Option<Vec<Vec<f32>>>) -> PyResult<Option<AttentionOverride>> {
    rows.map(|rows| {
        let (v, r, c) = matrix(&rows)?;
        AttentionOverride::new(Tensor::new(vec![r, c], v).map_err(value_err)?).map_err(value_err)
    })
    .transpose()
}

/// Architecture hyperparameters; round-trips through JSON.
#[pyclass(name = "ModelConfig", module = "attn_tagger_py", frozen)]
struct PyModelConfig {
    inner: ModelConfig,
}

#[pymethods]
impl PyModelConfig {
    /// The full-size tagger: 96 mels, 256 frames, two 8-head layers.
    #[staticmethod]
    fn default() -> Self {
        Self {
            inner: ModelConfig::default(),
        }
    }

    /// A very small configuration for fast experiments.
    #[staticmethod]
    fn tiny() -> Self {
        Self {
            inner: ModelConfig::tiny(),
        }
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner: ModelConfig = serde_json::from_str(text).map_err(value_err)?;
        inner.validate().map_err(value_err)?;
        Ok(Self { inner })
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.inner).expect("config serializes")
    }

    #[getter]
    fn n_mels(&self) -> usize {
        self.inner.n_mels
    }

    #[getter]
    fn frames(&self) -> usize {
        self.inner.frames
    }

    #[getter]
    fn d_model(&self) -> usize {
        self.inner.d_model
    }

    #[getter]
    fn n_layers(&self) -> usize {
        self.inner.n_layers
    }

    #[getter]
    fn n_heads(&self) -> usize {
        self.inner.n_heads
    }

    #[getter]
    fn n_tags(&self) -> usize {
        self.inner.n_tags
    }

    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    fn __repr__(&self) -> String {
        format!("ModelConfig({})", self.to_json())
    }
}

/// Captured attention scores, layer x head x query x key.
#[pyclass(name = "Attention", module = "attn_tagger_py", frozen)]
struct PyAttention {
    inner: AttentionTensor,
}

#[pymethods]
impl PyAttention {
    #[getter]
    fn n_layers(&self) -> usize {
        self.inner.n_layers()
    }

    #[getter]
    fn n_heads(&self) -> usize {
        self.inner.n_heads()
    }

    #[getter]
    fn frames(&self) -> usize {
        self.inner.frames()
    }

    /// Score matrix of one head, rows are queries.
    fn head(&self, layer: usize, head: usize) -> PyResult<Vec<Vec<f32>>> {
        if layer >= self.inner.n_layers() || head >= self.inner.n_heads() {
            return Err(value_err(format!("no head ({layer}, {head})")));
        }
        Ok(to_rows(self.inner.head(layer, head), self.inner.frames()))
    }

    /// Last-layer attention received per key frame: `(raw, normalized)`.
    fn heatmap(&self) -> PyResult<(Vec<f32>, Vec<f32>)> {
        let h = introspection::attention_heatmap(&self.inner).map_err(value_err)?;
        Ok((h.raw, h.values))
    }
}

/// Tag-wise contribution probabilities, one row per tag.
#[pyclass(name = "ContributionMap", module = "attn_tagger_py", frozen)]
struct PyContributionMap {
    inner: ContributionMap,
}

#[pymethods]
impl PyContributionMap {
    #[getter]
    fn tags(&self) -> Vec<String> {
        self.inner.tag_names.clone()
    }

    #[getter]
    fn frames(&self) -> usize {
        self.inner.frames
    }

    fn row(&self, tag: &str) -> PyResult<Vec<f32>> {
        let k = self.inner.tag_index(tag).map_err(value_err)?;
        Ok(self.inner.row(k).to_vec())
    }

    fn logit_row(&self, tag: &str) -> PyResult<Vec<f32>> {
        let k = self.inner.tag_index(tag).map_err(value_err)?;
        Ok(self.inner.logit_row(k).to_vec())
    }

    fn to_csv(&self) -> String {
        self.inner.to_csv()
    }
}

/// A tagger: configuration plus learned parameters.
#[pyclass(name = "Model", module = "attn_tagger_py", frozen)]
struct PyModel {
    inner: Model,
}

#[pymethods]
impl PyModel {
    /// Freshly initialised model; the same seed gives the same weights.
    #[staticmethod]
    #[pyo3(signature = (config, seed = 0))]
    fn build(config: &PyModelConfig, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: build_model(&config.inner, seed).map_err(value_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_checkpoint(path).map_err(checkpoint_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.inner, path).map_err(checkpoint_err)
    }

    #[getter]
    fn config(&self) -> PyModelConfig {
        PyModelConfig {
            inner: self.inner.config().clone(),
        }
    }

    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    fn parameter_names(&self) -> Vec<String> {
        self.inner.params().keys().cloned().collect()
    }

    /// Tag probabilities and captured attention for an `n_mels x frames`
    /// input. `override` replaces every last-layer head's scores.
    #[pyo3(signature = (input, r#override = None))]
    fn predict(&self, input: Vec<Vec<f32>>, r#override: Option<Vec<Vec<f32>>>) -> PyResult<(Vec<f32>, PyAttention)> {
        let input = model_input(&input)?;
        let ov = attention_override(r#override)?;
        let (p, att) = predict_tags(&self.inner, &input, ov.as_ref()).map_err(value_err)?;
        Ok((p.probabilities, PyAttention { inner: att }))
    }

    /// One override pass per frame, every query attending to that frame.
    fn contribution(&self, input: Vec<Vec<f32>>) -> PyResult<PyContributionMap> {
        let input = model_input(&input)?;
        let inner = introspection::tagwise_contribution(&self.inner, &input).map_err(value_err)?;
        Ok(PyContributionMap { inner })
    }

    /// Contribution map of the first half of `a` followed by the first
    /// half of `b` (16 kHz mono samples).
    fn concat_probe(&self, a: Vec<f32>, b: Vec<f32>, tag_a: &str, tag_b: &str) -> PyResult<PyContributionMap> {
        let a = PcmClip::new(a, 16_000).map_err(value_err)?;
        let b = PcmClip::new(b, 16_000).map_err(value_err)?;
        let probe = introspection::concat_probe(&self.inner, &a, &b, tag_a, tag_b).map_err(value_err)?;
        Ok(PyContributionMap { inner: probe.map })
    }

    fn __repr__(&self) -> String {
        format!("Model({} parameters)", self.inner.parameter_count())
    }
}

/// Reads a PCM WAV file: `(samples, sample_rate)`, channels averaged.
#[pyfunction]
fn read_wav(path: PathBuf) -> PyResult<(Vec<f32>, u32)> {
    let clip = load_wav(path).map_err(value_err)?;
    Ok((clip.samples().to_vec(), clip.sample_rate()))
}

/// Resamples to 16 kHz and returns the first model window of the log-mel
/// spectrogram, `n_mels` rows.
#[pyfunction]
#[pyo3(signature = (samples, sample_rate, n_mels = 96))]
fn audio_to_input(samples: Vec<f32>, sample_rate: u32, n_mels: usize) -> PyResult<Vec<Vec<f32>>> {
    let cfg = DspConfig {
        n_mels,
        ..DspConfig::default()
    };
    let clip = PcmClip::new(samples, sample_rate).map_err(value_err)?;
    let clip = resample_linear(&clip, cfg.sample_rate).map_err(value_err)?;
    let spec = log_mel(&clip, &cfg).map_err(value_err)?;
    let window = extract_window(&spec, 0).map_err(value_err)?;
    Ok(to_rows(window.values(), window.frames()))
}

/// Renders a labelled synthetic clip (16 kHz). `tags` names one tag from
/// each of the four pairs.
#[pyfunction]
#[pyo3(signature = (tags, seed = 0))]
fn synth_clip(tags: Vec<String>, seed: u64) -> PyResult<Vec<f32>> {
    let label = Label::from_tags(&tags).map_err(value_err)?;
    Ok(training::synth_labeled(label, seed).clip.samples().to_vec())
}

/// Trains on a freshly rendered synthetic corpus. Returns the best-valid
/// model, `(epoch, train_loss, valid_loss)` rows and per-tag test AUCs.
#[pyfunction]
#[pyo3(signature = (config, n_clips = 2000, epochs = 15, seed = 0, learning_rate = 1e-3))]
#[allow(clippy::type_complexity)]
fn train_synthetic(
    config: &PyModelConfig,
    n_clips: usize,
    epochs: usize,
    seed: u64,
    learning_rate: f32,
) -> PyResult<(PyModel, Vec<(usize, f32, f32)>, Vec<Option<f64>>)> {
    let data = training::make_dataset(&SynthSpec {
        n_clips,
        seed,
        ..SynthSpec::default()
    })
    .map_err(value_err)?;
    let init = build_model(&config.inner, seed).map_err(value_err)?;
    let cfg = TrainConfig {
        epochs,
        learning_rate,
        seed,
        ..TrainConfig::default()
    };
    let out = training::train(&init, &data, &cfg).map_err(value_err)?;
    let auc = training::evaluate_auc(&out.model, &data).map_err(value_err)?;
    let history = out.history.iter().map(|r| (r.epoch, r.train_loss, r.valid_loss)).collect();
    Ok((PyModel { inner: out.model }, history, auc))
}

/// Area under the ROC curve; `None` when one class is absent.
#[pyfunction]
fn roc_auc(scores: Vec<f32>, labels: Vec<bool>) -> PyResult<Option<f64>> {
    if scores.len() != labels.len() {
        return Err(value_err("scores and labels differ in length"));
    }
    Ok(training::roc_auc(&scores, &labels))
}

/// Worst relative gradient error for one catalog op on a seeded graph.
#[pyfunction]
#[pyo3(signature = (op, seed = 0, eps = 1e-3))]
fn grad_check_op(op: &str, seed: u64, eps: f32) -> PyResult<f32> {
    let (mut g, loss) = op_case(op, seed).ok_or_else(|| value_err(format!("unknown op {op}")))?;
    grad_check(&mut g, loss, eps, seed).map_err(value_err)
}

#[pymodule]
fn attn_tagger_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModelConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyAttention>()?;
    m.add_class::<PyContributionMap>()?;
    m.add_function(wrap_pyfunction!(read_wav, m)?)?;
    m.add_function(wrap_pyfunction!(audio_to_input, m)?)?;
    m.add_function(wrap_pyfunction!(synth_clip, m)?)?;
    m.add_function(wrap_pyfunction!(train_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check_op, m)?)?;
    m.add("TAGS", TAGS.to_vec())?;
    m.add("CATALOG_OPS", attn_tagger::autodiff::CATALOG_OPS.to_vec())?;
    Ok(())
}
