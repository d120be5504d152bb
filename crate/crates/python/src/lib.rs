//! Python bindings for the motionkey pipeline: preprocessing, the embedding
//! encoder, the reference index, and majority-vote identification.
//!
//! Build as a cdylib and import as `motionkey_py`; see python/smoke_test.py.

use std::io::BufReader;
use std::path::PathBuf;

use ndarray::Array2;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use motionkey::encoder::{Embedder, EncoderConfig, EncoderMode, EncoderModel, FeatureStats};
use motionkey::error::Error as CoreError;
use motionkey::features::{encode_bra, window_offsets};
use motionkey::identify::identify_sequence;
use motionkey::index::ReferenceIndex as CoreIndex;
use motionkey::model_io::{load_model, save_model};
use motionkey::motion::parse_recording;
use motionkey::synth::{generate_dataset, SynthSpec};

fn to_py_err(e: CoreError) -> PyErr {
    match e {
        CoreError::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// A preprocessed BRA feature sequence.
#[pyclass(name = "FeatureSequence", skip_from_py_object)]
#[derive(Clone)]
struct PyFeatureSequence {
    inner: motionkey::features::FeatureSequence,
}

#[pymethods]
impl PyFeatureSequence {
    #[getter]
    fn user_id(&self) -> &str {
        &self.inner.user_id
    }

    #[getter]
    fn session_id(&self) -> &str {
        &self.inner.session_id
    }

    #[getter]
    fn fps(&self) -> u32 {
        self.inner.fps
    }

    #[getter]
    fn encoding(&self) -> &'static str {
        self.inner.encoding.tag()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// Feature rows as a list of 18-float lists.
    fn rows(&self) -> Vec<Vec<f64>> {
        self.inner.rows.rows().into_iter().map(|r| r.to_vec()).collect()
    }
}

/// Parses a recording CSV, resamples it, and encodes BRA features.
#[pyfunction]
#[pyo3(signature = (path, user_id, session_id, target_fps = 15))]
fn load_features(
    path: PathBuf,
    user_id: &str,
    session_id: &str,
    target_fps: u32,
) -> PyResult<PyFeatureSequence> {
    let file = std::fs::File::open(&path)
        .map_err(|e| PyIOError::new_err(format!("{}: {e}", path.display())))?;
    let raw = parse_recording(BufReader::new(file), user_id, session_id).map_err(to_py_err)?;
    let features = encode_bra(&raw, target_fps).map_err(to_py_err)?;
    Ok(PyFeatureSequence { inner: features })
}

/// Writes a synthetic dataset (recordings + manifest) to `out_dir`.
#[pyfunction]
#[pyo3(signature = (out_dir, users = 4, session_minutes = vec![1.0, 0.5], fps = 15, seed = 0))]
fn synthesize_dataset(
    out_dir: PathBuf,
    users: usize,
    session_minutes: Vec<f64>,
    fps: u32,
    seed: u64,
) -> PyResult<Vec<String>> {
    let spec = SynthSpec { users, session_minutes, fps, seed, ..SynthSpec::default() };
    std::fs::create_dir_all(&out_dir).map_err(|e| PyIOError::new_err(e.to_string()))?;
    let mut written = Vec::new();
    for seq in generate_dataset(&spec).map_err(to_py_err)? {
        let name = format!("{}_s{}.csv", seq.user_id, seq.session_id);
        let mut buf = Vec::new();
        motionkey::motion::serialize_recording(&seq, &mut buf).map_err(to_py_err)?;
        std::fs::write(out_dir.join(&name), buf)
            .map_err(|e| PyIOError::new_err(e.to_string()))?;
        written.push(name);
    }
    Ok(written)
}

/// The stacked-GRU embedding encoder.
#[pyclass(name = "EncoderModel")]
struct PyEncoderModel {
    inner: EncoderModel,
}

#[pymethods]
impl PyEncoderModel {
    /// Deterministically initializes a fresh (untrained) embedding model.
    #[staticmethod]
    #[pyo3(signature = (gru_layers = 3, gru_layer_size = 450, gru_dropout = 0.28,
                        embedding_dim = 192, window_len = 500, seed = 0))]
    fn initialize(
        gru_layers: usize,
        gru_layer_size: usize,
        gru_dropout: f32,
        embedding_dim: usize,
        window_len: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let config = EncoderConfig {
            mode: EncoderMode::Embedding,
            input_dim: motionkey::features::FEATURE_DIM,
            gru_layers,
            gru_layer_size,
            gru_dropout,
            embedding_dim,
            num_classes: 0,
            window_len,
        };
        let stats = FeatureStats::identity(config.input_dim);
        let inner = EncoderModel::init(config, stats, seed).map_err(to_py_err)?;
        Ok(PyEncoderModel { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyEncoderModel { inner: load_model(&path).map_err(to_py_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_model(&self.inner, &path).map_err(to_py_err)
    }

    #[getter]
    fn window_len(&self) -> usize {
        self.inner.config.window_len
    }

    #[getter]
    fn embedding_dim(&self) -> usize {
        self.inner.config.output_dim()
    }

    /// Embeds every sliding window of the sequence at the given stride.
    #[pyo3(signature = (features, stride = 1))]
    fn embed(&self, features: &PyFeatureSequence, stride: usize) -> PyResult<Vec<Vec<f32>>> {
        let offsets = window_offsets(features.inner.len(), self.inner.config.window_len, stride);
        if offsets.is_empty() {
            return Err(PyValueError::new_err(format!(
                "sequence of {} frames is shorter than one {}-frame window",
                features.inner.len(),
                self.inner.config.window_len
            )));
        }
        let out = self.inner.embed(&features.inner, &offsets).map_err(to_py_err)?;
        Ok(out.rows().into_iter().map(|r| r.to_vec()).collect())
    }
}

/// Labeled embedding store with exact Euclidean k-NN.
#[pyclass(name = "ReferenceIndex")]
struct PyReferenceIndex {
    inner: CoreIndex,
}

#[pymethods]
impl PyReferenceIndex {
    #[new]
    fn new(dim: usize) -> Self {
        PyReferenceIndex { inner: CoreIndex::new(dim) }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyReferenceIndex { inner: CoreIndex::load(&path).map_err(to_py_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn user_ids(&self) -> Vec<String> {
        self.inner.user_ids().map(str::to_string).collect()
    }

    fn enroll(&mut self, user_id: &str, embeddings: Vec<Vec<f32>>) -> PyResult<usize> {
        let rows = embeddings.len();
        let dim = self.inner.dim();
        let mut flat = Vec::with_capacity(rows * dim);
        for row in &embeddings {
            if row.len() != dim {
                return Err(PyValueError::new_err(format!(
                    "embedding of dimension {} does not match index dimension {dim}",
                    row.len()
                )));
            }
            flat.extend_from_slice(row);
        }
        let arr = Array2::from_shape_vec((rows, dim), flat)
            .map_err(|e| PyValueError::new_err(e.to_string()))?;
        self.inner.enroll_unnumbered(user_id, arr.view()).map_err(to_py_err)
    }

    fn remove_user(&mut self, user_id: &str) -> PyResult<usize> {
        self.inner.remove_user(user_id).map_err(to_py_err)
    }

    /// k nearest neighbors as (user_id, distance) pairs, ascending.
    fn knn(&self, query: Vec<f32>, k: usize) -> PyResult<Vec<(String, f32)>> {
        let hits = self.inner.knn(&query, k).map_err(to_py_err)?;
        Ok(hits
            .into_iter()
            .map(|h| (self.inner.user_name(h.user).to_string(), h.distance))
            .collect())
    }
}

/// Outcome of identifying a sequence.
#[pyclass(name = "IdentificationResult")]
struct PyIdentificationResult {
    predicted: String,
    window_count: usize,
    tally: Vec<(String, usize)>,
    summary: String,
}

#[pymethods]
impl PyIdentificationResult {
    #[getter]
    fn predicted(&self) -> &str {
        &self.predicted
    }

    #[getter]
    fn window_count(&self) -> usize {
        self.window_count
    }

    #[getter]
    fn tally<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let dict = PyDict::new(py);
        for (user, count) in &self.tally {
            dict.set_item(user, count)?;
        }
        Ok(dict)
    }

    fn __repr__(&self) -> String {
        self.summary.clone()
    }
}

/// Two-level majority vote of a sequence against the reference index.
#[pyfunction]
#[pyo3(signature = (model, index, features, stride = 1, k = 50))]
fn identify(
    model: &PyEncoderModel,
    index: &PyReferenceIndex,
    features: &PyFeatureSequence,
    stride: usize,
    k: usize,
) -> PyResult<PyIdentificationResult> {
    let result = identify_sequence(&model.inner, &index.inner, &features.inner, stride, k)
        .map_err(to_py_err)?;
    Ok(PyIdentificationResult {
        predicted: result.predicted.clone(),
        window_count: result.window_count,
        tally: result.tally.iter().map(|(u, c)| (u.clone(), *c)).collect(),
        summary: result.summary_line(),
    })
}

#[pymodule]
fn motionkey_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyFeatureSequence>()?;
    m.add_class::<PyEncoderModel>()?;
    m.add_class::<PyReferenceIndex>()?;
    m.add_class::<PyIdentificationResult>()?;
    m.add_function(wrap_pyfunction!(load_features, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(identify, m)?)?;
    Ok(())
}
