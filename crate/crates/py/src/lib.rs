//! Python module `sparse_focus`.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sft_core::accounting::{self, AttentionKind};
use sft_core::attention::{self as attn, AxialLayout, AxialVariant};
use sft_core::data;
use sft_core::decoder::Vocabulary;
use sft_core::metrics::{self, EvalPair};
use sft_core::model::{caption_pair, Checkpoint, ModelConfig};
use sft_core::{SftError, Tensor};

fn to_py(e: SftError) -> PyErr {
    if e.is_io() {
        PyOSError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn variant(window: Option<usize>) -> AxialVariant {
    match window {
        None => AxialVariant::FullLength,
        Some(l) => AxialVariant::FixedLength { l },
    }
}

/// Dense row-major f64 tensor.
#[pyclass(name = "Tensor", module = "sparse_focus", from_py_object)]
#[derive(Clone)]
struct PyTensor(Tensor);

#[pymethods]
impl PyTensor {
    #[new]
    fn new(data: Vec<f64>, shape: Vec<usize>) -> PyResult<Self> {
        Tensor::new(shape, data).map(PyTensor).map_err(to_py)
    }

    /// Uniform entries in `[-bound, bound]` from a seeded generator.
    #[staticmethod]
    #[pyo3(signature = (shape, seed, bound = 1.0))]
    fn uniform(shape: Vec<usize>, seed: u64, bound: f64) -> Self {
        PyTensor(Tensor::uniform(&shape, bound, &mut ChaCha8Rng::seed_from_u64(seed)))
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.0.shape().to_vec()
    }

    /// Flat row-major values.
    fn data(&self) -> Vec<f64> {
        self.0.data().to_vec()
    }

    fn max_abs_diff(&self, other: &PyTensor) -> PyResult<f64> {
        self.0.max_abs_diff(&other.0).map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        sft_core::format::save(&path, &self.0).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        sft_core::format::load(&path).map(PyTensor).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.0.numel()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.0.shape())
    }
}

/// Pixel indices attended by pixel `p` on a `width x height` grid.
#[pyfunction]
#[pyo3(signature = (width, height, p, window = None))]
fn axial_neighbors(width: usize, height: usize, p: usize, window: Option<usize>) -> PyResult<Vec<usize>> {
    let layout = AxialLayout::new(width, height, variant(window)).map_err(to_py)?;
    if p >= width * height {
        return Err(PyValueError::new_err(format!("pixel {p} outside {width}x{height} grid")));
    }
    Ok(layout.members(p).to_vec())
}

/// Axial attention `A.V + F` over `[C, H, W]` maps; `window=None` is full length.
#[pyfunction]
#[pyo3(signature = (q, k, v, f, window = None, scale_qk = false))]
fn sparse_focus_attention(
    q: &PyTensor,
    k: &PyTensor,
    v: &PyTensor,
    f: &PyTensor,
    window: Option<usize>,
    scale_qk: bool,
) -> PyResult<PyTensor> {
    attn::sparse_focus_attention(&q.0, &k.0, &v.0, &f.0, variant(window), scale_qk)
        .map(PyTensor)
        .map_err(to_py)
}

/// Reference: full `(HW)^2` attention with non-axial pairs masked out.
#[pyfunction]
#[pyo3(signature = (q, k, v, f, window = None, scale_qk = false))]
fn dense_axial_attention(
    q: &PyTensor,
    k: &PyTensor,
    v: &PyTensor,
    f: &PyTensor,
    window: Option<usize>,
    scale_qk: bool,
) -> PyResult<PyTensor> {
    let (_, h, w) = q.0.dims3().map_err(to_py)?;
    let layout = AxialLayout::new(w, h, variant(window)).map_err(to_py)?;
    attn::dense_masked_attention(&q.0, &k.0, &v.0, &f.0, &layout.mask(), scale_qk)
        .map(PyTensor)
        .map_err(to_py)
}

fn pair(generated: &str, references: Vec<String>) -> PyResult<EvalPair> {
    let refs: Vec<&str> = references.iter().map(String::as_str).collect();
    EvalPair::from_text(generated, &refs).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (generated, references, n = 4))]
fn bleu(generated: &str, references: Vec<String>, n: usize) -> PyResult<f64> {
    Ok(metrics::bleu_n(&pair(generated, references)?, n))
}

#[pyfunction]
fn rouge_l(generated: &str, references: Vec<String>) -> PyResult<f64> {
    Ok(metrics::rouge_l(&pair(generated, references)?))
}

#[pyfunction]
fn meteor(generated: &str, references: Vec<String>) -> PyResult<f64> {
    Ok(metrics::meteor(&pair(generated, references)?))
}

/// Per-pair CIDEr-D over a corpus of `(generated, references)`.
#[pyfunction]
fn cider_d(corpus: Vec<(String, Vec<String>)>) -> PyResult<Vec<f64>> {
    let pairs = corpus.into_iter().map(|(g, r)| pair(&g, r)).collect::<PyResult<Vec<_>>>()?;
    Ok(metrics::cider_d(&pairs))
}

#[pyfunction]
#[pyo3(signature = (corpus, n = 4))]
fn corpus_bleu(corpus: Vec<(String, Vec<String>)>, n: usize) -> PyResult<f64> {
    let pairs = corpus.into_iter().map(|(g, r)| pair(&g, r)).collect::<PyResult<Vec<_>>>()?;
    Ok(metrics::corpus_bleu(&pairs, n))
}

fn json_to_py<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Parameter and MAC report as a dict. `config` is a JSON model config
/// string; `None` uses the defaults.
#[pyfunction]
#[pyo3(signature = (vocab_size = 30, caption_len = 12, dense = false, config = None))]
fn count<'py>(
    py: Python<'py>,
    vocab_size: usize,
    caption_len: usize,
    dense: bool,
    config: Option<&str>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = match config {
        Some(text) => serde_json::from_str::<ModelConfig>(text).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => ModelConfig::with_vocab(vocab_size),
    };
    let kind = if dense { AttentionKind::Dense } else { AttentionKind::Sparse };
    let report = accounting::count(&cfg, caption_len, kind).map_err(to_py)?;
    json_to_py(py, &report)
}

/// Synthetic pairs as dicts with `image_id`, `img1`, `img2`, `captions`.
#[pyfunction]
fn generate_dataset<'py>(py: Python<'py>, n: usize, seed: u64) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let samples = data::generate_dataset(n, seed).map_err(to_py)?;
    samples
        .into_iter()
        .map(|s| {
            let d = PyDict::new(py);
            d.set_item("image_id", s.sample.image_id)?;
            d.set_item("img1", PyTensor(s.sample.img1))?;
            d.set_item("img2", PyTensor(s.sample.img2))?;
            d.set_item("captions", s.sample.captions)?;
            Ok(d)
        })
        .collect()
}

#[pyclass(name = "Vocabulary", module = "sparse_focus")]
struct PyVocabulary(Vocabulary);

#[pymethods]
impl PyVocabulary {
    #[staticmethod]
    fn from_captions(captions: Vec<String>) -> Self {
        PyVocabulary(Vocabulary::from_captions(captions.iter().map(String::as_str)))
    }

    fn encode(&self, caption: &str) -> Vec<usize> {
        self.0.encode(caption).ids().to_vec()
    }

    fn decode(&self, ids: Vec<usize>) -> String {
        self.0.decode(&sft_core::decoder::CaptionSequence(ids))
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

/// A trained checkpoint directory, ready to caption image pairs.
#[pyclass(name = "Captioner", module = "sparse_focus")]
struct PyCaptioner(Checkpoint);

#[pymethods]
impl PyCaptioner {
    #[new]
    fn new(checkpoint: PathBuf) -> PyResult<Self> {
        Checkpoint::load(&checkpoint).map(PyCaptioner).map_err(to_py)
    }

    /// Greedy caption of `(img1, img2)`; returns `(caption, truncated)`.
    fn caption(&self, img1: &PyTensor, img2: &PyTensor) -> PyResult<(String, bool)> {
        let out = caption_pair(&img1.0, &img2.0, &self.0.params, &self.0.config).map_err(to_py)?;
        Ok((self.0.vocab.decode(&out.sequence), out.truncated))
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.0.params.element_count()
    }
}

#[pymodule]
fn sparse_focus(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyVocabulary>()?;
    m.add_class::<PyCaptioner>()?;
    m.add_function(wrap_pyfunction!(axial_neighbors, m)?)?;
    m.add_function(wrap_pyfunction!(sparse_focus_attention, m)?)?;
    m.add_function(wrap_pyfunction!(dense_axial_attention, m)?)?;
    m.add_function(wrap_pyfunction!(bleu, m)?)?;
    m.add_function(wrap_pyfunction!(corpus_bleu, m)?)?;
    m.add_function(wrap_pyfunction!(rouge_l, m)?)?;
    m.add_function(wrap_pyfunction!(meteor, m)?)?;
    m.add_function(wrap_pyfunction!(cider_d, m)?)?;
    m.add_function(wrap_pyfunction!(count, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    Ok(())
}
