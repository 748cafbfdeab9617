use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use neobert::data::{pack, Document};
use neobert::encoder::{EncoderInput, EncoderModel, ModelConfig};
use neobert::heads;
use neobert::tokenizer::{self, NormalizerConfig};
use neobert::trainer::{self, ScheduleConfig};
use neobert::Error;

fn to_py(e: Error) -> PyErr {
    match e.exit_code() {
        1 => PyRuntimeError::new_err(e.to_string()),
        3 => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn normalizer(lowercase: bool, unicode_form: &str) -> PyResult<NormalizerConfig> {
    Ok(NormalizerConfig {
        lowercase,
        unicode_form: unicode_form.parse().map_err(to_py)?,
        ..Default::default()
    })
}

/// WordPiece vocabulary.
#[pyclass(name = "Vocab", module = "neobert_py")]
struct PyVocab {
    inner: tokenizer::Vocab,
}

#[pymethods]
impl PyVocab {
    #[staticmethod]
    #[pyo3(signature = (corpus, vocab_size, lowercase = false, unicode_form = "nfc"))]
    fn train(corpus: Vec<String>, vocab_size: usize, lowercase: bool, unicode_form: &str) -> PyResult<Self> {
        let inner = tokenizer::train_wordpiece(corpus, vocab_size, normalizer(lowercase, unicode_form)?).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (path, lowercase = false, unicode_form = "nfc"))]
    fn load(path: &str, lowercase: bool, unicode_form: &str) -> PyResult<Self> {
        let inner = tokenizer::Vocab::load(path, normalizer(lowercase, unicode_form)?).map_err(to_py)?;
        Ok(Self { inner })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn tokens(&self) -> Vec<String> {
        self.inner.tokens().to_vec()
    }

    fn tokenize(&self, text: &str) -> Vec<u32> {
        self.inner.tokenize(text)
    }

    fn tokenize_reference(&self, text: &str) -> Vec<u32> {
        self.inner.tokenize_reference(text)
    }

    fn detokenize(&self, ids: Vec<u32>) -> PyResult<String> {
        self.inner.detokenize(&ids).map_err(to_py)
    }

    fn normalize(&self, text: &str) -> String {
        self.inner.normalize(text)
    }

    fn checksum(&self) -> String {
        self.inner.checksum()
    }
}

/// Encoder in 64-bit precision.
#[pyclass(name = "Encoder", module = "neobert_py")]
struct PyEncoder {
    inner: EncoderModel<f64>,
}

#[pymethods]
impl PyEncoder {
    #[new]
    #[pyo3(signature = (vocab_size, depth = 2, width = 32, num_heads = 2, max_context = 1024, seed = 0))]
    fn new(vocab_size: usize, depth: usize, width: usize, num_heads: usize, max_context: usize, seed: u64) -> PyResult<Self> {
        let cfg = ModelConfig::new(depth, width, num_heads, vocab_size, max_context);
        Ok(Self {
            inner: EncoderModel::new(cfg, seed).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let ck = trainer::Checkpoint::<f64>::load(path).map_err(to_py)?;
        Ok(Self { inner: ck.model })
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    #[getter]
    fn max_context(&self) -> usize {
        self.inner.config().max_context
    }

    fn config(&self) -> String {
        self.inner.config().to_kv()
    }

    /// Final hidden states of one sequence as a list of rows.
    fn forward(&self, ids: Vec<u32>) -> PyResult<Vec<Vec<f64>>> {
        let input = EncoderInput::single(&ids).map_err(to_py)?;
        let h = self.inner.forward(&input).map_err(to_py)?;
        Ok(h.data().chunks(self.inner.config().width).map(<[f64]>::to_vec).collect())
    }

    /// MLM logits of one sequence as a list of rows.
    fn mlm_logits(&self, ids: Vec<u32>) -> PyResult<Vec<Vec<f64>>> {
        let input = EncoderInput::single(&ids).map_err(to_py)?;
        let h = self.inner.forward(&input).map_err(to_py)?;
        let z = self.inner.mlm_logits(&h).map_err(to_py)?;
        Ok(z.data().chunks(self.inner.config().vocab_size).map(<[f64]>::to_vec).collect())
    }

    fn pooled_embedding(&self, ids: Vec<u32>) -> PyResult<Vec<f64>> {
        heads::pooled_embedding(&self.inner, &ids).map_err(to_py)
    }

    fn extend_context(&mut self, window: usize) -> PyResult<()> {
        self.inner.extend_context(window).map_err(to_py)
    }
}

#[pyfunction]
#[pyo3(signature = (step, max_lr, total_steps, warmup_steps = 500, min_lr = 0.0))]
fn lr_at(step: u64, max_lr: f64, total_steps: u64, warmup_steps: u64, min_lr: f64) -> f64 {
    let s = ScheduleConfig {
        warmup_steps,
        max_lr,
        min_lr,
        total_steps,
    };
    trainer::lr_at(step, &s)
}

#[pyfunction]
#[pyo3(signature = (start_logits, end_logits, max_answer_len = heads::MAX_ANSWER_LEN))]
fn predict_span(start_logits: Vec<f64>, end_logits: Vec<f64>, max_answer_len: usize) -> (usize, usize) {
    heads::predict_span(&start_logits, &end_logits, max_answer_len)
}

/// Packs documents given as token-id lists; returns each row's
/// `[start, end)` document spans.
#[pyfunction]
fn pack_spans(docs: Vec<Vec<u32>>, window: usize) -> PyResult<Vec<Vec<(usize, usize)>>> {
    let docs = docs
        .into_iter()
        .enumerate()
        .map(|(i, ids)| Ok(Document::new("py", i as u64, ids)));
    pack(docs, window)
        .map_err(to_py)?
        .map(|r| r.map(|row| row.spans).map_err(to_py))
        .collect()
}

#[pymodule]
fn neobert_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVocab>()?;
    m.add_class::<PyEncoder>()?;
    m.add_function(wrap_pyfunction!(lr_at, m)?)?;
    m.add_function(wrap_pyfunction!(predict_span, m)?)?;
    m.add_function(wrap_pyfunction!(pack_spans, m)?)?;
    Ok(())
}
