//! Python bindings: vocabularies, model construction and checkpoints,
//! scoring, sampling, training, gradient checking and rescoring.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;

use rnn_encdec::data::{self, PhrasePair, TokenId};
use rnn_encdec::infer::{self, RescoreOptions};
use rnn_encdec::model::{self, CellKind, ModelConfig, ModelParams};
use rnn_encdec::optim::{self, OptimizerKind, Sampling, TrainConfig};
use rnn_encdec::{checkpoint, Rng};

fn to_py(e: rnn_encdec::Error) -> PyErr {
    match e {
        rnn_encdec::Error::Io { .. } => PyOSError::new_err(e.to_string()),
        rnn_encdec::Error::Numeric(_) => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Word shortlist with reserved ids 0 (`</s>`) and 1 (`[UNK]`).
#[pyclass(name = "Vocabulary", module = "encdec")]
struct PyVocabulary {
    inner: data::Vocabulary,
}

#[pymethods]
impl PyVocabulary {
    #[new]
    fn new(words: Vec<String>) -> PyResult<Self> {
        Ok(Self {
            inner: data::Vocabulary::from_words(&words).map_err(to_py)?,
        })
    }

    /// Keeps the `k` most frequent whitespace tokens of `corpus`.
    #[staticmethod]
    fn build(corpus: Vec<String>, k: usize) -> PyResult<Self> {
        Ok(Self {
            inner: data::build_vocab(&corpus, k).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: data::Vocabulary::load(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn id(&self, token: &str) -> TokenId {
        self.inner.id(token)
    }

    fn token(&self, id: TokenId) -> Option<String> {
        self.inner.token(id).map(str::to_string)
    }

    fn tokens(&self) -> Vec<String> {
        self.inner.tokens().to_vec()
    }

    /// Token ids with EOS appended.
    fn encode(&self, text: &str) -> Vec<TokenId> {
        data::encode_phrase(text, &self.inner)
    }

    fn decode(&self, ids: Vec<TokenId>) -> String {
        self.inner.decode(&ids)
    }

    fn __repr__(&self) -> String {
        format!("Vocabulary(len={})", self.inner.len())
    }
}

/// Encoder-decoder parameters.
#[pyclass(name = "Model", module = "encdec")]
struct PyModel {
    params: ModelParams,
}

#[pymethods]
impl PyModel {
    /// Initialized model. `zero=True` gives all-zero weights, whose
    /// output is uniform. `update_bias` sets the initial update-gate bias.
    #[new]
    #[pyo3(signature = (src_vocab, tgt_vocab, hidden=1000, embed=100, maxout=500, output_rank=500,
                        cell="gated", bias=true, seed=1234, init_std=0.01, update_bias=0.0, zero=false))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        src_vocab: usize,
        tgt_vocab: usize,
        hidden: usize,
        embed: usize,
        maxout: usize,
        output_rank: usize,
        cell: &str,
        bias: bool,
        seed: u64,
        init_std: f64,
        update_bias: f64,
        zero: bool,
    ) -> PyResult<Self> {
        let cell: CellKind = cell.parse().map_err(to_py)?;
        let cfg = ModelConfig {
            src_vocab,
            tgt_vocab,
            hidden,
            embed,
            maxout,
            output_rank,
            cell,
            bias,
        };
        cfg.validate().map_err(to_py)?;
        let params = if zero {
            ModelParams::zeros(&cfg)
        } else {
            let mut p = ModelParams::init(&cfg, init_std, &mut Rng::new(seed)).map_err(to_py)?;
            p.set_update_bias(update_bias);
            p
        };
        Ok(Self { params })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            params: checkpoint::load(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(&self.params, &path).map_err(to_py)
    }

    /// Shape settings as a dict.
    #[getter]
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, pyo3::types::PyDict>> {
        let c = &self.params.config;
        let d = pyo3::types::PyDict::new(py);
        d.set_item("src_vocab", c.src_vocab)?;
        d.set_item("tgt_vocab", c.tgt_vocab)?;
        d.set_item("hidden", c.hidden)?;
        d.set_item("embed", c.embed)?;
        d.set_item("maxout", c.maxout)?;
        d.set_item("output_rank", c.output_rank)?;
        d.set_item("cell", c.cell.as_str())?;
        d.set_item("bias", c.bias)?;
        Ok(d)
    }

    fn parameter_count(&self) -> usize {
        self.params.parameter_count()
    }

    /// `log p(tgt | src)`; both sequences must end with EOS (id 0).
    fn log_prob(&self, src_ids: Vec<TokenId>, tgt_ids: Vec<TokenId>) -> PyResult<f64> {
        model::log_prob(&src_ids, &tgt_ids, &self.params).map_err(to_py)
    }

    /// Summary vector `c` of a source sequence.
    fn encode(&self, src_ids: Vec<TokenId>) -> PyResult<Vec<f64>> {
        Ok(model::encode(&src_ids, &self.params).map_err(to_py)?.context)
    }

    /// One ancestral sample: `(ids, score, truncated)`.
    #[pyo3(signature = (src_ids, max_len=50, seed=0))]
    fn sample(&self, src_ids: Vec<TokenId>, max_len: usize, seed: u64) -> PyResult<(Vec<TokenId>, f64, bool)> {
        let s = infer::sample(&self.params, &src_ids, max_len, &mut Rng::new(seed)).map_err(to_py)?;
        Ok((s.tgt_ids, s.score, s.truncated))
    }

    /// Best `k` distinct targets among `n` samples: `[(ids, score, count)]`.
    #[pyo3(signature = (src_ids, n=50, k=5, max_len=50, seed=0))]
    fn top_samples(
        &self,
        src_ids: Vec<TokenId>,
        n: usize,
        k: usize,
        max_len: usize,
        seed: u64,
    ) -> PyResult<Vec<(Vec<TokenId>, f64, usize)>> {
        let top = infer::top_samples(&self.params, &src_ids, n, k, max_len, &mut Rng::new(seed))
            .map_err(to_py)?;
        Ok(top.into_iter().map(|s| (s.tgt_ids, s.score, s.count)).collect())
    }

    /// Finite-difference check on one pair: `(max_rel_error, worst_block,
    /// skipped)`, where `skipped` counts entries next to a maxout kink.
    /// `stencil` is "central" or "five-point".
    #[pyo3(signature = (src_ids, tgt_ids, step=1e-3, stencil="five-point"))]
    fn grad_check(
        &self,
        src_ids: Vec<TokenId>,
        tgt_ids: Vec<TokenId>,
        step: f64,
        stencil: &str,
    ) -> PyResult<(f64, String, usize)> {
        let stencil: optim::Stencil = stencil.parse().map_err(to_py)?;
        let pair = PhrasePair::from_ids(src_ids, tgt_ids);
        let r = optim::grad_check_with(&self.params, &pair, step, stencil).map_err(to_py)?;
        Ok((r.max_rel_error, r.worst_block, r.kinks))
    }

    /// Trains in place on id pairs and returns `[(update, mean_nll)]` log
    /// entries.
    #[pyo3(signature = (pairs, max_updates, batch_size=64, seed=1234, optimizer="adadelta",
                        learning_rate=0.01, log_every=100, without_replacement=false))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        &mut self,
        py: Python<'_>,
        pairs: Vec<(Vec<TokenId>, Vec<TokenId>)>,
        max_updates: usize,
        batch_size: usize,
        seed: u64,
        optimizer: &str,
        learning_rate: f64,
        log_every: usize,
        without_replacement: bool,
    ) -> PyResult<Vec<(usize, f64)>> {
        let optimizer: OptimizerKind = optimizer.parse().map_err(to_py)?;
        let cfg = TrainConfig {
            batch_size,
            max_updates,
            seed,
            optimizer,
            learning_rate,
            log_every,
            sampling: if without_replacement {
                Sampling::WithoutReplacement
            } else {
                Sampling::WithReplacement
            },
            ..TrainConfig::default()
        };
        let pool: Vec<PhrasePair> = pairs
            .into_iter()
            .map(|(s, t)| PhrasePair::from_ids(s, t))
            .collect();
        let params = self.params.clone();
        let (params, log) = py
            .detach(|| optim::train(pool, &cfg, params, |_| {}))
            .map_err(to_py)?;
        self.params = params;
        Ok(log.into_iter().map(|l| (l.update, l.mean_nll)).collect())
    }

    /// Appends the model score to every entry of a phrase table file and
    /// returns the number of scored lines.
    #[pyo3(signature = (v_src, v_tgt, in_path, out_path, header=false))]
    fn rescore(
        &self,
        v_src: &PyVocabulary,
        v_tgt: &PyVocabulary,
        in_path: PathBuf,
        out_path: PathBuf,
        header: bool,
    ) -> PyResult<usize> {
        let opts = RescoreOptions {
            header,
            unk_feature: None,
        };
        let summary = infer::rescore_table(&self.params, &v_src.inner, &v_tgt.inner, &in_path, &out_path, &opts)
            .map_err(to_py)?;
        Ok(summary.scored)
    }

    fn __repr__(&self) -> String {
        let c = &self.params.config;
        format!(
            "Model(src_vocab={}, tgt_vocab={}, hidden={}, cell={:?})",
            c.src_vocab,
            c.tgt_vocab,
            c.hidden,
            c.cell.as_str()
        )
    }
}

#[pymodule]
fn encdec(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVocabulary>()?;
    m.add_class::<PyModel>()?;
    m.add("EOS", data::EOS)?;
    m.add("UNK", data::UNK)?;
    Ok(())
}
