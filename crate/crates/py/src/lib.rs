//! Python bindings: codec, synthetic data, sampling, metrics and the CLI.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rlm_core::evalkit;
use rlm_core::infer::{self, SamplingConfig};
use rlm_core::model::{init_model, ArchConfig};
use rlm_core::numcodec::{self, P10Config, P10Token};
use rlm_core::synthgen::{self, FeatureMask, Oracle};
use rlm_core::textenc::{encode_text, truncate, Vocabulary};
use rlm_core::train::{self, ModelCheckpoint};

fn err(e: rlm_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn p10(mantissa_digits: usize, exponent_min: i32, exponent_max: i32) -> PyResult<P10Config> {
    P10Config::new(mantissa_digits, exponent_min, exponent_max).map_err(err)
}

/// Spelled P10 tokens of `y`, e.g. `['<+>', '<7>', '<2>', '<5>', '<E-1>']`.
#[pyfunction]
#[pyo3(signature = (y, mantissa_digits=4, exponent_min=-20, exponent_max=20))]
fn encode_y(y: f64, mantissa_digits: usize, exponent_min: i32, exponent_max: i32) -> PyResult<Vec<String>> {
    let cfg = p10(mantissa_digits, exponent_min, exponent_max)?;
    let toks = numcodec::encode_y(y, &cfg).map_err(err)?;
    Ok(toks.to_tokens().iter().map(|t| t.to_string()).collect())
}

#[pyfunction]
#[pyo3(signature = (tokens, mantissa_digits=4, exponent_min=-20, exponent_max=20))]
fn decode_y(tokens: Vec<String>, mantissa_digits: usize, exponent_min: i32, exponent_max: i32) -> PyResult<f64> {
    let cfg = p10(mantissa_digits, exponent_min, exponent_max)?;
    let parsed: Vec<P10Token> = tokens
        .iter()
        .map(|s| P10Token::parse(s).ok_or_else(|| PyValueError::new_err(format!("bad token {s:?}"))))
        .collect::<PyResult<_>>()?;
    let toks = numcodec::P10Tokens::from_tokens(&parsed, &cfg).map_err(err)?;
    numcodec::decode_y(&toks, &cfg).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (mantissa_digits=4, exponent_min=-20, exponent_max=20))]
fn vocab_size(mantissa_digits: usize, exponent_min: i32, exponent_max: i32) -> PyResult<usize> {
    Ok(Vocabulary::size_for(&p10(mantissa_digits, exponent_min, exponent_max)?))
}

/// Records of a synthetic task as dicts with `x`, `y`, `split`, `task_id`
/// and the oracle `mean`/`variance` of each input.
#[pyfunction]
#[pyo3(signature = (k, month, profile, n, seed=0, task_seed=0))]
fn generate_dataset<'py>(
    py: Python<'py>,
    k: u32,
    month: &str,
    profile: &str,
    n: usize,
    seed: u64,
    task_seed: u64,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let task = synthgen::make_task(k, month.parse().map_err(err)?, profile.parse().map_err(err)?, task_seed)
        .map_err(err)?;
    let (data, states) = synthgen::generate_with_states(&task, n, seed).map_err(err)?;
    let oracle = Oracle::new(&task, &data, &states);
    data.records
        .iter()
        .map(|r| {
            let d = PyDict::new_bound(py);
            d.set_item("task_id", &r.task_id)?;
            d.set_item("x", &r.x)?;
            d.set_item("y", r.y)?;
            d.set_item("split", r.split.to_string())?;
            d.set_item("mean", oracle.mean(&r.x).map_err(err)?)?;
            d.set_item("variance", oracle.variance(&r.x).map_err(err)?)?;
            Ok(d)
        })
        .collect()
}

#[pyfunction]
fn project_text(x: &str, mask: &str) -> PyResult<String> {
    Ok(synthgen::project_text(x, FeatureMask::parse(mask).map_err(err)?))
}

#[pyfunction]
fn mse(preds: Vec<f64>, ys: Vec<f64>) -> PyResult<f64> {
    evalkit::mse(&preds, &ys).map_err(err)
}

#[pyfunction]
fn spearman(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    evalkit::spearman(&a, &b).map_err(err)
}

/// Class-averaged within-class variance of `ys` after projecting `xs`
/// onto `mask` (`null`, `full`, `CR`, `WR`, ...).
#[pyfunction]
#[pyo3(signature = (xs, ys, mask="full"))]
fn total_variance(xs: Vec<String>, ys: Vec<f64>, mask: &str) -> PyResult<f64> {
    let m = FeatureMask::parse(mask).map_err(err)?;
    let refs: Vec<&str> = xs.iter().map(String::as_str).collect();
    evalkit::total_variance(&refs, &ys, &evalkit::mask_projector(m)).map_err(err)
}

#[pyfunction]
fn r2_ev(mse_model: f64, mse_null: f64) -> PyResult<f64> {
    evalkit::r2_ev(mse_model, mse_null).map_err(err)
}

#[pyfunction]
fn r2_nll(nll_model: f64, nll_null: f64) -> PyResult<f64> {
    evalkit::r2_nll(nll_model, nll_null).map_err(err)
}

/// Runs a CLI command, e.g. `run_cli(["gen-data", "--out", "runs"])`.
#[pyfunction]
fn run_cli(args: Vec<String>) -> PyResult<()> {
    rlm_core::cli::run(std::iter::once("rlm".to_string()).chain(args)).map_err(err)
}

/// A model checkpoint.
#[pyclass]
struct Model {
    ck: ModelCheckpoint,
    vocab: Vocabulary,
}

#[pymethods]
impl Model {
    /// Fresh randomly initialized model.
    #[new]
    #[pyo3(signature = (encoder_layers=2, decoder_layers=2, heads=4, head_dim=16, embed_dim=64, mlp_dim=256, max_encoder_len=256, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        encoder_layers: usize,
        decoder_layers: usize,
        heads: usize,
        head_dim: usize,
        embed_dim: usize,
        mlp_dim: usize,
        max_encoder_len: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let p10 = P10Config::default();
        let vocab = Vocabulary::new(p10).map_err(err)?;
        let arch = ArchConfig {
            encoder_layers,
            decoder_layers,
            heads,
            head_dim,
            embed_dim,
            mlp_dim,
            max_encoder_len,
            vocab_size: vocab.size(),
            seed,
            ..ArchConfig::default()
        };
        let params = init_model(&arch).map_err(err)?;
        Ok(Self { ck: ModelCheckpoint::new(params, p10, ChaCha8Rng::seed_from_u64(seed)), vocab })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = train::load_checkpoint(&path).map_err(err)?;
        let vocab = Vocabulary::new(ck.p10).map_err(err)?;
        Ok(Self { ck, vocab })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        train::save_checkpoint(&self.ck, &path).map_err(err)
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.ck.params.parameter_count()
    }

    #[getter]
    fn step(&self) -> u64 {
        self.ck.step
    }

    /// Samples y for `x`; returns a dict with `samples`, `point_mean`,
    /// `point_median`, `sample_variance` and `filtered_count`.
    #[pyo3(signature = (x, num_samples=128, temperature=1.0, seed=0, valid_range=(f64::NEG_INFINITY, f64::INFINITY)))]
    fn sample<'py>(
        &self,
        py: Python<'py>,
        x: &str,
        num_samples: usize,
        temperature: f64,
        seed: u64,
        valid_range: (f64, f64),
    ) -> PyResult<Bound<'py, PyDict>> {
        let cfg = SamplingConfig {
            num_samples,
            temperature,
            valid_range: [valid_range.0, valid_range.1],
            ..SamplingConfig::default()
        };
        let ids = truncate(&encode_text(x, &self.vocab), self.ck.params.arch.max_encoder_len);
        let r = infer::sample_y(&self.ck.params, &self.vocab, &ids, &cfg, seed).map_err(err)?;
        let d = PyDict::new_bound(py);
        d.set_item("samples", r.samples)?;
        d.set_item("point_mean", r.point_mean)?;
        d.set_item("point_median", r.point_median)?;
        d.set_item("sample_variance", r.sample_variance)?;
        d.set_item("filtered_count", r.filtered_count)?;
        Ok(d)
    }

    fn greedy(&self, x: &str) -> PyResult<f64> {
        let ids = truncate(&encode_text(x, &self.vocab), self.ck.params.arch.max_encoder_len);
        infer::greedy_decode(&self.ck.params, &self.vocab, &ids).map_err(err)
    }

    /// Negative log-likelihood (nats) of `y` given `x`.
    fn nll(&self, x: &str, y: f64) -> PyResult<f64> {
        let ids = truncate(&encode_text(x, &self.vocab), self.ck.params.arch.max_encoder_len);
        infer::nll_of(&self.ck.params, &self.vocab, &ids, y).map_err(err)
    }
}

#[pymodule]
fn rlm(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(encode_y, m)?)?;
    m.add_function(wrap_pyfunction!(decode_y, m)?)?;
    m.add_function(wrap_pyfunction!(vocab_size, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(project_text, m)?)?;
    m.add_function(wrap_pyfunction!(mse, m)?)?;
    m.add_function(wrap_pyfunction!(spearman, m)?)?;
    m.add_function(wrap_pyfunction!(total_variance, m)?)?;
    m.add_function(wrap_pyfunction!(r2_ev, m)?)?;
    m.add_function(wrap_pyfunction!(r2_nll, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add_class::<Model>()?;
    Ok(())
}
