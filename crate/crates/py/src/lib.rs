//! Python bindings: corpus generation and splitting, the simulator, the
//! hashing embedder, training, checkpoints and evaluation.
//!
//! Reports and episodes cross the boundary as JSON strings; the Python side
//! decodes them with `json.loads`.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use niab_core::embedding::{Embedder, HashingEmbedder};
use niab_core::episode::{parse_corpus, serialize_corpus, ActionToken};
use niab_core::eval::{evaluate as core_evaluate, EvalOptions, Policy};
use niab_core::ranker::{load_checkpoint, save_checkpoint, RankerConfig, RankerParams};
use niab_core::scene::{default_vocabularies, generate_corpus, split_corpus, GenConfig};
use niab_core::sim::Simulator as CoreSimulator;
use niab_core::trainer::{train as core_train, Ablation, TrainConfig};

fn invalid(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn fault(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn hashing(dim: usize, seed: u64) -> PyResult<Embedder> {
    if dim == 0 {
        return Err(invalid("embedder dim must be positive"));
    }
    Ok(Embedder::Hashing(HashingEmbedder::new(dim, seed)))
}

/// An episode corpus.
#[pyclass(module = "niab", skip_from_py_object)]
#[derive(Clone)]
struct Corpus {
    inner: niab_core::episode::Corpus,
}

#[pymethods]
impl Corpus {
    /// Parses JSONL text (one episode per line).
    #[staticmethod]
    fn from_jsonl(text: &str) -> PyResult<Self> {
        Ok(Corpus { inner: parse_corpus(text.as_bytes()).map_err(invalid)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let bytes = std::fs::read(&path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        Ok(Corpus { inner: parse_corpus(&bytes).map_err(invalid)? })
    }

    fn to_jsonl(&self) -> String {
        String::from_utf8(serialize_corpus(&self.inner)).expect("JSON is UTF-8")
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        std::fs::write(&path, serialize_corpus(&self.inner)).map_err(fault)
    }

    fn episode_ids(&self) -> Vec<String> {
        self.inner.episodes.iter().map(|e| e.episode_id.clone()).collect()
    }

    /// One episode as a JSON object string.
    fn episode_json(&self, episode_id: &str) -> PyResult<String> {
        let ep = self.inner.get(episode_id).ok_or_else(|| invalid(format!("no episode `{episode_id}`")))?;
        serde_json::to_string(ep).map_err(fault)
    }

    /// Counts of zero-, one- and two-label episodes.
    fn label_histogram(&self) -> [usize; 3] {
        let mut h = [0; 3];
        for ep in &self.inner.episodes {
            h[ep.oracle_labels.len().min(2)] += 1;
        }
        h
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Generates a corpus with the shipped scene data.
#[pyfunction]
#[pyo3(signature = (seed = 42, n_episodes = 2000))]
fn generate(seed: u64, n_episodes: usize) -> PyResult<Corpus> {
    let config = GenConfig { seed, n_episodes, ..GenConfig::default() };
    Ok(Corpus { inner: generate_corpus(&config, &default_vocabularies()).map_err(invalid)? })
}

/// Stratified split; returns `(train, val)`.
#[pyfunction]
#[pyo3(signature = (corpus, val_fraction = 0.1, seed = 42))]
fn split(corpus: &Corpus, val_fraction: f64, seed: u64) -> PyResult<(Corpus, Corpus)> {
    let (t, v) = split_corpus(&corpus.inner, (1.0 - val_fraction, val_fraction), seed).map_err(invalid)?;
    Ok((Corpus { inner: t }, Corpus { inner: v }))
}

/// Deterministic unit-norm token vector from the hashing embedder.
#[pyfunction]
#[pyo3(signature = (token, dim = 64, seed = 0))]
fn embed(token: &str, dim: usize, seed: u64) -> PyResult<Vec<f64>> {
    let token = ActionToken::new(token).map_err(invalid)?;
    hashing(dim, seed)?.embed(&token).map_err(invalid)
}

/// The symbolic household simulator with the shipped scenes.
#[pyclass(module = "niab")]
struct Simulator {
    inner: CoreSimulator,
}

#[pymethods]
impl Simulator {
    #[new]
    fn new() -> Self {
        Simulator { inner: CoreSimulator::shipped() }
    }

    /// Replays an episode with the robot running `action` before `step`
    /// (or unassisted when `action` is None). Returns the run report as JSON.
    #[pyo3(signature = (corpus, episode_id, step = 0, action = None))]
    fn run(&self, corpus: &Corpus, episode_id: &str, step: usize, action: Option<&str>) -> PyResult<String> {
        let ep = corpus.inner.get(episode_id).ok_or_else(|| invalid(format!("no episode `{episode_id}`")))?;
        let report = match action {
            Some(a) => {
                let token = ActionToken::new(a).map_err(invalid)?;
                self.inner.run_assisted(ep, step, &token)
            }
            None => self.inner.run_unassisted(ep),
        }
        .map_err(invalid)?;
        serde_json::to_string(&report).map_err(fault)
    }
}

/// Trained ranker parameters and their configuration.
#[pyclass(module = "niab")]
struct Ranker {
    params: RankerParams,
    config: RankerConfig,
    ablation: Ablation,
}

#[pymethods]
impl Ranker {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (config, params) = load_checkpoint(&path).map_err(invalid)?;
        let ablation = match config.scoring {
            niab_core::ranker::Scoring::ActionOnly => Ablation::ActionOnly,
            niab_core::ranker::Scoring::Joint => Ablation::Full,
        };
        Ok(Ranker { params, config, ablation })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&path, &self.params, &self.config).map_err(fault)
    }

    fn num_params(&self) -> usize {
        self.params.num_params()
    }

    /// The ranker configuration as JSON.
    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.config).map_err(fault)
    }
}

/// Trains the ranker and returns `(ranker, metrics)` where `metrics` is a
/// list of `(epoch, train_loss, val_selection_acc)`. `d_model`, `n_layers`,
/// `n_heads` and `mlp_hidden` default to the benchmark configuration.
#[pyfunction]
#[pyo3(signature = (train, val = None, ablation = "full", epochs = 12, seed = 0, d_model = 256, n_layers = 2, n_heads = 4, mlp_hidden = 256, out_dir = None))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    train: &Corpus,
    val: Option<&Corpus>,
    ablation: &str,
    epochs: usize,
    seed: u64,
    d_model: usize,
    n_layers: usize,
    n_heads: usize,
    mlp_hidden: usize,
    out_dir: Option<PathBuf>,
) -> PyResult<(Ranker, Vec<(usize, f64, Option<f64>)>)> {
    let ablation = Ablation::parse(ablation).ok_or_else(|| invalid(format!("unknown ablation `{ablation}`")))?;
    let embedder = hashing(64, 0)?;
    let ranker = RankerConfig { input_dim: embedder.dim(), d_model, n_layers, n_heads, mlp_hidden, ..RankerConfig::default() };
    let config = TrainConfig { ablation, epochs, seed, log_wall_time: false, ..TrainConfig::default() };
    if let Some(d) = &out_dir {
        std::fs::create_dir_all(d).map_err(fault)?;
    }
    let (t, v) = (train.inner.clone(), val.map(|v| v.inner.clone()));
    let outcome = py
        .detach(move || core_train(&t, v.as_ref(), &embedder, &ranker, &config, out_dir.as_deref(), &mut |_| {}))
        .map_err(invalid)?;
    let metrics = outcome.metrics.iter().map(|m| (m.epoch, m.train_loss, m.val_selection_acc)).collect();
    Ok((Ranker { params: outcome.best, config: outcome.ranker, ablation }, metrics))
}

/// Evaluates a policy (`model`, `random`, `cosine_top1`, `oracle`, `no_op`)
/// and returns the full report as JSON.
#[pyfunction]
#[pyo3(signature = (corpus, policy = "oracle", ranker = None, seed = 0))]
fn evaluate(corpus: &Corpus, policy: &str, ranker: Option<&Ranker>, seed: u64) -> PyResult<String> {
    let policy = Policy::parse(policy).ok_or_else(|| invalid(format!("unknown policy `{policy}`")))?;
    let embedder = hashing(64, 0)?;
    let sim = CoreSimulator::shipped();
    let (ablation, ranker_config) = match ranker {
        Some(r) => (r.ablation, r.config.clone()),
        None => (Ablation::Full, RankerConfig::default()),
    };
    let train_config = TrainConfig { ablation, ..TrainConfig::default() };
    let opts = EvalOptions { policy, spec: train_config.candidate_spec(&ranker_config), seed, keep_logits: false };
    let model = ranker.map(|r| (&r.params, &r.config));
    let report = core_evaluate(&corpus.inner, &embedder, &sim, model, &opts).map_err(invalid)?;
    serde_json::to_string(&report).map_err(fault)
}

#[pymodule]
fn niab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Corpus>()?;
    m.add_class::<Simulator>()?;
    m.add_class::<Ranker>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(split, m)?)?;
    m.add_function(wrap_pyfunction!(embed, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
