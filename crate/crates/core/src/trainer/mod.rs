//! Flattened cross-entropy training of the ranker with AdamW.
//!
//! Every oracle label becomes one example whose target is the (step,
//! candidate) cell of the label. Batches are shuffled with a seeded stream,
//! packed, and pushed through the exact forward/backward passes of
//! [`crate::ranker`]. After every epoch the parameters, rounded to the
//! checkpoint precision, are scored on the validation corpus.

mod data;
mod loss;
mod optim;

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use data::{candidates, pack_batch, Ablation, CandidateSpec, EmbedCache, Encoded};
pub use loss::{ce_loss, ce_loss_packed};
pub use optim::{adamw_step, OptimizerState};

use crate::embedding::{Embedder, EmbeddingError};
use crate::episode::{ActionToken, Corpus};
use crate::eval::{self, EvalError};
use crate::ranker::{backward_packed, forward_packed, save_checkpoint, RankerConfig, RankerError, RankerParams};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Ranker(#[from] RankerError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error("target {target} of batch example {example} is masked")]
    TargetMasked { example: usize, target: usize },
    #[error("episode {episode_id}: target `{token}` is not in the robot vocabulary")]
    TargetMissing { episode_id: String, token: String },
    #[error("invalid training configuration: {0}")]
    BadConfig(String),
    #[error("validation failed: {0}")]
    Eval(Box<EvalError>),
    #[error("i/o: {0}")]
    Io(String),
}

impl From<EvalError> for TrainError {
    fn from(e: EvalError) -> Self {
        TrainError::Eval(Box::new(e))
    }
}

/// What to do with episodes that carry no oracle label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroLabelMode {
    /// Train towards (step 0, `no_op`).
    #[default]
    NoopTarget,
    /// Leave them out of training.
    Skip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub ablation: Ablation,
    pub zero_label: ZeroLabelMode,
    /// Episode-level candidate count kept by retrieval.
    pub k_ep: usize,
    /// Length of the per-step retrieval lists.
    pub k_step: usize,
    /// Record elapsed milliseconds in the metrics log; when false `wall_ms` is 0
    /// and the log is a pure function of the inputs.
    pub log_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-4,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            epochs: 12,
            batch_size: 64,
            seed: 0,
            ablation: Ablation::Full,
            zero_label: ZeroLabelMode::NoopTarget,
            k_ep: 20,
            k_step: 5,
            log_wall_time: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("epsilon", self.epsilon),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| !(v.is_finite() && *v > 0.0)) {
            return Err(TrainError::BadConfig(format!("{name} must be positive")));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(TrainError::BadConfig("weight_decay must be non-negative".into()));
        }
        if self.beta1 >= 1.0 || self.beta2 >= 1.0 {
            return Err(TrainError::BadConfig("betas must be below 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch_size must be at least 1".into()));
        }
        if self.k_ep < 2 || self.k_step == 0 {
            return Err(TrainError::BadConfig("need k_ep >= 2 and k_step >= 1".into()));
        }
        Ok(())
    }

    pub fn candidate_spec(&self, ranker: &RankerConfig) -> CandidateSpec {
        CandidateSpec {
            ablation: self.ablation,
            k_step: self.k_step,
            k_ep: self.k_ep,
            max_candidates: ranker.max_candidates,
        }
    }

    /// The ranker configuration actually trained: scoring follows the ablation.
    pub fn ranker_config(&self, base: &RankerConfig) -> RankerConfig {
        RankerConfig { scoring: self.ablation.scoring(), ..base.clone() }
    }
}

/// One supervised example.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub episode_index: usize,
    pub encoded: Encoded,
    pub target_step: usize,
    pub target_cand: usize,
}

impl TrainExample {
    /// Flat index `s★ · C_max + c★` into a padded logit grid.
    pub fn flat_target(&self, c_max: usize) -> usize {
        self.target_step * c_max + self.target_cand
    }
}

/// Builds one example per oracle label (and per zero-label episode in
/// `NoopTarget` mode) with the target teacher-forced into the candidates.
pub fn build_examples(
    corpus: &Corpus,
    cache: &mut EmbedCache,
    spec: &CandidateSpec,
    ranker: &RankerConfig,
    zero_label: ZeroLabelMode,
) -> Result<Vec<TrainExample>, TrainError> {
    let mut out = Vec::new();
    for (i, ep) in corpus.episodes.iter().enumerate() {
        if ep.human_task_seq.len() > ranker.max_steps {
            return Err(TrainError::BadConfig(format!(
                "episode {} has {} steps, max_steps is {}",
                ep.episode_id,
                ep.human_task_seq.len(),
                ranker.max_steps
            )));
        }
        if ep.human_task_seq.is_empty() {
            continue;
        }
        let targets: Vec<(usize, ActionToken)> = if ep.oracle_labels.is_empty() {
            match zero_label {
                ZeroLabelMode::NoopTarget => vec![(0, ActionToken::no_op())],
                ZeroLabelMode::Skip => vec![],
            }
        } else {
            ep.oracle_labels.iter().map(|l| (l.human_step_idx, l.best_robot_action.clone())).collect()
        };
        for (step, action) in targets {
            let list = candidates(ep, cache.embedder(), spec, Some(&action))?;
            let target_cand = list.iter().position(|t| *t == action).ok_or_else(|| TrainError::TargetMissing {
                episode_id: ep.episode_id.clone(),
                token: action.to_string(),
            })?;
            let encoded = Encoded::build(ep, list, cache)?;
            out.push(TrainExample { episode_index: i, encoded, target_step: step, target_cand });
        }
    }
    Ok(out)
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_selection_acc: Option<f64>,
    pub wall_ms: u64,
}

pub struct TrainOutcome {
    /// Parameters of the best validation epoch (the last epoch without a
    /// validation corpus), rounded to checkpoint precision.
    pub best: RankerParams,
    pub best_epoch: usize,
    /// Final parameters at full precision.
    pub last: RankerParams,
    pub ranker: RankerConfig,
    pub metrics: Vec<EpochMetrics>,
    pub n_examples: usize,
}

fn io(e: std::io::Error, what: &Path) -> TrainError {
    TrainError::Io(format!("{}: {e}", what.display()))
}

/// Loss and gradient step over one batch; returns the mean batch loss.
pub fn train_step(
    params: &mut RankerParams,
    state: &mut OptimizerState,
    ranker: &RankerConfig,
    config: &TrainConfig,
    batch: &[&TrainExample],
) -> Result<f64, TrainError> {
    let packed = pack_batch(batch.iter().map(|e| &e.encoded));
    let out = forward_packed(params, ranker, &packed)?;
    let targets: Vec<(usize, usize)> = batch
        .iter()
        .map(|e| match ranker.scoring {
            crate::ranker::Scoring::Joint => (e.target_step, e.target_cand),
            crate::ranker::Scoring::ActionOnly => (0, e.target_cand),
        })
        .collect();
    let (loss, dlogits) = ce_loss_packed(&out.logits, &targets)?;
    let mut grads = params.zeros_like();
    backward_packed(params, ranker, &packed, &out, &dlogits, &mut grads)?;
    adamw_step(params, &grads, state, config);
    Ok(loss)
}

/// Trains from scratch. With `out_dir`, writes `metrics.jsonl`, `last.ckpt`
/// and `best.ckpt` (a copy of the best-validation checkpoint).
pub fn train(
    train_corpus: &Corpus,
    val_corpus: Option<&Corpus>,
    embedder: &Embedder,
    ranker: &RankerConfig,
    config: &TrainConfig,
    out_dir: Option<&Path>,
    on_epoch: &mut dyn FnMut(&EpochMetrics),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let ranker = config.ranker_config(ranker);
    ranker.validate()?;
    if ranker.input_dim != embedder.dim() {
        return Err(TrainError::BadConfig(format!(
            "ranker input_dim {} differs from embedding dim {}",
            ranker.input_dim,
            embedder.dim()
        )));
    }
    if config.ablation != Ablation::NoRetrieval && config.k_ep + 2 > ranker.max_candidates {
        return Err(TrainError::BadConfig(format!(
            "k_ep {} plus no_op and the forced target exceeds max_candidates {}",
            config.k_ep, ranker.max_candidates
        )));
    }
    let spec = config.candidate_spec(&ranker);
    let mut cache = EmbedCache::new(embedder);
    let examples = build_examples(train_corpus, &mut cache, &spec, &ranker, config.zero_label)?;
    let val = match val_corpus {
        Some(v) if !v.is_empty() => Some((v, eval::prepare(v, &mut cache, &spec, &ranker)?)),
        _ => None,
    };
    let metrics_path = out_dir.map(|d| d.join("metrics.jsonl"));
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| io(e, dir))?;
        let p = metrics_path.as_ref().unwrap();
        fs::write(p, b"").map_err(|e| io(e, p))?;
    }

    let mut params = RankerParams::init(&ranker, config.seed);
    let mut state = OptimizerState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut metrics = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, RankerParams)> = None;
    let started = Instant::now();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&TrainExample> = chunk.iter().map(|&i| &examples[i]).collect();
            loss_sum += train_step(&mut params, &mut state, &ranker, config, &batch)? * batch.len() as f64;
        }
        let train_loss = if examples.is_empty() { 0.0 } else { loss_sum / examples.len() as f64 };
        let rounded = params.rounded_f32();
        let val_acc = match &val {
            Some((corpus, prepared)) => {
                let preds = eval::predict_prepared(&rounded, &ranker, corpus, prepared, false)?;
                Some(eval::selection_acc(&preds, corpus)?.pair)
            }
            None => None,
        };
        let wall_ms = if config.log_wall_time { started.elapsed().as_millis() as u64 } else { 0 };
        let record = EpochMetrics { epoch, train_loss, val_selection_acc: val_acc, wall_ms };
        let improved = match (&best, val_acc) {
            (None, _) => true,
            (Some(_), None) => true,
            (Some((b, _, _)), Some(a)) => a > *b,
        };
        if improved {
            best = Some((val_acc.unwrap_or(f64::NEG_INFINITY), epoch, rounded.clone()));
        }
        if let Some(dir) = out_dir {
            let p = metrics_path.as_ref().unwrap();
            let mut f = fs::OpenOptions::new().append(true).open(p).map_err(|e| io(e, p))?;
            writeln!(f, "{}", serde_json::to_string(&record).expect("plain struct")).map_err(|e| io(e, p))?;
            save_checkpoint(&dir.join("last.ckpt"), &params, &ranker)?;
            if improved {
                save_checkpoint(&dir.join("best.ckpt"), &rounded, &ranker)?;
            }
        }
        on_epoch(&record);
        metrics.push(record);
    }
    let (best_params, best_epoch) = match best {
        Some((_, e, p)) => (p, e),
        None => {
            if let Some(dir) = out_dir {
                save_checkpoint(&dir.join("last.ckpt"), &params, &ranker)?;
                save_checkpoint(&dir.join("best.ckpt"), &params, &ranker)?;
            }
            (params.rounded_f32(), 0)
        }
    };
    Ok(TrainOutcome { best: best_params, best_epoch, last: params, ranker, metrics, n_examples: examples.len() })
}
