//! Predictions, the three benchmark metrics and evaluation reports.
//!
//! SelectionAcc is a strict (step, action) match averaged per episode: an
//! episode with two labels gets one top-1 prediction and contributes the
//! fraction of its labels that prediction hits; a zero-label episode counts
//! as correct iff the action is `no_op`. HSS and success come from replaying
//! the prediction in the simulator.

use std::collections::HashMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::embedding::{cosine, Embedder, EmbeddingError};
use crate::episode::{serialize_corpus, ActionToken, Corpus, Episode};
use crate::ranker::{forward_packed, write_checkpoint, RankerConfig, RankerError, RankerParams, Scoring};
use crate::sim::{RunReport, SimError, Simulator};
use crate::trainer::{candidates, pack_batch, CandidateSpec, EmbedCache, Encoded, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no prediction for episode {0}")]
    MissingPrediction(String),
    #[error("policy `model` needs trained parameters")]
    MissingModel,
    #[error(transparent)]
    Ranker(#[from] RankerError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("{0}")]
    Prepare(Box<TrainError>),
}

impl From<TrainError> for EvalError {
    fn from(e: TrainError) -> Self {
        EvalError::Prepare(Box::new(e))
    }
}

/// A top-1 decision for one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub episode_id: String,
    pub step: usize,
    pub action: ActionToken,
    /// Candidate list the action was chosen from.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidates: Vec<ActionToken>,
    /// Full logit matrix (rows = steps, or a single row for action-only scoring).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logits: Option<Vec<Vec<f64>>>,
}

impl Prediction {
    fn no_op(episode: &Episode) -> Self {
        Prediction {
            episode_id: episode.episode_id.clone(),
            step: 0,
            action: ActionToken::no_op(),
            candidates: vec![],
            logits: None,
        }
    }
}

/// Position of the maximum; ties go to the lowest row-major index.
pub fn argmax_flat(m: &Array2<f64>) -> (usize, usize) {
    let mut best = (0, 0);
    let mut best_v = f64::NEG_INFINITY;
    for ((s, c), &v) in m.indexed_iter() {
        if v > best_v {
            best_v = v;
            best = (s, c);
        }
    }
    best
}

/// Encodes every episode with its retrieved (not teacher-forced) candidates.
/// Episodes without steps map to `None`.
pub fn prepare(
    corpus: &Corpus,
    cache: &mut EmbedCache,
    spec: &CandidateSpec,
    ranker: &RankerConfig,
) -> Result<Vec<Option<Encoded>>, EvalError> {
    corpus
        .episodes
        .iter()
        .map(|ep| {
            if ep.human_task_seq.is_empty() {
                return Ok(None);
            }
            if ep.human_task_seq.len() > ranker.max_steps {
                return Err(EvalError::Ranker(RankerError::ShapeMismatch(format!(
                    "episode {} has {} steps, max_steps is {}",
                    ep.episode_id,
                    ep.human_task_seq.len(),
                    ranker.max_steps
                ))));
            }
            let list = candidates(ep, cache.embedder(), spec, None)?;
            Ok(Some(Encoded::build(ep, list, cache)?))
        })
        .collect()
}

const PREDICT_BATCH: usize = 64;

/// Model predictions for prepared episodes, batched.
pub fn predict_prepared(
    params: &RankerParams,
    ranker: &RankerConfig,
    corpus: &Corpus,
    prepared: &[Option<Encoded>],
    keep_logits: bool,
) -> Result<Vec<Prediction>, EvalError> {
    let mut preds: Vec<Prediction> = corpus.episodes.iter().map(Prediction::no_op).collect();
    let live: Vec<usize> = (0..prepared.len()).filter(|&i| prepared[i].is_some()).collect();
    for chunk in live.chunks(PREDICT_BATCH) {
        let packed = pack_batch(chunk.iter().map(|&i| prepared[i].as_ref().unwrap()));
        let out = forward_packed(params, ranker, &packed)?;
        for (e, &i) in chunk.iter().enumerate() {
            let enc = prepared[i].as_ref().unwrap();
            let m = &out.logits[e];
            let (row, c) = argmax_flat(m);
            let step = match ranker.scoring {
                Scoring::Joint => row,
                Scoring::ActionOnly => {
                    let w = out.cross_attention(e);
                    argmax_flat(&w.row(c).to_owned().insert_axis(ndarray::Axis(0))).1
                }
            };
            let p = &mut preds[i];
            p.step = step;
            p.action = enc.candidates[c].clone();
            p.candidates = enc.candidates.clone();
            if keep_logits {
                p.logits = Some(m.rows().into_iter().map(|r| r.to_vec()).collect());
            }
        }
    }
    Ok(preds)
}

/// Model prediction for a single episode.
pub fn predict(
    params: &RankerParams,
    ranker: &RankerConfig,
    episode: &Episode,
    embedder: &Embedder,
    spec: &CandidateSpec,
) -> Result<Prediction, EvalError> {
    let corpus = Corpus::new(vec![episode.clone()]);
    let mut cache = EmbedCache::new(embedder);
    let prepared = prepare(&corpus, &mut cache, spec, ranker)?;
    Ok(predict_prepared(params, ranker, &corpus, &prepared, true)?.remove(0))
}

/// SelectionAcc variants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionScores {
    /// Strict pair match, averaged per episode (the headline number).
    pub pair: f64,
    /// Strict pair match over (episode, label) units.
    pub pair_units: f64,
    /// Action match only, averaged per episode.
    pub action_only: f64,
}

/// Per-episode strict and action-only scores.
pub fn episode_selection(pred: &Prediction, episode: &Episode) -> (f64, f64, usize, usize) {
    if episode.oracle_labels.is_empty() {
        let hit = pred.action.is_no_op() as usize;
        return (hit as f64, hit as f64, hit, 1);
    }
    let n = episode.oracle_labels.len();
    let pair = episode
        .oracle_labels
        .iter()
        .filter(|l| l.human_step_idx == pred.step && l.best_robot_action == pred.action)
        .count();
    let act = episode.oracle_labels.iter().filter(|l| l.best_robot_action == pred.action).count();
    (pair as f64 / n as f64, act as f64 / n as f64, pair, n)
}

pub fn selection_acc(predictions: &[Prediction], corpus: &Corpus) -> Result<SelectionScores, EvalError> {
    let by_id: HashMap<&str, &Prediction> = predictions.iter().map(|p| (p.episode_id.as_str(), p)).collect();
    let (mut pair, mut act, mut hits, mut units) = (0.0, 0.0, 0usize, 0usize);
    for ep in &corpus.episodes {
        let p = by_id.get(ep.episode_id.as_str()).ok_or_else(|| EvalError::MissingPrediction(ep.episode_id.clone()))?;
        let (a, b, h, u) = episode_selection(p, ep);
        pair += a;
        act += b;
        hits += h;
        units += u;
    }
    let n = corpus.len().max(1) as f64;
    Ok(SelectionScores {
        pair: pair / n,
        pair_units: if units == 0 { 0.0 } else { hits as f64 / units as f64 },
        action_only: act / n,
    })
}

/// Who chooses the assistance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    Model,
    /// Uniform step and uniform retrieved candidate.
    Random,
    /// The (step, candidate) pair of highest cosine similarity, `no_op` excluded.
    CosineTop1,
    /// First oracle label, `no_op` for zero-label episodes.
    Oracle,
    /// Never assist.
    NoOp,
}

impl Policy {
    pub const ALL: [Policy; 5] = [Policy::Model, Policy::Random, Policy::CosineTop1, Policy::Oracle, Policy::NoOp];

    pub fn as_str(self) -> &'static str {
        match self {
            Policy::Model => "model",
            Policy::Random => "random",
            Policy::CosineTop1 => "cosine_top1",
            Policy::Oracle => "oracle",
            Policy::NoOp => "no_op",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub episode_id: String,
    pub n_labels: usize,
    pub step: usize,
    pub action: ActionToken,
    pub selection: f64,
    pub selection_action_only: f64,
    pub hss: i64,
    pub success: bool,
    pub run: RunReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub policy: Policy,
    /// First 16 hex digits of the SHA-256 of the serialized corpus.
    pub corpus_id: String,
    /// First 16 hex digits of the SHA-256 of the evaluation settings (and model).
    pub config_hash: String,
    pub n_episodes: usize,
    pub selection_acc: f64,
    pub selection_acc_units: f64,
    pub selection_acc_action_only: f64,
    /// Signed mean of per-episode HSS.
    pub mean_hss: f64,
    /// Mean of per-episode |HSS|.
    pub mean_abs_hss: f64,
    pub success_acc: f64,
    pub episodes: Vec<EpisodeRow>,
}

pub const CSV_HEADER: &str = "policy,corpus_id,config_hash,n_episodes,selection_acc,selection_acc_units,selection_acc_action_only,mean_hss,mean_abs_hss,success_acc";

impl EvalReport {
    /// Summary as a one-row CSV table (with header).
    pub fn summary_csv(&self) -> String {
        format!(
            "{CSV_HEADER}\n{},{},{},{},{},{},{},{},{},{}\n",
            self.policy.as_str(),
            self.corpus_id,
            self.config_hash,
            self.n_episodes,
            self.selection_acc,
            self.selection_acc_units,
            self.selection_acc_action_only,
            self.mean_hss,
            self.mean_abs_hss,
            self.success_acc
        )
    }

    /// One row per episode.
    pub fn episodes_csv(&self) -> String {
        let mut out = String::from("episode_id,n_labels,step,action,selection,selection_action_only,hss,success\n");
        for r in &self.episodes {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.episode_id, r.n_labels, r.step, r.action, r.selection, r.selection_action_only, r.hss, r.success
            ));
        }
        out
    }

    /// Aggregates recomputed from the per-episode rows.
    pub fn recompute(&self) -> (f64, f64, f64) {
        let n = self.episodes.len().max(1) as f64;
        let sel = self.episodes.iter().map(|r| r.selection).sum::<f64>() / n;
        let hss = self.episodes.iter().map(|r| r.hss as f64).sum::<f64>() / n;
        let succ = self.episodes.iter().filter(|r| r.success).count() as f64 / n;
        (sel, hss, succ)
    }
}

fn short_sha(bytes: &[u8]) -> String {
    hex::encode(&Sha256::digest(bytes)[..8])
}

pub fn corpus_id(corpus: &Corpus) -> String {
    short_sha(&serialize_corpus(corpus))
}

/// Settings that, with the corpus, determine an evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub policy: Policy,
    pub spec: CandidateSpec,
    /// Seed of the random policy.
    pub seed: u64,
    pub keep_logits: bool,
}

fn config_hash(opts: &EvalOptions, embedder: &Embedder, model: Option<(&RankerParams, &RankerConfig)>) -> String {
    let mut h = Sha256::new();
    h.update(
        format!(
            "policy={};ablation={};k_ep={};k_step={};max_candidates={};seed={};embedder={}",
            opts.policy.as_str(),
            opts.spec.ablation.as_str(),
            opts.spec.k_ep,
            opts.spec.k_step,
            opts.spec.max_candidates,
            opts.seed,
            embedder.describe()
        )
        .as_bytes(),
    );
    if let (Policy::Model, Some((p, c))) = (opts.policy, model) {
        h.update(write_checkpoint(p, c));
    }
    hex::encode(&h.finalize()[..8])
}

fn cosine_top1(ep: &Episode, enc: &Encoded) -> Result<Prediction, EvalError> {
    let mut best: Option<(f64, usize, usize)> = None;
    for s in 0..enc.steps.nrows() {
        let hs = enc.steps.row(s).to_vec();
        for (c, tok) in enc.candidates.iter().enumerate() {
            if tok.is_no_op() {
                continue;
            }
            let sim = cosine(&hs, &enc.cands.row(c).to_vec())?;
            if best.is_none_or(|(b, _, _)| sim > b) {
                best = Some((sim, s, c));
            }
        }
    }
    let mut p = Prediction::no_op(ep);
    if let Some((_, s, c)) = best {
        p.step = s;
        p.action = enc.candidates[c].clone();
    }
    p.candidates = enc.candidates.clone();
    Ok(p)
}

/// Predictions of a baseline or the model for every episode, in corpus order.
pub fn policy_predictions(
    corpus: &Corpus,
    embedder: &Embedder,
    model: Option<(&RankerParams, &RankerConfig)>,
    opts: &EvalOptions,
) -> Result<Vec<Prediction>, EvalError> {
    let needs_features = matches!(opts.policy, Policy::Model | Policy::Random | Policy::CosineTop1);
    let ranker = match model {
        Some((_, c)) => c.clone(),
        None => RankerConfig { input_dim: embedder.dim(), max_candidates: opts.spec.max_candidates, ..RankerConfig::default() },
    };
    let prepared = if needs_features {
        let mut cache = EmbedCache::new(embedder);
        prepare(corpus, &mut cache, &opts.spec, &ranker)?
    } else {
        vec![None; corpus.len()]
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let preds = match opts.policy {
        Policy::Model => {
            let (p, c) = model.ok_or(EvalError::MissingModel)?;
            predict_prepared(p, c, corpus, &prepared, opts.keep_logits)?
        }
        Policy::Random => corpus
            .episodes
            .iter()
            .zip(&prepared)
            .map(|(ep, enc)| {
                let mut p = Prediction::no_op(ep);
                if let Some(enc) = enc {
                    p.step = rng.random_range(0..enc.steps.nrows());
                    p.action = enc.candidates[rng.random_range(0..enc.candidates.len())].clone();
                    p.candidates = enc.candidates.clone();
                }
                p
            })
            .collect(),
        Policy::CosineTop1 => corpus
            .episodes
            .iter()
            .zip(&prepared)
            .map(|(ep, enc)| match enc {
                Some(enc) => cosine_top1(ep, enc),
                None => Ok(Prediction::no_op(ep)),
            })
            .collect::<Result<_, _>>()?,
        Policy::Oracle => corpus
            .episodes
            .iter()
            .map(|ep| {
                let mut p = Prediction::no_op(ep);
                if let Some(l) = ep.oracle_labels.first() {
                    p.step = l.human_step_idx;
                    p.action = l.best_robot_action.clone();
                }
                p
            })
            .collect(),
        Policy::NoOp => corpus.episodes.iter().map(Prediction::no_op).collect(),
    };
    Ok(preds)
}

/// Replays `predictions` and aggregates the metrics. Rows are sorted by episode id.
pub fn report_from_predictions(
    corpus: &Corpus,
    predictions: &[Prediction],
    sim: &Simulator,
    policy: Policy,
    config_hash: String,
) -> Result<EvalReport, EvalError> {
    let by_id: HashMap<&str, &Prediction> = predictions.iter().map(|p| (p.episode_id.as_str(), p)).collect();
    let mut rows = Vec::with_capacity(corpus.len());
    for ep in &corpus.episodes {
        let p = by_id.get(ep.episode_id.as_str()).ok_or_else(|| EvalError::MissingPrediction(ep.episode_id.clone()))?;
        let run = if ep.human_task_seq.is_empty() {
            sim.run_unassisted(ep)?
        } else {
            sim.run_assisted(ep, p.step, &p.action)?
        };
        let (selection, selection_action_only, _, _) = episode_selection(p, ep);
        rows.push(EpisodeRow {
            episode_id: ep.episode_id.clone(),
            n_labels: ep.oracle_labels.len(),
            step: p.step,
            action: p.action.clone(),
            selection,
            selection_action_only,
            hss: run.hss,
            success: run.success,
            run,
        });
    }
    rows.sort_by(|a, b| a.episode_id.cmp(&b.episode_id));
    let scores = selection_acc(predictions, corpus)?;
    let n = rows.len().max(1) as f64;
    Ok(EvalReport {
        policy,
        corpus_id: corpus_id(corpus),
        config_hash,
        n_episodes: rows.len(),
        selection_acc: scores.pair,
        selection_acc_units: scores.pair_units,
        selection_acc_action_only: scores.action_only,
        mean_hss: rows.iter().map(|r| r.hss as f64).sum::<f64>() / n,
        mean_abs_hss: rows.iter().map(|r| r.hss.unsigned_abs() as f64).sum::<f64>() / n,
        success_acc: rows.iter().filter(|r| r.success).count() as f64 / n,
        episodes: rows,
    })
}

/// Full evaluation of one policy on `corpus`.
pub fn evaluate(
    corpus: &Corpus,
    embedder: &Embedder,
    sim: &Simulator,
    model: Option<(&RankerParams, &RankerConfig)>,
    opts: &EvalOptions,
) -> Result<EvalReport, EvalError> {
    let preds = policy_predictions(corpus, embedder, model, opts)?;
    report_from_predictions(corpus, &preds, sim, opts.policy, config_hash(opts, embedder, model))
}

#[cfg(test)]
mod tests;
