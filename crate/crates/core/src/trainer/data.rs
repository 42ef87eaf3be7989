//! Candidate sets, embedding lookup and batch packing.

use std::collections::HashMap;

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::embedding::{retrieve, Embedder};
use crate::episode::{ActionToken, Episode};
use crate::ranker::{PackedInput, Scoring, Span};

/// Model variants compared in the ablation sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    /// Skip retrieval: the candidates are the robot vocabulary, truncated to `max_candidates`.
    NoRetrieval,
    /// Score candidates only; the step comes from cross-attention.
    ActionOnly,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::Full, Ablation::NoRetrieval, Ablation::ActionOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoRetrieval => "no_retrieval",
            Ablation::ActionOnly => "action_only",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.as_str() == s)
    }

    pub fn scoring(self) -> Scoring {
        match self {
            Ablation::ActionOnly => Scoring::ActionOnly,
            _ => Scoring::Joint,
        }
    }
}

/// How an episode's candidate list is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CandidateSpec {
    pub ablation: Ablation,
    /// Per-step list length (kept for analysis; does not affect the candidates).
    pub k_step: usize,
    pub k_ep: usize,
    pub max_candidates: usize,
}

/// Candidate tokens for `episode`. With `force`, the token is guaranteed to be
/// present (teacher forcing during training).
pub fn candidates(
    episode: &Episode,
    embedder: &Embedder,
    spec: &CandidateSpec,
    force: Option<&ActionToken>,
) -> Result<Vec<ActionToken>, TrainError> {
    let list = match spec.ablation {
        Ablation::Full | Ablation::ActionOnly => {
            retrieve(episode, embedder, spec.k_step, spec.k_ep, force)?.episode_candidates
        }
        Ablation::NoRetrieval => {
            let mut list: Vec<ActionToken> = episode.robot_vocab.iter().take(spec.max_candidates).cloned().collect();
            if let Some(f) = force {
                if !list.contains(f) {
                    if !episode.robot_vocab.contains(f) {
                        return Err(TrainError::TargetMissing {
                            episode_id: episode.episode_id.clone(),
                            token: f.to_string(),
                        });
                    }
                    *list.last_mut().expect("robot_vocab is non-empty") = f.clone();
                }
            }
            list
        }
    };
    if list.len() > spec.max_candidates {
        return Err(TrainError::BadConfig(format!(
            "episode {} yields {} candidates, max_candidates is {}",
            episode.episode_id,
            list.len(),
            spec.max_candidates
        )));
    }
    Ok(list)
}

/// Memoised token embeddings.
pub struct EmbedCache<'a> {
    embedder: &'a Embedder,
    map: HashMap<ActionToken, Vec<f64>>,
}

impl<'a> EmbedCache<'a> {
    pub fn new(embedder: &'a Embedder) -> Self {
        EmbedCache { embedder, map: HashMap::new() }
    }

    pub fn embedder(&self) -> &'a Embedder {
        self.embedder
    }

    /// Row-stacked embeddings of `tokens`.
    pub fn matrix(&mut self, tokens: &[ActionToken]) -> Result<Array2<f64>, TrainError> {
        let dim = self.embedder.dim();
        let mut m = Array2::zeros((tokens.len(), dim));
        for (i, t) in tokens.iter().enumerate() {
            if !self.map.contains_key(t) {
                let v = self.embedder.embed(t)?;
                self.map.insert(t.clone(), v);
            }
            let v = &self.map[t];
            m.row_mut(i).assign(&ndarray::ArrayView1::from(v.as_slice()));
        }
        Ok(m)
    }
}

/// One episode ready for the ranker.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub candidates: Vec<ActionToken>,
    /// `S × D` step embeddings.
    pub steps: Array2<f64>,
    /// `C × D` candidate embeddings.
    pub cands: Array2<f64>,
}

impl Encoded {
    pub fn build(episode: &Episode, candidates: Vec<ActionToken>, cache: &mut EmbedCache) -> Result<Self, TrainError> {
        let steps = cache.matrix(&episode.human_task_seq)?;
        let cands = cache.matrix(&candidates)?;
        Ok(Encoded { candidates, steps, cands })
    }
}

/// Concatenates encoded examples into one packed batch.
pub fn pack_batch<'e>(items: impl IntoIterator<Item = &'e Encoded>) -> PackedInput {
    let items: Vec<&Encoded> = items.into_iter().collect();
    let dim = items.first().map_or(0, |e| e.steps.ncols());
    let mut spans = Vec::with_capacity(items.len());
    let mut step_pos = Vec::new();
    let (mut s0, mut c0) = (0, 0);
    for e in &items {
        let (s_len, c_len) = (e.steps.nrows(), e.cands.nrows());
        spans.push(Span { s0, s_len, c0, c_len });
        step_pos.extend(0..s_len);
        s0 += s_len;
        c0 += c_len;
    }
    let stack = |views: Vec<ArrayView2<f64>>| {
        if views.is_empty() {
            Array2::zeros((0, dim))
        } else {
            concatenate(Axis(0), &views).expect("equal widths")
        }
    };
    PackedInput {
        steps: stack(items.iter().map(|e| e.steps.view()).collect()),
        cands: stack(items.iter().map(|e| e.cands.view()).collect()),
        step_pos,
        spans,
    }
}
