//! Token embeddings, cosine similarity and top-K candidate retrieval.

mod hashing;
mod table;

use std::cmp::Ordering;

use thiserror::Error;

pub use hashing::HashingEmbedder;
pub use table::{EmbeddingTable, EMB_MAGIC};

use crate::episode::{ActionToken, Episode};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EmbeddingError {
    #[error("token `{0}` is not in the embedding table")]
    TokenMissing(String),
    #[error("zero vector{}", if .0.is_empty() { String::new() } else { format!(" for `{}`", .0) })]
    ZeroVector(String),
    #[error("vector has {got} entries, expected {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("malformed embedding table: {0}")]
    BadFormat(String),
    #[error("episode `{0}` has an empty robot vocabulary")]
    EmptyVocab(String),
    #[error("invalid retrieval sizes: {0}")]
    BadK(String),
    #[error("forced candidate `{0}` is not in robot_vocab")]
    ForceNotInVocab(String),
    #[error("{0}")]
    Io(String),
}

/// Source of token vectors.
#[derive(Debug, Clone, PartialEq)]
pub enum Embedder {
    Table(EmbeddingTable),
    Hashing(HashingEmbedder),
}

impl Embedder {
    pub fn dim(&self) -> usize {
        match self {
            Embedder::Table(t) => t.dim(),
            Embedder::Hashing(h) => h.dim,
        }
    }

    pub fn embed(&self, token: &ActionToken) -> Result<Vec<f64>, EmbeddingError> {
        match self {
            Embedder::Table(t) => t
                .get(token.as_str())
                .map(|v| v.iter().map(|&x| f64::from(x)).collect())
                .ok_or_else(|| EmbeddingError::TokenMissing(token.to_string())),
            Embedder::Hashing(h) => Ok(h.embed(token.as_str())),
        }
    }

    /// Short description used in reports and config snapshots.
    pub fn describe(&self) -> String {
        match self {
            Embedder::Table(t) => format!("table(dim={}, tokens={})", t.dim(), t.len()),
            Embedder::Hashing(h) => format!("hashing(dim={}, seed={})", h.dim, h.seed),
        }
    }
}

pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64, EmbeddingError> {
    if u.len() != v.len() {
        return Err(EmbeddingError::DimMismatch { expected: u.len(), got: v.len() });
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(EmbeddingError::ZeroVector(String::new()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    /// For each human step, `(robot_vocab index, similarity)` in rank order.
    pub per_step_topk: Vec<Vec<(usize, f64)>>,
    /// Candidate tokens handed to the ranker.
    pub episode_candidates: Vec<ActionToken>,
    /// `robot_vocab` index of each episode candidate.
    pub candidate_indices: Vec<usize>,
}

fn rank_desc(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    order
}

/// Per-step top-`k` lists and the episode-level top-`k_ep` candidate set ranked
/// by each action's best similarity to any step. `no_op` and then
/// `force_include` are appended when missing.
pub fn retrieve(
    episode: &Episode,
    embedder: &Embedder,
    k: usize,
    k_ep: usize,
    force_include: Option<&ActionToken>,
) -> Result<RetrievalResult, EmbeddingError> {
    if episode.robot_vocab.is_empty() {
        return Err(EmbeddingError::EmptyVocab(episode.episode_id.clone()));
    }
    if k == 0 || k_ep < 2 {
        return Err(EmbeddingError::BadK(format!("K = {k}, K_ep = {k_ep}; need K >= 1 and K_ep >= 2")));
    }
    let steps = episode.human_task_seq.iter().map(|t| embedder.embed(t)).collect::<Result<Vec<_>, _>>()?;
    let actions = episode.robot_vocab.iter().map(|t| embedder.embed(t)).collect::<Result<Vec<_>, _>>()?;
    let mut best = vec![f64::NEG_INFINITY; actions.len()];
    let mut per_step_topk = Vec::with_capacity(steps.len());
    for h in &steps {
        let sims = actions.iter().map(|a| cosine(h, a)).collect::<Result<Vec<_>, _>>()?;
        for (b, s) in best.iter_mut().zip(&sims) {
            *b = b.max(*s);
        }
        per_step_topk.push(rank_desc(&sims).into_iter().take(k).map(|c| (c, sims[c])).collect());
    }
    let mut candidate_indices: Vec<usize> = rank_desc(&best).into_iter().take(k_ep).collect();
    if let Some(no_op) = episode.robot_vocab.iter().position(ActionToken::is_no_op) {
        if !candidate_indices.contains(&no_op) {
            candidate_indices.push(no_op);
        }
    }
    if let Some(forced) = force_include {
        let idx = episode
            .vocab_index(forced)
            .ok_or_else(|| EmbeddingError::ForceNotInVocab(forced.to_string()))?;
        if !candidate_indices.contains(&idx) {
            candidate_indices.push(idx);
        }
    }
    Ok(RetrievalResult {
        per_step_topk,
        episode_candidates: candidate_indices.iter().map(|&i| episode.robot_vocab[i].clone()).collect(),
        candidate_indices,
    })
}

#[cfg(test)]
mod tests;
