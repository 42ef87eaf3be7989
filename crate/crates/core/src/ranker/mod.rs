//! Joint step/action scoring model.
//!
//! Steps and candidates are projected to `d_model`, steps get a sinusoidal
//! position code and pass through a post-norm transformer encoder, candidates
//! attend over the encoded steps, and a two-layer MLP scores every
//! (step, candidate) pair.

mod checkpoint;
mod model;
mod ops;
mod params;

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CKPT_MAGIC};
pub use model::{backward_packed, forward_packed, ForwardCache, PackedInput, PackedOutput, Span};
pub use ops::{attention, gelu, gelu_grad, positional_encoding, LN_EPS};
pub use params::{EncoderLayer, LayerNorm, Linear, RankerParams};

/// Logit written at every masked (step, candidate) cell.
pub const MASKED_LOGIT: f64 = -1e9;

#[derive(Debug, Error, PartialEq)]
pub enum RankerError {
    #[error("model dimension {0} must be even")]
    OddDim(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("every key of an attention row is masked")]
    AllKeysMasked,
    #[error("non-finite activation in forward pass")]
    NonFiniteActivation,
    #[error("non-finite gradient in backward pass")]
    NonFiniteGradient,
    #[error("invalid ranker configuration: {0}")]
    BadConfig(String),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("checkpoint i/o: {0}")]
    Io(String),
}

/// How candidates are scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scoring {
    /// One logit per (step, candidate) pair.
    #[default]
    Joint,
    /// One logit per candidate from mean-pooled step context; the step is
    /// recovered afterwards from cross-attention.
    ActionOnly,
}

impl Scoring {
    fn code(self) -> u8 {
        match self {
            Scoring::Joint => 0,
            Scoring::ActionOnly => 1,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Scoring::Joint),
            1 => Some(Scoring::ActionOnly),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankerConfig {
    pub input_dim: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_hidden: usize,
    pub max_steps: usize,
    pub max_candidates: usize,
    pub scoring: Scoring,
}

impl Default for RankerConfig {
    fn default() -> Self {
        RankerConfig {
            input_dim: 64,
            d_model: 256,
            n_layers: 2,
            n_heads: 4,
            mlp_hidden: 256,
            max_steps: 16,
            max_candidates: 22,
            scoring: Scoring::Joint,
        }
    }
}

impl RankerConfig {
    /// The small configuration used by the gradient checks.
    pub fn tiny() -> Self {
        RankerConfig {
            input_dim: 8,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            mlp_hidden: 16,
            max_steps: 3,
            max_candidates: 4,
            scoring: Scoring::Joint,
        }
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), RankerError> {
        let dims = [
            ("input_dim", self.input_dim),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("mlp_hidden", self.mlp_hidden),
            ("max_steps", self.max_steps),
            ("max_candidates", self.max_candidates),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(RankerError::BadConfig(format!("{name} must be at least 1")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(RankerError::BadConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_model % 2 != 0 {
            return Err(RankerError::OddDim(self.d_model));
        }
        Ok(())
    }
}

/// Padded batch of logits. For [`Scoring::ActionOnly`] the step axis has
/// length 1.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMatrix {
    pub values: Array3<f64>,
    pub step_mask: Array2<bool>,
    pub cand_mask: Array2<bool>,
}

impl LogitMatrix {
    pub fn batch_size(&self) -> usize {
        self.values.len_of(Axis(0))
    }

    /// True when cell (s, c) of example `b` is a real position.
    pub fn is_live(&self, b: usize, s: usize, c: usize) -> bool {
        self.step_mask[[b, s]] && self.cand_mask[[b, c]]
    }
}

/// Packs padded inputs into real rows. Masked rows are dropped entirely.
pub fn pack(
    config: &RankerConfig,
    h_emb: &Array3<f64>,
    a_emb: &Array3<f64>,
    step_mask: &Array2<bool>,
    cand_mask: &Array2<bool>,
) -> Result<PackedInput, RankerError> {
    let (b, s_max, d) = h_emb.dim();
    let (b2, c_max, d2) = a_emb.dim();
    if b != b2 || d != config.input_dim || d2 != config.input_dim {
        return Err(RankerError::ShapeMismatch(format!(
            "H is {b}x{s_max}x{d}, A is {b2}x{c_max}x{d2}, input_dim {}",
            config.input_dim
        )));
    }
    if step_mask.dim() != (b, s_max) || cand_mask.dim() != (b, c_max) {
        return Err(RankerError::ShapeMismatch("mask shapes differ from embeddings".into()));
    }
    if s_max > config.max_steps || c_max > config.max_candidates {
        return Err(RankerError::ShapeMismatch(format!(
            "padded {s_max}x{c_max} exceeds max {}x{}",
            config.max_steps, config.max_candidates
        )));
    }
    let ns = step_mask.iter().filter(|m| **m).count();
    let nc = cand_mask.iter().filter(|m| **m).count();
    let mut steps = Array2::zeros((ns, d));
    let mut cands = Array2::zeros((nc, d));
    let mut step_pos = Vec::with_capacity(ns);
    let mut spans = Vec::with_capacity(b);
    let (mut si, mut ci) = (0, 0);
    for e in 0..b {
        let span_s0 = si;
        let span_c0 = ci;
        for s in 0..s_max {
            if step_mask[[e, s]] {
                steps.row_mut(si).assign(&h_emb.slice(ndarray::s![e, s, ..]));
                step_pos.push(s);
                si += 1;
            }
        }
        for c in 0..c_max {
            if cand_mask[[e, c]] {
                cands.row_mut(ci).assign(&a_emb.slice(ndarray::s![e, c, ..]));
                ci += 1;
            }
        }
        spans.push(Span { s0: span_s0, s_len: si - span_s0, c0: span_c0, c_len: ci - span_c0 });
    }
    Ok(PackedInput { steps, cands, step_pos, spans })
}

/// Scatters packed per-example logits back to padded positions.
pub fn unpack_logits(
    config: &RankerConfig,
    logits: &[Array2<f64>],
    step_mask: &Array2<bool>,
    cand_mask: &Array2<bool>,
) -> LogitMatrix {
    let (b, s_max) = step_mask.dim();
    let c_max = cand_mask.ncols();
    let (rows, out_mask) = match config.scoring {
        Scoring::Joint => (s_max, step_mask.clone()),
        Scoring::ActionOnly => (1, Array2::from_elem((b, 1), true)),
    };
    let mut values = Array3::from_elem((b, rows, c_max), MASKED_LOGIT);
    for (e, m) in logits.iter().enumerate() {
        let real_s: Vec<usize> = match config.scoring {
            Scoring::Joint => (0..s_max).filter(|&s| step_mask[[e, s]]).collect(),
            Scoring::ActionOnly => vec![0],
        };
        let real_c: Vec<usize> = (0..c_max).filter(|&c| cand_mask[[e, c]]).collect();
        for (i, &s) in real_s.iter().enumerate() {
            for (j, &c) in real_c.iter().enumerate() {
                values[[e, s, c]] = m[[i, j]];
            }
        }
    }
    LogitMatrix { values, step_mask: out_mask, cand_mask: cand_mask.clone() }
}

/// Padded forward pass: `B × S_max × D` steps and `B × C_max × D` candidates
/// to a `B × S_max × C_max` logit tensor with masked cells at [`MASKED_LOGIT`].
pub fn forward(
    params: &RankerParams,
    config: &RankerConfig,
    h_emb: &Array3<f64>,
    a_emb: &Array3<f64>,
    step_mask: &Array2<bool>,
    cand_mask: &Array2<bool>,
) -> Result<LogitMatrix, RankerError> {
    config.validate()?;
    let packed = pack(config, h_emb, a_emb, step_mask, cand_mask)?;
    let out = forward_packed(params, config, &packed)?;
    Ok(unpack_logits(config, &out.logits, step_mask, cand_mask))
}
