//! AdamW with decoupled weight decay.

use super::TrainConfig;
use crate::ranker::RankerParams;

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: RankerParams,
    pub v: RankerParams,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(params: &RankerParams) -> Self {
        OptimizerState { m: params.zeros_like(), v: params.zeros_like(), t: 0 }
    }
}

/// One update `θ ← θ − lr·(m̂/(√v̂+ε) + wd·θ)` with bias-corrected moments.
pub fn adamw_step(params: &mut RankerParams, grads: &RankerParams, state: &mut OptimizerState, config: &TrainConfig) {
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let (lr, wd, eps) = (config.learning_rate, config.weight_decay, config.epsilon);
    let g_all = grads.tensors();
    let m_all = state.m.tensors_mut();
    let v_all = state.v.tensors_mut();
    for (((_, theta), (_, _, g)), ((_, m), (_, v))) in params.tensors_mut().into_iter().zip(g_all).zip(m_all.into_iter().zip(v_all)) {
        for i in 0..theta.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            theta[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * theta[i]);
        }
    }
}
