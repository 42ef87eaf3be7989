//! Packed forward and reverse-mode backward passes.
//!
//! A batch is stored as two row-stacked matrices: every real (unmasked) step of
//! every example, and every real candidate. Padding never enters the
//! computation, so masked content cannot influence any logit. Row-wise maps
//! (projections, feed-forward, layer norm) run as single large matrix
//! products; attention and pair scoring run per example.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use super::ops::{gelu, gelu_grad, layer_norm, layer_norm_backward, positional_encoding, softmax_rows};
use super::params::{EncoderLayer, Linear, RankerParams};
use super::{RankerConfig, RankerError, Scoring};

/// Row ranges of one example inside the packed step and candidate matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub s0: usize,
    pub s_len: usize,
    pub c0: usize,
    pub c_len: usize,
}

/// Real rows of a batch, stacked.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedInput {
    /// `N_s × D` step embeddings.
    pub steps: Array2<f64>,
    /// `N_c × D` candidate embeddings.
    pub cands: Array2<f64>,
    /// Original sequence position of each step row (drives the positional encoding).
    pub step_pos: Vec<usize>,
    pub spans: Vec<Span>,
}

impl PackedInput {
    pub fn check(&self, config: &RankerConfig) -> Result<(), RankerError> {
        let bad = |m: String| Err(RankerError::ShapeMismatch(m));
        if self.steps.ncols() != config.input_dim || self.cands.ncols() != config.input_dim {
            return bad(format!(
                "embeddings have {} / {} columns, model expects {}",
                self.steps.ncols(),
                self.cands.ncols(),
                config.input_dim
            ));
        }
        if self.step_pos.len() != self.steps.nrows() {
            return bad("one position per step row required".into());
        }
        let (mut s, mut c) = (0, 0);
        for span in &self.spans {
            if span.s0 != s || span.c0 != c {
                return bad("spans must tile the packed rows in order".into());
            }
            if span.s_len == 0 {
                return Err(RankerError::AllKeysMasked);
            }
            if span.c_len == 0 {
                return bad("example without candidates".into());
            }
            if span.s_len > config.max_steps || span.c_len > config.max_candidates {
                return bad(format!(
                    "example with {} steps and {} candidates exceeds {}x{}",
                    span.s_len, span.c_len, config.max_steps, config.max_candidates
                ));
            }
            s += span.s_len;
            c += span.c_len;
        }
        if s != self.steps.nrows() || c != self.cands.nrows() {
            return bad("spans do not cover the packed rows".into());
        }
        if self.step_pos[..].iter().any(|&p| p >= config.max_steps) {
            return bad("step position beyond max_steps".into());
        }
        Ok(())
    }
}

struct AttnCache {
    /// Per example, per head attention weights (queries × keys).
    probs: Vec<Vec<Array2<f64>>>,
}

struct LayerCache {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: AttnCache,
    ctx: Array2<f64>,
    xhat1: Array2<f64>,
    inv1: Array1<f64>,
    y1: Array2<f64>,
    f1: Array2<f64>,
    g: Array2<f64>,
    xhat2: Array2<f64>,
    inv2: Array1<f64>,
}

/// Everything the backward pass needs.
pub struct ForwardCache {
    layers: Vec<LayerCache>,
    ap: Array2<f64>,
    hx: Array2<f64>,
    cq: Array2<f64>,
    ck: Array2<f64>,
    cv: Array2<f64>,
    cross: AttnCache,
    cctx: Array2<f64>,
    aatt: Array2<f64>,
    /// Step-side MLP pre-activation: per step row (joint) or per example (action-only).
    u: Array2<f64>,
    /// Candidate-side MLP pre-activation, per candidate row.
    vv: Array2<f64>,
    pooled: Array2<f64>,
}

pub struct PackedOutput {
    /// Per example: `S × C` (joint) or `1 × C` (action-only) logits.
    pub logits: Vec<Array2<f64>>,
    pub cache: ForwardCache,
}

impl PackedOutput {
    /// Head-averaged cross-attention weights of example `e`, `C × S`.
    pub fn cross_attention(&self, e: usize) -> Array2<f64> {
        let heads = &self.cache.cross.probs[e];
        let mut avg = heads[0].clone();
        for h in &heads[1..] {
            avg += h;
        }
        avg / heads.len() as f64
    }
}

type Ranges<'a> = &'a [(usize, usize)];

/// Multi-head attention of packed queries over packed keys, example by example.
fn multi_head(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    q_ranges: Ranges,
    k_ranges: Ranges,
    heads: usize,
) -> (Array2<f64>, AttnCache) {
    let dk = q.ncols() / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut ctx = Array2::zeros((q.nrows(), q.ncols()));
    let mut probs = Vec::with_capacity(q_ranges.len());
    for (&(q0, nq), &(k0, nk)) in q_ranges.iter().zip(k_ranges) {
        let mut per_head = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = h * dk..(h + 1) * dk;
            let qh = q.slice(s![q0..q0 + nq, cols.clone()]);
            let kh = k.slice(s![k0..k0 + nk, cols.clone()]);
            let vh = v.slice(s![k0..k0 + nk, cols.clone()]);
            let mut p = qh.dot(&kh.t()) * scale;
            softmax_rows(&mut p);
            ctx.slice_mut(s![q0..q0 + nq, cols]).assign(&p.dot(&vh));
            per_head.push(p);
        }
        probs.push(per_head);
    }
    (ctx, AttnCache { probs })
}

/// Backward of [`multi_head`]; returns (dq, dk, dv).
fn multi_head_backward(
    dctx: &Array2<f64>,
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    cache: &AttnCache,
    q_ranges: Ranges,
    k_ranges: Ranges,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let heads = cache.probs.first().map_or(1, Vec::len);
    let dk_dim = q.ncols() / heads;
    let scale = 1.0 / (dk_dim as f64).sqrt();
    let mut dq = Array2::zeros(q.raw_dim());
    let mut dk = Array2::zeros(k.raw_dim());
    let mut dv = Array2::zeros(v.raw_dim());
    for (e, (&(q0, nq), &(k0, nk))) in q_ranges.iter().zip(k_ranges).enumerate() {
        for h in 0..heads {
            let cols = h * dk_dim..(h + 1) * dk_dim;
            let p = &cache.probs[e][h];
            let dch = dctx.slice(s![q0..q0 + nq, cols.clone()]);
            let qh = q.slice(s![q0..q0 + nq, cols.clone()]);
            let kh = k.slice(s![k0..k0 + nk, cols.clone()]);
            let vh = v.slice(s![k0..k0 + nk, cols.clone()]);
            let dp = dch.dot(&vh.t());
            dv.slice_mut(s![k0..k0 + nk, cols.clone()]).assign(&p.t().dot(&dch));
            let mut ds = &dp * p;
            for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                let dot = row.sum();
                row.zip_mut_with(&prow, |d, &pp| *d -= pp * dot);
            }
            ds *= scale;
            dq.slice_mut(s![q0..q0 + nq, cols.clone()]).assign(&ds.dot(&kh));
            dk.slice_mut(s![k0..k0 + nk, cols]).assign(&ds.t().dot(&qh));
        }
    }
    (dq, dk, dv)
}

/// `dW += xᵀ dy`, `db += Σ dy`, returns `dy Wᵀ` when `want_dx`.
fn linear_backward(lin: &Linear, grad: &mut Linear, x: ArrayView2<f64>, dy: &Array2<f64>, want_dx: bool) -> Option<Array2<f64>> {
    general_mat_mul(1.0, &x.t(), dy, 1.0, &mut grad.w);
    grad.b += &dy.sum_axis(Axis(0));
    want_dx.then(|| dy.dot(&lin.w.t()))
}

fn encoder_forward(layer: &EncoderLayer, x: Array2<f64>, ranges: Ranges, heads: usize) -> (Array2<f64>, LayerCache) {
    let q = layer.q.apply(&x);
    let k = layer.k.apply(&x);
    let v = layer.v.apply(&x);
    let (ctx, attn) = multi_head(&q, &k, &v, ranges, ranges, heads);
    let r1 = &x + &layer.o.apply(&ctx);
    let (y1, xhat1, inv1) = layer_norm(&r1, layer.ln1.gain.view(), layer.ln1.bias.view());
    let f1 = layer.ff1.apply(&y1);
    let g = f1.mapv(gelu);
    let r2 = &y1 + &layer.ff2.apply(&g);
    let (out, xhat2, inv2) = layer_norm(&r2, layer.ln2.gain.view(), layer.ln2.bias.view());
    (out, LayerCache { x, q, k, v, attn, ctx, xhat1, inv1, y1, f1, g, xhat2, inv2 })
}

fn encoder_backward(
    layer: &EncoderLayer,
    grad: &mut EncoderLayer,
    cache: &LayerCache,
    dout: &Array2<f64>,
    ranges: Ranges,
) -> Array2<f64> {
    let dr2 = layer_norm_backward(
        dout,
        &cache.xhat2,
        &cache.inv2,
        layer.ln2.gain.view(),
        &mut grad.ln2.gain,
        &mut grad.ln2.bias,
    );
    let mut dg = linear_backward(&layer.ff2, &mut grad.ff2, cache.g.view(), &dr2, true).unwrap();
    dg.zip_mut_with(&cache.f1, |d, &f| *d *= gelu_grad(f));
    let mut dy1 = linear_backward(&layer.ff1, &mut grad.ff1, cache.y1.view(), &dg, true).unwrap();
    dy1 += &dr2;
    let dr1 = layer_norm_backward(
        &dy1,
        &cache.xhat1,
        &cache.inv1,
        layer.ln1.gain.view(),
        &mut grad.ln1.gain,
        &mut grad.ln1.bias,
    );
    let dctx = linear_backward(&layer.o, &mut grad.o, cache.ctx.view(), &dr1, true).unwrap();
    let (dq, dk, dv) = multi_head_backward(&dctx, &cache.q, &cache.k, &cache.v, &cache.attn, ranges, ranges);
    let mut dx = dr1;
    dx += &linear_backward(&layer.q, &mut grad.q, cache.x.view(), &dq, true).unwrap();
    dx += &linear_backward(&layer.k, &mut grad.k, cache.x.view(), &dk, true).unwrap();
    dx += &linear_backward(&layer.v, &mut grad.v, cache.x.view(), &dv, true).unwrap();
    dx
}

fn step_ranges(spans: &[Span]) -> Vec<(usize, usize)> {
    spans.iter().map(|s| (s.s0, s.s_len)).collect()
}

fn cand_ranges(spans: &[Span]) -> Vec<(usize, usize)> {
    spans.iter().map(|s| (s.c0, s.c_len)).collect()
}

/// Pair score `w2 · gelu(u_s + v_c + b1) + b2`.
fn pair_logit(u: ndarray::ArrayView1<f64>, v: ndarray::ArrayView1<f64>, b1: &Array1<f64>, w2: &Array1<f64>, b2: f64) -> f64 {
    let mut acc = b2;
    for j in 0..u.len() {
        acc += w2[j] * gelu(u[j] + v[j] + b1[j]);
    }
    acc
}

fn check_params(params: &RankerParams, config: &RankerConfig) -> Result<(), RankerError> {
    let ok = params.proj_h.w.dim() == (config.input_dim, config.d_model)
        && params.proj_a.w.dim() == (config.input_dim, config.d_model)
        && params.layers.len() == config.n_layers
        && params.layers.iter().all(|l| l.ff1.w.dim() == (config.d_model, 4 * config.d_model))
        && params.mlp_w1_step.dim() == (config.d_model, config.mlp_hidden)
        && params.mlp_w1_cand.dim() == (config.d_model, config.mlp_hidden);
    if ok {
        Ok(())
    } else {
        Err(RankerError::ShapeMismatch("parameters do not match the configuration".into()))
    }
}

/// Both projections are multiplied by `sqrt(d_model)`, as token embeddings are
/// in the standard transformer. Unit-norm inputs would otherwise project to
/// vectors an order of magnitude shorter than the positional encoding.
pub fn embed_scale(config: &RankerConfig) -> f64 {
    (config.d_model as f64).sqrt()
}

pub fn forward_packed(params: &RankerParams, config: &RankerConfig, input: &PackedInput) -> Result<PackedOutput, RankerError> {
    input.check(config)?;
    check_params(params, config)?;
    let srs = step_ranges(&input.spans);
    let crs = cand_ranges(&input.spans);
    let pe = positional_encoding(config.max_steps, config.d_model)?;

    let scale = embed_scale(config);
    let mut x = params.proj_h.apply(&input.steps) * scale;
    for (mut row, &pos) in x.rows_mut().into_iter().zip(&input.step_pos) {
        row += &pe.row(pos);
    }
    let ap = params.proj_a.apply(&input.cands) * scale;
    let mut layers = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let (out, cache) = encoder_forward(layer, x, &srs, config.n_heads);
        layers.push(cache);
        x = out;
    }
    let hx = x;
    let cq = params.cross_q.apply(&ap);
    let ck = params.cross_k.apply(&hx);
    let cv = params.cross_v.apply(&hx);
    let (cctx, cross) = multi_head(&cq, &ck, &cv, &crs, &srs, config.n_heads);
    let aatt = params.cross_o.apply(&cctx);
    let vv = aatt.dot(&params.mlp_w1_cand);
    let b2 = params.mlp_b2[0];

    let mut logits = Vec::with_capacity(input.spans.len());
    let (u, pooled) = match config.scoring {
        Scoring::Joint => {
            let u = hx.dot(&params.mlp_w1_step);
            for span in &input.spans {
                let mut m = Array2::zeros((span.s_len, span.c_len));
                for s in 0..span.s_len {
                    for c in 0..span.c_len {
                        m[[s, c]] = pair_logit(
                            u.row(span.s0 + s),
                            vv.row(span.c0 + c),
                            &params.mlp_b1,
                            &params.mlp_w2,
                            b2,
                        );
                    }
                }
                logits.push(m);
            }
            (u, Array2::zeros((0, config.d_model)))
        }
        Scoring::ActionOnly => {
            let mut pooled = Array2::zeros((input.spans.len(), config.d_model));
            for (e, span) in input.spans.iter().enumerate() {
                let rows = hx.slice(s![span.s0..span.s0 + span.s_len, ..]);
                pooled.row_mut(e).assign(&rows.mean_axis(Axis(0)).unwrap());
            }
            let u = pooled.dot(&params.mlp_w1_step);
            for (e, span) in input.spans.iter().enumerate() {
                let mut m = Array2::zeros((1, span.c_len));
                for c in 0..span.c_len {
                    m[[0, c]] = pair_logit(u.row(e), vv.row(span.c0 + c), &params.mlp_b1, &params.mlp_w2, b2);
                }
                logits.push(m);
            }
            (u, pooled)
        }
    };
    if logits.iter().any(|m| m.iter().any(|v| !v.is_finite())) {
        return Err(RankerError::NonFiniteActivation);
    }
    Ok(PackedOutput {
        logits,
        cache: ForwardCache { layers, ap, hx, cq, ck, cv, cross, cctx, aatt, u, vv, pooled },
    })
}

/// Accumulates parameter gradients for upstream logit gradients `dlogits`
/// (same shapes as the forward logits) into `grads`.
pub fn backward_packed(
    params: &RankerParams,
    config: &RankerConfig,
    input: &PackedInput,
    out: &PackedOutput,
    dlogits: &[Array2<f64>],
    grads: &mut RankerParams,
) -> Result<(), RankerError> {
    if dlogits.len() != out.logits.len() || dlogits.iter().zip(&out.logits).any(|(d, l)| d.dim() != l.dim()) {
        return Err(RankerError::ShapeMismatch("upstream gradient shape differs from logits".into()));
    }
    let cache = &out.cache;
    let srs = step_ranges(&input.spans);
    let crs = cand_ranges(&input.spans);
    let hid = config.mlp_hidden;
    let (b1, w2) = (&params.mlp_b1, &params.mlp_w2);

    let mut du = Array2::<f64>::zeros(cache.u.raw_dim());
    let mut dvv = Array2::<f64>::zeros(cache.vv.raw_dim());
    for (e, span) in input.spans.iter().enumerate() {
        let d = &dlogits[e];
        for (s, drow) in d.rows().into_iter().enumerate() {
            let urow = match config.scoring {
                Scoring::Joint => span.s0 + s,
                Scoring::ActionOnly => e,
            };
            for (c, &dl) in drow.iter().enumerate() {
                if dl == 0.0 {
                    continue;
                }
                let vrow = span.c0 + c;
                grads.mlp_b2[0] += dl;
                for j in 0..hid {
                    let z = cache.u[[urow, j]] + cache.vv[[vrow, j]] + b1[j];
                    grads.mlp_w2[j] += dl * gelu(z);
                    let dz = dl * w2[j] * gelu_grad(z);
                    du[[urow, j]] += dz;
                    dvv[[vrow, j]] += dz;
                    grads.mlp_b1[j] += dz;
                }
            }
        }
    }

    general_mat_mul(1.0, &cache.aatt.t(), &dvv, 1.0, &mut grads.mlp_w1_cand);
    let daatt = dvv.dot(&params.mlp_w1_cand.t());
    let mut dhx = match config.scoring {
        Scoring::Joint => {
            general_mat_mul(1.0, &cache.hx.t(), &du, 1.0, &mut grads.mlp_w1_step);
            du.dot(&params.mlp_w1_step.t())
        }
        Scoring::ActionOnly => {
            general_mat_mul(1.0, &cache.pooled.t(), &du, 1.0, &mut grads.mlp_w1_step);
            let dpooled = du.dot(&params.mlp_w1_step.t());
            let mut dhx = Array2::zeros(cache.hx.raw_dim());
            for (e, span) in input.spans.iter().enumerate() {
                let share = dpooled.row(e).mapv(|v| v / span.s_len as f64);
                for s in 0..span.s_len {
                    dhx.row_mut(span.s0 + s).assign(&share);
                }
            }
            dhx
        }
    };

    let dcctx = linear_backward(&params.cross_o, &mut grads.cross_o, cache.cctx.view(), &daatt, true).unwrap();
    let (dcq, dck, dcv) = multi_head_backward(&dcctx, &cache.cq, &cache.ck, &cache.cv, &cache.cross, &crs, &srs);
    let dap = linear_backward(&params.cross_q, &mut grads.cross_q, cache.ap.view(), &dcq, true).unwrap();
    dhx += &linear_backward(&params.cross_k, &mut grads.cross_k, cache.hx.view(), &dck, true).unwrap();
    dhx += &linear_backward(&params.cross_v, &mut grads.cross_v, cache.hx.view(), &dcv, true).unwrap();

    let mut dx = dhx;
    for (i, layer) in params.layers.iter().enumerate().rev() {
        dx = encoder_backward(layer, &mut grads.layers[i], &cache.layers[i], &dx, &srs);
    }
    let scale = embed_scale(config);
    linear_backward(&params.proj_h, &mut grads.proj_h, input.steps.view(), &(dx * scale), false);
    linear_backward(&params.proj_a, &mut grads.proj_a, input.cands.view(), &(dap * scale), false);
    if !grads.all_finite() {
        return Err(RankerError::NonFiniteGradient);
    }
    Ok(())
}
