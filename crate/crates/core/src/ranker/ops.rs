//! Building blocks shared by the forward and backward passes.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::RankerError;

pub const LN_EPS: f64 = 1e-5;

/// Sinusoidal encoding: `PE(pos, 2i) = sin(pos / 10000^(2i/d))`,
/// `PE(pos, 2i+1) = cos(pos / 10000^(2i/d))`, positions from 0.
pub fn positional_encoding(steps: usize, d_model: usize) -> Result<Array2<f64>, RankerError> {
    if d_model % 2 != 0 {
        return Err(RankerError::OddDim(d_model));
    }
    Ok(Array2::from_shape_fn((steps, d_model), |(pos, j)| {
        let i = (j / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * i / d_model as f64);
        if j % 2 == 0 { angle.sin() } else { angle.cos() }
    }))
}

/// Row softmax restricted to `mask`; masked entries get weight 0.
pub(crate) fn masked_softmax_rows(scores: &mut Array2<f64>, mask: &[bool]) {
    for mut row in scores.rows_mut() {
        let mut max = f64::NEG_INFINITY;
        for (x, &m) in row.iter().zip(mask) {
            if m && *x > max {
                max = *x;
            }
        }
        let mut sum = 0.0;
        for (x, &m) in row.iter_mut().zip(mask) {
            *x = if m { (*x - max).exp() } else { 0.0 };
            sum += *x;
        }
        row.mapv_inplace(|x| x / sum);
    }
}

pub(crate) fn softmax_rows(scores: &mut Array2<f64>) {
    for mut row in scores.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut sum = 0.0;
        row.mapv_inplace(|x| {
            let e = (x - max).exp();
            sum += e;
            e
        });
        row.mapv_inplace(|x| x / sum);
    }
}

/// Scaled dot-product attention `softmax(Q Kᵀ / √d_k) V` over the keys whose
/// `key_mask` entry is true. Returns the output and the attention weights.
pub fn attention(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    key_mask: &[bool],
) -> Result<(Array2<f64>, Array2<f64>), RankerError> {
    if q.ncols() != k.ncols() || k.nrows() != v.nrows() || key_mask.len() != k.nrows() {
        return Err(RankerError::ShapeMismatch(format!(
            "attention: Q {:?}, K {:?}, V {:?}, mask {}",
            q.dim(),
            k.dim(),
            v.dim(),
            key_mask.len()
        )));
    }
    if !key_mask.iter().any(|&m| m) {
        return Err(RankerError::AllKeysMasked);
    }
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let mut p = q.dot(&k.t()) * scale;
    masked_softmax_rows(&mut p, key_mask);
    Ok((p.dot(&v), p))
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

/// Per-row layer normalisation. Returns the output, the normalised input and
/// the per-row inverse standard deviation.
pub(crate) fn layer_norm(
    x: &Array2<f64>,
    gain: ArrayView1<f64>,
    bias: ArrayView1<f64>,
) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let n = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, inv) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / n;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / n;
        *inv = 1.0 / (var + LN_EPS).sqrt();
        let s = *inv;
        row.mapv_inplace(|v| v * s);
    }
    let y = &xhat * &gain + &bias;
    (y, xhat, inv_std)
}

/// Backward of [`layer_norm`]: accumulates gain/bias gradients and returns dx.
pub(crate) fn layer_norm_backward(
    dy: &Array2<f64>,
    xhat: &Array2<f64>,
    inv_std: &Array1<f64>,
    gain: ArrayView1<f64>,
    d_gain: &mut Array1<f64>,
    d_bias: &mut Array1<f64>,
) -> Array2<f64> {
    *d_gain += &(dy * xhat).sum_axis(Axis(0));
    *d_bias += &dy.sum_axis(Axis(0));
    let n = dy.ncols() as f64;
    let mut dx = dy * &gain;
    for ((mut row, xh), &inv) in dx.rows_mut().into_iter().zip(xhat.rows()).zip(inv_std) {
        let mean_d = row.sum() / n;
        let mean_dx = row.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n;
        for (d, &h) in row.iter_mut().zip(xh) {
            *d = inv * (*d - mean_d - h * mean_dx);
        }
    }
    dx
}


#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn pe_known_values() {
        let pe = positional_encoding(4, 8).unwrap();
        assert_eq!(pe.row(0).to_vec(), vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!((pe[[1, 0]] - 0.841471).abs() < 1e-6);
        assert!(pe.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(positional_encoding(3, 7).unwrap_err(), RankerError::OddDim(7));
    }

    #[test]
    fn single_key_returns_its_value_row() {
        let q = array![[0.3, -2.0], [5.0, 1.0]];
        let k = array![[1.0, 1.0], [9.0, -4.0], [0.5, 0.5]];
        let v = array![[1.0, 2.0, 3.0], [-7.25, 0.125, 4.5], [0.0, 0.0, 1.0]];
        let (out, w) = attention(q.view(), k.view(), v.view(), &[false, true, false]).unwrap();
        for row in out.rows() {
            assert_eq!(row.to_vec(), vec![-7.25, 0.125, 4.5]);
        }
        assert_eq!(w.column(0).to_vec(), vec![0.0, 0.0]);
        let none = attention(q.view(), k.view(), v.view(), &[false; 3]);
        assert_eq!(none.unwrap_err(), RankerError::AllKeysMasked);
    }

    #[test]
    fn weights_sum_to_one() {
        let q = Array2::from_shape_fn((5, 4), |(i, j)| (i as f64 - j as f64) * 0.7);
        let k = Array2::from_shape_fn((6, 4), |(i, j)| ((i * j) as f64).sin() * 3.0);
        let v = Array2::from_shape_fn((6, 3), |(i, j)| (i + j) as f64);
        let (_, w) = attention(q.view(), k.view(), v.view(), &[true, false, true, true, false, true]).unwrap();
        for row in w.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn two_by_two_matches_hand_computation() {
        // Q = K = ones, V = identity: both keys score 2/sqrt(2), weights 1/2 each.
        let ones = Array2::<f64>::ones((2, 2));
        let eye = Array2::<f64>::eye(2);
        let (out, _) = attention(ones.view(), ones.view(), eye.view(), &[true, true]).unwrap();
        for x in out.iter() {
            assert!((x - 0.5).abs() < 1e-9);
        }
        // Q = identity, K = ones, V = identity: same uniform weights.
        let (out, _) = attention(eye.view(), ones.view(), eye.view(), &[true, true]).unwrap();
        assert!(out.iter().all(|x| (x - 0.5).abs() < 1e-9));
        // Q = identity, K = identity, V = [[1,2],[3,4]]:
        // row 0 weights softmax([1,0]/sqrt2) = [0.6698, 0.3302] -> [1.6605, 2.6605]
        let v = array![[1.0, 2.0], [3.0, 4.0]];
        let (out, _) = attention(eye.view(), eye.view(), v.view(), &[true, true]).unwrap();
        let e = (1.0f64 / 2f64.sqrt()).exp();
        let w0 = e / (e + 1.0);
        let expected = [w0 + 3.0 * (1.0 - w0), 2.0 * w0 + 4.0 * (1.0 - w0)];
        assert!((out[[0, 0]] - expected[0]).abs() < 1e-9 && (out[[0, 1]] - expected[1]).abs() < 1e-9);
        assert!((out[[0, 0]] - 1.660_476_901_346_686).abs() < 1e-6);
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for x in [-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let num = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((num - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
