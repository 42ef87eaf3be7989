//! Cross-entropy over the flattened logit grid.

use ndarray::{Array2, Array3};

use super::TrainError;
use crate::ranker::LogitMatrix;

/// Log-sum-exp and softmax of `values`, shifted by the maximum.
fn softmax(values: &[f64]) -> (f64, Vec<f64>) {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    (max + sum.ln(), exps.into_iter().map(|e| e / sum).collect())
}

/// Mean batch loss `-log softmax(z)[y]` over unmasked cells, where the target
/// of example `b` is the flat index `s * C + c` into its `S × C` slice. The
/// gradient is `(softmax - onehot) / B` at unmasked cells and 0 elsewhere.
pub fn ce_loss(logits: &LogitMatrix, targets: &[usize]) -> Result<(f64, Array3<f64>), TrainError> {
    let (b, s_rows, c_max) = logits.values.dim();
    if targets.len() != b {
        return Err(TrainError::BadConfig(format!("{} targets for a batch of {b}", targets.len())));
    }
    let mut grad = Array3::zeros((b, s_rows, c_max));
    let mut total = 0.0;
    for (e, &y) in targets.iter().enumerate() {
        let (ys, yc) = (y / c_max, y % c_max);
        if ys >= s_rows || !logits.is_live(e, ys, yc) {
            return Err(TrainError::TargetMasked { example: e, target: y });
        }
        let live: Vec<(usize, usize)> =
            (0..s_rows).flat_map(|s| (0..c_max).map(move |c| (s, c))).filter(|&(s, c)| logits.is_live(e, s, c)).collect();
        let vals: Vec<f64> = live.iter().map(|&(s, c)| logits.values[[e, s, c]]).collect();
        let (lse, probs) = softmax(&vals);
        total += lse - logits.values[[e, ys, yc]];
        for (&(s, c), p) in live.iter().zip(probs) {
            let onehot = if (s, c) == (ys, yc) { 1.0 } else { 0.0 };
            grad[[e, s, c]] = (p - onehot) / b as f64;
        }
    }
    Ok((total / b as f64, grad))
}

/// Same loss on packed per-example logits with `(step, candidate)` targets.
pub fn ce_loss_packed(logits: &[Array2<f64>], targets: &[(usize, usize)]) -> Result<(f64, Vec<Array2<f64>>), TrainError> {
    let b = logits.len();
    if targets.len() != b {
        return Err(TrainError::BadConfig(format!("{} targets for a batch of {b}", targets.len())));
    }
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(b);
    for (e, (m, &(s, c))) in logits.iter().zip(targets).enumerate() {
        if s >= m.nrows() || c >= m.ncols() {
            return Err(TrainError::TargetMasked { example: e, target: s * m.ncols() + c });
        }
        let flat = m.as_standard_layout();
        let (lse, probs) = softmax(flat.as_slice().expect("standard layout"));
        total += lse - m[[s, c]];
        let mut g = Array2::from_shape_vec(m.raw_dim(), probs).expect("same size");
        g[[s, c]] -= 1.0;
        g /= b as f64;
        grads.push(g);
    }
    Ok((total / b.max(1) as f64, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ranker::MASKED_LOGIT;
    use ndarray::Array2;

    fn matrix(values: Array3<f64>, step_mask: Array2<bool>, cand_mask: Array2<bool>) -> LogitMatrix {
        LogitMatrix { values, step_mask, cand_mask }
    }

    #[test]
    fn uniform_over_twenty_cells_is_ln_twenty() {
        let mut sm = Array2::from_elem((1, 5), true);
        sm[[0, 4]] = false;
        let mut cm = Array2::from_elem((1, 6), true);
        cm[[0, 5]] = false;
        let mut v = Array3::from_elem((1, 5, 6), 0.37);
        v.slice_mut(ndarray::s![0, 4, ..]).fill(MASKED_LOGIT);
        v.slice_mut(ndarray::s![0, .., 5]).fill(MASKED_LOGIT);
        let (loss, grad) = ce_loss(&matrix(v, sm, cm), &[2 * 6 + 3]).unwrap();
        assert!((loss - 20f64.ln()).abs() < 1e-9);
        assert!((loss - 2.995732).abs() < 1e-6);
        assert!(grad.sum().abs() < 1e-9);
        assert_eq!(grad[[0, 4, 0]], 0.0);
        assert_eq!(grad[[0, 0, 5]], 0.0);
    }

    #[test]
    fn saturated_target_has_zero_loss() {
        let mut v = Array3::zeros((1, 2, 2));
        v[[0, 1, 0]] = 1e9;
        let m = matrix(v, Array2::from_elem((1, 2), true), Array2::from_elem((1, 2), true));
        let (loss, _) = ce_loss(&m, &[2]).unwrap();
        assert!(loss.abs() < 1e-12);
    }

    /// Logits `sin(1.3 i + 0.7) * 2` over a 2x3x4 grid, column 2 masked in
    /// example 0 and row 1 masked in example 1; targets 5 and 11. Expected
    /// loss from `tests/oracles/ce_loss.py` (brute-force log-sum-exp).
    #[test]
    fn matches_brute_force_oracle() {
        let v = Array3::from_shape_fn((2, 3, 4), |(b, s, c)| ((b * 12 + s * 4 + c) as f64 * 1.3 + 0.7).sin() * 2.0);
        let sm = ndarray::array![[true, true, true], [true, false, true]];
        let cm = ndarray::array![[true, true, false, true], [true, true, true, true]];
        let mut masked = v.clone();
        for b in 0..2 {
            for s in 0..3 {
                for c in 0..4 {
                    if !(sm[[b, s]] && cm[[b, c]]) {
                        masked[[b, s, c]] = MASKED_LOGIT;
                    }
                }
            }
        }
        let (loss, grad) = ce_loss(&matrix(masked, sm, cm), &[5, 11]).unwrap();
        assert!((loss - CE_ORACLE).abs() < 1e-10, "{loss}");
        for b in 0..2 {
            let row_sum: f64 = grad.slice(ndarray::s![b, .., ..]).sum();
            assert!(row_sum.abs() < 1e-9);
        }
    }

    const CE_ORACLE: f64 = 2.889177922054599;

    #[test]
    fn masked_target_is_rejected() {
        let mut cm = Array2::from_elem((1, 3), true);
        cm[[0, 1]] = false;
        let m = matrix(Array3::zeros((1, 2, 3)), Array2::from_elem((1, 2), true), cm);
        assert!(matches!(ce_loss(&m, &[4]), Err(TrainError::TargetMasked { .. })));
        assert!(matches!(ce_loss(&m, &[6]), Err(TrainError::TargetMasked { .. })));
    }

    #[test]
    fn packed_agrees_with_padded() {
        let a = Array2::from_shape_fn((2, 3), |(s, c)| (s * 3 + c) as f64 * 0.4 - 1.0);
        let b = Array2::from_shape_fn((1, 2), |(_, c)| c as f64);
        let (lp, gp) = ce_loss_packed(&[a.clone(), b.clone()], &[(1, 2), (0, 0)]).unwrap();
        let mut v = Array3::from_elem((2, 2, 3), MASKED_LOGIT);
        v.slice_mut(ndarray::s![0, .., ..]).assign(&a);
        v.slice_mut(ndarray::s![1, 0, ..2]).assign(&b.row(0));
        let sm = ndarray::array![[true, true], [true, false]];
        let cm = ndarray::array![[true, true, true], [true, true, false]];
        let (l, g) = ce_loss(&matrix(v, sm, cm), &[5, 0]).unwrap();
        assert!((l - lp).abs() < 1e-12);
        assert!((g[[0, 1, 2]] - gp[0][[1, 2]]).abs() < 1e-15);
        assert!((g[[1, 0, 1]] - gp[1][[0, 1]]).abs() < 1e-15);
    }
}
