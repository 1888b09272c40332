//! Masked next-token loss.
//!
//! Position `p` in a predict set is scored by the logits at `p - 1` against
//! `ids[p]`; position 0 therefore cannot be predicted.

use convsink::TokenId;
use ndarray::Array2;

use crate::error::{ModelError, Result};
use crate::model::Logits;
use crate::params::{lit, Scalar};

fn check<T: Scalar>(logits: &Logits<T>, ids: &[TokenId], predict: &[usize]) -> Result<()> {
    if predict.is_empty() {
        return Err(ModelError::EmptyPredictSet);
    }
    if logits.n() != ids.len() {
        return Err(ModelError::LengthMismatch { mask: logits.n(), seq: ids.len() });
    }
    for &p in predict {
        if p == 0 || p >= ids.len() {
            return Err(ModelError::Validation(format!("predict position {p} outside 1..{}", ids.len())));
        }
        if ids[p] as usize >= logits.vocab() {
            return Err(ModelError::TokenOutOfRange { id: ids[p], vocab: logits.vocab() });
        }
    }
    Ok(())
}

fn log_softmax_row<T: Scalar>(row: ndarray::ArrayView1<T>) -> (T, T) {
    let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
    let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
    (max, sum.ln())
}

/// Mean negative log-likelihood over the predict set.
pub fn loss_masked<T: Scalar>(logits: &Logits<T>, ids: &[TokenId], predict: &[usize]) -> Result<T> {
    check(logits, ids, predict)?;
    let mut total = T::zero();
    for &p in predict {
        let row = logits.0.row(p - 1);
        let (max, lse) = log_softmax_row(row);
        total -= row[ids[p] as usize] - max - lse;
    }
    Ok(total / lit(predict.len() as f64))
}

/// Loss together with its gradient w.r.t. the logits. Rows outside the
/// predict set receive exactly zero gradient.
pub fn loss_masked_grad<T: Scalar>(
    logits: &Logits<T>,
    ids: &[TokenId],
    predict: &[usize],
) -> Result<(T, Array2<T>)> {
    check(logits, ids, predict)?;
    let inv = T::one() / lit(predict.len() as f64);
    let mut grad = Array2::zeros(logits.0.raw_dim());
    let mut total = T::zero();
    for &p in predict {
        let row = logits.0.row(p - 1);
        let (max, lse) = log_softmax_row(row);
        let target = ids[p] as usize;
        total -= row[target] - max - lse;
        let mut g = grad.row_mut(p - 1);
        for (k, &v) in row.iter().enumerate() {
            g[k] += (v - max - lse).exp() * inv;
        }
        g[target] -= inv;
    }
    Ok((total * inv, grad))
}

/// Whether the argmax at `p - 1` equals `ids[p]`, for each predict position.
pub fn predictions_correct<T: Scalar>(logits: &Logits<T>, ids: &[TokenId], predict: &[usize]) -> Result<Vec<bool>> {
    check(logits, ids, predict)?;
    Ok(predict.iter().map(|&p| logits.argmax(p - 1) == ids[p] as usize).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_vocab() {
        let logits = Logits(Array2::<f64>::zeros((3, 8)));
        let l = loss_masked(&logits, &[1, 2, 3], &[1, 2]).unwrap();
        assert!((l - 8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn gradient_rows_outside_predict_are_zero() {
        let logits = Logits(Array2::<f64>::from_shape_fn((4, 5), |(i, k)| (i * 5 + k) as f64 * 0.1));
        let (_, g) = loss_masked_grad(&logits, &[1, 2, 3, 4], &[2]).unwrap();
        assert!(g.row(0).iter().all(|&x| x == 0.0));
        assert!(g.row(2).iter().all(|&x| x == 0.0));
        assert!(g.row(1).sum().abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_predict_sets() {
        let logits = Logits(Array2::<f64>::zeros((3, 8)));
        assert!(matches!(loss_masked(&logits, &[1, 2, 3], &[]), Err(ModelError::EmptyPredictSet)));
        assert!(loss_masked(&logits, &[1, 2, 3], &[0]).is_err());
        assert!(loss_masked(&logits, &[1, 2, 3], &[3]).is_err());
    }
}
