//! Bidirectional margin-softmax contrastive objective over a batch
//! similarity matrix. Positives sit on the diagonal; every off-diagonal
//! entry is a negative, including clips from the same video (temporally
//! mismatched pairs). Duplicate positives are not masked out of the
//! denominator.

use crate::encoders::SimilarityMatrix;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MmsConfig {
    /// Margin subtracted from each positive before the softmax.
    pub margin: f64,
}

impl Default for MmsConfig {
    fn default() -> Self {
        MmsConfig { margin: 1e-3 }
    }
}

/// Per-direction losses and gradients; the public loss is their sum.
pub struct MmsTerms {
    pub row_loss: f64,
    pub col_loss: f64,
    pub row_grad: Vec<f64>,
    pub col_grad: Vec<f64>,
}

/// Both directions of the objective on a row-major b x b matrix.
///
/// Row direction for query i: -log( e^{S_ii - m} / (e^{S_ii - m} +
/// sum_{j != i} e^{S_ij}) ), averaged over rows; the column direction is
/// symmetric. Both are computed with log-sum-exp stabilization.
pub fn mms_terms(s: &[f64], b: usize, margin: f64) -> MmsTerms {
    debug_assert_eq!(s.len(), b * b);
    let inv_b = 1.0 / b as f64;
    let mut row_loss = 0.0;
    let mut col_loss = 0.0;
    let mut row_grad = vec![0.0; b * b];
    let mut col_grad = vec![0.0; b * b];

    let mut logits = vec![0.0; b];
    for i in 0..b {
        // Row i: logits over columns, margin applied at the diagonal.
        for j in 0..b {
            logits[j] = s[i * b + j];
        }
        logits[i] -= margin;
        let (lse, _) = log_sum_exp(&logits);
        row_loss += (lse - logits[i]) * inv_b;
        for j in 0..b {
            let p = (logits[j] - lse).exp();
            row_grad[i * b + j] = (p - if j == i { 1.0 } else { 0.0 }) * inv_b;
        }

        // Column i: logits over rows.
        for j in 0..b {
            logits[j] = s[j * b + i];
        }
        logits[i] -= margin;
        let (lse, _) = log_sum_exp(&logits);
        col_loss += (lse - logits[i]) * inv_b;
        for j in 0..b {
            let p = (logits[j] - lse).exp();
            col_grad[j * b + i] = (p - if j == i { 1.0 } else { 0.0 }) * inv_b;
        }
    }
    MmsTerms {
        row_loss,
        col_loss,
        row_grad,
        col_grad,
    }
}

/// Total loss and its exact gradient with respect to every matrix entry.
pub fn mms_core(s: &[f64], b: usize, margin: f64) -> (f64, Vec<f64>) {
    let t = mms_terms(s, b, margin);
    let mut ds = t.row_grad;
    for (d, c) in ds.iter_mut().zip(&t.col_grad) {
        *d += c;
    }
    (t.row_loss + t.col_loss, ds)
}

/// Loss over a similarity matrix; errors on non-square input are prevented
/// by the matrix type, so this only rejects non-finite entries.
pub fn mms_loss(s: &SimilarityMatrix, cfg: &MmsConfig) -> Result<(f64, Vec<f64>)> {
    if !s.values.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric("similarity matrix has non-finite entries".into()));
    }
    Ok(mms_core(&s.values, s.n, cfg.margin))
}

fn log_sum_exp(xs: &[f64]) -> (f64, f64) {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = xs.iter().map(|x| (x - m).exp()).sum();
    (m + sum.ln(), m)
}
