// SPDX-License-Identifier: MIT OR Apache-2.0

//! Minimal cross-attention forward for checking edits end to end.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct AttentionOutput {
    /// `q × n`, row-stochastic.
    pub weights: DMatrix<f64>,
    /// `q × m`.
    pub output: DMatrix<f64>,
}

/// `K = W_k C`, `V = W_v C`, `A = softmax_rows(Qᵀ K / √m)`, `O = A Vᵀ`.
///
/// `queries` is `m × q` (one column per visual token), the projections are
/// `m × d` and `text` is `d × n` (one column per text token).
pub fn toy_cross_attention(
    queries: &DMatrix<f64>,
    w_k: &DMatrix<f64>,
    w_v: &DMatrix<f64>,
    text: &DMatrix<f64>,
) -> Result<AttentionOutput> {
    let m = w_k.nrows();
    if w_v.shape() != w_k.shape() || queries.nrows() != m || text.nrows() != w_k.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "Q {:?}, W_k {:?}, W_v {:?}, C {:?}",
            queries.shape(),
            w_k.shape(),
            w_v.shape(),
            text.shape()
        )));
    }
    if text.ncols() == 0 || m == 0 {
        return Err(Error::Empty("attention needs at least one text token".into()));
    }
    let keys = w_k * text;
    let values = w_v * text;
    let mut weights = queries.transpose() * keys / (m as f64).sqrt();
    for mut row in weights.row_iter_mut() {
        let max = row.max();
        row.apply(|x| *x = (*x - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    let output = &weights * values.transpose();
    Ok(AttentionOutput { weights, output })
}
