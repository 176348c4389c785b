//! Dense classification head: flatten, linear map, softmax, cross-entropy.

use crate::graph::{matmul_raw, softmax_row, Graph, PROB_CLAMP};
use crate::tensor::{Tensor, TensorError};

/// Flatten a `[J, d]` capsule/attention output to F and apply the bias-free
/// linear map `logits = W_dense · F` with `W_dense: [n, J·d]`.
pub fn head_forward(attn_out: &Tensor, w_dense: &Tensor) -> Result<Tensor, TensorError> {
    let (sa, sw) = (attn_out.shape(), w_dense.shape());
    if sw.len() != 2 || sa.iter().product::<usize>() != sw[1] {
        return Err(TensorError::Shape {
            op: "head_forward",
            detail: format!("features {sa:?} flatten to {}, W_dense is {sw:?}", sa.iter().product::<usize>()),
        });
    }
    let n = sw[0];
    let f = sw[1];
    let logits = matmul_raw(w_dense.data(), attn_out.data(), n, f, 1);
    Tensor::new(vec![n], logits)
}

/// Numerically stable softmax with the standard positive-exponent convention:
/// `P_i = exp(f_i - max f) / Σ exp(f_j - max f)`.
pub fn softmax_probs(logits: &[f64]) -> Result<Vec<f64>, TensorError> {
    softmax_probs_signed(logits, false)
}

/// Softmax with a selectable exponent sign. `negate` flips every logit first,
/// turning the map into `exp(-f_i)/Σ exp(-f_j)`.
pub fn softmax_probs_signed(logits: &[f64], negate: bool) -> Result<Vec<f64>, TensorError> {
    if logits.is_empty() {
        return Err(TensorError::Shape {
            op: "softmax_probs",
            detail: "empty logit vector".into(),
        });
    }
    if let Some(index) = logits.iter().position(|v| !v.is_finite()) {
        return Err(TensorError::NonFinite { op: "softmax_probs", index });
    }
    if negate {
        let neg: Vec<f64> = logits.iter().map(|&v| -v).collect();
        Ok(softmax_row(&neg))
    } else {
        Ok(softmax_row(logits))
    }
}

/// Categorical cross-entropy `-log(max(P_label, 1e-12))`.
pub fn cross_entropy(probs: &[f64], label: usize) -> Result<f64, TensorError> {
    if label >= probs.len() {
        return Err(TensorError::Config {
            op: "cross_entropy",
            detail: format!("label {label} out of range for {} classes", probs.len()),
        });
    }
    Ok(-probs[label].max(PROB_CLAMP).ln())
}

/// A batch loss: the scalar mean and the per-sample terms it averages.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub per_sample: Vec<f64>,
}

impl LossValue {
    pub fn from_samples(per_sample: Vec<f64>) -> Self {
        let total = if per_sample.is_empty() {
            0.0
        } else {
            per_sample.iter().sum::<f64>() / per_sample.len() as f64
        };
        LossValue { total, per_sample }
    }
}
