use super::trace::{self, ELEMENTWISE_REDUCTION_FLOPS};
use crate::error::{shape_err, Error, Result};

/// Numerically stable softmax (max-subtracted).
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return shape_err("softmax of an empty vector");
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("non-finite softmax input".into()));
    }
    Ok(softmax_unchecked(v))
}

pub(crate) fn softmax_unchecked(v: &[f64]) -> Vec<f64> {
    trace::record(ELEMENTWISE_REDUCTION_FLOPS * v.len() as u64);
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for o in &mut out {
        *o /= sum;
    }
    out
}

/// Gradient w.r.t. the logits given softmax output `w` and its cotangent `dw`.
pub fn softmax_backward(w: &[f64], dw: &[f64]) -> Vec<f64> {
    let dot: f64 = w.iter().zip(dw).map(|(a, b)| a * b).sum();
    w.iter().zip(dw).map(|(wi, di)| wi * (di - dot)).collect()
}
