//! Double-precision scalar helpers shared by the graph ops and the search
//! bookkeeping (architecture-weight readouts, loss oracles).

use crate::error::{Error, Result};

/// Numerically stable softmax with max subtraction.
pub fn softmax64(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::InvalidArg("softmax of empty vector".into()));
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.iter().map(|&e| e / sum).collect())
}

/// log(sum(exp(x))) with max subtraction.
pub fn log_sum_exp64(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m.is_infinite() {
        return m;
    }
    let s: f64 = xs.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}
