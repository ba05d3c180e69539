use super::stream::TokenStream;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sim::{CaptureFlags, Model, PlanApplication};
use crate::tensor::Matrix;

/// Summed negative log-likelihood of `window[i + 1]` under row `i` of
/// `logits`, and the number of predictions. Log-sum-exp runs in `f64`.
pub fn next_token_nll<T: Scalar>(logits: &Matrix<T>, window: &[u32]) -> Result<(f64, usize)> {
    if logits.rows() != window.len() {
        return Err(Error::shape(
            "next_token_nll",
            format!("{} logit rows for {} tokens", logits.rows(), window.len()),
        ));
    }
    let mut total = 0.0;
    for (i, &target) in window.iter().enumerate().skip(1) {
        let row = logits.row(i - 1);
        let target = target as usize;
        if target >= row.len() {
            return Err(Error::contract(format!("token id {target} outside {} logits", row.len())));
        }
        let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum();
        total += max + sum.ln() - row[target].as_f64();
    }
    Ok((total, window.len().saturating_sub(1)))
}

/// Result of scoring one stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub perplexity: f64,
    pub mean_nll: f64,
    pub predictions: usize,
    /// Multiply-accumulates over every window.
    pub macs: u64,
}

pub fn evaluate<T: Scalar>(model: &Model<T>, plan: &PlanApplication, stream: &TokenStream) -> Result<Evaluation> {
    let mut nll = 0.0;
    let mut predictions = 0;
    let mut macs = 0;
    for window in stream.windows() {
        if window.len() < 2 {
            continue;
        }
        let trace = model.forward(window, plan, CaptureFlags::LOGITS)?;
        let (sum, count) = next_token_nll(trace.logits.as_ref().expect("logits captured"), window)?;
        nll += sum;
        predictions += count;
        macs += trace.macs;
    }
    if predictions == 0 {
        return Err(Error::contract("token stream has no next-token predictions"));
    }
    let mean_nll = nll / predictions as f64;
    Ok(Evaluation { perplexity: mean_nll.exp(), mean_nll, predictions, macs })
}

/// `exp` of the mean next-token negative log-likelihood over every window.
pub fn perplexity<T: Scalar>(model: &Model<T>, plan: &PlanApplication, stream: &TokenStream) -> Result<f64> {
    evaluate(model, plan, stream).map(|e| e.perplexity)
}
