use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{matmul_nt, sum_of_squares, Matrix};

/// How the query/key coupling of a layer is reduced to one number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum ScoreMode {
    /// `‖W_q W_kᵀ‖_F` over the full projections.
    #[default]
    Whole,
    /// `sqrt(Σ_h ‖W_q^{(h)} W_k^{(h)ᵀ}‖_F²)` with heads as contiguous
    /// column slices of width `D/H`. Cross-head blocks are excluded.
    PerHead { heads: usize },
}

impl fmt::Display for ScoreMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScoreMode::Whole => f.write_str("whole"),
            ScoreMode::PerHead { heads } => write!(f, "per-head:{heads}"),
        }
    }
}

impl FromStr for ScoreMode {
    type Err = Error;

    /// `whole` or `per-head:<H>`.
    fn from_str(s: &str) -> Result<Self> {
        if s == "whole" {
            return Ok(ScoreMode::Whole);
        }
        let heads = s
            .strip_prefix("per-head:")
            .and_then(|h| h.parse().ok())
            .filter(|&h: &usize| h > 0)
            .ok_or_else(|| Error::Format(format!("unknown score mode {s:?}")))?;
        Ok(ScoreMode::PerHead { heads })
    }
}

/// Gate-norm of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateScore {
    /// One-based layer index.
    pub layer: usize,
    pub m: f64,
    pub mode: ScoreMode,
}

fn check_pair<T: Scalar>(op: &'static str, wq: &Matrix<T>, wk: &Matrix<T>) -> Result<()> {
    if wq.shape() != wk.shape() {
        return Err(Error::shape(op, format!("query {:?} and key {:?} projections differ", wq.shape(), wk.shape())));
    }
    Ok(())
}

/// `M = W_q W_kᵀ`, the bilinear form behind the attention logits.
pub fn gate_matrix<T: Scalar>(wq: &Matrix<T>, wk: &Matrix<T>) -> Result<Matrix<T>> {
    check_pair("gate_matrix", wq, wk)?;
    matmul_nt(wq, wk)
}

/// Gate-norm of a query/key pair given in the `x · W` convention.
pub fn gate_norm<T: Scalar>(wq: &Matrix<T>, wk: &Matrix<T>, mode: ScoreMode) -> Result<f64> {
    check_pair("gate_norm", wq, wk)?;
    match mode {
        ScoreMode::Whole => Ok(sum_of_squares(gate_matrix(wq, wk)?.data()).sqrt()),
        ScoreMode::PerHead { heads } => {
            let cols = wq.cols();
            if heads == 0 || !cols.is_multiple_of(heads) {
                return Err(Error::contract(format!("projection width {cols} is not divisible by {heads} heads")));
            }
            let d = cols / heads;
            let mut total = 0.0;
            for h in 0..heads {
                let m = matmul_nt(&wq.columns(h * d, d), &wk.columns(h * d, d))?;
                total += sum_of_squares(m.data());
            }
            Ok(total.sqrt())
        }
    }
}
