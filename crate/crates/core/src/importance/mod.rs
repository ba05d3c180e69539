//! Data-driven importance measures over captured activations, and the
//! numerical checks that tie them to gate-norm.
//!
//! Every cosine measure is `1 − mean_t cos(a_t, b_t)` over the flattened
//! token set of all traces, so values lie in `[0, 2]`.

mod bounds;
mod sweep;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sim::ForwardTrace;
use crate::tensor::{cosine_f64, l2_norm, mean_center, Matrix};

pub use bounds::{
    importance_bound_fit, importance_bound_suite, law_of_cosines_check, law_of_cosines_suite, logit_bound_check,
    logit_bound_suite, run_suite, softmax_uniformity_check, softmax_uniformity_suite, update_decomposition,
    update_decomposition_suite, BoundCheckResult, BoundFit, CheckEntry, SuiteConfig, UpdateDecomposition, FIT_MARGIN,
    FIT_REGIME_T, MIN_SLOPE, SLACK_TOLERANCE, ZERO_GATE_TOLERANCE,
};
pub use sweep::{scaling_sweep, SweepPoint};

/// Per-trace token masks: `true` marks a token that counts. `None` counts
/// every token.
pub type PaddingMask<'a> = Option<&'a [Vec<bool>]>;

fn missing(what: &str, layer: usize) -> Error {
    Error::contract(format!("trace did not capture {what} at layer {layer}"))
}

fn check_traces<T: Scalar>(traces: &[ForwardTrace<T>], mask: PaddingMask<'_>) -> Result<usize> {
    let first = traces.first().ok_or_else(|| Error::contract("no traces"))?;
    let layers = first.num_layers();
    if traces.iter().any(|t| t.num_layers() != layers) {
        return Err(Error::contract("traces disagree on layer count"));
    }
    if let Some(m) = mask {
        if m.len() != traces.len() {
            return Err(Error::contract(format!("{} padding masks for {} traces", m.len(), traces.len())));
        }
    }
    Ok(layers)
}

fn counts(mask: PaddingMask<'_>, trace: usize, token: usize) -> bool {
    mask.is_none_or(|m| m[trace].get(token).copied().unwrap_or(false))
}

/// `1 − mean cos(a_t, b_t)` over every counted token of every trace.
fn cosine_gap<'a, T: Scalar + 'a>(
    traces: &'a [ForwardTrace<T>],
    mask: PaddingMask<'_>,
    centered: bool,
    layer: usize,
    pick: impl Fn(&'a ForwardTrace<T>) -> Result<(&'a Matrix<T>, &'a Matrix<T>)>,
) -> Result<(f64, usize)> {
    let mut sum = 0.0;
    let mut tokens = 0usize;
    for (k, trace) in traces.iter().enumerate() {
        let (a, b) = pick(trace)?;
        let centered_pair;
        let (a, b) = if centered {
            centered_pair = (mean_center(a), mean_center(b));
            (&centered_pair.0, &centered_pair.1)
        } else {
            (a, b)
        };
        for i in 0..a.rows() {
            if counts(mask, k, i) {
                sum += cosine_f64(a.row(i), b.row(i)).map_err(|e| e.at_layer(layer))?;
                tokens += 1;
            }
        }
    }
    if tokens == 0 {
        return Err(Error::contract("every token is masked out"));
    }
    Ok(((1.0 - sum / tokens as f64).clamp(0.0, 2.0), tokens))
}

fn per_layer<'a, T: Scalar + 'a>(
    traces: &'a [ForwardTrace<T>],
    mask: PaddingMask<'_>,
    centered: bool,
    pick: impl Fn(&'a ForwardTrace<T>, usize) -> Result<(&'a Matrix<T>, &'a Matrix<T>)>,
) -> Result<Vec<f64>> {
    let layers = check_traces(traces, mask)?;
    (1..=layers).map(|l| cosine_gap(traces, mask, centered, l, |t| pick(t, l)).map(|(v, _)| v)).collect()
}

/// `Imp_block` from `(X_ℓ, X_{ℓ+1})`.
pub fn block_importance<T: Scalar>(
    traces: &[ForwardTrace<T>],
    mask: PaddingMask<'_>,
    centered: bool,
) -> Result<Vec<f64>> {
    per_layer(traces, mask, centered, |t, l| {
        Ok((t.input(l).ok_or_else(|| missing("X", l))?, t.input(l + 1).ok_or_else(|| missing("X", l + 1))?))
    })
}

/// `Imp_attn` from `(X_ℓ, Y_ℓ)`. With `centered`, both sides are
/// mean-centered per trace first, removing the shared shift of a
/// near-uniform attention update.
pub fn attn_importance<T: Scalar>(
    traces: &[ForwardTrace<T>],
    mask: PaddingMask<'_>,
    centered: bool,
) -> Result<Vec<f64>> {
    per_layer(traces, mask, centered, |t, l| {
        let layer = &t.layers[l - 1];
        Ok((
            layer.input.as_ref().ok_or_else(|| missing("X", l))?,
            layer.post_attn.as_ref().ok_or_else(|| missing("Y", l))?,
        ))
    })
}

/// `Imp_mlp` from `(Y_ℓ, X_{ℓ+1})`.
pub fn mlp_importance<T: Scalar>(
    traces: &[ForwardTrace<T>],
    mask: PaddingMask<'_>,
    centered: bool,
) -> Result<Vec<f64>> {
    per_layer(traces, mask, centered, |t, l| {
        Ok((
            t.layers[l - 1].post_attn.as_ref().ok_or_else(|| missing("Y", l))?,
            t.input(l + 1).ok_or_else(|| missing("X", l + 1))?,
        ))
    })
}

/// `r_ℓ = Σ_t ‖AttnOut_{ℓ,t}‖ / Σ_t ‖X_{ℓ,t}‖`.
pub fn norm_ratio<T: Scalar>(traces: &[ForwardTrace<T>], mask: PaddingMask<'_>) -> Result<Vec<f64>> {
    let layers = check_traces(traces, mask)?;
    (1..=layers)
        .map(|l| {
            let (mut num, mut den) = (0.0, 0.0);
            for (k, t) in traces.iter().enumerate() {
                let layer = &t.layers[l - 1];
                let x = layer.input.as_ref().ok_or_else(|| missing("X", l))?;
                let a = layer.attn_out.as_ref().ok_or_else(|| missing("AttnOut", l))?;
                for i in 0..x.rows() {
                    if counts(mask, k, i) {
                        num += l2_norm(a.row(i));
                        den += l2_norm(x.row(i));
                    }
                }
            }
            if den == 0.0 {
                return Err(Error::contract(format!("layer {l}: input norms sum to zero")));
            }
            Ok(num / den)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerImportance {
    pub layer: usize,
    pub imp_block: f64,
    pub imp_attn: f64,
    pub imp_mlp: f64,
    pub norm_ratio: f64,
    pub gate_norm: Option<f64>,
}

/// Every per-layer measure from one set of traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub layers: Vec<LayerImportance>,
    /// Tokens averaged over.
    pub tokens: usize,
    /// Whether the cosine measures were mean-centered.
    pub centered: bool,
}

pub const IMPORTANCE_CSV_HEADER: &str = "layer,imp_block,imp_attn,imp_mlp,norm_ratio,gate_norm,tokens,centered";

impl ImportanceReport {
    /// Traces must capture inputs, attention outputs and post-attention
    /// activations.
    pub fn from_traces<T: Scalar>(
        traces: &[ForwardTrace<T>],
        mask: PaddingMask<'_>,
        centered: bool,
        gate_norms: Option<&[f64]>,
    ) -> Result<Self> {
        let layers = check_traces(traces, mask)?;
        if let Some(g) = gate_norms {
            if g.len() != layers {
                return Err(Error::contract(format!("{} gate-norms for {layers} layers", g.len())));
            }
        }
        let block = block_importance(traces, mask, centered)?;
        let attn = attn_importance(traces, mask, centered)?;
        let mlp = mlp_importance(traces, mask, centered)?;
        let ratio = norm_ratio(traces, mask)?;
        let tokens = traces
            .iter()
            .enumerate()
            .map(|(k, t)| {
                let rows = t.input(1).map_or(0, |x| x.rows());
                (0..rows).filter(|&i| counts(mask, k, i)).count()
            })
            .sum();
        Ok(Self {
            layers: (0..layers)
                .map(|i| LayerImportance {
                    layer: i + 1,
                    imp_block: block[i],
                    imp_attn: attn[i],
                    imp_mlp: mlp[i],
                    norm_ratio: ratio[i],
                    gate_norm: gate_norms.map(|g| g[i]),
                })
                .collect(),
            tokens,
            centered,
        })
    }

    pub fn attn_scores(&self) -> Vec<(usize, f64)> {
        self.layers.iter().map(|l| (l.layer, l.imp_attn)).collect()
    }

    pub fn block_scores(&self) -> Vec<(usize, f64)> {
        self.layers.iter().map(|l| (l.layer, l.imp_block)).collect()
    }

    /// One row per layer under [`IMPORTANCE_CSV_HEADER`]; an absent gate-norm
    /// is an empty field.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{IMPORTANCE_CSV_HEADER}\n");
        for l in &self.layers {
            let g = l.gate_norm.map(|g| g.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                l.layer, l.imp_block, l.imp_attn, l.imp_mlp, l.norm_ratio, g, self.tokens, self.centered
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(IMPORTANCE_CSV_HEADER) {
            return Err(Error::Format("importance table has an unexpected header".into()));
        }
        let bad = |n: usize, what: &str| Error::Format(format!("importance table row {n}: {what}"));
        let mut layers = Vec::new();
        let mut meta = None;
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(bad(n + 1, "expected 8 fields"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(n + 1, "unparsable number"));
            let layer: usize = f[0].parse().map_err(|_| bad(n + 1, "bad layer index"))?;
            if layer != layers.len() + 1 {
                return Err(bad(n + 1, "layers must be listed in order from 1"));
            }
            let gate_norm = if f[5].is_empty() { None } else { Some(num(f[5])?) };
            let tokens: usize = f[6].parse().map_err(|_| bad(n + 1, "bad token count"))?;
            let centered: bool = f[7].parse().map_err(|_| bad(n + 1, "bad centering flag"))?;
            if *meta.get_or_insert((tokens, centered)) != (tokens, centered) {
                return Err(bad(n + 1, "token count or centering differs between rows"));
            }
            layers.push(LayerImportance {
                layer,
                imp_block: num(f[1])?,
                imp_attn: num(f[2])?,
                imp_mlp: num(f[3])?,
                norm_ratio: num(f[4])?,
                gate_norm,
            });
        }
        let (tokens, centered) = meta.ok_or_else(|| Error::Format("importance table has no rows".into()))?;
        Ok(Self { layers, tokens, centered })
    }
}
