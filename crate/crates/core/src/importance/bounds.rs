//! Checks for each link in the chain from a small gate-norm to a small
//! attention importance: logits are bounded by the gate-norm, small logits
//! give near-uniform weights, near-uniform weights give an update close to a
//! shared shift, and the cosine measure sees only what is left.

use std::collections::BTreeMap;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::sweep::{scaling_sweep, SweepPoint};
use crate::error::{Error, Result};
use crate::eval::random_tokens;
use crate::rng::{seeded, Rng};
use crate::scalar::Scalar;
use crate::sim::ModelConfig;
use crate::tensor::{
    cosine_f64, frobenius_norm, l2_norm, matmul, matmul_nt, row_softmax, row_softmax_with, sum_of_squares, Matrix,
    Stabilizer, SupportMask,
};

/// Most negative slack a passing check may report.
pub const SLACK_TOLERANCE: f64 = 1e-6;

/// Outcome of one check on one input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckEntry {
    /// `bound − quantity`; negative means the bound was violated.
    pub slack: f64,
    /// Residual of an identity that should hold exactly; 0 for pure bounds.
    pub residual: f64,
}

/// Aggregate of a randomized suite of [`CheckEntry`] values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheckResult {
    pub name: String,
    pub trials: usize,
    pub min_slack: f64,
    pub max_residual: f64,
    pub residual_tolerance: f64,
    /// Fitted or observed constants, by name.
    pub constants: BTreeMap<String, f64>,
    pub passed: bool,
}

/// NaN-propagating minimum and maximum.
fn worse_min(acc: f64, v: f64) -> f64 {
    if v.is_nan() || v < acc {
        v
    } else {
        acc
    }
}

fn worse_max(acc: f64, v: f64) -> f64 {
    if v.is_nan() || v > acc {
        v
    } else {
        acc
    }
}

impl BoundCheckResult {
    pub fn from_entries(name: &str, residual_tolerance: f64, entries: impl IntoIterator<Item = CheckEntry>) -> Self {
        let (mut trials, mut min_slack, mut max_residual) = (0, f64::INFINITY, 0.0f64);
        for e in entries {
            trials += 1;
            if !min_slack.is_nan() {
                min_slack = worse_min(min_slack, e.slack);
            }
            if !max_residual.is_nan() {
                max_residual = worse_max(max_residual, e.residual);
            }
        }
        let passed = trials > 0 && min_slack >= -SLACK_TOLERANCE && max_residual <= residual_tolerance;
        Self {
            name: name.into(),
            trials,
            min_slack,
            max_residual,
            residual_tolerance,
            constants: BTreeMap::new(),
            passed,
        }
    }

    fn with_constant(mut self, key: &str, value: f64) -> Self {
        self.constants.insert(key.into(), value);
        self
    }
}

/// Checks `‖u‖² = ‖x+u‖² + ‖x‖² − 2‖x‖‖x+u‖cos(x, x+u)` and
/// `|‖x+u‖ − ‖x‖| ≤ ‖u‖`.
///
/// `x + u` is formed in `T`, as the residual add does. The residual is
/// relative to `‖x‖² + ‖x+u‖² + ‖u‖²`.
pub fn law_of_cosines_check<T: Scalar>(x: &[T], u: &[T]) -> Result<CheckEntry> {
    if x.len() != u.len() {
        return Err(Error::shape("law_of_cosines_check", format!("lengths {} and {}", x.len(), u.len())));
    }
    let y: Vec<T> = x.iter().zip(u).map(|(&a, &b)| a + b).collect();
    let (nx, ny, nu) = (l2_norm(x), l2_norm(&y), l2_norm(u));
    if nx == 0.0 || ny == 0.0 {
        return Err(Error::contract("law of cosines needs nonzero ‖x‖ and ‖x+u‖"));
    }
    let cos = cosine_f64(x, &y)?;
    let rhs = ny * ny + nx * nx - 2.0 * nx * ny * cos;
    let scale = nx * nx + ny * ny + nu * nu;
    Ok(CheckEntry { slack: nu - (ny - nx).abs(), residual: (nu * nu - rhs).abs() / scale })
}

/// Checks `|z_iᵀ M z_j| / sqrt(d_h) ≤ ‖z_i‖ ‖z_j‖ ‖M‖_F / sqrt(d_h)` for every
/// pair of rows of `z`, returning the smallest slack.
pub fn logit_bound_check<T: Scalar>(z: &Matrix<T>, m: &Matrix<T>, d_h: usize) -> Result<CheckEntry> {
    if d_h == 0 {
        return Err(Error::contract("head width must be positive"));
    }
    let logits = matmul_nt(&matmul(z, m)?, z)?;
    let scale = 1.0 / (d_h as f64).sqrt();
    let fro = frobenius_norm(m).as_f64();
    let norms: Vec<f64> = z.iter_rows().map(l2_norm).collect();
    let mut slack = f64::INFINITY;
    for i in 0..z.rows() {
        for j in 0..z.rows() {
            let l = logits.get(i, j).as_f64().abs() * scale;
            slack = worse_min(slack, norms[i] * norms[j] * fro * scale - l);
        }
    }
    Ok(CheckEntry { slack, residual: 0.0 })
}

/// Checks `max_j |A_ij − 1/S'_i| ≤ (e^{2ε_i} − 1)/S'_i` for every row.
///
/// Softmax ignores a common shift, so `ε_i` is the half-range of row `i`'s
/// supported logits, the smallest `max|L − c|` over shifts `c`. It never
/// exceeds `max|L|`, so the check is at least as strict as one using the raw
/// magnitude. `stabilizer` selects the kernel under test.
pub fn softmax_uniformity_check<T: Scalar>(
    logits: &Matrix<T>,
    mask: &SupportMask,
    stabilizer: Stabilizer,
) -> Result<CheckEntry> {
    let probs = row_softmax_with(logits, mask, stabilizer)?;
    let cols = logits.cols();
    let mut slack = f64::INFINITY;
    for i in 0..logits.rows() {
        let support = mask.support_len(i, cols);
        let supported = |j: usize| match mask {
            SupportMask::Full => true,
            SupportMask::Causal => j <= i,
            SupportMask::Explicit(m) => m[i * cols + j],
        };
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        let mut dev = 0.0f64;
        let uniform = 1.0 / support as f64;
        for j in (0..cols).filter(|&j| supported(j)) {
            let l = logits.get(i, j).as_f64();
            lo = lo.min(l);
            hi = hi.max(l);
            dev = worse_max(dev, (probs.get(i, j).as_f64() - uniform).abs());
        }
        let eps = 0.5 * (hi - lo);
        slack = worse_min(slack, ((2.0 * eps).exp() - 1.0) / support as f64 - dev);
    }
    Ok(CheckEntry { slack, residual: 0.0 })
}

/// `AttnOut_i = u + Δ_i` for one row of attention weights.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateDecomposition {
    /// Mean of the projected value rows over the support.
    pub u: Vec<f64>,
    /// `Σ_j (A_ij − 1/S') v_j`.
    pub delta: Vec<f64>,
    pub entry: CheckEntry,
}

/// Splits `Σ_j a_j v_j` into the shared shift `u` and the per-token
/// deviation `Δ`, then checks the reconstruction and
/// `‖Δ‖ ≤ (Σ_j |a_j − 1/S'|) · max_j ‖v_j‖`.
///
/// `weights` and the rows of `values` cover only the row's support. When
/// `attn_out` is given the reconstruction is compared against it, otherwise
/// against the weighted sum computed here. The residual is the largest
/// absolute coordinate difference.
pub fn update_decomposition<T: Scalar>(
    weights: &[T],
    values: &Matrix<T>,
    attn_out: Option<&[T]>,
) -> Result<UpdateDecomposition> {
    if weights.len() != values.rows() {
        return Err(Error::shape(
            "update_decomposition",
            format!("{} weights for {} value rows", weights.len(), values.rows()),
        ));
    }
    let dim = values.cols();
    if attn_out.is_some_and(|a| a.len() != dim) {
        return Err(Error::shape("update_decomposition", "attention output width differs from values".to_string()));
    }
    let uniform = 1.0 / weights.len() as f64;
    let mut u = vec![0.0f64; dim];
    let mut delta = vec![0.0f64; dim];
    let mut direct = vec![0.0f64; dim];
    let mut spread = 0.0;
    let mut max_norm = 0.0f64;
    for (j, row) in values.iter_rows().enumerate() {
        let a = weights[j].as_f64();
        spread += (a - uniform).abs();
        max_norm = max_norm.max(l2_norm(row));
        for (k, &v) in row.iter().enumerate() {
            u[k] += uniform * v.as_f64();
            delta[k] += (a - uniform) * v.as_f64();
            direct[k] += a * v.as_f64();
        }
    }
    let residual = (0..dim)
        .map(|k| {
            let target = attn_out.map_or(direct[k], |a| a[k].as_f64());
            (u[k] + delta[k] - target).abs()
        })
        .fold(0.0, worse_max);
    let slack = spread * max_norm - sum_of_squares(&delta).sqrt();
    Ok(UpdateDecomposition { u, delta, entry: CheckEntry { slack, residual } })
}

/// Fit of `Imp ≤ C · m` over a gate-norm scaling sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundFit {
    /// `max Imp/m` over points with `t ≤ 0.1`.
    pub c: f64,
    /// Least-squares slope of `ln Imp` against `ln m`.
    pub slope: f64,
    /// Smallest `1.05 · C · m − Imp` over the sweep; points with `m = 0` use
    /// `1e-5 − Imp`.
    pub min_slack: f64,
    pub passed: bool,
}

pub const FIT_REGIME_T: f64 = 0.1;
pub const FIT_MARGIN: f64 = 0.05;
pub const MIN_SLOPE: f64 = 0.8;
pub const ZERO_GATE_TOLERANCE: f64 = 1e-5;

/// Fits `C` on the small-`m` regime and checks the bound over every point,
/// using centered or uncentered importance.
pub fn importance_bound_fit(points: &[SweepPoint], centered: bool) -> Result<BoundFit> {
    if points.len() < 3 {
        return Err(Error::contract(format!("a bound fit needs at least 3 sweep points, got {}", points.len())));
    }
    let imp = |p: &SweepPoint| if centered { p.imp_centered } else { p.imp_uncentered };
    let c = points.iter().filter(|p| p.t <= FIT_REGIME_T && p.m > 0.0).map(|p| imp(p) / p.m).fold(f64::NAN, f64::max);
    if c.is_nan() {
        return Err(Error::contract("no sweep point with 0 < t ≤ 0.1 and m > 0"));
    }
    let min_slack = points
        .iter()
        .map(|p| if p.m == 0.0 { ZERO_GATE_TOLERANCE - imp(p) } else { (1.0 + FIT_MARGIN) * c * p.m - imp(p) })
        .fold(f64::INFINITY, worse_min);
    let logs: Vec<(f64, f64)> =
        points.iter().filter(|p| p.m > 0.0 && imp(p) > 0.0).map(|p| (p.m.ln(), imp(p).ln())).collect();
    let slope = least_squares_slope(&logs);
    Ok(BoundFit { c, slope, min_slack, passed: min_slack >= 0.0 && slope >= MIN_SLOPE })
}

fn least_squares_slope(xy: &[(f64, f64)]) -> f64 {
    if xy.len() < 2 {
        return f64::NAN;
    }
    let n = xy.len() as f64;
    let mx = xy.iter().map(|p| p.0).sum::<f64>() / n;
    let my = xy.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = xy.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = xy.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

/// Sizes and seeds for [`run_suite`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub seed: u64,
    pub logit_trials: usize,
    /// Rows per entry of `epsilons`.
    pub softmax_rows: usize,
    pub epsilons: Vec<f64>,
    pub update_rows: usize,
    pub cosine_pairs: usize,
    /// Models in the scaling sweep, seeded `seed, seed + 1, …`.
    pub sweep_models: usize,
    pub sweep_scales: Vec<f64>,
    pub sweep_layer: usize,
    pub sweep_sequences: usize,
    pub sweep_seq_len: usize,
    /// Softmax kernel used by the uniformity check.
    #[serde(skip)]
    pub stabilizer: Stabilizer,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            logit_trials: 10_000,
            softmax_rows: 1_000,
            epsilons: vec![1e-3, 1e-2, 1e-1],
            update_rows: 1_000,
            cosine_pairs: 10_000,
            sweep_models: 3,
            sweep_scales: vec![1.0, 1e-1, 1e-2, 1e-3],
            sweep_layer: 5,
            sweep_sequences: 32,
            sweep_seq_len: 64,
            stabilizer: Stabilizer::SubtractMax,
        }
    }
}

impl SuiteConfig {
    /// Model used by the scaling sweep: the default toy shape without a
    /// causal mask, so the uniform limit is one shift shared by every token.
    pub fn sweep_model() -> ModelConfig {
        ModelConfig { causal: false, ..ModelConfig::default() }
    }
}

const LOGIT_STREAM: u64 = 0x6c6f6769;
const SOFTMAX_STREAM: u64 = 0x736f6674;
const UPDATE_STREAM: u64 = 0x75706474;
const COSINE_STREAM: u64 = 0x636f7369;
const SWEEP_STREAM: u64 = 0x73776565;

fn normal(rng: &mut Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn gaussian_matrix(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| normal(rng) * std)
}

pub fn logit_bound_suite(cfg: &SuiteConfig) -> Result<BoundCheckResult> {
    let mut rng = seeded(cfg.seed, LOGIT_STREAM);
    let mut entries = Vec::with_capacity(cfg.logit_trials);
    for trial in 0..cfg.logit_trials {
        let dim = [4, 8, 16, 32][trial % 4];
        let heads = [1, 2, 4][rng.random_range(0..3)];
        let seq = rng.random_range(1..=8);
        let z = gaussian_matrix(&mut rng, seq, dim, 1.0);
        // alternate dense, rank-one and near-zero gate matrices
        let m = match trial % 3 {
            0 => gaussian_matrix(&mut rng, dim, dim, 1.0 / (dim as f64).sqrt()),
            1 => matmul_nt(&gaussian_matrix(&mut rng, dim, 1, 1.0), &gaussian_matrix(&mut rng, dim, 1, 1.0))?,
            _ => gaussian_matrix(&mut rng, dim, dim, 1e-4),
        };
        entries.push(logit_bound_check(&z, &m, dim / heads)?);
    }
    Ok(BoundCheckResult::from_entries("logit_bound", 0.0, entries))
}

pub fn softmax_uniformity_suite(cfg: &SuiteConfig) -> Result<BoundCheckResult> {
    let mut rng = seeded(cfg.seed, SOFTMAX_STREAM);
    let mut entries = Vec::new();
    for &eps in &cfg.epsilons {
        let mut rows = 0;
        let mut shifted = false;
        while rows < cfg.softmax_rows {
            let seq = rng.random_range(1..=16);
            let causal = rng.random_bool(0.5);
            // every other matrix carries a large per-row offset, which a
            // correct kernel cancels exactly
            let offsets: Vec<f64> = (0..seq)
                .map(|_| {
                    if shifted {
                        rng.random_range(100.0..1000.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 }
                    } else {
                        0.0
                    }
                })
                .collect();
            shifted = !shifted;
            let logits = Matrix::<f32>::from_fn(seq, seq, |i, _| (offsets[i] + rng.random_range(-eps..=eps)) as f32);
            let mask = if causal { SupportMask::Causal } else { SupportMask::Full };
            entries.push(softmax_uniformity_check(&logits, &mask, cfg.stabilizer)?);
            rows += seq;
        }
    }
    let eps_max = cfg.epsilons.iter().copied().fold(0.0, f64::max);
    Ok(BoundCheckResult::from_entries("softmax_uniformity", 0.0, entries).with_constant("epsilon_max", eps_max))
}

pub fn update_decomposition_suite(cfg: &SuiteConfig) -> Result<BoundCheckResult> {
    let mut rng = seeded(cfg.seed, UPDATE_STREAM);
    let mut entries = Vec::with_capacity(cfg.update_rows);
    for _ in 0..cfg.update_rows {
        let support = rng.random_range(1..=32);
        let temperature = 10f64.powf(rng.random_range(-4.0..1.0));
        let logits = gaussian_matrix(&mut rng, 1, support, temperature);
        let weights = row_softmax(&logits, &SupportMask::Full)?.into_data();
        let values = gaussian_matrix(&mut rng, support, 16, 1.0);
        entries.push(update_decomposition(&weights, &values, None)?.entry);
    }
    Ok(BoundCheckResult::from_entries("update_decomposition", 1e-6, entries))
}

pub fn law_of_cosines_suite(cfg: &SuiteConfig) -> Result<BoundCheckResult> {
    let mut rng = seeded(cfg.seed, COSINE_STREAM);
    let mut entries = Vec::with_capacity(cfg.cosine_pairs);
    for _ in 0..cfg.cosine_pairs {
        let dim = rng.random_range(2..=64);
        let scale = 10f64.powf(rng.random_range(-3.0..1.0));
        let x: Vec<f32> = (0..dim).map(|_| normal(&mut rng) as f32).collect();
        let u: Vec<f32> = (0..dim).map(|_| (normal(&mut rng) * scale) as f32).collect();
        entries.push(law_of_cosines_check(&x, &u)?);
    }
    Ok(BoundCheckResult::from_entries("law_of_cosines", 1e-5, entries))
}

/// Runs the scaling sweep on `sweep_models` seeded models and fits the bound
/// separately for each. Passes when every model passes.
pub fn importance_bound_suite(cfg: &SuiteConfig) -> Result<(BoundCheckResult, Vec<BoundFit>)> {
    let model = SuiteConfig::sweep_model();
    let mut fits = Vec::with_capacity(cfg.sweep_models);
    for k in 0..cfg.sweep_models {
        let seed = cfg.seed.wrapping_add(k as u64);
        let sequences: Vec<Vec<u32>> = (0..cfg.sweep_sequences)
            .map(|s| random_tokens(model.vocab, cfg.sweep_seq_len, seed, SWEEP_STREAM + s as u64))
            .collect();
        let points = scaling_sweep(&model, seed, cfg.sweep_layer, &cfg.sweep_scales, &sequences)?;
        fits.push(importance_bound_fit(&points, true)?);
    }
    let min_slack = fits.iter().map(|f| f.min_slack).fold(f64::INFINITY, worse_min);
    let min_fit_slope = fits.iter().map(|f| f.slope).fold(f64::INFINITY, worse_min);
    let max_c = fits.iter().map(|f| f.c).fold(0.0, worse_max);
    let result = BoundCheckResult {
        name: "importance_bound".into(),
        trials: fits.len(),
        min_slack,
        max_residual: 0.0,
        residual_tolerance: 0.0,
        constants: BTreeMap::new(),
        passed: !fits.is_empty() && fits.iter().all(|f| f.passed),
    }
    .with_constant("c_max", max_c)
    .with_constant("slope_min", min_fit_slope);
    Ok((result, fits))
}

/// Runs all five checks in chain order.
pub fn run_suite(cfg: &SuiteConfig) -> Result<Vec<BoundCheckResult>> {
    Ok(vec![
        logit_bound_suite(cfg)?,
        softmax_uniformity_suite(cfg)?,
        update_decomposition_suite(cfg)?,
        law_of_cosines_suite(cfg)?,
        importance_bound_suite(cfg)?.0,
    ])
}
