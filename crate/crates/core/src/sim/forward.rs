use super::config::{ModelConfig, NormKind};
use super::model::{BlockWeights, Model, NormParams};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::scoring::{PruneUnit, PruningPlan};
use crate::tensor::{layer_norm_into, matmul, matmul_nt, rms_norm_into, row_softmax, Matrix, SupportMask};

/// Per-layer switches applied during a forward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BlockFlags {
    /// Skip the attention sublayer entirely, so `Y = X`.
    pub attn_disabled: bool,
    /// Skip the whole block, so the next input equals this input.
    pub block_disabled: bool,
    /// Compute attention, then replace its output with zeros before the
    /// residual add. Arithmetically equivalent to `attn_disabled`; exists to
    /// cross-check the skip path.
    pub zero_attn_out: bool,
}

/// A pruning plan resolved to per-layer flags.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanApplication {
    pub plan: Option<PruningPlan>,
    pub flags: Vec<BlockFlags>,
}

impl PlanApplication {
    /// Nothing removed.
    pub fn none(layers: usize) -> Self {
        Self { plan: None, flags: vec![BlockFlags::default(); layers] }
    }

    pub fn from_plan(plan: &PruningPlan, layers: usize) -> Result<Self> {
        plan.validate(layers)?;
        let mut flags = vec![BlockFlags::default(); layers];
        for &l in &plan.removed {
            match plan.unit {
                PruneUnit::AttentionSublayer => flags[l - 1].attn_disabled = true,
                PruneUnit::FullBlock => flags[l - 1].block_disabled = true,
            }
        }
        Ok(Self { plan: Some(plan.clone()), flags })
    }

    /// Runs attention at `layers` but zeroes its output.
    pub fn zeroing(total: usize, layers: &[usize]) -> Result<Self> {
        let mut app = Self::none(total);
        for &l in layers {
            if l == 0 || l > total {
                return Err(Error::contract(format!("layer {l} outside 1..={total}")));
            }
            app.flags[l - 1].zero_attn_out = true;
        }
        Ok(app)
    }

    pub fn attention_layers_removed(&self) -> usize {
        self.flags.iter().filter(|f| f.attn_disabled || f.block_disabled).count()
    }
}

/// Which activations a forward pass keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CaptureFlags {
    /// `X_ℓ` for every layer plus the final residual `X_{L+1}`.
    pub inputs: bool,
    pub attn_out: bool,
    /// `Y_ℓ = X_ℓ + AttnOut_ℓ`.
    pub post_attn: bool,
    pub mlp_out: bool,
    pub logits: bool,
}

impl CaptureFlags {
    pub const ALL: Self = Self { inputs: true, attn_out: true, post_attn: true, mlp_out: true, logits: true };
    pub const LOGITS: Self = Self { inputs: false, attn_out: false, post_attn: false, mlp_out: false, logits: true };
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LayerTrace<T> {
    pub input: Option<Matrix<T>>,
    pub attn_out: Option<Matrix<T>>,
    pub post_attn: Option<Matrix<T>>,
    pub mlp_out: Option<Matrix<T>>,
}

/// Activations captured by [`model_forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace<T> {
    pub layers: Vec<LayerTrace<T>>,
    /// `X_{L+1}`, the residual stream after the last block.
    pub final_hidden: Option<Matrix<T>>,
    /// `S x V`
    pub logits: Option<Matrix<T>>,
    /// Multiply-accumulates performed, counted per executed sublayer.
    pub macs: u64,
}

impl<T: Scalar> ForwardTrace<T> {
    /// `X_ℓ` for `ℓ` in `1..=L+1`.
    pub fn input(&self, layer: usize) -> Option<&Matrix<T>> {
        if layer == self.layers.len() + 1 {
            self.final_hidden.as_ref()
        } else {
            self.layers.get(layer.checked_sub(1)?)?.input.as_ref()
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }
}

fn normalize<T: Scalar>(x: &Matrix<T>, params: &NormParams<T>, cfg: &ModelConfig) -> Matrix<T> {
    let eps = T::of(cfg.norm_eps);
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        match (cfg.norm, &params.bias) {
            (NormKind::LayerNorm, Some(bias)) => layer_norm_into(x.row(i), &params.gain, bias, eps, out.row_mut(i)),
            (NormKind::LayerNorm, None) => {
                let zeros = vec![T::zero(); x.cols()];
                layer_norm_into(x.row(i), &params.gain, &zeros, eps, out.row_mut(i))
            }
            (NormKind::RmsNorm, _) => rms_norm_into(x.row(i), &params.gain, eps, out.row_mut(i)),
        }
    }
    out
}

const ROPE_BASE: f64 = 10_000.0;

/// Rotates each head's columns in place using the half-split pairing
/// `(p, p + d/2)` with angle `pos * base^(-2p/d)`. Rotations preserve norms.
pub fn apply_rope<T: Scalar>(x: &mut Matrix<T>, heads: usize) {
    let d = x.cols() / heads;
    let half = d / 2;
    for pos in 0..x.rows() {
        let row = x.row_mut(pos);
        for h in 0..heads {
            let base = h * d;
            for p in 0..half {
                let theta = pos as f64 * ROPE_BASE.powf(-2.0 * p as f64 / d as f64);
                let (sin, cos) = theta.sin_cos();
                let (a, b) = (row[base + p].as_f64(), row[base + p + half].as_f64());
                row[base + p] = T::of(a * cos - b * sin);
                row[base + p + half] = T::of(a * sin + b * cos);
            }
        }
    }
}

/// Per-head internals of one attention evaluation.
#[derive(Debug, Clone)]
pub struct AttentionDetail<T> {
    /// Scaled logits `Q_h K_hᵀ / sqrt(d_h)`, one `S x S` matrix per head.
    pub logits: Vec<Matrix<T>>,
    /// Softmax weights, masked entries 0.
    pub probs: Vec<Matrix<T>>,
    /// `V_h W_o^{(h)}`: each head's values already projected to `D`.
    pub value_out: Vec<Matrix<T>>,
    pub mask: SupportMask,
    pub out: Matrix<T>,
}

fn check_seq<T: Scalar>(z: &Matrix<T>, cfg: &ModelConfig) -> Result<()> {
    if z.cols() != cfg.dim {
        return Err(Error::shape("attention_forward", format!("input width {} != dim {}", z.cols(), cfg.dim)));
    }
    if z.rows() > cfg.max_seq {
        return Err(Error::contract(format!("sequence length {} exceeds max_seq {}", z.rows(), cfg.max_seq)));
    }
    Ok(())
}

fn attention_impl<T: Scalar>(
    z: &Matrix<T>,
    w: &BlockWeights<T>,
    cfg: &ModelConfig,
    keep: bool,
) -> Result<(Matrix<T>, Option<AttentionDetail<T>>)> {
    check_seq(z, cfg)?;
    let d = cfg.head_dim();
    let mut q = matmul(z, &w.wq)?;
    let mut k = matmul(z, &w.wk)?;
    let v = matmul(z, &w.wv)?;
    if cfg.rope {
        apply_rope(&mut q, cfg.heads);
        apply_rope(&mut k, cfg.heads);
    }
    let mask = if cfg.causal { SupportMask::Causal } else { SupportMask::Full };
    // scaling S x D queries is cheaper than scaling S x S logits per head
    let q = q.scale(T::of(1.0 / (d as f64).sqrt()));
    let mut concat = Matrix::zeros(z.rows(), cfg.dim);
    let mut detail = keep.then(|| AttentionDetail {
        logits: Vec::new(),
        probs: Vec::new(),
        value_out: Vec::new(),
        mask: mask.clone(),
        out: Matrix::zeros(1, 1),
    });
    for h in 0..cfg.heads {
        let (qh, kh, vh) = (q.columns(h * d, d), k.columns(h * d, d), v.columns(h * d, d));
        let logits = matmul_nt(&qh, &kh)?;
        let probs = row_softmax(&logits, &mask)?;
        concat.set_columns(h * d, &matmul(&probs, &vh)?);
        if let Some(det) = detail.as_mut() {
            det.value_out.push(matmul(&vh, &w.wo.row_block(h * d, d))?);
            det.logits.push(logits);
            det.probs.push(probs);
        }
    }
    let out = matmul(&concat, &w.wo)?;
    if let Some(det) = detail.as_mut() {
        det.out = out.clone();
    }
    Ok((out, detail))
}

/// Multi-head self-attention on already-normalized rows `z` (`S x D`).
///
/// Each head reads a contiguous `D/H` column slice of `Q`, `K`, `V`; head
/// outputs are concatenated and projected by `W_o`.
pub fn attention_forward<T: Scalar>(z: &Matrix<T>, w: &BlockWeights<T>, cfg: &ModelConfig) -> Result<Matrix<T>> {
    attention_impl(z, w, cfg, false).map(|(out, _)| out)
}

/// [`attention_forward`] keeping logits, weights and projected values.
pub fn attention_detail<T: Scalar>(
    z: &Matrix<T>,
    w: &BlockWeights<T>,
    cfg: &ModelConfig,
) -> Result<AttentionDetail<T>> {
    attention_impl(z, w, cfg, true).map(|(_, d)| d.expect("detail requested"))
}

/// `W_2 · act(W_1 · norm(y))` applied row-wise, without the residual.
pub fn mlp_forward<T: Scalar>(y: &Matrix<T>, w: &BlockWeights<T>, cfg: &ModelConfig) -> Result<Matrix<T>> {
    let u = normalize(y, &w.mlp_norm, cfg);
    let hidden = matmul(&u, &w.w1)?.map(|x| cfg.activation.apply_scalar(x));
    matmul(&hidden, &w.w2)
}

/// One pre-norm block. Returns `X_{ℓ+1}`, the requested intermediates and
/// the multiply-accumulate count.
pub fn block_forward<T: Scalar>(
    x: &Matrix<T>,
    w: &BlockWeights<T>,
    cfg: &ModelConfig,
    flags: BlockFlags,
    capture: CaptureFlags,
) -> Result<(Matrix<T>, LayerTrace<T>, u64)> {
    check_seq(x, cfg)?;
    let seq = x.rows();
    let keep = |on: bool, m: &Matrix<T>| on.then(|| m.clone());
    if flags.block_disabled {
        let zeros = Matrix::zeros(seq, cfg.dim);
        let trace = LayerTrace {
            input: keep(capture.inputs, x),
            attn_out: keep(capture.attn_out, &zeros),
            post_attn: keep(capture.post_attn, x),
            mlp_out: keep(capture.mlp_out, &zeros),
        };
        return Ok((x.clone(), trace, 0));
    }

    let mut macs = 0;
    let (y, attn_out) = if flags.attn_disabled {
        (x.clone(), Matrix::zeros(seq, cfg.dim))
    } else {
        let z = normalize(x, &w.attn_norm, cfg);
        let mut a = attention_forward(&z, w, cfg)?;
        macs += cfg.attention_macs(seq);
        if flags.zero_attn_out {
            a = Matrix::zeros(seq, cfg.dim);
        }
        (x.add(&a)?, a)
    };
    let m = mlp_forward(&y, w, cfg)?;
    macs += cfg.mlp_macs(seq);
    let next = y.add(&m)?;
    let trace = LayerTrace {
        input: keep(capture.inputs, x),
        attn_out: capture.attn_out.then_some(attn_out),
        post_attn: keep(capture.post_attn, &y),
        mlp_out: capture.mlp_out.then_some(m),
    };
    Ok((next, trace, macs))
}

/// Embeds `tokens`, runs every block under `plan`, then the final norm and
/// output head.
pub fn model_forward<T: Scalar>(
    tokens: &[u32],
    model: &Model<T>,
    plan: &PlanApplication,
    capture: CaptureFlags,
) -> Result<ForwardTrace<T>> {
    let cfg = &model.config;
    if tokens.is_empty() {
        return Err(Error::contract("empty token sequence"));
    }
    if tokens.len() > cfg.max_seq {
        return Err(Error::contract(format!("sequence length {} exceeds max_seq {}", tokens.len(), cfg.max_seq)));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab) {
        return Err(Error::contract(format!("token id {bad} outside vocabulary of {}", cfg.vocab)));
    }
    if plan.flags.len() != cfg.layers {
        return Err(Error::contract(format!("plan covers {} layers, model has {}", plan.flags.len(), cfg.layers)));
    }

    let mut x = Matrix::from_fn(tokens.len(), cfg.dim, |i, j| model.embed.get(tokens[i] as usize, j));
    let mut layers = Vec::with_capacity(cfg.layers);
    let mut macs = 0;
    for (block, &flags) in model.blocks.iter().zip(&plan.flags) {
        let (next, trace, m) = block_forward(&x, block, cfg, flags, capture)?;
        layers.push(trace);
        macs += m;
        x = next;
    }
    let logits = if capture.logits {
        macs += cfg.head_macs(tokens.len());
        Some(matmul(&normalize(&x, &model.final_norm, cfg), &model.head)?)
    } else {
        None
    };
    Ok(ForwardTrace { layers, final_hidden: capture.inputs.then_some(x), logits, macs })
}

impl<T: Scalar> Model<T> {
    pub fn forward(&self, tokens: &[u32], plan: &PlanApplication, capture: CaptureFlags) -> Result<ForwardTrace<T>> {
        model_forward(tokens, self, plan, capture)
    }
}
