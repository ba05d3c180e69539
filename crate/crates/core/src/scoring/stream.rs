use super::gate::{GateScore, ScoreMode};
use crate::checkpoint::{read_tensor, ByteSource, CheckpointIndex, LayerTensorMap, Role};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{matmul_tn, sum_of_squares, Matrix};

/// Options for [`score_checkpoint`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ScoreOptions {
    pub mode: ScoreMode,
    /// Query head count. Required when key projections are narrower than
    /// query projections (grouped-query attention) and implied by
    /// [`ScoreMode::PerHead`].
    pub heads: Option<usize>,
}

impl ScoreOptions {
    pub fn whole() -> Self {
        Self::default()
    }

    fn heads(&self) -> Option<usize> {
        match self.mode {
            ScoreMode::PerHead { heads } => Some(heads),
            ScoreMode::Whole => self.heads,
        }
    }
}

/// Expands grouped key heads to one block per query head.
///
/// `stored_k` is `(kv_heads·d) x D` in stored orientation; query head `h`
/// reads key head `h / (H / kv_heads)`, mirroring inference-time KV
/// replication.
pub fn expand_kv_heads<T: Scalar>(stored_k: &Matrix<T>, q_rows: usize, heads: usize) -> Result<Matrix<T>> {
    if heads == 0 || !q_rows.is_multiple_of(heads) {
        return Err(Error::contract(format!("{q_rows} query rows do not split into {heads} heads")));
    }
    let d = q_rows / heads;
    if !stored_k.rows().is_multiple_of(d) {
        return Err(Error::shape(
            "expand_kv_heads",
            format!("key rows {} are not a multiple of head width {d}", stored_k.rows()),
        ));
    }
    let kv_heads = stored_k.rows() / d;
    if kv_heads == 0 || !heads.is_multiple_of(kv_heads) {
        return Err(Error::shape("expand_kv_heads", format!("{heads} query heads cannot share {kv_heads} key heads")));
    }
    let group = heads / kv_heads;
    let cols = stored_k.cols();
    let mut data = Vec::with_capacity(q_rows * cols);
    for h in 0..heads {
        let g = h / group;
        data.extend_from_slice(&stored_k.data()[g * d * cols..(g + 1) * d * cols]);
    }
    Matrix::new(q_rows, cols, data)
}

/// Gate-norm from projections in stored `(out, in)` orientation, i.e. the
/// transposes of `W_q` and `W_k`; `M = stored_qᵀ · stored_k`.
pub fn gate_norm_stored<T: Scalar>(stored_q: &Matrix<T>, stored_k: &Matrix<T>, mode: ScoreMode) -> Result<f64> {
    if stored_q.shape() != stored_k.shape() {
        return Err(Error::shape(
            "gate_norm",
            format!("query {:?} and key {:?} projections differ", stored_q.shape(), stored_k.shape()),
        ));
    }
    match mode {
        ScoreMode::Whole => Ok(sum_of_squares(matmul_tn(stored_q, stored_k)?.data()).sqrt()),
        ScoreMode::PerHead { heads } => {
            let rows = stored_q.rows();
            if heads == 0 || !rows.is_multiple_of(heads) {
                return Err(Error::contract(format!("projection width {rows} is not divisible by {heads} heads")));
            }
            let d = rows / heads;
            let mut total = 0.0;
            for h in 0..heads {
                let m = matmul_tn(&stored_q.row_block(h * d, d), &stored_k.row_block(h * d, d))?;
                total += sum_of_squares(m.data());
            }
            Ok(total.sqrt())
        }
    }
}

fn score_layer<T: Scalar>(
    index: &CheckpointIndex,
    names: &crate::checkpoint::LayerTensors,
    source: &dyn ByteSource,
    opts: &ScoreOptions,
) -> Result<f64> {
    let stored_q = read_tensor::<T>(index, names.require(Role::Query)?, source)?;
    let mut stored_k = read_tensor::<T>(index, names.require(Role::Key)?, source)?;
    if stored_k.cols() != stored_q.cols() {
        return Err(Error::shape(
            "score_checkpoint",
            format!("query {:?} and key {:?} disagree on model width", stored_q.shape(), stored_k.shape()),
        ));
    }
    if stored_k.rows() != stored_q.rows() {
        let heads = opts.heads().ok_or_else(|| {
            Error::contract(format!(
                "key projection has {} outputs and query {}; the head count is needed to expand grouped keys",
                stored_k.rows(),
                stored_q.rows()
            ))
        })?;
        stored_k = expand_kv_heads(&stored_k, stored_q.rows(), heads)?;
    }
    gate_norm_stored(&stored_q, &stored_k, opts.mode)
}

/// Scores every layer of a checkpoint, one layer at a time: a layer's
/// decoded query and key tensors are dropped before the next layer is read.
pub fn score_checkpoint<T: Scalar>(
    index: &CheckpointIndex,
    map: &LayerTensorMap,
    source: &dyn ByteSource,
    opts: &ScoreOptions,
) -> Result<Vec<GateScore>> {
    map.layers
        .iter()
        .map(|names| {
            score_layer::<T>(index, names, source, opts)
                .map(|m| GateScore { layer: names.layer, m, mode: opts.mode })
                .map_err(|e| e.at_layer(names.layer))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::gate::gate_norm;
    use crate::tensor::transpose;

    #[test]
    fn stored_orientation_matches_math_orientation() {
        let wq = Matrix::<f64>::from_fn(6, 6, |i, j| ((i * 6 + j) as f64 * 1.7).sin());
        let wk = Matrix::<f64>::from_fn(6, 6, |i, j| ((i * 6 + j) as f64 * 0.9 + 0.3).cos());
        for mode in [ScoreMode::Whole, ScoreMode::PerHead { heads: 3 }] {
            let math = gate_norm(&wq, &wk, mode).unwrap();
            let stored = gate_norm_stored(&transpose(&wq), &transpose(&wk), mode).unwrap();
            assert!((math - stored).abs() < 1e-9 * math);
        }
        // the opposite orientation gives a different number in general
        let wrong = gate_norm(&transpose(&wq), &transpose(&wk), ScoreMode::Whole).unwrap();
        assert!((wrong - gate_norm(&wq, &wk, ScoreMode::Whole).unwrap()).abs() > 1e-6);
    }

    #[test]
    fn kv_expansion_replicates_groups() {
        // 4 query heads of width 2 over 2 key heads
        let k = Matrix::<f32>::from_fn(4, 3, |i, j| (i * 10 + j) as f32);
        let e = expand_kv_heads(&k, 8, 4).unwrap();
        assert_eq!(e.shape(), (8, 3));
        assert_eq!(e.row_block(0, 2), k.row_block(0, 2));
        assert_eq!(e.row_block(2, 2), k.row_block(0, 2));
        assert_eq!(e.row_block(4, 2), k.row_block(2, 2));
        assert_eq!(e.row_block(6, 2), k.row_block(2, 2));
        assert!(expand_kv_heads(&k, 8, 3).is_err());
        assert!(expand_kv_heads(&Matrix::<f32>::zeros(3, 3), 8, 4).is_err());
    }
}
