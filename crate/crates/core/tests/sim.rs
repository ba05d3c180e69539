use gatenorm_core::checkpoint::{enumerate_layers, read_index, Dtype, NamingScheme};
use gatenorm_core::rng::seeded;
use gatenorm_core::sim::{
    attention_detail, attention_forward, BlockWeights, CaptureFlags, Model, ModelConfig, NormKind, PlanApplication,
    Suppression,
};
use gatenorm_core::{Activation, Matrix};
use proptest::prelude::*;
use rand::Rng;

fn tiny(layers: usize, dim: usize, heads: usize, causal: bool, rope: bool) -> ModelConfig {
    ModelConfig { layers, dim, heads, mlp_dim: 2 * dim, vocab: 17, max_seq: 16, causal, rope, ..ModelConfig::default() }
}

fn gaussian_rows(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
    let mut rng = seeded(seed, 99);
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn rotate(v: &mut [f64], pos: usize) {
    let half = v.len() / 2;
    for p in 0..half {
        let theta = pos as f64 * 10_000f64.powf(-2.0 * p as f64 / v.len() as f64);
        let (a, b) = (v[p], v[p + half]);
        v[p] = a * theta.cos() - b * theta.sin();
        v[p + half] = a * theta.sin() + b * theta.cos();
    }
}

/// Loop-by-loop multi-head attention.
fn reference_attention(z: &Matrix<f64>, w: &BlockWeights<f64>, cfg: &ModelConfig) -> Vec<Vec<f64>> {
    let (s, dim, d) = (z.rows(), cfg.dim, cfg.head_dim());
    let project = |m: &Matrix<f64>| -> Vec<Vec<f64>> {
        (0..s).map(|i| (0..dim).map(|c| (0..dim).map(|k| z.get(i, k) * m.get(k, c)).sum()).collect()).collect()
    };
    let (mut q, mut k, v) = (project(&w.wq), project(&w.wk), project(&w.wv));
    if cfg.rope {
        for i in 0..s {
            for h in 0..cfg.heads {
                rotate(&mut q[i][h * d..(h + 1) * d], i);
                rotate(&mut k[i][h * d..(h + 1) * d], i);
            }
        }
    }
    let mut concat = vec![vec![0.0; dim]; s];
    for h in 0..cfg.heads {
        for i in 0..s {
            let visible = if cfg.causal { i + 1 } else { s };
            let logits: Vec<f64> = (0..visible)
                .map(|j| (0..d).map(|c| q[i][h * d + c] * k[j][h * d + c]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            for (j, l) in logits.iter().enumerate() {
                let a = (l - max).exp() / total;
                for c in 0..d {
                    concat[i][h * d + c] += a * v[j][h * d + c];
                }
            }
        }
    }
    (0..s).map(|i| (0..dim).map(|c| (0..dim).map(|k| concat[i][k] * w.wo.get(k, c)).sum()).collect()).collect()
}

#[test]
fn attention_matches_loop_reference() {
    for (seed, (heads, causal, rope)) in
        [(1, false, false), (2, true, false), (4, true, true), (2, false, true)].into_iter().enumerate()
    {
        let cfg = tiny(1, 8, heads, causal, rope);
        let model = Model::<f64>::init_random(&cfg, seed as u64, &Suppression::none()).unwrap();
        let z = gaussian_rows(7, 8, seed as u64);
        let got = attention_forward(&z, &model.blocks[0], &cfg).unwrap();
        let want = reference_attention(&z, &model.blocks[0], &cfg);
        for i in 0..7 {
            for c in 0..8 {
                assert!((got.get(i, c) - want[i][c]).abs() < 1e-12, "row {i} col {c}");
            }
        }
    }
}

#[test]
fn two_token_hand_case() {
    let cfg = tiny(1, 2, 1, true, false);
    let mut model = Model::<f64>::init_random(&cfg, 0, &Suppression::none()).unwrap();
    let b = &mut model.blocks[0];
    for m in [&mut b.wq, &mut b.wk, &mut b.wv, &mut b.wo] {
        *m = Matrix::identity(2);
    }
    let z = Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
    let out = attention_forward(&z, &model.blocks[0], &cfg).unwrap();
    // token 0 sees only itself; token 1 weighs logits 0 and 1/sqrt(2)
    let e = (1.0 / 2f64.sqrt()).exp();
    let expected = [[1.0, 0.0], [1.0 / (1.0 + e), e / (1.0 + e)]];
    for i in 0..2 {
        for c in 0..2 {
            assert!((out.get(i, c) - expected[i][c]).abs() < 1e-15);
        }
    }
}

#[test]
fn single_token_attention_is_value_then_output() {
    let cfg = tiny(1, 8, 2, false, false);
    let model = Model::<f64>::init_random(&cfg, 3, &Suppression::none()).unwrap();
    let b = &model.blocks[0];
    let z = gaussian_rows(1, 8, 3);
    let out = attention_forward(&z, b, &cfg).unwrap();
    for c in 0..8 {
        let want: f64 =
            (0..8).map(|k| (0..8).map(|j| z.get(0, j) * b.wv.get(j, k)).sum::<f64>() * b.wo.get(k, c)).sum();
        assert!((out.get(0, c) - want).abs() < 1e-12);
    }
}

#[test]
fn zero_query_gives_uniform_weights() {
    let cfg = tiny(1, 8, 2, true, false);
    let model = Model::<f32>::init_random(&cfg, 4, &Suppression(vec![(1, 0.0)])).unwrap();
    let z = gaussian_rows(6, 8, 4);
    let z = Matrix::new(6, 8, z.data().iter().map(|&v| v as f32).collect()).unwrap();
    let detail = attention_detail(&z, &model.blocks[0], &cfg).unwrap();
    for probs in &detail.probs {
        for i in 0..6 {
            for j in 0..=i {
                assert_eq!(probs.get(i, j), 1.0 / (i + 1) as f32);
            }
        }
    }
}

#[test]
fn residual_identities_hold_exactly() {
    let cfg = tiny(4, 16, 4, true, true);
    let model = Model::<f32>::init_random(&cfg, 5, &Suppression::none()).unwrap();
    let tokens: Vec<u32> = (0..12).map(|i| (i * 5 % 17) as u32).collect();
    let trace = model.forward(&tokens, &PlanApplication::none(4), CaptureFlags::ALL).unwrap();
    for l in 1..=4 {
        let lt = &trace.layers[l - 1];
        let x = lt.input.as_ref().unwrap();
        let y = lt.post_attn.as_ref().unwrap();
        assert_eq!(&x.add(lt.attn_out.as_ref().unwrap()).unwrap(), y);
        assert_eq!(&y.add(lt.mlp_out.as_ref().unwrap()).unwrap(), trace.input(l + 1).unwrap());
    }
}

#[test]
fn mac_count_matches_formula_and_falls_with_each_removal() {
    let cfg = tiny(6, 16, 2, true, false);
    let model = Model::<f32>::init_random(&cfg, 6, &Suppression::none()).unwrap();
    let tokens = [1u32, 2, 3, 4, 5, 6, 7, 8, 9];
    let s = tokens.len();
    let mut last = u64::MAX;
    for removed in 0..=6 {
        let layers: Vec<usize> = (1..=removed).collect();
        let mut plan = PlanApplication::none(6);
        for &l in &layers {
            plan.flags[l - 1].attn_disabled = true;
        }
        let macs = model.forward(&tokens, &plan, CaptureFlags::LOGITS).unwrap().macs;
        let want = (6 - removed) as u64 * cfg.attention_macs(s) + 6 * cfg.mlp_macs(s) + cfg.head_macs(s);
        assert_eq!(macs, want);
        assert!(macs < last);
        last = macs;
    }
}

#[test]
fn block_removal_passes_the_residual_through() {
    let cfg = tiny(3, 8, 2, true, false);
    let model = Model::<f32>::init_random(&cfg, 7, &Suppression::none()).unwrap();
    let mut plan = PlanApplication::none(3);
    plan.flags[1].block_disabled = true;
    let trace = model.forward(&[3, 1, 4, 1, 5], &plan, CaptureFlags::ALL).unwrap();
    assert_eq!(trace.input(2), trace.input(3));
}

/// Attention output approaches the uniform-attention output linearly in the
/// query scale.
#[test]
fn suppression_limit_is_first_order() {
    let cfg = tiny(1, 16, 2, false, false);
    let z = gaussian_rows(10, 16, 8);
    let out_at = |t: f64| {
        let model = Model::<f64>::init_random(&cfg, 8, &Suppression(vec![(1, t)])).unwrap();
        attention_forward(&z, &model.blocks[0], &cfg).unwrap()
    };
    let limit = out_at(0.0);
    let ts = [1e-1, 1e-2, 1e-3];
    let gaps: Vec<f64> = ts
        .iter()
        .map(|&t| {
            let d = out_at(t).sub(&limit).unwrap();
            d.data().iter().map(|v| v * v).sum::<f64>().sqrt()
        })
        .collect();
    let xs: Vec<f64> = ts.iter().map(|t| t.ln()).collect();
    let ys: Vec<f64> = gaps.iter().map(|g| g.ln()).collect();
    let (mx, my) = (xs.iter().sum::<f64>() / 3.0, ys.iter().sum::<f64>() / 3.0);
    let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
        / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    assert!(slope >= 0.8, "slope {slope}");
    assert!(gaps[2] < gaps[1] && gaps[1] < gaps[0]);
}

#[test]
fn checkpoint_round_trip_per_dtype() {
    let cfg = ModelConfig { norm: NormKind::LayerNorm, activation: Activation::Silu, ..tiny(2, 8, 2, true, true) };
    let model = Model::<f32>::init_random(&cfg, 9, &Suppression(vec![(2, 0.1)])).unwrap();
    let tokens = [0u32, 5, 9, 16, 2, 2];
    let plan = PlanApplication::none(2);
    let want = model.forward(&tokens, &plan, CaptureFlags::LOGITS).unwrap().logits.unwrap();
    for (dtype, tol) in [(Dtype::F32, 0.0), (Dtype::F16, 2e-2), (Dtype::BF16, 1e-1)] {
        let bytes = model.to_checkpoint_bytes(dtype).unwrap();
        let index = read_index(&bytes).unwrap();
        let map = enumerate_layers(&index, &NamingScheme::llama()).unwrap();
        assert_eq!(Model::<f32>::config_from_metadata(&index).unwrap().unwrap(), cfg);
        let loaded = Model::<f32>::load_from_checkpoint(&index, &map, &cfg, &bytes).unwrap();
        let got = loaded.forward(&tokens, &plan, CaptureFlags::LOGITS).unwrap().logits.unwrap();
        let worst = got.data().iter().zip(want.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(worst <= tol, "{dtype:?}: {worst}");
    }
}

#[test]
fn out_of_range_inputs_are_rejected() {
    let cfg = tiny(1, 8, 2, true, false);
    let model = Model::<f32>::init_random(&cfg, 0, &Suppression::none()).unwrap();
    let plan = PlanApplication::none(1);
    assert!(model.forward(&[], &plan, CaptureFlags::LOGITS).is_err());
    assert!(model.forward(&[17], &plan, CaptureFlags::LOGITS).is_err());
    assert!(model.forward(&[0; 17], &plan, CaptureFlags::LOGITS).is_err());
    assert!(model.forward(&[0], &PlanApplication::none(2), CaptureFlags::LOGITS).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn skip_equals_zeroing(seed in 0u64..1000, mask in prop::collection::vec(any::<bool>(), 4), len in 1usize..16) {
        let cfg = tiny(4, 8, 2, true, true);
        let model = Model::<f32>::init_random(&cfg, seed, &Suppression::none()).unwrap();
        let tokens: Vec<u32> = (0..len).map(|i| ((i as u64 * 7 + seed) % 17) as u32).collect();
        let layers: Vec<usize> = (1..=4).filter(|l| mask[l - 1]).collect();
        let mut skip = PlanApplication::none(4);
        for &l in &layers {
            skip.flags[l - 1].attn_disabled = true;
        }
        let zero = PlanApplication::zeroing(4, &layers).unwrap();
        let a = model.forward(&tokens, &skip, CaptureFlags::LOGITS).unwrap().logits.unwrap();
        let b = model.forward(&tokens, &zero, CaptureFlags::LOGITS).unwrap().logits.unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn causal_prefix_is_stable(seed in 0u64..1000, len in 2usize..16) {
        // appending tokens never changes earlier causal outputs
        let cfg = tiny(2, 8, 2, true, true);
        let model = Model::<f64>::init_random(&cfg, seed, &Suppression::none()).unwrap();
        let tokens: Vec<u32> = (0..len).map(|i| ((i as u64 * 3 + seed) % 17) as u32).collect();
        let plan = PlanApplication::none(2);
        let full = model.forward(&tokens, &plan, CaptureFlags::LOGITS).unwrap().logits.unwrap();
        let prefix = model.forward(&tokens[..len - 1], &plan, CaptureFlags::LOGITS).unwrap().logits.unwrap();
        for i in 0..len - 1 {
            for (a, b) in full.row(i).iter().zip(prefix.row(i)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
