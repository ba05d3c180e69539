use std::collections::BTreeMap;

use gatenorm_core::checkpoint::{
    enumerate_layers, read_index, synth_attention_checkpoint, synth_checkpoint, write_checkpoint, AttentionShape,
    Dtype, NamingScheme, Role, TensorSpec,
};
use gatenorm_core::rng::seeded;
use gatenorm_core::scoring::{
    plan_one_shot, plan_random, score_checkpoint, score_model, GateScore, PlanMethod, PruneUnit, PruningPlan,
    ScoreMode, ScoreOptions, ScoreTable,
};
use gatenorm_core::sim::{Model, ModelConfig, Suppression};
use gatenorm_core::ErrorKind;
use proptest::prelude::*;
use rand::Rng;

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

/// Gate-norm straight from stored `(out, in)` rows, with grouped key heads
/// replicated by index arithmetic.
fn stored_oracle(q: &[f32], k: &[f32], dim: usize, kv_rows: usize, heads: usize, per_head: bool) -> f64 {
    let d = dim / heads;
    let group = heads / (kv_rows / d);
    let key_row = |r: usize| (r / d / group) * d + r % d;
    let blocks: Vec<std::ops::Range<usize>> =
        if per_head { (0..heads).map(|h| h * d..(h + 1) * d).collect() } else { vec![0..dim] };
    let mut total = 0.0;
    for rows in blocks {
        for i in 0..dim {
            for j in 0..dim {
                let m: f64 = rows.clone().map(|r| q[r * dim + i] as f64 * k[key_row(r) * dim + j] as f64).sum();
                total += m * m;
            }
        }
    }
    total.sqrt()
}

#[test]
fn checkpoint_scores_match_in_memory_scores() {
    let cfg = ModelConfig::default();
    let supp = Suppression(vec![(3, 0.25)]);
    let bytes = synth_checkpoint(&cfg, 11, &supp, Dtype::F32).unwrap();
    let index = read_index(&bytes).unwrap();
    let map = enumerate_layers(&index, &NamingScheme::llama()).unwrap();
    let model = Model::<f32>::init_random(&cfg, 11, &supp).unwrap();
    for mode in [ScoreMode::Whole, ScoreMode::PerHead { heads: 4 }] {
        let opts = ScoreOptions { mode, heads: None };
        let from_file = score_checkpoint::<f64>(&index, &map, &bytes, &opts).unwrap();
        let in_memory = score_model(&model, mode).unwrap();
        for (a, b) in from_file.iter().zip(&in_memory) {
            assert_eq!(a.layer, b.layer);
            assert!(rel(a.m, b.m) < 1e-5, "layer {}: {} vs {}", a.layer, a.m, b.m);
        }
    }
}

#[test]
fn attention_only_checkpoint_matches_full_model_draws() {
    let cfg = ModelConfig::default();
    let supp = Suppression(vec![(5, 1e-3)]);
    let mut bytes = Vec::new();
    synth_attention_checkpoint(&mut bytes, AttentionShape::square(8, 64), Dtype::F32, 4, &supp).unwrap();
    let index = read_index(&bytes).unwrap();
    let map = enumerate_layers(&index, &NamingScheme::llama()).unwrap();
    let got = score_checkpoint::<f32>(&index, &map, &bytes, &ScoreOptions::whole()).unwrap();
    let want = score_model(&Model::<f32>::init_random(&cfg, 4, &supp).unwrap(), ScoreMode::Whole).unwrap();
    for (a, b) in got.iter().zip(&want) {
        assert!(rel(a.m, b.m) < 1e-6);
    }
}

fn gqa_file(dim: usize, kv_rows: usize, seed: u64) -> (Vec<u8>, Vec<f32>, Vec<f32>) {
    let mut rng = seeded(seed, 0);
    let q: Vec<f32> = (0..dim * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let k: Vec<f32> = (0..kv_rows * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let specs = [
        TensorSpec::new("model.layers.0.self_attn.q_proj.weight", Dtype::F32, &[dim, dim]),
        TensorSpec::new("model.layers.0.self_attn.k_proj.weight", Dtype::F32, &[kv_rows, dim]),
    ];
    let mut file = Vec::new();
    write_checkpoint(&mut file, &specs, &BTreeMap::new(), |i, buf| {
        buf.extend_from_slice(if i == 0 { &q } else { &k });
        Ok(())
    })
    .unwrap();
    (file, q, k)
}

#[test]
fn grouped_keys_are_replicated_per_query_head() {
    let (dim, heads) = (16, 4);
    for kv_heads in [1, 2, 4] {
        let kv_rows = kv_heads * dim / heads;
        let (file, q, k) = gqa_file(dim, kv_rows, kv_heads as u64);
        let index = read_index(&file).unwrap();
        let map = enumerate_layers(&index, &NamingScheme::llama()).unwrap();
        for per_head in [false, true] {
            let mode = if per_head { ScoreMode::PerHead { heads } } else { ScoreMode::Whole };
            let opts = ScoreOptions { mode, heads: Some(heads) };
            let got = score_checkpoint::<f64>(&index, &map, &file, &opts).unwrap()[0].m;
            let want = stored_oracle(&q, &k, dim, kv_rows, heads, per_head);
            assert!(rel(got, want) < 1e-12, "kv_heads {kv_heads} per_head {per_head}");
        }
    }
}

#[test]
fn grouped_keys_without_head_count_are_a_contract_error() {
    let (file, _, _) = gqa_file(16, 8, 1);
    let index = read_index(&file).unwrap();
    let map = enumerate_layers(&index, &NamingScheme::llama()).unwrap();
    let err = score_checkpoint::<f32>(&index, &map, &file, &ScoreOptions::whole()).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Contract);
}

#[test]
fn custom_naming_scheme_finds_renamed_tensors() {
    let specs = [
        TensorSpec::new("blocks.0.attn.wq", Dtype::F32, &[2, 2]),
        TensorSpec::new("blocks.0.attn.wk", Dtype::F32, &[2, 2]),
        TensorSpec::new("blocks.1.attn.wq", Dtype::F32, &[2, 2]),
        TensorSpec::new("blocks.1.attn.wk", Dtype::F32, &[2, 2]),
    ];
    let mut file = Vec::new();
    write_checkpoint(&mut file, &specs, &BTreeMap::new(), |i, buf| {
        // layer 1: identity pair; layer 2: twice the identity for the query
        let s = if i == 2 { 2.0 } else { 1.0 };
        buf.extend_from_slice(&[s, 0.0, 0.0, s]);
        Ok(())
    })
    .unwrap();
    let index = read_index(&file).unwrap();
    assert!(enumerate_layers(&index, &NamingScheme::llama()).is_err());
    let scheme =
        NamingScheme::custom(&[(Role::Query, "blocks.{i}.attn.wq"), (Role::Key, "blocks.{i}.attn.wk")]).unwrap();
    let map = enumerate_layers(&index, &scheme).unwrap();
    let scores = score_checkpoint::<f64>(&index, &map, &file, &ScoreOptions::whole()).unwrap();
    assert_eq!(scores.iter().map(|s| s.m).collect::<Vec<_>>(), [2f64.sqrt(), 8f64.sqrt()]);
}

#[test]
fn planted_layers_are_recovered_for_every_seed() {
    let supp = Suppression(vec![(5, 1e-3), (7, 1e-3)]);
    for seed in 100..120 {
        let model = Model::<f32>::init_random(&ModelConfig::default(), seed, &supp).unwrap();
        let mut removed = plan_one_shot(&score_model(&model, ScoreMode::Whole).unwrap(), 2).unwrap().removed;
        removed.sort_unstable();
        assert_eq!(removed, [5, 7], "seed {seed}");
    }
}

#[test]
fn random_plans_are_roughly_uniform() {
    // each of 8 layers should be drawn about 2/8 of the time
    let mut counts = [0usize; 8];
    let trials = 4000;
    for seed in 0..trials {
        for l in plan_random(8, 2, PruneUnit::AttentionSublayer, seed).unwrap().removed {
            counts[l - 1] += 1;
        }
    }
    let expected = trials as f64 * 2.0 / 8.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 7 degrees of freedom; 24.3 is the 0.999 quantile
    assert!(chi2 < 24.3, "chi2 {chi2}, counts {counts:?}");
}

#[test]
fn plan_documents_round_trip() {
    let scores: Vec<GateScore> = [0.5, 0.1, 0.9]
        .iter()
        .enumerate()
        .map(|(i, &m)| GateScore { layer: i + 1, m, mode: ScoreMode::Whole })
        .collect();
    let plan = plan_one_shot(&scores, 2).unwrap().with_fingerprint("abc");
    assert_eq!(PruningPlan::from_document(&plan.to_document()).unwrap(), plan);
    assert_eq!(plan.method, PlanMethod::GateNorm);
    let table = ScoreTable { scores, source_fingerprint: "abc".into() };
    assert_eq!(ScoreTable::from_csv(&table.to_csv()).unwrap(), table);
}

#[test]
fn counts_beyond_depth_are_rejected() {
    let scores = [GateScore { layer: 1, m: 1.0, mode: ScoreMode::Whole }];
    assert_eq!(plan_one_shot(&scores, 2).unwrap_err().kind(), ErrorKind::Contract);
    assert!(plan_random(3, 4, PruneUnit::FullBlock, 0).is_err());
}

proptest! {
    #[test]
    fn gate_norm_scales_with_both_factors(a in 0.01f64..10.0, b in 0.01f64..10.0, seed in 0u64..100) {
        let cfg = ModelConfig { layers: 1, dim: 8, heads: 2, ..ModelConfig::default() };
        let model = Model::<f64>::init_random(&cfg, seed, &Suppression::none()).unwrap();
        let base = score_model(&model, ScoreMode::Whole).unwrap()[0].m;
        let mut scaled = model.clone();
        scaled.blocks[0].wq = scaled.blocks[0].wq.scale(a);
        scaled.blocks[0].wk = scaled.blocks[0].wk.scale(b);
        let m = score_model(&scaled, ScoreMode::Whole).unwrap()[0].m;
        prop_assert!(rel(m, a * b * base) < 1e-12);
    }

    #[test]
    fn one_head_per_head_equals_whole(seed in 0u64..100) {
        let cfg = ModelConfig { layers: 1, dim: 8, heads: 1, ..ModelConfig::default() };
        let model = Model::<f64>::init_random(&cfg, seed, &Suppression::none()).unwrap();
        let whole = score_model(&model, ScoreMode::Whole).unwrap()[0].m;
        let one = score_model(&model, ScoreMode::PerHead { heads: 1 }).unwrap()[0].m;
        prop_assert!(rel(whole, one) < 1e-12);
    }
}
