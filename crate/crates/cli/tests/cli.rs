use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn gatenorm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gatenorm")).current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = gatenorm(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    gatenorm(dir, args).status.code().expect("exit code")
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap()
}

fn json(dir: &Path, name: &str) -> Value {
    serde_json::from_str(&read(dir, name)).unwrap()
}

/// Planted toy checkpoint with layers 5 and 7 suppressed.
fn planted() -> (TempDir, PathBuf) {
    let tmp = TempDir::new().unwrap();
    ok(tmp.path(), &["synth", "--seed", "3", "--suppress", "5:1e-3,7:1e-3", "--out", "m.safetensors"]);
    let path = tmp.path().join("m.safetensors");
    (tmp, path)
}

#[test]
fn scoring_lists_every_layer_and_repeats_byte_for_byte() {
    let (tmp, _) = planted();
    let dir = tmp.path();
    ok(dir, &["score", "--checkpoint", "m.safetensors", "--out", "a.csv"]);
    ok(dir, &["score", "--checkpoint", "m.safetensors", "--out", "b.csv"]);
    let a = read(dir, "a.csv");
    assert_eq!(a, read(dir, "b.csv"));
    let layers: Vec<usize> = a.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(layers, (1..=8).collect::<Vec<_>>());
}

#[test]
fn per_head_scoring_needs_a_head_count() {
    let (tmp, _) = planted();
    let dir = tmp.path();
    assert_eq!(code(dir, &["score", "--checkpoint", "m.safetensors", "--mode", "per-head", "--out", "s.csv"]), 2);
    ok(dir, &["score", "--checkpoint", "m.safetensors", "--mode", "per-head", "--heads", "4", "--out", "s.csv"]);
    assert!(read(dir, "s.csv").contains("per-head:4"));
}

fn write_scores(dir: &Path, m: &[f64]) {
    let mut csv = String::from("layer,gate_norm,mode,source_fingerprint\n");
    for (i, v) in m.iter().enumerate() {
        csv.push_str(&format!("{},{v},whole,sha256:00\n", i + 1));
    }
    std::fs::write(dir.join("scores.csv"), csv).unwrap();
}

#[test]
fn plan_removes_the_lowest_scores_first() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    write_scores(dir, &[3.0, 1.0, 2.0]);
    ok(dir, &["plan", "--scores", "scores.csv", "-N", "2", "--out", "plan.json"]);
    let plan = json(dir, "plan.json");
    assert_eq!(plan["removed"], serde_json::json!([2, 3]));
    assert_eq!(plan["source_fingerprint"], "sha256:00");

    write_scores(dir, &[1.0, 1.0, 5.0]);
    ok(dir, &["plan", "--scores", "scores.csv", "-N", "1", "--out", "tie.json"]);
    assert_eq!(json(dir, "tie.json")["removed"], serde_json::json!([1]));
}

#[test]
fn removing_more_layers_than_exist_is_a_contract_error() {
    let tmp = TempDir::new().unwrap();
    write_scores(tmp.path(), &[3.0, 1.0, 2.0]);
    assert_eq!(code(tmp.path(), &["plan", "--scores", "scores.csv", "-N", "4", "--out", "p.json"]), 4);
}

#[test]
fn random_plans_repeat_for_a_fixed_seed() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    write_scores(dir, &[1.0; 12]);
    let plan = |seed: &str, out: &str| {
        ok(
            dir,
            &["plan", "--scores", "scores.csv", "--method", "random-attn", "-N", "5", "--seed", seed, "--out", out],
        );
        read(dir, out)
    };
    assert_eq!(plan("7", "a.json"), plan("7", "b.json"));
    let plans: Vec<String> = (0..5).map(|s| plan(&s.to_string(), "c.json")).collect();
    assert!(plans.iter().any(|p| *p != plans[0]));
}

#[test]
fn plans_from_scores_and_checkpoints_agree_on_planted_layers() {
    let (tmp, _) = planted();
    let dir = tmp.path();
    ok(dir, &["score", "--checkpoint", "m.safetensors", "--out", "s.csv"]);
    ok(dir, &["plan", "--scores", "s.csv", "-N", "2", "--out", "a.json"]);
    ok(dir, &["plan", "--checkpoint", "m.safetensors", "-N", "2", "--out", "b.json"]);
    assert_eq!(read(dir, "a.json"), read(dir, "b.json"));
    let mut removed: Vec<u64> =
        json(dir, "a.json")["removed"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
    removed.sort_unstable();
    assert_eq!(removed, [5, 7]);
}

#[test]
fn data_driven_plans_need_a_model() {
    let tmp = TempDir::new().unwrap();
    write_scores(tmp.path(), &[1.0, 2.0]);
    assert_eq!(
        code(tmp.path(), &["plan", "--scores", "scores.csv", "--method", "data-attn", "-N", "1", "--out", "p.json"]),
        2
    );
    ok(
        tmp.path(),
        &["plan", "--suppress", "5:1e-3", "--tokens", "128", "--method", "data-block", "-N", "3", "--out", "p.json"],
    );
    assert_eq!(json(tmp.path(), "p.json")["unit"], "full-block");
}

#[test]
fn empty_plan_simulates_the_baseline() {
    let (tmp, _) = planted();
    let dir = tmp.path();
    ok(dir, &["tokens", "--vocab", "256", "--count", "512", "--seed", "1", "--out", "t.bin"]);
    write_scores(dir, &[1.0; 8]);
    ok(dir, &["plan", "--scores", "scores.csv", "-N", "0", "--out", "p.json"]);
    ok(
        dir,
        &["simulate", "--checkpoint", "m.safetensors", "--stream", "t.bin", "--plan", "p.json", "--out", "sim.json"],
    );
    let sim = json(dir, "sim.json");
    assert_eq!(sim["perplexity"], sim["baseline_perplexity"]);
    assert_eq!(sim["flop_reduction"], 0.0);
    let layers = sim["importance"]["layers"].as_array().unwrap();
    assert_eq!(layers.len(), 8);
    // the planted layers carry the two smallest gate-norms
    let mut gate: Vec<(f64, u64)> =
        layers.iter().map(|l| (l["gate_norm"].as_f64().unwrap(), l["layer"].as_u64().unwrap())).collect();
    gate.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut lowest = [gate[0].1, gate[1].1];
    lowest.sort_unstable();
    assert_eq!(lowest, [5, 7]);
}

#[test]
fn simulate_rejects_a_plan_for_another_depth() {
    let (tmp, _) = planted();
    let dir = tmp.path();
    write_scores(dir, &[1.0, 2.0, 3.0]);
    ok(dir, &["plan", "--scores", "scores.csv", "-N", "1", "--out", "p.json"]);
    let args = ["simulate", "--checkpoint", "m.safetensors", "--tokens", "64", "--plan", "p.json", "--out", "s.json"];
    assert_ne!(code(dir, &args), 0);
}

#[test]
fn injected_softmax_fault_fails_uniformity() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let small = ["--trials", "300", "--rows", "100", "--sweep-models", "1"];
    let run = |extra: &[&str], out: &str| {
        let mut args = vec!["validate"];
        args.extend_from_slice(&small);
        args.extend_from_slice(extra);
        args.extend_from_slice(&["--out", out]);
        code(dir, &args)
    };
    assert_eq!(run(&[], "clean.json"), 0);
    let clean = json(dir, "clean.json");
    let names: Vec<&str> = clean["results"].as_array().unwrap().iter().map(|r| r["name"].as_str().unwrap()).collect();
    assert_eq!(names.len(), 5);
    for r in &clean["results"].as_array().unwrap()[..4] {
        assert_eq!(r["passed"], true, "{r}");
    }

    assert_eq!(run(&["--fault", "negated-stabilizer"], "fault.json"), 0);
    let fault = json(dir, "fault.json");
    let uniformity = fault["results"].as_array().unwrap().iter().find(|r| r["name"] == "softmax_uniformity").unwrap();
    assert_eq!(uniformity["passed"], false);
    assert_eq!(run(&["--fault", "negated-stabilizer", "--require-pass"], "f2.json"), 4);
    assert_eq!(run(&["--fault", "flip-signs"], "f3.json"), 2);

    // same seed and sizes give the same results document
    assert_eq!(run(&[], "again.json"), 0);
    assert_eq!(read(dir, "clean.json"), read(dir, "again.json"));
}

#[test]
fn merging_one_sweep_is_identity() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let sweep = ["sweep", "--suppress", "5:1e-3,7:1e-3", "--tokens", "256", "--counts", "0,1,2"];
    ok(dir, &[&sweep[..], &["--methods", "gate-norm,random-block", "--csv", "sw.csv", "--out", "sw.json"]].concat());
    ok(dir, &["report", "sw.json", "--out", "merged.json"]);
    assert_eq!(read(dir, "merged.sweep.csv"), read(dir, "sw.csv"));
    assert_eq!(json(dir, "merged.json")["sweep"], json(dir, "sw.json")["rows"]);
}

#[test]
fn report_rejects_inputs_of_different_depth() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    write_scores(dir, &[1.0, 2.0, 3.0]);
    std::fs::rename(dir.join("scores.csv"), dir.join("three.csv")).unwrap();
    write_scores(dir, &[1.0, 2.0]);
    assert_eq!(code(dir, &["report", "three.csv", "scores.csv", "--out", "r.json"]), 4);
    std::fs::write(dir.join("junk.txt"), "not a report").unwrap();
    assert_eq!(code(dir, &["report", "junk.txt", "--out", "r.json"]), 3);
}

#[test]
fn exit_codes_follow_the_contract() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("garbage.safetensors"), b"\x10\x00\x00\x00\x00\x00\x00\x00{not json}......").unwrap();
    assert_eq!(code(dir, &["score", "--checkpoint", "garbage.safetensors", "--out", "s.csv"]), 3);
    assert_eq!(code(dir, &["score", "--checkpoint", "missing.safetensors", "--out", "s.csv"]), 3);
    assert_eq!(code(dir, &["score", "--no-such-flag"]), 2);
    assert_eq!(code(dir, &["plan", "--out", "p.json"]), 2);
    assert_eq!(code(dir, &["synth", "--dtype", "f8", "--out", "m.safetensors"]), 2);
    assert_eq!(code(dir, &["synth", "--suppress", "9:0.1", "--out", "m.safetensors"]), 4);
    assert_eq!(code(dir, &["--help"]), 0);
}

#[test]
fn every_output_has_a_manifest_with_input_hashes() {
    let (tmp, _) = planted();
    let dir = tmp.path();
    ok(dir, &["score", "--checkpoint", "m.safetensors", "--out", "s.csv"]);
    let synth = json(dir, "m.safetensors.manifest.json");
    assert_eq!(synth["command"], "synth");
    assert_eq!(synth["params"]["suppress"], "5:1e-3,7:1e-3");
    let score = json(dir, "s.csv.manifest.json");
    assert_eq!(score["command"], "score");
    assert_eq!(score["params"]["naming_scheme"], "llama");
    let fingerprint = read(dir, "s.csv").lines().nth(1).unwrap().rsplit(',').next().unwrap().to_string();
    assert_eq!(score["inputs"][0]["sha256"], fingerprint.as_str());
    assert!(score["timestamp_unix"].as_u64().unwrap() > 0);
}

#[test]
fn synthetic_outputs_are_byte_identical_for_identical_flags() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    for out in ["a.safetensors", "b.safetensors"] {
        ok(dir, &["synth", "--shape", "3:32:16", "--dtype", "bf16", "--seed", "9", "--out", out]);
    }
    assert_eq!(std::fs::read(dir.join("a.safetensors")).unwrap(), std::fs::read(dir.join("b.safetensors")).unwrap());
    // grouped keys: 16 key rows serve 4 query heads of width 8
    assert_eq!(code(dir, &["score", "--checkpoint", "a.safetensors", "--out", "s.csv"]), 4);
    ok(dir, &["score", "--checkpoint", "a.safetensors", "--heads", "4", "--out", "s.csv"]);
}

#[test]
fn bench_scores_repeat_across_runs() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    ok(
        dir,
        &["bench", "--shape", "4:128", "--repeats", "2", "--scaling", "2,4", "--scaling-dim", "64", "--out", "b.json"],
    );
    ok(dir, &["bench", "--shape", "4:128", "--repeats", "1", "--out", "c.json"]);
    let (b, c) = (json(dir, "b.json"), json(dir, "c.json"));
    assert_eq!(b["scores"], c["scores"]);
    assert_eq!(b["runs"].as_array().unwrap().len(), 2);
    assert_eq!(b["decoded_pair_bytes"], 2 * 128 * 128 * 4);
    assert_eq!(b["scaling"]["points"].as_array().unwrap().len(), 2);
}
