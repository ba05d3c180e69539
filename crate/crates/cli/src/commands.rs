use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use gatenorm_core::checkpoint::{
    enumerate_layers, read_index, synth_attention_checkpoint, AttentionShape, Dtype, FileSource, NamingScheme, Role,
};
use gatenorm_core::eval::{
    self, evaluate, merge_reports, profile_sublayers, Planner, ReportInput, SweepSpec, TimingProfile, TokenStream,
};
use gatenorm_core::importance::{run_suite, BoundCheckResult, ImportanceReport, SuiteConfig};
use gatenorm_core::memory;
use gatenorm_core::scoring::{
    plan_one_shot, plan_random, score_checkpoint, score_model, GateScore, PlanMethod, ScoreMode, ScoreOptions,
    ScoreTable,
};
use gatenorm_core::sim::{CaptureFlags, Model, ModelConfig, PlanApplication, Suppression};
use gatenorm_core::{Error, Stabilizer};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::manifest::RunManifest;
use crate::{
    BenchArgs, CliError, ModeArgs, ModelArgs, PlanArgs, ReportArgs, ScoreArgs, SimulateArgs, StreamArgs, SweepArgs,
    SynthArgs, TokensArgs, ValidateArgs,
};

type CliResult<T = ()> = Result<T, CliError>;

const SIMULATE_SCHEMA: &str = "simulate/1";
const VALIDATE_SCHEMA: &str = "validate/1";
const BENCH_SCHEMA: &str = "bench/1";

const CALIBRATION_CAPTURE: CaptureFlags =
    CaptureFlags { inputs: true, attn_out: true, post_attn: true, mlp_out: false, logits: false };

fn params<T: Serialize>(args: &T) -> serde_json::Value {
    serde_json::to_value(args).expect("arguments serialize")
}

fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    serde_json::from_str(&read_text(path)?).map_err(|e| Error::Format(format!("{}: {e}", path.display())).into())
}

fn write_text(path: &Path, text: &str) -> CliResult {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn to_document<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("document serializes");
    s.push('\n');
    s
}

fn open_source(path: &Path) -> CliResult<FileSource> {
    FileSource::open(path).map_err(|e| CliError::io(path, e))
}

fn parse_flag<T: FromStr>(flag: &str, value: &str) -> CliResult<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| CliError::usage(format!("--{flag} {value:?}: {e}")))
}

fn parse_list<T: FromStr>(flag: &str, value: &str) -> CliResult<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    value.split(',').map(|s| parse_flag(flag, s.trim())).collect()
}

fn parse_dtype(value: &str) -> CliResult<Dtype> {
    Dtype::parse(&value.to_ascii_uppercase())
        .ok_or_else(|| CliError::usage(format!("--dtype {value:?}: expected f32, f16 or bf16")))
}

/// `L:D` or `L:D:KV`.
fn parse_shape(value: &str) -> CliResult<AttentionShape> {
    let parts: Vec<usize> = value
        .split(':')
        .map(|s| s.parse())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::usage(format!("--shape {value:?}: expected L:D[:KV]")))?;
    match parts[..] {
        [layers, dim] => Ok(AttentionShape::square(layers, dim)),
        [layers, dim, kv_dim] => Ok(AttentionShape { layers, dim, kv_dim }),
        _ => Err(CliError::usage(format!("--shape {value:?}: expected L:D[:KV]"))),
    }
}

fn resolve_mode(args: &ModeArgs, model_heads: Option<usize>) -> CliResult<ScoreOptions> {
    let mode = if args.mode == "per-head" {
        let heads = args.heads.or(model_heads).ok_or_else(|| CliError::usage("--mode per-head needs --heads"))?;
        ScoreMode::PerHead { heads }
    } else {
        parse_flag("mode", &args.mode)?
    };
    Ok(ScoreOptions { mode, heads: args.heads })
}

fn load_model(args: &ModelArgs, seed: u64, manifest: &mut RunManifest) -> CliResult<Model<f32>> {
    let config: Option<ModelConfig> = match &args.config {
        Some(path) => {
            manifest.input(path)?;
            Some(read_json(path)?)
        }
        None => None,
    };
    let Some(path) = &args.checkpoint else {
        let suppression: Suppression = parse_flag("suppress", &args.suppress)?;
        return Ok(Model::init_random(&config.unwrap_or_default(), seed, &suppression)?);
    };
    if !args.suppress.is_empty() {
        return Err(CliError::usage("--suppress only applies to random models, not --checkpoint"));
    }
    manifest.input(path)?;
    let source = open_source(path)?;
    let index = read_index(&source)?;
    let scheme: NamingScheme = parse_flag("naming-scheme", &args.naming_scheme)?;
    let map = enumerate_layers(&index, &scheme)?;
    let config = match config {
        Some(c) => c,
        None => Model::<f32>::config_from_metadata(&index)
            .ok_or_else(|| Error::Format("checkpoint carries no model config; pass --config".into()))??,
    };
    Ok(Model::load_from_checkpoint(&index, &map, &config, &source)?)
}

fn load_stream(args: &StreamArgs, vocab: usize, seed: u64, manifest: &mut RunManifest) -> CliResult<TokenStream> {
    let stream = match &args.stream {
        Some(path) => {
            manifest.input(path)?;
            let mut file = File::open(path).map_err(|e| CliError::io(path, e))?;
            TokenStream::read_from(&mut file, args.window)?
        }
        None => TokenStream::synthetic(vocab, args.tokens, args.window, seed)?,
    };
    if stream.vocab() > vocab {
        return Err(
            Error::Contract(format!("stream vocabulary {} exceeds model vocabulary {vocab}", stream.vocab())).into()
        );
    }
    Ok(stream)
}

/// Gate-norm scores of a checkpoint file and its fingerprint.
fn checkpoint_scores(
    path: &Path,
    scheme: &str,
    opts: &ScoreOptions,
    manifest: &mut RunManifest,
) -> CliResult<(Vec<GateScore>, String)> {
    let fingerprint = manifest.input(path)?;
    let source = open_source(path)?;
    let index = read_index(&source)?;
    let map = enumerate_layers(&index, &parse_flag::<NamingScheme>("naming-scheme", scheme)?)?;
    Ok((score_checkpoint::<f32>(&index, &map, &source, opts)?, fingerprint))
}

fn finish(manifest: &mut RunManifest, outputs: &[&Path]) -> CliResult {
    for out in outputs {
        manifest.output(out);
    }
    manifest.write_beside(outputs[0])?;
    Ok(())
}

pub fn synth(args: &SynthArgs) -> CliResult {
    let mut manifest = RunManifest::new("synth", params(args));
    let dtype = parse_dtype(&args.dtype)?;
    let suppression: Suppression = parse_flag("suppress", &args.suppress)?;
    let file = File::create(&args.out).map_err(|e| CliError::io(&args.out, e))?;
    let mut out = BufWriter::new(file);
    match &args.shape {
        Some(shape) => {
            if args.config.is_some() {
                return Err(CliError::usage("--shape and --config are exclusive"));
            }
            synth_attention_checkpoint(&mut out, parse_shape(shape)?, dtype, args.seed, &suppression)?;
        }
        None => {
            let config: ModelConfig = match &args.config {
                Some(path) => {
                    manifest.input(path)?;
                    read_json(path)?
                }
                None => ModelConfig::default(),
            };
            Model::<f32>::init_random(&config, args.seed, &suppression)?.write_checkpoint(&mut out, dtype)?;
        }
    }
    out.flush().map_err(|e| CliError::io(&args.out, e))?;
    finish(&mut manifest, &[&args.out])
}

pub fn tokens(args: &TokensArgs) -> CliResult {
    let mut manifest = RunManifest::new("tokens", params(args));
    let stream = TokenStream::synthetic(args.vocab, args.count, args.count.max(1), args.seed)?;
    std::fs::write(&args.out, stream.to_bytes()).map_err(|e| CliError::io(&args.out, e))?;
    finish(&mut manifest, &[&args.out])
}

pub fn score(args: &ScoreArgs) -> CliResult {
    let mut manifest = RunManifest::new("score", params(args));
    let opts = resolve_mode(&args.mode, None)?;
    let (scores, source_fingerprint) = checkpoint_scores(&args.checkpoint, &args.naming_scheme, &opts, &mut manifest)?;
    write_text(&args.out, &ScoreTable { scores, source_fingerprint }.to_csv())?;
    finish(&mut manifest, &[&args.out])
}

fn has_model_source(m: &ModelArgs) -> bool {
    m.checkpoint.is_some() || m.config.is_some() || !m.suppress.is_empty()
}

pub fn plan(args: &PlanArgs) -> CliResult {
    let mut manifest = RunManifest::new("plan", params(args));
    let method: PlanMethod = parse_flag("method", &args.method)?;
    let data_driven = matches!(method, PlanMethod::DataDrivenAttn | PlanMethod::DataDrivenBlock);
    let plan = if let Some(path) = &args.scores {
        if has_model_source(&args.model) {
            return Err(CliError::usage("--scores cannot be combined with a model source"));
        }
        if data_driven {
            return Err(CliError::usage(format!("{method} plans need a model, not a score table")));
        }
        manifest.input(path)?;
        let table = ScoreTable::from_csv(&read_text(path)?)?;
        let plan = match method {
            PlanMethod::GateNorm => plan_one_shot(&table.scores, args.n)?,
            _ => plan_random(table.scores.len(), args.n, method.unit(), args.seed)?,
        };
        plan.with_fingerprint(table.source_fingerprint)
    } else if let (Some(path), false) = (&args.model.checkpoint, data_driven) {
        // scoring straight from the file needs no model config
        let opts = resolve_mode(&args.mode, None)?;
        let (scores, fingerprint) = checkpoint_scores(path, &args.model.naming_scheme, &opts, &mut manifest)?;
        let plan = match method {
            PlanMethod::GateNorm => plan_one_shot(&scores, args.n)?,
            _ => plan_random(scores.len(), args.n, method.unit(), args.seed)?,
        };
        plan.with_fingerprint(fingerprint)
    } else {
        let model = load_model(&args.model, args.seed, &mut manifest)?;
        let opts = resolve_mode(&args.mode, Some(model.config.heads))?;
        let stream = load_stream(&args.stream, model.config.vocab, args.seed, &mut manifest)?;
        Planner::new(&model, &stream, opts.mode, args.seed).plan(method, args.n)?
    };
    write_text(&args.out, &plan.to_document())?;
    finish(&mut manifest, &[&args.out])
}

#[derive(Serialize)]
struct SimulateReport<'a> {
    schema: &'static str,
    kind: &'static str,
    layers: usize,
    method: Option<PlanMethod>,
    removed: Vec<usize>,
    baseline_perplexity: f64,
    perplexity: f64,
    /// `1 − MACs(pruned) / MACs(unpruned)`.
    flop_reduction: f64,
    predictions: usize,
    /// Measured on the unpruned model.
    importance: &'a ImportanceReport,
}

pub fn simulate(args: &SimulateArgs) -> CliResult {
    let mut manifest = RunManifest::new("simulate", params(args));
    let model = load_model(&args.model, args.seed, &mut manifest)?;
    let layers = model.config.layers;
    let opts = resolve_mode(&args.mode, Some(model.config.heads))?;
    let stream = load_stream(&args.stream, model.config.vocab, args.seed, &mut manifest)?;
    let plan = match &args.plan {
        Some(path) => {
            manifest.input(path)?;
            Some(gatenorm_core::scoring::PruningPlan::from_document(&read_text(path)?)?)
        }
        None => None,
    };
    let application = match &plan {
        Some(p) => PlanApplication::from_plan(p, layers)?,
        None => PlanApplication::none(layers),
    };

    let baseline = evaluate(&model, &PlanApplication::none(layers), &stream)?;
    let pruned = if plan.is_some() { evaluate(&model, &application, &stream)? } else { baseline };
    let traces = stream
        .windows()
        .map(|w| model.forward(w, &PlanApplication::none(layers), CALIBRATION_CAPTURE))
        .collect::<Result<Vec<_>, _>>()?;
    let gate: Vec<f64> = score_model(&model, opts.mode)?.iter().map(|s| s.m).collect();
    let importance = ImportanceReport::from_traces(&traces, None, args.centered, Some(&gate))?;

    let report = SimulateReport {
        schema: SIMULATE_SCHEMA,
        kind: "simulate",
        layers,
        method: plan.as_ref().map(|p| p.method),
        removed: plan.as_ref().map(|p| p.removed.clone()).unwrap_or_default(),
        baseline_perplexity: baseline.perplexity,
        perplexity: pruned.perplexity,
        flop_reduction: 1.0 - pruned.macs as f64 / baseline.macs as f64,
        predictions: pruned.predictions,
        importance: &importance,
    };
    write_text(&args.out, &to_document(&report))?;
    let mut outputs = vec![args.out.as_path()];
    if let Some(csv) = &args.importance_csv {
        write_text(csv, &importance.to_csv())?;
        outputs.push(csv);
    }
    finish(&mut manifest, &outputs)
}

pub fn sweep(args: &SweepArgs) -> CliResult {
    let mut manifest = RunManifest::new("sweep", params(args));
    let model = load_model(&args.model, args.seed, &mut manifest)?;
    let opts = resolve_mode(&args.mode, Some(model.config.heads))?;
    let stream = load_stream(&args.stream, model.config.vocab, args.seed, &mut manifest)?;
    let methods = match &args.methods {
        Some(list) => parse_list("methods", list)?,
        None => PlanMethod::ALL.to_vec(),
    };
    let counts = match &args.counts {
        Some(list) => parse_list("counts", list)?,
        None => (0..=model.config.layers).collect(),
    };
    let spec = SweepSpec { methods, counts, mode: opts.mode, seed: args.seed };
    let table = eval::sweep(&model, &spec, &stream)?;
    write_text(&args.out, &table.to_document())?;
    let mut outputs = vec![args.out.as_path()];
    if let Some(csv) = &args.csv {
        write_text(csv, &table.to_csv())?;
        outputs.push(csv);
    }
    finish(&mut manifest, &outputs)
}

#[derive(Serialize)]
struct ValidateReport<'a> {
    schema: &'static str,
    fault: Option<&'a str>,
    config: &'a SuiteConfig,
    passed: bool,
    results: Vec<BoundCheckResult>,
}

pub fn validate(args: &ValidateArgs) -> CliResult {
    let mut manifest = RunManifest::new("validate", params(args));
    let mut config: SuiteConfig = match &args.config {
        Some(path) => {
            manifest.input(path)?;
            read_json(path)?
        }
        None => SuiteConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(trials) = args.trials {
        config.logit_trials = trials;
        config.cosine_pairs = trials;
    }
    if let Some(rows) = args.rows {
        config.softmax_rows = rows;
        config.update_rows = rows;
    }
    if let Some(models) = args.sweep_models {
        config.sweep_models = models;
    }
    match args.fault.as_deref() {
        None => {}
        Some("negated-stabilizer") => config.stabilizer = Stabilizer::NegatedMax,
        Some(other) => return Err(CliError::usage(format!("--fault {other:?}: expected negated-stabilizer"))),
    }
    let results = run_suite(&config)?;
    let passed = results.iter().all(|r| r.passed);
    let report =
        ValidateReport { schema: VALIDATE_SCHEMA, fault: args.fault.as_deref(), config: &config, passed, results };
    write_text(&args.out, &to_document(&report))?;
    finish(&mut manifest, &[&args.out])?;
    for r in &report.results {
        eprintln!("{:<24} {}", r.name, if r.passed { "pass" } else { "FAIL" });
    }
    if args.require_pass && !passed {
        let failed: Vec<&str> = report.results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
        return Err(CliError::Failed(format!("checks failed: {}", failed.join(", "))));
    }
    Ok(())
}

#[derive(Serialize)]
struct BenchRun {
    seconds: f64,
    peak_bytes: usize,
}

#[derive(Serialize)]
struct ScalingPoint {
    layers: usize,
    seconds: f64,
}

#[derive(Serialize)]
struct Scaling {
    dim: usize,
    points: Vec<ScalingPoint>,
    seconds_per_layer: f64,
    r_squared: f64,
}

#[derive(Serialize)]
struct BenchReport {
    schema: &'static str,
    source: String,
    layers: usize,
    /// Bytes of one layer's query and key tensors decoded to `f32`.
    decoded_pair_bytes: u64,
    scores: Vec<f64>,
    runs: Vec<BenchRun>,
    /// Largest peak over one decoded pair.
    peak_ratio: f64,
    scaling: Option<Scaling>,
    profile: Option<TimingProfile>,
}

/// Removes the file when dropped.
struct TempFile(PathBuf);

impl TempFile {
    fn synth(tag: &str, shape: AttentionShape, dtype: Dtype, seed: u64) -> CliResult<Self> {
        let path = std::env::temp_dir().join(format!("gatenorm-bench-{}-{tag}.safetensors", std::process::id()));
        let temp = TempFile(path);
        let file = File::create(&temp.0).map_err(|e| CliError::io(&temp.0, e))?;
        let mut out = BufWriter::new(file);
        synth_attention_checkpoint(&mut out, shape, dtype, seed, &Suppression::none())?;
        out.flush().map_err(|e| CliError::io(&temp.0, e))?;
        Ok(temp)
    }
}

impl Drop for TempFile {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

/// One timed scoring pass with its allocation peak.
fn timed_score(path: &Path, scheme: &NamingScheme) -> CliResult<(Vec<GateScore>, BenchRun)> {
    memory::reset_peak();
    let start = Instant::now();
    let source = open_source(path)?;
    let index = read_index(&source)?;
    let map = enumerate_layers(&index, scheme)?;
    let scores = score_checkpoint::<f32>(&index, &map, &source, &ScoreOptions::whole())?;
    let seconds = start.elapsed().as_secs_f64();
    Ok((scores, BenchRun { seconds, peak_bytes: memory::peak_since_reset() }))
}

fn decoded_pair_bytes(path: &Path, scheme: &NamingScheme) -> CliResult<u64> {
    let source = open_source(path)?;
    let index = read_index(&source)?;
    let map = enumerate_layers(&index, scheme)?;
    let first = &map.layers[0];
    let q = index.get(first.require(Role::Query)?)?.element_count();
    let k = index.get(first.require(Role::Key)?)?.element_count();
    Ok(((q + k) * std::mem::size_of::<f32>()) as u64)
}

/// Least-squares slope and R² of `y` on `x`.
fn linear_fit(points: &[(f64, f64)]) -> (f64, f64) {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    (sxy / sxx, sxy * sxy / (sxx * syy))
}

pub fn bench(args: &BenchArgs) -> CliResult {
    let mut manifest = RunManifest::new("bench", params(args));
    if args.repeats == 0 {
        return Err(CliError::usage("--repeats must be positive"));
    }
    let scheme: NamingScheme = parse_flag("naming-scheme", &args.naming_scheme)?;
    let dtype = parse_dtype(&args.dtype)?;
    let (_temp, path, source) = match &args.checkpoint {
        Some(path) => {
            manifest.input(path)?;
            (None, path.clone(), path.display().to_string())
        }
        None => {
            let shape = parse_shape(&args.shape)?;
            let temp = TempFile::synth("main", shape, dtype, args.seed)?;
            let path = temp.0.clone();
            let label = format!("synthetic {}:{}:{} {}", shape.layers, shape.dim, shape.kv_dim, dtype.as_str());
            (Some(temp), path, label)
        }
    };

    let mut runs = Vec::with_capacity(args.repeats);
    let mut scores = Vec::new();
    for _ in 0..args.repeats {
        let (s, run) = timed_score(&path, &scheme)?;
        scores = s.iter().map(|g| g.m).collect();
        runs.push(run);
    }
    let pair = decoded_pair_bytes(&path, &scheme)?;
    let peak = runs.iter().map(|r| r.peak_bytes).max().unwrap_or(0);

    let scaling = match &args.scaling {
        Some(list) => {
            let mut points = Vec::new();
            for layers in parse_list::<usize>("scaling", list)? {
                let temp = TempFile::synth(
                    &format!("l{layers}"),
                    AttentionShape::square(layers, args.scaling_dim),
                    dtype,
                    args.seed,
                )?;
                let mut best = f64::INFINITY;
                for _ in 0..args.repeats {
                    best = best.min(timed_score(&temp.0, &NamingScheme::llama())?.1.seconds);
                }
                points.push(ScalingPoint { layers, seconds: best });
            }
            if points.len() < 2 {
                return Err(CliError::usage("--scaling needs at least two layer counts"));
            }
            let (slope, r2) = linear_fit(&points.iter().map(|p| (p.layers as f64, p.seconds)).collect::<Vec<_>>());
            Some(Scaling { dim: args.scaling_dim, points, seconds_per_layer: slope, r_squared: r2 })
        }
        None => None,
    };

    let profile = match &args.profile_lengths {
        Some(list) => {
            let lengths: Vec<usize> = parse_list("profile-lengths", list)?;
            let dim = args.profile_dim;
            let config = ModelConfig {
                layers: 1,
                dim,
                heads: 8,
                mlp_dim: 4 * dim,
                vocab: 64,
                max_seq: lengths.iter().copied().max().unwrap_or(1),
                ..ModelConfig::default()
            };
            let model = Model::<f32>::init_random(&config, args.seed, &Suppression::none())?;
            Some(profile_sublayers(&model, &lengths, args.profile_runs, args.seed)?)
        }
        None => None,
    };

    let report = BenchReport {
        schema: BENCH_SCHEMA,
        source,
        layers: scores.len(),
        decoded_pair_bytes: pair,
        scores,
        runs,
        peak_ratio: peak as f64 / pair as f64,
        scaling,
        profile,
    };
    write_text(&args.out, &to_document(&report))?;
    finish(&mut manifest, &[&args.out])
}

pub fn report(args: &ReportArgs) -> CliResult {
    let mut manifest = RunManifest::new("report", params(args));
    let mut inputs = Vec::with_capacity(args.inputs.len());
    for path in &args.inputs {
        manifest.input(path)?;
        let label = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let input =
            ReportInput::parse(&read_text(path)?).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        inputs.push((label, input));
    }
    let merged = merge_reports(&inputs)?;
    let sweep_csv = args.out.with_extension("sweep.csv");
    let overlap_csv = args.out.with_extension("overlap.csv");
    let scatter_csv = args.out.with_extension("scatter.csv");
    write_text(&args.out, &merged.to_document())?;
    write_text(&sweep_csv, &merged.sweep_csv())?;
    write_text(&overlap_csv, &merged.overlap_csv())?;
    write_text(&scatter_csv, &merged.scatter_csv())?;
    finish(&mut manifest, &[&args.out, &sweep_csv, &overlap_csv, &scatter_csv])
}
