use std::fmt::Write as _;
use std::hint::black_box;
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sim::{attention_forward, gaussian_into, mlp_forward, Model};
use crate::tensor::Matrix;

pub const WARMUP_RUNS: usize = 2;
pub const MIN_RUNS: usize = 5;
const PROFILE_STREAM: u64 = 0x70726f66;

/// Held while a profile runs so timings never overlap within a process.
static PROFILE_LOCK: Mutex<()> = Mutex::new(());

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SublayerKind {
    Attention,
    Mlp,
}

impl SublayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SublayerKind::Attention => "attention",
            SublayerKind::Mlp => "mlp",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingEntry {
    pub kind: SublayerKind,
    pub seq_len: usize,
    pub median_s: f64,
    pub min_s: f64,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TimingProfile {
    pub entries: Vec<TimingEntry>,
}

impl TimingProfile {
    pub fn get(&self, kind: SublayerKind, seq_len: usize) -> Option<&TimingEntry> {
        self.entries.iter().find(|e| e.kind == kind && e.seq_len == seq_len)
    }

    /// `median(kind, long) / median(kind, short)`.
    pub fn ratio(&self, kind: SublayerKind, long: usize, short: usize) -> Option<f64> {
        Some(self.get(kind, long)?.median_s / self.get(kind, short)?.median_s)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,seq_len,median_s,min_s,runs\n");
        for e in &self.entries {
            let _ = writeln!(out, "{},{},{},{},{}", e.kind.as_str(), e.seq_len, e.median_s, e.min_s, e.runs);
        }
        out
    }
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Runs `f` `WARMUP_RUNS` times untimed, then `runs` times timed.
fn time_runs(runs: usize, mut f: impl FnMut() -> Result<()>) -> Result<(f64, f64)> {
    for _ in 0..WARMUP_RUNS {
        f()?;
    }
    let mut times = Vec::with_capacity(runs);
    for _ in 0..runs {
        let start = Instant::now();
        f()?;
        times.push(start.elapsed().as_secs_f64().max(f64::MIN_POSITIVE));
    }
    times.sort_by(f64::total_cmp);
    Ok((median(&times), times[0]))
}

/// Times the first block's attention and MLP sublayers at each length.
///
/// Inputs are seeded Gaussian rows. Each cell is the median and minimum of
/// `runs` timed calls after two warmups, on the calling thread.
pub fn profile_sublayers<T: Scalar>(
    model: &Model<T>,
    lengths: &[usize],
    runs: usize,
    seed: u64,
) -> Result<TimingProfile> {
    if runs < MIN_RUNS {
        return Err(Error::contract(format!("profiling needs at least {MIN_RUNS} runs, got {runs}")));
    }
    let cfg = &model.config;
    if let Some(&bad) = lengths.iter().find(|&&s| s == 0 || s > cfg.max_seq) {
        return Err(Error::contract(format!("sequence length {bad} outside 1..={}", cfg.max_seq)));
    }
    let block = &model.blocks[0];
    let _guard = PROFILE_LOCK.lock().unwrap_or_else(|p| p.into_inner());
    let mut profile = TimingProfile::default();
    for &seq in lengths {
        let mut buf = Vec::new();
        gaussian_into(seed, PROFILE_STREAM ^ seq as u64, seq * cfg.dim, 1.0, 1.0, &mut buf);
        let x = Matrix::new(seq, cfg.dim, buf.into_iter().map(T::widen).collect())?;
        let (med, min) = time_runs(runs, || {
            black_box(attention_forward(black_box(&x), block, cfg)?);
            Ok(())
        })?;
        profile.entries.push(TimingEntry {
            kind: SublayerKind::Attention,
            seq_len: seq,
            median_s: med,
            min_s: min,
            runs,
        });
        let (med, min) = time_runs(runs, || {
            black_box(mlp_forward(black_box(&x), block, cfg)?);
            Ok(())
        })?;
        profile.entries.push(TimingEntry { kind: SublayerKind::Mlp, seq_len: seq, median_s: med, min_s: min, runs });
    }
    Ok(profile)
}
