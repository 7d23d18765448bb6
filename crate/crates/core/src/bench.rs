//! Latency benchmark harness: warmup-then-measure runs, thread sweeps with
//! a determinism gate, and CSV/JSON reports.

use std::io::{Read, Write};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::compress::random_inputs;
use crate::error::{Error, Result};
use crate::format::encoded_size;
use crate::graph::{activation_peak_bytes, count_madds, count_params};
use crate::model::Model;
use crate::runtime::Executor;
use crate::tensor::Tensor;

pub const DEFAULT_WARMUP: usize = 10;
pub const DEFAULT_RUNS: usize = 50;
pub const CSV_HEADER: &str = "threads,runs,mean_ms,std_ms,min_ms,p50_ms,p90_ms,p99_ms,max_ms";

#[derive(Debug, Clone, PartialEq)]
pub enum InputSource {
    /// Uniform values in [-1, 1] drawn from the config seed.
    Random,
    /// A fixed, already preprocessed input.
    Tensor(Tensor),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub warmup_runs: usize,
    pub measured_runs: usize,
    pub thread_counts: Vec<usize>,
    pub input: InputSource,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            warmup_runs: DEFAULT_WARMUP,
            measured_runs: DEFAULT_RUNS,
            thread_counts: (1..=host_cores()).collect(),
            input: InputSource::Random,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.measured_runs == 0 {
            return Err(Error::invalid("measured runs must be at least 1"));
        }
        if self.thread_counts.is_empty() {
            return Err(Error::invalid("thread counts must not be empty"));
        }
        if self.thread_counts[0] == 0 || self.thread_counts.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("thread counts must be positive and strictly increasing"));
        }
        Ok(())
    }

    pub fn input_tensor(&self, m: &Model) -> Result<Tensor> {
        match &self.input {
            InputSource::Random => {
                Ok(random_inputs(m.graph.input_shape.dims(), 1, self.seed).pop().expect("one input"))
            }
            InputSource::Tensor(t) => Ok(t.clone()),
        }
    }
}

pub fn host_cores() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub threads: usize,
    pub runs: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub min_ms: f64,
    pub p50_ms: f64,
    pub p90_ms: f64,
    pub p99_ms: f64,
    pub max_ms: f64,
}

impl LatencyStats {
    /// Statistics over per-run latencies in milliseconds. `std_ms` is the
    /// population standard deviation.
    pub fn from_samples(threads: usize, samples: &[f64]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("no latency samples"));
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len() as f64;
        let mean = sorted.iter().sum::<f64>() / n;
        let var = sorted.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Ok(LatencyStats {
            threads,
            runs: sorted.len(),
            mean_ms: mean,
            std_ms: var.sqrt(),
            min_ms: sorted[0],
            p50_ms: nearest_rank(&sorted, 0.50),
            p90_ms: nearest_rank(&sorted, 0.90),
            p99_ms: nearest_rank(&sorted, 0.99),
            max_ms: sorted[sorted.len() - 1],
        })
    }
}

/// The `ceil(p * n)`-th smallest value (1-based) of an ascending sample.
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let rank = (p * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Calls `f` `warmup` times untimed, then `runs` times timed; returns the
/// timed durations in milliseconds.
pub fn time_runs<F: FnMut() -> Result<()>>(warmup: usize, runs: usize, mut f: F) -> Result<Vec<f64>> {
    for _ in 0..warmup {
        f()?;
    }
    let mut samples = Vec::with_capacity(runs);
    for _ in 0..runs {
        let start = Instant::now();
        f()?;
        samples.push(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok(samples)
}

pub fn run_bench(m: &Model, cfg: &BenchConfig, threads: usize) -> Result<LatencyStats> {
    cfg.validate()?;
    let x = cfg.input_tensor(m)?;
    let mut ex = Executor::new(m, threads)?;
    bench_executor(&mut ex, &x, cfg).map(|(stats, _)| stats)
}

/// Benchmarks one executor and returns the stats plus the output of the
/// final run.
fn bench_executor(ex: &mut Executor, x: &Tensor, cfg: &BenchConfig) -> Result<(LatencyStats, Vec<f32>)> {
    let samples = time_runs(cfg.warmup_runs, cfg.measured_runs, || ex.run(x))?;
    let out = ex.infer(x)?.as_f32().expect("f32 output").to_vec();
    Ok((LatencyStats::from_samples(ex.thread_count(), &samples)?, out))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub name: String,
    pub params: usize,
    pub madds: u64,
    pub encoded_bytes: u64,
    pub quantized: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub encoded_model_bytes: u64,
    pub activation_peak_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub model: ModelInfo,
    pub warmup_runs: usize,
    pub measured_runs: usize,
    pub host_cores: usize,
    pub stats: Vec<LatencyStats>,
    /// Thread count with the lowest p50 (lowest count on ties).
    pub argmin_threads: usize,
    pub memory: MemoryReport,
    pub note: String,
}

/// Benchmarks every configured thread count in order. Outputs must be
/// bitwise identical across thread counts.
pub fn thread_sweep(m: &Model, cfg: &BenchConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let x = cfg.input_tensor(m)?;
    let mut stats = Vec::with_capacity(cfg.thread_counts.len());
    let mut reference: Option<(usize, Vec<u32>)> = None;
    for &threads in &cfg.thread_counts {
        let mut ex = Executor::new(m, threads)?;
        let (s, out) = bench_executor(&mut ex, &x, cfg)?;
        let bits: Vec<u32> = out.iter().map(|v| v.to_bits()).collect();
        match &reference {
            None => reference = Some((threads, bits)),
            Some((t0, r)) if *r != bits => {
                return Err(Error::Determinism(format!(
                    "output with {threads} threads differs from output with {t0} threads"
                )))
            }
            Some(_) => {}
        }
        stats.push(s);
    }
    let argmin_threads = argmin_p50(&stats);
    let encoded = encoded_size(m)?.total;
    Ok(BenchReport {
        model: ModelInfo {
            name: m.name.clone(),
            params: count_params(&m.graph),
            madds: count_madds(&m.graph)?,
            encoded_bytes: encoded,
            quantized: m.graph.is_quantized(),
        },
        warmup_runs: cfg.warmup_runs,
        measured_runs: cfg.measured_runs,
        host_cores: host_cores(),
        argmin_threads,
        stats,
        memory: MemoryReport { encoded_model_bytes: encoded, activation_peak_bytes: activation_peak_bytes(&m.graph)? },
        note: "latencies are wall-clock per single inference on this host; reference-device figures are context only"
            .into(),
    })
}

pub fn argmin_p50(stats: &[LatencyStats]) -> usize {
    let mut best = &stats[0];
    for s in &stats[1..] {
        if s.p50_ms < best.p50_ms {
            best = s;
        }
    }
    best.threads
}

pub fn emit_bench_csv<W: Write>(stats: &[LatencyStats], mut sink: W) -> Result<usize> {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for s in stats {
        out.push_str(&format!(
            "{},{},{:.3},{:.3},{:.3},{:.3},{:.3},{:.3},{:.3}\n",
            s.threads, s.runs, s.mean_ms, s.std_ms, s.min_ms, s.p50_ms, s.p90_ms, s.p99_ms, s.max_ms
        ));
    }
    sink.write_all(out.as_bytes())?;
    Ok(out.len())
}

/// Parses CSV written by [`emit_bench_csv`].
pub fn parse_bench_csv<R: Read>(source: R) -> Result<Vec<LatencyStats>> {
    let mut rdr = csv::Reader::from_reader(source);
    let header = rdr.headers().map_err(|e| Error::format(format!("bench CSV: {e}")))?;
    if header.iter().collect::<Vec<_>>().join(",") != CSV_HEADER {
        return Err(Error::format(format!("bench CSV header must be '{CSV_HEADER}'")));
    }
    let mut rows = Vec::new();
    for rec in rdr.deserialize() {
        let s: LatencyStats = rec.map_err(|e| Error::format(format!("bench CSV: {e}")))?;
        rows.push(s);
    }
    Ok(rows)
}
