//! Single-sample inference timing.

use std::hint::black_box;
use std::time::Instant;

use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::model::{ForwardOptions, Model, RoutingMode, Sample};
use crate::rng::{stream_rng, Domain};

pub const DEFAULT_WARMUP: usize = 20;
pub const DEFAULT_RUNS: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyReport {
    pub mode: RoutingMode,
    pub n_warmup: usize,
    pub n_runs: usize,
    pub batch_size: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    /// Nearest-rank 99th percentile (the 990th of 1000 sorted timings).
    pub p99_ms: f64,
    pub iqr_ms: f64,
    /// Set when `p99 − median` exceeds three interquartile ranges.
    pub jitter_warning: bool,
    pub timings_ms: Vec<f64>,
}

/// Nearest-rank percentile of sorted data: element `⌈q·n⌉` (1-based).
pub fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

impl LatencyReport {
    pub fn from_timings(mode: RoutingMode, n_warmup: usize, timings_ms: Vec<f64>) -> Self {
        let mut sorted = timings_ms.clone();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len().max(1);
        let mean_ms = timings_ms.iter().sum::<f64>() / n as f64;
        let (median_ms, p99_ms, iqr_ms) = if sorted.is_empty() {
            (0.0, 0.0, 0.0)
        } else {
            (
                nearest_rank(&sorted, 0.5),
                nearest_rank(&sorted, 0.99),
                nearest_rank(&sorted, 0.75) - nearest_rank(&sorted, 0.25),
            )
        };
        Self {
            mode,
            n_warmup,
            n_runs: timings_ms.len(),
            batch_size: 1,
            mean_ms,
            median_ms,
            p99_ms,
            iqr_ms,
            jitter_warning: p99_ms - median_ms > 3.0 * iqr_ms,
            timings_ms,
        }
    }
}

/// Fixed pseudo-random input of the model's shape.
pub fn bench_input(model: &Model<f32>, seed: u64) -> Vec<f32> {
    let len = model.cfg.frames * 2 * model.cfg.subcarriers * model.cfg.beams;
    let mut rng = stream_rng(seed, Domain::Bench, 0);
    (0..len).map(|_| <StandardNormal as Distribution<f32>>::sample(&StandardNormal, &mut rng)).collect()
}

/// `n_warmup` discarded passes, then `n_runs` timed single-sample forwards.
pub fn bench_latency(model: &Model<f32>, mode: RoutingMode, n_warmup: usize, n_runs: usize, seed: u64) -> Result<LatencyReport> {
    let x = bench_input(model, seed);
    let sample = Sample { x: &x, scene: 1, speed_norm: 0.7 };
    let opts = ForwardOptions::eval(mode);
    for _ in 0..n_warmup {
        black_box(model.forward(black_box(&sample), &opts)?);
    }
    let mut timings = Vec::with_capacity(n_runs);
    for _ in 0..n_runs {
        let t = Instant::now();
        black_box(model.forward(black_box(&sample), &opts)?);
        timings.push(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok(LatencyReport::from_timings(mode, n_warmup, timings))
}

/// Medians of `repeats` mean latencies for Top1 and SoftDense, measured alternately.
pub fn routing_latency_medians(model: &Model<f32>, repeats: usize, n_warmup: usize, n_runs: usize, seed: u64) -> Result<(f64, f64)> {
    let mut top1 = Vec::new();
    let mut soft = Vec::new();
    for _ in 0..repeats {
        top1.push(bench_latency(model, RoutingMode::Top1, n_warmup, n_runs, seed)?.mean_ms);
        soft.push(bench_latency(model, RoutingMode::SoftDense, n_warmup, n_runs, seed)?.mean_ms);
    }
    let median = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        nearest_rank(&v, 0.5)
    };
    Ok((median(top1), median(soft)))
}
