//! Batch-1 inference latency and a parameter/latency table.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::Mode;
use crate::error::{param_err, Result};
use crate::models::{ArchKind, Hyper, Model};
use crate::rng::{self, Domain};
use crate::tensor::Tensor;
use crate::training::Clock;

pub const DEFAULT_WARMUP: usize = 100;
pub const DEFAULT_ITERS: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LatencyReport {
    pub arch: ArchKind,
    pub params: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p99_ms: f64,
    pub fps: f64,
    pub warmup: usize,
    pub iters: usize,
}

/// Standard-normal input of shape `[1, t_in, joints, coords]`.
pub fn bench_input(hyper: &Hyper, seed: u64) -> Tensor<f32> {
    let shape = hyper.input_shape(1);
    let mut rng = rng::stream(seed, Domain::BenchInput, 0);
    let data = (0..shape.iter().product())
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Nearest-rank percentile of ascending `sorted`.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = libm::ceil(p / 100.0 * sorted.len() as f64) as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Summarize per-iteration durations in milliseconds.
pub fn summarize(
    arch: ArchKind,
    params: usize,
    warmup: usize,
    mut durations_ms: Vec<f64>,
) -> Result<LatencyReport> {
    if durations_ms.is_empty() {
        return Err(param_err!("latency needs at least one timed iteration"));
    }
    let iters = durations_ms.len();
    let mean_ms = durations_ms.iter().sum::<f64>() / iters as f64;
    durations_ms.sort_by(f64::total_cmp);
    Ok(LatencyReport {
        arch,
        params,
        mean_ms,
        p50_ms: percentile(&durations_ms, 50.0),
        p99_ms: percentile(&durations_ms, 99.0),
        fps: 1000.0 / mean_ms,
        warmup,
        iters,
    })
}

/// Time `iters` batch-1 forwards after `warmup` untimed ones. The clock is
/// read once before the timed loop and once after every iteration.
pub fn measure_latency(
    model: &mut Model<f32>,
    warmup: usize,
    iters: usize,
    seed: u64,
    clock: &dyn Clock,
) -> Result<LatencyReport> {
    if iters < 1 {
        return Err(param_err!("iters must be at least 1"));
    }
    let previous = model.mode();
    model.set_mode(Mode::Eval);
    let x = bench_input(model.hyper(), seed);
    let result = (|| {
        for _ in 0..warmup {
            model.forward(&x)?;
        }
        let mut durations = Vec::with_capacity(iters);
        let mut last = clock.now();
        for _ in 0..iters {
            model.forward(&x)?;
            let now = clock.now();
            durations.push((now - last) * 1000.0);
            last = now;
        }
        summarize(model.kind(), model.count_params(), warmup, durations)
    })();
    model.set_mode(previous);
    result
}

/// Plain-text table, one row per report in architecture order.
pub fn report_table(reports: &[LatencyReport]) -> String {
    let mut rows: Vec<&LatencyReport> = reports.iter().collect();
    rows.sort_by_key(|r| r.arch);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<12} {:>10} {:>10} {:>10}",
        "Model", "Params", "mean ms", "FPS"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<12} {:>10} {:>10.3} {:>10.1}",
            r.arch.label(),
            r.params,
            r.mean_ms,
            r.fps
        );
    }
    out
}
