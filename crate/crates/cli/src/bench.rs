//! `bench`: forward-pass latency over a fixed random image.

use std::path::PathBuf;
use std::time::Instant;

use clap::Args;
use mobiface::graph::{Architecture, MOBIFACE, MOBIFACE_INPUT};
use mobiface::tensor::Tensor;
use mobiface::weights::init_random;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::{in_pool, load_model, model_from_store, CliError, CliResult};

pub const HARDWARE_DISCLAIMER: &str =
    "timings depend on the host CPU, its load and the build profile; compare runs only on the same machine";

#[derive(Args)]
pub struct BenchArgs {
    /// Weights file; seeded random weights if omitted
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Timed forward passes per thread count
    #[arg(long, default_value_t = 10)]
    iters: usize,
    /// Untimed passes before measuring
    #[arg(long, default_value_t = 0)]
    warmup: usize,
    /// Comma-separated worker counts, each measured separately
    #[arg(long, value_delimiter = ',', default_value = "1")]
    threads: Vec<usize>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    json: bool,
}

#[derive(Serialize)]
struct LatencyStats {
    threads: usize,
    iters: usize,
    mean_ms: f64,
    median_ms: f64,
    p95_ms: f64,
    min_ms: f64,
    max_ms: f64,
    wall_ms: f64,
}

#[derive(Serialize)]
struct BenchReport {
    arch: String,
    input: [usize; 4],
    warmup: usize,
    results: Vec<LatencyStats>,
    disclaimer: &'static str,
}

/// Nearest-rank percentile of sorted samples.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn stats(threads: usize, mut samples: Vec<f64>, wall_ms: f64) -> LatencyStats {
    samples.sort_by(f64::total_cmp);
    let n = samples.len();
    let median = if n % 2 == 1 { samples[n / 2] } else { 0.5 * (samples[n / 2 - 1] + samples[n / 2]) };
    LatencyStats {
        threads,
        iters: n,
        mean_ms: samples.iter().sum::<f64>() / n as f64,
        median_ms: median,
        p95_ms: percentile(&samples, 95.0),
        min_ms: samples[0],
        max_ms: samples[n - 1],
        wall_ms,
    }
}

pub fn run(args: &BenchArgs) -> CliResult<()> {
    if args.iters == 0 {
        return Err(CliError("--iters must be at least 1".into()));
    }
    let model = match &args.weights {
        Some(p) => load_model(p)?,
        None => {
            let arch = Architecture::by_name(MOBIFACE)?;
            model_from_store(&init_random(&arch.weight_bindings(), args.seed)?)?
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let [c, h, w] = MOBIFACE_INPUT;
    let x = Tensor::from_fn(&[1, c, h, w], |_| rng.random_range(-1.0f32..1.0))?;

    let mut results = Vec::with_capacity(args.threads.len());
    for &t in &args.threads {
        let stat = in_pool(Some(t), || {
            for _ in 0..args.warmup {
                model.forward(&x)?;
            }
            let wall = Instant::now();
            let mut samples = Vec::with_capacity(args.iters);
            for _ in 0..args.iters {
                let start = Instant::now();
                model.forward(&x)?;
                samples.push(start.elapsed().as_secs_f64() * 1e3);
            }
            Ok(stats(t, samples, wall.elapsed().as_secs_f64() * 1e3))
        })?;
        results.push(stat);
    }

    let report = BenchReport {
        arch: if model.has_flip_head() { "mobiface-flipped".into() } else { MOBIFACE.into() },
        input: [1, c, h, w],
        warmup: args.warmup,
        results,
        disclaimer: HARDWARE_DISCLAIMER,
    };
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
        return Ok(());
    }
    println!("{} forward, input {:?}, {} warmup pass(es)", report.arch, report.input, report.warmup);
    println!("{:>7} {:>6} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10}", "threads", "iters", "mean", "median", "p95", "min", "max", "wall");
    for r in &report.results {
        println!(
            "{:>7} {:>6} {:>8.2}ms {:>8.2}ms {:>8.2}ms {:>8.2}ms {:>8.2}ms {:>8.1}ms",
            r.threads, r.iters, r.mean_ms, r.median_ms, r.p95_ms, r.min_ms, r.max_ms, r.wall_ms
        );
    }
    println!("note: {HARDWARE_DISCLAIMER}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentile_and_median() {
        let s = stats(1, vec![5.0, 1.0, 3.0, 2.0, 4.0], 15.0);
        assert_eq!((s.median_ms, s.mean_ms, s.p95_ms, s.min_ms, s.max_ms), (3.0, 3.0, 5.0, 1.0, 5.0));
        let one = stats(4, vec![7.0], 7.0);
        assert_eq!((one.iters, one.median_ms, one.p95_ms), (1, 7.0, 7.0));
        let twenty: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(percentile(&twenty, 95.0), 19.0);
    }
}
