//! Timing comparison of the convolution backends.
//!
//! Runs both convolution routes over matched random inputs at a ladder of
//! sizes, verifies they agree before trusting any timing, and fits
//! log-log slopes to the median times. Each timed call sweeps the full
//! `walks * dim` channel block of one interaction, so the measured cost is
//! what the model actually pays per call: the direct route scales
//! quadratically in the input length while the transform route scales
//! near-linearly, and the fitted slopes separate cleanly once sizes span a
//! few octaves.

use std::fmt;
use std::hint::black_box;
use std::time::Instant;

use nirec_tensor::{conv1d_fft_with_plan, conv1d_naive, conv_output_len, FftPlan};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sampler::mix_seed_indexed;

/// Fewer repetitions than this leave the median too noisy to fit.
pub const MIN_REPS: usize = 5;

/// Errors from the benchmark harness.
#[derive(Debug, Error)]
pub enum BenchError {
    #[error("benchmark needs at least one size")]
    EmptySizes,
    #[error("benchmark sizes must be strictly increasing")]
    SizesNotIncreasing,
    #[error("benchmark needs at least {MIN_REPS} repetitions, got {got}")]
    FewReps { got: usize },
    #[error("benchmark needs at least one channel (walks * dim)")]
    NoChannels,
    #[error("backends disagree at size {size}: max abs diff {diff:e}")]
    BackendMismatch { size: usize, diff: f64 },
}

/// What to measure.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchConfig {
    /// Input lengths; both operands of each convolution use the same length.
    pub sizes: Vec<usize>,
    /// Walks per neighborhood; one axis of the per-call channel block.
    pub walks: usize,
    /// Embedding width; the other axis of the per-call channel block.
    pub dim: usize,
    /// Timed repetitions per size (distinct random inputs).
    pub reps: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            sizes: vec![64, 128, 256, 512, 1024, 2048, 4096],
            walks: 4,
            dim: 8,
            reps: 7,
            seed: 7,
        }
    }
}

/// Location and spread of one route's per-call times, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    pub median: f64,
    /// Population standard deviation.
    pub stddev: f64,
}

fn stats(samples: &[f64]) -> Stats {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let mid = sorted.len() / 2;
    let median = if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    };
    Stats {
        mean,
        median,
        stddev: var.sqrt(),
    }
}

/// One size's measurements.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SizeRow {
    pub size: usize,
    pub naive: Stats,
    pub fft: Stats,
    /// Ratio of median times, direct over transform.
    pub speedup: f64,
    /// Largest absolute output disagreement seen at this size.
    pub max_abs_diff: f64,
}

/// Full benchmark outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    /// Channels per timed call (`walks * dim`).
    pub channels: usize,
    pub rows: Vec<SizeRow>,
    /// Log-log slope of median time against size, direct route.
    pub naive_slope: f64,
    /// Log-log slope of median time against size, transform route.
    pub fft_slope: f64,
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} channels per call", self.channels)?;
        writeln!(
            f,
            "{:>6}  {:>12}  {:>12}  {:>8}  {:>10}",
            "size", "naive (s)", "fft (s)", "speedup", "max |diff|"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:>6}  {:>12.3e}  {:>12.3e}  {:>7.1}x  {:>10.1e}",
                r.size, r.naive.median, r.fft.median, r.speedup, r.max_abs_diff
            )?;
        }
        write!(
            f,
            "log-log slopes: naive {:.2}, fft {:.2}",
            self.naive_slope, self.fft_slope
        )
    }
}

/// Least-squares slope of `y` against `x`.
fn slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let cov = points
        .iter()
        .map(|p| (p.0 - mx) * (p.1 - my))
        .sum::<f64>();
    let var = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum::<f64>();
    cov / var
}

/// Times both convolution routes at every configured size.
///
/// Each repetition draws a fresh `walks * dim` channel block, runs both
/// routes on it, checks the outputs agree to 1e-9, and times each route
/// over enough inner iterations to amortize clock resolution. The transform
/// route builds one plan per call and shares it across the block's
/// channels, matching what the interaction layer pays.
pub fn bench_conv(config: &BenchConfig) -> Result<BenchReport, BenchError> {
    if config.sizes.is_empty() {
        return Err(BenchError::EmptySizes);
    }
    if config.sizes.windows(2).any(|w| w[1] <= w[0]) {
        return Err(BenchError::SizesNotIncreasing);
    }
    if config.reps < MIN_REPS {
        return Err(BenchError::FewReps { got: config.reps });
    }
    let channels = config.walks * config.dim;
    if channels == 0 {
        return Err(BenchError::NoChannels);
    }
    let mut rows = Vec::with_capacity(config.sizes.len());
    for &size in &config.sizes {
        let mut rng =
            ChaCha8Rng::seed_from_u64(mix_seed_indexed(config.seed, "bench", size as u64));
        let inner = (2048 / (size * channels)).max(1);
        let plan_len = conv_output_len(size, size).next_power_of_two();
        let mut naive_times = Vec::with_capacity(config.reps);
        let mut fft_times = Vec::with_capacity(config.reps);
        let mut max_abs_diff = 0.0_f64;
        let draw_block = |rng: &mut ChaCha8Rng| -> Vec<(Vec<f64>, Vec<f64>)> {
            (0..channels)
                .map(|_| {
                    let x = (0..size).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    let y = (0..size).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    (x, y)
                })
                .collect()
        };

        // Warm both routes so first-touch costs stay out of the samples.
        {
            let block = draw_block(&mut rng);
            let plan = FftPlan::new(plan_len).expect("power of two");
            for (x, y) in &block {
                let _ = conv1d_naive(x, y).expect("nonempty inputs");
                let _ = conv1d_fft_with_plan(x, y, &plan).expect("plan covers output");
            }
        }

        for _ in 0..config.reps {
            let block = draw_block(&mut rng);
            let mut naive_out = vec![Vec::new(); channels];
            let mut fft_out = vec![Vec::new(); channels];

            let start = Instant::now();
            for _ in 0..inner {
                for (c, (x, y)) in block.iter().enumerate() {
                    naive_out[c] =
                        conv1d_naive(black_box(x), black_box(y)).expect("nonempty inputs");
                }
                black_box(&naive_out);
            }
            naive_times.push(start.elapsed().as_secs_f64() / inner as f64);

            let start = Instant::now();
            for _ in 0..inner {
                let plan = FftPlan::new(plan_len).expect("power of two");
                for (c, (x, y)) in block.iter().enumerate() {
                    fft_out[c] =
                        conv1d_fft_with_plan(black_box(x), black_box(y), &plan)
                            .expect("plan covers output");
                }
                black_box(&fft_out);
            }
            fft_times.push(start.elapsed().as_secs_f64() / inner as f64);

            for (ns, fs) in naive_out.iter().zip(&fft_out) {
                for (a, b) in ns.iter().zip(fs) {
                    max_abs_diff = max_abs_diff.max((a - b).abs());
                }
            }
        }
        if max_abs_diff >= 1e-9 {
            return Err(BenchError::BackendMismatch {
                size,
                diff: max_abs_diff,
            });
        }
        let naive = stats(&naive_times);
        let fft = stats(&fft_times);
        rows.push(SizeRow {
            size,
            speedup: naive.median / fft.median,
            naive,
            fft,
            max_abs_diff,
        });
    }

    let naive_pts: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| ((r.size as f64).ln(), r.naive.median.ln()))
        .collect();
    let fft_pts: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| ((r.size as f64).ln(), r.fft.median.ln()))
        .collect();
    let (naive_slope, fft_slope) = if rows.len() >= 2 {
        (slope(&naive_pts), slope(&fft_pts))
    } else {
        (f64::NAN, f64::NAN)
    };

    Ok(BenchReport {
        channels,
        rows,
        naive_slope,
        fft_slope,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stats_of_known_samples() {
        let s = stats(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.mean, 2.5);
        assert_eq!(s.median, 2.5);
        assert!((s.stddev - 1.25_f64.sqrt()).abs() < 1e-12);
        let odd = stats(&[5.0, 1.0, 3.0]);
        assert_eq!(odd.median, 3.0);
    }

    #[test]
    fn slope_recovers_exact_power_laws() {
        let quad: Vec<(f64, f64)> = (1..=5)
            .map(|k| {
                let n = (10.0_f64).powi(k);
                (n.ln(), (3.0 * n * n).ln())
            })
            .collect();
        assert!((slope(&quad) - 2.0).abs() < 1e-12);
        let lin: Vec<(f64, f64)> = (1..=5)
            .map(|k| {
                let n = (10.0_f64).powi(k);
                (n.ln(), (0.5 * n).ln())
            })
            .collect();
        assert!((slope(&lin) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn smoke_run_produces_rows_and_agreement() {
        let report = bench_conv(&BenchConfig {
            sizes: vec![8, 32],
            walks: 2,
            dim: 3,
            reps: 5,
            seed: 11,
        })
        .unwrap();
        assert_eq!(report.rows.len(), 2);
        assert_eq!(report.channels, 6);
        for row in &report.rows {
            assert!(row.naive.median > 0.0);
            assert!(row.fft.median > 0.0);
            assert!(row.max_abs_diff < 1e-9);
        }
    }

    #[test]
    fn degenerate_configs_are_rejected() {
        let base = BenchConfig {
            sizes: vec![8, 32],
            walks: 1,
            dim: 1,
            reps: 5,
            seed: 0,
        };
        assert!(matches!(
            bench_conv(&BenchConfig {
                sizes: vec![],
                ..base.clone()
            }),
            Err(BenchError::EmptySizes)
        ));
        assert!(matches!(
            bench_conv(&BenchConfig {
                sizes: vec![8, 8],
                ..base.clone()
            }),
            Err(BenchError::SizesNotIncreasing)
        ));
        assert!(matches!(
            bench_conv(&BenchConfig {
                reps: 4,
                ..base.clone()
            }),
            Err(BenchError::FewReps { got: 4 })
        ));
        assert!(matches!(
            bench_conv(&BenchConfig { walks: 0, ..base }),
            Err(BenchError::NoChannels)
        ));
    }
}
