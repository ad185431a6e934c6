//! Wall-clock microbenchmarking.

use std::time::Instant;

use serde::Serialize;

/// Untimed runs before measurement starts.
pub const WARMUP_RUNS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingStats {
    pub reps: usize,
    pub mean_ms: f64,
    /// Sample standard deviation (zero for a single rep).
    pub stddev_ms: f64,
    pub median_ms: f64,
}

impl TimingStats {
    pub fn from_samples(samples_ms: &[f64]) -> Self {
        let n = samples_ms.len();
        if n == 0 {
            return Self {
                reps: 0,
                mean_ms: 0.0,
                stddev_ms: 0.0,
                median_ms: 0.0,
            };
        }
        let mean = samples_ms.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            samples_ms.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        let mut sorted = samples_ms.to_vec();
        sorted.sort_by(f64::total_cmp);
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        Self {
            reps: n,
            mean_ms: mean,
            stddev_ms: var.sqrt(),
            median_ms: median,
        }
    }
}

/// `WARMUP_RUNS` untimed calls, then `reps` timed ones, strictly serial.
pub fn bench<T>(reps: usize, mut f: impl FnMut() -> T) -> TimingStats {
    for _ in 0..WARMUP_RUNS {
        std::hint::black_box(f());
    }
    let samples: Vec<f64> = (0..reps)
        .map(|_| {
            let t = Instant::now();
            std::hint::black_box(f());
            t.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    TimingStats::from_samples(&samples)
}
