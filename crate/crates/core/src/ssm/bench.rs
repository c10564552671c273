//! Random scan lanes and wall-clock timing for length-scaling checks.

use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{s4d_real_diagonal, scan, ScanMode, SsmParams};
use crate::error::Result;
use crate::num::Real;

/// Selective lane of `len` steps with `n` states: S4D-real diagonal,
/// per-step `B`, `C` in `[-1, 1]` and `delta` in `[1e-3, 1e-1]`.
pub fn random_lane<T: Real>(len: usize, n: usize, rng: &mut ChaCha8Rng) -> (SsmParams<T>, Vec<T>) {
    let mut draw = |lo: f64, hi: f64, k: usize| -> Vec<T> { (0..k).map(|_| T::of(rng.gen_range(lo..hi))).collect() };
    let b = draw(-1.0, 1.0, len * n);
    let c = draw(-1.0, 1.0, len * n);
    let delta = draw(1e-3, 1e-1, len);
    let x = draw(-1.0, 1.0, len);
    let d = draw(-1.0, 1.0, 1)[0];
    let params = SsmParams {
        a: s4d_real_diagonal(n),
        b,
        c,
        delta,
        d,
        skip_term: true,
    };
    (params, x)
}

/// Wall time per step of one timed run. The scan is repeated until at least
/// `min_run_ns` have elapsed so short lengths are not dominated by timer
/// resolution.
pub fn ns_per_step<T: Real>(params: &SsmParams<T>, x: &[T], mode: ScanMode, min_run_ns: u128) -> Result<f64> {
    let h0 = vec![T::zero(); params.n_state()];
    let start = Instant::now();
    let mut reps = 0u32;
    loop {
        std::hint::black_box(scan(params, std::hint::black_box(x), &h0, mode, false)?);
        reps += 1;
        if start.elapsed().as_nanos() >= min_run_ns {
            break;
        }
    }
    Ok(start.elapsed().as_nanos() as f64 / reps as f64 / x.len().max(1) as f64)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    v[v.len() / 2]
}

/// One row of a length-scaling measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingRow {
    pub len: usize,
    /// Median over runs of the time per step.
    pub ns_per_step: f64,
    /// Median over runs of `time(len) / time(previous len)` for whole
    /// sequences; `None` on the first row.
    pub ratio: Option<f64>,
}

/// Time `mode` on one random lane per length. Each run sweeps all lengths
/// back to back, so slow phases of the machine hit neighbouring lengths
/// alike and the per-run ratios stay comparable.
pub fn scaling<T: Real>(
    lengths: &[usize],
    n: usize,
    mode: ScanMode,
    runs: usize,
    min_run_ns: u128,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<ScalingRow>> {
    let lanes: Vec<_> = lengths.iter().map(|&l| random_lane::<T>(l, n, rng)).collect();
    for (p, x) in &lanes {
        // warm-up
        scan(p, x, &vec![T::zero(); n], mode, false)?;
    }
    let runs = runs.max(1);
    let mut times = vec![Vec::with_capacity(runs); lanes.len()];
    for _ in 0..runs {
        for (k, (p, x)) in lanes.iter().enumerate() {
            times[k].push(ns_per_step(p, x, mode, min_run_ns)? * x.len() as f64);
        }
    }
    Ok(lengths
        .iter()
        .enumerate()
        .map(|(k, &len)| ScalingRow {
            len,
            ns_per_step: median(times[k].clone()) / len as f64,
            ratio: (k > 0).then(|| median((0..runs).map(|r| times[k][r] / times[k - 1][r]).collect())),
        })
        .collect())
}
