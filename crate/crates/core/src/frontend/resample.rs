//! Band-limited rational resampling with a 64-tap Kaiser-windowed sinc.

use std::f64::consts::PI;

use super::StereoClip;
use crate::error::{Result, SeldError};

pub const RESAMPLE_TAPS: usize = 64;
const KAISER_BETA: f64 = 8.0;
const MIN_SOURCE_RATE: u32 = 8_000;

/// Zeroth-order modified Bessel function of the first kind.
fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..200 {
        term *= q / (k as f64 * k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

/// Resample both channels of `clip` to `target_hz`.
pub fn resample(clip: &StereoClip, target_hz: u32) -> Result<StereoClip> {
    if clip.is_empty() {
        return Err(SeldError::EmptyInput("resample"));
    }
    clip.validate()?;
    if target_hz == 0 {
        return Err(SeldError::invalid("target rate must be positive"));
    }
    if clip.sample_rate_hz == target_hz {
        return Ok(clip.clone());
    }
    if clip.sample_rate_hz < MIN_SOURCE_RATE {
        return Err(SeldError::invalid(format!(
            "source rate {} Hz below {} Hz",
            clip.sample_rate_hz, MIN_SOURCE_RATE
        )));
    }
    Ok(StereoClip {
        left: resample_channel(&clip.left, clip.sample_rate_hz, target_hz),
        right: resample_channel(&clip.right, clip.sample_rate_hz, target_hz),
        sample_rate_hz: target_hz,
    })
}

/// Resample a single channel. Output length is `round(len * dst / src)`.
///
/// Each output sample is a 64-tap windowed-sinc combination of the input
/// around its fractional source position; taps falling outside the signal
/// are dropped and the remaining weights renormalized to unit sum, so DC
/// passes unchanged up to the edges.
pub fn resample_channel(x: &[f64], src_hz: u32, dst_hz: u32) -> Vec<f64> {
    if x.is_empty() {
        return Vec::new();
    }
    if src_hz == dst_hz {
        return x.to_vec();
    }
    let (src, dst) = (src_hz as u64, dst_hz as u64);
    let g = gcd(src, dst);
    let (up, down) = (dst / g, src / g);
    let n_out = ((x.len() as u64 * dst + src / 2) / src) as usize;
    let cutoff = (dst as f64 / src as f64).min(1.0);
    let half = (RESAMPLE_TAPS / 2) as isize;
    let i0_beta = bessel_i0(KAISER_BETA);

    // the fractional source offset cycles through `up` phases
    let kernels: Vec<[f64; RESAMPLE_TAPS]> = (0..up)
        .map(|phase| {
            let frac = phase as f64 / up as f64;
            let mut k = [0.0; RESAMPLE_TAPS];
            for (tap, w) in k.iter_mut().enumerate() {
                let j = tap as isize - half + 1;
                let tau = frac - j as f64;
                let r = tau / half as f64;
                let win = if r.abs() >= 1.0 {
                    0.0
                } else {
                    bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / i0_beta
                };
                *w = cutoff * sinc(cutoff * tau) * win;
            }
            k
        })
        .collect();
    let sums: Vec<f64> = kernels.iter().map(|k| k.iter().sum()).collect();

    let n_in = x.len() as isize;
    let mut out = Vec::with_capacity(n_out);
    for m in 0..n_out as u64 {
        let pos = m * down;
        let base = (pos / up) as isize;
        let phase = (pos % up) as usize;
        let kernel = &kernels[phase];
        let first = base - half + 1;
        let (mut acc, mut wsum) = (0.0, 0.0);
        if first >= 0 && first + RESAMPLE_TAPS as isize <= n_in {
            let window = &x[first as usize..first as usize + RESAMPLE_TAPS];
            for (w, v) in kernel.iter().zip(window) {
                acc += w * v;
            }
            wsum = sums[phase];
        } else {
            for (tap, w) in kernel.iter().enumerate() {
                let j = first + tap as isize;
                if (0..n_in).contains(&j) {
                    acc += w * x[j as usize];
                    wsum += w;
                }
            }
        }
        out.push(if wsum.abs() > 1e-12 { acc / wsum } else { 0.0 });
    }
    out
}
