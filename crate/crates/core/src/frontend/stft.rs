use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

/// `[frames][bins]` complex spectrogram, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<Complex<f64>>,
}

impl Spectrogram {
    pub fn frame(&self, t: usize) -> &[Complex<f64>] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }
}

/// Short-time Fourier transform with a periodic Hann window and centered
/// frames (half a window of reflection padding on each side).
pub struct Stft {
    window: Vec<f64>,
    hop: usize,
    fft: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(window_samples: usize, hop_samples: usize) -> Self {
        assert!(window_samples >= 2 && hop_samples >= 1);
        let window = (0..window_samples)
            .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / window_samples as f64).cos())
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(window_samples);
        Stft {
            window,
            hop: hop_samples,
            fft,
        }
    }

    pub fn window_len(&self) -> usize {
        self.window.len()
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn bins(&self) -> usize {
        self.window.len() / 2 + 1
    }

    /// `floor((padded_len - window) / hop) + 1` with `padded_len = len + window`.
    pub fn frame_count(&self, n_samples: usize) -> usize {
        let padded = n_samples + 2 * (self.window.len() / 2);
        if padded < self.window.len() {
            0
        } else {
            (padded - self.window.len()) / self.hop + 1
        }
    }

    fn padded(&self, signal: &[f64]) -> Vec<f64> {
        let pad = self.window.len() / 2;
        let n = signal.len();
        let mut out = Vec::with_capacity(n + 2 * pad);
        // reflection needs at least pad+1 samples; shorter signals are zero padded
        let reflect = n > pad;
        for i in (1..=pad).rev() {
            out.push(if reflect { signal[i] } else { 0.0 });
        }
        out.extend_from_slice(signal);
        for i in 0..pad {
            out.push(if reflect { signal[n - 2 - i] } else { 0.0 });
        }
        out
    }

    pub fn process(&self, signal: &[f64]) -> Spectrogram {
        let frames = self.frame_count(signal.len());
        let bins = self.bins();
        let win = self.window.len();
        let padded = self.padded(signal);
        let mut data = Vec::with_capacity(frames * bins);
        let mut buf = vec![Complex::new(0.0, 0.0); win];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        for t in 0..frames {
            let start = t * self.hop;
            for ((b, &s), &w) in buf.iter_mut().zip(&padded[start..start + win]).zip(&self.window) {
                *b = Complex::new(s * w, 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            data.extend_from_slice(&buf[..bins]);
        }
        Spectrogram { frames, bins, data }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn five_seconds_gives_251_frames() {
        let stft = Stft::new(960, 480);
        assert_eq!(stft.frame_count(120_000), 251);
        let spec = stft.process(&vec![0.0; 120_000]);
        assert_eq!((spec.frames, spec.bins), (251, 481));
    }

    #[test]
    fn zero_signal_gives_zero_spectrum() {
        let stft = Stft::new(960, 480);
        let spec = stft.process(&vec![0.0; 4800]);
        assert!(spec.data.iter().all(|c| c.norm() == 0.0));
    }

    fn argmax_bins(spec: &Spectrogram) -> Vec<usize> {
        (0..spec.frames)
            .map(|t| {
                let frame = spec.frame(t);
                (0..spec.bins)
                    .max_by(|&a, &b| frame[a].norm().total_cmp(&frame[b].norm()))
                    .unwrap()
            })
            .collect()
    }

    #[test]
    fn bin_centered_sine_peaks_at_its_bin() {
        let stft = Stft::new(960, 480);
        // bin 25 of a 960-point DFT at 24 kHz sits at 625 Hz
        let f = 25.0 * 24_000.0 / 960.0;
        let x: Vec<f64> = (0..24_000)
            .map(|n| (2.0 * PI * f * n as f64 / 24_000.0 + 0.3).sin())
            .collect();
        let peaks = argmax_bins(&stft.process(&x));
        // edge frames see the reflection kink; interior frames are exact
        assert!(peaks[1..peaks.len() - 1].iter().all(|&p| p == 25), "{peaks:?}");

        // a cosine whose both ends are symmetry points reflects seamlessly
        let x: Vec<f64> = (0..24_001)
            .map(|n| (2.0 * PI * f * n as f64 / 24_000.0).cos())
            .collect();
        assert!(argmax_bins(&stft.process(&x)).iter().all(|&p| p == 25));
    }

    #[test]
    fn frame_matches_naive_dft() {
        let stft = Stft::new(64, 16);
        let x: Vec<f64> = (0..200).map(|n| ((n * 37) % 11) as f64 - 5.0).collect();
        let spec = stft.process(&x);
        let padded = stft.padded(&x);
        let t = 3;
        for k in 0..spec.bins {
            let mut acc = Complex::new(0.0, 0.0);
            for n in 0..64 {
                let v = padded[t * 16 + n] * stft.window[n];
                let ang = -2.0 * PI * (k * n) as f64 / 64.0;
                acc += Complex::new(v * ang.cos(), v * ang.sin());
            }
            assert!((acc - spec.frame(t)[k]).norm() < 1e-9);
        }
    }
}
