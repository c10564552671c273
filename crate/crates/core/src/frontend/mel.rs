use super::Spectrogram;

/// Power floor applied before the logarithm (-100 dB).
pub const LOG_FLOOR: f64 = 1e-10;

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters on the HTK mel scale, unit peak height, no area
/// normalization. Stored `[n_mels][n_bins]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    pub n_mels: usize,
    pub n_bins: usize,
    pub weights: Vec<f64>,
}

impl MelFilterbank {
    pub fn htk(n_mels: usize, n_fft: usize, sample_rate_hz: u32, fmin: f64, fmax: f64) -> Self {
        let n_bins = n_fft / 2 + 1;
        let (mel_lo, mel_hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let mut weights = vec![0.0; n_mels * n_bins];
        for m in 0..n_mels {
            let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            for k in 0..n_bins {
                let f = k as f64 * sample_rate_hz as f64 / n_fft as f64;
                let rise = (f - lo) / (center - lo);
                let fall = (hi - f) / (hi - center);
                weights[m * n_bins + k] = rise.min(fall).max(0.0);
            }
        }
        MelFilterbank {
            n_mels,
            n_bins,
            weights,
        }
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.n_bins..(m + 1) * self.n_bins]
    }

    /// Apply to one frame of non-negative per-bin values.
    pub fn apply(&self, frame: &[f64], out: &mut [f64]) {
        debug_assert_eq!(frame.len(), self.n_bins);
        for (m, o) in out.iter_mut().enumerate().take(self.n_mels) {
            *o = self.row(m).iter().zip(frame).map(|(w, v)| w * v).sum();
        }
    }
}

/// `10 * log10(max(melbank * |X|^2, 1e-10))`, shaped `[frames][n_mels]`.
pub fn log_mel(spec: &Spectrogram, melbank: &MelFilterbank) -> Vec<f64> {
    assert_eq!(spec.bins, melbank.n_bins, "spectrogram/filterbank bin mismatch");
    let mut out = vec![0.0; spec.frames * melbank.n_mels];
    let mut power = vec![0.0; spec.bins];
    for t in 0..spec.frames {
        for (p, c) in power.iter_mut().zip(spec.frame(t)) {
            *p = c.norm_sqr();
        }
        let row = &mut out[t * melbank.n_mels..(t + 1) * melbank.n_mels];
        melbank.apply(&power, row);
        for v in row.iter_mut() {
            *v = 10.0 * v.max(LOG_FLOOR).log10();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::super::Stft;
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn mel_scale_round_trips() {
        for &hz in &[0.0, 50.0, 700.0, 12_000.0] {
            assert!((mel_to_hz(hz_to_mel(hz)) - hz).abs() < 1e-9);
        }
        assert!((hz_to_mel(700.0) - 2595.0 * 2f64.log10()).abs() < 1e-12);
    }

    #[test]
    fn zero_spectrum_hits_floor() {
        let stft = Stft::new(960, 480);
        let bank = MelFilterbank::htk(64, 960, 24_000, 50.0, 12_000.0);
        let lm = log_mel(&stft.process(&vec![0.0; 4800]), &bank);
        assert!(lm.iter().all(|&v| (v - -100.0).abs() < 1e-12));
    }

    #[test]
    fn filterbank_rows_positive_and_ordered() {
        let bank = MelFilterbank::htk(64, 960, 24_000, 50.0, 12_000.0);
        let mut last_peak = None;
        for m in 0..64 {
            let row = bank.row(m);
            assert!(row.iter().sum::<f64>() > 0.0, "row {m} empty");
            assert!(row.iter().all(|&w| (0.0..=1.0).contains(&w)));
            let peak = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            if let Some(p) = last_peak {
                assert!(peak > p, "row {m} peak {peak} not above {p}");
            }
            last_peak = Some(peak);
        }
    }

    #[test]
    fn doubling_amplitude_adds_six_db() {
        let stft = Stft::new(960, 480);
        let bank = MelFilterbank::htk(64, 960, 24_000, 50.0, 12_000.0);
        // broadband content so every mel band is well above the floor
        let x: Vec<f64> = (0..9600)
            .map(|n| {
                (1..200)
                    .map(|k| (2.0 * PI * (k as f64 * 61.3) * n as f64 / 24_000.0 + k as f64).sin())
                    .sum::<f64>()
                    * 0.01
            })
            .collect();
        let x2: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let a = log_mel(&stft.process(&x), &bank);
        let b = log_mel(&stft.process(&x2), &bank);
        let expected = 10.0 * 4f64.log10();
        for (p, q) in a.iter().zip(&b) {
            assert!(*p > -90.0);
            assert!((q - p - expected).abs() < 1e-9, "{}", q - p);
        }
    }
}
