use super::{MelFilterbank, Spectrogram};
use crate::error::{Result, SeldError};

pub const INTENSITY_EPS: f64 = 1e-10;

/// Mel-banded active intensity vectors, shaped `[3][frames][n_mels]` with
/// component order (x, y, z).
///
/// Per time-frequency bin `I = Re{conj(W) (X, Y, Z)}` normalized by
/// `|W|^2 + (|X|^2 + |Y|^2 + |Z|^2) / 3 + eps`, then averaged over each mel
/// band with the filter weights. Every value lies in `[-1, 1]`.
pub fn intensity_vectors(
    spec_w: &Spectrogram,
    spec_x: &Spectrogram,
    spec_y: &Spectrogram,
    spec_z: &Spectrogram,
    melbank: &MelFilterbank,
) -> Result<Vec<f64>> {
    for s in [spec_x, spec_y, spec_z] {
        if s.frames != spec_w.frames || s.bins != spec_w.bins {
            return Err(SeldError::shape("intensity: spectrograms not aligned"));
        }
    }
    if spec_w.bins != melbank.n_bins {
        return Err(SeldError::shape("intensity: filterbank bin mismatch"));
    }
    let (frames, bins, n_mels) = (spec_w.frames, spec_w.bins, melbank.n_mels);
    let row_sums: Vec<f64> = (0..n_mels).map(|m| melbank.row(m).iter().sum()).collect();
    let plane = frames * n_mels;
    let mut out = vec![0.0; 3 * plane];
    let mut per_bin = [vec![0.0; bins], vec![0.0; bins], vec![0.0; bins]];
    let mut banded = vec![0.0; n_mels];

    for t in 0..frames {
        let (w, x, y, z) = (spec_w.frame(t), spec_x.frame(t), spec_y.frame(t), spec_z.frame(t));
        for k in 0..bins {
            let norm = w[k].norm_sqr()
                + (x[k].norm_sqr() + y[k].norm_sqr() + z[k].norm_sqr()) / 3.0
                + INTENSITY_EPS;
            let wc = w[k].conj();
            per_bin[0][k] = (wc * x[k]).re / norm;
            per_bin[1][k] = (wc * y[k]).re / norm;
            per_bin[2][k] = (wc * z[k]).re / norm;
        }
        for (c, comp) in per_bin.iter().enumerate() {
            melbank.apply(comp, &mut banded);
            for m in 0..n_mels {
                let v = if row_sums[m] > 0.0 { banded[m] / row_sums[m] } else { 0.0 };
                out[c * plane + t * n_mels + m] = v.clamp(-1.0, 1.0);
            }
        }
    }
    Ok(out)
}
