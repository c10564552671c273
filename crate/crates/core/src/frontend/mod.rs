//! Audio front end: stereo to pseudo-FOA conversion and the 7-channel
//! log-mel + intensity-vector feature tensor.

mod featfile;
mod intensity;
mod mel;
mod resample;
mod stft;

pub use featfile::{read_features, write_features, FEATURE_MAGIC, FEATURE_VERSION};
pub use intensity::{intensity_vectors, INTENSITY_EPS};
pub use mel::{hz_to_mel, log_mel, mel_to_hz, MelFilterbank, LOG_FLOOR};
pub use resample::{resample, resample_channel, RESAMPLE_TAPS};
pub use stft::{Spectrogram, Stft};

use crate::error::{Result, SeldError};
use crate::SAMPLE_RATE;

/// Two-channel waveform.
#[derive(Debug, Clone, PartialEq)]
pub struct StereoClip {
    pub left: Vec<f64>,
    pub right: Vec<f64>,
    pub sample_rate_hz: u32,
}

impl StereoClip {
    pub fn new(left: Vec<f64>, right: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        let clip = StereoClip {
            left,
            right,
            sample_rate_hz,
        };
        clip.validate()?;
        Ok(clip)
    }

    pub fn silence(len: usize, sample_rate_hz: u32) -> Self {
        StereoClip {
            left: vec![0.0; len],
            right: vec![0.0; len],
            sample_rate_hz,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.left.is_empty() {
            return Err(SeldError::EmptyInput("stereo clip"));
        }
        if self.left.len() != self.right.len() {
            return Err(SeldError::shape(format!(
                "left has {} samples, right has {}",
                self.left.len(),
                self.right.len()
            )));
        }
        if self.sample_rate_hz == 0 {
            return Err(SeldError::invalid("sample rate must be positive"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.left.len()
    }

    pub fn is_empty(&self) -> bool {
        self.left.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.len() as f64 / self.sample_rate_hz as f64
    }

    /// The clip with left and right exchanged.
    pub fn swapped(&self) -> Self {
        StereoClip {
            left: self.right.clone(),
            right: self.left.clone(),
            sample_rate_hz: self.sample_rate_hz,
        }
    }
}

/// First-order ambisonics channels derived from a stereo pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoFoaClip {
    pub w: Vec<f64>,
    pub y: Vec<f64>,
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub sample_rate_hz: u32,
}

/// Mid/side style mapping: `W = (L+R)/2`, `Y = (L-R)/2`, `X = Z = 0`.
pub fn stereo_to_pseudo_foa(clip: &StereoClip) -> Result<PseudoFoaClip> {
    clip.validate()?;
    let w = clip
        .left
        .iter()
        .zip(&clip.right)
        .map(|(&l, &r)| (l + r) / 2.0)
        .collect();
    let y = clip
        .left
        .iter()
        .zip(&clip.right)
        .map(|(&l, &r)| (l - r) / 2.0)
        .collect();
    Ok(PseudoFoaClip {
        w,
        y,
        x: vec![0.0; clip.len()],
        z: vec![0.0; clip.len()],
        sample_rate_hz: clip.sample_rate_hz,
    })
}

/// Feature channel layout.
pub const FEATURE_CHANNELS: usize = 7;
pub const CH_LOGMEL_W: usize = 0;
pub const CH_LOGMEL_Y: usize = 1;
pub const CH_LOGMEL_X: usize = 2;
pub const CH_LOGMEL_Z: usize = 3;
pub const CH_INTENSITY_X: usize = 4;
pub const CH_INTENSITY_Y: usize = 5;
pub const CH_INTENSITY_Z: usize = 6;

/// `[channels][frames][mels]` feature array, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    pub channels: usize,
    pub frames: usize,
    pub mels: usize,
    pub data: Vec<f32>,
    pub frame_hop_s: f64,
    pub window_s: f64,
}

impl FeatureTensor {
    #[inline]
    pub fn at(&self, c: usize, t: usize, f: usize) -> f32 {
        self.data[(c * self.frames + t) * self.mels + f]
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.frames * self.mels;
        &self.data[c * n..(c + 1) * n]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureConfig {
    pub sample_rate_hz: u32,
    pub window_samples: usize,
    pub hop_samples: usize,
    pub n_mels: usize,
    pub fmin_hz: f64,
    pub fmax_hz: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            sample_rate_hz: SAMPLE_RATE,
            window_samples: 960,
            hop_samples: 480,
            n_mels: 64,
            fmin_hz: 50.0,
            fmax_hz: 12_000.0,
        }
    }
}

/// Reusable feature pipeline; owns the FFT plan and the mel filterbank.
pub struct FeatureExtractor {
    config: FeatureConfig,
    stft: Stft,
    melbank: MelFilterbank,
}

impl FeatureExtractor {
    pub fn new(config: FeatureConfig) -> Self {
        let stft = Stft::new(config.window_samples, config.hop_samples);
        let melbank = MelFilterbank::htk(
            config.n_mels,
            config.window_samples,
            config.sample_rate_hz,
            config.fmin_hz,
            config.fmax_hz,
        );
        FeatureExtractor {
            config,
            stft,
            melbank,
        }
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.config
    }

    pub fn melbank(&self) -> &MelFilterbank {
        &self.melbank
    }

    pub fn stft(&self) -> &Stft {
        &self.stft
    }

    /// Number of STFT frames produced for `n_samples` input samples at the
    /// target rate.
    pub fn frames_for(&self, n_samples: usize) -> usize {
        self.stft.frame_count(n_samples)
    }

    pub fn extract(&self, clip: &StereoClip) -> Result<FeatureTensor> {
        clip.validate()?;
        let resampled;
        let clip = if clip.sample_rate_hz != self.config.sample_rate_hz {
            resampled = resample(clip, self.config.sample_rate_hz)?;
            &resampled
        } else {
            clip
        };
        let foa = stereo_to_pseudo_foa(clip)?;
        let spec_w = self.stft.process(&foa.w);
        let spec_y = self.stft.process(&foa.y);
        let spec_x = self.stft.process(&foa.x);
        let spec_z = self.stft.process(&foa.z);

        let frames = spec_w.frames;
        let mels = self.config.n_mels;
        let plane = frames * mels;
        let mut data = vec![0f32; FEATURE_CHANNELS * plane];

        for (ch, spec) in [
            (CH_LOGMEL_W, &spec_w),
            (CH_LOGMEL_Y, &spec_y),
            (CH_LOGMEL_X, &spec_x),
            (CH_LOGMEL_Z, &spec_z),
        ] {
            let lm = log_mel(spec, &self.melbank);
            for (dst, &v) in data[ch * plane..(ch + 1) * plane].iter_mut().zip(&lm) {
                *dst = v as f32;
            }
        }
        let iv = intensity_vectors(&spec_w, &spec_x, &spec_y, &spec_z, &self.melbank)?;
        for (k, ch) in [CH_INTENSITY_X, CH_INTENSITY_Y, CH_INTENSITY_Z]
            .into_iter()
            .enumerate()
        {
            for (dst, &v) in data[ch * plane..(ch + 1) * plane]
                .iter_mut()
                .zip(&iv[k * plane..(k + 1) * plane])
            {
                *dst = v as f32;
            }
        }

        Ok(FeatureTensor {
            channels: FEATURE_CHANNELS,
            frames,
            mels,
            data,
            frame_hop_s: self.config.hop_samples as f64 / self.config.sample_rate_hz as f64,
            window_s: self.config.window_samples as f64 / self.config.sample_rate_hz as f64,
        })
    }
}

impl Default for FeatureExtractor {
    fn default() -> Self {
        FeatureExtractor::new(FeatureConfig::default())
    }
}

/// Convenience wrapper using the default configuration.
pub fn extract_features(clip: &StereoClip) -> Result<FeatureTensor> {
    FeatureExtractor::default().extract(clip)
}
