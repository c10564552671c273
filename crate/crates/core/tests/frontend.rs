mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use seld_core::frontend::{
    extract_features, resample, stereo_to_pseudo_foa, FeatureExtractor, StereoClip, CH_INTENSITY_X, CH_INTENSITY_Y,
    CH_INTENSITY_Z, CH_LOGMEL_W, CH_LOGMEL_X, CH_LOGMEL_Y,
};

fn f32_samples() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f32..1.0, 1..512).prop_map(|v| v.into_iter().map(f64::from).collect())
}

proptest! {
    #[test]
    fn reconstruction_is_exact_for_float_samples(l in f32_samples(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r: Vec<f64> = l.iter().map(|_| rand::Rng::gen_range(&mut rng, -1.0f32..1.0) as f64).collect();
        let clip = StereoClip::new(l.clone(), r.clone(), 24_000).unwrap();
        let foa = stereo_to_pseudo_foa(&clip).unwrap();
        for i in 0..l.len() {
            prop_assert_eq!((foa.w[i] + foa.y[i]).to_bits(), l[i].to_bits());
            prop_assert_eq!((foa.w[i] - foa.y[i]).to_bits(), r[i].to_bits());
            prop_assert_eq!(foa.x[i], 0.0);
            prop_assert_eq!(foa.z[i], 0.0);
        }
    }

    #[test]
    fn swapping_channels_negates_side(l in f32_samples()) {
        let r: Vec<f64> = l.iter().rev().copied().collect();
        let clip = StereoClip::new(l, r, 24_000).unwrap();
        let a = stereo_to_pseudo_foa(&clip).unwrap();
        let b = stereo_to_pseudo_foa(&clip.swapped()).unwrap();
        prop_assert_eq!(&a.w, &b.w);
        for (p, q) in a.y.iter().zip(&b.y) {
            prop_assert_eq!(*p, -*q);
        }
    }
}

#[test]
fn reconstruction_of_24_bit_pcm_is_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let l = common::pcm_samples(48_000, 24, &mut rng);
    let r = common::pcm_samples(48_000, 24, &mut rng);
    let foa = stereo_to_pseudo_foa(&StereoClip::new(l.clone(), r.clone(), 24_000).unwrap()).unwrap();
    for i in 0..l.len() {
        assert_eq!(foa.w[i] + foa.y[i], l[i]);
        assert_eq!(foa.w[i] - foa.y[i], r[i]);
    }
}

fn noise_clip(seed: u64, len: usize) -> StereoClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = common::pcm_samples(len, 16, &mut rng);
    let r: Vec<f64> = l
        .iter()
        .zip(common::pcm_samples(len, 16, &mut rng))
        .map(|(a, b)| 0.6 * a + 0.2 * b)
        .collect();
    StereoClip::new(l, r, 24_000).unwrap()
}

#[test]
fn feature_layout_for_random_clip() {
    let feat = extract_features(&noise_clip(2, 120_000)).unwrap();
    assert_eq!((feat.channels, feat.frames, feat.mels), (7, 251, 64));
    assert_eq!(feat.data.len(), 7 * 251 * 64);
    assert!((feat.frame_hop_s - 0.02).abs() < 1e-12 && (feat.window_s - 0.04).abs() < 1e-12);
    // x and z spectra are silent: log-mel at the floor, intensity zero
    assert!(feat.channel(CH_LOGMEL_X).iter().all(|&v| v == -100.0));
    assert!(feat.channel(CH_INTENSITY_X).iter().all(|&v| v == 0.0));
    assert!(feat.channel(CH_INTENSITY_Z).iter().all(|&v| v == 0.0));
    for c in [CH_INTENSITY_X, CH_INTENSITY_Y, CH_INTENSITY_Z] {
        assert!(feat.channel(c).iter().all(|v| (-1.0..=1.0).contains(v)));
    }
    assert!(feat.data.iter().all(|v| v.is_finite()));
}

#[test]
fn swapped_clip_keeps_w_and_negates_y_intensity() {
    let clip = noise_clip(3, 24_000);
    let a = extract_features(&clip).unwrap();
    let b = extract_features(&clip.swapped()).unwrap();
    assert_eq!(a.channel(CH_LOGMEL_W), b.channel(CH_LOGMEL_W));
    assert_eq!(a.channel(CH_LOGMEL_Y), b.channel(CH_LOGMEL_Y));
    for (p, q) in a.channel(CH_INTENSITY_Y).iter().zip(b.channel(CH_INTENSITY_Y)) {
        assert_eq!(*p, -*q);
    }
}

#[test]
fn features_are_bit_identical_across_extractors() {
    let clip = noise_clip(4, 30_000);
    let a = extract_features(&clip).unwrap();
    let b = FeatureExtractor::default().extract(&clip.clone()).unwrap();
    assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn off_rate_clip_is_resampled_before_extraction() {
    let clip = noise_clip(5, 96_000);
    let at_48k = StereoClip::new(clip.left.clone(), clip.right.clone(), 48_000).unwrap();
    let feat = extract_features(&at_48k).unwrap();
    assert_eq!(feat.frames, 101);
    let resampled = resample(&at_48k, 24_000).unwrap();
    assert_eq!(resampled.len(), 48_000);
    assert_eq!(extract_features(&resampled).unwrap().data, feat.data);
}

#[test]
fn empty_clip_is_rejected() {
    assert!(StereoClip::new(vec![], vec![], 24_000).is_err());
    assert!(StereoClip::new(vec![0.0], vec![0.0, 0.0], 24_000).is_err());
}
