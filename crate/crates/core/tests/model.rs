mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use seld_core::checkpoint::Checkpoint;
use seld_core::dataset::synth_clip;
use seld_core::frontend::StereoClip;
use seld_core::model::{
    conv3x3_macs, count_params_and_macs, head_activation, temporal_matrix, temporal_module, ModelConfig, SeldModel,
    CLIP_FEATURE_FRAMES, INTERP_FRAMES,
};
use seld_core::nn::{Mode, Module};
use seld_core::{LABEL_FRAMES, N_CLASSES, N_TRACKS};

#[test]
fn temporal_module_keeps_constants_and_ramps() {
    let d = 3;
    for t_in in [2, 3, 7, 16, 31, 250] {
        let v = [0.5, -2.0, 7.25];
        let x: Vec<f64> = (0..t_in).flat_map(|_| v).collect();
        let y = temporal_module(&x, t_in, d).unwrap();
        assert_eq!(y.len(), LABEL_FRAMES * d);
        for row in y.chunks(d) {
            for (a, b) in row.iter().zip(&v) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
        // ramp a + b j sampled at interpolation position (5k + 2) / 249 * (t_in - 1)
        let (a, b) = (1.5, -0.75);
        let x: Vec<f64> = (0..t_in).map(|j| a + b * j as f64).collect();
        let y = temporal_module(&x, t_in, 1).unwrap();
        let group = (INTERP_FRAMES / LABEL_FRAMES) as f64;
        for (k, &got) in y.iter().enumerate() {
            let centre = group * k as f64 + (group - 1.0) / 2.0;
            let want = a + b * centre * (t_in - 1) as f64 / (INTERP_FRAMES - 1) as f64;
            assert!((got - want).abs() <= 1e-6, "t_in {t_in} frame {k}");
        }
    }
}

#[test]
fn temporal_module_is_affine() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    for t_in in [2, 16, 40] {
        let d = 5;
        let a: Vec<f64> = (0..t_in * d).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let b: Vec<f64> = (0..t_in * d).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let (alpha, beta) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        let mix: Vec<f64> = a.iter().zip(&b).map(|(p, q)| alpha * p + beta * q).collect();
        let ya = temporal_module(&a, t_in, d).unwrap();
        let yb = temporal_module(&b, t_in, d).unwrap();
        let ym = temporal_module(&mix, t_in, d).unwrap();
        for i in 0..ym.len() {
            assert!((ym[i] - alpha * ya[i] - beta * yb[i]).abs() <= 1e-6);
        }
    }
}

#[test]
fn temporal_matrix_rows_are_averages() {
    let m = temporal_matrix(16, INTERP_FRAMES, LABEL_FRAMES).unwrap();
    for row in m.chunks(16) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&w| w >= 0.0));
    }
    assert!(temporal_matrix(1, INTERP_FRAMES, LABEL_FRAMES).is_err());
    assert!(temporal_matrix(16, 250, 60).is_err());
}

#[test]
fn head_outputs_stay_in_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for draw in 0..10_000 {
        let scale = 10f64.powi(draw % 7 - 2);
        let mut z: Vec<f64> = (0..N_TRACKS * N_CLASSES * 3).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
        head_activation(&mut z);
        for c in z.chunks(3) {
            assert!(c[0].abs() <= 1.0 && c[1].abs() <= 1.0 && c[2] >= 0.0);
            assert!(c.iter().all(|v| v.is_finite()));
        }
    }
    let mut zero = vec![0.0f64; 3];
    head_activation(&mut zero);
    assert_eq!(zero, [0.0, 0.0, 0.0]);
}

#[test]
fn complexity_counts() {
    assert_eq!(conv3x3_macs(1, 1, 10, 10), 900);
    let full = count_params_and_macs(&ModelConfig::full());
    assert!((65_000_000..=87_000_000).contains(&full.params), "{}", full.params);
    assert!((3_500_000_000..=5_800_000_000).contains(&full.macs), "{}", full.macs);
    assert!((full.encoder_params as f64 / 75e6 - 1.0).abs() <= 0.1, "{}", full.encoder_params);
    assert!(count_params_and_macs(&ModelConfig::tiny()).params < 1_000_000);
    assert_eq!(count_params_and_macs(&ModelConfig::full()), full);
}

#[test]
fn closed_form_count_matches_instantiated_full_layout() {
    // the full layout with narrower stages, small enough to instantiate
    let mut cfg = ModelConfig::full();
    cfg.encoder_channels = vec![8, 8, 16, 16, 32, 32];
    cfg.block.d_model = 24;
    cfg.block.dt_rank = 2;
    cfg.head_hidden = 20;
    let mut m = SeldModel::<f32>::new(cfg.clone(), 3).unwrap();
    assert_eq!(m.num_trainable(), count_params_and_macs(&cfg).params);
}

#[test]
fn encoder_pooling_arithmetic() {
    let cfg = ModelConfig::tiny();
    assert_eq!(cfg.encoder_output_dims(CLIP_FEATURE_FRAMES), (16, 1));
    let mut m = SeldModel::<f32>::new(cfg.clone(), 1).unwrap();
    m.visit("", &mut |name, p| {
        if name.starts_with("encoder") && (name.ends_with("conv1.bias") || name.ends_with("conv2.bias")) {
            p.value.iter_mut().for_each(|v| *v = 0.0);
        }
    });
    let feats = vec![0.0f32; cfg.in_channels * CLIP_FEATURE_FRAMES * cfg.mels];
    let (out, t, f) = m.cnn14_encoder(&feats, 1, CLIP_FEATURE_FRAMES, Mode::Eval).unwrap();
    assert_eq!((t, f), (16, 1));
    assert_eq!(out.len(), 16 * cfg.d_enc());
    assert!(out.iter().all(|&v| v == 0.0));
}

fn check_tensor_contract(t: &seld_core::maccdoa::MaccdoaTensor) {
    assert_eq!((t.frames, t.tracks, t.classes), (LABEL_FRAMES, N_TRACKS, N_CLASSES));
    assert_eq!(t.data.len(), 50 * 3 * 13 * 3);
    for c in t.data.chunks(3) {
        assert!(c.iter().all(|v| v.is_finite()));
        assert!(c[0].abs() <= 1.0 && c[1].abs() <= 1.0 && c[2] >= 0.0);
    }
}

#[test]
fn clips_map_to_label_tensor() {
    let m = SeldModel::<f32>::new(ModelConfig::tiny(), 2).unwrap();
    check_tensor_contract(&m.predict(&synth_clip(5, 0).audio).unwrap());
    check_tensor_contract(&m.predict(&StereoClip::silence(120_000, 24_000)).unwrap());
}

#[test]
fn checkpoint_round_trip_reproduces_predictions() {
    let mut m = SeldModel::<f32>::new(ModelConfig::tiny(), 4).unwrap();
    let clip = synth_clip(6, 0).audio;
    let before = m.predict(&clip).unwrap();
    let mut buf = Vec::new();
    Checkpoint::from_model(&mut m).write_to(&mut buf).unwrap();
    let ck = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
    assert!(ck.tensors.keys().any(|k| k.starts_with("block0.bimamba.fwd.")));
    assert!(ck.tensors.keys().any(|k| k.starts_with("block1.bimamba.bwd.")));
    let restored: SeldModel<f32> = ck.to_model().unwrap();
    assert_eq!(restored.predict(&clip).unwrap(), before);
    assert!(Checkpoint::read_from(&mut &buf[..buf.len() / 2]).is_err());
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    for (name, analytic, fd) in common::model_gradient_samples(20, 42) {
        let e = common::rel_err(analytic, fd, 1e-6);
        assert!(e <= 1e-2, "{name}: analytic {analytic:e} vs fd {fd:e}");
    }
}

#[test]
fn model_rejects_bad_inputs() {
    let m = SeldModel::<f64>::new(ModelConfig::tiny(), 0).unwrap();
    assert!(m.forward(&[0.0; 10], 1, 26, Mode::Eval).is_err());
    let mut bad = vec![0.0; 7 * 26 * 64];
    bad[3] = f64::NAN;
    assert!(m.forward(&bad, 1, 26, Mode::Eval).is_err());
    // a single encoder frame is too short for the temporal module
    assert!(m.forward(&vec![0.0; 7 * 10 * 64], 1, 10, Mode::Eval).is_err());
}
