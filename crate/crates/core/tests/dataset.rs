mod common;

use std::path::Path;

use hound::{SampleFormat, WavSpec, WavWriter};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use seld_core::dataset::{
    load_entry, load_wav, read_manifest, segment, synth_dataset, write_dataset, write_wav, WavFormat, SEGMENT_S,
};
use seld_core::frontend::StereoClip;
use seld_core::maccdoa::{encode_task, Event, EventList};
use seld_core::LABEL_FRAMES;

fn write_raw(path: &Path, channels: u16, rate: u32, bits: u16, samples: &[i32]) {
    let spec = WavSpec {
        channels,
        sample_rate: rate,
        bits_per_sample: bits,
        sample_format: SampleFormat::Int,
    };
    let mut w = WavWriter::create(path, spec).unwrap();
    for &s in samples {
        w.write_sample(s).unwrap();
    }
    w.finalize().unwrap();
}

#[test]
fn float_wav_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let draw = |rng: &mut ChaCha8Rng| (0..5000).map(|_| rng.gen_range(-1.0f32..1.0) as f64).collect::<Vec<_>>();
    let clip = StereoClip::new(draw(&mut rng), draw(&mut rng), 24_000).unwrap();
    let path = dir.path().join("f.wav");
    write_wav(&path, &clip, WavFormat::Float32).unwrap();
    let back = load_wav(&path).unwrap();
    assert_eq!(back, clip);
}

#[test]
fn pcm_round_trips_on_their_grids() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    for (format, bits) in [(WavFormat::Pcm16, 16), (WavFormat::Pcm24, 24)] {
        let l = common::pcm_samples(3000, bits, &mut rng);
        let r = common::pcm_samples(3000, bits, &mut rng);
        let clip = StereoClip::new(l, r, 24_000).unwrap();
        let path = dir.path().join(format!("p{bits}.wav"));
        write_wav(&path, &clip, format).unwrap();
        assert_eq!(load_wav(&path).unwrap(), clip);
    }
}

#[test]
fn full_scale_square_wave_normalizes() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sq.wav");
    let samples: Vec<i32> = (0..200).map(|i| if (i / 20) % 2 == 0 { 32767 } else { -32768 }).collect();
    write_raw(&path, 2, 24_000, 16, &samples);
    let clip = load_wav(&path).unwrap();
    for v in clip.left.iter().chain(&clip.right) {
        assert!(*v == 32767.0 / 32768.0 || *v == -1.0, "{v}");
    }
    assert!(clip.left.contains(&-1.0));
}

#[test]
fn mono_is_duplicated() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mono.wav");
    let samples: Vec<i32> = (0..1000).map(|i| (i * 37 % 2000) - 1000).collect();
    write_raw(&path, 1, 24_000, 16, &samples);
    let clip = load_wav(&path).unwrap();
    assert_eq!(clip.len(), 1000);
    assert_eq!(clip.left, clip.right);
}

#[test]
fn off_rate_file_is_resampled_to_working_rate() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("hi.wav");
    let samples: Vec<i32> = (0..96_000 * 2).map(|i| ((i as f64 * 0.01).sin() * 8000.0) as i32).collect();
    write_raw(&path, 2, 48_000, 16, &samples);
    let clip = load_wav(&path).unwrap();
    assert_eq!(clip.sample_rate_hz, 24_000);
    assert_eq!(clip.len(), 48_000);
}

#[test]
fn bad_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.wav");
    std::fs::write(&junk, b"RIFF\x00\x00\x00\x00WAVEjunk").unwrap();
    assert!(load_wav(&junk).is_err());
    let surround = dir.path().join("six.wav");
    write_raw(&surround, 6, 24_000, 16, &[0; 60]);
    assert!(load_wav(&surround).is_err());
    assert!(load_wav(&dir.path().join("absent.wav")).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(60))]

    #[test]
    fn segmentation_conserves_events(seed in any::<u64>(), seconds in 0.5f64..17.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = (seconds * 24_000.0) as usize;
        let audio = StereoClip::new(vec![0.1; n], vec![-0.1; n], 24_000).unwrap();
        let total_frames = (seconds * 10.0).ceil() as u32;
        let events: Vec<Event> = (0..rng.gen_range(0..40))
            .map(|_| Event::new(rng.gen_range(0..total_frames), rng.gen_range(0..13), rng.gen_range(-180.0..180.0), 1.0))
            .collect();
        let labels = EventList::new(events.clone());
        let segs = segment(&audio, &labels, SEGMENT_S, "rec").unwrap();
        prop_assert_eq!(segs.len(), (n as f64 / 120_000.0).ceil() as usize);
        let mut count = 0;
        for (k, s) in segs.iter().enumerate() {
            prop_assert_eq!(s.audio.len(), 120_000);
            prop_assert_eq!(&s.source_id, &format!("rec#{k}"));
            for e in s.labels.iter() {
                prop_assert!((e.frame as usize) < LABEL_FRAMES);
                let global = e.frame + 50 * k as u32;
                prop_assert!(events.iter().any(|o| o.frame == global && o.class_id == e.class_id));
            }
            count += s.labels.len();
            // audio past the end is zero padding
            let valid = n.saturating_sub(k * 120_000).min(120_000);
            prop_assert!(s.audio.left[..valid].iter().all(|&v| v == 0.1));
            prop_assert!(s.audio.left[valid..].iter().all(|&v| v == 0.0));
        }
        prop_assert_eq!(count, events.len());
    }
}

#[test]
fn synthetic_labels_always_encode() {
    for seed in 0..5 {
        for clip in synth_dataset(40, seed) {
            clip.validate().unwrap();
            encode_task(&clip.labels).unwrap();
            assert!(clip.labels.iter().all(|e| (-90.0..=90.0).contains(&e.azimuth_deg)));
            assert!(clip.labels.iter().all(|e| (0.5..=5.0).contains(&e.distance_m)));
        }
    }
}

#[test]
fn written_dataset_loads_back() {
    let dir = tempfile::tempdir().unwrap();
    let clips = synth_dataset(3, 9);
    let manifest = write_dataset(dir.path(), &clips).unwrap();
    let entries = read_manifest(&manifest).unwrap();
    assert_eq!(entries.len(), 3);
    for (entry, clip) in entries.iter().zip(&clips) {
        let loaded = load_entry(entry).unwrap();
        assert_eq!(loaded.len(), 1);
        assert_eq!(loaded[0].audio, clip.audio);
        assert_eq!(loaded[0].labels.len(), clip.labels.len());
        for (a, b) in loaded[0].labels.iter().zip(clip.labels.iter()) {
            assert_eq!((a.frame, a.class_id), (b.frame, b.class_id));
            assert!((a.azimuth_deg - b.azimuth_deg).abs() < 1e-9);
            assert!((a.distance_m - b.distance_m).abs() < 1e-9);
        }
    }
}
