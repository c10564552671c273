//! WAV / label ingestion, fixed-length segmentation, channel-swap
//! augmentation and a deterministic synthetic dataset.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SeldError};
use crate::frontend::{resample, StereoClip};
use crate::maccdoa::{read_events_file, write_events_file, Event, EventList};
use crate::{CLIP_SAMPLES, LABEL_FRAMES, N_CLASSES, SAMPLE_RATE};

/// Label resolution: one frame per 100 ms.
pub const LABEL_HOP_S: f64 = 0.1;
/// Audio samples per label frame at the working rate.
pub const SAMPLES_PER_LABEL_FRAME: usize = 2400;
/// Segment length used throughout.
pub const SEGMENT_S: f64 = 5.0;

/// One 5 s training/evaluation example.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipRecord {
    pub audio: StereoClip,
    pub labels: EventList,
    pub source_id: String,
}

impl ClipRecord {
    pub fn validate(&self) -> Result<()> {
        self.audio.validate()?;
        if self.audio.len() != CLIP_SAMPLES || self.audio.sample_rate_hz != SAMPLE_RATE {
            return Err(SeldError::shape(format!(
                "clip {} has {} samples at {} Hz",
                self.source_id,
                self.audio.len(),
                self.audio.sample_rate_hz
            )));
        }
        self.labels.validate(N_CLASSES, Some(LABEL_FRAMES as u32))
    }
}

/// Storage format for [`write_wav`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavFormat {
    Pcm16,
    Pcm24,
    Float32,
}

fn malformed(path: &Path, reason: impl Into<String>) -> SeldError {
    SeldError::Malformed {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Read a PCM (16/24/32-bit integer) or float32 WAV as a stereo clip at the
/// working rate. Integers are scaled by `2^(bits-1)`; mono is duplicated.
pub fn load_wav(path: &Path) -> Result<StereoClip> {
    let reader = WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => SeldError::Io(io),
        hound::Error::Unsupported => SeldError::UnsupportedFormat(path.display().to_string()),
        other => malformed(path, other.to_string()),
    })?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(malformed(path, "zero channels"));
    }
    if channels > 2 {
        return Err(SeldError::UnsupportedFormat(format!("{}: {channels} channels", path.display())));
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| malformed(path, e.to_string()))?,
        (SampleFormat::Int, bits @ (8 | 16 | 24 | 32)) => {
            let scale = (1u64 << (bits - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| malformed(path, e.to_string()))?
        }
        (fmt, bits) => {
            return Err(SeldError::UnsupportedFormat(format!(
                "{}: {fmt:?} {bits}-bit",
                path.display()
            )))
        }
    };
    if samples.is_empty() {
        return Err(SeldError::EmptyInput("wav file"));
    }
    let (left, right) = if channels == 1 {
        (samples.clone(), samples)
    } else {
        let left = samples.iter().step_by(2).copied().collect();
        let right = samples.iter().skip(1).step_by(2).copied().collect();
        (left, right)
    };
    let clip = StereoClip::new(left, right, spec.sample_rate)?;
    if clip.sample_rate_hz == SAMPLE_RATE {
        Ok(clip)
    } else {
        resample(&clip, SAMPLE_RATE)
    }
}

/// Write a stereo WAV. Integer formats clamp to `[-1, 1)` and round.
pub fn write_wav(path: &Path, clip: &StereoClip, format: WavFormat) -> Result<()> {
    clip.validate()?;
    let (bits, sample_format) = match format {
        WavFormat::Pcm16 => (16, SampleFormat::Int),
        WavFormat::Pcm24 => (24, SampleFormat::Int),
        WavFormat::Float32 => (32, SampleFormat::Float),
    };
    let spec = WavSpec {
        channels: 2,
        sample_rate: clip.sample_rate_hz,
        bits_per_sample: bits,
        sample_format,
    };
    let mut w = WavWriter::create(path, spec)?;
    for (&l, &r) in clip.left.iter().zip(&clip.right) {
        for v in [l, r] {
            match format {
                WavFormat::Float32 => w.write_sample(v as f32)?,
                WavFormat::Pcm16 | WavFormat::Pcm24 => {
                    let scale = (1i64 << (bits - 1)) as f64;
                    let q = (v * scale).round().clamp(-scale, scale - 1.0) as i32;
                    w.write_sample(q)?
                }
            }
        }
    }
    w.finalize()?;
    Ok(())
}

/// Cut a recording into non-overlapping `seg_s` windows. The tail is
/// zero-padded; events are assigned by frame index and re-indexed locally.
/// Segments are added past the audio end if labels reach further, so no
/// event is dropped.
pub fn segment(audio: &StereoClip, labels: &EventList, seg_s: f64, source_id: &str) -> Result<Vec<ClipRecord>> {
    if !(seg_s > 0.0) {
        return Err(SeldError::invalid("segment length must be positive"));
    }
    let audio = if audio.sample_rate_hz == SAMPLE_RATE || audio.is_empty() {
        audio.clone()
    } else {
        resample(audio, SAMPLE_RATE)?
    };
    let seg_samples = (seg_s * SAMPLE_RATE as f64).round() as usize;
    let seg_frames = (seg_s / LABEL_HOP_S).round() as u32;
    let by_audio = audio.len().div_ceil(seg_samples);
    let by_labels = labels.iter().map(|e| (e.frame / seg_frames) as usize + 1).max().unwrap_or(0);
    let n = by_audio.max(by_labels);
    let mut buckets: Vec<Vec<Event>> = vec![Vec::new(); n];
    for e in labels.iter() {
        let k = (e.frame / seg_frames) as usize;
        buckets[k].push(Event {
            frame: e.frame - k as u32 * seg_frames,
            ..e.clone()
        });
    }
    let take = |ch: &[f64], k: usize| {
        let mut out = vec![0.0; seg_samples];
        let start = (k * seg_samples).min(ch.len());
        let end = ((k + 1) * seg_samples).min(ch.len());
        out[..end - start].copy_from_slice(&ch[start..end]);
        out
    };
    Ok(buckets
        .into_iter()
        .enumerate()
        .map(|(k, events)| ClipRecord {
            audio: StereoClip {
                left: take(&audio.left, k),
                right: take(&audio.right, k),
                sample_rate_hz: SAMPLE_RATE,
            },
            labels: EventList::new(events),
            source_id: format!("{source_id}#{k}"),
        })
        .collect())
}

/// Channel-swap augmentation on the audio side: exchange L and R.
pub fn acs_audio(clip: &StereoClip) -> StereoClip {
    clip.swapped()
}

/// Constant-power pan gains `(g_left, g_right)` for an azimuth folded into
/// `[-90, 90]`; +90 is fully left.
pub fn pan_gains(azimuth_deg: f64) -> (f64, f64) {
    let az = crate::metrics::fold_frontback(azimuth_deg);
    let p = (az + 90.0) / 180.0;
    ((p * PI / 2.0).sin(), (p * PI / 2.0).cos())
}

/// Fundamental of the tone used for `class_id`.
pub fn class_frequency_hz(class_id: usize) -> f64 {
    // spaced by ~a minor third so harmonics of neighbours rarely coincide
    250.0 * 1.19f64.powi(class_id as i32)
}

/// Parameters of one synthetic event.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthEvent {
    pub class_id: usize,
    pub azimuth_deg: f64,
    pub distance_m: f64,
    pub onset_frame: u32,
    pub duration_frames: u32,
}

const SYNTH_LEVEL: f64 = 0.25;
const RAMP_SAMPLES: usize = 240;

/// Render one burst into `left`/`right`: a class-indexed harmonic tone with
/// a little noise, amplitude `SYNTH_LEVEL / distance`, panned by azimuth.
fn render_event(ev: &SynthEvent, rng: &mut ChaCha8Rng, left: &mut [f64], right: &mut [f64]) {
    let (gl, gr) = pan_gains(ev.azimuth_deg);
    let amp = SYNTH_LEVEL / ev.distance_m;
    let f0 = class_frequency_hz(ev.class_id);
    let phase: f64 = rng.gen_range(0.0..2.0 * PI);
    let start = ev.onset_frame as usize * SAMPLES_PER_LABEL_FRAME;
    let len = ev.duration_frames as usize * SAMPLES_PER_LABEL_FRAME;
    for n in 0..len {
        let i = start + n;
        if i >= left.len() {
            break;
        }
        let ramp = ((n.min(len - 1 - n) as f64) / RAMP_SAMPLES as f64).min(1.0);
        let t = n as f64 / SAMPLE_RATE as f64;
        let w = 2.0 * PI * f0 * t + phase;
        let tone = w.sin() + 0.5 * (2.0 * w).sin() + 0.25 * (3.0 * w).sin();
        let noise: f64 = rng.gen_range(-1.0..1.0);
        let s = amp * ramp * (0.57 * tone + 0.05 * noise);
        left[i] += gl * s;
        right[i] += gr * s;
    }
}

/// Draw the event layout of one clip: 1 to 3 events with distinct classes.
pub fn draw_events(rng: &mut ChaCha8Rng) -> Vec<SynthEvent> {
    let n = rng.gen_range(1..=3);
    let mut classes: Vec<usize> = Vec::with_capacity(n);
    while classes.len() < n {
        let c = rng.gen_range(0..N_CLASSES);
        if !classes.contains(&c) {
            classes.push(c);
        }
    }
    classes
        .into_iter()
        .map(|class_id| {
            let duration_frames = rng.gen_range(10..=30);
            let onset_frame = rng.gen_range(0..=(LABEL_FRAMES as u32 - duration_frames));
            SynthEvent {
                class_id,
                azimuth_deg: rng.gen_range(-90.0..=90.0),
                distance_m: rng.gen_range(0.5..=5.0),
                onset_frame,
                duration_frames,
            }
        })
        .collect()
}

fn clip_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Clip `index` of the synthetic dataset for `seed`. Independent of every
/// other clip, so clips can be generated in any order or in parallel.
pub fn synth_clip(seed: u64, index: usize) -> ClipRecord {
    let mut rng = clip_rng(seed, index);
    let events = draw_events(&mut rng);
    let mut left = vec![0.0; CLIP_SAMPLES];
    let mut right = vec![0.0; CLIP_SAMPLES];
    for ev in &events {
        render_event(ev, &mut rng, &mut left, &mut right);
    }
    // keep samples exactly representable in a float32 WAV
    for v in left.iter_mut().chain(right.iter_mut()) {
        *v = *v as f32 as f64;
    }
    let labels = events
        .iter()
        .flat_map(|ev| {
            (ev.onset_frame..ev.onset_frame + ev.duration_frames)
                .map(move |f| Event::new(f, ev.class_id, ev.azimuth_deg, ev.distance_m))
        })
        .collect();
    ClipRecord {
        audio: StereoClip {
            left,
            right,
            sample_rate_hz: SAMPLE_RATE,
        },
        labels,
        source_id: format!("synth-{seed}-{index:04}"),
    }
}

pub fn synth_dataset(n_clips: usize, seed: u64) -> Vec<ClipRecord> {
    (0..n_clips).map(|i| synth_clip(seed, i)).collect()
}

/// One manifest line: audio path and optional label CSV.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub audio: PathBuf,
    pub labels: Option<PathBuf>,
}

/// Parse `audio_path[,label_path]` lines. Relative paths resolve against
/// `base`. Blank lines and `#` comments are skipped.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let resolve = |p: &str| {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split(',').map(str::trim);
        let audio = parts.next().filter(|s| !s.is_empty());
        let labels = parts.next().filter(|s| !s.is_empty());
        if parts.next().is_some() {
            return Err(SeldError::invalid(format!("manifest line {}: too many fields", i + 1)));
        }
        let audio = audio.ok_or_else(|| SeldError::invalid(format!("manifest line {}: missing audio path", i + 1)))?;
        out.push(ManifestEntry {
            audio: resolve(audio),
            labels: labels.map(resolve),
        });
    }
    Ok(out)
}

/// Read a manifest file; relative entries resolve against its directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path)?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new(".")))
}

/// Load and segment one manifest entry.
pub fn load_entry(entry: &ManifestEntry) -> Result<Vec<ClipRecord>> {
    let audio = load_wav(&entry.audio)?;
    let labels = match &entry.labels {
        Some(p) => read_events_file(p)?,
        None => EventList::default(),
    };
    let id = entry
        .audio
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    segment(&audio, &labels, SEGMENT_S, &id)
}

/// Write clips as `clip_NNNN.wav` (float32) + `clip_NNNN.csv` and a
/// `manifest.csv` listing them. Returns the manifest path.
pub fn write_dataset(dir: &Path, clips: &[ClipRecord]) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for (i, clip) in clips.iter().enumerate() {
        let wav = format!("clip_{i:04}.wav");
        let csv = format!("clip_{i:04}.csv");
        write_wav(&dir.join(&wav), &clip.audio, WavFormat::Float32)?;
        write_events_file(&clip.labels, &dir.join(&csv))?;
        manifest.push_str(&format!("{wav},{csv}\n"));
    }
    let path = dir.join("manifest.csv");
    fs::write(&path, manifest)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn energy(x: &[f64]) -> f64 {
        x.iter().map(|v| v * v).sum()
    }

    #[test]
    fn pan_law() {
        let (l, r) = pan_gains(0.0);
        assert!((l - r).abs() < 1e-15);
        let (l, r) = pan_gains(-90.0);
        assert!(l.abs() < 1e-15 && (r - 1.0).abs() < 1e-15);
        let (l, r) = pan_gains(37.0);
        assert!((l * l + r * r - 1.0).abs() < 1e-15);
    }

    #[test]
    fn centred_event_has_equal_energy() {
        let mut rng = clip_rng(1, 0);
        let ev = SynthEvent {
            class_id: 3,
            azimuth_deg: 0.0,
            distance_m: 1.0,
            onset_frame: 5,
            duration_frames: 10,
        };
        let (mut l, mut r) = (vec![0.0; CLIP_SAMPLES], vec![0.0; CLIP_SAMPLES]);
        render_event(&ev, &mut rng, &mut l, &mut r);
        let (el, er) = (energy(&l), energy(&r));
        assert!(((el - er) / el).abs() < 1e-6);
    }

    #[test]
    fn hard_right_event() {
        let mut rng = clip_rng(1, 0);
        let ev = SynthEvent {
            class_id: 0,
            azimuth_deg: -90.0,
            distance_m: 2.0,
            onset_frame: 0,
            duration_frames: 20,
        };
        let (mut l, mut r) = (vec![0.0; CLIP_SAMPLES], vec![0.0; CLIP_SAMPLES]);
        render_event(&ev, &mut rng, &mut l, &mut r);
        assert!(energy(&r) >= 100.0 * energy(&l));
    }

    #[test]
    fn synth_is_deterministic_and_valid() {
        let a = synth_dataset(4, 7);
        let b = synth_dataset(4, 7);
        assert_eq!(a, b);
        assert_ne!(a, synth_dataset(4, 8));
        for c in &a {
            c.validate().unwrap();
            crate::maccdoa::encode_task(&c.labels).unwrap();
            assert!(!c.labels.is_empty());
        }
        assert_eq!(synth_clip(7, 2), a[2]);
    }

    #[test]
    fn segmentation_arithmetic() {
        let audio = StereoClip::silence(12 * SAMPLE_RATE as usize, SAMPLE_RATE);
        let labels = EventList::new(vec![Event::new(57, 2, 10.0, 1.0), Event::new(3, 1, 0.0, 2.0)]);
        let segs = segment(&audio, &labels, 5.0, "rec").unwrap();
        assert_eq!(segs.len(), 3);
        assert!(segs.iter().all(|s| s.audio.len() == CLIP_SAMPLES));
        assert_eq!(segs[1].labels.events()[0].frame, 7);
        assert_eq!(segs[0].labels.len(), 1);
        assert!(segs[2].labels.is_empty());
        assert_eq!(segs.iter().map(|s| s.labels.len()).sum::<usize>(), 2);
    }

    #[test]
    fn manifest_parsing() {
        let m = parse_manifest("# c\na.wav,a.csv\n\n/abs/b.wav\n", Path::new("/data")).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m[0].audio, PathBuf::from("/data/a.wav"));
        assert_eq!(m[0].labels, Some(PathBuf::from("/data/a.csv")));
        assert_eq!(m[1].audio, PathBuf::from("/abs/b.wav"));
        assert_eq!(m[1].labels, None);
        assert!(parse_manifest("a,b,c\n", Path::new(".")).is_err());
    }

    #[test]
    fn acs_is_an_involution() {
        let c = synth_clip(3, 0);
        assert_eq!(acs_audio(&acs_audio(&c.audio)), c.audio);
    }
}
