use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _, Result};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use seld_core::checkpoint::Checkpoint;
use seld_core::dataset::{load_entry, read_manifest, synth_dataset, write_dataset, ClipRecord};
use seld_core::frontend::{write_features, FeatureExtractor};
use seld_core::maccdoa::{decode, read_events_file, read_predictions_file, write_events_file, EventList};
use seld_core::metrics::{score, ScoreConfig};
use seld_core::model::{count_params_and_macs, ModelConfig, SeldModel, Variant};
use seld_core::ssm::bench::{random_lane, scaling};
use seld_core::ssm::{scan, ScanMode};
use seld_core::train::{evaluate, recalibrate, train, PreparedSet, TrainConfig, DECODE_THRESHOLD};
use seld_core::{SeldError, LABEL_FRAMES};

use crate::run::{parent_dir, Context, RunManifest};
use crate::{BenchArgs, CountArgs, EvalArgs, FeaturesArgs, InferArgs, SynthArgs, TrainArgs};

/// Parameter count and MACs reported for the full model.
const REFERENCE_PARAMS: f64 = 76e6;
const REFERENCE_MACS: f64 = 4.63e9;

fn file_name(source_id: &str) -> String {
    source_id.replace(['#', '/', '\\'], "_")
}

/// One entry's clips, or the error that stopped it.
fn load_all(ctx: &Context, manifest: &Path) -> Result<Vec<(PathBuf, seld_core::Result<Vec<ClipRecord>>)>> {
    let entries = read_manifest(manifest).with_context(|| format!("reading manifest {}", manifest.display()))?;
    Ok(ctx.pool.install(|| {
        entries
            .par_iter()
            .map(|e| (e.audio.clone(), load_entry(e)))
            .collect()
    }))
}

pub fn features(ctx: &Context, args: &FeaturesArgs) -> Result<()> {
    let input = ctx.path(&args.input);
    let out = ctx.path(&args.out);
    let mut run = RunManifest::start("features", ctx);
    run.set("input", input.display());
    run.set("output", out.display());
    fs::create_dir_all(&out)?;

    let loaded = load_all(ctx, &input)?;
    if loaded.is_empty() {
        warn!("manifest {} lists no audio files", input.display());
        eprintln!("warning kind=empty_manifest path={}", input.display());
    }
    let fx = FeatureExtractor::default();
    let mut failed = 0usize;
    let mut clips: Vec<ClipRecord> = Vec::new();
    for (path, result) in loaded {
        match result {
            Ok(c) => clips.extend(c),
            Err(e) => {
                failed += 1;
                log::error!("{}: {e}", path.display());
                eprintln!("file_error path={} message=\"{e}\"", path.display());
            }
        }
    }
    let written: Vec<seld_core::Result<(String, String)>> = ctx.pool.install(|| {
        clips
            .par_iter()
            .map(|c| {
                let name = format!("{}.seldfeat", file_name(&c.source_id));
                let feat = fx.extract(&c.audio)?;
                write_features(&out.join(&name), &feat)?;
                Ok((name, c.source_id.clone()))
            })
            .collect()
    });
    let mut listing = String::from("features,source_id\n");
    let mut count = 0usize;
    for (clip, w) in clips.iter().zip(written) {
        match w {
            Ok((name, id)) => {
                count += 1;
                let _ = writeln!(listing, "{name},{id}");
            }
            Err(e) => {
                failed += 1;
                eprintln!("clip_error source_id={} message=\"{e}\"", clip.source_id);
            }
        }
    }
    fs::write(out.join("features.csv"), listing)?;
    run.set("clips_written", count);
    run.set("failures", failed);
    run.write(&out)?;
    println!("clips_written={count}");
    println!("failures={failed}");
    if failed > 0 {
        bail!(SeldError::invalid(format!("{failed} input(s) failed")));
    }
    Ok(())
}

pub fn synth(ctx: &Context, args: &SynthArgs) -> Result<()> {
    let out = ctx.path(&args.out);
    let mut run = RunManifest::start("synth", ctx);
    run.set("clips", args.clips);
    run.set("output", out.display());
    let clips = synth_dataset(args.clips, ctx.seed);
    let manifest = write_dataset(&out, &clips)?;
    let mut all = EventList::default();
    for (k, c) in clips.iter().enumerate() {
        all.extend(c.labels.offset_frames((k * LABEL_FRAMES) as u32));
    }
    write_events_file(&all, &out.join("labels_all.csv"))?;
    run.set("manifest", manifest.display());
    run.write(&out)?;
    println!("manifest={}", manifest.display());
    println!("clips={}", clips.len());
    println!("events={}", all.len());
    Ok(())
}

/// `epoch,steps,mean_loss` rows; one epoch is one pass over the clips.
fn epoch_curve_csv(losses: &[f64], steps_per_epoch: usize) -> String {
    let mut s = String::from("epoch,steps,mean_loss\n");
    for (e, chunk) in losses.chunks(steps_per_epoch.max(1)).enumerate() {
        let mean = chunk.iter().sum::<f64>() / chunk.len() as f64;
        let _ = writeln!(s, "{e},{},{mean:.9}", chunk.len());
    }
    s
}

pub fn train_toy(ctx: &Context, args: &TrainArgs) -> Result<()> {
    let ckpt_path = ctx.path(&args.out);
    let out_dir = parent_dir(&ckpt_path);
    let mut run = RunManifest::start("train-toy", ctx);
    let config = match &args.config {
        Some(p) => {
            let p = ctx.path(p);
            run.set("config", p.display());
            let text = fs::read_to_string(&p).with_context(|| format!("reading config {}", p.display()))?;
            ModelConfig::from_kv(&text)?
        }
        None => {
            run.set("config", "tiny-default");
            ModelConfig::tiny()
        }
    };
    if config.variant != Variant::Tiny {
        bail!(SeldError::invalid("train-toy supports the tiny variant only"));
    }
    let clips = match &args.data {
        Some(m) => {
            let m = ctx.path(m);
            run.set("data", m.display());
            let mut clips = Vec::new();
            for (path, r) in load_all(ctx, &m)? {
                clips.extend(r.with_context(|| format!("loading {}", path.display()))?);
            }
            clips
        }
        None => {
            run.set("data", format!("synthetic:{}", args.clips));
            synth_dataset(args.clips, ctx.seed)
        }
    };
    let set = PreparedSet::from_clips(&clips)?;
    let mut model = SeldModel::<f32>::new(config, ctx.seed)?;

    let mut initial = model.clone();
    recalibrate(&mut initial, &set)?;
    let before = evaluate(&initial, &set, DECODE_THRESHOLD)?;
    drop(initial);

    let cfg = TrainConfig {
        steps: args.steps,
        lr: args.lr,
        batch_size: args.batch_size,
        seed: ctx.seed,
        ..TrainConfig::default()
    };
    let report = train(&mut model, &set, &cfg, |step, loss| {
        if step % 100 == 0 {
            info!("step={step} loss={loss:.6}");
        }
    })?;
    let after = evaluate(&model, &set, DECODE_THRESHOLD)?;
    if !after.loss.is_finite() {
        bail!(SeldError::NonFinite("final loss"));
    }

    fs::create_dir_all(&out_dir)?;
    Checkpoint::from_model(&mut model)
        .save(&ckpt_path)
        .with_context(|| format!("writing checkpoint {}", ckpt_path.display()))?;
    let steps_per_epoch = set.len().div_ceil(cfg.batch_size);
    fs::write(out_dir.join("loss_curve.csv"), epoch_curve_csv(&report.step_losses, steps_per_epoch))?;
    fs::write(
        out_dir.join("step_losses.csv"),
        seld_core::train::loss_curve_csv(&report.step_losses),
    )?;

    let mut summary = String::new();
    let _ = writeln!(summary, "clips={}", set.len());
    let _ = writeln!(summary, "steps={}", cfg.steps);
    let _ = writeln!(summary, "lr={}", cfg.lr);
    let _ = writeln!(summary, "initial_loss={:.9}", before.loss);
    let _ = writeln!(summary, "final_loss={:.9}", after.loss);
    let _ = writeln!(summary, "loss_ratio={:.6}", after.loss / before.loss);
    let _ = writeln!(summary, "train_f20={:.6}", after.report.f20);
    let _ = writeln!(summary, "train_doae_deg={:.6}", after.report.doae_deg);
    let _ = writeln!(summary, "train_rde={:.6}", after.report.rde);
    print!("{summary}");
    for line in summary.lines() {
        if let Some((k, v)) = line.split_once('=') {
            run.set(k, v);
        }
    }
    run.set("checkpoint", ckpt_path.display());
    run.write(&out_dir)?;
    Ok(())
}

pub fn infer(ctx: &Context, args: &InferArgs) -> Result<()> {
    let ckpt_path = ctx.path(&args.ckpt);
    let input = ctx.path(&args.input);
    let out = ctx.path(&args.out);
    let mut run = RunManifest::start("infer", ctx);
    run.set("checkpoint", ckpt_path.display());
    run.set("input", input.display());
    run.set("output", out.display());
    run.set("threshold", args.threshold);

    let ckpt = Checkpoint::load(&ckpt_path).with_context(|| format!("loading checkpoint {}", ckpt_path.display()))?;
    let model: SeldModel<f32> = ckpt.to_model()?;
    let mut clips = Vec::new();
    for (path, r) in load_all(ctx, &input)? {
        clips.extend(r.with_context(|| format!("loading {}", path.display()))?);
    }
    let predicted: Vec<seld_core::Result<EventList>> = ctx.pool.install(|| {
        clips
            .par_iter()
            .map(|c| Ok(decode(&model.predict(&c.audio)?, args.threshold)))
            .collect()
    });
    let mut all = EventList::default();
    let mut index = String::from("clip,first_frame,source_id\n");
    for (k, (clip, p)) in clips.iter().zip(predicted).enumerate() {
        let offset = k * LABEL_FRAMES;
        all.extend(p?.offset_frames(offset as u32));
        let _ = writeln!(index, "{k},{offset},{}", clip.source_id);
    }
    if let Some(dir) = out.parent() {
        fs::create_dir_all(dir)?;
    }
    write_events_file(&all, &out)?;
    let out_dir = parent_dir(&out);
    fs::write(out_dir.join("clip_index.csv"), index)?;
    run.set("clips", clips.len());
    run.set("events", all.len());
    run.write(&out_dir)?;
    println!("clips={}", clips.len());
    println!("events={}", all.len());
    Ok(())
}

pub fn eval(ctx: &Context, args: &EvalArgs) -> Result<()> {
    let pred_path = ctx.path(&args.pred);
    let ref_path = ctx.path(&args.reference);
    let mut run = RunManifest::start("eval", ctx);
    run.set("pred", pred_path.display());
    run.set("ref", ref_path.display());
    run.set("fold_frontback", args.fold_frontback);
    let pred = read_predictions_file(&pred_path).with_context(|| format!("reading {}", pred_path.display()))?;
    let reference = read_events_file(&ref_path).with_context(|| format!("reading {}", ref_path.display()))?;
    let cfg = ScoreConfig {
        angle_threshold_deg: args.threshold_deg,
        fold_frontback: args.fold_frontback,
        ..ScoreConfig::default()
    };
    let report = score(&pred, &reference, &cfg);
    let text = report.to_key_value();
    print!("{text}");
    let dir = match &args.out {
        Some(o) => {
            let o = ctx.path(o);
            fs::create_dir_all(&o)?;
            fs::write(o.join("metrics.txt"), &text)?;
            fs::write(o.join("metrics_per_class.csv"), report.per_class_csv())?;
            run.set("output", o.display());
            o
        }
        None => ctx.workdir.clone(),
    };
    run.set("f20", format!("{:.6}", report.f20));
    run.write(&dir)?;
    Ok(())
}

fn parse_lengths(s: &str) -> Result<Vec<usize>> {
    let (lo, hi) = s
        .split_once("..")
        .ok_or_else(|| SeldError::invalid(format!("--lengths expects MIN..MAX, got {s}")))?;
    let lo: usize = lo.trim().parse().map_err(|_| SeldError::invalid("--lengths: bad MIN"))?;
    let hi: usize = hi.trim().parse().map_err(|_| SeldError::invalid("--lengths: bad MAX"))?;
    if lo == 0 || hi < lo {
        bail!(SeldError::invalid("--lengths needs 0 < MIN <= MAX"));
    }
    let mut out = Vec::new();
    let mut l = lo;
    while l <= hi {
        out.push(l);
        l *= 2;
    }
    Ok(out)
}

pub fn bench_scan(ctx: &Context, args: &BenchArgs) -> Result<()> {
    let lengths = parse_lengths(&args.lengths)?;
    if args.chunk == 0 || args.d_state == 0 {
        bail!(SeldError::invalid("--chunk and --d-state must be positive"));
    }
    let mut run = RunManifest::start("bench-scan", ctx);
    run.set("lengths", &args.lengths);
    run.set("d_state", args.d_state);
    run.set("chunk", args.chunk);
    run.set("runs", args.runs);
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let mut worst_diff = 0.0f64;
    let mut diffs = Vec::with_capacity(lengths.len());
    for &len in &lengths {
        let (params, x) = random_lane::<f32>(len, args.d_state, &mut rng);
        let h0 = vec![0.0f32; args.d_state];
        let seq = scan(&params, &x, &h0, ScanMode::Sequential, false)?;
        let chk = scan(&params, &x, &h0, ScanMode::Chunked(args.chunk), false)?;
        let diff = seq
            .y
            .iter()
            .zip(&chk.y)
            .map(|(a, b)| (a - b).abs() as f64)
            .fold(0.0, f64::max);
        worst_diff = worst_diff.max(diff);
        diffs.push(diff);
    }
    let min_ns = 10_000_000;
    let seq = scaling::<f32>(&lengths, args.d_state, ScanMode::Sequential, args.runs, min_ns, &mut rng)?;
    let chk = scaling::<f32>(&lengths, args.d_state, ScanMode::Chunked(args.chunk), args.runs, min_ns, &mut rng)?;
    let mut table = String::from(
        "length,seq_ns_per_step,seq_steps_per_s,seq_ratio,chunked_ns_per_step,chunked_steps_per_s,chunked_ratio,max_abs_diff_f32\n",
    );
    let ratio = |r: Option<f64>| r.map(|v| format!("{v:.3}")).unwrap_or_default();
    for ((s, c), diff) in seq.iter().zip(&chk).zip(&diffs) {
        let _ = writeln!(
            table,
            "{},{:.3},{:.0},{},{:.3},{:.0},{},{diff:.3e}",
            s.len,
            s.ns_per_step,
            1e9 / s.ns_per_step,
            ratio(s.ratio),
            c.ns_per_step,
            1e9 / c.ns_per_step,
            ratio(c.ratio),
        );
    }
    print!("{table}");
    println!("max_abs_diff_f32={worst_diff:.3e}");
    let dir = match &args.out {
        Some(o) => {
            let o = ctx.path(o);
            fs::create_dir_all(&o)?;
            fs::write(o.join("bench_scan.csv"), &table)?;
            run.set("output", o.display());
            o
        }
        None => ctx.workdir.clone(),
    };
    run.set("max_abs_diff_f32", format!("{worst_diff:.3e}"));
    run.write(&dir)?;
    Ok(())
}

pub fn count(ctx: &Context, args: &CountArgs) -> Result<()> {
    let mut run = RunManifest::start("count", ctx);
    let config = match &args.config {
        Some(p) => {
            let p = ctx.path(p);
            run.set("config", p.display());
            let text = fs::read_to_string(&p).with_context(|| format!("reading config {}", p.display()))?;
            ModelConfig::from_kv(&text)?
        }
        None => {
            run.set("variant", &args.variant);
            match args.variant.as_str() {
                "tiny" => ModelConfig::tiny(),
                "full" => ModelConfig::full(),
                v => bail!(SeldError::invalid(format!("unknown variant {v}; expected tiny or full"))),
            }
        }
    };
    config.validate()?;
    let c = count_params_and_macs(&config);
    let mut s = String::new();
    let _ = writeln!(s, "params={}", c.params);
    let _ = writeln!(s, "macs={}", c.macs);
    let _ = writeln!(s, "encoder_params={}", c.encoder_params);
    let _ = writeln!(s, "encoder_macs={}", c.encoder_macs);
    let _ = writeln!(s, "decoder_params={}", c.params - c.encoder_params);
    let _ = writeln!(s, "decoder_macs={}", c.macs - c.encoder_macs);
    let _ = writeln!(s, "reference_params={REFERENCE_PARAMS:.0}");
    let _ = writeln!(s, "reference_macs={REFERENCE_MACS:.0}");
    let _ = writeln!(s, "params_rel_diff={:.4}", c.params as f64 / REFERENCE_PARAMS - 1.0);
    let _ = writeln!(s, "macs_rel_diff={:.4}", c.macs as f64 / REFERENCE_MACS - 1.0);
    print!("{s}");
    for line in s.lines() {
        if let Some((k, v)) = line.split_once('=') {
            run.set(k, v);
        }
    }
    run.write(&ctx.workdir)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lengths_double() {
        assert_eq!(parse_lengths("1024..8192").unwrap(), vec![1024, 2048, 4096, 8192]);
        assert_eq!(parse_lengths("5..5").unwrap(), vec![5]);
        assert!(parse_lengths("8..4").is_err());
        assert!(parse_lengths("x").is_err());
    }

    #[test]
    fn epoch_curve_groups_steps() {
        let csv = epoch_curve_csv(&[1.0, 3.0, 2.0, 2.0, 5.0], 2);
        assert_eq!(csv, "epoch,steps,mean_loss\n0,2,2.000000000\n1,2,2.000000000\n2,1,5.000000000\n");
    }

    #[test]
    fn ids_become_file_names() {
        assert_eq!(file_name("clip_0001#2"), "clip_0001_2");
    }
}
