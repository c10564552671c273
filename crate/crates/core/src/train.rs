//! Fixed-step trainer for the tiny configuration: Adam on the
//! permutation-invariant loss over a cached feature set.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::ClipRecord;
use crate::error::{Result, SeldError};
use crate::frontend::{FeatureExtractor, FeatureTensor};
use crate::loss::{pit_loss, pit_loss_backward};
use crate::maccdoa::{decode, encode, EventList, MaccdoaTensor, ACTIVITY_THRESHOLD};
use crate::metrics::{score_counts, Counts, MetricsReport, ScoreConfig};
use crate::model::SeldModel;
use crate::nn::{Mode, Module};
use crate::num::Real;

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Update every trainable parameter from its accumulated gradient.
    pub fn step(&mut self, model: &mut impl Module<T>) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 / (1.0 - b1.powi(self.step));
        let c2 = 1.0 / (1.0 - b2.powi(self.step));
        let (lr, eps) = (T::of(self.lr), T::of(self.eps));
        let (b1t, b2t) = (T::of(b1), T::of(b2));
        let (c1t, c2t) = (T::of(c1), T::of(c2));
        let mut idx = 0;
        let (m_all, v_all) = (&mut self.m, &mut self.v);
        model.visit("", &mut |_, p| {
            if !p.trainable {
                return;
            }
            if m_all.len() == idx {
                m_all.push(vec![T::zero(); p.len()]);
                v_all.push(vec![T::zero(); p.len()]);
            }
            let (m, v) = (&mut m_all[idx], &mut v_all[idx]);
            for i in 0..p.len() {
                let g = p.grad[i];
                m[i] = b1t * m[i] + (T::one() - b1t) * g;
                v[i] = b2t * v[i] + (T::one() - b2t) * g * g;
                p.value[i] -= lr * (m[i] * c1t) / ((v[i] * c2t).sqrt() + eps);
            }
            idx += 1;
        });
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Average batch statistics over the training set once training ends.
    pub recalibrate_norms: bool,
    /// From this step on, normalization statistics are re-estimated over the
    /// training set and then frozen, so training sees the inference-time
    /// normalization.
    pub freeze_norms_at: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            lr: 1e-4,
            batch_size: 1,
            seed: 0,
            recalibrate_norms: true,
            freeze_norms_at: Some(0),
        }
    }
}

/// Features and encoded targets for a set of clips.
pub struct PreparedSet {
    pub features: Vec<FeatureTensor>,
    pub labels: Vec<EventList>,
    pub targets: Vec<MaccdoaTensor>,
}

impl PreparedSet {
    pub fn from_clips(clips: &[ClipRecord]) -> Result<Self> {
        let fx = FeatureExtractor::default();
        let mut features = Vec::with_capacity(clips.len());
        let mut targets = Vec::with_capacity(clips.len());
        for c in clips {
            features.push(fx.extract(&c.audio)?);
            targets.push(crate::maccdoa::encode_task(&c.labels)?);
        }
        Ok(PreparedSet {
            features,
            labels: clips.iter().map(|c| c.labels.clone()).collect(),
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

fn to_real<T: Real>(f: &FeatureTensor) -> Vec<T> {
    f.data.iter().map(|&v| T::of(v as f64)).collect()
}

/// Mean eval-mode loss and detection scores over a prepared set.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub loss: f64,
    pub report: MetricsReport,
    pub predictions: Vec<EventList>,
}

pub fn evaluate<T: Real>(model: &SeldModel<T>, set: &PreparedSet, threshold: f64) -> Result<Evaluation> {
    let cfg = ScoreConfig::default();
    let mut total = Counts::default();
    let mut per_class: Vec<Counts> = Vec::new();
    let mut loss = 0.0;
    let mut predictions = Vec::with_capacity(set.len());
    for i in 0..set.len() {
        let pred = model.predict_features(&set.features[i])?;
        loss += pit_loss(&pred, &set.targets[i])?.total;
        let events = decode(&pred, threshold);
        let counts = score_counts(&events, &set.labels[i], &cfg);
        if per_class.len() < counts.len() {
            per_class.resize(counts.len(), Counts::default());
        }
        for (acc, c) in per_class.iter_mut().zip(&counts) {
            acc.merge(c);
            total.merge(c);
        }
        predictions.push(events);
    }
    Ok(Evaluation {
        loss: loss / set.len().max(1) as f64,
        report: MetricsReport::from_counts(&total, per_class, cfg.angle_threshold_deg),
        predictions,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean train-mode loss of each step's batch.
    pub step_losses: Vec<f64>,
}

/// Replace running statistics with averages over the whole set.
pub fn recalibrate<T: Real>(model: &mut SeldModel<T>, set: &PreparedSet) -> Result<()> {
    let clips: Vec<Vec<T>> = set.features.iter().map(to_real).collect();
    let refs: Vec<&[T]> = clips.iter().map(|c| c.as_slice()).collect();
    let frames = set.features.first().map(|f| f.frames).unwrap_or(0);
    model.recalibrate_norms(&refs, frames)
}

/// Train for `cfg.steps` steps; `on_step(step, loss)` is called after each.
pub fn train<T: Real>(
    model: &mut SeldModel<T>,
    set: &PreparedSet,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    if set.is_empty() {
        return Err(SeldError::EmptyInput("training set"));
    }
    if cfg.batch_size == 0 {
        return Err(SeldError::invalid("batch size must be positive"));
    }
    let frames = set.features[0].frames;
    if set.features.iter().any(|f| f.frames != frames) {
        return Err(SeldError::shape("training clips must share a frame count"));
    }
    let clips: Vec<Vec<T>> = set.features.iter().map(to_real).collect();
    let per_clip = clips[0].len();
    let mcfg = model.config.clone();
    let out_per_clip = mcfg.label_frames * mcfg.n_outputs();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut adam = Adam::new(cfg.lr);
    let mut step_losses = Vec::with_capacity(cfg.steps);
    let mut mode = Mode::Train;
    for step in 0..cfg.steps {
        if cfg.freeze_norms_at == Some(step) {
            recalibrate(model, set)?;
            mode = Mode::Eval;
        }
        let mut batch_idx = Vec::with_capacity(cfg.batch_size);
        while batch_idx.len() < cfg.batch_size.min(set.len()) {
            if order.is_empty() {
                order = (0..set.len()).collect();
                order.shuffle(&mut rng);
                order.reverse();
            }
            batch_idx.push(order.pop().unwrap());
        }
        let b = batch_idx.len();
        let mut x = Vec::with_capacity(b * per_clip);
        for &i in &batch_idx {
            x.extend_from_slice(&clips[i]);
        }
        model.zero_grad();
        let cache = model.forward(&x, b, frames, mode)?;
        let mut d_out = Vec::with_capacity(b * out_per_clip);
        let mut loss = 0.0;
        for (k, &i) in batch_idx.iter().enumerate() {
            let pred = model.to_tensor(&cache.output()[k * out_per_clip..(k + 1) * out_per_clip])?;
            let l = pit_loss(&pred, &set.targets[i])?;
            loss += l.total / b as f64;
            let g = pit_loss_backward(&pred, &set.targets[i], &l.chosen_permutation)?;
            d_out.extend(g.data.iter().map(|&v| T::of(v / b as f64)));
        }
        if !loss.is_finite() {
            return Err(SeldError::NonFinite("training loss"));
        }
        model.backward(&cache, &d_out)?;
        adam.step(model);
        model.update_running_stats(&cache);
        step_losses.push(loss);
        on_step(step, loss);
    }
    if cfg.recalibrate_norms && mode == Mode::Train {
        recalibrate(model, set)?;
    }
    Ok(TrainReport { step_losses })
}

/// Loss curve as `step,loss` CSV.
pub fn loss_curve_csv(losses: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        s.push_str(&format!("{i},{l:.9}\n"));
    }
    s
}

/// Encode events for a model's geometry.
pub fn target_for<T: Real>(model: &SeldModel<T>, events: &EventList) -> Result<MaccdoaTensor> {
    let c = &model.config;
    encode(events, c.label_frames, c.n_tracks, c.n_classes)
}

/// Threshold used for decoding predictions.
pub const DECODE_THRESHOLD: f64 = ACTIVITY_THRESHOLD;
