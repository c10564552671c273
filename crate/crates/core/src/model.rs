//! The full network: CNN14-style encoder, BiMamba2DAC decoder stack,
//! temporal module (interpolation + frame aggregation) and Multi-ACCDOA head.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bimamba::{freq_mean, BiMamba2dacBlock, BlockCache, BlockConfig};
use crate::error::{Result, SeldError};
use crate::frontend::{extract_features, FeatureTensor, StereoClip, FEATURE_CHANNELS};
use crate::maccdoa::MaccdoaTensor;
use crate::nn::{
    max_pool_backward, max_pool_forward, relu_backward, relu_inplace, silu_backward, silu_vec, BatchNorm,
    BatchNormCache, BnStatAccumulator, Conv3x3, ConvCache, Linear, MaxPoolCache, Mode, Module, Param,
};
use crate::num::{matmul, Real};
use crate::ssm::ScanMode;
use crate::{LABEL_FRAMES, N_CLASSES, N_TRACKS};

/// Feature frames of a 5 s clip.
pub const CLIP_FEATURE_FRAMES: usize = 251;
/// Frames after time interpolation; aggregated in groups down to label rate.
pub const INTERP_FRAMES: usize = 250;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Tiny,
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub n_classes: usize,
    pub n_tracks: usize,
    pub in_channels: usize,
    pub mels: usize,
    pub encoder_channels: Vec<usize>,
    pub time_pool: Vec<usize>,
    pub freq_pool: Vec<usize>,
    pub block: BlockConfig,
    pub head_hidden: usize,
    pub interp_frames: usize,
    pub label_frames: usize,
}

impl ModelConfig {
    /// Desk-scale trainable configuration.
    pub fn tiny() -> Self {
        ModelConfig {
            variant: Variant::Tiny,
            n_classes: N_CLASSES,
            n_tracks: N_TRACKS,
            in_channels: FEATURE_CHANNELS,
            mels: 64,
            encoder_channels: vec![16, 32, 64, 64, 64, 64],
            time_pool: vec![2, 2, 2, 2, 1, 1],
            freq_pool: vec![2, 2, 2, 2, 4, 1],
            block: BlockConfig::new(96),
            head_hidden: 128,
            interp_frames: INTERP_FRAMES,
            label_frames: LABEL_FRAMES,
        }
    }

    /// Forward-only configuration at the published scale.
    pub fn full() -> Self {
        ModelConfig {
            variant: Variant::Full,
            encoder_channels: vec![64, 128, 256, 512, 1024, 2048],
            block: BlockConfig::new(256),
            head_hidden: 256,
            ..Self::tiny()
        }
    }

    pub fn d_enc(&self) -> usize {
        *self.encoder_channels.last().unwrap_or(&0)
    }

    pub fn n_outputs(&self) -> usize {
        self.n_tracks * self.n_classes * 3
    }

    /// Encoder output `(T', F')` for `frames x mels` input.
    pub fn encoder_output_dims(&self, frames: usize) -> (usize, usize) {
        let t = self.time_pool.iter().fold(frames, |t, &p| t.div_ceil(p));
        let f = self.freq_pool.iter().fold(self.mels, |f, &p| f.div_ceil(p));
        (t, f)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.encoder_channels.len();
        if n == 0 || self.time_pool.len() != n || self.freq_pool.len() != n {
            return Err(SeldError::invalid("model config: encoder stage lists must have equal, non-zero length"));
        }
        let sizes = [
            self.n_classes,
            self.n_tracks,
            self.in_channels,
            self.mels,
            self.head_hidden,
            self.label_frames,
        ];
        if sizes.contains(&0)
            || self.encoder_channels.contains(&0)
            || self.time_pool.contains(&0)
            || self.freq_pool.contains(&0)
        {
            return Err(SeldError::invalid("model config: sizes must be positive"));
        }
        if !self.interp_frames.is_multiple_of(self.label_frames) {
            return Err(SeldError::invalid("model config: interp_frames must be a multiple of label_frames"));
        }
        self.block.validate()
    }

    /// Flat `key=value` lines; list values are comma-separated.
    pub fn to_kv(&self) -> String {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let b = &self.block;
        let chunk = match b.scan_mode {
            ScanMode::Sequential => 0,
            ScanMode::Chunked(c) => c,
        };
        let mut s = String::new();
        let variant = match self.variant {
            Variant::Tiny => "tiny",
            Variant::Full => "full",
        };
        let _ = writeln!(s, "variant={variant}");
        let _ = writeln!(s, "n_classes={}", self.n_classes);
        let _ = writeln!(s, "n_tracks={}", self.n_tracks);
        let _ = writeln!(s, "in_channels={}", self.in_channels);
        let _ = writeln!(s, "mels={}", self.mels);
        let _ = writeln!(s, "encoder_channels={}", list(&self.encoder_channels));
        let _ = writeln!(s, "time_pool={}", list(&self.time_pool));
        let _ = writeln!(s, "freq_pool={}", list(&self.freq_pool));
        let _ = writeln!(s, "d_model={}", b.d_model);
        let _ = writeln!(s, "d_state={}", b.d_state);
        let _ = writeln!(s, "d_conv={}", b.d_conv);
        let _ = writeln!(s, "expand={}", b.expand);
        let _ = writeln!(s, "n_blocks={}", b.n_blocks);
        let _ = writeln!(s, "dt_rank={}", b.dt_rank);
        let _ = writeln!(s, "kernel_t={}", b.kernel_t);
        let _ = writeln!(s, "kernel_f={}", b.kernel_f);
        let _ = writeln!(s, "ffn_mult={}", b.ffn_mult);
        let _ = writeln!(s, "bidirectional={}", b.bidirectional);
        let _ = writeln!(s, "scan_chunk={chunk}");
        let _ = writeln!(s, "head_hidden={}", self.head_hidden);
        let _ = writeln!(s, "interp_frames={}", self.interp_frames);
        let _ = writeln!(s, "label_frames={}", self.label_frames);
        s
    }

    /// Parse `key=value` lines on top of the defaults of `variant` (tiny
    /// unless given). `d_model` also resets `dt_rank` unless it is set.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| SeldError::invalid(format!("config line {}: expected key=value", i + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut cfg = match pairs.iter().find(|(k, _)| k == "variant").map(|(_, v)| v.as_str()) {
            None | Some("tiny") => Self::tiny(),
            Some("full") => Self::full(),
            Some(other) => return Err(SeldError::invalid(format!("config: unknown variant {other}"))),
        };
        let num = |k: &str, v: &str| -> Result<usize> {
            v.parse()
                .map_err(|_| SeldError::invalid(format!("config: {k}={v} is not a non-negative integer")))
        };
        let list = |k: &str, v: &str| -> Result<Vec<usize>> { v.split(',').map(|x| num(k, x.trim())).collect() };
        let mut dt_rank_set = false;
        for (k, v) in &pairs {
            let b = &mut cfg.block;
            match k.as_str() {
                "variant" => {}
                "n_classes" => cfg.n_classes = num(k, v)?,
                "n_tracks" => cfg.n_tracks = num(k, v)?,
                "in_channels" => cfg.in_channels = num(k, v)?,
                "mels" => cfg.mels = num(k, v)?,
                "encoder_channels" => cfg.encoder_channels = list(k, v)?,
                "time_pool" => cfg.time_pool = list(k, v)?,
                "freq_pool" => cfg.freq_pool = list(k, v)?,
                "d_model" => b.d_model = num(k, v)?,
                "d_state" => b.d_state = num(k, v)?,
                "d_conv" => b.d_conv = num(k, v)?,
                "expand" => b.expand = num(k, v)?,
                "n_blocks" => b.n_blocks = num(k, v)?,
                "dt_rank" => {
                    b.dt_rank = num(k, v)?;
                    dt_rank_set = true;
                }
                "kernel_t" => b.kernel_t = num(k, v)?,
                "kernel_f" => b.kernel_f = num(k, v)?,
                "ffn_mult" => b.ffn_mult = num(k, v)?,
                "bidirectional" => {
                    b.bidirectional = v
                        .parse()
                        .map_err(|_| SeldError::invalid(format!("config: bidirectional={v} is not a bool")))?
                }
                "scan_chunk" => {
                    b.scan_mode = match num(k, v)? {
                        0 => ScanMode::Sequential,
                        c => ScanMode::Chunked(c),
                    }
                }
                "head_hidden" => cfg.head_hidden = num(k, v)?,
                "interp_frames" => cfg.interp_frames = num(k, v)?,
                "label_frames" => cfg.label_frames = num(k, v)?,
                other => return Err(SeldError::invalid(format!("config: unknown key {other}"))),
            }
        }
        if !dt_rank_set {
            cfg.block.dt_rank = cfg.block.d_model.div_ceil(16);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Analytic size of a configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Complexity {
    pub params: usize,
    pub macs: usize,
    pub encoder_params: usize,
    pub encoder_macs: usize,
}

pub fn conv3x3_macs(c_in: usize, c_out: usize, h: usize, w: usize) -> usize {
    9 * c_in * c_out * h * w
}

/// Parameters and multiply-accumulates for a 5 s input. Convolutions count
/// `9 Cin Cout H W`, linear layers `in * out` per row, the scan its per-step
/// state work; normalization, activations and pooling are not counted.
pub fn count_params_and_macs(cfg: &ModelConfig) -> Complexity {
    let (mut p_enc, mut m_enc) = (2 * cfg.in_channels, 0);
    let (mut h, mut w) = (CLIP_FEATURE_FRAMES, cfg.mels);
    let mut c_in = cfg.in_channels;
    for (i, &c) in cfg.encoder_channels.iter().enumerate() {
        p_enc += 9 * c_in * c + c + 2 * c + 9 * c * c + c + 2 * c;
        m_enc += conv3x3_macs(c_in, c, h, w) + conv3x3_macs(c, c, h, w);
        h = h.div_ceil(cfg.time_pool[i]);
        w = w.div_ceil(cfg.freq_pool[i]);
        c_in = c;
    }
    let (t, f) = (h, w);
    let b = &cfg.block;
    let d = b.d_model;
    let mut params = p_enc + cfg.d_enc() * d + d;
    let mut macs = m_enc + t * f * cfg.d_enc() * d;
    params += b.n_blocks * b.block_params();
    macs += b.n_blocks * b.block_macs(t, f);
    macs += cfg.label_frames * t * d;
    let out = cfg.n_outputs();
    params += d * cfg.head_hidden + cfg.head_hidden + cfg.head_hidden * out + out;
    macs += cfg.label_frames * (d * cfg.head_hidden + cfg.head_hidden * out);
    Complexity {
        params,
        macs,
        encoder_params: p_enc,
        encoder_macs: m_enc,
    }
}

/// Linear map `[label_frames][t_in]`: align-corners linear interpolation to
/// `interp_frames`, then the mean of consecutive groups.
pub fn temporal_matrix(t_in: usize, interp_frames: usize, label_frames: usize) -> Result<Vec<f64>> {
    if t_in < 2 {
        return Err(SeldError::invalid(format!("temporal module needs at least 2 frames, got {t_in}")));
    }
    if label_frames == 0 || !interp_frames.is_multiple_of(label_frames) {
        return Err(SeldError::invalid("temporal module: interp_frames must be a multiple of label_frames"));
    }
    let group = interp_frames / label_frames;
    let mut m = vec![0.0; label_frames * t_in];
    let scale = (t_in - 1) as f64 / (interp_frames - 1).max(1) as f64;
    for i in 0..interp_frames {
        let pos = i as f64 * scale;
        let j0 = (pos.floor() as usize).min(t_in - 1);
        let frac = pos - j0 as f64;
        let row = &mut m[(i / group) * t_in..(i / group + 1) * t_in];
        row[j0] += (1.0 - frac) / group as f64;
        if frac > 0.0 {
            row[j0 + 1] += frac / group as f64;
        }
    }
    Ok(m)
}

/// Apply the temporal module to `x: [t_in][d]`.
pub fn temporal_module<T: Real>(x: &[T], t_in: usize, d: usize) -> Result<Vec<T>> {
    let m: Vec<T> = temporal_matrix(t_in, INTERP_FRAMES, LABEL_FRAMES)?
        .into_iter()
        .map(T::of)
        .collect();
    let mut y = vec![T::zero(); LABEL_FRAMES * d];
    matmul(&m, false, x, false, &mut y, LABEL_FRAMES, t_in, d, false);
    Ok(y)
}

/// Output activations in place: tanh on `(x, y)`, ReLU on distance.
pub fn head_activation<T: Real>(z: &mut [T]) {
    for cell in z.chunks_exact_mut(3) {
        cell[0] = cell[0].tanh();
        cell[1] = cell[1].tanh();
        cell[2] = cell[2].max(T::zero());
    }
}

/// Two 3x3 conv + BN + ReLU layers followed by max pooling.
#[derive(Debug, Clone)]
pub struct ConvBlock<T> {
    pub conv1: Conv3x3<T>,
    pub bn1: BatchNorm<T>,
    pub conv2: Conv3x3<T>,
    pub bn2: BatchNorm<T>,
    pub pool_t: usize,
    pub pool_f: usize,
}

pub struct ConvBlockCache<T> {
    conv1: Vec<ConvCache<T>>,
    bn1: BatchNormCache<T>,
    act1: Vec<T>,
    conv2: Vec<ConvCache<T>>,
    bn2: BatchNormCache<T>,
    act2: Vec<T>,
    pool: Vec<MaxPoolCache>,
}

impl<T: Real> ConvBlock<T> {
    fn new(c_in: usize, c_out: usize, pool_t: usize, pool_f: usize, rng: &mut ChaCha8Rng) -> Self {
        ConvBlock {
            conv1: Conv3x3::new(c_in, c_out, rng),
            bn1: BatchNorm::new(c_out),
            conv2: Conv3x3::new(c_out, c_out, rng),
            bn2: BatchNorm::new(c_out),
            pool_t,
            pool_f,
        }
    }

    /// `x: [batch][c_in][h][w]` -> `([batch][c_out][h'][w'], h', w')`.
    fn forward(&self, x: &[T], batch: usize, h: usize, w: usize, mode: Mode) -> (Vec<T>, usize, usize, ConvBlockCache<T>) {
        let (ci, co) = (self.conv1.c_in, self.conv1.c_out);
        let hw = h * w;
        let mut y1 = Vec::with_capacity(batch * co * hw);
        let mut conv1 = Vec::with_capacity(batch);
        for b in 0..batch {
            let (y, c) = self.conv1.forward(&x[b * ci * hw..(b + 1) * ci * hw], h, w);
            y1.extend(y);
            conv1.push(c);
        }
        let (mut act1, bn1) = self.bn1.forward(&y1, batch, hw, mode);
        relu_inplace(&mut act1);
        let mut y2 = Vec::with_capacity(batch * co * hw);
        let mut conv2 = Vec::with_capacity(batch);
        for b in 0..batch {
            let (y, c) = self.conv2.forward(&act1[b * co * hw..(b + 1) * co * hw], h, w);
            y2.extend(y);
            conv2.push(c);
        }
        let (mut act2, bn2) = self.bn2.forward(&y2, batch, hw, mode);
        relu_inplace(&mut act2);
        let mut out = Vec::new();
        let mut pool = Vec::with_capacity(batch);
        let (mut oh, mut ow) = (h, w);
        for b in 0..batch {
            let (y, ph, pw, c) = max_pool_forward(&act2[b * co * hw..(b + 1) * co * hw], co, h, w, self.pool_t, self.pool_f);
            out.extend(y);
            pool.push(c);
            (oh, ow) = (ph, pw);
        }
        (
            out,
            oh,
            ow,
            ConvBlockCache {
                conv1,
                bn1,
                act1,
                conv2,
                bn2,
                act2,
                pool,
            },
        )
    }

    fn backward(&mut self, cache: &ConvBlockCache<T>, dy: &[T], batch: usize, h: usize, w: usize) -> Vec<T> {
        let co = self.conv1.c_out;
        let hw = h * w;
        let per_out = dy.len() / batch;
        let mut d_act2 = Vec::with_capacity(batch * co * hw);
        for b in 0..batch {
            d_act2.extend(max_pool_backward(&cache.pool[b], &dy[b * per_out..(b + 1) * per_out]));
        }
        let d_y2 = self.bn2.backward(&cache.bn2, &relu_backward(&cache.act2, &d_act2), batch, hw);
        let mut d_act1 = Vec::with_capacity(batch * co * hw);
        for b in 0..batch {
            let g = self.conv2.backward(&cache.conv2[b], &d_y2[b * co * hw..(b + 1) * co * hw], true);
            d_act1.extend(g.unwrap_or_default());
        }
        let d_y1 = self.bn1.backward(&cache.bn1, &relu_backward(&cache.act1, &d_act1), batch, hw);
        let mut dx = Vec::new();
        for b in 0..batch {
            let g = self.conv1.backward(&cache.conv1[b], &d_y1[b * co * hw..(b + 1) * co * hw], true);
            dx.extend(g.unwrap_or_default());
        }
        dx
    }
}

/// Forward intermediates needed by [`SeldModel::backward`].
pub struct ModelCache<T> {
    batch: usize,
    frames: usize,
    bn0: BatchNormCache<T>,
    enc: Vec<ConvBlockCache<T>>,
    enc_dims: Vec<(usize, usize)>,
    enc_out: Vec<T>,
    t_enc: usize,
    f_enc: usize,
    blocks: Vec<BlockCache<T>>,
    temporal: Vec<T>,
    head_in: Vec<T>,
    head_h: Vec<T>,
    out: Vec<T>,
}

impl<T> ModelCache<T> {
    /// Activated outputs `[batch][label_frames][tracks * classes * 3]`.
    pub fn output(&self) -> &[T] {
        &self.out
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
}

#[derive(Debug, Clone)]
pub struct SeldModel<T> {
    pub config: ModelConfig,
    pub bn0: BatchNorm<T>,
    pub encoder: Vec<ConvBlock<T>>,
    pub proj: Linear<T>,
    pub blocks: Vec<BiMamba2dacBlock<T>>,
    pub head_fc1: Linear<T>,
    pub head_fc2: Linear<T>,
}

impl<T: Real> Module<T> for SeldModel<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        use crate::nn::join;
        self.bn0.visit(&join(prefix, "bn0"), f);
        for (i, b) in self.encoder.iter_mut().enumerate() {
            let p = join(prefix, &format!("encoder.conv{i}"));
            b.conv1.visit(&join(&p, "conv1"), f);
            b.bn1.visit(&join(&p, "bn1"), f);
            b.conv2.visit(&join(&p, "conv2"), f);
            b.bn2.visit(&join(&p, "bn2"), f);
        }
        self.proj.visit(&join(prefix, "proj"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit(&join(prefix, &format!("block{i}")), f);
        }
        self.head_fc1.visit(&join(prefix, "head.fc1"), f);
        self.head_fc2.visit(&join(prefix, "head.fc2"), f);
    }
}

impl<T: Real> SeldModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut encoder = Vec::with_capacity(config.encoder_channels.len());
        let mut c_in = config.in_channels;
        for (i, &c) in config.encoder_channels.iter().enumerate() {
            encoder.push(ConvBlock::new(c_in, c, config.time_pool[i], config.freq_pool[i], &mut rng));
            c_in = c;
        }
        let d = config.block.d_model;
        let proj = Linear::new(config.d_enc(), d, true, &mut rng);
        let blocks = (0..config.block.n_blocks)
            .map(|_| BiMamba2dacBlock::new(&config.block, &mut rng))
            .collect();
        let head_fc1 = Linear::new(d, config.head_hidden, true, &mut rng);
        let head_fc2 = Linear::new(config.head_hidden, config.n_outputs(), true, &mut rng);
        Ok(SeldModel {
            bn0: BatchNorm::new(config.in_channels),
            encoder,
            proj,
            blocks,
            head_fc1,
            head_fc2,
            config,
        })
    }

    fn check_features(&self, feats: &[T], batch: usize, frames: usize) -> Result<()> {
        let c = &self.config;
        if batch == 0 {
            return Err(SeldError::EmptyInput("model batch"));
        }
        if feats.len() != batch * c.in_channels * frames * c.mels {
            return Err(SeldError::shape(format!(
                "model: {} feature values for [{batch}][{}][{frames}][{}]",
                feats.len(),
                c.in_channels,
                c.mels
            )));
        }
        if !feats.iter().all(|v| v.is_finite()) {
            return Err(SeldError::NonFinite("features"));
        }
        Ok(())
    }

    /// Encoder on `[batch][in_channels][frames][mels]`, returning
    /// `([batch][T'][F'][d_enc], T', F')`.
    pub fn cnn14_encoder(&self, feats: &[T], batch: usize, frames: usize, mode: Mode) -> Result<(Vec<T>, usize, usize)> {
        self.check_features(feats, batch, frames)?;
        let mut cache = self.empty_cache(batch, frames);
        let (x, t, f) = self.encode(feats, mode, &mut cache);
        Ok((x, t, f))
    }

    fn empty_cache(&self, batch: usize, frames: usize) -> ModelCache<T> {
        ModelCache {
            batch,
            frames,
            bn0: self.bn0.forward(&[], 0, 0, Mode::Eval).1,
            enc: Vec::new(),
            enc_dims: Vec::new(),
            enc_out: Vec::new(),
            t_enc: 0,
            f_enc: 0,
            blocks: Vec::new(),
            temporal: Vec::new(),
            head_in: Vec::new(),
            head_h: Vec::new(),
            out: Vec::new(),
        }
    }

    fn encode(&self, feats: &[T], mode: Mode, cache: &mut ModelCache<T>) -> (Vec<T>, usize, usize) {
        let (batch, frames, mels) = (cache.batch, cache.frames, self.config.mels);
        let (mut x, bn0) = self.bn0.forward(feats, batch, frames * mels, mode);
        cache.bn0 = bn0;
        let (mut h, mut w) = (frames, mels);
        for block in &self.encoder {
            cache.enc_dims.push((h, w));
            let (y, oh, ow, c) = block.forward(&x, batch, h, w, mode);
            cache.enc.push(c);
            x = y;
            (h, w) = (oh, ow);
        }
        // [batch][C][T'][F'] -> [batch][T'][F'][C]
        let c = self.config.d_enc();
        let mut out = vec![T::zero(); x.len()];
        for b in 0..batch {
            for ch in 0..c {
                for i in 0..h * w {
                    out[(b * h * w + i) * c + ch] = x[(b * c + ch) * h * w + i];
                }
            }
        }
        (out, h, w)
    }

    /// Full forward on a feature batch; the cache holds the activated output.
    pub fn forward(&self, feats: &[T], batch: usize, frames: usize, mode: Mode) -> Result<ModelCache<T>> {
        self.check_features(feats, batch, frames)?;
        let cfg = &self.config;
        let mut cache = self.empty_cache(batch, frames);
        let (enc_out, t, f) = self.encode(feats, mode, &mut cache);
        let tm = temporal_matrix(t, cfg.interp_frames, cfg.label_frames)?;
        let d = cfg.block.d_model;
        let mut x = self.proj.forward(&enc_out, batch * t * f);
        for block in &self.blocks {
            let (y, c) = block.forward(&x, batch, t, f, mode)?;
            cache.blocks.push(c);
            x = y;
        }
        let pooled = freq_mean(&x, batch * t, f, d);
        let tm: Vec<T> = tm.into_iter().map(T::of).collect();
        let lf = cfg.label_frames;
        let mut head_in = vec![T::zero(); batch * lf * d];
        for b in 0..batch {
            matmul(
                &tm,
                false,
                &pooled[b * t * d..(b + 1) * t * d],
                false,
                &mut head_in[b * lf * d..(b + 1) * lf * d],
                lf,
                t,
                d,
                false,
            );
        }
        let head_h = self.head_fc1.forward(&head_in, batch * lf);
        let mut out = self.head_fc2.forward(&silu_vec(&head_h), batch * lf);
        head_activation(&mut out);
        if !out.iter().all(|v| v.is_finite()) {
            return Err(SeldError::NonFinite("model output"));
        }
        cache.enc_out = enc_out;
        cache.t_enc = t;
        cache.f_enc = f;
        cache.temporal = tm;
        cache.head_in = head_in;
        cache.head_h = head_h;
        cache.out = out;
        Ok(cache)
    }

    /// Accumulates parameter gradients given `dL/d(activated output)`.
    pub fn backward(&mut self, cache: &ModelCache<T>, d_out: &[T]) -> Result<()> {
        if d_out.len() != cache.out.len() {
            return Err(SeldError::shape("model backward: output gradient size"));
        }
        let (batch, t, f) = (cache.batch, cache.t_enc, cache.f_enc);
        let d = self.config.block.d_model;
        let lf = self.config.label_frames;
        let mut dz = Vec::with_capacity(d_out.len());
        for (y, g) in cache.out.chunks_exact(3).zip(d_out.chunks_exact(3)) {
            dz.push(g[0] * (T::one() - y[0] * y[0]));
            dz.push(g[1] * (T::one() - y[1] * y[1]));
            dz.push(if y[2] > T::zero() { g[2] } else { T::zero() });
        }
        let d_act = self.head_fc2.backward(&silu_vec(&cache.head_h), &dz, batch * lf);
        let d_h = silu_backward(&cache.head_h, &d_act);
        let d_head_in = self.head_fc1.backward(&cache.head_in, &d_h, batch * lf);
        let mut d_pooled = vec![T::zero(); batch * t * d];
        for b in 0..batch {
            matmul(
                &cache.temporal,
                true,
                &d_head_in[b * lf * d..(b + 1) * lf * d],
                false,
                &mut d_pooled[b * t * d..(b + 1) * t * d],
                t,
                lf,
                d,
                false,
            );
        }
        let inv_f = T::of(1.0 / f as f64);
        let mut dx = vec![T::zero(); batch * t * f * d];
        for r in 0..batch * t {
            for fi in 0..f {
                for ch in 0..d {
                    dx[(r * f + fi) * d + ch] = d_pooled[r * d + ch] * inv_f;
                }
            }
        }
        for (block, c) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            dx = block.backward(c, &dx)?;
        }
        let d_enc = self.proj.backward(&cache.enc_out, &dx, batch * t * f);
        let c = self.config.d_enc();
        let mut g = vec![T::zero(); d_enc.len()];
        for b in 0..batch {
            for ch in 0..c {
                for i in 0..t * f {
                    g[(b * c + ch) * t * f + i] = d_enc[(b * t * f + i) * c + ch];
                }
            }
        }
        for (block, (cb, &(h, w))) in self
            .encoder
            .iter_mut()
            .zip(cache.enc.iter().zip(&cache.enc_dims))
            .rev()
        {
            g = block.backward(cb, &g, batch, h, w);
        }
        let frames_x_mels = cache.frames * self.config.mels;
        self.bn0.backward(&cache.bn0, &g, batch, frames_x_mels);
        Ok(())
    }

    /// Every batch norm paired with its statistics from `cache`, in a fixed order.
    pub fn norm_pairs<'a>(&'a mut self, cache: &'a ModelCache<T>) -> Vec<(&'a mut BatchNorm<T>, &'a BatchNormCache<T>)> {
        let mut out = vec![(&mut self.bn0, &cache.bn0)];
        for (b, c) in self.encoder.iter_mut().zip(&cache.enc) {
            out.push((&mut b.bn1, &c.bn1));
            out.push((&mut b.bn2, &c.bn2));
        }
        for (b, c) in self.blocks.iter_mut().zip(&cache.blocks) {
            out.extend(b.norm_caches(c));
        }
        out
    }

    /// Momentum update of running statistics from a train-mode forward.
    pub fn update_running_stats(&mut self, cache: &ModelCache<T>) {
        for (bn, c) in self.norm_pairs(cache) {
            bn.update_running(c);
        }
    }

    /// Replace running statistics with the average batch statistics over
    /// `clips` (each a `[in_channels][frames][mels]` tensor), one clip per
    /// forward pass.
    pub fn recalibrate_norms(&mut self, clips: &[&[T]], frames: usize) -> Result<()> {
        let mut acc: Vec<BnStatAccumulator> = Vec::new();
        for clip in clips {
            let cache = self.forward(clip, 1, frames, Mode::Train)?;
            let pairs = self.norm_pairs(&cache);
            if acc.is_empty() {
                acc = vec![BnStatAccumulator::default(); pairs.len()];
            }
            for (a, (_, c)) in acc.iter_mut().zip(&pairs) {
                a.add(*c);
            }
        }
        if acc.is_empty() {
            return Ok(());
        }
        // any cache works for pairing layers with accumulators
        let cache = self.forward(clips[0], 1, frames, Mode::Eval)?;
        for (a, (bn, _)) in acc.iter().zip(self.norm_pairs(&cache)) {
            a.install(bn);
        }
        Ok(())
    }

    /// Eval-mode prediction from a feature tensor.
    pub fn predict_features(&self, feat: &FeatureTensor) -> Result<MaccdoaTensor> {
        if feat.channels != self.config.in_channels || feat.mels != self.config.mels {
            return Err(SeldError::shape(format!(
                "model expects [{}][*][{}] features, got [{}][{}][{}]",
                self.config.in_channels, self.config.mels, feat.channels, feat.frames, feat.mels
            )));
        }
        let x: Vec<T> = feat.data.iter().map(|&v| T::of(v as f64)).collect();
        let cache = self.forward(&x, 1, feat.frames, Mode::Eval)?;
        self.to_tensor(&cache.out)
    }

    /// Features then eval-mode forward.
    pub fn predict(&self, clip: &StereoClip) -> Result<MaccdoaTensor> {
        self.predict_features(&extract_features(clip)?)
    }

    /// One clip's activated output as a `[frames][tracks][classes][3]` tensor.
    pub fn to_tensor(&self, out: &[T]) -> Result<MaccdoaTensor> {
        let c = &self.config;
        MaccdoaTensor::from_vec(
            c.label_frames,
            c.n_tracks,
            c.n_classes,
            out.iter().map(|v| v.f64()).collect(),
        )
    }
}
