//! Minimal layer toolkit with explicit forward caches and hand-written
//! backward passes. Everything is generic over [`Real`] so the same layers
//! serve `f32` training and `f64` gradient checks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::num::{matmul, silu, silu_grad, Real};

/// Normalization statistics source.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; caches carry them for running-stat updates.
    Train,
    /// Frozen running statistics.
    Eval,
}

/// A named tensor with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub shape: Vec<usize>,
    /// Running statistics are stored as non-trainable params so they travel
    /// with checkpoints.
    pub trainable: bool,
}

impl<T: Real> Param<T> {
    pub fn new(shape: &[usize], value: Vec<T>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        Param {
            grad: vec![T::zero(); value.len()],
            value,
            shape: shape.to_vec(),
            trainable: true,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Param::new(shape, vec![T::zero(); shape.iter().product()])
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        Param::new(shape, vec![v; shape.iter().product()])
    }

    pub fn buffer(shape: &[usize], v: T) -> Self {
        let mut p = Param::filled(shape, v);
        p.trainable = false;
        p
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Self {
        let n = shape.iter().product();
        let value = (0..n).map(|_| T::of(rng.gen_range(-bound..=bound))).collect();
        Param::new(shape, value)
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

/// Visitor over every parameter (trainable or buffer) of a module tree.
pub trait Module<T: Real> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));

    fn zero_grad(&mut self) {
        self.visit("", &mut |_, p| p.zero_grad());
    }

    fn num_trainable(&mut self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| {
            if p.trainable {
                n += p.len()
            }
        });
        n
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Fully connected layer, weight stored `[out][in]`.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub d_in: usize,
    pub d_out: usize,
}

impl<T: Real> Linear<T> {
    /// Uniform(-1/sqrt(in), 1/sqrt(in)) initialization.
    pub fn new(d_in: usize, d_out: usize, bias: bool, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        Linear {
            weight: Param::uniform(&[d_out, d_in], bound, rng),
            bias: bias.then(|| Param::uniform(&[d_out], bound, rng)),
            d_in,
            d_out,
        }
    }

    pub fn zeros(d_in: usize, d_out: usize, bias: bool) -> Self {
        Linear {
            weight: Param::zeros(&[d_out, d_in]),
            bias: bias.then(|| Param::zeros(&[d_out])),
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, x: &[T], rows: usize) -> Vec<T> {
        debug_assert_eq!(x.len(), rows * self.d_in);
        let mut y = vec![T::zero(); rows * self.d_out];
        if let Some(b) = &self.bias {
            for row in y.chunks_exact_mut(self.d_out) {
                row.copy_from_slice(&b.value);
            }
        }
        matmul(x, false, &self.weight.value, true, &mut y, rows, self.d_in, self.d_out, self.bias.is_some());
        y
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&mut self, x: &[T], dy: &[T], rows: usize) -> Vec<T> {
        matmul(dy, true, x, false, &mut self.weight.grad, self.d_out, rows, self.d_in, true);
        if let Some(b) = &mut self.bias {
            for row in dy.chunks_exact(self.d_out) {
                for (g, &v) in b.grad.iter_mut().zip(row) {
                    *g += v;
                }
            }
        }
        let mut dx = vec![T::zero(); rows * self.d_in];
        matmul(dy, false, &self.weight.value, false, &mut dx, rows, self.d_out, self.d_in, false);
        dx
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

/// Layer normalization over the last dimension.
#[derive(Debug, Clone)]
pub struct LayerNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub dim: usize,
    pub eps: f64,
}

pub struct LayerNormCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

impl<T: Real> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Param::filled(&[dim], T::one()),
            beta: Param::zeros(&[dim]),
            dim,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &[T]) -> (Vec<T>, LayerNormCache<T>) {
        let d = self.dim;
        let rows = x.len() / d;
        let mut y = vec![T::zero(); x.len()];
        let mut xhat = vec![T::zero(); x.len()];
        let mut rstd = vec![T::zero(); rows];
        let inv_d = T::of(1.0 / d as f64);
        for r in 0..rows {
            let xr = &x[r * d..(r + 1) * d];
            let mean = xr.iter().copied().sum::<T>() * inv_d;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + T::of(self.eps)).sqrt();
            rstd[r] = rs;
            for i in 0..d {
                let h = (xr[i] - mean) * rs;
                xhat[r * d + i] = h;
                y[r * d + i] = h * self.gamma.value[i] + self.beta.value[i];
            }
        }
        (y, LayerNormCache { xhat, rstd })
    }

    pub fn backward(&mut self, cache: &LayerNormCache<T>, dy: &[T]) -> Vec<T> {
        let d = self.dim;
        let rows = dy.len() / d;
        let mut dx = vec![T::zero(); dy.len()];
        let inv_d = T::of(1.0 / d as f64);
        for r in 0..rows {
            let (mut sum_g, mut sum_gx) = (T::zero(), T::zero());
            for i in 0..d {
                let k = r * d + i;
                self.gamma.grad[i] += dy[k] * cache.xhat[k];
                self.beta.grad[i] += dy[k];
                let g = dy[k] * self.gamma.value[i];
                sum_g += g;
                sum_gx += g * cache.xhat[k];
            }
            for i in 0..d {
                let k = r * d + i;
                let g = dy[k] * self.gamma.value[i];
                dx[k] = cache.rstd[r] * (g - inv_d * sum_g - cache.xhat[k] * inv_d * sum_gx);
            }
        }
        dx
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

/// Batch normalization over a `[outer][channels][inner]` layout: statistics
/// are per channel across `outer * inner` positions. Channel-first maps use
/// `inner = H*W`; channel-last rows use `inner = 1`.
#[derive(Debug, Clone)]
pub struct BatchNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    pub channels: usize,
    pub momentum: f64,
    pub eps: f64,
}

pub struct BatchNormCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
    /// Batch mean and unbiased variance (train mode only).
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
    mode: Mode,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Param::filled(&[channels], T::one()),
            beta: Param::zeros(&[channels]),
            running_mean: Param::buffer(&[channels], T::zero()),
            running_var: Param::buffer(&[channels], T::one()),
            channels,
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &[T], outer: usize, inner: usize, mode: Mode) -> (Vec<T>, BatchNormCache<T>) {
        let c = self.channels;
        debug_assert_eq!(x.len(), outer * c * inner);
        let count = outer * inner;
        let (mean, var, batch_var) = match mode {
            Mode::Train => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for o in 0..outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * inner;
                        mean[ch] += x[base..base + inner].iter().copied().sum::<T>();
                    }
                }
                let inv = T::of(1.0 / count as f64);
                mean.iter_mut().for_each(|m| *m *= inv);
                for o in 0..outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * inner;
                        var[ch] += x[base..base + inner]
                            .iter()
                            .map(|&v| (v - mean[ch]) * (v - mean[ch]))
                            .sum::<T>();
                    }
                }
                let unbiased_scale = T::of(1.0 / (count.max(2) - 1) as f64);
                let unbiased: Vec<T> = var.iter().map(|&v| v * unbiased_scale).collect();
                var.iter_mut().for_each(|v| *v *= inv);
                (mean, var, unbiased)
            }
            Mode::Eval => (
                self.running_mean.value.clone(),
                self.running_var.value.clone(),
                Vec::new(),
            ),
        };
        let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v + T::of(self.eps)).sqrt()).collect();
        let mut y = vec![T::zero(); x.len()];
        let mut xhat = vec![T::zero(); x.len()];
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
                for i in base..base + inner {
                    let h = (x[i] - mean[ch]) * rstd[ch];
                    xhat[i] = h;
                    y[i] = g * h + b;
                }
            }
        }
        let batch_mean = if mode == Mode::Train { mean } else { Vec::new() };
        (
            y,
            BatchNormCache {
                xhat,
                rstd,
                batch_mean,
                batch_var,
                mode,
            },
        )
    }

    pub fn backward(&mut self, cache: &BatchNormCache<T>, dy: &[T], outer: usize, inner: usize) -> Vec<T> {
        let c = self.channels;
        let count = T::of((outer * inner) as f64);
        let mut sum_dy = vec![T::zero(); c];
        let mut sum_dy_xhat = vec![T::zero(); c];
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                for i in base..base + inner {
                    sum_dy[ch] += dy[i];
                    sum_dy_xhat[ch] += dy[i] * cache.xhat[i];
                }
            }
        }
        for ch in 0..c {
            self.gamma.grad[ch] += sum_dy_xhat[ch];
            self.beta.grad[ch] += sum_dy[ch];
        }
        let mut dx = vec![T::zero(); dy.len()];
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                let scale = self.gamma.value[ch] * cache.rstd[ch];
                for i in base..base + inner {
                    dx[i] = match cache.mode {
                        Mode::Eval => scale * dy[i],
                        Mode::Train => {
                            scale / count
                                * (count * dy[i] - sum_dy[ch] - cache.xhat[i] * sum_dy_xhat[ch])
                        }
                    };
                }
            }
        }
        dx
    }

    pub fn update_running(&mut self, cache: &BatchNormCache<T>) {
        if cache.mode != Mode::Train {
            return;
        }
        let m = T::of(self.momentum);
        for ch in 0..self.channels {
            let rm = &mut self.running_mean.value[ch];
            *rm = (T::one() - m) * *rm + m * cache.batch_mean[ch];
            let rv = &mut self.running_var.value[ch];
            *rv = (T::one() - m) * *rv + m * cache.batch_var[ch];
        }
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}

/// Accumulates batch statistics over many forward passes and installs their
/// average as the running statistics.
#[derive(Debug, Clone, Default)]
pub struct BnStatAccumulator {
    mean: Vec<f64>,
    var: Vec<f64>,
    n: usize,
}

impl BnStatAccumulator {
    pub fn add<T: Real>(&mut self, cache: &BatchNormCache<T>) {
        if self.mean.is_empty() {
            self.mean = vec![0.0; cache.batch_mean.len()];
            self.var = vec![0.0; cache.batch_var.len()];
        }
        for (a, &m) in self.mean.iter_mut().zip(&cache.batch_mean) {
            *a += m.f64();
        }
        for (a, &v) in self.var.iter_mut().zip(&cache.batch_var) {
            *a += v.f64();
        }
        self.n += 1;
    }

    pub fn install<T: Real>(&self, bn: &mut BatchNorm<T>) {
        if self.n == 0 {
            return;
        }
        let inv = 1.0 / self.n as f64;
        for ch in 0..bn.channels {
            bn.running_mean.value[ch] = T::of(self.mean[ch] * inv);
            bn.running_var.value[ch] = T::of(self.var[ch] * inv);
        }
    }
}

/// 3x3 convolution with zero "same" padding on `[C][H][W]` maps (im2col).
#[derive(Debug, Clone)]
pub struct Conv3x3<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub c_in: usize,
    pub c_out: usize,
}

pub struct ConvCache<T> {
    cols: Vec<T>,
    h: usize,
    w: usize,
}

impl<T: Real> Conv3x3<T> {
    /// Kaiming-uniform for ReLU networks.
    pub fn new(c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = (c_in * 9) as f64;
        let bound = (6.0 / fan_in).sqrt();
        Conv3x3 {
            weight: Param::uniform(&[c_out, c_in * 9], bound, rng),
            bias: Param::zeros(&[c_out]),
            c_in,
            c_out,
        }
    }

    fn im2col(&self, x: &[T], h: usize, w: usize) -> Vec<T> {
        let hw = h * w;
        let mut cols = vec![T::zero(); self.c_in * 9 * hw];
        for c in 0..self.c_in {
            let plane = &x[c * hw..(c + 1) * hw];
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &mut cols[((c * 9) + ky * 3 + kx) * hw..((c * 9) + ky * 3 + kx + 1) * hw];
                    for i in 0..h {
                        let si = i as isize + ky as isize - 1;
                        if si < 0 || si >= h as isize {
                            continue;
                        }
                        let src = &plane[si as usize * w..(si as usize + 1) * w];
                        let dst = &mut row[i * w..(i + 1) * w];
                        let (lo, hi) = (
                            if kx == 0 { 1 } else { 0 },
                            if kx == 2 { w.saturating_sub(1) } else { w },
                        );
                        for j in lo..hi {
                            dst[j] = src[j + kx - 1];
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[T], h: usize, w: usize) -> Vec<T> {
        let hw = h * w;
        let mut x = vec![T::zero(); self.c_in * hw];
        for c in 0..self.c_in {
            let plane = &mut x[c * hw..(c + 1) * hw];
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &cols[((c * 9) + ky * 3 + kx) * hw..((c * 9) + ky * 3 + kx + 1) * hw];
                    for i in 0..h {
                        let si = i as isize + ky as isize - 1;
                        if si < 0 || si >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[si as usize * w..(si as usize + 1) * w];
                        let src = &row[i * w..(i + 1) * w];
                        let (lo, hi) = (
                            if kx == 0 { 1 } else { 0 },
                            if kx == 2 { w.saturating_sub(1) } else { w },
                        );
                        for j in lo..hi {
                            dst[j + kx - 1] += src[j];
                        }
                    }
                }
            }
        }
        x
    }

    /// One map `[c_in][h][w]` to `[c_out][h][w]`.
    pub fn forward(&self, x: &[T], h: usize, w: usize) -> (Vec<T>, ConvCache<T>) {
        let hw = h * w;
        let cols = self.im2col(x, h, w);
        let mut y = vec![T::zero(); self.c_out * hw];
        for (co, row) in y.chunks_exact_mut(hw).enumerate() {
            row.iter_mut().for_each(|v| *v = self.bias.value[co]);
        }
        matmul(&self.weight.value, false, &cols, false, &mut y, self.c_out, self.c_in * 9, hw, true);
        (y, ConvCache { cols, h, w })
    }

    /// Accumulates weight/bias gradients; returns `dL/dx` when requested.
    pub fn backward(&mut self, cache: &ConvCache<T>, dy: &[T], need_input_grad: bool) -> Option<Vec<T>> {
        let hw = cache.h * cache.w;
        let k = self.c_in * 9;
        matmul(dy, false, &cache.cols, true, &mut self.weight.grad, self.c_out, hw, k, true);
        for (co, row) in dy.chunks_exact(hw).enumerate() {
            self.bias.grad[co] += row.iter().copied().sum::<T>();
        }
        if !need_input_grad {
            return None;
        }
        let mut dcols = vec![T::zero(); k * hw];
        matmul(&self.weight.value, true, dy, false, &mut dcols, k, self.c_out, hw, false);
        Some(self.col2im(&dcols, cache.h, cache.w))
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Max pooling with kernel == stride and ceil-mode output size.
pub struct MaxPoolCache {
    argmax: Vec<usize>,
    in_len: usize,
}

pub fn max_pool_forward<T: Real>(
    x: &[T],
    channels: usize,
    h: usize,
    w: usize,
    ph: usize,
    pw: usize,
) -> (Vec<T>, usize, usize, MaxPoolCache) {
    let (oh, ow) = (h.div_ceil(ph), w.div_ceil(pw));
    let mut y = Vec::with_capacity(channels * oh * ow);
    let mut argmax = Vec::with_capacity(channels * oh * ow);
    for c in 0..channels {
        let base = c * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + i * ph * w + j * pw;
                for di in 0..ph {
                    let r = i * ph + di;
                    if r >= h {
                        break;
                    }
                    for dj in 0..pw {
                        let col = j * pw + dj;
                        if col >= w {
                            break;
                        }
                        let idx = base + r * w + col;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                y.push(x[best]);
                argmax.push(best);
            }
        }
    }
    (y, oh, ow, MaxPoolCache { argmax, in_len: x.len() })
}

pub fn max_pool_backward<T: Real>(cache: &MaxPoolCache, dy: &[T]) -> Vec<T> {
    let mut dx = vec![T::zero(); cache.in_len];
    for (&i, &g) in cache.argmax.iter().zip(dy) {
        dx[i] += g;
    }
    dx
}

pub fn relu_inplace<T: Real>(x: &mut [T]) {
    x.iter_mut().for_each(|v| *v = v.max(T::zero()));
}

/// Gradient of ReLU given its output.
pub fn relu_backward<T: Real>(y: &[T], dy: &[T]) -> Vec<T> {
    y.iter()
        .zip(dy)
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect()
}

pub fn silu_vec<T: Real>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| silu(v)).collect()
}

/// Gradient of SiLU given its input.
pub fn silu_backward<T: Real>(x: &[T], dy: &[T]) -> Vec<T> {
    x.iter().zip(dy).map(|(&v, &g)| g * silu_grad(v)).collect()
}
