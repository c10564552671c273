//! BiMamba2DAC decoder block: asymmetric depthwise time/frequency
//! convolutions, a bidirectional selective-SSM mixer over time and a
//! feed-forward layer, all residual.
//!
//! Tensors are channel-last. A block maps `[batch][T][F][d_model]` to the
//! same shape; the temporal mixer runs on the frequency mean and its update
//! is broadcast back over frequency.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SeldError};
use crate::nn::{join, silu_backward, silu_vec, BatchNorm, BatchNormCache, LayerNorm, LayerNormCache, Linear, Mode, Module, Param};
use crate::num::{silu, silu_grad, Real};
use crate::ssm::{scan, scan_backward, ScanMode, SelectiveCache, SelectiveProjection, SsmParams};

#[derive(Debug, Clone, PartialEq)]
pub struct BlockConfig {
    pub d_model: usize,
    pub d_state: usize,
    pub d_conv: usize,
    pub expand: usize,
    pub n_blocks: usize,
    pub dt_rank: usize,
    pub kernel_t: usize,
    pub kernel_f: usize,
    pub ffn_mult: usize,
    /// `false` drops the backward-in-time branch.
    pub bidirectional: bool,
    pub scan_mode: ScanMode,
}

impl BlockConfig {
    /// d_state 64, d_conv 4, expand 2, two blocks, 3-tap asymmetric kernels.
    pub fn new(d_model: usize) -> Self {
        BlockConfig {
            d_model,
            d_state: 64,
            d_conv: 4,
            expand: 2,
            n_blocks: 2,
            dt_rank: d_model.div_ceil(16),
            kernel_t: 3,
            kernel_f: 3,
            ffn_mult: 4,
            bidirectional: true,
            scan_mode: ScanMode::Sequential,
        }
    }

    pub fn d_inner(&self) -> usize {
        self.expand * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.d_model,
            self.d_state,
            self.d_conv,
            self.expand,
            self.dt_rank,
            self.kernel_t,
            self.kernel_f,
            self.ffn_mult,
        ];
        if positive.contains(&0) {
            return Err(SeldError::invalid("block config: sizes must be positive"));
        }
        if self.kernel_t.is_multiple_of(2) || self.kernel_f.is_multiple_of(2) {
            return Err(SeldError::invalid("block config: asymmetric kernels must be odd"));
        }
        if let ScanMode::Chunked(0) = self.scan_mode {
            return Err(SeldError::invalid("block config: chunk length must be positive"));
        }
        Ok(())
    }

    /// Trainable parameters of one Mamba branch.
    pub fn branch_params(&self) -> usize {
        let (d, di, n, r, k) = (self.d_model, self.d_inner(), self.d_state, self.dt_rank, self.d_conv);
        d * 2 * di + di * k + di + di * (r + 2 * n) + r * di + di + di * n + di + di * d
    }

    /// Trainable parameters of one block.
    pub fn block_params(&self) -> usize {
        let d = self.d_model;
        let h = self.ffn_mult * d;
        let asym = d * (self.kernel_t + self.kernel_f) + 2 * d + 4 * d;
        let branches = if self.bidirectional { 2 } else { 1 };
        let mixer = 2 * d + branches * self.branch_params();
        let ffn = 2 * d + d * h + h + h * d + d;
        asym + mixer + ffn
    }

    /// Multiply-accumulates of one branch per time step.
    pub fn branch_macs_per_step(&self) -> usize {
        let (d, di, n, r, k) = (self.d_model, self.d_inner(), self.d_state, self.dt_rank, self.d_conv);
        // projections, causal conv, state update + readout, skip, gate
        d * 2 * di + di * k + di * (r + 2 * n) + r * di + 2 * di * n + di + di + di * d
    }

    /// Multiply-accumulates of one block on a `t x f` map.
    pub fn block_macs(&self, t: usize, f: usize) -> usize {
        let d = self.d_model;
        let branches = if self.bidirectional { 2 } else { 1 };
        asymmetric_conv_macs(t, f, d, self.kernel_t, self.kernel_f)
            + t * branches * self.branch_macs_per_step()
            + t * 2 * d * self.ffn_mult * d
    }
}

/// MACs of the two depthwise 1D pathways on a `t x f x d` map.
pub fn asymmetric_conv_macs(t: usize, f: usize, d: usize, kernel_t: usize, kernel_f: usize) -> usize {
    t * f * d * (kernel_t + kernel_f)
}

/// MACs of a full `kernel_t x kernel_f` depthwise 2D convolution.
pub fn depthwise_2d_macs(t: usize, f: usize, d: usize, kernel_t: usize, kernel_f: usize) -> usize {
    t * f * d * kernel_t * kernel_f
}

/// Reflect an index into `0..n` (`-1 -> 1`, `n -> n-2`); length 1 clamps.
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// Reverse a `[len][width]` sequence in time.
pub fn reverse_time<T: Copy>(x: &[T], len: usize, width: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for k in (0..len).rev() {
        out.extend_from_slice(&x[k * width..(k + 1) * width]);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// One selective-SSM mixer over a `[L][d_model]` sequence.
#[derive(Debug, Clone)]
pub struct MambaBranch<T> {
    pub in_proj: Linear<T>,
    /// Depthwise causal conv, `[d_inner][d_conv]`.
    pub conv_weight: Param<T>,
    pub conv_bias: Param<T>,
    pub selective: SelectiveProjection<T>,
    /// `A = -exp(a_log)`, `[d_inner][d_state]`.
    pub a_log: Param<T>,
    pub d: Param<T>,
    pub out_proj: Linear<T>,
    pub d_model: usize,
    pub d_inner: usize,
    pub d_state: usize,
    pub d_conv: usize,
    pub scan_mode: ScanMode,
}

pub struct BranchCache<T> {
    x: Vec<T>,
    xi: Vec<T>,
    z: Vec<T>,
    u_pre: Vec<T>,
    u: Vec<T>,
    sel: SelectiveCache<T>,
    delta: Vec<T>,
    b: Vec<T>,
    c: Vec<T>,
    y: Vec<T>,
    /// Per channel `[L][N]`.
    states: Vec<Vec<T>>,
    len: usize,
}

impl<T: Real> MambaBranch<T> {
    pub fn new(cfg: &BlockConfig, rng: &mut ChaCha8Rng) -> Self {
        let (d, di, n, k) = (cfg.d_model, cfg.d_inner(), cfg.d_state, cfg.d_conv);
        let conv_bound = 1.0 / (k as f64).sqrt();
        let a_log = (0..di)
            .flat_map(|_| (1..=n).map(|i| T::of((i as f64).ln())))
            .collect();
        MambaBranch {
            in_proj: Linear::new(d, 2 * di, false, rng),
            conv_weight: Param::uniform(&[di, k], conv_bound, rng),
            conv_bias: Param::uniform(&[di], conv_bound, rng),
            selective: SelectiveProjection::new(di, n, cfg.dt_rank, rng),
            a_log: Param::new(&[di, n], a_log),
            d: Param::filled(&[di], T::one()),
            out_proj: Linear::new(di, d, false, rng),
            d_model: d,
            d_inner: di,
            d_state: n,
            d_conv: k,
            scan_mode: cfg.scan_mode,
        }
    }

    /// Every weight and bias zero, `A` keeps its default diagonal.
    pub fn zeros(cfg: &BlockConfig) -> Self {
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut b = Self::new(cfg, &mut rng);
        b.in_proj = Linear::zeros(cfg.d_model, 2 * cfg.d_inner(), false);
        b.conv_weight = Param::zeros(&[cfg.d_inner(), cfg.d_conv]);
        b.conv_bias = Param::zeros(&[cfg.d_inner()]);
        b.selective = SelectiveProjection::zeros(cfg.d_inner(), cfg.d_state, cfg.dt_rank);
        b.d = Param::zeros(&[cfg.d_inner()]);
        b.out_proj = Linear::zeros(cfg.d_inner(), cfg.d_model, false);
        b
    }

    fn scan_params(&self, b: Vec<T>, c: Vec<T>) -> SsmParams<T> {
        SsmParams {
            a: vec![T::zero(); self.d_state],
            b,
            c,
            delta: Vec::new(),
            d: T::zero(),
            skip_term: true,
        }
    }

    fn load_channel(&self, p: &mut SsmParams<T>, ch: usize, delta: &[T], len: usize) {
        let n = self.d_state;
        for (a, &al) in p.a.iter_mut().zip(&self.a_log.value[ch * n..(ch + 1) * n]) {
            *a = -al.exp();
        }
        p.delta.clear();
        p.delta.extend((0..len).map(|k| delta[k * self.d_inner + ch]));
        p.d = self.d.value[ch];
    }

    /// Forward in time over `x: [len][d_model]`.
    pub fn forward(&self, x: &[T], len: usize) -> Result<(Vec<T>, BranchCache<T>)> {
        let (di, k) = (self.d_inner, self.d_conv);
        let xz = self.in_proj.forward(x, len);
        let mut xi = Vec::with_capacity(len * di);
        let mut z = Vec::with_capacity(len * di);
        for row in xz.chunks_exact(2 * di) {
            xi.extend_from_slice(&row[..di]);
            z.extend_from_slice(&row[di..]);
        }
        let mut u_pre = vec![T::zero(); len * di];
        for t in 0..len {
            for ch in 0..di {
                let mut acc = self.conv_bias.value[ch];
                for j in 0..k {
                    let src = t as isize + j as isize - (k as isize - 1);
                    if src >= 0 {
                        acc += self.conv_weight.value[ch * k + j] * xi[src as usize * di + ch];
                    }
                }
                u_pre[t * di + ch] = acc;
            }
        }
        let u = silu_vec(&u_pre);
        let (steps, sel) = self.selective.forward(&u, len);
        let mut p = self.scan_params(steps.b.clone(), steps.c.clone());
        let h0 = vec![T::zero(); self.d_state];
        let mut y = vec![T::zero(); len * di];
        let mut states = Vec::with_capacity(di);
        let mut col = vec![T::zero(); len];
        for ch in 0..di {
            self.load_channel(&mut p, ch, &steps.delta, len);
            for t in 0..len {
                col[t] = u[t * di + ch];
            }
            let r = scan(&p, &col, &h0, self.scan_mode, true)?;
            for t in 0..len {
                y[t * di + ch] = r.y[t];
            }
            states.push(r.states.unwrap_or_default());
        }
        let gated: Vec<T> = y.iter().zip(&z).map(|(&v, &g)| v * silu(g)).collect();
        let out = self.out_proj.forward(&gated, len);
        Ok((
            out,
            BranchCache {
                x: x.to_vec(),
                xi,
                z,
                u_pre,
                u,
                sel,
                delta: steps.delta,
                b: steps.b,
                c: steps.c,
                y,
                states,
                len,
            },
        ))
    }

    /// `Backward` reverses time, applies the branch and reverses back.
    pub fn forward_dir(&self, x: &[T], len: usize, dir: Direction) -> Result<(Vec<T>, BranchCache<T>)> {
        match dir {
            Direction::Forward => self.forward(x, len),
            Direction::Backward => {
                let (y, cache) = self.forward(&reverse_time(x, len, self.d_model), len)?;
                Ok((reverse_time(&y, len, self.d_model), cache))
            }
        }
    }

    pub fn backward(&mut self, cache: &BranchCache<T>, dout: &[T]) -> Result<Vec<T>> {
        let (di, n, k, len) = (self.d_inner, self.d_state, self.d_conv, cache.len);
        let gated: Vec<T> = cache.y.iter().zip(&cache.z).map(|(&v, &g)| v * silu(g)).collect();
        let dg = self.out_proj.backward(&gated, dout, len);
        let mut dy = vec![T::zero(); len * di];
        let mut dz = vec![T::zero(); len * di];
        for i in 0..len * di {
            dy[i] = dg[i] * silu(cache.z[i]);
            dz[i] = dg[i] * cache.y[i] * silu_grad(cache.z[i]);
        }

        let mut p = self.scan_params(cache.b.clone(), cache.c.clone());
        let h0 = vec![T::zero(); n];
        let mut du = vec![T::zero(); len * di];
        let mut d_delta = vec![T::zero(); len * di];
        let mut d_b = vec![T::zero(); len * n];
        let mut d_c = vec![T::zero(); len * n];
        let (mut ucol, mut gcol) = (vec![T::zero(); len], vec![T::zero(); len]);
        for ch in 0..di {
            self.load_channel(&mut p, ch, &cache.delta, len);
            for t in 0..len {
                ucol[t] = cache.u[t * di + ch];
                gcol[t] = dy[t * di + ch];
            }
            let g = scan_backward(&p, &ucol, &h0, &cache.states[ch], &gcol)?;
            for i in 0..n {
                // dA/da_log = A
                self.a_log.grad[ch * n + i] += g.da[i] * p.a[i];
            }
            self.d.grad[ch] += g.dd;
            for t in 0..len {
                du[t * di + ch] += g.dx[t];
                d_delta[t * di + ch] = g.ddelta[t];
            }
            d_b.iter_mut().zip(&g.db).for_each(|(a, &v)| *a += v);
            d_c.iter_mut().zip(&g.dc).for_each(|(a, &v)| *a += v);
        }
        let du_sel = self.selective.backward(&cache.sel, &d_delta, &d_b, &d_c);
        du.iter_mut().zip(&du_sel).for_each(|(a, &v)| *a += v);
        let du_pre = silu_backward(&cache.u_pre, &du);

        let mut dxi = vec![T::zero(); len * di];
        for t in 0..len {
            for ch in 0..di {
                let g = du_pre[t * di + ch];
                self.conv_bias.grad[ch] += g;
                for j in 0..k {
                    let src = t as isize + j as isize - (k as isize - 1);
                    if src >= 0 {
                        let s = src as usize * di + ch;
                        self.conv_weight.grad[ch * k + j] += g * cache.xi[s];
                        dxi[s] += g * self.conv_weight.value[ch * k + j];
                    }
                }
            }
        }
        let mut dxz = Vec::with_capacity(len * 2 * di);
        for t in 0..len {
            dxz.extend_from_slice(&dxi[t * di..(t + 1) * di]);
            dxz.extend_from_slice(&dz[t * di..(t + 1) * di]);
        }
        Ok(self.in_proj.backward(&cache.x, &dxz, len))
    }

    pub fn backward_dir(&mut self, cache: &BranchCache<T>, dout: &[T], dir: Direction) -> Result<Vec<T>> {
        match dir {
            Direction::Forward => self.backward(cache, dout),
            Direction::Backward => {
                let dx = self.backward(cache, &reverse_time(dout, cache.len, self.d_model))?;
                Ok(reverse_time(&dx, cache.len, self.d_model))
            }
        }
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.in_proj.visit(&join(prefix, "in_proj"), f);
        f(&join(prefix, "conv_weight"), &mut self.conv_weight);
        f(&join(prefix, "conv_bias"), &mut self.conv_bias);
        self.selective.visit(&join(prefix, "selective"), f);
        f(&join(prefix, "a_log"), &mut self.a_log);
        f(&join(prefix, "d"), &mut self.d);
        self.out_proj.visit(&join(prefix, "out_proj"), f);
    }
}

/// `y = z + fwd(LN z) + reverse(bwd(reverse(LN z)))`.
#[derive(Debug, Clone)]
pub struct BiMamba<T> {
    pub norm: LayerNorm<T>,
    pub fwd: MambaBranch<T>,
    pub bwd: Option<MambaBranch<T>>,
}

pub struct BiMambaCache<T> {
    norm: LayerNormCache<T>,
    fwd: BranchCache<T>,
    bwd: Option<BranchCache<T>>,
}

impl<T: Real> BiMamba<T> {
    pub fn new(cfg: &BlockConfig, rng: &mut ChaCha8Rng) -> Self {
        let fwd = MambaBranch::new(cfg, rng);
        let bwd = cfg.bidirectional.then(|| MambaBranch::new(cfg, rng));
        BiMamba {
            norm: LayerNorm::new(cfg.d_model),
            fwd,
            bwd,
        }
    }

    /// One `[len][d_model]` sequence.
    pub fn forward(&self, x: &[T], len: usize) -> Result<(Vec<T>, BiMambaCache<T>)> {
        let (n, norm) = self.norm.forward(x);
        let (yf, fwd) = self.fwd.forward_dir(&n, len, Direction::Forward)?;
        let mut y: Vec<T> = x.iter().zip(&yf).map(|(&a, &b)| a + b).collect();
        let bwd = match &self.bwd {
            Some(branch) => {
                let (yb, cache) = branch.forward_dir(&n, len, Direction::Backward)?;
                y.iter_mut().zip(&yb).for_each(|(a, &b)| *a += b);
                Some(cache)
            }
            None => None,
        };
        Ok((y, BiMambaCache { norm, fwd, bwd }))
    }

    pub fn backward(&mut self, cache: &BiMambaCache<T>, dy: &[T]) -> Result<Vec<T>> {
        let mut dn = self.fwd.backward_dir(&cache.fwd, dy, Direction::Forward)?;
        if let (Some(branch), Some(c)) = (self.bwd.as_mut(), cache.bwd.as_ref()) {
            let db = branch.backward_dir(c, dy, Direction::Backward)?;
            dn.iter_mut().zip(&db).for_each(|(a, &b)| *a += b);
        }
        let dx = self.norm.backward(&cache.norm, &dn);
        Ok(dy.iter().zip(&dx).map(|(&a, &b)| a + b).collect())
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.norm.visit(&join(prefix, "norm"), f);
        self.fwd.visit(&join(prefix, "fwd"), f);
        if let Some(b) = &mut self.bwd {
            b.visit(&join(prefix, "bwd"), f);
        }
    }
}

/// Depthwise 1D convolutions along time (pathway A) and frequency
/// (pathway B) with reflect padding, `y = x + A(x) + B(x)`.
#[derive(Debug, Clone)]
pub struct AsymmetricConv<T> {
    pub time_weight: Param<T>,
    pub time_bias: Param<T>,
    pub time_norm: BatchNorm<T>,
    pub freq_weight: Param<T>,
    pub freq_bias: Param<T>,
    pub freq_norm: BatchNorm<T>,
    pub channels: usize,
    pub kernel_t: usize,
    pub kernel_f: usize,
    /// When false the pathways are the bare convolutions (no norm, no SiLU).
    pub normalize: bool,
}

pub struct AsymConvCache<T> {
    x: Vec<T>,
    time_norm: Option<(BatchNormCache<T>, Vec<T>)>,
    freq_norm: Option<(BatchNormCache<T>, Vec<T>)>,
    batch: usize,
    t: usize,
    f: usize,
}

impl<T: Real> AsymmetricConv<T> {
    pub fn new(channels: usize, kernel_t: usize, kernel_f: usize, rng: &mut ChaCha8Rng) -> Self {
        let bt = 1.0 / (kernel_t as f64).sqrt();
        let bf = 1.0 / (kernel_f as f64).sqrt();
        AsymmetricConv {
            time_weight: Param::uniform(&[channels, kernel_t], bt, rng),
            time_bias: Param::uniform(&[channels], bt, rng),
            time_norm: BatchNorm::new(channels),
            freq_weight: Param::uniform(&[channels, kernel_f], bf, rng),
            freq_bias: Param::uniform(&[channels], bf, rng),
            freq_norm: BatchNorm::new(channels),
            channels,
            kernel_t,
            kernel_f,
            normalize: true,
        }
    }

    /// Depthwise conv along one axis of `[batch][t][f][c]`; `axis_time`
    /// selects the time axis.
    fn conv(&self, x: &[T], batch: usize, t: usize, f: usize, axis_time: bool) -> Vec<T> {
        let c = self.channels;
        let (w, b, k) = if axis_time {
            (&self.time_weight.value, &self.time_bias.value, self.kernel_t)
        } else {
            (&self.freq_weight.value, &self.freq_bias.value, self.kernel_f)
        };
        let half = (k / 2) as isize;
        let mut y = vec![T::zero(); x.len()];
        for bi in 0..batch {
            for ti in 0..t {
                for fi in 0..f {
                    let o = ((bi * t + ti) * f + fi) * c;
                    y[o..o + c].copy_from_slice(b);
                    for j in 0..k {
                        let (st, sf) = if axis_time {
                            (reflect(ti as isize + j as isize - half, t), fi)
                        } else {
                            (ti, reflect(fi as isize + j as isize - half, f))
                        };
                        let s = ((bi * t + st) * f + sf) * c;
                        for ch in 0..c {
                            y[o + ch] += w[ch * k + j] * x[s + ch];
                        }
                    }
                }
            }
        }
        y
    }

    fn conv_backward(&mut self, x: &[T], dy: &[T], batch: usize, t: usize, f: usize, axis_time: bool, dx: &mut [T]) {
        let c = self.channels;
        let (w, bias, k) = if axis_time {
            (&mut self.time_weight, &mut self.time_bias, self.kernel_t)
        } else {
            (&mut self.freq_weight, &mut self.freq_bias, self.kernel_f)
        };
        let half = (k / 2) as isize;
        for bi in 0..batch {
            for ti in 0..t {
                for fi in 0..f {
                    let o = ((bi * t + ti) * f + fi) * c;
                    for ch in 0..c {
                        bias.grad[ch] += dy[o + ch];
                    }
                    for j in 0..k {
                        let (st, sf) = if axis_time {
                            (reflect(ti as isize + j as isize - half, t), fi)
                        } else {
                            (ti, reflect(fi as isize + j as isize - half, f))
                        };
                        let s = ((bi * t + st) * f + sf) * c;
                        for ch in 0..c {
                            w.grad[ch * k + j] += dy[o + ch] * x[s + ch];
                            dx[s + ch] += dy[o + ch] * w.value[ch * k + j];
                        }
                    }
                }
            }
        }
    }

    fn pathway(&self, x: &[T], batch: usize, t: usize, f: usize, axis_time: bool, mode: Mode) -> (Vec<T>, Option<(BatchNormCache<T>, Vec<T>)>) {
        let pre = self.conv(x, batch, t, f, axis_time);
        if !self.normalize {
            return (pre, None);
        }
        let norm = if axis_time { &self.time_norm } else { &self.freq_norm };
        let (n, cache) = norm.forward(&pre, batch * t * f, 1, mode);
        (silu_vec(&n), Some((cache, n)))
    }

    pub fn forward(&self, x: &[T], batch: usize, t: usize, f: usize, mode: Mode) -> (Vec<T>, AsymConvCache<T>) {
        let (a, time_norm) = self.pathway(x, batch, t, f, true, mode);
        let (b, freq_norm) = self.pathway(x, batch, t, f, false, mode);
        let y = x.iter().zip(&a).zip(&b).map(|((&x, &a), &b)| x + a + b).collect();
        (
            y,
            AsymConvCache {
                x: x.to_vec(),
                time_norm,
                freq_norm,
                batch,
                t,
                f,
            },
        )
    }

    pub fn backward(&mut self, cache: &AsymConvCache<T>, dy: &[T]) -> Vec<T> {
        let (batch, t, f) = (cache.batch, cache.t, cache.f);
        let mut dx = dy.to_vec();
        for axis_time in [true, false] {
            let norm_cache = if axis_time { &cache.time_norm } else { &cache.freq_norm };
            let dpre = match norm_cache {
                Some((bn_cache, n)) => {
                    let dn = silu_backward(n, dy);
                    let norm = if axis_time { &mut self.time_norm } else { &mut self.freq_norm };
                    norm.backward(bn_cache, &dn, batch * t * f, 1)
                }
                None => dy.to_vec(),
            };
            self.conv_backward(&cache.x, &dpre, batch, t, f, axis_time, &mut dx);
        }
        dx
    }

    pub fn update_running(&mut self, cache: &AsymConvCache<T>) {
        if let Some((c, _)) = &cache.time_norm {
            self.time_norm.update_running(c);
        }
        if let Some((c, _)) = &cache.freq_norm {
            self.freq_norm.update_running(c);
        }
    }

    pub fn norm_caches<'a>(&'a mut self, cache: &'a AsymConvCache<T>) -> Vec<(&'a mut BatchNorm<T>, &'a BatchNormCache<T>)> {
        let mut out = Vec::new();
        if let Some((c, _)) = &cache.time_norm {
            out.push((&mut self.time_norm, c));
        }
        if let Some((c, _)) = &cache.freq_norm {
            out.push((&mut self.freq_norm, c));
        }
        out
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "time_weight"), &mut self.time_weight);
        f(&join(prefix, "time_bias"), &mut self.time_bias);
        self.time_norm.visit(&join(prefix, "time_norm"), f);
        f(&join(prefix, "freq_weight"), &mut self.freq_weight);
        f(&join(prefix, "freq_bias"), &mut self.freq_bias);
        self.freq_norm.visit(&join(prefix, "freq_norm"), f);
    }
}

/// Pre-norm feed-forward with residual: `y = x + W2 silu(W1 LN(x))`.
#[derive(Debug, Clone)]
pub struct FeedForward<T> {
    pub norm: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

pub struct FeedForwardCache<T> {
    norm: LayerNormCache<T>,
    n: Vec<T>,
    h: Vec<T>,
    rows: usize,
}

impl<T: Real> FeedForward<T> {
    pub fn new(d: usize, mult: usize, rng: &mut ChaCha8Rng) -> Self {
        FeedForward {
            norm: LayerNorm::new(d),
            fc1: Linear::new(d, mult * d, true, rng),
            fc2: Linear::new(mult * d, d, true, rng),
        }
    }

    pub fn forward(&self, x: &[T], rows: usize) -> (Vec<T>, FeedForwardCache<T>) {
        let (n, norm) = self.norm.forward(x);
        let h = self.fc1.forward(&n, rows);
        let o = self.fc2.forward(&silu_vec(&h), rows);
        let y = x.iter().zip(&o).map(|(&a, &b)| a + b).collect();
        (y, FeedForwardCache { norm, n, h, rows })
    }

    pub fn backward(&mut self, cache: &FeedForwardCache<T>, dy: &[T]) -> Vec<T> {
        let dact = self.fc2.backward(&silu_vec(&cache.h), dy, cache.rows);
        let dh = silu_backward(&cache.h, &dact);
        let dn = self.fc1.backward(&cache.n, &dh, cache.rows);
        let dx = self.norm.backward(&cache.norm, &dn);
        dy.iter().zip(&dx).map(|(&a, &b)| a + b).collect()
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.norm.visit(&join(prefix, "norm"), f);
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }
}

/// Asymmetric conv, frequency mean, bidirectional mixer, feed-forward; the
/// temporal update `h - mean_f(a)` is added back to every frequency bin.
#[derive(Debug, Clone)]
pub struct BiMamba2dacBlock<T> {
    pub asym: AsymmetricConv<T>,
    pub mixer: BiMamba<T>,
    pub ffn: FeedForward<T>,
    pub d_model: usize,
}

pub struct BlockCache<T> {
    asym: AsymConvCache<T>,
    mixer: Vec<BiMambaCache<T>>,
    ffn: FeedForwardCache<T>,
    batch: usize,
    t: usize,
    f: usize,
}

impl<T: Real> BiMamba2dacBlock<T> {
    pub fn new(cfg: &BlockConfig, rng: &mut ChaCha8Rng) -> Self {
        BiMamba2dacBlock {
            asym: AsymmetricConv::new(cfg.d_model, cfg.kernel_t, cfg.kernel_f, rng),
            mixer: BiMamba::new(cfg, rng),
            ffn: FeedForward::new(cfg.d_model, cfg.ffn_mult, rng),
            d_model: cfg.d_model,
        }
    }

    /// `x: [batch][t][f][d_model]`.
    pub fn forward(&self, x: &[T], batch: usize, t: usize, f: usize, mode: Mode) -> Result<(Vec<T>, BlockCache<T>)> {
        let d = self.d_model;
        if x.len() != batch * t * f * d || t == 0 || f == 0 {
            return Err(SeldError::shape(format!(
                "block: {} values for [{batch}][{t}][{f}][{d}]",
                x.len()
            )));
        }
        let (a, asym) = self.asym.forward(x, batch, t, f, mode);
        let m = freq_mean(&a, batch * t, f, d);
        let mut g = Vec::with_capacity(m.len());
        let mut mixer = Vec::with_capacity(batch);
        for bi in 0..batch {
            let (y, c) = self.mixer.forward(&m[bi * t * d..(bi + 1) * t * d], t)?;
            g.extend(y);
            mixer.push(c);
        }
        let (h, ffn) = self.ffn.forward(&g, batch * t);
        let mut out = a;
        for r in 0..batch * t {
            for fi in 0..f {
                let o = (r * f + fi) * d;
                for ch in 0..d {
                    out[o + ch] += h[r * d + ch] - m[r * d + ch];
                }
            }
        }
        Ok((
            out,
            BlockCache {
                asym,
                mixer,
                ffn,
                batch,
                t,
                f,
            },
        ))
    }

    pub fn backward(&mut self, cache: &BlockCache<T>, dout: &[T]) -> Result<Vec<T>> {
        let (batch, t, f, d) = (cache.batch, cache.t, cache.f, self.d_model);
        let rows = batch * t;
        let mut s = vec![T::zero(); rows * d];
        for r in 0..rows {
            for fi in 0..f {
                let o = (r * f + fi) * d;
                for ch in 0..d {
                    s[r * d + ch] += dout[o + ch];
                }
            }
        }
        let dg = self.ffn.backward(&cache.ffn, &s);
        let mut dm = Vec::with_capacity(rows * d);
        for bi in 0..batch {
            dm.extend(self.mixer.backward(&cache.mixer[bi], &dg[bi * t * d..(bi + 1) * t * d])?);
        }
        let inv_f = T::of(1.0 / f as f64);
        let mut da = dout.to_vec();
        for r in 0..rows {
            for fi in 0..f {
                let o = (r * f + fi) * d;
                for ch in 0..d {
                    da[o + ch] += (dm[r * d + ch] - s[r * d + ch]) * inv_f;
                }
            }
        }
        Ok(self.asym.backward(&cache.asym, &da))
    }

    pub fn update_running(&mut self, cache: &BlockCache<T>) {
        self.asym.update_running(&cache.asym);
    }

    pub fn norm_caches<'a>(&'a mut self, cache: &'a BlockCache<T>) -> Vec<(&'a mut BatchNorm<T>, &'a BatchNormCache<T>)> {
        self.asym.norm_caches(&cache.asym)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.asym.visit(&join(prefix, "asym"), f);
        self.mixer.visit(&join(prefix, "bimamba"), f);
        self.ffn.visit(&join(prefix, "ffn"), f);
    }
}

macro_rules! module_via_visit {
    ($($ty:ident),*) => {$(
        impl<T: Real> Module<T> for $ty<T> {
            fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
                $ty::visit(self, prefix, f)
            }
        }
    )*};
}

module_via_visit!(MambaBranch, BiMamba, AsymmetricConv, FeedForward, BiMamba2dacBlock);

/// Mean over the `f` axis of `[rows][f][d]`.
pub fn freq_mean<T: Real>(x: &[T], rows: usize, f: usize, d: usize) -> Vec<T> {
    let inv = T::of(1.0 / f as f64);
    let mut m = vec![T::zero(); rows * d];
    for r in 0..rows {
        for fi in 0..f {
            let o = (r * f + fi) * d;
            for ch in 0..d {
                m[r * d + ch] += x[o + ch];
            }
        }
    }
    m.iter_mut().for_each(|v| *v *= inv);
    m
}

/// Set every parameter of a module tree to zero (trainable and buffers
/// other than running variances).
pub fn zero_all<T: Real>(visit: impl FnOnce(&mut dyn FnMut(&str, &mut Param<T>))) {
    visit(&mut |name, p| {
        if !name.ends_with("running_var") {
            p.value.iter_mut().for_each(|v| *v = T::zero());
        }
    });
}

/// Uniform random values in `[-1, 1)`, used by tests and benches.
pub fn random_input<T: Real>(n: usize, rng: &mut ChaCha8Rng) -> Vec<T> {
    (0..n).map(|_| T::of(rng.gen_range(-1.0..1.0))).collect()
}
