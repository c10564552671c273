use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::nn::{join, Linear, Param};
use crate::num::{sigmoid, softplus, Real};

/// Input-dependent step sizes and projections for `L` steps.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectiveSteps<T> {
    /// `[L][d_inner]`, strictly positive.
    pub delta: Vec<T>,
    /// `[L][N]`, shared by every channel.
    pub b: Vec<T>,
    /// `[L][N]`, shared by every channel.
    pub c: Vec<T>,
}

pub struct SelectiveCache<T> {
    u: Vec<T>,
    dt_low: Vec<T>,
    dt_pre: Vec<T>,
    len: usize,
}

/// `delta = softplus(dt_proj(x_proj(u)[..rank]) + dt_bias)`, `B` and `C` are
/// the remaining slices of `x_proj(u)`.
#[derive(Debug, Clone)]
pub struct SelectiveProjection<T> {
    pub x_proj: Linear<T>,
    pub dt_proj: Linear<T>,
    pub d_inner: usize,
    pub d_state: usize,
    pub dt_rank: usize,
}

impl<T: Real> SelectiveProjection<T> {
    /// Step-size bias is drawn so that `softplus(bias)` is log-uniform in
    /// `[1e-3, 1e-1]`.
    pub fn new(d_inner: usize, d_state: usize, dt_rank: usize, rng: &mut ChaCha8Rng) -> Self {
        let x_proj = Linear::new(d_inner, dt_rank + 2 * d_state, false, rng);
        let mut dt_proj = Linear::new(dt_rank, d_inner, true, rng);
        let std = (dt_rank as f64).powf(-0.5);
        dt_proj.weight = Param::uniform(&[d_inner, dt_rank], std, rng);
        let bias = (0..d_inner)
            .map(|_| {
                let dt: f64 = rng.gen_range(1e-3f64.ln()..1e-1f64.ln()).exp();
                // inverse softplus
                T::of(dt + (-(-dt).exp_m1()).ln())
            })
            .collect();
        dt_proj.bias = Some(Param::new(&[d_inner], bias));
        SelectiveProjection {
            x_proj,
            dt_proj,
            d_inner,
            d_state,
            dt_rank,
        }
    }

    pub fn zeros(d_inner: usize, d_state: usize, dt_rank: usize) -> Self {
        SelectiveProjection {
            x_proj: Linear::zeros(d_inner, dt_rank + 2 * d_state, false),
            dt_proj: Linear::zeros(dt_rank, d_inner, true),
            d_inner,
            d_state,
            dt_rank,
        }
    }

    pub fn forward(&self, u: &[T], len: usize) -> (SelectiveSteps<T>, SelectiveCache<T>) {
        let (r, n) = (self.dt_rank, self.d_state);
        let width = r + 2 * n;
        let proj = self.x_proj.forward(u, len);
        let mut dt_low = Vec::with_capacity(len * r);
        let mut b = Vec::with_capacity(len * n);
        let mut c = Vec::with_capacity(len * n);
        for row in proj.chunks_exact(width) {
            dt_low.extend_from_slice(&row[..r]);
            b.extend_from_slice(&row[r..r + n]);
            c.extend_from_slice(&row[r + n..]);
        }
        let dt_pre = self.dt_proj.forward(&dt_low, len);
        let delta = dt_pre.iter().map(|&v| softplus(v)).collect();
        (
            SelectiveSteps { delta, b, c },
            SelectiveCache {
                u: u.to_vec(),
                dt_low,
                dt_pre,
                len,
            },
        )
    }

    /// Returns `dL/du` and accumulates projection gradients.
    pub fn backward(&mut self, cache: &SelectiveCache<T>, d_delta: &[T], d_b: &[T], d_c: &[T]) -> Vec<T> {
        let (r, n, len) = (self.dt_rank, self.d_state, cache.len);
        let d_pre: Vec<T> = cache
            .dt_pre
            .iter()
            .zip(d_delta)
            .map(|(&p, &g)| g * sigmoid(p))
            .collect();
        let d_low = self.dt_proj.backward(&cache.dt_low, &d_pre, len);
        let width = r + 2 * n;
        let mut d_proj = vec![T::zero(); len * width];
        for k in 0..len {
            let row = &mut d_proj[k * width..(k + 1) * width];
            row[..r].copy_from_slice(&d_low[k * r..(k + 1) * r]);
            row[r..r + n].copy_from_slice(&d_b[k * n..(k + 1) * n]);
            row[r + n..].copy_from_slice(&d_c[k * n..(k + 1) * n]);
        }
        self.x_proj.backward(&cache.u, &d_proj, len)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.x_proj.visit(&join(prefix, "x_proj"), f);
        self.dt_proj.visit(&join(prefix, "dt_proj"), f);
    }
}
