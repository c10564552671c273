//! Reference implementations shared by the integration and acceptance
//! tests. Everything here is written independently of the library code it
//! checks: dense matrix algebra, brute force and finite differences.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use seld_core::dataset::synth_clip;
use seld_core::frontend::{extract_features, StereoClip};
use seld_core::loss::{pit_loss, pit_loss_backward};
use seld_core::maccdoa::{angular_distance, Event, EventList, MaccdoaTensor};
use seld_core::model::{ModelConfig, SeldModel};
use seld_core::nn::{Mode, Module};
use seld_core::ssm::{scan, scan_backward, ScanMode, SsmParams};
use seld_core::{LABEL_FRAMES, N_CLASSES, N_TRACKS};

/// `a @ b` for square row-major matrices.
fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            for j in 0..n {
                c[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    c
}

/// Dense matrix exponential: scale to norm <= 1/2, 20-term Taylor series,
/// square back.
pub fn expm(m: &[f64], n: usize) -> Vec<f64> {
    let norm = (0..n)
        .map(|i| (0..n).map(|j| m[i * n + j].abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let mut s = 0;
    while norm / 2f64.powi(s) > 0.5 {
        s += 1;
    }
    let scaled: Vec<f64> = m.iter().map(|v| v / 2f64.powi(s)).collect();
    let mut sum = vec![0.0; n * n];
    let mut term = vec![0.0; n * n];
    for i in 0..n {
        sum[i * n + i] = 1.0;
        term[i * n + i] = 1.0;
    }
    for k in 1..=20 {
        term = matmul(&term, &scaled, n);
        term.iter_mut().for_each(|v| *v /= k as f64);
        sum.iter_mut().zip(&term).for_each(|(s, t)| *s += t);
    }
    for _ in 0..s {
        sum = matmul(&sum, &sum, n);
    }
    sum
}

/// Zero-order hold through the block exponential
/// `exp([[dA, dB], [0, 0]]) = [[A_bar, B_bar], [0, 1]]` with dense `A`.
pub fn zoh_dense(a: &[f64], n: usize, b: &[f64], delta: f64) -> (Vec<f64>, Vec<f64>) {
    let m = n + 1;
    let mut aug = vec![0.0; m * m];
    for i in 0..n {
        for j in 0..n {
            aug[i * m + j] = delta * a[i * n + j];
        }
        aug[i * m + n] = delta * b[i];
    }
    let e = expm(&aug, m);
    let mut a_bar = vec![0.0; n * n];
    let mut b_bar = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            a_bar[i * n + j] = e[i * m + j];
        }
        b_bar[i] = e[i * m + n];
    }
    (a_bar, b_bar)
}

/// Diagonal `A` embedded in a dense matrix.
pub fn diag(a: &[f64]) -> Vec<f64> {
    let n = a.len();
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = a[i];
    }
    m
}

/// Output of a diagonal selective system computed from its full
/// input-output operator, `y_i = sum_j C_i . (prod_{k=j+1..i} A_k) B_j x_j
/// + C_i . (prod_{k<=i} A_k) h0 + D x_i`, with the discretization taken
/// from the dense block exponential. Quadratic in length.
#[allow(clippy::too_many_arguments)]
pub fn scan_operator(
    a: &[f64],
    b: &[f64],
    c: &[f64],
    delta: &[f64],
    d: f64,
    skip: bool,
    x: &[f64],
    h0: &[f64],
) -> Vec<f64> {
    let n = a.len();
    let len = x.len();
    let at = |v: &[f64], k: usize| -> Vec<f64> {
        if v.len() == n {
            v.to_vec()
        } else {
            v[k * n..(k + 1) * n].to_vec()
        }
    };
    let dl = |k: usize| if delta.len() == 1 { delta[0] } else { delta[k] };
    let mut a_bar = Vec::with_capacity(len);
    let mut b_bar = Vec::with_capacity(len);
    for k in 0..len {
        let (ab, bb) = zoh_dense(&diag(a), n, &at(b, k), dl(k));
        a_bar.push((0..n).map(|i| ab[i * n + i]).collect::<Vec<_>>());
        b_bar.push(bb);
    }
    let mut y = vec![0.0; len];
    for i in 0..len {
        let ci = at(c, i);
        let mut acc = if skip { d * x[i] } else { 0.0 };
        for s in 0..n {
            let mut decay = 1.0;
            for k in 0..=i {
                decay *= a_bar[k][s];
            }
            acc += ci[s] * decay * h0[s];
            for j in 0..=i {
                let mut p = 1.0;
                for k in j + 1..=i {
                    p *= a_bar[k][s];
                }
                acc += ci[s] * p * b_bar[j][s] * x[j];
            }
        }
        y[i] = acc;
    }
    y
}

/// Central difference of `f` along coordinate `i`.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut p = x.to_vec();
    p[i] += h;
    let fp = f(&p);
    p[i] = x[i] - h;
    let fm = f(&p);
    (fp - fm) / (2.0 * h)
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Minimum total cost of a rectangular assignment by enumerating every
/// injective map from the smaller side into the larger.
pub fn brute_force_min_cost(cost: &[f64], rows: usize, cols: usize) -> f64 {
    fn go(cost: &[f64], rows: usize, cols: usize, r: usize, used: &mut Vec<bool>, transpose: bool) -> f64 {
        let (small, _) = if transpose { (cols, rows) } else { (rows, cols) };
        if r == small {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for c in 0..used.len() {
            if used[c] {
                continue;
            }
            used[c] = true;
            let v = if transpose { cost[c * cols + r] } else { cost[r * cols + c] };
            best = best.min(v + go(cost, rows, cols, r + 1, used, transpose));
            used[c] = false;
        }
        best
    }
    if rows == 0 || cols == 0 {
        return 0.0;
    }
    let transpose = rows > cols;
    let mut used = vec![false; if transpose { rows } else { cols }];
    go(cost, rows, cols, 0, &mut used, transpose)
}

/// Azimuths in `[-180, 180)` pairwise further apart than `min_sep`.
pub fn spread_azimuths(count: usize, min_sep: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let az: Vec<f64> = (0..count).map(|_| rng.gen_range(-180.0..180.0)).collect();
        let ok = (0..count).all(|i| (i + 1..count).all(|j| angular_distance(az[i], az[j]) > min_sep));
        if ok {
            return az;
        }
    }
}

/// Random label set on `frames x classes`: each active (frame, class) holds
/// one event, or up to `max_per_cell` well-separated events when
/// `overlapping`.
pub fn random_events(
    frames: u32,
    classes: usize,
    max_per_cell: usize,
    overlapping: bool,
    rng: &mut ChaCha8Rng,
) -> Vec<Event> {
    let mut out = Vec::new();
    for f in 0..frames {
        for c in 0..classes {
            if !rng.gen_bool(0.15) {
                continue;
            }
            let k = if overlapping { rng.gen_range(1..=max_per_cell) } else { 1 };
            for az in spread_azimuths(k, 40.0, rng) {
                // distances on a 1 mm grid so they survive CSV text exactly
                let dist = (rng.gen_range(0.5f64..5.0) * 1000.0).round() / 1000.0;
                out.push(Event::new(f, c, az, dist));
            }
        }
    }
    out
}

/// Uniform samples in `[-1, 1)` rounded to `bits`-bit PCM levels.
pub fn pcm_samples(n: usize, bits: i32, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let scale = 2f64.powi(bits - 1);
    (0..n)
        .map(|_| (rng.gen_range(-1.0f64..1.0) * scale).round().clamp(-scale, scale - 1.0) / scale)
        .collect()
}

/// Random diagonal lane: stable `A`, per-step `B`, `C`, `delta` when
/// `selective`, plus input and initial state.
pub fn ssm_lane(len: usize, n: usize, selective: bool, rng: &mut ChaCha8Rng) -> (SsmParams<f64>, Vec<f64>, Vec<f64>) {
    let mut draw = |lo: f64, hi: f64, k: usize| -> Vec<f64> { (0..k).map(|_| rng.gen_range(lo..hi)).collect() };
    let per = if selective { len } else { 1 };
    let params = SsmParams {
        a: draw(-3.0, -0.05, n),
        b: draw(-1.0, 1.0, per * n),
        c: draw(-1.0, 1.0, per * n),
        delta: draw(0.01, 0.5, per),
        d: draw(-1.0, 1.0, 1)[0],
        skip_term: true,
    };
    let x = draw(-1.0, 1.0, len);
    let h0 = draw(-0.5, 0.5, n);
    (params, x, h0)
}

/// Worst relative error of every scan gradient against central differences
/// of `sum_k w_k y_k` (state 4, length 16, step 1e-5).
pub fn scan_gradient_error(selective: bool, mode: ScanMode, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, len) = (4, 16);
    let (p, x, h0) = ssm_lane(len, n, selective, &mut rng);
    let w: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let fwd = scan(&p, &x, &h0, mode, true).unwrap();
    let g = scan_backward(&p, &x, &h0, fwd.states.as_ref().unwrap(), &w).unwrap();
    let objective = |p: &SsmParams<f64>, x: &[f64], h0: &[f64]| -> f64 {
        let y = scan(p, x, h0, mode, false).unwrap().y;
        y.iter().zip(&w).map(|(a, b)| a * b).sum()
    };
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut check = |analytic: &[f64], get: &dyn Fn(&[f64]) -> f64, base: &[f64]| {
        for i in 0..base.len() {
            let fd = central_diff(&mut |v| get(v), base, i, h);
            worst = worst.max(rel_err(analytic[i], fd, 1e-6));
        }
    };
    check(&g.da, &|v| objective(&SsmParams { a: v.to_vec(), ..p.clone() }, &x, &h0), &p.a);
    check(&g.db, &|v| objective(&SsmParams { b: v.to_vec(), ..p.clone() }, &x, &h0), &p.b);
    check(&g.dc, &|v| objective(&SsmParams { c: v.to_vec(), ..p.clone() }, &x, &h0), &p.c);
    check(&g.ddelta, &|v| objective(&SsmParams { delta: v.to_vec(), ..p.clone() }, &x, &h0), &p.delta);
    check(&[g.dd], &|v| objective(&SsmParams { d: v[0], ..p.clone() }, &x, &h0), &[p.d]);
    check(&g.dx, &|v| objective(&p, v, &h0), &x);
    check(&g.dh0, &|v| objective(&p, &x, v), &h0);
    worst
}

/// Random Multi-ACCDOA-shaped tensor: unit-range vector parts, distances
/// in `[0, 5)`.
pub fn random_maccdoa(frames: usize, classes: usize, rng: &mut ChaCha8Rng) -> MaccdoaTensor {
    let data = (0..frames * 3 * classes * 3)
        .map(|i| if i % 3 == 2 { rng.gen_range(0.0..5.0) } else { rng.gen_range(-1.0..1.0) })
        .collect();
    MaccdoaTensor::from_vec(frames, 3, classes, data).unwrap()
}

/// Worst relative error of the PIT loss gradient against central
/// differences on a random `3 x 3 x 4` pair. Continuous draws keep the
/// point away from permutation ties.
pub fn loss_gradient_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pred = random_maccdoa(3, 4, &mut rng);
    let target = random_maccdoa(3, 4, &mut rng);
    let l = pit_loss(&pred, &target).unwrap();
    let g = pit_loss_backward(&pred, &target, &l.chosen_permutation).unwrap();
    let mut worst = 0.0f64;
    for i in 0..pred.data.len() {
        let fd = central_diff(
            &mut |v| {
                let x = MaccdoaTensor::from_vec(3, 3, 4, v.to_vec()).unwrap();
                pit_loss(&x, &target).unwrap().total
            },
            &pred.data,
            i,
            1e-6,
        );
        worst = worst.max(rel_err(g.data[i], fd, 1e-3));
    }
    worst
}

/// Analytic and finite-difference derivatives of a random linear readout
/// of the tiny model, in float64 on a 0.5 s clip, for `samples` randomly
/// chosen trainable scalars. Returns `(name, analytic, numeric)` triples.
pub fn model_gradient_samples(samples: usize, seed: u64) -> Vec<(String, f64, f64)> {
    let full = synth_clip(7, 0).audio;
    let n = 12_000;
    let clip = StereoClip::new(full.left[..n].to_vec(), full.right[..n].to_vec(), 24_000).unwrap();
    let feat = extract_features(&clip).unwrap();
    let x: Vec<f64> = feat.data.iter().map(|&v| v as f64).collect();
    let frames = feat.frames;

    let mut model = SeldModel::<f64>::new(ModelConfig::tiny(), 8).unwrap();
    model.recalibrate_norms(&[&x], frames).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out_len = LABEL_FRAMES * N_TRACKS * N_CLASSES * 3;
    let w: Vec<f64> = (0..out_len).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let objective = |m: &SeldModel<f64>| -> f64 {
        let c = m.forward(&x, 1, frames, Mode::Eval).unwrap();
        c.output().iter().zip(&w).map(|(a, b)| a * b).sum()
    };

    model.zero_grad();
    let cache = model.forward(&x, 1, frames, Mode::Eval).unwrap();
    model.backward(&cache, &w).unwrap();

    let mut params = Vec::new();
    model.visit("", &mut |name, p| {
        if p.trainable {
            for i in 0..p.len() {
                params.push((name.to_string(), i, p.value[i], p.grad[i]));
            }
        }
    });
    (0..samples)
        .map(|_| {
            let (name, i, value, grad) = params[rng.gen_range(0..params.len())].clone();
            let mut probe = model.clone();
            let fd = central_diff(
                &mut |v| {
                    probe.visit("", &mut |n, p| {
                        if n == name {
                            p.value[i] = v[0];
                        }
                    });
                    objective(&probe)
                },
                &[value],
                0,
                1e-6,
            );
            (format!("{name}[{i}]"), grad, fd)
        })
        .collect()
}

/// Events equal up to track hint, azimuth compared on the circle.
pub fn same_events(a: &EventList, b: &EventList, az_tol: f64) -> bool {
    a.len() == b.len()
        && a.iter().zip(b.iter()).all(|(p, q)| {
            p.frame == q.frame
                && p.class_id == q.class_id
                && p.distance_m == q.distance_m
                && angular_distance(p.azimuth_deg, q.azimuth_deg) <= az_tol
        })
}

/// Per (frame, class) multisets compared by greedy nearest azimuth.
pub fn same_multisets(a: &EventList, b: &EventList) -> bool {
    if a.len() != b.len() {
        return false;
    }
    let mut left: Vec<&Event> = b.iter().collect();
    for e in a.iter() {
        let hit = left.iter().position(|o| {
            o.frame == e.frame
                && o.class_id == e.class_id
                && (o.distance_m - e.distance_m).abs() < 1e-12
                && angular_distance(o.azimuth_deg, e.azimuth_deg) <= 1e-6
        });
        match hit {
            Some(i) => {
                left.swap_remove(i);
            }
            None => return false,
        }
    }
    true
}
