use super::{phi, SsmParams};
use crate::error::{Result, SeldError};
use crate::num::Real;

/// Output of one scan lane.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanResult<T> {
    pub y: Vec<T>,
    pub final_state: Vec<T>,
    /// `[L][N]` hidden states after each step, when requested.
    pub states: Option<Vec<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanMode {
    Sequential,
    Chunked(usize),
}

pub fn scan<T: Real>(
    params: &SsmParams<T>,
    x: &[T],
    h0: &[T],
    mode: ScanMode,
    keep_states: bool,
) -> Result<ScanResult<T>> {
    match mode {
        ScanMode::Sequential => scan_sequential(params, x, h0, keep_states),
        ScanMode::Chunked(c) => scan_chunked(params, x, h0, c, keep_states),
    }
}

fn check_inputs<T: Real>(params: &SsmParams<T>, x: &[T], h0: &[T]) -> Result<()> {
    params.validate(x.len())?;
    if h0.len() != params.n_state() {
        return Err(SeldError::shape(format!(
            "scan: h0 has {} values, state size is {}",
            h0.len(),
            params.n_state()
        )));
    }
    Ok(())
}

/// Per-step decay and input gain: `a_bar[n] = exp(delta a_n)` and
/// `b_bar[n] = delta * phi(delta a_n) * b_n`.
#[inline]
fn step_coefficients<T: Real>(params: &SsmParams<T>, k: usize, a_bar: &mut [T], b_bar: &mut [T]) {
    let delta = params.delta_at(k);
    let b = params.b_at(k);
    for n in 0..params.a.len() {
        let z = delta * params.a[n];
        a_bar[n] = z.exp();
        b_bar[n] = delta * phi(z) * b[n];
    }
}

/// Left-to-right recurrence `h_k = a_bar_k * h_{k-1} + b_bar_k x_k`,
/// `y_k = C_k . h_k (+ D x_k)`.
pub fn scan_sequential<T: Real>(
    params: &SsmParams<T>,
    x: &[T],
    h0: &[T],
    keep_states: bool,
) -> Result<ScanResult<T>> {
    check_inputs(params, x, h0)?;
    let n = params.n_state();
    let len = x.len();
    let mut h = h0.to_vec();
    let mut y = Vec::with_capacity(len);
    let mut states = keep_states.then(|| Vec::with_capacity(len * n));
    let mut a_bar = vec![T::zero(); n];
    let mut b_bar = vec![T::zero(); n];
    for (k, &xk) in x.iter().enumerate() {
        step_coefficients(params, k, &mut a_bar, &mut b_bar);
        let c = params.c_at(k);
        let mut yk = T::zero();
        for i in 0..n {
            h[i] = a_bar[i] * h[i] + b_bar[i] * xk;
            yk += c[i] * h[i];
        }
        if params.skip_term {
            yk += params.d * xk;
        }
        y.push(yk);
        if let Some(s) = states.as_mut() {
            s.extend_from_slice(&h);
        }
    }
    Ok(ScanResult {
        y,
        final_state: h,
        states,
    })
}

/// Chunked scan. Inside each chunk of `chunk_len` steps the outputs are
/// `y = M x + C_i . (prod_{k<=i} a_bar_k * h_prev)` with the transfer matrix
/// `M[i][j] = C_i . (prod_{k=j+1..i} a_bar_k * b_bar_j)` for `j <= i`;
/// only the chunk-boundary state is carried recurrently.
pub fn scan_chunked<T: Real>(
    params: &SsmParams<T>,
    x: &[T],
    h0: &[T],
    chunk_len: usize,
    keep_states: bool,
) -> Result<ScanResult<T>> {
    if chunk_len == 0 {
        return Err(SeldError::invalid("scan: chunk_len must be at least 1"));
    }
    if chunk_len == 1 {
        // a one-step chunk is the recurrence itself
        return scan_sequential(params, x, h0, keep_states);
    }
    check_inputs(params, x, h0)?;
    let n = params.n_state();
    let len = x.len();
    let mut y = vec![T::zero(); len];
    let mut states = keep_states.then(|| vec![T::zero(); len * n]);
    let mut h_prev = h0.to_vec();

    let mut a_bar = vec![T::zero(); chunk_len * n];
    let mut b_bar = vec![T::zero(); chunk_len * n];
    let mut m = vec![T::zero(); chunk_len * chunk_len];
    let mut p = vec![T::zero(); n];
    let mut h_next = vec![T::zero(); n];

    let mut start = 0;
    while start < len {
        let cl = chunk_len.min(len - start);
        for i in 0..cl {
            step_coefficients(
                params,
                start + i,
                &mut a_bar[i * n..(i + 1) * n],
                &mut b_bar[i * n..(i + 1) * n],
            );
        }
        let last = cl - 1;

        // transfer operator, one column at a time
        h_next.iter_mut().for_each(|v| *v = T::zero());
        for j in 0..cl {
            p.copy_from_slice(&b_bar[j * n..(j + 1) * n]);
            let xj = x[start + j];
            for i in j..cl {
                if i > j {
                    let decay = &a_bar[i * n..(i + 1) * n];
                    for (pv, &dv) in p.iter_mut().zip(decay) {
                        *pv *= dv;
                    }
                }
                let c = params.c_at(start + i);
                m[i * chunk_len + j] = c.iter().zip(&p).map(|(&cv, &pv)| cv * pv).sum();
                if let Some(s) = states.as_mut() {
                    let row = &mut s[(start + i) * n..(start + i + 1) * n];
                    for (sv, &pv) in row.iter_mut().zip(&p) {
                        *sv += pv * xj;
                    }
                }
            }
            for (hv, &pv) in h_next.iter_mut().zip(&p) {
                *hv += pv * xj;
            }
        }

        // y = M x + state injection
        p.copy_from_slice(&h_prev);
        for i in 0..cl {
            let decay = &a_bar[i * n..(i + 1) * n];
            for (pv, &dv) in p.iter_mut().zip(decay) {
                *pv *= dv;
            }
            let c = params.c_at(start + i);
            let mut yi: T = c.iter().zip(&p).map(|(&cv, &pv)| cv * pv).sum();
            let row = &m[i * chunk_len..i * chunk_len + i + 1];
            for (mv, &xv) in row.iter().zip(&x[start..start + i + 1]) {
                yi += *mv * xv;
            }
            if params.skip_term {
                yi += params.d * x[start + i];
            }
            y[start + i] = yi;
            if let Some(s) = states.as_mut() {
                let srow = &mut s[(start + i) * n..(start + i + 1) * n];
                for (sv, &pv) in srow.iter_mut().zip(&p) {
                    *sv += pv;
                }
            }
            if i == last {
                for (hv, &pv) in h_next.iter_mut().zip(&p) {
                    *hv += pv;
                }
            }
        }
        std::mem::swap(&mut h_prev, &mut h_next);
        start += cl;
    }
    Ok(ScanResult {
        y,
        final_state: h_prev,
        states,
    })
}
