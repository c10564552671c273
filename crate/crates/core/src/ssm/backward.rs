use super::{phi, psi, SsmParams};
use crate::error::{Result, SeldError};
use crate::num::Real;

/// Gradients of a scalar loss with respect to every scan input. Shapes
/// mirror the corresponding [`SsmParams`] fields (broadcast fields receive
/// the sum over steps).
#[derive(Debug, Clone, PartialEq)]
pub struct SsmGrads<T> {
    pub da: Vec<T>,
    pub db: Vec<T>,
    pub dc: Vec<T>,
    pub dd: T,
    pub ddelta: Vec<T>,
    pub dx: Vec<T>,
    pub dh0: Vec<T>,
}

/// Adjoint of the scan, including the zero-order-hold discretization.
///
/// `states` are the `[L][N]` hidden states from either forward variant.
/// The adjoint state runs right to left:
/// `g_k = C_k dy_k + a_bar_{k+1} * g_{k+1}`.
pub fn scan_backward<T: Real>(
    params: &SsmParams<T>,
    x: &[T],
    h0: &[T],
    states: &[T],
    grad_y: &[T],
) -> Result<SsmGrads<T>> {
    params.validate(x.len())?;
    let n = params.n_state();
    let len = x.len();
    if grad_y.len() != len || states.len() != len * n || h0.len() != n {
        return Err(SeldError::shape("scan_backward: inconsistent shapes"));
    }
    let mut g = SsmGrads {
        da: vec![T::zero(); n],
        db: vec![T::zero(); params.b.len()],
        dc: vec![T::zero(); params.c.len()],
        dd: T::zero(),
        ddelta: vec![T::zero(); params.delta.len()],
        dx: vec![T::zero(); len],
        dh0: vec![T::zero(); n],
    };
    let b_selective = params.b.len() != n;
    let c_selective = params.c.len() != n;
    let delta_selective = params.delta.len() != 1;

    // adjoint of h_k, carried from step k+1
    let mut adj = vec![T::zero(); n];
    let mut a_bar_next = vec![T::zero(); n];
    for k in (0..len).rev() {
        let gy = grad_y[k];
        let xk = x[k];
        let h = &states[k * n..(k + 1) * n];
        let h_prev = if k == 0 { h0 } else { &states[(k - 1) * n..k * n] };
        let c = params.c_at(k);
        let b = params.b_at(k);
        let delta = params.delta_at(k);

        if params.skip_term {
            g.dd += gy * xk;
            g.dx[k] += params.d * gy;
        }
        let dc_off = if c_selective { k * n } else { 0 };
        let db_off = if b_selective { k * n } else { 0 };
        let mut ddelta = T::zero();
        for i in 0..n {
            // contributions from y_k and from h_{k+1} = a_bar_{k+1} h_k + ...
            let gi = c[i] * gy + if k + 1 < len { a_bar_next[i] * adj[i] } else { T::zero() };
            adj[i] = gi;
            g.dc[dc_off + i] += gy * h[i];

            let a = params.a[i];
            let z = delta * a;
            let ez = z.exp();
            let gain = delta * phi(z);
            let d_abar = gi * h_prev[i];
            let d_bbar = gi * xk;
            g.dx[k] += gain * b[i] * gi;
            g.db[db_off + i] += d_bbar * gain;
            // a_bar = exp(delta a);  b_bar = expm1(delta a) / a * b
            ddelta += d_abar * a * ez + d_bbar * b[i] * ez;
            g.da[i] += d_abar * delta * ez + d_bbar * b[i] * delta * delta * psi(z);
            a_bar_next[i] = ez;
        }
        if delta_selective {
            g.ddelta[k] += ddelta;
        } else {
            g.ddelta[0] += ddelta;
        }
    }
    if len > 0 {
        for i in 0..n {
            g.dh0[i] = a_bar_next[i] * adj[i];
        }
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::super::scan_sequential;
    use super::*;

    #[test]
    fn zero_upstream_gradient_gives_zero() {
        let p = SsmParams {
            a: vec![-1.0f64, -2.0],
            b: vec![0.5; 8],
            c: vec![0.3; 8],
            delta: vec![0.1; 4],
            d: 0.7,
            skip_term: true,
        };
        let x = [1.0, -2.0, 0.5, 3.0];
        let r = scan_sequential(&p, &x, &[0.2, 0.1], true).unwrap();
        let g = scan_backward(&p, &x, &[0.2, 0.1], r.states.as_ref().unwrap(), &[0.0; 4]).unwrap();
        assert!(g.da.iter().chain(&g.db).chain(&g.dc).chain(&g.ddelta).chain(&g.dx).chain(&g.dh0).all(|&v| v == 0.0));
        assert_eq!(g.dd, 0.0);
    }

    #[test]
    fn skip_only_system_passes_gradient_through_d() {
        let p = SsmParams {
            a: vec![-1.0f64],
            b: vec![0.4],
            c: vec![0.0],
            delta: vec![0.3],
            d: 1.7,
            skip_term: true,
        };
        let x = [0.2, 0.4, -0.1];
        let gy = [1.0, -2.0, 0.5];
        let r = scan_sequential(&p, &x, &[0.0], true).unwrap();
        let g = scan_backward(&p, &x, &[0.0], r.states.as_ref().unwrap(), &gy).unwrap();
        for (dx, gy) in g.dx.iter().zip(gy) {
            assert!((dx - 1.7 * gy).abs() < 1e-15);
        }
    }
}
