//! Diagonal selective state-space kernels.
//!
//! The continuous system `h' = A h + B x`, `y = C^T h + D x` is discretized
//! per step with zero-order hold and scanned either step by step
//! ([`scan_sequential`]) or in chunks whose interior is evaluated through the
//! materialized lower-triangular transfer operator ([`scan_chunked`]).
//! [`scan_backward`] runs the adjoint recurrence right to left.

pub mod bench;
mod backward;
mod scan;
mod selective;

pub use backward::{scan_backward, SsmGrads};
pub use scan::{scan, scan_chunked, scan_sequential, ScanMode, ScanResult};
pub use selective::{SelectiveCache, SelectiveProjection, SelectiveSteps};

use crate::error::{Result, SeldError};
use crate::num::Real;

/// Below this `|delta * a|` the input gain uses its analytic limit `delta * b`.
pub const ZOH_LIMIT: f64 = 1e-8;

/// Parameters of one scan lane with a diagonal state matrix.
///
/// `b`, `c` hold `L * N` values in selective mode or `N` values shared by
/// every step (time-invariant mode). `delta` holds `L` values or a single one.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmParams<T> {
    /// Diagonal of the continuous state matrix.
    pub a: Vec<T>,
    pub b: Vec<T>,
    pub c: Vec<T>,
    pub delta: Vec<T>,
    pub d: T,
    /// Adds `D * x_k` to the output.
    pub skip_term: bool,
}

impl<T: Real> SsmParams<T> {
    pub fn n_state(&self) -> usize {
        self.a.len()
    }

    pub fn is_selective(&self) -> bool {
        self.delta.len() != 1 || self.b.len() != self.a.len()
    }

    #[inline]
    pub(crate) fn b_at(&self, k: usize) -> &[T] {
        let n = self.a.len();
        if self.b.len() == n {
            &self.b
        } else {
            &self.b[k * n..(k + 1) * n]
        }
    }

    #[inline]
    pub(crate) fn c_at(&self, k: usize) -> &[T] {
        let n = self.a.len();
        if self.c.len() == n {
            &self.c
        } else {
            &self.c[k * n..(k + 1) * n]
        }
    }

    #[inline]
    pub(crate) fn delta_at(&self, k: usize) -> T {
        if self.delta.len() == 1 {
            self.delta[0]
        } else {
            self.delta[k]
        }
    }

    /// Checks shapes against a sequence of `len` steps and the value domain.
    pub fn validate(&self, len: usize) -> Result<()> {
        let n = self.a.len();
        if n == 0 {
            return Err(SeldError::shape("ssm: empty state"));
        }
        for (name, v) in [("b", &self.b), ("c", &self.c)] {
            if v.len() != n && v.len() != len * n {
                return Err(SeldError::shape(format!(
                    "ssm: {name} has {} values, expected {n} or {}",
                    v.len(),
                    len * n
                )));
            }
        }
        if self.delta.len() != 1 && self.delta.len() != len {
            return Err(SeldError::shape(format!(
                "ssm: delta has {} values, expected 1 or {len}",
                self.delta.len()
            )));
        }
        let all_finite = |v: &[T]| v.iter().all(|x| x.is_finite());
        if !(all_finite(&self.a) && all_finite(&self.b) && all_finite(&self.c) && self.d.is_finite()) {
            return Err(SeldError::NonFinite("ssm parameters"));
        }
        if !self.delta.iter().all(|&d| d.is_finite() && d > T::zero()) {
            return Err(SeldError::invalid("ssm: delta must be finite and positive"));
        }
        Ok(())
    }

    /// All diagonal entries of A are non-positive.
    pub fn is_stable(&self) -> bool {
        self.a.iter().all(|&a| a <= T::zero())
    }
}

/// Zero-order-hold discretization of a diagonal system.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteSsm<T> {
    pub a_bar: Vec<T>,
    pub b_bar: Vec<T>,
}

/// `(exp(z) - 1) / z`. Below [`ZOH_LIMIT`] the quotient cancels, so its
/// expansion `1 + z/2` is used instead.
#[inline]
pub(crate) fn phi<T: Real>(z: T) -> T {
    if z.abs() < T::of(ZOH_LIMIT) {
        T::one() + z * T::of(0.5)
    } else {
        z.exp_m1() / z
    }
}

/// `(z e^z - (e^z - 1)) / z^2`, the derivative of `phi(z) * z` scaled; used
/// for `d b_bar / d a`. Series near zero avoids cancellation.
#[inline]
pub(crate) fn psi<T: Real>(z: T) -> T {
    if z.abs() < T::of(1e-3) {
        let z2 = z * z;
        T::of(0.5) + z / T::of(3.0) + z2 / T::of(8.0) + z2 * z / T::of(30.0) + z2 * z2 / T::of(144.0)
    } else {
        (z * z.exp() - z.exp_m1()) / (z * z)
    }
}

/// `A_bar = exp(delta A)`, `B_bar = (delta A)^-1 (exp(delta A) - I) delta B`
/// for diagonal `A`, evaluated per entry.
pub fn discretize<T: Real>(a: &[T], b: &[T], delta: T) -> Result<DiscreteSsm<T>> {
    if a.len() != b.len() {
        return Err(SeldError::shape("discretize: a and b lengths differ"));
    }
    if !delta.is_finite() || !a.iter().chain(b).all(|v| v.is_finite()) {
        return Err(SeldError::NonFinite("discretize inputs"));
    }
    if delta <= T::zero() {
        return Err(SeldError::invalid("discretize: delta must be positive"));
    }
    let mut a_bar = Vec::with_capacity(a.len());
    let mut b_bar = Vec::with_capacity(a.len());
    for (&an, &bn) in a.iter().zip(b) {
        let z = delta * an;
        a_bar.push(z.exp());
        b_bar.push(delta * phi(z) * bn);
    }
    Ok(DiscreteSsm { a_bar, b_bar })
}

/// S4D-real initialization of the diagonal: `-(1, 2, ..., N)`.
pub fn s4d_real_diagonal<T: Real>(n: usize) -> Vec<T> {
    (1..=n).map(|i| -T::of(i as f64)).collect()
}
