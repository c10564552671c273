//! Track-permutation-invariant MSE for Multi-ACCDOA regression.

use crate::error::{Result, SeldError};
use crate::maccdoa::MaccdoaTensor;

/// Weight applied to the distance component before squaring.
pub const LAMBDA_DIST: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    /// Mean over classes, one value per frame.
    pub per_frame: Vec<f64>,
    /// Index into [`track_permutations`] per `(frame, class)`.
    pub chosen_permutation: Vec<usize>,
}

/// All permutations of `0..n` in lexicographic order; index 0 is identity.
pub fn track_permutations(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (0..n).collect();
    loop {
        out.push(cur.clone());
        // next lexicographic permutation
        let Some(i) = (1..n).rev().find(|&i| cur[i - 1] < cur[i]) else {
            break;
        };
        let j = (i..n).rev().find(|&j| cur[j] > cur[i - 1]).unwrap();
        cur.swap(i - 1, j);
        cur[i..].reverse();
    }
    out
}

fn cell_loss(pred: &MaccdoaTensor, target: &MaccdoaTensor, f: usize, c: usize, perm: &[usize], lambda: f64) -> f64 {
    let mut acc = 0.0;
    for (t, &src) in perm.iter().enumerate() {
        let p = pred.get(f, src, c);
        let q = target.get(f, t, c);
        acc += (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (lambda * (p[2] - q[2])).powi(2);
    }
    acc / (3 * perm.len()) as f64
}

/// Per `(frame, class)`: minimum over track permutations of the mean squared
/// error over `(x, y, lambda * distance)`; prediction track `perm[t]` is
/// compared with target track `t`. Ties go to the lowest permutation index.
pub fn pit_loss(pred: &MaccdoaTensor, target: &MaccdoaTensor) -> Result<LossBreakdown> {
    pit_loss_weighted(pred, target, LAMBDA_DIST)
}

pub fn pit_loss_weighted(pred: &MaccdoaTensor, target: &MaccdoaTensor, lambda: f64) -> Result<LossBreakdown> {
    if !pred.same_shape(target) {
        return Err(SeldError::shape("pit_loss: prediction and target shapes differ"));
    }
    let perms = track_permutations(pred.tracks);
    let mut per_frame = Vec::with_capacity(pred.frames);
    let mut chosen = Vec::with_capacity(pred.frames * pred.classes);
    for f in 0..pred.frames {
        let mut frame_sum = 0.0;
        for c in 0..pred.classes {
            let (mut best, mut best_idx) = (f64::INFINITY, 0);
            for (i, perm) in perms.iter().enumerate() {
                let l = cell_loss(pred, target, f, c, perm, lambda);
                if l < best {
                    best = l;
                    best_idx = i;
                }
            }
            frame_sum += best;
            chosen.push(best_idx);
        }
        per_frame.push(frame_sum / pred.classes as f64);
    }
    let total = per_frame.iter().sum::<f64>() / pred.frames.max(1) as f64;
    Ok(LossBreakdown {
        total,
        per_frame,
        chosen_permutation: chosen,
    })
}

/// Gradient of `pit_loss(..).total` w.r.t. `pred` under fixed permutations.
pub fn pit_loss_backward(pred: &MaccdoaTensor, target: &MaccdoaTensor, chosen_permutation: &[usize]) -> Result<MaccdoaTensor> {
    pit_loss_backward_weighted(pred, target, chosen_permutation, LAMBDA_DIST)
}

pub fn pit_loss_backward_weighted(
    pred: &MaccdoaTensor,
    target: &MaccdoaTensor,
    chosen_permutation: &[usize],
    lambda: f64,
) -> Result<MaccdoaTensor> {
    if !pred.same_shape(target) {
        return Err(SeldError::shape("pit_loss_backward: prediction and target shapes differ"));
    }
    if chosen_permutation.len() != pred.frames * pred.classes {
        return Err(SeldError::shape("pit_loss_backward: permutation table size"));
    }
    let perms = track_permutations(pred.tracks);
    let scale = 2.0 / ((pred.frames * pred.classes) as f64 * (3 * pred.tracks) as f64);
    let mut grad = MaccdoaTensor::zeros(pred.frames, pred.tracks, pred.classes);
    for f in 0..pred.frames {
        for c in 0..pred.classes {
            let perm = perms
                .get(chosen_permutation[f * pred.classes + c])
                .ok_or_else(|| SeldError::invalid("pit_loss_backward: permutation index out of range"))?;
            for (t, &src) in perm.iter().enumerate() {
                let p = pred.get(f, src, c);
                let q = target.get(f, t, c);
                grad.set(
                    f,
                    src,
                    c,
                    [
                        scale * (p[0] - q[0]),
                        scale * (p[1] - q[1]),
                        scale * lambda * lambda * (p[2] - q[2]),
                    ],
                );
            }
        }
    }
    Ok(grad)
}
