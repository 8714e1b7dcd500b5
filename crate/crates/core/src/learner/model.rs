//! Forward and backward passes.
//!
//! Parameter layout, row-major:
//! - softmax: `W[k][d]`, then `b[k]`
//! - hidden:  `W1[h][d]`, `b1[h]`, `W2[k][h]`, `b2[k]`

use super::{softmax, Arch, LearnerState};
use crate::cluster_store::Example;

pub(super) struct Forward {
    pub hidden: Vec<f64>,
    pub logits: Vec<f64>,
}

fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let cols = x.len();
    b.iter()
        .enumerate()
        .map(|(r, &bias)| {
            let row = &w[r * cols..(r + 1) * cols];
            bias + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect()
}

pub(super) fn forward(state: &LearnerState, x: &[f64]) -> Forward {
    let (d, k) = (state.d, state.k);
    let theta = &state.theta;
    match state.arch {
        Arch::Softmax => Forward {
            hidden: Vec::new(),
            logits: affine(&theta[..k * d], &theta[k * d..k * d + k], x),
        },
        Arch::Hidden { width: h } => {
            let w1 = &theta[..h * d];
            let b1 = &theta[h * d..h * d + h];
            let off = h * d + h;
            let w2 = &theta[off..off + k * h];
            let b2 = &theta[off + k * h..off + k * h + k];
            let hidden: Vec<f64> = affine(w1, b1, x).into_iter().map(f64::tanh).collect();
            let logits = affine(w2, b2, &hidden);
            Forward { hidden, logits }
        }
    }
}

/// Cross-entropy via log-sum-exp.
pub(super) fn example_loss(state: &LearnerState, ex: &Example) -> f64 {
    let z = forward(state, &ex.features).logits;
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    (lse - z[ex.label]).max(0.0)
}

/// Adds `scale * d loss(ex) / d theta` into `out`.
pub(super) fn accumulate_grad(state: &LearnerState, ex: &Example, scale: f64, out: &mut [f64]) {
    let (d, k) = (state.d, state.k);
    let x = &ex.features;
    let fwd = forward(state, x);
    let mut dz = softmax(&fwd.logits);
    dz[ex.label] -= 1.0;
    match state.arch {
        Arch::Softmax => {
            for c in 0..k {
                let row = &mut out[c * d..(c + 1) * d];
                for (o, xi) in row.iter_mut().zip(x) {
                    *o += scale * dz[c] * xi;
                }
                out[k * d + c] += scale * dz[c];
            }
        }
        Arch::Hidden { width: h } => {
            let off = h * d + h;
            let w2 = &state.theta[off..off + k * h];
            let mut dh = vec![0.0; h];
            for c in 0..k {
                for j in 0..h {
                    out[off + c * h + j] += scale * dz[c] * fwd.hidden[j];
                    dh[j] += w2[c * h + j] * dz[c];
                }
                out[off + k * h + c] += scale * dz[c];
            }
            for j in 0..h {
                let da = dh[j] * (1.0 - fwd.hidden[j] * fwd.hidden[j]);
                let row = &mut out[j * d..(j + 1) * d];
                for (o, xi) in row.iter_mut().zip(x) {
                    *o += scale * da * xi;
                }
                out[h * d + j] += scale * da;
            }
        }
    }
}
