use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Arch, LearnerState};
use crate::cluster_store::Example;
use crate::error::{Error, Result};
use crate::rng;

/// Settings of one fine-tuning call.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Seeds the per-epoch shuffles.
    pub seed: u64,
}

/// Extra quadratic term pulling `theta` back towards an anchor.
#[derive(Debug, Clone, Copy, Default)]
pub enum Penalty<'a> {
    #[default]
    None,
    /// `lambda * sum_i (theta_i - anchor_i)^2`
    L2 { anchor: &'a [f64], lambda: f64 },
    /// `lambda * 1/2 * sum_i fisher_i (theta_i - anchor_i)^2`
    Ewc {
        anchor: &'a [f64],
        fisher: &'a [f64],
        lambda: f64,
    },
}

impl Penalty<'_> {
    /// Adds the penalty gradient at `theta` into `grad`. A zero `lambda`
    /// leaves `grad` bit-for-bit untouched.
    pub fn add_grad(&self, theta: &[f64], grad: &mut [f64]) {
        match *self {
            Penalty::None => {}
            Penalty::L2 { lambda, .. } | Penalty::Ewc { lambda, .. } if lambda == 0.0 => {}
            Penalty::L2 { anchor, lambda } => {
                for ((g, w), a) in grad.iter_mut().zip(theta).zip(anchor) {
                    *g += lambda * 2.0 * (w - a);
                }
            }
            Penalty::Ewc { anchor, fisher, lambda } => {
                for (((g, w), a), f) in grad.iter_mut().zip(theta).zip(anchor).zip(fisher) {
                    *g += lambda * f * (w - a);
                }
            }
        }
    }
}

fn run_epochs(
    state: &mut LearnerState,
    batch: &[Example],
    opts: &FitOptions,
    penalty: Penalty<'_>,
    mut after_epoch: impl FnMut(usize, &LearnerState) -> Result<()>,
) -> Result<()> {
    if opts.batch_size == 0 {
        return Err(Error::config("mini-batch size must be positive"));
    }
    let mut order: Vec<usize> = (0..batch.len()).collect();
    for epoch in 0..opts.epochs {
        let mut rng = rng::substream(opts.seed, "epoch", epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);
        for chunk in order.chunks(opts.batch_size) {
            let mut subset = chunk.to_vec();
            let mut g = state.grad_of(batch, &mut subset)?;
            penalty.add_grad(&state.theta, &mut g);
            state.step_in_place(&g, opts.lr)?;
        }
        after_epoch(epoch, state)?;
    }
    Ok(())
}

/// `epochs` passes of shuffled mini-batch Adam over `batch`, starting from a
/// fresh optimizer state. The input state is not modified.
pub fn fine_tune(state: &LearnerState, batch: &[Example], opts: &FitOptions) -> Result<LearnerState> {
    fine_tune_with(state, batch, opts, Penalty::None)
}

/// [`fine_tune`] with a regularization term added to every mini-batch gradient.
pub fn fine_tune_with(
    state: &LearnerState,
    batch: &[Example],
    opts: &FitOptions,
    penalty: Penalty<'_>,
) -> Result<LearnerState> {
    if batch.is_empty() {
        return Err(Error::config("fine-tuning needs a non-empty batch"));
    }
    let mut next = state.clone();
    next.reset_optimizer();
    run_epochs(&mut next, batch, opts, penalty, |_, _| Ok(()))?;
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UpstreamOptions {
    pub arch: Arch,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for UpstreamOptions {
    fn default() -> Self {
        Self {
            arch: Arch::Hidden { width: 32 },
            epochs: 20,
            lr: 0.01,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl UpstreamOptions {
    pub fn init_seed(&self) -> u64 {
        rng::derive(self.seed, "upstream-init", 0)
    }

    pub fn shuffle_seed(&self) -> u64 {
        rng::derive(self.seed, "upstream-shuffle", 0)
    }

    pub fn fit_options(&self) -> FitOptions {
        FitOptions {
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.shuffle_seed(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpstreamReport {
    pub epochs: usize,
    pub final_loss: f64,
    pub final_train_accuracy: f64,
}

/// Trains the upstream model on `pool` from a seeded initialization.
pub fn train_upstream(
    pool: &[Example],
    d: usize,
    k: usize,
    opts: &UpstreamOptions,
) -> Result<(LearnerState, UpstreamReport)> {
    if pool.is_empty() {
        return Err(Error::config("upstream pool is empty"));
    }
    let mut state = LearnerState::init(opts.arch, d, k, opts.init_seed());
    let check = |epoch: usize, s: &LearnerState| -> Result<()> {
        let loss = s.loss(pool)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch, loss });
        }
        Ok(())
    };
    run_epochs(&mut state, pool, &opts.fit_options(), Penalty::None, check).map_err(|e| match e {
        Error::NonFinite { .. } => Error::Diverged {
            epoch: opts.epochs,
            loss: f64::NAN,
        },
        other => other,
    })?;
    let report = UpstreamReport {
        epochs: opts.epochs,
        final_loss: state.loss(pool)?,
        final_train_accuracy: state.accuracy(pool)?.unwrap_or(0.0),
    };
    Ok((state, report))
}
