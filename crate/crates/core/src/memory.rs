//! Bi-memory replay store and replay-set selection.
//!
//! `M_u` is a fixed sample of upstream training data; `M_o` grows with every
//! episode's errors. Replay and candidate sets are split half and half between
//! the two, backfilling from one side when the other runs short.

use std::collections::VecDeque;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::cluster_store::Example;
use crate::error::{Error, Result};
use crate::learner::{fine_tune, FitOptions, LearnerState};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplayStrategy {
    Random,
    MaxLoss,
    Mir,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OnlineEntry {
    pub example: Example,
    /// Episode whose error set contained the example.
    pub t: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiMemory {
    upstream: Vec<Example>,
    online: VecDeque<OnlineEntry>,
    online_capacity: Option<usize>,
    evicted: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplaySelection {
    pub chosen: Vec<Example>,
    /// Scores of the candidate pool, in candidate order (conditional
    /// strategies only).
    pub scores: Option<Vec<f64>>,
    pub candidate_pool_size: usize,
    pub strategy: ReplayStrategy,
}

impl ReplaySelection {
    fn empty(strategy: ReplayStrategy) -> Self {
        Self {
            chosen: Vec::new(),
            scores: None,
            candidate_pool_size: 0,
            strategy,
        }
    }
}

impl BiMemory {
    pub fn new(upstream: Vec<Example>, online_capacity: Option<usize>) -> Self {
        Self {
            upstream,
            online: VecDeque::new(),
            online_capacity,
            evicted: 0,
        }
    }

    pub fn upstream(&self) -> &[Example] {
        &self.upstream
    }

    pub fn online(&self) -> impl Iterator<Item = &OnlineEntry> {
        self.online.iter()
    }

    pub fn online_len(&self) -> usize {
        self.online.len()
    }

    /// Total number of online entries evicted by the capacity cap so far.
    pub fn evicted(&self) -> usize {
        self.evicted
    }

    /// Appends the errors of episode `t` to the online memory. With a cap,
    /// the oldest entries are evicted first; their ids are returned.
    pub fn write(&mut self, errors: &[Example], t: usize) -> Vec<u64> {
        self.online
            .extend(errors.iter().map(|e| OnlineEntry { example: e.clone(), t }));
        let mut gone = Vec::new();
        if let Some(cap) = self.online_capacity {
            while self.online.len() > cap {
                let old = self.online.pop_front().expect("non-empty");
                gone.push(old.example.id);
            }
        }
        self.evicted += gone.len();
        gone
    }

    /// Online entries written strictly before episode `t`.
    fn eligible_online(&self, t: usize) -> Vec<&Example> {
        self.online.iter().filter(|e| e.t < t).map(|e| &e.example).collect()
    }

    /// `(pool, id, t)` rows for the run log; `t` is empty for upstream rows.
    pub fn audit_rows(&self) -> Vec<(&'static str, u64, Option<usize>)> {
        self.upstream
            .iter()
            .map(|e| ("upstream", e.id, None))
            .chain(self.online.iter().map(|e| ("online", e.example.id, Some(e.t))))
            .collect()
    }

    /// Up to `r` examples drawn uniformly without replacement, `r / 2` from
    /// the upstream memory and the rest from online entries older than `t`.
    pub fn sample_balanced(&self, r: usize, t: usize, rng: &mut Rng) -> Vec<Example> {
        let online = self.eligible_online(t);
        let (nu, no) = (self.upstream.len(), online.len());
        let mut take_u = (r / 2).min(nu);
        let take_o = (r - take_u).min(no);
        take_u = (r - take_o).min(nu);
        let mut out = Vec::with_capacity(take_u + take_o);
        out.extend(
            index::sample(rng, nu, take_u)
                .into_iter()
                .map(|i| self.upstream[i].clone()),
        );
        out.extend(index::sample(rng, no, take_o).into_iter().map(|i| online[i].clone()));
        out
    }
}

/// Random replay selection of size `r` at episode `t`.
pub fn select_random(mem: &BiMemory, r: usize, t: usize, rng: &mut Rng) -> ReplaySelection {
    let chosen = mem.sample_balanced(r, t, rng);
    ReplaySelection {
        candidate_pool_size: chosen.len(),
        chosen,
        scores: None,
        strategy: ReplayStrategy::Random,
    }
}

/// Per-candidate `loss(virtual) - loss(prev)`.
pub fn score_interference(
    prev: &LearnerState,
    virtual_model: &LearnerState,
    candidates: &[Example],
) -> Result<Vec<f64>> {
    candidates
        .iter()
        .map(|ex| Ok(virtual_model.example_loss(ex)? - prev.example_loss(ex)?))
        .collect()
}

/// Per-candidate `loss(virtual)`.
pub fn score_maxloss(virtual_model: &LearnerState, candidates: &[Example]) -> Result<Vec<f64>> {
    candidates.iter().map(|ex| virtual_model.example_loss(ex)).collect()
}

/// Indices of the `r` highest scores; equal scores go to the smaller id.
pub fn top_by_score(candidates: &[Example], scores: &[f64], r: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then(candidates[a].id.cmp(&candidates[b].id))
    });
    order.truncate(r);
    order
}

/// Settings of a conditional (score-based) selection.
#[derive(Debug, Clone, Copy)]
pub struct ConditionalOptions {
    pub replay_size: usize,
    pub candidate_pool: usize,
    pub strategy: ReplayStrategy,
    /// Fine-tuning of the virtual model on the current errors.
    pub virtual_fit: FitOptions,
}

/// Draws a balanced candidate pool, fine-tunes a virtual model on `errors`,
/// scores the candidates and keeps the top `replay_size`.
///
/// `ReplayStrategy::Random` skips scoring and is exactly [`select_random`].
pub fn select_conditional(
    mem: &BiMemory,
    prev: &LearnerState,
    errors: &[Example],
    opts: &ConditionalOptions,
    t: usize,
    rng: &mut Rng,
) -> Result<ReplaySelection> {
    if opts.replay_size > opts.candidate_pool {
        return Err(Error::config(format!(
            "replay size {} exceeds candidate pool {}",
            opts.replay_size, opts.candidate_pool
        )));
    }
    if opts.strategy == ReplayStrategy::Random {
        return Ok(select_random(mem, opts.replay_size, t, rng));
    }
    let candidates = mem.sample_balanced(opts.candidate_pool, t, rng);
    if candidates.is_empty() {
        return Ok(ReplaySelection::empty(opts.strategy));
    }
    let virtual_model = if opts.virtual_fit.epochs == 0 || errors.is_empty() {
        prev.clone()
    } else {
        fine_tune(prev, errors, &opts.virtual_fit)?
    };
    let scores = match opts.strategy {
        ReplayStrategy::Mir => score_interference(prev, &virtual_model, &candidates)?,
        ReplayStrategy::MaxLoss => score_maxloss(&virtual_model, &candidates)?,
        ReplayStrategy::Random => unreachable!(),
    };
    let chosen = top_by_score(&candidates, &scores, opts.replay_size)
        .into_iter()
        .map(|i| candidates[i].clone())
        .collect();
    Ok(ReplaySelection {
        chosen,
        candidate_pool_size: candidates.len(),
        scores: Some(scores),
        strategy: opts.strategy,
    })
}
