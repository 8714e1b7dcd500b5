//! Refinement methods: given the previous model and the errors it just made,
//! produce the next model.
//!
//! | method          | what it trains on              | extra loss term        |
//! |-----------------|--------------------------------|------------------------|
//! | `cft`           | `E_t`                          | none                   |
//! | `online_l2reg`  | `E_t`                          | λ·‖θ − θ_{t−1}‖²       |
//! | `online_ewc`    | `E_t`                          | λ/2·Σ F_i (θ_i − θ_{t−1,i})² |
//! | `er`            | `R_t ∪ E_t` every k steps      | none                   |
//! | `maxloss`/`mir` | top-scored `R_t ∪ E_t`         | none                   |
//! | `mir_l2reg`     | MIR replay                     | λ·‖θ − θ_{t−1}‖²       |
//!
//! `frozen` never changes the model and `offline` retrains once on all errors
//! of the frozen model; both are references rather than online methods.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::cluster_store::Example;
use crate::error::{Error, Result};
use crate::learner::{fine_tune, fine_tune_with, FisherDiag, FisherEstimator, FitOptions, LearnerState, Penalty};
use crate::memory::{select_conditional, BiMemory, ConditionalOptions, ReplaySelection, ReplayStrategy};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Frozen,
    Cft,
    OnlineL2reg,
    OnlineEwc,
    Er,
    #[serde(rename = "maxloss")]
    MaxLoss,
    Mir,
    MirL2reg,
    Offline,
}

impl Method {
    pub const ONLINE: [Method; 7] = [
        Method::Cft,
        Method::OnlineL2reg,
        Method::OnlineEwc,
        Method::Er,
        Method::MaxLoss,
        Method::Mir,
        Method::MirL2reg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Frozen => "frozen",
            Method::Cft => "cft",
            Method::OnlineL2reg => "online_l2reg",
            Method::OnlineEwc => "online_ewc",
            Method::Er => "er",
            Method::MaxLoss => "maxloss",
            Method::Mir => "mir",
            Method::MirL2reg => "mir_l2reg",
            Method::Offline => "offline",
        }
    }

    pub fn parse(name: &str) -> Option<Method> {
        [Method::Frozen, Method::Offline]
            .into_iter()
            .chain(Method::ONLINE)
            .find(|m| m.name() == name)
    }

    /// Replay strategy, for methods that replay.
    pub fn replay_strategy(self) -> Option<ReplayStrategy> {
        match self {
            Method::Er => Some(ReplayStrategy::Random),
            Method::MaxLoss => Some(ReplayStrategy::MaxLoss),
            Method::Mir | Method::MirL2reg => Some(ReplayStrategy::Mir),
            _ => None,
        }
    }

    pub fn is_online(self) -> bool {
        !matches!(self, Method::Frozen | Method::Offline)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

mod defaults {
    pub fn lr() -> f64 {
        0.03
    }
    pub fn epochs() -> usize {
        20
    }
    pub fn batch_size() -> usize {
        8
    }
    pub fn lambda() -> f64 {
        1.0
    }
    pub fn ewc_gamma() -> f64 {
        0.9
    }
    pub fn replay_size() -> usize {
        32
    }
    pub fn replay_interval() -> usize {
        1
    }
    pub fn candidate_pool() -> usize {
        128
    }
    pub fn virt_epochs() -> usize {
        1
    }
    pub fn upstream_memory() -> usize {
        512
    }
    pub fn offline_upstream() -> usize {
        2048
    }
    pub fn offline_epochs() -> usize {
        40
    }
}

/// Every knob of a refinement method. Unused fields are ignored by methods
/// that do not need them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefinerConfig {
    pub method: Method,
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    /// Regularization weight λ.
    #[serde(default = "defaults::lambda")]
    pub lambda: f64,
    /// Decay of the running Fisher sum.
    #[serde(default = "defaults::ewc_gamma")]
    pub ewc_gamma: f64,
    #[serde(default)]
    pub fisher: FisherEstimator,
    /// `|R_t|`.
    #[serde(default = "defaults::replay_size")]
    pub replay_size: usize,
    /// Replay fires at episodes `t` with `t % k == 0`.
    #[serde(default = "defaults::replay_interval")]
    pub replay_interval: usize,
    /// Candidate pool size `c` for MaxLoss/MIR.
    #[serde(default = "defaults::candidate_pool")]
    pub candidate_pool: usize,
    /// Epochs of virtual-model fine-tuning for MaxLoss/MIR scoring.
    #[serde(default = "defaults::virt_epochs")]
    pub virt_epochs: usize,
    /// Replay `R_t` first, then `E_t`, instead of one mixed batch.
    #[serde(default)]
    pub two_stage: bool,
    /// Size of the upstream replay memory `M_u`.
    #[serde(default = "defaults::upstream_memory")]
    pub upstream_memory: usize,
    /// Optional cap on the online memory `M_o`.
    #[serde(default)]
    pub online_capacity: Option<usize>,
    /// Size of the upstream subset `D'` used by offline refining, capped at the pool.
    #[serde(default = "defaults::offline_upstream")]
    pub offline_upstream: usize,
    #[serde(default = "defaults::offline_epochs")]
    pub offline_epochs: usize,
}

impl RefinerConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            lr: defaults::lr(),
            epochs: defaults::epochs(),
            batch_size: defaults::batch_size(),
            lambda: defaults::lambda(),
            ewc_gamma: defaults::ewc_gamma(),
            fisher: FisherEstimator::default(),
            replay_size: defaults::replay_size(),
            replay_interval: defaults::replay_interval(),
            candidate_pool: defaults::candidate_pool(),
            virt_epochs: defaults::virt_epochs(),
            two_stage: false,
            upstream_memory: defaults::upstream_memory(),
            online_capacity: None,
            offline_upstream: defaults::offline_upstream(),
            offline_epochs: defaults::offline_epochs(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::config("lr must be finite and non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::config("lambda must be finite and non-negative"));
        }
        if !(self.ewc_gamma > 0.0 && self.ewc_gamma <= 1.0) {
            return Err(Error::config("ewc_gamma must lie in (0, 1]"));
        }
        if self.replay_interval == 0 {
            return Err(Error::config("replay_interval must be at least 1"));
        }
        if matches!(self.method, Method::MaxLoss | Method::Mir | Method::MirL2reg)
            && self.replay_size > self.candidate_pool
        {
            return Err(Error::config(format!(
                "replay_size {} exceeds candidate_pool {}",
                self.replay_size, self.candidate_pool
            )));
        }
        Ok(())
    }

    pub fn fit(&self, seed: u64) -> FitOptions {
        FitOptions {
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
        }
    }
}

/// Anchor of the regularized methods.
#[derive(Debug, Clone, PartialEq)]
pub struct RegAnchor {
    pub theta_prev: Vec<f64>,
    /// Decayed running sum of per-step Fisher diagonals.
    pub fisher_running: FisherDiag,
}

impl RegAnchor {
    pub fn new(model: &LearnerState) -> Self {
        Self {
            theta_prev: model.theta.clone(),
            fisher_running: FisherDiag::zeros(model.theta.len()),
        }
    }
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch { expected: a, actual: b });
    }
    Ok(())
}

/// `sum_i (theta_i - theta_prev_i)^2`.
pub fn l2_penalty(theta: &[f64], theta_prev: &[f64]) -> Result<f64> {
    check_lengths(theta_prev.len(), theta.len())?;
    Ok(theta.iter().zip(theta_prev).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// `1/2 * sum_i F_i (theta_i - theta_prev_i)^2` with the running Fisher sum.
pub fn ewc_penalty(theta: &[f64], anchor: &RegAnchor) -> Result<f64> {
    check_lengths(anchor.theta_prev.len(), theta.len())?;
    check_lengths(anchor.fisher_running.0.len(), theta.len())?;
    Ok(0.5
        * theta
            .iter()
            .zip(&anchor.theta_prev)
            .zip(&anchor.fisher_running.0)
            .map(|((a, b), f)| f * (a - b) * (a - b))
            .sum::<f64>())
}

/// Seeds of everything random inside one refinement step.
#[derive(Debug, Clone, Copy)]
pub struct StepSeeds {
    pub fine_tune: u64,
    pub replay_fine_tune: u64,
    pub virtual_fit: u64,
    pub replay_draw: u64,
}

impl StepSeeds {
    /// Seeds of episode `t` under run seed `seed`; independent of the method.
    pub fn for_step(seed: u64, t: usize) -> Self {
        let t = t as u64;
        Self {
            fine_tune: rng::derive(seed, "fine-tune", t),
            replay_fine_tune: rng::derive(seed, "fine-tune-replay", t),
            virtual_fit: rng::derive(seed, "virtual-fit", t),
            replay_draw: rng::derive(seed, "replay-draw", t),
        }
    }
}

/// Continual fine-tuning on `E_t`. An empty error set returns `f_prev`.
pub fn refine_cft(
    f_prev: &LearnerState,
    errors: &[Example],
    cfg: &RefinerConfig,
    seeds: StepSeeds,
) -> Result<LearnerState> {
    if errors.is_empty() {
        return Ok(f_prev.clone());
    }
    fine_tune(f_prev, errors, &cfg.fit(seeds.fine_tune))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegKind {
    L2,
    Ewc,
}

fn penalty<'a>(kind: RegKind, anchor: &'a RegAnchor, lambda: f64) -> Penalty<'a> {
    match kind {
        RegKind::L2 => Penalty::L2 {
            anchor: &anchor.theta_prev,
            lambda,
        },
        RegKind::Ewc => Penalty::Ewc {
            anchor: &anchor.theta_prev,
            fisher: &anchor.fisher_running.0,
            lambda,
        },
    }
}

fn check_anchor(f_prev: &LearnerState, anchor: &RegAnchor) -> Result<()> {
    if anchor.theta_prev != f_prev.theta {
        return Err(Error::config("regularization anchor is out of sync with the model"));
    }
    Ok(())
}

/// Advances the anchor to `f_t`; for EWC also folds `F(f_t, E_t)` into the
/// decayed running sum.
fn advance_anchor(
    kind: RegKind,
    f_t: &LearnerState,
    errors: &[Example],
    mut anchor: RegAnchor,
    cfg: &RefinerConfig,
) -> Result<RegAnchor> {
    anchor.theta_prev = f_t.theta.clone();
    if kind == RegKind::Ewc {
        let fresh = f_t.fisher_diag(errors, cfg.fisher)?;
        for (run, f) in anchor.fisher_running.0.iter_mut().zip(fresh.0) {
            *run = cfg.ewc_gamma * *run + f;
        }
    }
    Ok(anchor)
}

/// Fine-tuning on `E_t` against `L_error + λ L_reg`.
pub fn refine_regularized(
    f_prev: &LearnerState,
    errors: &[Example],
    anchor: RegAnchor,
    kind: RegKind,
    cfg: &RefinerConfig,
    seeds: StepSeeds,
) -> Result<(LearnerState, RegAnchor)> {
    if errors.is_empty() {
        return Ok((f_prev.clone(), anchor));
    }
    check_anchor(f_prev, &anchor)?;
    let f_t = fine_tune_with(
        f_prev,
        errors,
        &cfg.fit(seeds.fine_tune),
        penalty(kind, &anchor, cfg.lambda),
    )?;
    let anchor = advance_anchor(kind, &f_t, errors, anchor, cfg)?;
    Ok((f_t, anchor))
}

fn select_replay(
    f_prev: &LearnerState,
    errors: &[Example],
    mem: &BiMemory,
    t: usize,
    strategy: ReplayStrategy,
    cfg: &RefinerConfig,
    seeds: StepSeeds,
) -> Result<ReplaySelection> {
    let opts = ConditionalOptions {
        replay_size: cfg.replay_size,
        candidate_pool: if strategy == ReplayStrategy::Random {
            cfg.replay_size.max(cfg.candidate_pool)
        } else {
            cfg.candidate_pool
        },
        strategy,
        virtual_fit: FitOptions {
            epochs: cfg.virt_epochs,
            ..cfg.fit(seeds.virtual_fit)
        },
    };
    let mut rng = rng::from_seed(seeds.replay_draw);
    select_conditional(mem, f_prev, errors, &opts, t, &mut rng)
}

/// Fine-tunes on the replay set and the errors, mixed or in two stages.
fn train_with_replay(
    f_prev: &LearnerState,
    errors: &[Example],
    replay: &[Example],
    penalty: Penalty<'_>,
    cfg: &RefinerConfig,
    seeds: StepSeeds,
) -> Result<LearnerState> {
    if replay.is_empty() {
        return fine_tune_with(f_prev, errors, &cfg.fit(seeds.fine_tune), penalty);
    }
    // the replay set is a set: training must not depend on how it was listed
    let mut replay = replay.to_vec();
    replay.sort_by_key(|e| e.id);
    if cfg.two_stage {
        let warmed = fine_tune_with(f_prev, &replay, &cfg.fit(seeds.replay_fine_tune), penalty)?;
        return fine_tune_with(&warmed, errors, &cfg.fit(seeds.fine_tune), penalty);
    }
    let mut mixed = Vec::with_capacity(replay.len() + errors.len());
    mixed.extend_from_slice(&replay);
    mixed.extend_from_slice(errors);
    fine_tune_with(f_prev, &mixed, &cfg.fit(seeds.fine_tune), penalty)
}

fn replay_fires(t: usize, cfg: &RefinerConfig) -> bool {
    t.is_multiple_of(cfg.replay_interval)
}

/// Replay refinement at episode `t`. Off-interval steps are plain continual
/// fine-tuning. `E_t` is written to the online memory after training, so the
/// replay set only ever holds strictly older errors.
pub fn refine_replay(
    f_prev: &LearnerState,
    errors: &[Example],
    mem: &mut BiMemory,
    t: usize,
    strategy: ReplayStrategy,
    cfg: &RefinerConfig,
    seeds: StepSeeds,
) -> Result<LearnerState> {
    if errors.is_empty() {
        return Ok(f_prev.clone());
    }
    let f_t = if replay_fires(t, cfg) {
        let sel = select_replay(f_prev, errors, mem, t, strategy, cfg, seeds)?;
        train_with_replay(f_prev, errors, &sel.chosen, Penalty::None, cfg, seeds)?
    } else {
        refine_cft(f_prev, errors, cfg, seeds)?
    };
    mem.write(errors, t);
    Ok(f_t)
}

/// MIR replay plus the online L2 anchor term.
pub fn refine_hybrid(
    f_prev: &LearnerState,
    errors: &[Example],
    mem: &mut BiMemory,
    anchor: RegAnchor,
    t: usize,
    cfg: &RefinerConfig,
    seeds: StepSeeds,
) -> Result<(LearnerState, RegAnchor)> {
    if errors.is_empty() {
        return Ok((f_prev.clone(), anchor));
    }
    check_anchor(f_prev, &anchor)?;
    let pen = penalty(RegKind::L2, &anchor, cfg.lambda);
    let f_t = if replay_fires(t, cfg) {
        let sel = select_replay(f_prev, errors, mem, t, ReplayStrategy::Mir, cfg, seeds)?;
        train_with_replay(f_prev, errors, &sel.chosen, pen, cfg, seeds)?
    } else {
        fine_tune_with(f_prev, errors, &cfg.fit(seeds.fine_tune), pen)?
    };
    mem.write(errors, t);
    let anchor = advance_anchor(RegKind::L2, &f_t, errors, anchor, cfg)?;
    Ok((f_t, anchor))
}

/// Random subset `D'` of the upstream pool, `size` examples (or all of it).
pub fn upstream_subset(pool: &[Example], size: usize, seed: u64) -> Vec<Example> {
    let mut rng = rng::from_seed(seed);
    let mut picked = index::sample(&mut rng, pool.len(), size.min(pool.len())).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| pool[i].clone()).collect()
}

/// One offline fine-tuning run of `f_0` on `D' ∪ E_{≤T}`.
pub fn offline_refine(
    f0: &LearnerState,
    upstream_pool: &[Example],
    all_errors: &[Example],
    cfg: &RefinerConfig,
    seed: u64,
) -> Result<LearnerState> {
    let mut data = upstream_subset(
        upstream_pool,
        cfg.offline_upstream,
        rng::derive(seed, "offline-subset", 0),
    );
    data.extend_from_slice(all_errors);
    if data.is_empty() {
        return Ok(f0.clone());
    }
    let opts = FitOptions {
        epochs: cfg.offline_epochs,
        ..cfg.fit(rng::derive(seed, "offline-fit", 0))
    };
    fine_tune(f0, &data, &opts)
}

/// A refinement method bound to one run, holding whatever state the method
/// carries across episodes.
#[derive(Debug, Clone)]
pub struct Refiner {
    cfg: RefinerConfig,
    seed: u64,
    anchor: Option<RegAnchor>,
    memory: Option<BiMemory>,
}

impl Refiner {
    /// `upstream_pool` seeds the upstream replay memory of replay methods.
    pub fn new(cfg: RefinerConfig, f0: &LearnerState, upstream_pool: &[Example], seed: u64) -> Result<Self> {
        cfg.validate()?;
        let anchor = matches!(cfg.method, Method::OnlineL2reg | Method::OnlineEwc | Method::MirL2reg)
            .then(|| RegAnchor::new(f0));
        let memory = cfg.method.replay_strategy().map(|_| {
            let m_u = upstream_subset(
                upstream_pool,
                cfg.upstream_memory,
                rng::derive(seed, "memory-upstream", 0),
            );
            BiMemory::new(m_u, cfg.online_capacity)
        });
        Ok(Self {
            cfg,
            seed,
            anchor,
            memory,
        })
    }

    pub fn config(&self) -> &RefinerConfig {
        &self.cfg
    }

    pub fn memory(&self) -> Option<&BiMemory> {
        self.memory.as_ref()
    }

    pub fn anchor(&self) -> Option<&RegAnchor> {
        self.anchor.as_ref()
    }

    /// Produces `f_t` from `f_{t-1}` and `E_t`.
    pub fn refine(&mut self, f_prev: &LearnerState, errors: &[Example], t: usize) -> Result<LearnerState> {
        let seeds = StepSeeds::for_step(self.seed, t);
        let cfg = &self.cfg;
        match cfg.method {
            Method::Frozen | Method::Offline => Ok(f_prev.clone()),
            Method::Cft => refine_cft(f_prev, errors, cfg, seeds),
            Method::OnlineL2reg | Method::OnlineEwc => {
                let kind = if cfg.method == Method::OnlineL2reg {
                    RegKind::L2
                } else {
                    RegKind::Ewc
                };
                let anchor = self.anchor.take().expect("regularized method has an anchor");
                let (f_t, anchor) = refine_regularized(f_prev, errors, anchor, kind, cfg, seeds)?;
                self.anchor = Some(anchor);
                Ok(f_t)
            }
            Method::Er | Method::MaxLoss | Method::Mir => {
                let strategy = cfg.method.replay_strategy().expect("replay method");
                let mem = self.memory.as_mut().expect("replay method has a memory");
                refine_replay(f_prev, errors, mem, t, strategy, cfg, seeds)
            }
            Method::MirL2reg => {
                let mem = self.memory.as_mut().expect("replay method has a memory");
                let anchor = self.anchor.take().expect("hybrid has an anchor");
                let (f_t, anchor) = refine_hybrid(f_prev, errors, mem, anchor, t, cfg, seeds)?;
                self.anchor = Some(anchor);
                Ok(f_t)
            }
        }
    }
}
