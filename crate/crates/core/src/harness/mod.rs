//! The episode loop and everything built on it: single runs, the frozen and
//! offline references, hyperparameter sweeps and stream-dynamics grids.

mod config;
mod dynamics;
mod files;
mod report;
mod sweep;

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::cluster_store::{generate_clusters, ClusterSet, Example, GeneratorSpec};
use crate::error::{Error, Result};
use crate::learner::{train_upstream, LearnerState, UpstreamOptions, UpstreamReport};
use crate::metrics::{aggregate, AggregateReport, MetricRecorder, MetricSettings, MetricTrace};
use crate::refiners::{offline_refine, Method, Refiner, RefinerConfig};
use crate::rng;
use crate::stream::QueryStream;

pub use config::{parse_run_config, ClusterSource, RunConfig, StreamSource, UpstreamSource};
pub use dynamics::{dynamics_grid, DynamicsVariant, GainRow, GainTable};
pub use files::{read_run_report, write_run, RunReport};
pub use report::{render_reports, ReportFormat};
pub use sweep::{expand_grid, sweep, GridSpec, Leaderboard, LeaderboardEntry, MeanStd, SweepOptions};

/// `f_{t-1}`'s prediction on one query of episode `t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub t: usize,
    pub id: u64,
    pub label: usize,
    pub predicted: usize,
    /// For errors only: the refined model's prediction right after the
    /// update (`f_t` online, the final model offline). EFR is recounted from it.
    pub refined: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub method: Method,
    pub trace: MetricTrace,
    pub report: AggregateReport,
    pub predictions: Vec<Prediction>,
    pub final_model: LearnerState,
    /// `(pool, id, t)` rows of the replay memory at the end of the run.
    pub memory: Option<Vec<(&'static str, u64, Option<usize>)>>,
    pub wall_clock: Duration,
}

impl RunResult {
    /// Total number of errors according to the prediction log.
    pub fn logged_errors(&self) -> usize {
        self.predictions.iter().filter(|p| p.label != p.predicted).count()
    }
}

/// Clusters plus the upstream model trained on `V_0`.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub clusters: ClusterSet,
    pub f0: LearnerState,
    pub upstream: Option<UpstreamReport>,
}

impl Benchmark {
    pub fn new(clusters: ClusterSet, upstream: &UpstreamOptions) -> Result<Self> {
        let (f0, report) = train_upstream(clusters.cluster(0), clusters.d(), clusters.k(), upstream)?;
        Ok(Self {
            clusters,
            f0,
            upstream: Some(report),
        })
    }

    pub fn generate(spec: &GeneratorSpec, upstream: &UpstreamOptions) -> Result<Self> {
        Self::new(generate_clusters(spec)?, upstream)
    }

    /// The standard synthetic benchmark with default upstream training.
    pub fn standard() -> Result<Self> {
        Self::generate(&GeneratorSpec::benchmark(), &UpstreamOptions::default())
    }

    pub fn upstream_pool(&self) -> &[Example] {
        self.clusters.cluster(0)
    }
}

/// Sub-stream seeds of a run: one for the method's internals, one for the
/// metric samples. Neither touches the stream or the upstream model.
pub fn method_seed(seed: u64) -> u64 {
    rng::derive(seed, "method", 0)
}

pub fn metrics_seed(seed: u64) -> u64 {
    rng::derive(seed, "metrics", 0)
}

fn errors_of(model: &LearnerState, t: usize, queries: &[Example], log: &mut Vec<Prediction>) -> Result<Vec<Example>> {
    let mut errors = Vec::new();
    for ex in queries {
        let predicted = model.predict(&ex.features)?;
        log.push(Prediction {
            t,
            id: ex.id,
            label: ex.label,
            predicted,
            refined: None,
        });
        if predicted != ex.label {
            errors.push(ex.clone());
        }
    }
    Ok(errors)
}

/// Fills `refined` for the logged errors; `log` and `queries` are aligned.
fn log_refined(model: &LearnerState, queries: &[Example], log: &mut [Prediction]) -> Result<()> {
    for (p, ex) in log.iter_mut().zip(queries) {
        if p.predicted != p.label {
            p.refined = Some(model.predict(&ex.features)?);
        }
    }
    Ok(())
}

/// Runs `refiner` over `stream`: for every episode, find the errors of the
/// current model, refine, then record the metrics of the refined model.
pub fn run_episode_loop(
    f0: &LearnerState,
    stream: &QueryStream,
    refiner: &mut Refiner,
    mut recorder: MetricRecorder,
) -> Result<RunResult> {
    let started = Instant::now();
    let mut model = f0.clone();
    let mut predictions = Vec::with_capacity(stream.episodes.len() * stream.config.episode_size);
    for ep in &stream.episodes {
        let wrap = |e: Error| Error::Episode {
            t: ep.t,
            source: Box::new(e),
        };
        let start = predictions.len();
        let errors = errors_of(&model, ep.t, &ep.examples, &mut predictions).map_err(wrap)?;
        model = refiner.refine(&model, &errors, ep.t).map_err(wrap)?;
        log_refined(&model, &ep.examples, &mut predictions[start..]).map_err(wrap)?;
        recorder.record(ep.t, &model, &ep.examples, &errors).map_err(wrap)?;
    }
    let trace = recorder.finish();
    Ok(RunResult {
        method: refiner.config().method,
        report: aggregate(&trace),
        trace,
        predictions,
        final_model: model,
        memory: refiner.memory().map(|m| m.audit_rows()),
        wall_clock: started.elapsed(),
    })
}

fn recorder_for(
    bench: &Benchmark,
    stream: &QueryStream,
    metrics: &MetricSettings,
    seed: u64,
) -> Result<MetricRecorder> {
    MetricRecorder::new(
        metrics.clone(),
        metrics_seed(seed),
        stream.episodes.len(),
        bench.upstream_pool(),
        &stream.heldout,
    )
}

/// The frozen reference: `f_t = f_0` throughout.
pub fn run_reference_frozen(
    bench: &Benchmark,
    stream: &QueryStream,
    metrics: &MetricSettings,
    seed: u64,
) -> Result<RunResult> {
    run_method(bench, stream, &RefinerConfig::new(Method::Frozen), metrics, seed)
}

/// Runs one method on one stream. `seed` drives the method's randomness and
/// the metric samples.
pub fn run_method(
    bench: &Benchmark,
    stream: &QueryStream,
    cfg: &RefinerConfig,
    metrics: &MetricSettings,
    seed: u64,
) -> Result<RunResult> {
    if cfg.method == Method::Offline {
        return run_offline(bench, stream, cfg, metrics, seed);
    }
    let mut refiner = Refiner::new(cfg.clone(), &bench.f0, bench.upstream_pool(), method_seed(seed))?;
    let recorder = recorder_for(bench, stream, metrics, seed)?;
    run_episode_loop(&bench.f0, stream, &mut refiner, recorder)
}

/// Offline refining: collect every error of the frozen model over the
/// stream, retrain `f_0` once on them plus an upstream subset, and score the
/// result at the final episode. Its CSR is the success rate `f_T` would have
/// had on all earlier queries, and its EFR is measured on all collected errors.
pub fn run_offline(
    bench: &Benchmark,
    stream: &QueryStream,
    cfg: &RefinerConfig,
    metrics: &MetricSettings,
    seed: u64,
) -> Result<RunResult> {
    let started = Instant::now();
    let mut predictions = Vec::new();
    let mut all_errors = Vec::new();
    for ep in &stream.episodes {
        all_errors.extend(errors_of(&bench.f0, ep.t, &ep.examples, &mut predictions)?);
    }
    let f_t = offline_refine(&bench.f0, bench.upstream_pool(), &all_errors, cfg, method_seed(seed))?;
    let queries: Vec<Example> = stream
        .episodes
        .iter()
        .flat_map(|e| e.examples.iter().cloned())
        .collect();
    log_refined(&f_t, &queries, &mut predictions)?;
    let last = stream.episodes.last().map_or(0, |e| e.t);
    let past: Vec<Example> = stream
        .episodes
        .iter()
        .filter(|e| e.t < last)
        .flat_map(|e| e.examples.iter().cloned())
        .collect();
    let mut recorder = recorder_for(bench, stream, metrics, seed)?;
    recorder.record_offline(last, &f_t, &past, &all_errors)?;
    let trace = recorder.finish();
    Ok(RunResult {
        method: Method::Offline,
        report: aggregate(&trace),
        trace,
        predictions,
        final_model: f_t,
        memory: None,
        wall_clock: started.elapsed(),
    })
}
