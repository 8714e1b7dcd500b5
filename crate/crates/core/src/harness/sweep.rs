//! Grid search on validation streams, evaluation of the winners on test
//! streams.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{run_method, Benchmark};
use crate::error::{Error, Result};
use crate::metrics::{AggregateReport, MetricSettings, MetricSummary};
use crate::refiners::{Method, RefinerConfig};
use crate::stream::QueryStream;

/// A grid file: shared refiner settings plus, per method, a list of values
/// for each swept field. Methods without an entry get a single point.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(default)]
    pub base: toml::Table,
    #[serde(default)]
    pub grid: BTreeMap<String, BTreeMap<String, Vec<toml::Value>>>,
}

impl GridSpec {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("grid file: {}", e.message())))
    }

    pub fn configs_for(&self, method: Method) -> Result<Vec<RefinerConfig>> {
        let empty = BTreeMap::new();
        let axes = self.grid.get(method.name()).unwrap_or(&empty);
        expand_grid(method, &self.base, axes)
    }
}

fn canonical_key(cfg: &RefinerConfig) -> String {
    serde_json::to_string(cfg).expect("configs serialize")
}

/// Cartesian product of `axes` over `base`, in canonical order (sorted by
/// the serialized config) with duplicates removed. The order does not depend
/// on how the axes or their values were listed.
pub fn expand_grid(
    method: Method,
    base: &toml::Table,
    axes: &BTreeMap<String, Vec<toml::Value>>,
) -> Result<Vec<RefinerConfig>> {
    let mut points = vec![base.clone()];
    for (field, values) in axes {
        if values.is_empty() {
            return Err(Error::config(format!("empty grid axis `{field}` for {method}")));
        }
        points = points
            .into_iter()
            .flat_map(|p| {
                values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.insert(field.clone(), v.clone());
                    q
                })
            })
            .collect();
    }
    let mut configs = points
        .into_iter()
        .map(|mut table| {
            table.insert("method".into(), toml::Value::String(method.name().into()));
            let cfg: RefinerConfig = toml::Value::Table(table)
                .try_into()
                .map_err(|e: toml::de::Error| Error::config(format!("grid point for {method}: {}", e.message())))?;
            cfg.validate()?;
            Ok(cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    configs.sort_by_cached_key(canonical_key);
    configs.dedup();
    Ok(configs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOptions {
    /// Seeds of the test runs; validation runs use the first one.
    pub seeds: Vec<u64>,
    pub metrics: MetricSettings,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: impl IntoIterator<Item = Option<f64>>) -> Option<Self> {
        let v: Vec<f64> = values.into_iter().flatten().collect();
        if v.is_empty() {
            return None;
        }
        let n = v.len();
        let mean = v.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std, n })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub efr: Option<MeanStd>,
    pub ukr: Option<MeanStd>,
    pub okr: Option<MeanStd>,
    pub csr: Option<MeanStd>,
    pub kg: Option<MeanStd>,
    pub oec: Option<MeanStd>,
}

impl SummaryStats {
    fn of(summaries: &[MetricSummary]) -> Self {
        let col = |f: fn(&MetricSummary) -> Option<f64>| MeanStd::of(summaries.iter().map(f));
        Self {
            efr: col(|s| s.efr),
            ukr: col(|s| s.ukr),
            okr: col(|s| s.okr),
            csr: col(|s| s.csr),
            kg: col(|s| s.kg),
            oec: col(|s| s.oec),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestRun {
    pub stream: usize,
    pub seed: u64,
    pub report: AggregateReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardEntry {
    pub method: Method,
    pub config: RefinerConfig,
    /// Mean over validation streams of `(OEC@T + EFR@T) / 2`.
    pub validation_score: f64,
    /// Validation score of every grid point, in canonical order.
    pub grid_scores: Vec<f64>,
    pub avg: SummaryStats,
    pub last: SummaryStats,
    pub runs: Vec<TestRun>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Leaderboard {
    pub entries: Vec<LeaderboardEntry>,
}

/// Selection criterion of one validation run.
pub fn selection_score(report: &AggregateReport) -> f64 {
    (report.last.oec.unwrap_or(0.0) + report.last.efr.unwrap_or(0.0)) / 2.0
}

/// Grid search per method on `validation`, then every test stream × seed
/// with the winning config. Ties go to the first config in canonical order.
pub fn sweep(
    bench: &Benchmark,
    grids: &[(Method, Vec<RefinerConfig>)],
    validation: &[QueryStream],
    test: &[QueryStream],
    opts: &SweepOptions,
) -> Result<Leaderboard> {
    if grids.is_empty() || grids.iter().any(|(_, g)| g.is_empty()) {
        return Err(Error::config("empty grid"));
    }
    if validation.is_empty() || test.is_empty() || opts.seeds.is_empty() {
        return Err(Error::config("sweep needs validation streams, test streams and seeds"));
    }
    let val_seed = opts.seeds[0];
    let mut entries = Vec::with_capacity(grids.len());
    for (method, configs) in grids {
        let mut configs = configs.clone();
        configs.sort_by_cached_key(canonical_key);
        configs.dedup();
        if let Some(bad) = configs.iter().find(|c| c.method != *method) {
            return Err(Error::config(format!(
                "grid for {method} contains a {} config",
                bad.method
            )));
        }

        let jobs: Vec<(usize, usize)> = (0..configs.len())
            .flat_map(|c| (0..validation.len()).map(move |s| (c, s)))
            .collect();
        let scores = jobs
            .par_iter()
            .map(|&(c, s)| {
                run_method(bench, &validation[s], &configs[c], &opts.metrics, val_seed)
                    .map(|r| selection_score(&r.report))
            })
            .collect::<Result<Vec<f64>>>()?;
        let grid_scores: Vec<f64> = scores
            .chunks(validation.len())
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect();
        let mut best = 0;
        for (i, &s) in grid_scores.iter().enumerate() {
            if s > grid_scores[best] {
                best = i;
            }
        }
        let winner = configs[best].clone();

        let jobs: Vec<(usize, u64)> = (0..test.len())
            .flat_map(|s| opts.seeds.iter().map(move |&seed| (s, seed)))
            .collect();
        let runs = jobs
            .par_iter()
            .map(|&(s, seed)| {
                run_method(bench, &test[s], &winner, &opts.metrics, seed).map(|r| TestRun {
                    stream: s,
                    seed,
                    report: r.report,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let avg: Vec<MetricSummary> = runs.iter().map(|r| r.report.avg).collect();
        let last: Vec<MetricSummary> = runs.iter().map(|r| r.report.last).collect();
        entries.push(LeaderboardEntry {
            method: *method,
            config: winner,
            validation_score: grid_scores[best],
            grid_scores,
            avg: SummaryStats::of(&avg),
            last: SummaryStats::of(&last),
            runs,
        });
    }
    Ok(Leaderboard { entries })
}
