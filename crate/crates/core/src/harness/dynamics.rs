//! Sensitivity of tuned methods to the stream dynamics: rerun fixed configs on
//! streams with other `(alpha, beta, gamma)` and report the OEC@T gain over
//! the frozen model. Configs are deliberately not re-tuned per variant.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::sweep::MeanStd;
use super::{run_method, run_reference_frozen, Benchmark};
use crate::error::{Error, Result};
use crate::metrics::MetricSettings;
use crate::refiners::RefinerConfig;
use crate::rng;
use crate::stream::{sample_stream, StreamConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsVariant {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainRow {
    pub variant: DynamicsVariant,
    pub frozen_oec: MeanStd,
    /// One entry per method config, in input order.
    pub gains: Vec<MeanStd>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainTable {
    pub configs: Vec<RefinerConfig>,
    pub rows: Vec<GainRow>,
}

/// For every variant, samples `n_streams` streams (stream `i` seeded with
/// `derive(base_seed, "stream", i)`) and runs the frozen model and each
/// config with every seed; gains are paired per (stream, seed).
#[allow(clippy::too_many_arguments)]
pub fn dynamics_grid(
    bench: &Benchmark,
    base: &StreamConfig,
    variants: &[DynamicsVariant],
    configs: &[RefinerConfig],
    n_streams: usize,
    base_seed: u64,
    seeds: &[u64],
    metrics: &MetricSettings,
) -> Result<GainTable> {
    if variants.is_empty() || configs.is_empty() || n_streams == 0 || seeds.is_empty() {
        return Err(Error::config(
            "dynamics grid needs variants, configs, streams and seeds",
        ));
    }
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        let streams = (0..n_streams)
            .into_par_iter()
            .map(|i| {
                let cfg = StreamConfig {
                    alpha: v.alpha,
                    beta: v.beta,
                    gamma: v.gamma,
                    seed: rng::derive(base_seed, "stream", i as u64),
                    ..base.clone()
                };
                sample_stream(&bench.clusters, &cfg)
            })
            .collect::<Result<Vec<_>>>()?;
        let jobs: Vec<(usize, u64)> = (0..n_streams)
            .flat_map(|s| seeds.iter().map(move |&seed| (s, seed)))
            .collect();
        // per job: frozen OEC@T followed by each config's OEC@T
        let results = jobs
            .par_iter()
            .map(|&(s, seed)| {
                let frozen = run_reference_frozen(bench, &streams[s], metrics, seed)?.report.last.oec;
                let mut out = vec![frozen];
                for cfg in configs {
                    out.push(run_method(bench, &streams[s], cfg, metrics, seed)?.report.last.oec);
                }
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()?;
        let frozen_oec = MeanStd::of(results.iter().map(|r| r[0]))
            .ok_or_else(|| Error::config("frozen OEC@T undefined (streams too short)"))?;
        let gains = (0..configs.len())
            .map(|c| {
                MeanStd::of(results.iter().map(|r| Some(r[c + 1]? - r[0]?)))
                    .ok_or_else(|| Error::config("OEC@T undefined (streams too short)"))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(GainRow {
            variant: *v,
            frozen_oec,
            gains,
        });
    }
    Ok(GainTable {
        configs: configs.to_vec(),
        rows,
    })
}
