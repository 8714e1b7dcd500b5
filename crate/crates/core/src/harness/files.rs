//! Run output directories.
//!
//! | file              | contents                                            |
//! |-------------------|-----------------------------------------------------|
//! | `config.toml`     | fully resolved run config                           |
//! | `inputs.json`     | SHA-256 of the config, clusters, stream and `f_0`   |
//! | `trace.csv`       | one metric record per episode                       |
//! | `report.json`     | aggregates (fractions) plus identifying metadata    |
//! | `predictions.csv` | `t,id,label,predicted,refined` for every query      |
//! | `memory.csv`      | replay memory at the end (replay methods only)      |
//! | `model.json`      | final model checkpoint                              |
//! | `timing.json`     | wall-clock time; the only non-deterministic file    |

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Benchmark, RunConfig, RunResult};
use crate::error::{Error, Result};
use crate::learner::{write_checkpoint, UpstreamReport};
use crate::metrics::{write_trace_csv, AggregateReport};
use crate::refiners::Method;
use crate::stream::{write_stream, QueryStream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputHashes {
    pub config_sha256: String,
    pub clusters_sha256: String,
    pub stream_sha256: String,
    pub upstream_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub method: Method,
    pub config_sha256: String,
    pub episodes: usize,
    pub total_errors: usize,
    pub upstream: Option<UpstreamReport>,
    pub aggregate: AggregateReport,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes every result file of a run into `dir` (created if missing).
pub fn write_run(
    dir: impl AsRef<Path>,
    config: &RunConfig,
    bench: &Benchmark,
    stream: &QueryStream,
    result: &RunResult,
) -> Result<RunReport> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let config_text = config.to_toml()?;
    let mut stream_bytes = Vec::new();
    write_stream(stream, &mut stream_bytes)?;
    let mut f0_bytes = Vec::new();
    write_checkpoint(&bench.f0, &mut f0_bytes)?;
    let inputs = InputHashes {
        config_sha256: sha256_hex(config_text.as_bytes()),
        clusters_sha256: bench.clusters.content_hash(),
        stream_sha256: sha256_hex(&stream_bytes),
        upstream_sha256: sha256_hex(&f0_bytes),
    };
    write(dir, "config.toml", config_text.as_bytes())?;
    write(dir, "inputs.json", &serde_json::to_vec_pretty(&inputs)?)?;

    let mut trace = Vec::new();
    write_trace_csv(&result.trace, &mut trace)?;
    write(dir, "trace.csv", &trace)?;

    let report = RunReport {
        run_id: config.run_id.clone(),
        method: result.method,
        config_sha256: inputs.config_sha256.clone(),
        episodes: stream.episodes.len(),
        total_errors: result.trace.records.iter().map(|r| r.errors).sum(),
        upstream: bench.upstream.clone(),
        aggregate: result.report,
    };
    write(dir, "report.json", &serde_json::to_vec_pretty(&report)?)?;

    let mut preds = csv::Writer::from_writer(Vec::new());
    for p in &result.predictions {
        preds.serialize(p)?;
    }
    let preds = preds
        .into_inner()
        .map_err(|e| Error::config(format!("prediction log: {e}")))?;
    write(dir, "predictions.csv", &preds)?;

    if let Some(rows) = &result.memory {
        let mut mem = csv::Writer::from_writer(Vec::new());
        mem.write_record(["pool", "id", "t"])?;
        for (pool, id, t) in rows {
            let t = t.map(|t| t.to_string()).unwrap_or_default();
            mem.write_record([pool.to_string(), id.to_string(), t])?;
        }
        let mem = mem
            .into_inner()
            .map_err(|e| Error::config(format!("memory log: {e}")))?;
        write(dir, "memory.csv", &mem)?;
    }

    let mut model = Vec::new();
    write_checkpoint(&result.final_model, &mut model)?;
    write(dir, "model.json", &model)?;

    let timing = serde_json::json!({ "wall_clock_seconds": result.wall_clock.as_secs_f64() });
    write(dir, "timing.json", &serde_json::to_vec_pretty(&timing)?)?;
    Ok(report)
}

pub fn read_run_report(path: impl AsRef<Path>) -> Result<RunReport> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
