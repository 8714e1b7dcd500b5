//! Command-line front end of the refinement simulator.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Deserialize;

use cmr::cluster_store::{generate_clusters, load_clusters, save_clusters, GeneratorSpec};
use cmr::harness::{
    dynamics_grid, read_run_report, render_reports, sweep, write_run, Benchmark, DynamicsVariant, GainTable, GridSpec,
    Leaderboard, ReportFormat, RunConfig, SweepOptions, UpstreamSource,
};
use cmr::learner::{load_checkpoint, UpstreamOptions};
use cmr::metrics::MetricSettings;
use cmr::refiners::Method;
use cmr::stream::{load_stream, sample_stream, sample_stream_family, save_stream, QueryStream, StreamConfig};

/// Exit code of malformed input: bad config, bad file, inconsistent data.
const EXIT_VALIDATION: u8 = 2;
/// Exit code of failures while running: I/O, divergence, exhausted pools.
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "cmr", version, about = "Continual model refinement simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a cluster file. Without --spec the standard benchmark is used.
    GenClusters {
        /// Generator spec (TOML).
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Output cluster file (JSONL).
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample one stream, or a validation/test family, from a cluster file.
    SampleStream {
        #[arg(long)]
        clusters: PathBuf,
        /// `[stream]` table plus an optional `[family]` table (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one method as described by a run config.
    Run {
        /// Run config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Run directory to create.
        #[arg(long)]
        out: PathBuf,
    },
    /// Tune each method on validation streams and evaluate it on test streams.
    Sweep {
        /// Comma-separated method names.
        #[arg(long, value_delimiter = ',', required = true)]
        methods: Vec<String>,
        /// Sweep config with one grid table per method (TOML).
        #[arg(long)]
        grids: PathBuf,
        /// Directory written by `sample-stream` with a family config.
        #[arg(long)]
        streams: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize the run directories under a directory.
    Report {
        /// Directory searched (one level deep) for `report.json`.
        #[arg(long)]
        runs: PathBuf,
        /// csv, json or table.
        #[arg(long, default_value = "table")]
        format: ReportFormat,
    },
}

/// The `sample-stream` config: the stream arguments, plus optionally the
/// size of a validation/test family.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleConfig {
    stream: StreamConfig,
    family: Option<FamilyConfig>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FamilyConfig {
    n_validation: usize,
    n_test: usize,
    base_seed: u64,
}

/// The `sweep` grid file.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepConfig {
    clusters: PathBuf,
    #[serde(default = "default_upstream")]
    upstream: UpstreamSource,
    #[serde(default = "default_seeds")]
    seeds: Vec<u64>,
    #[serde(default)]
    metrics: MetricSettings,
    #[serde(default)]
    base: toml::Table,
    #[serde(default)]
    grid: std::collections::BTreeMap<String, std::collections::BTreeMap<String, Vec<toml::Value>>>,
    /// Optional stream-dynamics grid over the winning configs.
    dynamics: Option<DynamicsConfig>,
}

/// Reruns each winning config on fresh streams per `(alpha, beta, gamma)`
/// variant; everything else about the streams follows the test family.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DynamicsConfig {
    variants: Vec<DynamicsVariant>,
    #[serde(default = "default_dynamics_streams")]
    streams: usize,
    #[serde(default)]
    base_seed: u64,
}

fn default_dynamics_streams() -> usize {
    3
}

fn default_upstream() -> UpstreamSource {
    UpstreamSource::Train(UpstreamOptions::default())
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| cmr::Error::Io {
        path: path.into(),
        source: e,
    })?;
    toml::from_str(&text).map_err(|e| cmr::Error::InvalidConfig(format!("{}: {}", path.display(), e.message())).into())
}

fn relative_to(base: &Path, p: &Path) -> PathBuf {
    if p.is_relative() {
        base.join(p)
    } else {
        p.to_path_buf()
    }
}

fn gen_clusters(spec: Option<&Path>, out: &Path) -> Result<()> {
    let spec = match spec {
        Some(p) => read_toml::<GeneratorSpec>(p)?,
        None => GeneratorSpec::benchmark(),
    };
    let set = generate_clusters(&spec)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    save_clusters(&set, out)?;
    println!(
        "wrote {} clusters ({} examples) to {}",
        set.n() + 1,
        count(&set),
        out.display()
    );
    Ok(())
}

fn count(set: &cmr::cluster_store::ClusterSet) -> usize {
    set.clusters().iter().chain(set.heldout_pools()).map(Vec::len).sum()
}

fn stream_name(i: usize) -> String {
    format!("stream-{i:03}.jsonl")
}

fn sample(clusters: &Path, config: &Path, out: &Path) -> Result<()> {
    let set = load_clusters(clusters)?;
    let cfg: SampleConfig = read_toml(config)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    match cfg.family {
        None => {
            let stream = sample_stream(&set, &cfg.stream)?;
            save_stream(&stream, out.join("stream.jsonl"))?;
            println!("wrote 1 stream to {}", out.display());
        }
        Some(f) => {
            let (val, test) = sample_stream_family(&set, &cfg.stream, f.n_validation, f.n_test, f.base_seed)?;
            for (split, streams) in [("validation", &val), ("test", &test)] {
                let dir = out.join(split);
                fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
                for (i, s) in streams.iter().enumerate() {
                    save_stream(s, dir.join(stream_name(i)))?;
                }
            }
            println!(
                "wrote {} validation and {} test streams to {}",
                val.len(),
                test.len(),
                out.display()
            );
        }
    }
    Ok(())
}

fn run(config: &Path, out: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let (bench, stream) = cfg.materialize()?;
    let result = cmr::harness::run_method(&bench, &stream, &cfg.refiner, &cfg.metrics, cfg.seed)?;
    let report = write_run(out, &cfg, &bench, &stream, &result)?;
    print!("{}", render_reports(&[report], ReportFormat::Table));
    Ok(())
}

fn load_split(dir: &Path, set: &cmr::cluster_store::ClusterSet) -> Result<Vec<QueryStream>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|x| x == "jsonl"));
    paths.sort();
    if paths.is_empty() {
        return Err(cmr::Error::InvalidConfig(format!("no stream files in {}", dir.display())).into());
    }
    Ok(paths.iter().map(|p| load_stream(p, set)).collect::<cmr::Result<_>>()?)
}

fn run_sweep(methods: &[String], grids: &Path, streams: &Path, out: &Path) -> Result<()> {
    let cfg: SweepConfig = read_toml(grids)?;
    let base_dir = grids.parent().unwrap_or(Path::new("."));
    let methods = methods
        .iter()
        .map(|m| Method::parse(m).ok_or_else(|| cmr::Error::InvalidConfig(format!("unknown method `{m}`"))))
        .collect::<cmr::Result<Vec<_>>>()?;
    let spec = GridSpec {
        base: cfg.base,
        grid: cfg.grid,
    };
    if let Some(unknown) = spec.grid.keys().find(|k| Method::parse(k).is_none()) {
        bail!(cmr::Error::InvalidConfig(format!(
            "grid for unknown method `{unknown}`"
        )));
    }
    let grids = methods
        .iter()
        .map(|&m| spec.configs_for(m).map(|g| (m, g)))
        .collect::<cmr::Result<Vec<_>>>()?;
    let set = load_clusters(relative_to(base_dir, &cfg.clusters))?;
    let bench = match &cfg.upstream {
        UpstreamSource::Train(opts) => Benchmark::new(set, opts)?,
        UpstreamSource::Checkpoint(p) => {
            let f0 = load_checkpoint(relative_to(base_dir, p))?;
            if f0.d != set.d() || f0.k != set.k() {
                bail!(cmr::Error::InvalidConfig(
                    "upstream checkpoint does not match the clusters".into()
                ));
            }
            Benchmark {
                clusters: set,
                f0,
                upstream: None,
            }
        }
    };
    let validation = load_split(&streams.join("validation"), &bench.clusters)?;
    let test = load_split(&streams.join("test"), &bench.clusters)?;
    let opts = SweepOptions {
        seeds: cfg.seeds,
        metrics: cfg.metrics,
    };
    let board = sweep(&bench, &grids, &validation, &test, &opts)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join("leaderboard.json");
    fs::write(&path, serde_json::to_vec_pretty(&board)?).with_context(|| format!("writing {}", path.display()))?;
    let table = leaderboard_table(&board);
    fs::write(out.join("leaderboard.txt"), &table).context("writing leaderboard.txt")?;
    print!("{table}");

    if let Some(dynamics) = &cfg.dynamics {
        let configs: Vec<_> = board.entries.iter().map(|e| e.config.clone()).collect();
        let gains = dynamics_grid(
            &bench,
            &test[0].config,
            &dynamics.variants,
            &configs,
            dynamics.streams,
            dynamics.base_seed,
            &opts.seeds,
            &opts.metrics,
        )?;
        let path = out.join("dynamics.json");
        fs::write(&path, serde_json::to_vec_pretty(&gains)?).with_context(|| format!("writing {}", path.display()))?;
        let table = gain_table(&gains);
        fs::write(out.join("dynamics.txt"), &table).context("writing dynamics.txt")?;
        print!("\n{table}");
    }
    Ok(())
}

/// OEC@T gain over the frozen model, in points, one row per variant.
fn gain_table(gains: &GainTable) -> String {
    let mut out = format!("{:<6} {:<6} {:<6} {:>12}", "alpha", "beta", "gamma", "frozen OEC@T");
    for c in &gains.configs {
        out += &format!(" {:>13}", c.method.name());
    }
    out.push('\n');
    for row in &gains.rows {
        let v = row.variant;
        out += &format!(
            "{:<6} {:<6} {:<6} {:>12.2}",
            v.alpha,
            v.beta,
            v.gamma,
            100.0 * row.frozen_oec.mean
        );
        for g in &row.gains {
            out += &format!(" {:>+13.2}", 100.0 * g.mean);
        }
        out.push('\n');
    }
    out
}

fn leaderboard_table(board: &Leaderboard) -> String {
    let fmt = |m: &Option<cmr::harness::MeanStd>| match m {
        Some(m) => format!("{:.2}±{:.2}", 100.0 * m.mean, 100.0 * m.std),
        None => "-".to_string(),
    };
    let mut out = format!(
        "{:<13} {:>8} {:>12} {:>12} {:>12} {:>12} {:>12} {:>12}\n",
        "method", "val", "AVG EFR", "UKR@T", "OKR@T", "CSR@T", "KG@T", "OEC@T"
    );
    for e in &board.entries {
        out += &format!(
            "{:<13} {:>8.2} {:>12} {:>12} {:>12} {:>12} {:>12} {:>12}\n",
            e.method.name(),
            100.0 * e.validation_score,
            fmt(&e.avg.efr),
            fmt(&e.last.ukr),
            fmt(&e.last.okr),
            fmt(&e.last.csr),
            fmt(&e.last.kg),
            fmt(&e.last.oec),
        );
    }
    out
}

fn report(runs: &Path, format: ReportFormat) -> Result<()> {
    let mut paths = Vec::new();
    if runs.join("report.json").is_file() {
        paths.push(runs.join("report.json"));
    }
    for entry in fs::read_dir(runs).with_context(|| format!("reading {}", runs.display()))? {
        let p = entry?.path().join("report.json");
        if p.is_file() {
            paths.push(p);
        }
    }
    if paths.is_empty() {
        bail!(cmr::Error::InvalidConfig(format!(
            "no run reports under {}",
            runs.display()
        )));
    }
    let mut reports = paths.iter().map(read_run_report).collect::<cmr::Result<Vec<_>>>()?;
    reports.sort_by(|a, b| (a.method, &a.run_id).cmp(&(b.method, &b.run_id)));
    print!("{}", render_reports(&reports, format));
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<cmr::Error>() {
        Some(e) if e.is_validation() => EXIT_VALIDATION,
        _ => EXIT_RUNTIME,
    }
}

/// The error chain on one line. Library errors already quote their source,
/// so a cause whose text the previous message contains is skipped.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    let mut prev = String::new();
    for cause in err.chain() {
        let msg = cause.to_string();
        if !prev.contains(&msg) {
            if !out.is_empty() {
                out += ": ";
            }
            out += &msg;
        }
        prev = msg;
    }
    out
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenClusters { spec, out } => gen_clusters(spec.as_deref(), out),
        Command::SampleStream { clusters, config, out } => sample(clusters, config, out),
        Command::Run { config, out } => run(config, out),
        Command::Sweep {
            methods,
            grids,
            streams,
            out,
        } => run_sweep(methods, grids, streams, out),
        Command::Report { runs, format } => report(runs, *format),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
