use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Benchmark;
use crate::cluster_store::{generate_clusters, load_clusters, GeneratorSpec};
use crate::error::{Error, Result};
use crate::learner::{load_checkpoint, UpstreamOptions};
use crate::metrics::MetricSettings;
use crate::refiners::{Method, RefinerConfig};
use crate::stream::{load_stream, sample_stream, QueryStream, StreamConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterSource {
    File(PathBuf),
    Generate(GeneratorSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamSource {
    File(PathBuf),
    Sample(StreamConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpstreamSource {
    Checkpoint(PathBuf),
    Train(UpstreamOptions),
}

/// Everything needed to reproduce one run. The TOML serialization of a
/// resolved config is the reproducibility contract: two runs with the same
/// serialized config produce byte-identical result files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run_id: String,
    /// Master seed of the method's randomness and the metric samples.
    pub seed: u64,
    pub clusters: ClusterSource,
    pub stream: StreamSource,
    pub upstream: UpstreamSource,
    pub refiner: RefinerConfig,
    #[serde(default)]
    pub metrics: MetricSettings,
}

impl RunConfig {
    /// The standard benchmark: generated clusters, a freshly sampled stream
    /// with the default dynamics and a trained upstream model.
    pub fn benchmark(method: Method, seed: u64) -> Self {
        Self {
            run_id: format!("{method}-seed{seed}"),
            seed,
            clusters: ClusterSource::Generate(GeneratorSpec::benchmark()),
            stream: StreamSource::Sample(StreamConfig::default()),
            upstream: UpstreamSource::Train(UpstreamOptions::default()),
            refiner: RefinerConfig::new(method),
            metrics: MetricSettings::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.refiner.validate()?;
        if self.metrics.eval_interval == 0 {
            return Err(Error::config("metrics.eval_interval must be at least 1"));
        }
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) {
            return Err(Error::config("run_id must be a non-empty plain name"));
        }
        match &self.clusters {
            ClusterSource::Generate(spec) => spec.validate()?,
            ClusterSource::File(_) => {}
        }
        match &self.stream {
            StreamSource::Sample(cfg) => cfg.validate()?,
            StreamSource::File(_) => {}
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("cannot serialize config: {e}")))
    }

    /// Makes relative file references relative to `base`.
    pub fn rebase(mut self, base: &Path) -> Self {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let ClusterSource::File(p) = &mut self.clusters {
            fix(p);
        }
        if let StreamSource::File(p) = &mut self.stream {
            fix(p);
        }
        if let UpstreamSource::Checkpoint(p) = &mut self.upstream {
            fix(p);
        }
        self
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = parse_run_config(&text, &path.display().to_string())?;
        Ok(cfg.rebase(path.parent().unwrap_or(Path::new("."))))
    }

    /// Loads or builds the clusters, upstream model and stream.
    pub fn materialize(&self) -> Result<(Benchmark, QueryStream)> {
        self.validate()?;
        let clusters = match &self.clusters {
            ClusterSource::File(p) => load_clusters(p)?,
            ClusterSource::Generate(spec) => generate_clusters(spec)?,
        };
        let bench = match &self.upstream {
            UpstreamSource::Train(opts) => Benchmark::new(clusters, opts)?,
            UpstreamSource::Checkpoint(p) => {
                let f0 = load_checkpoint(p)?;
                if f0.d != clusters.d() || f0.k != clusters.k() {
                    return Err(Error::config(
                        "upstream checkpoint does not match the cluster dimensions",
                    ));
                }
                Benchmark {
                    clusters,
                    f0,
                    upstream: None,
                }
            }
        };
        let stream = match &self.stream {
            StreamSource::File(p) => load_stream(p, &bench.clusters)?,
            StreamSource::Sample(cfg) => sample_stream(&bench.clusters, cfg)?,
        };
        Ok((bench, stream))
    }
}

/// Parses and validates the TOML text of a run config.
pub fn parse_run_config(text: &str, source: &str) -> Result<RunConfig> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Parse {
        path: source.to_string(),
        line: e
            .span()
            .map_or(0, |s| text[..s.start.min(text.len())].matches('\n').count() + 1),
        field: "<toml>".into(),
        message: e.message().to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn benchmark_config_round_trips_through_toml() {
        let cfg = RunConfig::benchmark(Method::Mir, 3);
        let text = cfg.to_toml().unwrap();
        assert_eq!(parse_run_config(&text, "c").unwrap(), cfg);
    }

    #[test]
    fn unknown_fields_and_bad_values_are_rejected() {
        let cfg = RunConfig::benchmark(Method::Cft, 0);
        let text = cfg.to_toml().unwrap();
        let typo = text.replace("[refiner]\n", "[refiner]\nlamda = 3.0\n");
        assert!(parse_run_config(&typo, "c").is_err());
        let bad = text.replace("replay_interval = 1", "replay_interval = 0");
        assert!(parse_run_config(&bad, "c").unwrap_err().is_validation());
    }
}
