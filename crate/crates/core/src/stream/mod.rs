//! Query streams with controllable non-stationarity.
//!
//! Each episode mixes three sources: the upstream cluster `V_0` (a share that
//! decays geometrically with `alpha`), a major out-of-distribution cluster
//! `c_t` that follows a sticky Markov chain (stay probability `beta`), and the
//! remaining out-of-distribution clusters (a `1 - gamma` share of the OOD
//! budget).

mod io;

use std::collections::BTreeSet;

use rand::seq::index;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster_store::{ClusterSet, Example};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

pub use io::{load_stream, parse_stream_file, save_stream, write_stream, StreamFile};

fn default_heldout_per_cluster() -> usize {
    100
}

/// Sampling arguments of one stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamConfig {
    /// Number of episodes `T`.
    pub episodes: usize,
    /// Episode size `b`.
    pub episode_size: usize,
    /// Upstream decay factor, in (0, 1].
    pub alpha: f64,
    /// Probability of keeping the major cluster from one episode to the next.
    pub beta: f64,
    /// Share of the OOD budget drawn from the major cluster.
    pub gamma: f64,
    pub seed: u64,
    /// Held-out examples per cluster in the matched generalization set.
    #[serde(default = "default_heldout_per_cluster")]
    pub heldout_per_cluster: usize,
    /// When set, an example is never drawn twice anywhere in the stream.
    /// By default examples are unique within an episode only.
    #[serde(default)]
    pub global_without_replacement: bool,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            episodes: 100,
            episode_size: 64,
            alpha: 0.9,
            beta: 0.5,
            gamma: 0.8,
            seed: 0,
            heldout_per_cluster: default_heldout_per_cluster(),
            global_without_replacement: false,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.episodes < 1 || self.episode_size < 1 {
            return Err(Error::config("episodes and episode_size must be at least 1"));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::config(format!("alpha = {} not in (0, 1]", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::config(format!("beta = {} not in [0, 1]", self.beta)));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::config(format!("gamma = {} not in [0, 1]", self.gamma)));
        }
        if self.heldout_per_cluster == 0 {
            return Err(Error::config("heldout_per_cluster must be positive"));
        }
        Ok(())
    }
}

/// How an episode's `b` slots are split between the three sources.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    /// Drawn from `V_0`.
    pub upstream: usize,
    /// Total out-of-distribution share.
    pub ood: usize,
    /// Part of `ood` drawn from the major cluster.
    pub major: usize,
}

/// Budgets of episode `t` (1-based).
///
/// `upstream = round(b * alpha^(t-1))`, `ood = b - upstream`,
/// `major = round(ood * gamma)`. `round` is half away from zero.
pub fn episode_budget(t: usize, config: &StreamConfig) -> Budget {
    assert!(t >= 1, "episodes are numbered from 1");
    let b = config.episode_size;
    let decay = config.alpha.powi((t - 1).min(i32::MAX as usize) as i32);
    let upstream = ((b as f64 * decay).round() as usize).min(b);
    let ood = b - upstream;
    let major = ((ood as f64 * config.gamma).round() as usize).min(ood);
    Budget { upstream, ood, major }
}

/// Next major cluster in `[1, n]`: stays at `prev` with probability `beta`,
/// otherwise moves to one of the other `n - 1` clusters uniformly.
pub fn next_major_cluster(prev: usize, n: usize, beta: f64, rng: &mut Rng) -> usize {
    debug_assert!(n >= 1 && (1..=n).contains(&prev));
    if n == 1 {
        return prev;
    }
    // one uniform draw decides stay/switch so beta in {0, 1} is exact
    let u: f64 = rng.random();
    if u < beta {
        return prev;
    }
    let pick = rng.random_range(1..n);
    if pick >= prev {
        pick + 1
    } else {
        pick
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    /// 1-based episode index.
    pub t: usize,
    /// Major OOD cluster `c_t`; 0 when the cluster set has no OOD clusters.
    pub major_cluster: usize,
    pub budget: Budget,
    pub examples: Vec<Example>,
}

impl Episode {
    pub fn ids(&self) -> Vec<u64> {
        self.examples.iter().map(|e| e.id).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryStream {
    pub config: StreamConfig,
    /// Content hash of the cluster set the stream was drawn from.
    pub clusters_hash: String,
    pub split: Option<Split>,
    pub episodes: Vec<Episode>,
    /// Held-out generalization set, drawn only from held-out pools.
    pub heldout: Vec<Example>,
}

impl QueryStream {
    /// Clusters that contribute at least one example to some episode.
    pub fn clusters_seen(&self) -> BTreeSet<usize> {
        self.episodes
            .iter()
            .flat_map(|ep| ep.examples.iter().map(|e| e.cluster_id))
            .collect()
    }
}

/// Draws `count` distinct examples from the concatenation of `pools`,
/// skipping positions already marked used.
fn draw_from(
    pools: &[&[Example]],
    used: Option<&[Vec<bool>]>,
    count: usize,
    name: impl FnOnce() -> String,
    rng: &mut Rng,
) -> Result<Vec<(usize, usize)>> {
    let mut slots = Vec::new();
    for (p, pool) in pools.iter().enumerate() {
        for i in 0..pool.len() {
            if used.is_none_or(|u| !u[p][i]) {
                slots.push((p, i));
            }
        }
    }
    if count > slots.len() {
        return Err(Error::PoolExhausted {
            cluster: name(),
            needed: count,
            available: slots.len(),
        });
    }
    Ok(index::sample(rng, slots.len(), count)
        .into_iter()
        .map(|j| slots[j])
        .collect())
}

/// Samples one query stream from `clusters`.
pub fn sample_stream(clusters: &ClusterSet, config: &StreamConfig) -> Result<QueryStream> {
    config.validate()?;
    let n = clusters.n();
    let mut chain_rng = rng::substream(config.seed, "major-cluster", 0);
    let mut draw_rng = rng::substream(config.seed, "episode-draw", 0);
    let mut used: Option<Vec<Vec<bool>>> = config
        .global_without_replacement
        .then(|| clusters.clusters().iter().map(|p| vec![false; p.len()]).collect());

    let mut episodes = Vec::with_capacity(config.episodes);
    let mut major = 0;
    for t in 1..=config.episodes {
        let budget = episode_budget(t, config);
        if n >= 1 {
            major = if t == 1 {
                chain_rng.random_range(1..=n)
            } else {
                next_major_cluster(major, n, config.beta, &mut chain_rng)
            };
        } else if budget.ood > 0 {
            return Err(Error::PoolExhausted {
                cluster: "V_1..V_N (no OOD clusters)".into(),
                needed: budget.ood,
                available: 0,
            });
        }

        // (pool, index) pairs in cluster coordinates
        let mut picks: Vec<(usize, usize)> = Vec::with_capacity(config.episode_size);
        let mut take = |members: Vec<usize>, count: usize, name: String| -> Result<()> {
            if count == 0 {
                return Ok(());
            }
            let pools: Vec<&[Example]> = members.iter().map(|&c| clusters.cluster(c)).collect();
            let used_view: Option<Vec<Vec<bool>>> =
                used.as_ref().map(|u| members.iter().map(|&c| u[c].clone()).collect());
            let chosen = draw_from(&pools, used_view.as_deref(), count, || name, &mut draw_rng)?;
            for (p, i) in chosen {
                let c = members[p];
                if let Some(u) = used.as_mut() {
                    u[c][i] = true;
                }
                picks.push((c, i));
            }
            Ok(())
        };
        take(vec![0], budget.upstream, "V_0".into())?;
        if n >= 1 {
            take(vec![major], budget.major, format!("V_{major}"))?;
            let others: Vec<usize> = (1..=n).filter(|&c| c != major).collect();
            take(others, budget.ood - budget.major, format!("V_!={major}"))?;
        }

        let examples: Vec<Example> = picks.into_iter().map(|(c, i)| clusters.cluster(c)[i].clone()).collect();
        assert_eq!(examples.len(), config.episode_size, "|Q_t| must equal b");
        episodes.push(Episode {
            t,
            major_cluster: major,
            budget,
            examples,
        });
    }

    let mut stream = QueryStream {
        config: config.clone(),
        clusters_hash: clusters.content_hash(),
        split: None,
        episodes,
        heldout: Vec::new(),
    };
    let mut heldout_rng = rng::substream(config.seed, "heldout", 0);
    for c in stream.clusters_seen() {
        let pool = clusters.heldout(c);
        let count = config.heldout_per_cluster.min(pool.len());
        for i in index::sample(&mut heldout_rng, pool.len(), count) {
            stream.heldout.push(pool[i].clone());
        }
    }
    Ok(stream)
}

/// Samples `n_validation + n_test` streams sharing `config` except for the
/// seed. Stream `i` uses seed `derive(base_seed, "stream", i)`; the first
/// `n_validation` are validation streams.
pub fn sample_stream_family(
    clusters: &ClusterSet,
    config: &StreamConfig,
    n_validation: usize,
    n_test: usize,
    base_seed: u64,
) -> Result<(Vec<QueryStream>, Vec<QueryStream>)> {
    if n_validation < 1 || n_test < 1 {
        return Err(Error::config("need at least one validation and one test stream"));
    }
    let mut streams = (0..n_validation + n_test)
        .into_par_iter()
        .map(|i| {
            let cfg = StreamConfig {
                seed: rng::derive(base_seed, "stream", i as u64),
                ..config.clone()
            };
            let mut s = sample_stream(clusters, &cfg)?;
            s.split = Some(if i < n_validation {
                Split::Validation
            } else {
                Split::Test
            });
            Ok(s)
        })
        .collect::<Result<Vec<_>>>()?;
    let test = streams.split_off(n_validation);
    Ok((streams, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster_store::{generate_clusters, GeneratorSpec, ShiftSpec};

    fn cfg(b: usize, alpha: f64, gamma: f64) -> StreamConfig {
        StreamConfig {
            episode_size: b,
            alpha,
            gamma,
            ..StreamConfig::default()
        }
    }

    pub(crate) fn toy_clusters(n: usize, size: usize) -> ClusterSet {
        let spec = GeneratorSpec {
            d: 2,
            k: 2,
            per_cluster_size: size,
            heldout_per_cluster: 20,
            base_means: vec![vec![2.0, 0.0], vec![-2.0, 0.0]],
            noise_scale: 0.5,
            shifts: (0..n)
                .map(|i| ShiftSpec {
                    angle: 0.3 * (i + 1) as f64,
                    translation: vec![],
                })
                .collect(),
            seed: 3,
        };
        generate_clusters(&spec).unwrap()
    }

    #[test]
    fn budget_examples() {
        let b = |t| {
            let x = episode_budget(t, &cfg(64, 0.9, 0.8));
            (x.upstream, x.ood, x.major)
        };
        assert_eq!(b(1), (64, 0, 0));
        assert_eq!(b(2), (58, 6, 5));
        assert_eq!(b(50), (0, 64, 51));
    }

    #[test]
    fn chain_degenerate_cases() {
        let mut rng = rng::from_seed(1);
        for _ in 0..200 {
            assert_eq!(next_major_cluster(3, 5, 1.0, &mut rng), 3);
            assert_eq!(next_major_cluster(1, 2, 0.0, &mut rng), 2);
            assert_eq!(next_major_cluster(1, 1, 0.0, &mut rng), 1);
            assert_ne!(next_major_cluster(4, 5, 0.0, &mut rng), 4);
        }
    }

    #[test]
    fn fully_upstream_single_episode() {
        let set = toy_clusters(2, 50);
        let config = StreamConfig {
            episodes: 1,
            episode_size: 8,
            alpha: 1.0,
            ..StreamConfig::default()
        };
        let s = sample_stream(&set, &config).unwrap();
        assert_eq!(s.episodes.len(), 1);
        assert!(s.episodes[0].examples.iter().all(|e| e.cluster_id == 0));
        assert_eq!(s.clusters_seen().into_iter().collect::<Vec<_>>(), vec![0]);
        assert!(s
            .heldout
            .iter()
            .all(|e| set.pool_of(e.id) == Some(crate::cluster_store::Pool::Heldout)));
    }

    #[test]
    fn exhaustion_names_cluster() {
        let set = toy_clusters(2, 5);
        let config = StreamConfig {
            episodes: 3,
            episode_size: 8,
            alpha: 0.5,
            gamma: 1.0,
            ..StreamConfig::default()
        };
        let err = sample_stream(&set, &config).unwrap_err();
        assert!(matches!(err, Error::PoolExhausted { .. }), "{err}");
        assert!(err.to_string().contains("V_"), "{err}");
    }

    #[test]
    fn global_no_replacement_never_repeats() {
        let set = toy_clusters(3, 200);
        let config = StreamConfig {
            episodes: 10,
            episode_size: 16,
            global_without_replacement: true,
            ..StreamConfig::default()
        };
        let s = sample_stream(&set, &config).unwrap();
        let mut seen = std::collections::HashSet::new();
        for ep in &s.episodes {
            for e in &ep.examples {
                assert!(seen.insert(e.id));
            }
        }
    }

    #[test]
    fn family_split_and_distinct_seeds() {
        let set = toy_clusters(2, 100);
        let config = StreamConfig {
            episodes: 5,
            episode_size: 8,
            ..StreamConfig::default()
        };
        let (v, t) = sample_stream_family(&set, &config, 1, 1, 9).unwrap();
        assert_eq!(v[0].split, Some(Split::Validation));
        assert_eq!(t[0].split, Some(Split::Test));
        assert_ne!(v[0].episodes, t[0].episodes);
        assert!(sample_stream_family(&set, &config, 0, 1, 9).is_err());
    }
}
