//! Labeled data pools: one upstream cluster `V_0` plus `N` shifted
//! out-of-distribution clusters, each with a disjoint held-out partition.

mod generate;
mod io;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use generate::generate_clusters;
pub use io::{load_clusters, parse_clusters, save_clusters, write_clusters};

/// One labeled example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: u64,
    pub features: Vec<f64>,
    pub label: usize,
    pub cluster_id: usize,
}

/// Per-cluster distribution shift applied to the upstream class means.
///
/// The rotation turns every coordinate plane `(2j, 2j + 1)` by `angle`
/// radians (an odd trailing coordinate is left alone); the translation is
/// added afterwards. An empty translation means no translation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftSpec {
    pub angle: f64,
    #[serde(default)]
    pub translation: Vec<f64>,
}

/// Parameters of the Gaussian-mixture generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub d: usize,
    pub k: usize,
    pub per_cluster_size: usize,
    pub heldout_per_cluster: usize,
    pub base_means: Vec<Vec<f64>>,
    pub noise_scale: f64,
    pub shifts: Vec<ShiftSpec>,
    pub seed: u64,
}

impl GeneratorSpec {
    /// Number of out-of-distribution clusters.
    pub fn n(&self) -> usize {
        self.shifts.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 1 {
            return Err(Error::config("feature dimension d must be at least 1"));
        }
        if self.k < 2 {
            return Err(Error::config("class count K must be at least 2"));
        }
        if self.per_cluster_size == 0 || self.heldout_per_cluster == 0 {
            return Err(Error::config("pool sizes must be positive"));
        }
        if !(self.noise_scale.is_finite() && self.noise_scale > 0.0) {
            return Err(Error::config("noise_scale must be a positive finite number"));
        }
        if self.base_means.len() != self.k {
            return Err(Error::config(format!(
                "expected {} base means, got {}",
                self.k,
                self.base_means.len()
            )));
        }
        for (c, mean) in self.base_means.iter().enumerate() {
            if mean.len() != self.d {
                return Err(Error::config(format!(
                    "base mean {c} has {} entries, expected {}",
                    mean.len(),
                    self.d
                )));
            }
            if mean.iter().any(|v| !v.is_finite()) {
                return Err(Error::config(format!("base mean {c} is not finite")));
            }
        }
        for a in 0..self.k {
            for b in a + 1..self.k {
                if self.base_means[a] == self.base_means[b] {
                    return Err(Error::config(format!("classes {a} and {b} share the same mean")));
                }
            }
        }
        for (i, shift) in self.shifts.iter().enumerate() {
            if !shift.angle.is_finite() {
                return Err(Error::config(format!("shift {i}: angle is not finite")));
            }
            if !shift.translation.is_empty() && shift.translation.len() != self.d {
                return Err(Error::config(format!(
                    "shift {i}: translation has {} entries, expected {}",
                    shift.translation.len(),
                    self.d
                )));
            }
            if shift.translation.iter().any(|v| !v.is_finite()) {
                return Err(Error::config(format!("shift {i}: translation is not finite")));
            }
        }
        Ok(())
    }

    /// Class means of cluster `cluster` (0 = upstream, untransformed).
    pub fn cluster_means(&self, cluster: usize) -> Vec<Vec<f64>> {
        if cluster == 0 {
            return self.base_means.clone();
        }
        let shift = &self.shifts[cluster - 1];
        let (sin, cos) = shift.angle.sin_cos();
        self.base_means
            .iter()
            .map(|mean| {
                let mut out = mean.clone();
                for j in 0..self.d / 2 {
                    let (x, y) = (mean[2 * j], mean[2 * j + 1]);
                    out[2 * j] = cos * x - sin * y;
                    out[2 * j + 1] = sin * x + cos * y;
                }
                for (o, t) in out.iter_mut().zip(&shift.translation) {
                    *o += t;
                }
                out
            })
            .collect()
    }

    /// The benchmark generator used by the default run configuration.
    ///
    /// Four classes in sixteen dimensions; five rotated clusters whose
    /// upstream error grows from under a tenth to nearly all queries.
    pub fn benchmark() -> Self {
        default_benchmark_spec()
    }
}

fn default_benchmark_spec() -> GeneratorSpec {
    use rand::Rng as _;
    use rand_distr::StandardNormal;

    let d = 16;
    let k = 4;
    let mut rng = crate::rng::substream(0xC1A5_7E25, "base-means", 0);
    let base_means = (0..k)
        .map(|_| {
            (0..d)
                .map(|_| {
                    let z: f64 = rng.sample(StandardNormal);
                    (z * 1.5 * 1e6).round() / 1e6
                })
                .collect()
        })
        .collect();
    let shifts = [0.9, -1.1, 1.4, -1.7, 2.0]
        .iter()
        .map(|&angle| ShiftSpec {
            angle,
            translation: Vec::new(),
        })
        .collect();
    GeneratorSpec {
        d,
        k,
        per_cluster_size: 800,
        heldout_per_cluster: 200,
        base_means,
        noise_scale: 1.4,
        shifts,
        seed: 2022,
    }
}

/// Where an example lives inside a [`ClusterSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Pool {
    Train,
    Heldout,
}

impl Pool {
    pub fn as_str(self) -> &'static str {
        match self {
            Pool::Train => "train",
            Pool::Heldout => "heldout",
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Slot {
    pool: Pool,
    cluster: usize,
    index: usize,
}

/// The data pools `V_0..V_N` with their held-out partitions.
///
/// Constructed only through [`ClusterSet::new`], which checks every invariant
/// (non-empty pools, matching cluster ids, unique ids, dimensions, labels).
#[derive(Debug, Clone)]
pub struct ClusterSet {
    d: usize,
    k: usize,
    gen_spec: GeneratorSpec,
    clusters: Vec<Vec<Example>>,
    heldout: Vec<Vec<Example>>,
    index: HashMap<u64, Slot>,
}

impl PartialEq for ClusterSet {
    fn eq(&self, other: &Self) -> bool {
        self.d == other.d
            && self.k == other.k
            && self.gen_spec == other.gen_spec
            && self.clusters == other.clusters
            && self.heldout == other.heldout
    }
}

impl ClusterSet {
    pub fn new(
        d: usize,
        k: usize,
        gen_spec: GeneratorSpec,
        clusters: Vec<Vec<Example>>,
        heldout: Vec<Vec<Example>>,
    ) -> Result<Self> {
        if clusters.is_empty() || clusters.len() != heldout.len() {
            return Err(Error::config(format!(
                "{} training pools but {} held-out pools",
                clusters.len(),
                heldout.len()
            )));
        }
        let mut index = HashMap::new();
        for (pool, pools) in [(Pool::Train, &clusters), (Pool::Heldout, &heldout)] {
            for (cluster, examples) in pools.iter().enumerate() {
                if examples.is_empty() {
                    return Err(Error::config(format!(
                        "{} pool of cluster {cluster} is empty",
                        pool.as_str()
                    )));
                }
                for (i, ex) in examples.iter().enumerate() {
                    check_example(ex, d, k, clusters.len() - 1)?;
                    if ex.cluster_id != cluster {
                        return Err(Error::InvalidExample {
                            id: ex.id,
                            message: format!("cluster_id {} stored in pool of cluster {cluster}", ex.cluster_id),
                        });
                    }
                    let slot = Slot {
                        pool,
                        cluster,
                        index: i,
                    };
                    if index.insert(ex.id, slot).is_some() {
                        return Err(Error::InvalidExample {
                            id: ex.id,
                            message: "duplicate id".into(),
                        });
                    }
                }
            }
        }
        Ok(Self {
            d,
            k,
            gen_spec,
            clusters,
            heldout,
            index,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Number of out-of-distribution clusters.
    pub fn n(&self) -> usize {
        self.clusters.len() - 1
    }

    pub fn gen_spec(&self) -> &GeneratorSpec {
        &self.gen_spec
    }

    /// Training pool of cluster `i`.
    pub fn cluster(&self, i: usize) -> &[Example] {
        &self.clusters[i]
    }

    /// Held-out pool of cluster `i`.
    pub fn heldout(&self, i: usize) -> &[Example] {
        &self.heldout[i]
    }

    pub fn clusters(&self) -> &[Vec<Example>] {
        &self.clusters
    }

    pub fn heldout_pools(&self) -> &[Vec<Example>] {
        &self.heldout
    }

    pub fn get(&self, id: u64) -> Option<&Example> {
        self.index.get(&id).map(|s| match s.pool {
            Pool::Train => &self.clusters[s.cluster][s.index],
            Pool::Heldout => &self.heldout[s.cluster][s.index],
        })
    }

    pub fn pool_of(&self, id: u64) -> Option<Pool> {
        self.index.get(&id).map(|s| s.pool)
    }

    /// Hex SHA-256 of the canonical serialization; stream files use it to
    /// reference the cluster file they were sampled from.
    pub fn content_hash(&self) -> String {
        let mut buf = Vec::new();
        write_clusters(self, &mut buf).expect("writing to memory cannot fail");
        hex::encode(Sha256::digest(&buf))
    }
}

pub(crate) fn check_example(ex: &Example, d: usize, k: usize, max_cluster: usize) -> Result<()> {
    if ex.features.len() != d {
        return Err(Error::InvalidExample {
            id: ex.id,
            message: format!("{} features, expected {d}", ex.features.len()),
        });
    }
    if ex.features.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidExample {
            id: ex.id,
            message: "non-finite feature".into(),
        });
    }
    if ex.label >= k {
        return Err(Error::InvalidExample {
            id: ex.id,
            message: format!("label {} out of range for K = {k}", ex.label),
        });
    }
    if ex.cluster_id > max_cluster {
        return Err(Error::InvalidExample {
            id: ex.id,
            message: format!("cluster_id {} exceeds N = {max_cluster}", ex.cluster_id),
        });
    }
    Ok(())
}
