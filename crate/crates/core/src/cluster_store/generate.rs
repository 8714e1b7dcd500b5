use rand::Rng as _;
use rand_distr::StandardNormal;

use super::{ClusterSet, Example, GeneratorSpec};
use crate::error::Result;
use crate::rng;

/// Draws every pool of the Gaussian mixture described by `spec`.
///
/// Ids are assigned sequentially: cluster 0 training pool, cluster 0
/// held-out pool, cluster 1 training pool, and so on. Labels cycle through
/// the classes so every pool is class-balanced. Each cluster draws from its
/// own sub-stream of `spec.seed`, so adding a shift never changes the
/// clusters before it.
pub fn generate_clusters(spec: &GeneratorSpec) -> Result<ClusterSet> {
    spec.validate()?;
    let mut next_id = 0u64;
    let mut clusters = Vec::with_capacity(spec.n() + 1);
    let mut heldout = Vec::with_capacity(spec.n() + 1);
    for cluster in 0..=spec.n() {
        let means = spec.cluster_means(cluster);
        let mut rng = rng::substream(spec.seed, "cluster", cluster as u64);
        let mut draw = |count: usize| {
            (0..count)
                .map(|j| {
                    let label = j % spec.k;
                    let features = means[label]
                        .iter()
                        .map(|m| {
                            let z: f64 = rng.sample(StandardNormal);
                            m + spec.noise_scale * z
                        })
                        .collect();
                    let ex = Example {
                        id: next_id,
                        features,
                        label,
                        cluster_id: cluster,
                    };
                    next_id += 1;
                    ex
                })
                .collect::<Vec<_>>()
        };
        clusters.push(draw(spec.per_cluster_size));
        heldout.push(draw(spec.heldout_per_cluster));
    }
    ClusterSet::new(spec.d, spec.k, spec.clone(), clusters, heldout)
}
