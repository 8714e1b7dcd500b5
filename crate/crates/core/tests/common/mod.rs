//! Small fixtures shared by the integration tests.
#![allow(dead_code)]

use cmr::cluster_store::{GeneratorSpec, ShiftSpec};
use cmr::harness::Benchmark;
use cmr::learner::{Arch, UpstreamOptions};
use cmr::refiners::{Method, RefinerConfig};
use cmr::stream::{sample_stream, QueryStream, StreamConfig};

pub fn small_spec() -> GeneratorSpec {
    GeneratorSpec {
        d: 4,
        k: 3,
        per_cluster_size: 150,
        heldout_per_cluster: 40,
        base_means: vec![
            vec![2.0, 0.0, 0.5, 0.0],
            vec![-1.0, 1.7, 0.0, -0.5],
            vec![-1.0, -1.7, -0.5, 0.5],
        ],
        noise_scale: 0.6,
        shifts: [1.0, 2.0, -2.4]
            .iter()
            .map(|&angle| ShiftSpec {
                angle,
                translation: Vec::new(),
            })
            .collect(),
        seed: 9,
    }
}

pub fn small_upstream() -> UpstreamOptions {
    UpstreamOptions {
        arch: Arch::Hidden { width: 12 },
        epochs: 15,
        lr: 0.02,
        batch_size: 16,
        seed: 1,
    }
}

pub fn small_bench() -> Benchmark {
    Benchmark::generate(&small_spec(), &small_upstream()).unwrap()
}

pub fn small_stream_config(seed: u64) -> StreamConfig {
    StreamConfig {
        episodes: 15,
        episode_size: 16,
        alpha: 0.85,
        beta: 0.5,
        gamma: 0.8,
        seed,
        heldout_per_cluster: 20,
        global_without_replacement: false,
    }
}

pub fn small_stream(bench: &Benchmark, seed: u64) -> QueryStream {
    sample_stream(&bench.clusters, &small_stream_config(seed)).unwrap()
}

/// Refiner settings scaled to the small fixtures.
pub fn small_refiner(method: Method) -> RefinerConfig {
    RefinerConfig {
        epochs: 5,
        replay_size: 8,
        candidate_pool: 16,
        upstream_memory: 64,
        offline_upstream: 64,
        offline_epochs: 5,
        ..RefinerConfig::new(method)
    }
}
pub mod oracles;
