//! Replay selection against an exhaustive score-and-rank oracle.

mod common;

use cmr::cluster_store::Example;
use cmr::learner::{Arch, FitOptions, LearnerState};
use cmr::memory::{select_conditional, BiMemory, ConditionalOptions, ReplayStrategy};
use cmr::rng;
use common::oracles::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const CASES: usize = 50;

#[test]
fn conditional_selection_matches_exhaustive_oracle() {
    let bad = selection_mismatches(77, CASES);
    assert!(bad.is_empty(), "{bad:#?}");
}

#[test]
fn maxloss_is_interference_plus_previous_loss() {
    let gap = worst_maxloss_identity_gap(78, CASES);
    assert!(gap <= 1e-10, "{gap}");
}

#[test]
fn current_episode_errors_are_never_replayed() {
    let mut rng = ChaCha8Rng::seed_from_u64(79);
    let up: Vec<Example> = (0..4).map(|i| example(&mut rng, i)).collect();
    let mut mem = BiMemory::new(up, None);
    let fresh: Vec<Example> = (0..4).map(|i| example(&mut rng, 100 + i)).collect();
    mem.write(&fresh, 3);
    let opts = ConditionalOptions {
        replay_size: 8,
        candidate_pool: 8,
        strategy: ReplayStrategy::Mir,
        virtual_fit: FitOptions {
            lr: 0.01,
            epochs: 1,
            batch_size: 2,
            seed: 0,
        },
    };
    let prev = LearnerState::init(Arch::Softmax, 3, 3, 1);
    let sel = select_conditional(&mem, &prev, &fresh, &opts, 3, &mut rng::from_seed(0)).unwrap();
    assert!(sel.chosen.iter().all(|e| e.id < 100));
    let sel = select_conditional(&mem, &prev, &fresh, &opts, 4, &mut rng::from_seed(0)).unwrap();
    assert_eq!(sel.chosen.len(), 8);
}
