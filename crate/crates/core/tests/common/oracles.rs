//! Independent oracles: naive re-implementations written straight from the
//! definitions, sharing nothing with the library beyond its data types.

use cmr::cluster_store::Example;
use cmr::learner::{fine_tune, Arch, FisherDiag, FisherEstimator, FitOptions, LearnerState, Penalty};
use cmr::memory::{
    score_interference, score_maxloss, select_conditional, BiMemory, ConditionalOptions, ReplayStrategy,
};
use cmr::refiners::{ewc_penalty, l2_penalty, RegAnchor};
use cmr::rng;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;

/// Naive cross-entropy straight from the parameter layout; no log-sum-exp.
pub fn oracle_loss(arch: Arch, d: usize, k: usize, theta: &[f64], ex: &Example) -> f64 {
    let x = &ex.features;
    let dense = |w: &[f64], b: &[f64], input: &[f64]| -> Vec<f64> {
        (0..b.len())
            .map(|r| b[r] + (0..input.len()).map(|c| w[r * input.len() + c] * input[c]).sum::<f64>())
            .collect()
    };
    let logits = match arch {
        Arch::Softmax => dense(&theta[..k * d], &theta[k * d..], x),
        Arch::Hidden { width: h } => {
            let hidden: Vec<f64> = dense(&theta[..h * d], &theta[h * d..h * d + h], x)
                .into_iter()
                .map(f64::tanh)
                .collect();
            let off = h * d + h;
            dense(&theta[off..off + k * h], &theta[off + k * h..], &hidden)
        }
    };
    let z: f64 = logits.iter().map(|v| v.exp()).sum();
    -(logits[ex.label].exp() / z).ln()
}

pub fn random_case(rng: &mut ChaCha8Rng, i: usize) -> (LearnerState, Vec<Example>) {
    let d = rng.random_range(1..6);
    let k = rng.random_range(2..5);
    let arch = if i.is_multiple_of(2) {
        Arch::Softmax
    } else {
        Arch::Hidden {
            width: rng.random_range(1..7),
        }
    };
    let theta: Vec<f64> = (0..arch.param_count(d, k))
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let state = LearnerState::zeros(arch, d, k).with_theta(theta).unwrap();
    let batch = (0..rng.random_range(1..6))
        .map(|j| Example {
            id: j as u64 * 7 + 3,
            features: (0..d).map(|_| rng.random_range(-2.0..2.0)).collect(),
            label: rng.random_range(0..k),
            cluster_id: 0,
        })
        .collect();
    (state, batch)
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

pub fn central_difference(theta: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    (0..theta.len())
        .map(|i| {
            let mut plus = theta.to_vec();
            let mut minus = theta.to_vec();
            plus[i] += H;
            minus[i] -= H;
            (f(&plus) - f(&minus)) / (2.0 * H)
        })
        .collect()
}

/// A random selection instance with |memory| <= 20 and forced score ties.
pub struct Case {
    pub prev: LearnerState,
    pub memory: BiMemory,
    pub all: Vec<Example>,
    pub errors: Vec<Example>,
    pub r: usize,
    pub fit: FitOptions,
}

pub fn example(rng: &mut ChaCha8Rng, id: u64) -> Example {
    Example {
        id,
        features: (0..3).map(|_| rng.random_range(-2.0..2.0)).collect(),
        label: rng.random_range(0..3),
        cluster_id: 0,
    }
}

pub fn selection_case(rng: &mut ChaCha8Rng) -> Case {
    let nu = rng.random_range(0..10);
    let no = rng.random_range(0..=(20 - nu).min(10));
    let mut upstream: Vec<Example> = (0..nu).map(|i| example(rng, 1000 + i as u64)).collect();
    let mut online: Vec<Example> = (0..no).map(|i| example(rng, 500 - i as u64)).collect();
    // exact duplicates under different ids force score ties
    if nu >= 2 {
        upstream[1] = Example {
            id: upstream[1].id,
            ..upstream[0].clone()
        };
    }
    if no >= 2 {
        online[0] = Example {
            id: online[0].id,
            ..online[1].clone()
        };
    }
    let mut memory = BiMemory::new(upstream.clone(), None);
    memory.write(&online, 1);
    let all: Vec<Example> = upstream.into_iter().chain(online).collect();
    let errors = (0..rng.random_range(1..6)).map(|i| example(rng, 2000 + i)).collect();
    let arch = if rng.random_bool(0.5) {
        Arch::Softmax
    } else {
        Arch::Hidden { width: 4 }
    };
    Case {
        prev: LearnerState::init(arch, 3, 3, rng.random()),
        memory,
        r: rng.random_range(0..=all.len()),
        all,
        errors,
        fit: FitOptions {
            lr: 0.05,
            epochs: rng.random_range(0..3),
            batch_size: 2,
            seed: rng.random(),
        },
    }
}

/// Ids of the top `r` by score; ranks are counted, not sorted.
pub fn oracle_top(all: &[Example], scores: &[f64], r: usize) -> Vec<u64> {
    let beats = |a: usize, b: usize| scores[a] > scores[b] || (scores[a] == scores[b] && all[a].id < all[b].id);
    let mut ranked = vec![None; all.len()];
    for i in 0..all.len() {
        let rank = (0..all.len()).filter(|&j| j != i && beats(j, i)).count();
        ranked[rank] = Some(all[i].id);
    }
    ranked
        .into_iter()
        .take(r)
        .map(|x| x.expect("ranks are a permutation"))
        .collect()
}

/// Worst relative error of the analytic batch gradient against central
/// differences of [`oracle_loss`] over `draws` random models.
pub fn worst_gradient_error(seed: u64, draws: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..draws)
        .map(|i| {
            let (s, batch) = random_case(&mut rng, i);
            let analytic = s.grad(&batch).unwrap();
            let numeric = central_difference(&s.theta, |th| {
                batch
                    .iter()
                    .map(|ex| oracle_loss(s.arch, s.d, s.k, th, ex))
                    .sum::<f64>()
                    / batch.len() as f64
            });
            rel_err(&analytic, &numeric)
        })
        .fold(0.0, f64::max)
}

/// Worst absolute error of both Fisher estimators against a brute-force
/// mean of squared per-example gradients.
pub fn worst_fisher_error(seed: u64, draws: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for i in 0..draws {
        let (s, batch) = random_case(&mut rng, i);
        let empirical = s.fisher_diag(&batch, FisherEstimator::Empirical).unwrap();
        let model = s.fisher_diag(&batch, FisherEstimator::Model).unwrap();
        let n = batch.len() as f64;
        let mut emp = vec![0.0; s.theta.len()];
        let mut exp = vec![0.0; s.theta.len()];
        for ex in batch.iter().rev() {
            let g = s.example_grad(ex).unwrap();
            for (a, gi) in emp.iter_mut().zip(&g) {
                *a += gi * gi / n;
            }
            // expectation over labels drawn from the model's own prediction
            let z: Vec<f64> = s.logits(&ex.features).unwrap();
            let norm: f64 = z.iter().map(|v| v.exp()).sum();
            for (y, zy) in z.iter().enumerate() {
                let relabeled = Example { label: y, ..ex.clone() };
                let gy = s.example_grad(&relabeled).unwrap();
                let p = zy.exp() / norm;
                for (a, gi) in exp.iter_mut().zip(&gy) {
                    *a += p * gi * gi / n;
                }
            }
        }
        for j in 0..emp.len() {
            worst = worst
                .max((empirical.0[j] - emp[j]).abs())
                .max((model.0[j] - exp[j]).abs());
        }
    }
    worst
}

/// Worst relative error of the (L2, EWC) penalty gradients against central
/// differences of the penalty values.
pub fn worst_penalty_errors(seed: u64, draws: usize) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut l2, mut ewc): (f64, f64) = (0.0, 0.0);
    for _ in 0..draws {
        let n = rng.random_range(1..30);
        let theta: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let prev: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let fisher: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..3.0)).collect();
        let lambda = rng.random_range(0.1..10.0);

        let mut g = vec![0.0; n];
        Penalty::L2 { anchor: &prev, lambda }.add_grad(&theta, &mut g);
        let numeric = central_difference(&theta, |th| lambda * l2_penalty(th, &prev).unwrap());
        l2 = l2.max(rel_err(&g, &numeric));

        let anchor = RegAnchor {
            theta_prev: prev.clone(),
            fisher_running: FisherDiag(fisher.clone()),
        };
        let mut g = vec![0.0; n];
        Penalty::Ewc {
            anchor: &prev,
            fisher: &fisher,
            lambda,
        }
        .add_grad(&theta, &mut g);
        let numeric = central_difference(&theta, |th| lambda * ewc_penalty(th, &anchor).unwrap());
        ewc = ewc.max(rel_err(&g, &numeric));
    }
    (l2, ewc)
}

/// Selection instances (out of `cases`, each tried with both strategies)
/// where `select_conditional` disagrees with [`oracle_top`].
pub fn selection_mismatches(seed: u64, cases: usize) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = Vec::new();
    let mut checked = 0;
    while checked < cases {
        let c = selection_case(&mut rng);
        if c.all.is_empty() {
            continue;
        }
        let virtual_model = if c.fit.epochs == 0 {
            c.prev.clone()
        } else {
            fine_tune(&c.prev, &c.errors, &c.fit).unwrap()
        };
        for strategy in [ReplayStrategy::Mir, ReplayStrategy::MaxLoss] {
            let scores: Vec<f64> = c
                .all
                .iter()
                .map(|e| {
                    let after = virtual_model.example_loss(e).unwrap();
                    match strategy {
                        ReplayStrategy::Mir => after - c.prev.example_loss(e).unwrap(),
                        _ => after,
                    }
                })
                .collect();
            let opts = ConditionalOptions {
                replay_size: c.r,
                candidate_pool: c.all.len(),
                strategy,
                virtual_fit: c.fit,
            };
            let mut draw = rng::from_seed(checked as u64);
            let sel = select_conditional(&c.memory, &c.prev, &c.errors, &opts, 2, &mut draw).unwrap();
            let got: Vec<u64> = sel.chosen.iter().map(|e| e.id).collect();
            let want = oracle_top(&c.all, &scores, c.r);
            if got != want || sel.candidate_pool_size != c.all.len() {
                bad.push(format!("case {checked} {strategy:?}: got {got:?}, oracle {want:?}"));
            }
        }
        checked += 1;
    }
    bad
}

/// Worst element-wise gap in `maxloss = interference + loss(prev)`.
pub fn worst_maxloss_identity_gap(seed: u64, cases: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let c = selection_case(&mut rng);
        let virtual_model = fine_tune(&c.prev, &c.errors, &FitOptions { epochs: 1, ..c.fit }).unwrap();
        let mir = score_interference(&c.prev, &virtual_model, &c.all).unwrap();
        let max = score_maxloss(&virtual_model, &c.all).unwrap();
        for (i, e) in c.all.iter().enumerate() {
            worst = worst.max((max[i] - (mir[i] + c.prev.example_loss(e).unwrap())).abs());
        }
    }
    worst
}
