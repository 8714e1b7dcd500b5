//! The refinable classifier: softmax regression or a one-hidden-layer tanh
//! network over flat parameter vectors, with analytic gradients, diagonal
//! Fisher estimates and an Adam optimizer.
//!
//! Every batch reduction visits examples in ascending id order, so results are
//! bit-reproducible no matter how a caller ordered the batch.

mod checkpoint;
mod model;
mod train;

use serde::{Deserialize, Serialize};

use crate::cluster_store::Example;
use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, parse_checkpoint, save_checkpoint, write_checkpoint};
pub use train::{fine_tune, fine_tune_with, train_upstream, FitOptions, Penalty, UpstreamOptions, UpstreamReport};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Arch {
    Softmax,
    /// One tanh hidden layer of the given width.
    Hidden {
        width: usize,
    },
}

impl Arch {
    pub fn param_count(self, d: usize, k: usize) -> usize {
        match self {
            Arch::Softmax => k * d + k,
            Arch::Hidden { width } => width * d + width + k * width + k,
        }
    }
}

/// How the diagonal Fisher is estimated.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FisherEstimator {
    /// Squared gradient of the loss at the true label.
    #[default]
    Empirical,
    /// Expectation of the squared gradient under the model's own predictive
    /// distribution, summed exactly over the K labels.
    Model,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn fresh(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerState {
    pub arch: Arch,
    pub d: usize,
    pub k: usize,
    pub theta: Vec<f64>,
    pub optimizer: AdamState,
}

/// Non-negative vector with one entry per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherDiag(pub Vec<f64>);

impl FisherDiag {
    pub fn zeros(len: usize) -> Self {
        FisherDiag(vec![0.0; len])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// Indices of `batch` sorted by ascending example id (stable for repeats).
pub(crate) fn id_order(batch: &[Example]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..batch.len()).collect();
    order.sort_by_key(|&i| batch[i].id);
    order
}

impl LearnerState {
    pub fn zeros(arch: Arch, d: usize, k: usize) -> Self {
        let n = arch.param_count(d, k);
        Self {
            arch,
            d,
            k,
            theta: vec![0.0; n],
            optimizer: AdamState::fresh(n),
        }
    }

    /// Small random initialization: N(0, 0.01^2) for softmax weights, Glorot
    /// scaling for the hidden variant; biases start at zero.
    pub fn init(arch: Arch, d: usize, k: usize, seed: u64) -> Self {
        use rand::Rng as _;
        use rand_distr::StandardNormal;

        let mut state = Self::zeros(arch, d, k);
        let mut rng = crate::rng::substream(seed, "learner-init", 0);
        let mut fill = |slice: &mut [f64], scale: f64| {
            for w in slice {
                let z: f64 = rng.sample(StandardNormal);
                *w = z * scale;
            }
        };
        match arch {
            Arch::Softmax => fill(&mut state.theta[..k * d], 0.01),
            Arch::Hidden { width } => {
                let (w1, rest) = state.theta.split_at_mut(width * d);
                fill(w1, (2.0 / (d + width) as f64).sqrt());
                let w2 = &mut rest[width..width + k * width];
                fill(w2, (2.0 / (width + k) as f64).sqrt());
            }
        }
        state
    }

    pub fn with_theta(&self, theta: Vec<f64>) -> Result<Self> {
        if theta.len() != self.theta.len() {
            return Err(Error::DimensionMismatch {
                expected: self.theta.len(),
                actual: theta.len(),
            });
        }
        Ok(Self { theta, ..self.clone() })
    }

    pub fn reset_optimizer(&mut self) {
        self.optimizer = AdamState::fresh(self.theta.len());
    }

    fn check_dim(&self, features: &[f64]) -> Result<()> {
        if features.len() != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                actual: features.len(),
            });
        }
        Ok(())
    }

    /// Class scores for one input.
    pub fn logits(&self, features: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(features)?;
        Ok(model::forward(self, features).logits)
    }

    /// Predicted class; ties go to the lowest index.
    pub fn predict(&self, features: &[f64]) -> Result<usize> {
        let z = self.logits(features)?;
        Ok(argmax(&z))
    }

    pub fn is_correct(&self, ex: &Example) -> Result<bool> {
        Ok(self.predict(&ex.features)? == ex.label)
    }

    /// Fraction of `batch` predicted correctly; `None` for an empty batch.
    pub fn accuracy(&self, batch: &[Example]) -> Result<Option<f64>> {
        if batch.is_empty() {
            return Ok(None);
        }
        let mut hits = 0usize;
        for ex in batch {
            hits += usize::from(self.is_correct(ex)?);
        }
        Ok(Some(hits as f64 / batch.len() as f64))
    }

    /// Cross-entropy of a single example.
    pub fn example_loss(&self, ex: &Example) -> Result<f64> {
        self.check_dim(&ex.features)?;
        Ok(model::example_loss(self, ex))
    }

    /// Mean cross-entropy over `batch`.
    pub fn loss(&self, batch: &[Example]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::config("loss of an empty batch"));
        }
        let mut total = 0.0;
        for i in id_order(batch) {
            total += self.example_loss(&batch[i])?;
        }
        Ok(total / batch.len() as f64)
    }

    /// Gradient of one example's loss with respect to `theta`.
    pub fn example_grad(&self, ex: &Example) -> Result<Vec<f64>> {
        self.check_dim(&ex.features)?;
        let mut g = vec![0.0; self.theta.len()];
        model::accumulate_grad(self, ex, 1.0, &mut g);
        Ok(g)
    }

    /// Gradient of [`LearnerState::loss`].
    pub fn grad(&self, batch: &[Example]) -> Result<Vec<f64>> {
        if batch.is_empty() {
            return Err(Error::config("gradient of an empty batch"));
        }
        self.grad_of(batch, &mut (0..batch.len()).collect::<Vec<_>>())
    }

    /// Mean gradient over `batch[subset]`. `subset` is re-sorted in place
    /// into ascending id order.
    pub(crate) fn grad_of(&self, batch: &[Example], subset: &mut [usize]) -> Result<Vec<f64>> {
        subset.sort_by_key(|&i| batch[i].id);
        let mut g = vec![0.0; self.theta.len()];
        for &i in subset.iter() {
            self.check_dim(&batch[i].features)?;
            model::accumulate_grad(self, &batch[i], 1.0, &mut g);
        }
        let n = subset.len() as f64;
        g.iter_mut().for_each(|v| *v /= n);
        Ok(g)
    }

    /// Diagonal Fisher: mean over the batch of squared per-example gradients.
    pub fn fisher_diag(&self, batch: &[Example], estimator: FisherEstimator) -> Result<FisherDiag> {
        if batch.is_empty() {
            return Err(Error::config("Fisher of an empty batch"));
        }
        let mut f = vec![0.0; self.theta.len()];
        for i in id_order(batch) {
            let ex = &batch[i];
            match estimator {
                FisherEstimator::Empirical => {
                    for (acc, g) in f.iter_mut().zip(self.example_grad(ex)?) {
                        *acc += g * g;
                    }
                }
                FisherEstimator::Model => {
                    self.check_dim(&ex.features)?;
                    let probs = softmax(&model::forward(self, &ex.features).logits);
                    for (label, p) in probs.into_iter().enumerate() {
                        let relabeled = Example { label, ..ex.clone() };
                        let mut g = vec![0.0; self.theta.len()];
                        model::accumulate_grad(self, &relabeled, 1.0, &mut g);
                        for (acc, gi) in f.iter_mut().zip(g) {
                            *acc += p * gi * gi;
                        }
                    }
                }
            }
        }
        let n = batch.len() as f64;
        f.iter_mut().for_each(|v| *v /= n);
        Ok(FisherDiag(f))
    }

    /// One Adam update with bias correction. Returns a new state; `self` is
    /// left untouched.
    pub fn step(&self, gradient: &[f64], lr: f64) -> Result<LearnerState> {
        let mut next = self.clone();
        next.step_in_place(gradient, lr)?;
        Ok(next)
    }

    #[allow(clippy::needless_range_loop)] // four parallel arrays
    pub(crate) fn step_in_place(&mut self, gradient: &[f64], lr: f64) -> Result<()> {
        if gradient.len() != self.theta.len() {
            return Err(Error::DimensionMismatch {
                expected: self.theta.len(),
                actual: gradient.len(),
            });
        }
        if gradient.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                context: "gradient".into(),
            });
        }
        let opt = &mut self.optimizer;
        opt.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(opt.step.min(i32::MAX as u64) as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(opt.step.min(i32::MAX as u64) as i32);
        for i in 0..gradient.len() {
            let g = gradient[i];
            opt.m[i] = ADAM_BETA1 * opt.m[i] + (1.0 - ADAM_BETA1) * g;
            opt.v[i] = ADAM_BETA2 * opt.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = opt.m[i] / bc1;
            let v_hat = opt.v[i] / bc2;
            self.theta[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
        if self.theta.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite {
                context: "parameters after update".into(),
            });
        }
        Ok(())
    }
}

pub(crate) fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate().skip(1) {
        if v > z[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(id: u64, features: Vec<f64>, label: usize) -> Example {
        Example {
            id,
            features,
            label,
            cluster_id: 0,
        }
    }

    #[test]
    fn zero_model_predicts_class_zero() {
        let s = LearnerState::zeros(Arch::Softmax, 3, 4);
        assert_eq!(s.predict(&[1.0, -2.0, 5.0]).unwrap(), 0);
        assert_eq!(s.predict(&[0.0, 0.0, 0.0]).unwrap(), 0);
    }

    #[test]
    fn sign_rule_two_class_model() {
        // class 1 weight row = e_1, class 0 row and biases zero
        let mut s = LearnerState::zeros(Arch::Softmax, 2, 2);
        s.theta[2] = 1.0;
        assert_eq!(s.predict(&[0.5, -3.0]).unwrap(), 1);
        assert_eq!(s.predict(&[-0.5, 3.0]).unwrap(), 0);
        assert_eq!(s.predict(&[0.0, 3.0]).unwrap(), 0);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let s = LearnerState::zeros(Arch::Softmax, 3, 2);
        assert!(matches!(
            s.predict(&[1.0]),
            Err(Error::DimensionMismatch { expected: 3, actual: 1 })
        ));
    }

    #[test]
    fn zero_model_loss_is_ln_k() {
        for k in [2, 3, 7] {
            let s = LearnerState::zeros(Arch::Softmax, 2, k);
            let batch = vec![ex(0, vec![1.0, 2.0], 0), ex(1, vec![-1.0, 0.5], k - 1)];
            assert!((s.loss(&batch).unwrap() - (k as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn confident_correct_prediction_has_near_zero_loss() {
        let mut s = LearnerState::zeros(Arch::Softmax, 1, 2);
        s.theta[1] = 800.0; // class 1 score = 800 x
        let l = s.loss(&[ex(0, vec![1.0], 1)]).unwrap();
        assert!((0.0..1e-12).contains(&l), "{l}");
    }

    #[test]
    fn batch_loss_is_mean_of_singletons() {
        let s = LearnerState::init(Arch::Hidden { width: 3 }, 2, 3, 4);
        let a = ex(5, vec![0.3, -1.2], 2);
        let b = ex(2, vec![1.1, 0.4], 0);
        let la = s.loss(std::slice::from_ref(&a)).unwrap();
        let lb = s.loss(std::slice::from_ref(&b)).unwrap();
        // ascending id order: b then a
        assert_eq!(s.loss(&[a, b]).unwrap(), (lb + la) / 2.0);
    }

    #[test]
    fn zero_gradient_on_fresh_state_keeps_theta() {
        let s = LearnerState::init(Arch::Softmax, 3, 2, 1);
        let next = s.step(&vec![0.0; s.theta.len()], 0.1).unwrap();
        assert_eq!(next.theta, s.theta);
        assert_eq!(next.optimizer.step, 1);
    }

    #[test]
    fn step_rejects_non_finite_gradient() {
        let s = LearnerState::zeros(Arch::Softmax, 1, 2);
        let mut g = vec![0.0; s.theta.len()];
        g[0] = f64::NAN;
        assert!(matches!(s.step(&g, 0.1), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        // loss = (w - 3)^2 on the first coordinate; minimizer w* = 3
        let mut s = LearnerState::zeros(Arch::Softmax, 1, 2);
        for _ in 0..200 {
            let mut g = vec![0.0; s.theta.len()];
            g[0] = 2.0 * (s.theta[0] - 3.0);
            s = s.step(&g, 0.05).unwrap();
        }
        assert!((s.theta[0] - 3.0).abs() < 1e-3, "{}", s.theta[0]);
    }

    #[test]
    fn identical_step_sequences_agree() {
        let s = LearnerState::init(Arch::Hidden { width: 4 }, 3, 3, 9);
        let batch = vec![ex(0, vec![1.0, 0.0, -1.0], 2), ex(1, vec![0.2, 0.3, 0.1], 1)];
        let run = || {
            let mut st = s.clone();
            for _ in 0..5 {
                let g = st.grad(&batch).unwrap();
                st = st.step(&g, 0.01).unwrap();
            }
            st
        };
        assert_eq!(run().theta, run().theta);
    }
}
