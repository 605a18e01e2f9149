//! Mean-field variational inference: divergences, the state posterior,
//! the evidence lower bound and the training loop.

mod elbo;
mod train;
mod variational;
mod warm_start;

pub use elbo::{elbo, elbo_gradients, elbo_with_noise, ElboBreakdown, ElboNoise};
pub use train::{
    infer_new_sequence, train, EpochRecord, Model, NewSequenceFit, TrainConfig, TrainOutput, Trainer,
};
pub use variational::{InitStrategy, SequencePosterior, VariationalParams};

use crate::error::{Error, Result};
use crate::generative::{GaussianDiag, GenerativeParams, StateBelief};
use crate::numerics::log_softmax;
use crate::real::Real;

/// Closed-form `KL(q ‖ p)` between diagonal Gaussians.
pub fn kl_gaussian_diag<R: Real>(q: &GaussianDiag<R>, p: &GaussianDiag<R>) -> Result<R> {
    if q.len() != p.len() {
        return Err(Error::ShapeMismatch {
            op: "kl_gaussian_diag",
            left: vec![q.len()],
            right: vec![p.len()],
        });
    }
    let half = R::lit(0.5);
    Ok(q.mean
        .iter()
        .zip(&q.log_var)
        .zip(p.mean.iter().zip(&p.log_var))
        .map(|((&mq, &lq), (&mp, &lp))| {
            let d = mq - mp;
            half * (lp - lq + (lq.exp() + d * d) / lp.exp() - R::one())
        })
        .sum())
}

/// `KL(q ‖ p)` between categoricals, probabilities floored at `1e-8`
/// before the log.
pub fn kl_categorical<R: Real>(q: &StateBelief<R>, p: &StateBelief<R>) -> R {
    let floor = R::log_floor();
    q.probs
        .iter()
        .zip(&p.probs)
        .map(|(&a, &b)| a * (a.max(floor).ln() - b.max(floor).ln()))
        .sum()
}

/// Reparameterized draw `mean + exp(log_var / 2) ⊙ noise`.
pub fn reparam_sample<R: Real>(g: &GaussianDiag<R>, noise: &[R]) -> Result<Vec<R>> {
    if noise.len() != g.len() {
        return Err(Error::ShapeMismatch {
            op: "reparam_sample",
            left: vec![g.len()],
            right: vec![noise.len()],
        });
    }
    let half = R::lit(0.5);
    Ok(g.mean
        .iter()
        .zip(&g.log_var)
        .zip(noise)
        .map(|((&m, &lv), &e)| m + (half * lv).exp() * e)
        .collect())
}

/// Approximate posterior over `s_t` given the current weight sample:
/// `π_t(s) ∝ [softmax(Φ·π_{t-1})]_s · N(w_t | μ_s(w_{t-ℓ}), Σ_s(w_{t-ℓ}))`,
/// normalized in log space.
pub fn state_posterior<R: Real>(
    prev: &StateBelief<R>,
    w_t: &[R],
    lagged: &[Vec<R>],
    theta: &GenerativeParams<R>,
) -> Result<StateBelief<R>> {
    let prior = theta.transition_prior(prev)?;
    let priors = theta.temporal_priors(lagged)?;
    if w_t.len() != theta.config.factors {
        return Err(Error::ShapeMismatch {
            op: "state_posterior",
            left: vec![w_t.len()],
            right: vec![theta.config.factors],
        });
    }
    let log_lik: Vec<R> = priors.iter().map(|g| g.log_density(w_t)).collect();
    posterior_from_log_terms(&prior, &log_lik)
}

/// Bayes rule in log space: `π(s) ∝ prior(s) · exp(log_lik(s))`.
pub fn posterior_from_log_terms<R: Real>(prior: &StateBelief<R>, log_lik: &[R]) -> Result<StateBelief<R>> {
    let logits: Vec<R> = prior
        .probs
        .iter()
        .zip(log_lik)
        .map(|(&p, &l)| p.max(R::min_positive_value()).ln() + l)
        .collect();
    if logits.iter().all(|l| !l.is_finite()) {
        return Err(Error::NonFinite("state posterior: every state has zero mass".into()));
    }
    let log_post = log_softmax(&logits);
    Ok(StateBelief {
        probs: log_post.into_iter().map(|l| l.exp()).collect(),
    })
}

/// Linear KL-annealing weight: `start` at epoch 0 rising to 1 over `ramp`
/// epochs, then constant.
pub fn anneal(epoch: usize, start: f64, ramp: usize) -> f64 {
    if ramp == 0 {
        return 1.0;
    }
    let frac = (epoch as f64 / ramp as f64).min(1.0);
    start + (1.0 - start) * frac
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generative::ModelConfig;
    use proptest::prelude::*;

    fn g(mean: Vec<f64>, var: Vec<f64>) -> GaussianDiag<f64> {
        GaussianDiag::from_variance(mean, &var).unwrap()
    }

    #[test]
    fn gaussian_kl_values() {
        let p = g(vec![0.3, -1.0], vec![0.5, 2.0]);
        assert_eq!(kl_gaussian_diag(&p, &p).unwrap(), 0.0);
        let kl = kl_gaussian_diag(&g(vec![1.0], vec![1.0]), &g(vec![0.0], vec![1.0])).unwrap();
        assert!((kl - 0.5).abs() < 1e-12);
        let q = g(vec![0.4, 1.0], vec![0.3, 1.7]);
        let per: f64 = (0..2)
            .map(|i| {
                kl_gaussian_diag(&g(vec![q.mean[i]], vec![q.variance()[i]]), &g(vec![p.mean[i]], vec![p.variance()[i]]))
                    .unwrap()
            })
            .sum();
        assert!((kl_gaussian_diag(&q, &p).unwrap() - per).abs() < 1e-12);
        assert!(kl_gaussian_diag(&q, &g(vec![0.0], vec![1.0])).is_err());
    }

    #[test]
    fn categorical_kl_values() {
        let q = StateBelief::new(vec![0.5f64, 0.5]).unwrap();
        let p = StateBelief::new(vec![0.25, 0.75]).unwrap();
        assert_eq!(kl_categorical(&q, &q), 0.0);
        let expect = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((kl_categorical(&q, &p) - expect).abs() < 1e-12);
        assert!((kl_categorical(&q, &p) - 0.14384).abs() < 1e-5);
        let one = StateBelief::new(vec![1.0, 0.0]).unwrap();
        assert!((kl_categorical(&one, &q) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn reparam_cases() {
        let gd = GaussianDiag::new(vec![1.0f64, -2.0], vec![0.7, 0.0]).unwrap();
        assert_eq!(reparam_sample(&gd, &[0.0, 0.0]).unwrap(), vec![1.0, -2.0]);
        let unit = GaussianDiag::new(vec![1.0f64, -2.0], vec![0.0, 0.0]).unwrap();
        assert_eq!(reparam_sample(&unit, &[0.5, -1.5]).unwrap(), vec![1.5, -3.5]);
        assert!(reparam_sample(&unit, &[0.5]).is_err());
    }

    #[test]
    fn bayes_rule_arithmetic() {
        let prior = StateBelief::uniform(2);
        let post = posterior_from_log_terms(&prior, &[0.2f64.ln(), 0.6f64.ln()]).unwrap();
        assert!((post.probs[0] - 0.25).abs() < 1e-12);
        assert!((post.probs[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn single_state_posterior_is_certain() {
        let cfg = ModelConfig::new(2, 1, 3, vec![1]);
        let theta = GenerativeParams::<f64>::init(&cfg, 5).unwrap();
        let post = state_posterior(&StateBelief::uniform(1), &[0.3, 0.1], &[vec![1.0, -1.0]], &theta).unwrap();
        assert_eq!(post.probs, vec![1.0]);
    }

    #[test]
    fn equal_likelihoods_return_transition_prior() {
        let cfg = ModelConfig::new(2, 3, 3, vec![1, 2]);
        let mut theta = GenerativeParams::<f64>::init(&cfg, 5).unwrap();
        // Copy state 0's temporal prior into the other states.
        let idx = theta.index();
        let block: Vec<usize> = (idx.var_coef(0, 0)..idx.var_coef(1, 0)).collect();
        for s in 1..3 {
            for (j, &i) in block.iter().enumerate() {
                theta.tensors[idx.var_coef(s, 0) + j] = theta.tensors[i].clone();
            }
        }
        let prev = StateBelief::new(vec![0.2, 0.5, 0.3]).unwrap();
        let lagged = vec![vec![0.4, -0.2], vec![1.0, 0.3]];
        let post = state_posterior(&prev, &[0.1, 0.2], &lagged, &theta).unwrap();
        let prior = theta.transition_prior(&prev).unwrap();
        for (a, b) in post.probs.iter().zip(&prior.probs) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn anneal_schedule() {
        assert!((anneal(0, 0.01, 100) - 0.01).abs() < 1e-15);
        assert!((anneal(50, 0.01, 100) - 0.505).abs() < 1e-12);
        assert_eq!(anneal(100, 0.01, 100), 1.0);
        assert_eq!(anneal(250, 0.01, 100), 1.0);
    }

    proptest! {
        #[test]
        fn gaussian_kl_nonnegative(
            mq in proptest::collection::vec(-3.0f64..3.0, 3),
            lq in proptest::collection::vec(-3.0f64..3.0, 3),
            mp in proptest::collection::vec(-3.0f64..3.0, 3),
            lp in proptest::collection::vec(-3.0f64..3.0, 3),
        ) {
            let q = GaussianDiag::new(mq, lq).unwrap();
            let p = GaussianDiag::new(mp, lp).unwrap();
            prop_assert!(kl_gaussian_diag(&q, &p).unwrap() >= -1e-9);
        }

        #[test]
        fn categorical_kl_nonnegative(a in proptest::collection::vec(0.0f64..1.0, 4), b in proptest::collection::vec(0.01f64..1.0, 4)) {
            let sa: f64 = a.iter().sum::<f64>().max(1e-9);
            let sb: f64 = b.iter().sum();
            let q = StateBelief { probs: a.iter().map(|x| x / sa).collect() };
            let p = StateBelief { probs: b.iter().map(|x| x / sb).collect() };
            prop_assert!(kl_categorical(&q, &p) >= -1e-9);
        }

        #[test]
        fn posterior_on_simplex(prior in proptest::collection::vec(0.01f64..1.0, 3), ll in proptest::collection::vec(-500.0f64..50.0, 3)) {
            let s: f64 = prior.iter().sum();
            let prior = StateBelief { probs: prior.iter().map(|x| x / s).collect() };
            let post = posterior_from_log_terms(&prior, &ll).unwrap();
            prop_assert!((post.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(post.probs.iter().all(|&p| p >= 0.0));
        }
    }
}
