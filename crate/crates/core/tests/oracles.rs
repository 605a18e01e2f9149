mod common;

use common::{elbo_oracle, gaussian_posterior, random_instance, tiny_instance};
use dsarf::forecast::conjugate_weight_update;
use dsarf::inference::{elbo, elbo_with_noise, kl_categorical, kl_gaussian_diag, ElboNoise};
use dsarf::numerics::{normal_vec, rng_from_seed, Tensor};
use dsarf::{GaussianDiag, StateBelief};
use proptest::prelude::*;

fn terms(b: &dsarf::inference::ElboBreakdown<f64>) -> [f64; 6] {
    [b.reconstruction, b.initial, b.state, b.weight, b.factor, b.total]
}

#[test]
fn tiny_instance_matches_straight_line_oracle() {
    let (data, model, noise) = tiny_instance();
    for beta in [0.01, 0.37, 1.0] {
        let got = terms(&elbo_with_noise(&data, &[0], &model, beta, &noise).unwrap());
        let want = elbo_oracle(&data, &model, beta, &noise);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-10, "beta {beta}: {got:?} vs {want:?}");
        }
    }
}

#[test]
fn random_instances_match_oracle() {
    for seed in 0..50 {
        let (data, model, beta, noise) = random_instance(seed);
        let all: Vec<usize> = (0..data.sequences()).collect();
        let got = terms(&elbo_with_noise(&data, &all, &model, beta, &noise).unwrap());
        let want = elbo_oracle(&data, &model, beta, &noise);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-10 * w.abs().max(1.0), "seed {seed}: {got:?} vs {want:?}");
        }
    }
}

#[test]
fn seeded_elbo_uses_seeded_noise() {
    let (data, model, _) = tiny_instance();
    let noise = ElboNoise::draw(model.config(), 1, 4, 99);
    assert_eq!(elbo(&data, &[0], &model, 0.5, 99).unwrap(), elbo_with_noise(&data, &[0], &model, 0.5, &noise).unwrap());
}

#[test]
fn zero_beta_leaves_reconstruction() {
    let (data, model, noise) = tiny_instance();
    let b = elbo_with_noise(&data, &[0], &model, 0.0, &noise).unwrap();
    assert_eq!(b.total, b.reconstruction);
}

#[test]
fn kl_hand_values() {
    let q = GaussianDiag::from_variance(vec![1.0f64], &[1.0]).unwrap();
    let p = GaussianDiag::standard(1);
    assert!((kl_gaussian_diag(&q, &p).unwrap() - 0.5).abs() < 1e-6);
    let q = StateBelief::new(vec![0.5f64, 0.5]).unwrap();
    let p = StateBelief::new(vec![0.25, 0.75]).unwrap();
    let closed_form = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
    assert!((kl_categorical(&q, &p) - closed_form).abs() < 1e-6);
    assert!((kl_categorical(&q, &p) - 0.14384).abs() < 2e-6);
}

#[test]
fn conjugate_flat_prior_recovers_observation() {
    let prior = GaussianDiag::from_variance(vec![0.0f64, 0.0], &[1e6, 1e6]).unwrap();
    let f = Tensor::identity(2);
    let post = conjugate_weight_update(&prior, &f, &[3.0, -1.0], &[true, true], 0.1).unwrap();
    assert!((post.mean[0] - 3.0).abs() < 1e-6 && (post.mean[1] + 1.0).abs() < 1e-6);
    let (mu, _) = gaussian_posterior(&[0.0, 0.0], &[1e6, 1e6], f.data(), &[3.0, -1.0], &[true, true], 0.1);
    assert!((post.mean[0] - mu[0]).abs() < 1e-8 && (post.mean[1] - mu[1]).abs() < 1e-8);
}

#[test]
fn conjugate_limits() {
    let prior = GaussianDiag::from_variance(vec![0.4f64, -1.2], &[0.3, 2.0]).unwrap();
    let f = Tensor::matrix(2, 3, vec![1.0, 0.5, -0.3, 0.2, -1.0, 0.8]).unwrap();
    let x = [1.0, 2.0, -0.5];
    let weak = conjugate_weight_update(&prior, &f, &x, &[true; 3], 1e6).unwrap();
    let dev = weak.mean.iter().zip(&prior.mean).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(dev < 1e-6);
    assert_eq!(conjugate_weight_update(&prior, &f, &x, &[false; 3], 0.1).unwrap(), prior);
}

proptest! {
    #[test]
    fn conjugate_matches_matrix_algebra(
        k in 1usize..4,
        d in 1usize..6,
        seed in 0u64..10_000,
        sigma0 in 0.05f64..2.0,
    ) {
        let mut rng = rng_from_seed(seed);
        let mean: Vec<f64> = normal_vec(&mut rng, k);
        let var: Vec<f64> = normal_vec::<f64>(&mut rng, k).iter().map(|v| 0.1 + v * v).collect();
        let f: Vec<f64> = normal_vec(&mut rng, k * d);
        let x: Vec<f64> = normal_vec(&mut rng, d);
        let mask: Vec<bool> = normal_vec::<f64>(&mut rng, d).iter().map(|v| *v > -0.5).collect();
        let prior = GaussianDiag::from_variance(mean.clone(), &var).unwrap();
        let post = conjugate_weight_update(&prior, &Tensor::matrix(k, d, f.clone()).unwrap(), &x, &mask, sigma0).unwrap();
        let (mu, v) = gaussian_posterior(&mean, &var, &f, &x, &mask, sigma0);
        for i in 0..k {
            prop_assert!((post.mean[i] - mu[i]).abs() < 1e-8);
            prop_assert!((post.variance()[i] - v[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn batch_partition_sums_to_corpus(seed in 0u64..500) {
        let (data, model, beta, noise) = random_instance(seed);
        prop_assume!(data.sequences() == 2);
        let all = elbo_with_noise(&data, &[0, 1], &model, beta, &noise).unwrap();
        let part = |n: usize| {
            let sub = ElboNoise { z: noise.z.clone(), factors: noise.factors.clone(), weights: vec![noise.weights[n].clone()] };
            elbo_with_noise(&data, &[n], &model, beta, &sub).unwrap()
        };
        let (a, b) = (part(0), part(1));
        prop_assert!((a.total + b.total - all.total).abs() < 1e-9 * all.total.abs().max(1.0));
    }

    #[test]
    fn kl_terms_never_raise_the_bound(seed in 0u64..500) {
        let (data, model, beta, noise) = random_instance(seed);
        let all: Vec<usize> = (0..data.sequences()).collect();
        let b = elbo_with_noise(&data, &all, &model, beta, &noise).unwrap();
        // Every KL is nonnegative, so each signed term is at most zero.
        prop_assert!(b.initial <= 1e-12 && b.state <= 1e-12 && b.weight <= 1e-12 && b.factor <= 1e-12);
    }
}
