mod common;

use dsarf::generative::{observation_loglik, Activation, ModelConfig};
use dsarf::numerics::{normal_vec, rng_from_seed, Tensor};
use dsarf::{GenerativeParams, StateBelief};
use proptest::prelude::*;

fn randomized(cfg: &ModelConfig, seed: u64) -> GenerativeParams<f64> {
    let mut theta = GenerativeParams::<f64>::init(cfg, seed).unwrap();
    let mut rng = rng_from_seed(seed + 1);
    for t in &mut theta.tensors {
        let draw: Vec<f64> = normal_vec(&mut rng, t.len());
        t.data_mut().copy_from_slice(&draw);
    }
    theta
}

fn set(theta: &mut GenerativeParams<f64>, i: usize, value: f64) {
    theta.tensor_mut(i).data_mut().fill(value);
}

#[test]
fn transition_examples() {
    let cfg = ModelConfig::new(2, 2, 3, vec![1]);
    let mut theta = GenerativeParams::<f64>::init(&cfg, 1).unwrap();
    let t = theta.index().transition();
    *theta.tensor_mut(t) = Tensor::matrix(2, 2, vec![40.0, -40.0, -40.0, 40.0]).unwrap();
    let out = theta.transition_prior(&StateBelief::new(vec![1.0, 0.0]).unwrap()).unwrap();
    assert!(out.probs[0] > 1.0 - 1e-12);
    // Logits (0, ln 3) from the first row.
    *theta.tensor_mut(t) = Tensor::matrix(2, 2, vec![0.0, 3f64.ln(), 5.0, 5.0]).unwrap();
    let out = theta.transition_prior(&StateBelief::new(vec![1.0, 0.0]).unwrap()).unwrap();
    assert!((out.probs[0] - 0.25).abs() < 1e-12 && (out.probs[1] - 0.75).abs() < 1e-12);
    // Equal columns give a uniform output.
    *theta.tensor_mut(t) = Tensor::matrix(2, 2, vec![0.3, 0.3, -1.0, -1.0]).unwrap();
    let out = theta.transition_prior(&StateBelief::uniform(2)).unwrap();
    assert!((out.probs[0] - 0.5).abs() < 1e-15);
}

#[test]
fn closed_gate_is_the_var_path() {
    let cfg = ModelConfig::new(3, 2, 4, vec![1]);
    let mut theta = randomized(&cfg, 3);
    let idx = theta.index();
    set(&mut theta, idx.gate_out_weight(1), 0.0);
    set(&mut theta, idx.gate_out_bias(1), -1e3);
    *theta.tensor_mut(idx.var_coef(1, 0)) = Tensor::identity(3);
    set(&mut theta, idx.var_bias(1), 0.0);
    let w = vec![0.3, -1.2, 2.5];
    assert_eq!(theta.temporal_prior(&[w.clone()], 1).unwrap().mean, w);
}

#[test]
fn open_gate_is_the_mlp_path() {
    let cfg = ModelConfig::new(2, 1, 4, vec![1, 2]);
    let mut theta = randomized(&cfg, 4);
    let idx = theta.index();
    set(&mut theta, idx.gate_out_weight(0), 0.0);
    set(&mut theta, idx.gate_out_bias(0), 1e3);
    let model_free = {
        let mut m = theta.clone();
        for l in 0..2 {
            set(&mut m, idx.var_coef(0, l), 0.0);
        }
        set(&mut m, idx.var_bias(0), 0.0);
        m
    };
    let lags = vec![vec![0.4, -0.1], vec![1.5, 0.2]];
    let a = theta.temporal_prior(&lags, 0).unwrap();
    let b = model_free.temporal_prior(&lags, 0).unwrap();
    assert_eq!(a.mean, b.mean);
}

#[test]
fn half_gate_averages_the_paths() {
    let cfg = ModelConfig::new(2, 1, 4, vec![1, 3]);
    let mut theta = randomized(&cfg, 5);
    let idx = theta.index();
    set(&mut theta, idx.gate_out_weight(0), 0.0);
    set(&mut theta, idx.gate_out_bias(0), 0.0);
    let lags = vec![vec![0.7, -0.4], vec![-1.1, 0.9]];
    let mixed = theta.temporal_prior(&lags, 0).unwrap();
    let mut var_only = theta.clone();
    set(&mut var_only, idx.gate_out_bias(0), -1e3);
    let mut mlp_only = theta.clone();
    set(&mut mlp_only, idx.gate_out_bias(0), 1e3);
    let (v, m) = (var_only.temporal_prior(&lags, 0).unwrap(), mlp_only.temporal_prior(&lags, 0).unwrap());
    for k in 0..2 {
        assert!((mixed.mean[k] - 0.5 * (v.mean[k] + m.mean[k])).abs() < 1e-12);
    }
}

#[test]
fn temporal_prior_matches_loop_oracle() {
    for seed in 0..20 {
        let (_, model, _, _) = common::random_instance(seed);
        let cfg = model.config().clone();
        let mut rng = rng_from_seed(seed);
        let lags: Vec<Vec<f64>> = cfg.lags.iter().map(|_| normal_vec(&mut rng, cfg.factors)).collect();
        for s in 0..cfg.states {
            let got = model.generative.temporal_prior(&lags, s).unwrap();
            let (mean, lv) = common::temporal_prior(&model, s, &lags);
            for k in 0..cfg.factors {
                assert!((got.mean[k] - mean[k]).abs() < 1e-12 && (got.log_var[k] - lv[k]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn decoder_examples() {
    let cfg = ModelConfig::new(2, 1, 3, vec![1]);
    let mut theta = randomized(&cfg, 6);
    let idx = theta.index();
    let z1 = theta.spatial_decoder(&[0.3, -0.8]).unwrap();
    let z2 = theta.spatial_decoder(&[-1.0, 0.5]).unwrap();
    assert_ne!(z1.mean, z2.mean);
    assert_eq!(z1.len(), 6);
    set(&mut theta, idx.decoder_mean_weight(), 0.0);
    set(&mut theta, idx.decoder_mean_bias(), 0.25);
    assert!(theta.spatial_decoder(&[0.3, -0.8]).unwrap().mean.iter().all(|&m| m == 0.25));
}

#[test]
fn decoder_snapshot() {
    let cfg = ModelConfig::new(2, 1, 3, vec![1]);
    let theta = randomized(&cfg, 6);
    let z = [0.3, -0.8];
    let out = theta.spatial_decoder(&z).unwrap();
    let golden = [
        1.323237717485712,
        -2.1022860927894964,
        2.3764837381380364,
        0.2348401937904831,
        -2.479459086470402,
        1.512157493876572,
    ];
    let idx = theta.index();
    let (wh, bh) = (theta.tensor(idx.decoder_hidden_weight()), theta.tensor(idx.decoder_hidden_bias()));
    let (wm, bm) = (theta.tensor(idx.decoder_mean_weight()), theta.tensor(idx.decoder_mean_bias()));
    let h: Vec<f64> = (0..cfg.hidden)
        .map(|j| (bh.data()[j] + z[0] * wh.get(0, j) + z[1] * wh.get(1, j)).tanh())
        .collect();
    for (i, (a, b)) in out.mean.iter().zip(golden).enumerate() {
        let direct = bm.data()[i] + h.iter().enumerate().map(|(j, hj)| hj * wm.get(j, i)).sum::<f64>();
        assert!((a - b).abs() < 1e-12 && (a - direct).abs() < 1e-12, "{:?}", out.mean);
    }
}

#[test]
fn loglik_examples() {
    let w = Tensor::matrix(3, 2, vec![1.0, 0.5, -0.3, 2.0, 0.0, 1.0]).unwrap();
    let f = Tensor::matrix(2, 2, vec![0.2, -1.0, 0.7, 0.4]).unwrap();
    let x = w.matmul(&f).unwrap().into_data();
    let sigma = 0.3f64;
    let ll = observation_loglik(&x, &[true; 6], &w, &f, sigma).unwrap();
    let want = 6.0 * -0.5 * (2.0 * std::f64::consts::PI * sigma * sigma).ln();
    assert!((ll - want).abs() < 1e-12);
    assert_eq!(observation_loglik(&x, &[false; 6], &w, &f, sigma).unwrap(), 0.0);
    let mask = [true, false, true, true, false, true];
    let mut y = x.clone();
    y[1] = 1e9;
    y[4] = f64::NAN;
    assert_eq!(
        observation_loglik(&x, &mask, &w, &f, sigma).unwrap().to_bits(),
        observation_loglik(&y, &mask, &w, &f, sigma).unwrap().to_bits()
    );
}

proptest! {
    #[test]
    fn transition_output_on_simplex(seed in 0u64..1000, a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let cfg = ModelConfig::new(2, 3, 2, vec![1]);
        let theta = randomized(&cfg, seed);
        let s = a + b + 0.1;
        let prev = StateBelief::new(vec![a / s, b / s, 0.1 / s]).unwrap();
        let out = theta.transition_prior(&prev).unwrap();
        prop_assert!((out.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(out.probs.iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn prior_variance_positive_and_gate_bounded(seed in 0u64..1000, w in proptest::collection::vec(-20.0f64..20.0, 4), relu in any::<bool>()) {
        let mut cfg = ModelConfig::new(2, 2, 3, vec![1, 2]);
        if relu {
            cfg.activation = Activation::Relu;
        }
        let theta = randomized(&cfg, seed);
        let lags = vec![w[..2].to_vec(), w[2..].to_vec()];
        for s in 0..2 {
            let p = theta.temporal_prior(&lags, s).unwrap();
            prop_assert!(p.variance().iter().all(|&v| v > 0.0));
            prop_assert!(theta.gate(&lags, s).unwrap().iter().all(|&g| (0.0..=1.0).contains(&g)));
        }
    }
}
