//! Test oracles written without the tape: plain loops over the raw tensors.
#![allow(dead_code)]

use dsarf::generative::{Activation, ModelConfig};
use dsarf::inference::{ElboNoise, InitStrategy, Model};
use dsarf::numerics::{normal_vec, rng_from_seed, uniform_vec, Tensor};
use dsarf::Dataset;
use nalgebra::{DMatrix, DVector};

fn act(a: Activation, x: f64) -> f64 {
    match a {
        Activation::Tanh => x.tanh(),
        Activation::Relu => x.max(0.0),
    }
}

/// `x·W + b` for a row vector `x` and input-major `W`.
fn affine(x: &[f64], w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    (0..w.cols())
        .map(|j| b.data()[j] + x.iter().enumerate().map(|(i, xi)| xi * w.get(i, j)).sum::<f64>())
        .collect()
}

fn log_softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    v.iter().map(|x| x - lse).collect()
}

/// `Σ KL(N(mq, e^lq) ‖ N(mp, e^lp))` over the entries.
pub fn kl_diag(mq: &[f64], lq: &[f64], mp: &[f64], lp: &[f64]) -> f64 {
    (0..mq.len())
        .map(|i| 0.5 * (lp[i] - lq[i] + (lq[i].exp() + (mq[i] - mp[i]).powi(2)) / lp[i].exp() - 1.0))
        .sum()
}

/// Mean and log-variance of `p(w_t | lags, s)`; `lags[i]` pairs with the
/// i-th configured lag.
pub fn temporal_prior(model: &Model<f64>, s: usize, lags: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let cfg = model.config();
    let th = &model.generative;
    let idx = cfg.param_index();
    let k = cfg.factors;
    let mut lin = th.tensor(idx.var_bias(s)).data().to_vec();
    let mut hidden = vec![0.0; cfg.hidden];
    for (l, w) in lags.iter().enumerate() {
        let a = th.tensor(idx.var_coef(s, l));
        for j in 0..k {
            lin[j] += (0..k).map(|i| w[i] * a.get(i, j)).sum::<f64>();
        }
        let h = affine(w, th.tensor(idx.lag_weight(s, l)), th.tensor(idx.lag_bias(s, l)));
        for (acc, v) in hidden.iter_mut().zip(h) {
            *acc += act(cfg.activation, v);
        }
    }
    let mlp = affine(&hidden, th.tensor(idx.mean_weight(s)), th.tensor(idx.mean_bias(s)));
    let log_var = affine(&hidden, th.tensor(idx.logvar_weight(s)), th.tensor(idx.logvar_bias(s)));
    let joined: Vec<f64> = lags.concat();
    let gh: Vec<f64> = affine(&joined, th.tensor(idx.gate_hidden_weight(s)), th.tensor(idx.gate_hidden_bias(s)))
        .into_iter()
        .map(|v| act(cfg.activation, v))
        .collect();
    let gate: Vec<f64> = affine(&gh, th.tensor(idx.gate_out_weight(s)), th.tensor(idx.gate_out_bias(s)))
        .into_iter()
        .map(|v| 1.0 / (1.0 + (-v).exp()))
        .collect();
    let mean = (0..k).map(|j| (1.0 - gate[j]) * lin[j] + gate[j] * mlp[j]).collect();
    (mean, log_var)
}

/// The annealed ELBO of the whole corpus as one straight-line computation.
/// Returns `(reconstruction, initial, state, weight, factor, total)`.
pub fn elbo_oracle(data: &Dataset<f64>, model: &Model<f64>, beta: f64, noise: &ElboNoise<f64>) -> [f64; 6] {
    let cfg = model.config();
    let (k, d, s_count) = (cfg.factors, cfg.dim, cfg.states);
    let th = &model.generative;
    let phi = &model.variational;
    let idx = cfg.param_index();
    let lag_max = cfg.max_lag();

    // Spatial factors.
    let z: Vec<f64> = (0..cfg.latent_dim)
        .map(|i| phi.z_mean.data()[i] + (0.5 * phi.z_log_var.data()[i]).exp() * noise.z.data()[i])
        .collect();
    let h: Vec<f64> = affine(&z, th.tensor(idx.decoder_hidden_weight()), th.tensor(idx.decoder_hidden_bias()))
        .into_iter()
        .map(|v| act(cfg.activation, v))
        .collect();
    let dec_mean = affine(&h, th.tensor(idx.decoder_mean_weight()), th.tensor(idx.decoder_mean_bias()));
    let dec_lv = affine(&h, th.tensor(idx.decoder_logvar_weight()), th.tensor(idx.decoder_logvar_bias()));
    let kl_f = kl_diag(phi.f_mean.data(), phi.f_log_var.data(), &dec_mean, &dec_lv);
    let zl = phi.z_log_var.data();
    let kl_z: f64 = (0..z.len())
        .map(|i| 0.5 * (zl[i].exp() + phi.z_mean.data()[i].powi(2) - zl[i] - 1.0))
        .sum();
    let factor = -(kl_f + kl_z);
    let f: Vec<f64> = (0..k * d)
        .map(|i| phi.f_mean.data()[i] + (0.5 * phi.f_log_var.data()[i]).exp() * noise.factors.data()[i])
        .collect();

    let sigma2 = cfg.obs_noise * cfg.obs_noise;
    let (mut recon, mut initial, mut state, mut weight) = (0.0, 0.0, 0.0, 0.0);
    let log_p0 = log_softmax(th.tensor(idx.initial_logits()).data());
    let phi_mat = th.tensor(idx.transition());
    for n in 0..data.sequences() {
        let post = &phi.sequences[n];
        let (x, mask) = data.sequence(n);
        let eps = &noise.weights[n];
        let rows = post.w_mean.rows();
        let w: Vec<Vec<f64>> = (0..rows)
            .map(|r| {
                (0..k)
                    .map(|j| post.w_mean.get(r, j) + (0.5 * post.w_log_var.get(r, j)).exp() * eps.get(r, j))
                    .collect()
            })
            .collect();
        // Pre-sample rows against N(0, I).
        for r in 0..lag_max {
            for j in 0..k {
                let (m, l) = (post.w_mean.get(r, j), post.w_log_var.get(r, j));
                initial -= 0.5 * (l.exp() + m * m - l - 1.0);
            }
        }
        let log_q0 = log_softmax(post.s0_logits.data());
        let mut pi: Vec<f64> = log_q0.iter().map(|l| l.exp()).collect();
        initial -= (0..s_count).map(|s| pi[s] * (log_q0[s] - log_p0[s])).sum::<f64>();
        for t in 0..data.steps() {
            let row = lag_max + t;
            for c in 0..d {
                if mask[t * d + c] {
                    let pred: f64 = (0..k).map(|j| w[row][j] * f[j * d + c]).sum();
                    recon += -0.5 * (2.0 * std::f64::consts::PI * sigma2).ln() - 0.5 * (x[t * d + c] - pred).powi(2) / sigma2;
                }
            }
            let lags: Vec<Vec<f64>> = cfg.lags.iter().map(|&l| w[row - l].clone()).collect();
            let q_mean = post.w_mean.row_slice(row);
            let q_lv = post.w_log_var.row_slice(row);
            let mut kl = vec![0.0; s_count];
            let mut ll = vec![0.0; s_count];
            for s in 0..s_count {
                let (mean, lv) = temporal_prior(model, s, &lags);
                kl[s] = kl_diag(q_mean, q_lv, &mean, &lv);
                ll[s] = (0..k)
                    .map(|j| -0.5 * (lv[j] + (2.0 * std::f64::consts::PI).ln() + (w[row][j] - mean[j]).powi(2) / lv[j].exp()))
                    .sum();
            }
            let logits: Vec<f64> = (0..s_count).map(|s| (0..s_count).map(|j| pi[j] * phi_mat.get(j, s)).sum()).collect();
            let log_prior = log_softmax(&logits);
            let log_pi = log_softmax(&(0..s_count).map(|s| log_prior[s] + ll[s]).collect::<Vec<_>>());
            pi = log_pi.iter().map(|l| l.exp()).collect();
            for s in 0..s_count {
                state -= pi[s] * (log_pi[s] - log_prior[s]);
                weight -= pi[s] * kl[s];
            }
        }
    }
    let total = recon + beta * (initial + state + weight + factor);
    [recon, initial, state, weight, factor, total]
}

/// A small random model over a small random partially observed corpus.
/// Every tensor is redrawn so no gate or head sits at its initial zero.
pub fn random_instance(seed: u64) -> (Dataset<f64>, Model<f64>, f64, ElboNoise<f64>) {
    let mut rng = rng_from_seed(seed);
    let mut pick = |lo: usize, hi: usize| lo + (uniform_vec::<f64>(&mut rng, 1, 0.0, 1.0)[0] * (hi - lo + 1) as f64) as usize;
    let n = pick(1, 2);
    let t = pick(2, 5);
    let d = pick(1, 3);
    let k = pick(1, 3);
    let s = pick(1, 3);
    let lags = match pick(0, 3) {
        0 => vec![1],
        1 => vec![2],
        2 => vec![1, 2],
        _ => vec![1, 3],
    };
    let mut cfg = ModelConfig::new(k, s, d, lags);
    cfg.hidden = pick(2, 4);
    cfg.latent_dim = pick(1, 2);
    cfg.obs_noise = 0.3 + pick(0, 5) as f64 * 0.1;
    if pick(0, 3) == 0 {
        cfg.activation = Activation::Relu;
    }
    let mut rng = rng_from_seed(seed ^ 0x9e37);
    let values: Vec<f64> = normal_vec(&mut rng, n * t * d);
    let mask: Vec<bool> = uniform_vec::<f64>(&mut rng, n * t * d, 0.0, 1.0).iter().map(|u| *u > 0.25).collect();
    let data = Dataset::new(n, t, d, values, mask).unwrap();
    let mut model = Model::init(&cfg, &data, InitStrategy::Random, seed).unwrap();
    for tensor in model.tensors_mut() {
        let draw: Vec<f64> = normal_vec(&mut rng, tensor.len());
        for (v, e) in tensor.data_mut().iter_mut().zip(draw) {
            *v = 0.6 * e;
        }
    }
    let beta = uniform_vec::<f64>(&mut rng, 1, 0.01, 1.0)[0];
    let noise = ElboNoise::draw(&cfg, n, t, seed.wrapping_add(17));
    (data, model, beta, noise)
}

/// Largest relative error between the tape gradient of the annealed ELBO
/// and central differences with step `h`, over every coordinate of every
/// model tensor. Coordinates are compared as `|a − f| / max(|a|, |f|, floor)`.
pub fn max_gradient_error(data: &Dataset<f64>, model: &Model<f64>, beta: f64, noise: &ElboNoise<f64>, h: f64, floor: f64) -> f64 {
    let all: Vec<usize> = (0..data.sequences()).collect();
    let (_, grads) = dsarf::inference::elbo_gradients(data, &all, model, beta, noise).unwrap();
    let total = |m: &Model<f64>| dsarf::inference::elbo_with_noise(data, &all, m, beta, noise).unwrap().total;
    let mut worst = 0.0f64;
    let mut probe = model.clone();
    for (ti, grad) in grads.iter().enumerate() {
        for ci in 0..grad.len() {
            let orig = probe.tensors()[ti].data()[ci];
            probe.tensors_mut()[ti].data_mut()[ci] = orig + h;
            let up = total(&probe);
            probe.tensors_mut()[ti].data_mut()[ci] = orig - h;
            let down = total(&probe);
            probe.tensors_mut()[ti].data_mut()[ci] = orig;
            let fd = (up - down) / (2.0 * h);
            let a = grad.data()[ci];
            worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(floor));
        }
    }
    worst
}

/// N=1, T=4, D=3, K=2, S=2, lags {1}, every tensor drawn from seed 7.
pub fn tiny_instance() -> (Dataset<f64>, Model<f64>, ElboNoise<f64>) {
    let cfg = ModelConfig::new(2, 2, 3, vec![1]);
    let mut rng = rng_from_seed(7);
    let data = Dataset::dense(1, 4, 3, normal_vec(&mut rng, 12)).unwrap();
    let mut model = Model::init(&cfg, &data, InitStrategy::Random, 7).unwrap();
    for t in model.tensors_mut() {
        let draw: Vec<f64> = normal_vec(&mut rng, t.len());
        for (v, e) in t.data_mut().iter_mut().zip(draw) {
            *v = 0.5 * e;
        }
    }
    let noise = ElboNoise::draw(&cfg, 1, 4, 11);
    (data, model, noise)
}

/// Posterior mean and marginal variances by direct matrix algebra.
pub fn gaussian_posterior(mean: &[f64], var: &[f64], f: &[f64], x: &[f64], mask: &[bool], sigma0: f64) -> (Vec<f64>, Vec<f64>) {
    let k = mean.len();
    let d = x.len();
    let obs: Vec<usize> = (0..d).filter(|&j| mask[j]).collect();
    let fo = DMatrix::from_fn(k, obs.len(), |i, c| f[i * d + obs[c]]);
    let xo = DVector::from_iterator(obs.len(), obs.iter().map(|&j| x[j]));
    let prior_prec = DMatrix::from_diagonal(&DVector::from_iterator(k, var.iter().map(|v| 1.0 / v)));
    let prec = prior_prec + &fo * fo.transpose() / (sigma0 * sigma0);
    let cov = prec.try_inverse().unwrap();
    let rhs = DVector::from_iterator(k, mean.iter().zip(var).map(|(m, v)| m / v)) + &fo * xo / (sigma0 * sigma0);
    let mu = &cov * rhs;
    (mu.iter().copied().collect(), (0..k).map(|i| cov[(i, i)]).collect())
}

