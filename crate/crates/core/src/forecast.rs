//! One-step rolling and free-running prediction, and the evaluation
//! metrics.
//!
//! NRMSE is reported as `100 · ‖(x̂ − x) ⊙ m‖_F / ‖x ⊙ m‖_F` over the
//! observed entries `m`.

use crate::error::{Error, Result};
use crate::generative::{GaussianDiag, StateBelief};
use crate::inference::{state_posterior, Model, SequencePosterior};
use crate::numerics::{derive_seed, linalg, normal, rng_from_seed, AdamState, Tape, Tensor};
use crate::real::Real;

/// Exact posterior of `w` under the prior `N(m, diag(v))` after observing
/// `x_o ∼ N(F_oᵀ w, σ0² I)` on the unmasked columns of `factors` (`K × D`).
///
/// Returns the posterior marginals (diagonal of the full covariance).
pub fn conjugate_weight_update<R: Real>(
    prior: &GaussianDiag<R>,
    factors: &Tensor<R>,
    x: &[R],
    mask: &[bool],
    sigma0: R,
) -> Result<GaussianDiag<R>> {
    if mask.len() == x.len() && mask.iter().all(|m| !m) && factors.shape() == [prior.len(), x.len()] {
        return Ok(prior.clone());
    }
    let (mean, cov) = conjugate_full(prior, factors, x, mask, sigma0)?;
    let k = prior.len();
    let var: Vec<R> = (0..k).map(|i| cov[i * k + i]).collect();
    GaussianDiag::from_variance(mean, &var)
}

/// Posterior mean and full `K × K` covariance (row-major).
fn conjugate_full<R: Real>(
    prior: &GaussianDiag<R>,
    factors: &Tensor<R>,
    x: &[R],
    mask: &[bool],
    sigma0: R,
) -> Result<(Vec<R>, Vec<R>)> {
    let k = prior.len();
    let d = x.len();
    if factors.rows() != k || factors.cols() != d || mask.len() != d {
        return Err(Error::ShapeMismatch {
            op: "conjugate_weight_update",
            left: vec![k, d, mask.len()],
            right: factors.shape().to_vec(),
        });
    }
    let prior_var = prior.variance();
    if mask.iter().all(|m| !m) {
        let mut cov = vec![R::zero(); k * k];
        for i in 0..k {
            cov[i * k + i] = prior_var[i];
        }
        return Ok((prior.mean.clone(), cov));
    }
    let noise_prec = R::one() / (sigma0 * sigma0);
    let mut prec = vec![R::zero(); k * k];
    let mut rhs = vec![R::zero(); k];
    for i in 0..k {
        prec[i * k + i] = R::one() / prior_var[i];
        rhs[i] = prior.mean[i] / prior_var[i];
    }
    for j in (0..d).filter(|&j| mask[j]) {
        for a in 0..k {
            let fa = factors.get(a, j);
            rhs[a] += fa * x[j] * noise_prec;
            for b in 0..k {
                prec[a * k + b] += fa * factors.get(b, j) * noise_prec;
            }
        }
    }
    let l = linalg::cholesky(&prec, k).map_err(|_| Error::Singular("weight posterior precision".into()))?;
    Ok((linalg::cholesky_solve(&l, k, &rhs), linalg::cholesky_inverse(&l, k)))
}

/// `log N(x_o | F_oᵀ m, F_oᵀ diag(v) F_o + σ0² I)`: evidence of one
/// observation row under a weight prior.
fn log_evidence<R: Real>(prior: &GaussianDiag<R>, factors: &Tensor<R>, x: &[R], mask: &[bool], sigma0: R) -> Result<R> {
    let obs: Vec<usize> = (0..x.len()).filter(|&j| mask[j]).collect();
    let n = obs.len();
    if n == 0 {
        return Ok(R::zero());
    }
    let k = prior.len();
    let var = prior.variance();
    let mut cov = vec![R::zero(); n * n];
    let mut resid = vec![R::zero(); n];
    for (a, &ja) in obs.iter().enumerate() {
        let pred: R = (0..k).map(|i| factors.get(i, ja) * prior.mean[i]).sum();
        resid[a] = x[ja] - pred;
        for (b, &jb) in obs.iter().enumerate() {
            cov[a * n + b] = (0..k).map(|i| factors.get(i, ja) * var[i] * factors.get(i, jb)).sum();
        }
        cov[a * n + a] += sigma0 * sigma0;
    }
    let l = linalg::cholesky(&cov, n)?;
    let sol = linalg::cholesky_solve(&l, n, &resid);
    let quad: R = resid.iter().zip(&sol).map(|(a, b)| *a * *b).sum();
    let ln2pi = (R::lit(2.0) * R::PI()).ln();
    Ok(R::lit(-0.5) * (quad + linalg::cholesky_log_det(&l, n) + R::lit(n as f64) * ln2pi))
}

/// Filtering state carried between prediction steps: the last `max_lag`
/// weight posteriors (oldest first) and the current state belief.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastState<R> {
    pub window: Vec<GaussianDiag<R>>,
    pub belief: StateBelief<R>,
}

impl<R: Real> ForecastState<R> {
    /// Continues the end of a fitted sequence posterior.
    pub fn from_posterior(model: &Model<R>, posterior: &SequencePosterior<R>) -> Result<Self> {
        let lag = model.config().max_lag();
        let rows = posterior.w_mean.rows();
        let path = model.state_path(posterior)?;
        let belief = match path.last() {
            Some(b) => b.clone(),
            None => StateBelief::from_logits(posterior.s0_logits.data()),
        };
        Ok(Self {
            window: (rows - lag..rows).map(|r| posterior.weight_at(r)).collect(),
            belief,
        })
    }

    /// Builds a history from the first `max_lag` rows of a new sequence by
    /// conjugate updates under a wide zero-mean prior; the belief starts at
    /// the learned initial-state distribution.
    pub fn warm_up(model: &Model<R>, values: &[R], mask: &[bool]) -> Result<Self> {
        let cfg = model.config();
        let (k, d, lag) = (cfg.factors, cfg.dim, cfg.max_lag());
        if values.len() < lag * d || mask.len() != values.len() {
            return Err(Error::InvalidArgument(format!(
                "warm-up needs at least {lag} observed rows of width {d}"
            )));
        }
        let wide = GaussianDiag::from_variance(vec![R::zero(); k], &vec![R::lit(1e4); k])?;
        let sigma0 = R::lit(cfg.obs_noise);
        let window = (0..lag)
            .map(|t| {
                let r = t * d..(t + 1) * d;
                conjugate_weight_update(&wide, &model.variational.f_mean, &values[r.clone()], &mask[r], sigma0)
            })
            .collect::<Result<_>>()?;
        let init = model.generative.tensor(model.generative.index().initial_logits());
        Ok(Self {
            window,
            belief: StateBelief::from_logits(init.data()),
        })
    }

    fn lag_means(&self, lags: &[usize]) -> Vec<Vec<R>> {
        let n = self.window.len();
        lags.iter().map(|&l| self.window[n - l].mean.clone()).collect()
    }

    fn push(&mut self, w: GaussianDiag<R>) {
        self.window.remove(0);
        self.window.push(w);
    }
}

/// How each observation is absorbed before the next prediction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Assimilation {
    /// Exact per-state conjugate update mixed by the state posterior.
    Conjugate,
    /// Conjugate update refined by `iterations` Adam steps on the
    /// single-step bound.
    Gradient { iterations: usize, learning_rate: f64 },
    /// Ignore observations (free-running mean propagation).
    None,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForecastResult<R> {
    /// `H × D` point predictions.
    pub predicted: Tensor<R>,
    /// `H × D` predictive standard deviations.
    pub std: Tensor<R>,
    /// State belief at each step: filtered after absorbing the observation
    /// in rolling prediction, predictive in free-running prediction.
    pub states: Vec<StateBelief<R>>,
    pub nrmse: Option<f64>,
}

impl<R: Real> ForecastResult<R> {
    pub fn state_labels(&self) -> Vec<usize> {
        self.states.iter().map(StateBelief::argmax).collect()
    }
}

struct StepPrediction<R> {
    belief: StateBelief<R>,
    priors: Vec<GaussianDiag<R>>,
    mean: Vec<R>,
    /// `K × K` mixture covariance.
    cov: Vec<R>,
}

/// Per-state temporal priors at the lag means, with the lag uncertainty
/// pushed through a central-difference linearization: each lag coordinate
/// is perturbed by `± std` and half the output difference squared is added
/// to the prior variance.
fn propagated_priors<R: Real>(model: &Model<R>, state: &ForecastState<R>) -> Result<Vec<GaussianDiag<R>>> {
    let cfg = model.config();
    let k = cfg.factors;
    let n = state.window.len();
    let slots: Vec<&GaussianDiag<R>> = cfg.lags.iter().map(|&l| &state.window[n - l]).collect();
    let dims = slots.len() * k;
    let rows = 1 + 2 * dims;
    let mut lagged: Vec<Tensor<R>> = slots
        .iter()
        .map(|g| {
            let mut t = Tensor::zeros(rows, k);
            for r in 0..rows {
                t.row_slice_mut(r).copy_from_slice(&g.mean);
            }
            t
        })
        .collect();
    for (li, g) in slots.iter().enumerate() {
        let sd: Vec<R> = g.variance().into_iter().map(|v| v.sqrt()).collect();
        for a in 0..k {
            let i = li * k + a;
            let up = lagged[li].get(1 + 2 * i, a) + sd[a];
            let down = lagged[li].get(2 + 2 * i, a) - sd[a];
            lagged[li].set(1 + 2 * i, a, up);
            lagged[li].set(2 + 2 * i, a, down);
        }
    }
    model
        .generative
        .temporal_priors_batch(&lagged)?
        .into_iter()
        .map(|(mean, log_var)| {
            let m = mean.row_slice(0).to_vec();
            let var: Vec<R> = (0..k)
                .map(|a| {
                    let spread: R = (0..dims)
                        .map(|i| {
                            let h = (mean.get(1 + 2 * i, a) - mean.get(2 + 2 * i, a)) * R::lit(0.5);
                            h * h
                        })
                        .sum();
                    log_var.get(0, a).exp() + spread
                })
                .collect();
            GaussianDiag::from_variance(m, &var)
        })
        .collect()
}

fn predict_weights<R: Real>(model: &Model<R>, state: &ForecastState<R>) -> Result<StepPrediction<R>> {
    let cfg = model.config();
    let k = cfg.factors;
    let belief = model.generative.transition_prior(&state.belief)?;
    let priors = propagated_priors(model, state)?;
    let mut mean = vec![R::zero(); k];
    let mut second = vec![R::zero(); k * k];
    for (p, g) in belief.probs.iter().zip(&priors) {
        let var = g.variance();
        for a in 0..k {
            mean[a] += *p * g.mean[a];
            for b in 0..k {
                second[a * k + b] += *p * g.mean[a] * g.mean[b];
            }
            second[a * k + a] += *p * var[a];
        }
    }
    for a in 0..k {
        for b in 0..k {
            second[a * k + b] -= mean[a] * mean[b];
        }
    }
    Ok(StepPrediction {
        belief,
        priors,
        mean,
        cov: second,
    })
}

/// Predictive mean and standard deviation of one observation row given the
/// weight mean and covariance, including the factor posterior variance and
/// the observation noise.
fn observation_moments<R: Real>(model: &Model<R>, mean: &[R], cov: &[R], out_mean: &mut [R], out_std: &mut [R]) {
    let cfg = model.config();
    let (k, d) = (cfg.factors, cfg.dim);
    let f = &model.variational.f_mean;
    let f_lv = &model.variational.f_log_var;
    let noise = R::lit(cfg.obs_noise * cfg.obs_noise);
    for j in 0..d {
        let mut m = R::zero();
        let mut v = noise;
        for a in 0..k {
            m += mean[a] * f.get(a, j);
            v += (mean[a] * mean[a] + cov[a * k + a]) * f_lv.get(a, j).exp();
            for b in 0..k {
                v += f.get(a, j) * cov[a * k + b] * f.get(b, j);
            }
        }
        out_mean[j] = m;
        out_std[j] = v.max(R::zero()).sqrt();
    }
}

fn mixture_diag<R: Real>(weights: &[R], parts: &[GaussianDiag<R>]) -> Result<GaussianDiag<R>> {
    let k = parts[0].len();
    let mut mean = vec![R::zero(); k];
    let mut second = vec![R::zero(); k];
    for (r, g) in weights.iter().zip(parts) {
        let var = g.variance();
        for a in 0..k {
            mean[a] += *r * g.mean[a];
            second[a] += *r * (var[a] + g.mean[a] * g.mean[a]);
        }
    }
    let var: Vec<R> = (0..k).map(|a| second[a] - mean[a] * mean[a]).collect();
    GaussianDiag::from_variance(mean, &var)
}

/// Absorbs observation row `x` into the step prediction; returns the
/// moment-matched weight posterior.
fn assimilate<R: Real>(
    model: &Model<R>,
    pred: &StepPrediction<R>,
    x: &[R],
    mask: &[bool],
    mode: Assimilation,
    seed: u64,
) -> Result<GaussianDiag<R>> {
    let cfg = model.config();
    let f = &model.variational.f_mean;
    let sigma0 = R::lit(cfg.obs_noise);
    let mut posts = Vec::with_capacity(cfg.states);
    let mut log_r = Vec::with_capacity(cfg.states);
    for (p, g) in pred.belief.probs.iter().zip(&pred.priors) {
        posts.push(conjugate_weight_update(g, f, x, mask, sigma0)?);
        log_r.push(p.max(R::min_positive_value()).ln() + log_evidence(g, f, x, mask, sigma0)?);
    }
    let r = crate::numerics::softmax(&log_r);
    let mixed = mixture_diag(&r, &posts)?;
    match mode {
        Assimilation::Gradient {
            iterations,
            learning_rate,
        } => refine_weight(model, pred, mixed, x, mask, iterations, learning_rate, seed),
        _ => Ok(mixed),
    }
}

/// Adam refinement of `q(w) = N(m, e^l)` on
/// `E_q[log p(x | w, F̄)] − Σ_s π(s) KL(q ‖ p_s)`.
#[allow(clippy::too_many_arguments)]
fn refine_weight<R: Real>(
    model: &Model<R>,
    pred: &StepPrediction<R>,
    start: GaussianDiag<R>,
    x: &[R],
    mask: &[bool],
    iterations: usize,
    learning_rate: f64,
    seed: u64,
) -> Result<GaussianDiag<R>> {
    let cfg = model.config();
    let k = cfg.factors;
    let mut mean = Tensor::row(start.mean);
    let mut log_var = Tensor::row(start.log_var);
    let mut adam = AdamState::new(learning_rate);
    adam.register(&[&mean, &log_var]);
    let mask_t = Tensor::row(mask.iter().map(|&m| if m { R::one() } else { R::zero() }).collect());
    let x_t = Tensor::row(x.to_vec());
    let inv_noise = R::lit(1.0 / (cfg.obs_noise * cfg.obs_noise));
    let mut rng = rng_from_seed(seed);
    for _ in 0..iterations {
        let tape = Tape::new();
        let m = tape.param(mean.clone());
        let lv = tape.param(log_var.clone());
        let eps = tape.constant(Tensor::row((0..k).map(|_| normal(&mut rng)).collect()));
        let w = m + lv.scale(R::lit(0.5)).exp() * eps;
        let resid = tape.constant(x_t.clone()) - w.matmul(tape.constant(model.variational.f_mean.clone()));
        let mut objective = (resid.square() * tape.constant(mask_t.clone())).sum().scale(R::lit(-0.5) * inv_noise);
        for (p, g) in pred.belief.probs.iter().zip(&pred.priors) {
            let pm = tape.constant(Tensor::row(g.mean.clone()));
            let plv = tape.constant(Tensor::row(g.log_var.clone()));
            let kl = ((plv - lv) + (lv.exp() + (m - pm).square()) * plv.scale(-R::one()).exp())
                .add_scalar(-R::one())
                .scale(R::lit(0.5))
                .sum();
            objective = objective - kl.scale(*p);
        }
        let mut grads = tape.backward(-objective)?;
        if let Some(g) = grads.take(m.id()) {
            adam.update(0, &mut mean, &g)?;
        }
        if let Some(g) = grads.take(lv.id()) {
            adam.update(1, &mut log_var, &g)?;
        }
    }
    GaussianDiag::new(mean.into_data(), log_var.into_data())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RollingOptions {
    pub assimilation: Assimilation,
    pub seed: u64,
}

impl Default for RollingOptions {
    fn default() -> Self {
        Self {
            assimilation: Assimilation::Conjugate,
            seed: 0,
        }
    }
}

/// One-step-ahead rolling prediction of every row of `values` (`H × D`)
/// starting from `state`; after each prediction the true row is absorbed
/// (observed entries only) and the state belief is updated. θ and `q(F)`
/// stay fixed throughout.
pub fn short_term_rolling<R: Real>(
    model: &Model<R>,
    mut state: ForecastState<R>,
    values: &[R],
    mask: &[bool],
    opts: &RollingOptions,
) -> Result<ForecastResult<R>> {
    let cfg = model.config();
    let d = cfg.dim;
    check_window(model, &state)?;
    if values.len() % d != 0 || values.len() != mask.len() || values.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "rolling prediction needs H × {d} values and mask entries"
        )));
    }
    let horizon = values.len() / d;
    let mut predicted = Tensor::zeros(horizon, d);
    let mut std = Tensor::zeros(horizon, d);
    let mut states = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let pred = predict_weights(model, &state)?;
        let (pm, ps) = (predicted.row_slice_mut(t), &mut vec![R::zero(); d]);
        observation_moments(model, &pred.mean, &pred.cov, pm, ps);
        std.row_slice_mut(t).copy_from_slice(ps);
        let (x, m) = (&values[t * d..(t + 1) * d], &mask[t * d..(t + 1) * d]);
        advance(model, &mut state, pred, Some((x, m)), opts.assimilation, derive_seed(opts.seed, &[t as u64]))?;
        states.push(state.belief.clone());
    }
    let nrmse = nrmse(predicted.data(), values, mask).ok();
    Ok(ForecastResult {
        predicted,
        std,
        states,
        nrmse,
    })
}

fn check_window<R: Real>(model: &Model<R>, state: &ForecastState<R>) -> Result<()> {
    let cfg = model.config();
    if state.window.len() < cfg.max_lag() {
        return Err(Error::InvalidArgument(format!(
            "history of {} steps is shorter than the largest lag {}",
            state.window.len(),
            cfg.max_lag()
        )));
    }
    if state.belief.probs.len() != cfg.states {
        return Err(Error::InvalidArgument("state belief has the wrong number of states".into()));
    }
    Ok(())
}

fn advance<R: Real>(
    model: &Model<R>,
    state: &mut ForecastState<R>,
    pred: StepPrediction<R>,
    obs: Option<(&[R], &[bool])>,
    mode: Assimilation,
    seed: u64,
) -> Result<()> {
    let cfg = model.config();
    match (obs, mode) {
        (Some((x, m)), Assimilation::Conjugate | Assimilation::Gradient { .. }) => {
            let w = assimilate(model, &pred, x, m, mode, seed)?;
            let lagged = state.lag_means(&cfg.lags);
            let belief = state_posterior(&state.belief, &w.mean, &lagged, &model.generative)?;
            state.push(w);
            state.belief = belief;
        }
        _ => {
            let k = cfg.factors;
            let var: Vec<R> = (0..k).map(|a| pred.cov[a * k + a]).collect();
            state.push(GaussianDiag::from_variance(pred.mean, &var)?);
            state.belief = pred.belief;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LongTermOptions {
    pub rollouts: usize,
    /// When false no trajectories are sampled and every std is zero.
    pub sample_noise: bool,
    pub seed: u64,
}

impl Default for LongTermOptions {
    fn default() -> Self {
        Self {
            rollouts: 50,
            sample_noise: true,
            seed: 0,
        }
    }
}

/// Free-running prediction of `horizon` steps. The point forecast
/// propagates means (the mixture mean of the temporal priors, fed back as
/// history); the std comes from `rollouts` sampled trajectories of states,
/// weights and observation noise.
pub fn long_term<R: Real>(
    model: &Model<R>,
    state: ForecastState<R>,
    horizon: usize,
    truth: Option<(&[R], &[bool])>,
    opts: &LongTermOptions,
) -> Result<ForecastResult<R>> {
    if horizon == 0 {
        return Err(Error::InvalidArgument("horizon must be at least 1".into()));
    }
    check_window(model, &state)?;
    let cfg = model.config();
    let d = cfg.dim;
    let mut predicted = Tensor::zeros(horizon, d);
    let mut states = Vec::with_capacity(horizon);
    let mut mean_state = state.clone();
    let mut scratch = vec![R::zero(); d];
    for t in 0..horizon {
        let pred = predict_weights(model, &mean_state)?;
        observation_moments(model, &pred.mean, &pred.cov, predicted.row_slice_mut(t), &mut scratch);
        states.push(pred.belief.clone());
        advance(model, &mut mean_state, pred, None, Assimilation::None, 0)?;
    }
    let std = if opts.sample_noise && opts.rollouts > 0 {
        rollout_std(model, &state, horizon, opts)?
    } else {
        Tensor::zeros(horizon, d)
    };
    let nrmse = match truth {
        Some((x, m)) => {
            if x.len() != horizon * d || m.len() != x.len() {
                return Err(Error::InvalidArgument("truth does not match the horizon".into()));
            }
            nrmse(predicted.data(), x, m).ok()
        }
        None => None,
    };
    Ok(ForecastResult {
        predicted,
        std,
        states,
        nrmse,
    })
}

fn sample_index<R: Real>(probs: &[R], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p.to_f64_lossy();
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn rollout_std<R: Real>(model: &Model<R>, start: &ForecastState<R>, horizon: usize, opts: &LongTermOptions) -> Result<Tensor<R>> {
    let cfg = model.config();
    let (k, d, s_count) = (cfg.factors, cfg.dim, cfg.states);
    let f = &model.variational.f_mean;
    let noise_std = R::lit(cfg.obs_noise);
    let mut sum = Tensor::zeros(horizon, d);
    let mut sum_sq = Tensor::zeros(horizon, d);
    for r in 0..opts.rollouts {
        let mut rng = rng_from_seed(derive_seed(opts.seed, &[r as u64]));
        let mut window: Vec<Vec<R>> = start.window.iter().map(|g| g.mean.clone()).collect();
        let mut s = sample_index(&start.belief.probs, rand::Rng::random::<f64>(&mut rng));
        for t in 0..horizon {
            let mut onehot = vec![R::zero(); s_count];
            onehot[s] = R::one();
            let prior = model.generative.transition_prior(&StateBelief { probs: onehot })?;
            s = sample_index(&prior.probs, rand::Rng::random::<f64>(&mut rng));
            let n = window.len();
            let lagged: Vec<Vec<R>> = cfg.lags.iter().map(|&l| window[n - l].clone()).collect();
            let g = model.generative.temporal_prior(&lagged, s)?;
            let w: Vec<R> = (0..k)
                .map(|a| g.mean[a] + (R::lit(0.5) * g.log_var[a]).exp() * normal::<R>(&mut rng))
                .collect();
            for j in 0..d {
                let x: R = (0..k).map(|a| w[a] * f.get(a, j)).sum::<R>() + noise_std * normal::<R>(&mut rng);
                let i = t * d + j;
                sum.data_mut()[i] += x;
                sum_sq.data_mut()[i] += x * x;
            }
            window.remove(0);
            window.push(w);
        }
    }
    let n = R::lit(opts.rollouts as f64);
    Ok(sum.zip_map(&sum_sq, |a, b| {
        let m = a / n;
        (b / n - m * m).max(R::zero()).sqrt()
    }))
}

/// `100 · ‖(predicted − truth) ⊙ mask‖_F / ‖truth ⊙ mask‖_F`.
pub fn nrmse<R: Real>(predicted: &[R], truth: &[R], mask: &[bool]) -> Result<f64> {
    if predicted.len() != truth.len() || truth.len() != mask.len() {
        return Err(Error::ShapeMismatch {
            op: "nrmse",
            left: vec![predicted.len()],
            right: vec![truth.len(), mask.len()],
        });
    }
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for ((p, t), &m) in predicted.iter().zip(truth).zip(mask) {
        if m {
            let (p, t) = (p.to_f64_lossy(), t.to_f64_lossy());
            num += (p - t) * (p - t);
            den += t * t;
        }
    }
    if den == 0.0 {
        return Err(Error::InvalidArgument("NRMSE undefined: observed truth has zero norm".into()));
    }
    Ok(100.0 * (num / den).sqrt())
}

/// Best relabeling of inferred states onto reference states.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelAlignment {
    /// `permutation[i]` is the reference label assigned to inferred label `i`.
    pub permutation: Vec<usize>,
    /// Percentage of matching steps under `permutation`.
    pub accuracy: f64,
}

/// Maximizes label agreement over all `S!` permutations (`S ≤ 8`); labels
/// are 0-based and must be below `states`.
pub fn state_accuracy(inferred: &[usize], reference: &[usize], states: usize) -> Result<LabelAlignment> {
    if inferred.len() != reference.len() || inferred.is_empty() {
        return Err(Error::InvalidArgument("label sequences must be nonempty and of equal length".into()));
    }
    if states == 0 || states > 8 {
        return Err(Error::InvalidArgument(format!("brute-force alignment supports 1 ≤ S ≤ 8, got {states}")));
    }
    if inferred.iter().chain(reference).any(|&l| l >= states) {
        return Err(Error::InvalidArgument(format!("label outside 0..{states}")));
    }
    let mut confusion = vec![0usize; states * states];
    for (&a, &b) in inferred.iter().zip(reference) {
        confusion[a * states + b] += 1;
    }
    let mut perm: Vec<usize> = (0..states).collect();
    let mut best = (0usize, perm.clone());
    permute(&mut perm, 0, &mut |p| {
        let hits: usize = p.iter().enumerate().map(|(i, &j)| confusion[i * states + j]).sum();
        if hits > best.0 {
            best = (hits, p.to_vec());
        }
    });
    Ok(LabelAlignment {
        permutation: best.1,
        accuracy: 100.0 * best.0 as f64 / inferred.len() as f64,
    })
}

fn permute(p: &mut Vec<usize>, at: usize, visit: &mut impl FnMut(&[usize])) {
    if at == p.len() {
        visit(p);
        return;
    }
    for i in at..p.len() {
        p.swap(at, i);
        permute(p, at + 1, visit);
        p.swap(at, i);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nrmse_values() {
        assert_eq!(nrmse(&[3.0f64, 4.0], &[3.0, 4.0], &[true, true]).unwrap(), 0.0);
        assert!((nrmse(&[0.0f64, 0.0], &[3.0, 4.0], &[true, true]).unwrap() - 100.0).abs() < 1e-12);
        assert!((nrmse(&[3.0f64, 0.0], &[3.0, 4.0], &[true, true]).unwrap() - 80.0).abs() < 1e-12);
        assert!(nrmse(&[1.0f64], &[1.0], &[false]).is_err());
    }

    #[test]
    fn alignment_values() {
        let a = state_accuracy(&[0, 0, 1, 1], &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(a.accuracy, 100.0);
        let b = state_accuracy(&[1, 1, 0, 0], &[0, 0, 1, 1], 2).unwrap();
        assert_eq!((b.accuracy, b.permutation), (100.0, vec![1, 0]));
        let c = state_accuracy(&[0, 1, 1, 1], &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(c.accuracy, 75.0);
        assert!(state_accuracy(&[0], &[0], 9).is_err());
    }

    #[test]
    fn masked_row_leaves_prior() {
        let prior = GaussianDiag::new(vec![0.5f64, -1.0], vec![0.1, 0.3]).unwrap();
        let f = Tensor::matrix(2, 2, vec![1.0, 0.5, -0.2, 1.0]).unwrap();
        let post = conjugate_weight_update(&prior, &f, &[3.0, 1.0], &[false, false], 0.1).unwrap();
        assert_eq!(post, prior);
    }
}
