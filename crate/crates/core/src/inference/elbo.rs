use super::train::Model;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::generative::{decoder_vars, temporal_prior_vars, ModelConfig};
use crate::numerics::{normal_vec, rng_from_seed, Tape, Tensor, Var};
use crate::real::Real;

/// Standard normal draws behind one reparameterized ELBO evaluation.
///
/// Drawn in a fixed order from one seeded stream: `z`, then `F`, then the
/// weight noise of each batch sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct ElboNoise<R> {
    pub z: Tensor<R>,
    pub factors: Tensor<R>,
    pub weights: Vec<Tensor<R>>,
}

impl<R: Real> ElboNoise<R> {
    pub fn draw(cfg: &ModelConfig, batch: usize, steps: usize, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let (k, d, zd) = (cfg.factors, cfg.dim, cfg.latent_dim);
        let rows = cfg.max_lag() + steps;
        let z = Tensor::row(normal_vec(&mut rng, zd));
        let factors = Tensor::matrix(k, d, normal_vec(&mut rng, k * d)).unwrap();
        let weights = (0..batch)
            .map(|_| Tensor::matrix(rows, k, normal_vec(&mut rng, rows * k)).unwrap())
            .collect();
        Self { z, factors, weights }
    }

    /// All-zero noise: every sample sits at its variational mean.
    pub fn zeros(cfg: &ModelConfig, batch: usize, steps: usize) -> Self {
        let rows = cfg.max_lag() + steps;
        Self {
            z: Tensor::zeros(1, cfg.latent_dim),
            factors: Tensor::zeros(cfg.factors, cfg.dim),
            weights: (0..batch).map(|_| Tensor::zeros(rows, cfg.factors)).collect(),
        }
    }
}

/// The five ELBO contributions (each already carrying its sign) and the
/// annealed total `reconstruction + β·(initial + state + weight + factor)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboBreakdown<R> {
    pub reconstruction: R,
    pub initial: R,
    pub state: R,
    pub weight: R,
    pub factor: R,
    pub beta: R,
    pub total: R,
}

impl<R: Real> ElboBreakdown<R> {
    /// Un-annealed bound (β = 1).
    pub fn unannealed(&self) -> R {
        self.reconstruction + self.initial + self.state + self.weight + self.factor
    }

    pub(crate) fn check_finite(&self) -> Result<()> {
        let terms = [
            ("reconstruction", self.reconstruction),
            ("initial-prior", self.initial),
            ("state-KL", self.state),
            ("weight-KL", self.weight),
            ("factor", self.factor),
        ];
        for (name, v) in terms {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("ELBO {name} term")));
            }
        }
        Ok(())
    }

    pub(crate) fn accumulate(&mut self, other: &Self) {
        self.reconstruction += other.reconstruction;
        self.initial += other.initial;
        self.state += other.state;
        self.weight += other.weight;
        self.factor += other.factor;
        self.total += other.total;
    }

    pub(crate) fn zero(beta: R) -> Self {
        Self {
            reconstruction: R::zero(),
            initial: R::zero(),
            state: R::zero(),
            weight: R::zero(),
            factor: R::zero(),
            beta,
            total: R::zero(),
        }
    }
}

/// Observations of a batch laid out time-major: row `t·B + b` holds step `t`
/// of the batch's `b`-th sequence.
pub(crate) struct BatchData<R> {
    pub steps: usize,
    pub batch: usize,
    pub x: Tensor<R>,
    pub mask: Tensor<R>,
    pub observed: usize,
}

impl<R: Real> BatchData<R> {
    pub fn new(data: &Dataset<R>, indices: &[usize]) -> Self {
        Self::from_sequences(
            data.steps(),
            data.dim(),
            &indices.iter().map(|&n| data.sequence(n)).collect::<Vec<_>>(),
        )
    }

    pub fn from_sequences(steps: usize, dim: usize, seqs: &[(&[R], &[bool])]) -> Self {
        let batch = seqs.len();
        let mut x = Tensor::zeros(steps * batch, dim);
        let mut mask = Tensor::zeros(steps * batch, dim);
        let mut observed = 0;
        for t in 0..steps {
            for (b, (vals, m)) in seqs.iter().enumerate() {
                let row = t * batch + b;
                for j in 0..dim {
                    if m[t * dim + j] {
                        x.set(row, j, vals[t * dim + j]);
                        mask.set(row, j, R::one());
                        observed += 1;
                    }
                }
            }
        }
        Self {
            steps,
            batch,
            x,
            mask,
            observed,
        }
    }
}

/// Tape handles for one sequence's variational parameters.
#[derive(Clone, Copy)]
pub(crate) struct SeqVars<'t, R: Real> {
    pub w_mean: Var<'t, R>,
    pub w_log_var: Var<'t, R>,
    pub s0_logits: Var<'t, R>,
}

#[derive(Clone, Copy)]
pub(crate) struct GlobalVars<'t, R: Real> {
    pub z_mean: Var<'t, R>,
    pub z_log_var: Var<'t, R>,
    pub f_mean: Var<'t, R>,
    pub f_log_var: Var<'t, R>,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct GraphOptions {
    pub beta: f64,
    /// Weight of the corpus-global factor term (batch share of the corpus).
    pub factor_scale: f64,
    /// When false, `F` is held at its variational mean and the factor term
    /// is left out.
    pub factor_term: bool,
}

pub(crate) struct GraphOut<'t, R: Real> {
    pub reconstruction: Var<'t, R>,
    pub initial: Var<'t, R>,
    pub state: Var<'t, R>,
    pub weight: Var<'t, R>,
    pub factor: Var<'t, R>,
    pub objective: Var<'t, R>,
}

impl<'t, R: Real> GraphOut<'t, R> {
    pub fn breakdown(&self, beta: f64) -> ElboBreakdown<R> {
        ElboBreakdown {
            reconstruction: self.reconstruction.item(),
            initial: self.initial.item(),
            state: self.state.item(),
            weight: self.weight.item(),
            factor: self.factor.item(),
            beta: R::lit(beta),
            total: self.objective.item(),
        }
    }
}

fn gaussian_sample<'t, R: Real>(mean: Var<'t, R>, log_var: Var<'t, R>, noise: Var<'t, R>) -> Var<'t, R> {
    mean + log_var.scale(R::lit(0.5)).exp() * noise
}

/// Row-wise `Σ_k KL(N(mq, e^lq) ‖ N(mp, e^lp))` as an `M × 1` column.
fn kl_rows<'t, R: Real>(mq: Var<'t, R>, lq: Var<'t, R>, mp: Var<'t, R>, lp: Var<'t, R>) -> Var<'t, R> {
    let inv_var = lp.scale(-R::one()).exp();
    ((lp - lq) + (lq.exp() + (mq - mp).square()) * inv_var)
        .add_scalar(-R::one())
        .scale(R::lit(0.5))
        .sum_cols()
}

/// `KL(N(m, e^l) ‖ N(0, I))` summed over every entry.
fn kl_standard<'t, R: Real>(m: Var<'t, R>, l: Var<'t, R>) -> Var<'t, R> {
    (l.exp() + m.square() - l).add_scalar(-R::one()).scale(R::lit(0.5)).sum()
}

/// Builds the annealed ELBO of a batch on `tape`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn batch_graph<'t, R: Real>(
    tape: &'t Tape<R>,
    cfg: &ModelConfig,
    theta: &[Var<'t, R>],
    globals: GlobalVars<'t, R>,
    seqs: &[SeqVars<'t, R>],
    data: &BatchData<R>,
    noise: &ElboNoise<R>,
    opts: GraphOptions,
) -> GraphOut<'t, R> {
    let idx = cfg.param_index();
    let (t_len, b_len) = (data.steps, data.batch);
    let lag_max = cfg.max_lag();
    let rows = lag_max + t_len;
    debug_assert_eq!(seqs.len(), b_len);

    // Factors and the corpus-global term.
    let (factors, factor) = if opts.factor_term {
        let z = gaussian_sample(globals.z_mean, globals.z_log_var, tape.constant(noise.z.clone()));
        let (dec_mean, dec_log_var) = decoder_vars(cfg, theta, z);
        let (k, d) = (cfg.factors, cfg.dim);
        let kl_f = kl_rows(
            globals.f_mean.reshape(1, k * d),
            globals.f_log_var.reshape(1, k * d),
            dec_mean,
            dec_log_var,
        )
        .sum();
        let kl_z = kl_standard(globals.z_mean, globals.z_log_var);
        let f = gaussian_sample(globals.f_mean, globals.f_log_var, tape.constant(noise.factors.clone()));
        (f, -(kl_f + kl_z))
    } else {
        (globals.f_mean, tape.scalar(R::zero()))
    };

    // Weight samples for every row of every sequence, sequence-major.
    let samples: Vec<Var<'t, R>> = seqs
        .iter()
        .zip(&noise.weights)
        .map(|(sv, eps)| gaussian_sample(sv.w_mean, sv.w_log_var, tape.constant(eps.clone())))
        .collect();
    let w_all = Var::concat_rows(&samples);
    let mean_all = Var::concat_rows(&seqs.iter().map(|s| s.w_mean).collect::<Vec<_>>());
    let lv_all = Var::concat_rows(&seqs.iter().map(|s| s.w_log_var).collect::<Vec<_>>());

    let time_major = |lag: usize| -> Vec<usize> {
        let mut out = Vec::with_capacity(t_len * b_len);
        for t in 0..t_len {
            for b in 0..b_len {
                out.push(b * rows + lag_max + t - lag);
            }
        }
        out
    };
    let cur_idx = time_major(0);
    let w_cur = w_all.gather_rows(&cur_idx);
    let mean_cur = mean_all.gather_rows(&cur_idx);
    let lv_cur = lv_all.gather_rows(&cur_idx);
    let lagged: Vec<Var<'t, R>> = cfg
        .lags
        .iter()
        .map(|&l| w_all.gather_rows(&time_major(l)))
        .collect();

    // Masked Gaussian reconstruction.
    let noise_var = R::lit(cfg.obs_noise * cfg.obs_noise);
    let norm = R::lit(-0.5) * (R::lit(2.0) * R::PI() * noise_var).ln();
    let resid = tape.constant(data.x.clone()) - w_cur.matmul(factors);
    let reconstruction = (resid.square() * tape.constant(data.mask.clone()))
        .sum()
        .scale(R::lit(-0.5) / noise_var)
        .add_scalar(norm * R::lit(data.observed as f64));

    // Per-state weight KLs and log-densities of the current samples.
    let ln_2pi = (R::lit(2.0) * R::PI()).ln();
    let mut kl_cols = Vec::with_capacity(cfg.states);
    let mut ll_cols = Vec::with_capacity(cfg.states);
    for s in 0..cfg.states {
        let (mu, lv) = temporal_prior_vars(cfg, theta, s, &lagged);
        kl_cols.push(kl_rows(mean_cur, lv_cur, mu, lv));
        let inv_var = lv.scale(-R::one()).exp();
        ll_cols.push(
            (lv.add_scalar(ln_2pi) + (w_cur - mu).square() * inv_var)
                .scale(R::lit(-0.5))
                .sum_cols(),
        );
    }
    let kl_mat = Var::concat_cols(&kl_cols);
    let ll_mat = Var::concat_cols(&ll_cols);

    // Forward recursion of the state posteriors.
    let s0 = Var::concat_rows(&seqs.iter().map(|s| s.s0_logits).collect::<Vec<_>>());
    let log_q0 = s0.log_softmax_rows();
    let log_p0 = theta[idx.initial_logits()].log_softmax_rows().gather_rows(&vec![0; b_len]);
    let mut pi = log_q0.exp();
    let init_cat = (pi * (log_q0 - log_p0)).sum();
    let transition = theta[idx.transition()];
    let mut log_pis = Vec::with_capacity(t_len);
    let mut log_priors = Vec::with_capacity(t_len);
    let mut pis = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let block: Vec<usize> = (t * b_len..(t + 1) * b_len).collect();
        let log_prior = pi.matmul(transition).log_softmax_rows();
        let log_pi = (log_prior + ll_mat.gather_rows(&block)).log_softmax_rows();
        pi = log_pi.exp();
        log_pis.push(log_pi);
        log_priors.push(log_prior);
        pis.push(pi);
    }
    let state_probs = Var::concat_rows(&pis);
    let state_kl = (state_probs * (Var::concat_rows(&log_pis) - Var::concat_rows(&log_priors))).sum();
    let weight_kl = (state_probs * kl_mat).sum();

    let pre_idx: Vec<usize> = (0..b_len).flat_map(|b| (0..lag_max).map(move |p| b * rows + p)).collect();
    let pre_kl = kl_standard(mean_all.gather_rows(&pre_idx), lv_all.gather_rows(&pre_idx));

    let initial = -(init_cat + pre_kl);
    let state = -state_kl;
    let weight = -weight_kl;
    let beta = R::lit(opts.beta);
    let kl_total = initial + state + weight + factor.scale(R::lit(opts.factor_scale));
    let objective = reconstruction + kl_total.scale(beta);
    GraphOut {
        reconstruction,
        initial,
        state,
        weight,
        factor: factor.scale(R::lit(opts.factor_scale)),
        objective,
    }
}

/// Annealed ELBO of the sequences `indices` of `data` under `model`, using
/// one reparameterized sample drawn from `seed`.
///
/// The corpus-global factor term is weighted by the batch's share of the
/// corpus, so the ELBOs of a partition of the corpus sum to the full ELBO
/// (for identical noise).
pub fn elbo<R: Real>(
    data: &Dataset<R>,
    indices: &[usize],
    model: &Model<R>,
    beta: f64,
    seed: u64,
) -> Result<ElboBreakdown<R>> {
    let cfg = &model.generative.config;
    let noise = ElboNoise::draw(cfg, indices.len(), data.steps(), seed);
    elbo_with_noise(data, indices, model, beta, &noise)
}

/// [`elbo`] with explicit noise.
pub fn elbo_with_noise<R: Real>(
    data: &Dataset<R>,
    indices: &[usize],
    model: &Model<R>,
    beta: f64,
    noise: &ElboNoise<R>,
) -> Result<ElboBreakdown<R>> {
    model.check_data(data)?;
    if indices.is_empty() || indices.iter().any(|&i| i >= data.sequences()) {
        return Err(Error::InvalidArgument("batch indices empty or out of range".into()));
    }
    let cfg = &model.generative.config;
    let tape = Tape::new();
    let theta = model.generative.bind(&tape, false);
    let globals = model.bind_globals(&tape, false);
    let seqs: Vec<_> = indices.iter().map(|&n| model.bind_sequence(&tape, n, false)).collect();
    let batch = BatchData::new(data, indices);
    let opts = GraphOptions {
        beta,
        factor_scale: indices.len() as f64 / model.variational.sequences.len() as f64,
        factor_term: true,
    };
    let out = batch_graph(&tape, cfg, &theta, globals, &seqs, &batch, noise, opts);
    let breakdown = out.breakdown(beta);
    breakdown.check_finite()?;
    Ok(breakdown)
}

/// [`elbo_with_noise`] and the gradient of its annealed total with respect
/// to every model tensor, in [`Model::tensors`] order. Tensors the batch
/// does not touch get zero gradients.
pub fn elbo_gradients<R: Real>(
    data: &Dataset<R>,
    indices: &[usize],
    model: &Model<R>,
    beta: f64,
    noise: &ElboNoise<R>,
) -> Result<(ElboBreakdown<R>, Vec<Tensor<R>>)> {
    model.check_data(data)?;
    if indices.is_empty() || indices.iter().any(|&i| i >= data.sequences()) {
        return Err(Error::InvalidArgument("batch indices empty or out of range".into()));
    }
    let cfg = &model.generative.config;
    let tape = Tape::new();
    let theta = model.generative.bind(&tape, true);
    let globals = model.bind_globals(&tape, true);
    let seqs: Vec<_> = indices.iter().map(|&n| model.bind_sequence(&tape, n, true)).collect();
    let batch = BatchData::new(data, indices);
    let opts = GraphOptions {
        beta,
        factor_scale: indices.len() as f64 / model.variational.sequences.len() as f64,
        factor_term: true,
    };
    let out = batch_graph(&tape, cfg, &theta, globals, &seqs, &batch, noise, opts);
    let breakdown = out.breakdown(beta);
    breakdown.check_finite()?;
    let mut grads = tape.backward(out.objective)?;
    let mut vars: Vec<Option<Var<R>>> = theta.iter().map(|&v| Some(v)).collect();
    vars.extend([globals.z_mean, globals.z_log_var, globals.f_mean, globals.f_log_var].map(Some));
    for n in 0..model.variational.sequences.len() {
        match indices.iter().position(|&i| i == n) {
            Some(b) => vars.extend([seqs[b].w_mean, seqs[b].w_log_var, seqs[b].s0_logits].map(Some)),
            None => vars.extend([None, None, None]),
        }
    }
    let grads = vars
        .into_iter()
        .zip(model.tensors())
        .map(|(v, t)| v.and_then(|v| grads.take(v.id())).unwrap_or_else(|| Tensor::zeros_like(t)))
        .collect();
    Ok((breakdown, grads))
}
