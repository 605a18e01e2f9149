//! Generative model: switching transitions, the gated switching VAR prior
//! over temporal weights, the spatial factor decoder and the masked
//! Gaussian observation model.

use crate::error::{Error, Result};
use crate::numerics::{normal_vec, rng_from_seed, softmax, Tape, Tensor, Var};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    pub fn apply<'t, R: Real>(self, x: Var<'t, R>) -> Var<'t, R> {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.relu(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tanh" => Some(Activation::Tanh),
            "relu" => Some(Activation::Relu),
            _ => None,
        }
    }
}

/// Structural hyperparameters of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Number of spatial factors `K`.
    pub factors: usize,
    /// Number of discrete switching states `S`.
    pub states: usize,
    /// Spatial dimension `D`.
    pub dim: usize,
    /// Strictly increasing positive lags.
    pub lags: Vec<usize>,
    /// Dimension of the spatial embedding `z`.
    pub latent_dim: usize,
    /// Hidden width of every MLP.
    pub hidden: usize,
    /// Observation noise standard deviation `σ0`.
    pub obs_noise: f64,
    pub activation: Activation,
}

impl ModelConfig {
    pub fn new(factors: usize, states: usize, dim: usize, lags: Vec<usize>) -> Self {
        Self {
            factors,
            states,
            dim,
            lags,
            latent_dim: 2,
            hidden: 16,
            obs_noise: 0.1,
            activation: Activation::Tanh,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.factors == 0 {
            return bad("factor count K must be at least 1");
        }
        if self.states == 0 {
            return bad("state count S must be at least 1");
        }
        if self.dim == 0 {
            return bad("spatial dimension D must be at least 1");
        }
        if self.latent_dim == 0 || self.hidden == 0 {
            return bad("latent dimension and hidden width must be positive");
        }
        if self.lags.is_empty() {
            return bad("lag set must be nonempty");
        }
        if self.lags[0] == 0 || self.lags.windows(2).any(|w| w[0] >= w[1]) {
            return bad("lags must be distinct positive integers in ascending order");
        }
        if !(self.obs_noise > 0.0 && self.obs_noise.is_finite()) {
            return bad("observation noise σ0 must be positive");
        }
        Ok(())
    }

    pub fn max_lag(&self) -> usize {
        self.lags.last().copied().unwrap_or(0)
    }

    pub fn param_index(&self) -> ParamIndex {
        ParamIndex {
            states: self.states,
            lags: self.lags.len(),
        }
    }
}

/// Diagonal Gaussian stored as mean and log-variance.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianDiag<R> {
    pub mean: Vec<R>,
    pub log_var: Vec<R>,
}

impl<R: Real> GaussianDiag<R> {
    pub fn new(mean: Vec<R>, log_var: Vec<R>) -> Result<Self> {
        if mean.len() != log_var.len() {
            return Err(Error::ShapeMismatch {
                op: "GaussianDiag",
                left: vec![mean.len()],
                right: vec![log_var.len()],
            });
        }
        Ok(Self { mean, log_var })
    }

    pub fn standard(n: usize) -> Self {
        Self {
            mean: vec![R::zero(); n],
            log_var: vec![R::zero(); n],
        }
    }

    pub fn from_variance(mean: Vec<R>, var: &[R]) -> Result<Self> {
        let log_var = var.iter().map(|v| v.max(R::log_floor()).ln()).collect();
        Self::new(mean, log_var)
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn variance(&self) -> Vec<R> {
        self.log_var.iter().map(|l| l.exp()).collect()
    }

    /// Log density at `x`.
    pub fn log_density(&self, x: &[R]) -> R {
        let half = R::lit(0.5);
        let ln2pi = (R::lit(2.0) * R::PI()).ln();
        self.mean
            .iter()
            .zip(&self.log_var)
            .zip(x)
            .map(|((&m, &lv), &xv)| -half * (ln2pi + lv + (xv - m) * (xv - m) / lv.exp()))
            .sum()
    }
}

/// Categorical distribution over the `S` switching states.
#[derive(Clone, Debug, PartialEq)]
pub struct StateBelief<R> {
    pub probs: Vec<R>,
}

impl<R: Real> StateBelief<R> {
    pub fn new(probs: Vec<R>) -> Result<Self> {
        let total: R = probs.iter().copied().sum();
        if probs.is_empty() || probs.iter().any(|&p| p < R::zero() || !p.is_finite()) {
            return Err(Error::InvalidArgument("state belief must be a finite nonnegative vector".into()));
        }
        if (total - R::one()).abs() > R::lit(1e-9) {
            return Err(Error::InvalidArgument(format!("state belief sums to {total}, not 1")));
        }
        Ok(Self { probs })
    }

    pub fn uniform(states: usize) -> Self {
        Self {
            probs: vec![R::one() / R::lit(states as f64); states],
        }
    }

    pub fn from_logits(logits: &[R]) -> Self {
        Self { probs: softmax(logits) }
    }

    pub fn argmax(&self) -> usize {
        self.probs
            .iter()
            .enumerate()
            .fold((0, R::neg_infinity()), |(bi, bv), (i, &p)| if p > bv { (i, p) } else { (bi, bv) })
            .0
    }
}

/// Positions of every generative tensor in the flat parameter list.
///
/// Per state the block is: VAR coefficients (one per lag), VAR bias,
/// per-lag input layers (weight, bias), mean head, log-variance head,
/// gate hidden layer, gate output layer. The decoder closes the list.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamIndex {
    states: usize,
    lags: usize,
}

impl ParamIndex {
    pub fn transition(&self) -> usize {
        0
    }
    pub fn initial_logits(&self) -> usize {
        1
    }
    fn per_state(&self) -> usize {
        3 * self.lags + 9
    }
    fn base(&self, s: usize) -> usize {
        2 + s * self.per_state()
    }
    pub fn var_coef(&self, s: usize, l: usize) -> usize {
        self.base(s) + l
    }
    pub fn var_bias(&self, s: usize) -> usize {
        self.base(s) + self.lags
    }
    pub fn lag_weight(&self, s: usize, l: usize) -> usize {
        self.base(s) + self.lags + 1 + 2 * l
    }
    pub fn lag_bias(&self, s: usize, l: usize) -> usize {
        self.lag_weight(s, l) + 1
    }
    fn head(&self, s: usize, k: usize) -> usize {
        self.base(s) + 3 * self.lags + 1 + k
    }
    pub fn mean_weight(&self, s: usize) -> usize {
        self.head(s, 0)
    }
    pub fn mean_bias(&self, s: usize) -> usize {
        self.head(s, 1)
    }
    pub fn logvar_weight(&self, s: usize) -> usize {
        self.head(s, 2)
    }
    pub fn logvar_bias(&self, s: usize) -> usize {
        self.head(s, 3)
    }
    pub fn gate_hidden_weight(&self, s: usize) -> usize {
        self.head(s, 4)
    }
    pub fn gate_hidden_bias(&self, s: usize) -> usize {
        self.head(s, 5)
    }
    pub fn gate_out_weight(&self, s: usize) -> usize {
        self.head(s, 6)
    }
    pub fn gate_out_bias(&self, s: usize) -> usize {
        self.head(s, 7)
    }
    fn decoder(&self, k: usize) -> usize {
        self.base(self.states) + k
    }
    pub fn decoder_hidden_weight(&self) -> usize {
        self.decoder(0)
    }
    pub fn decoder_hidden_bias(&self) -> usize {
        self.decoder(1)
    }
    pub fn decoder_mean_weight(&self) -> usize {
        self.decoder(2)
    }
    pub fn decoder_mean_bias(&self) -> usize {
        self.decoder(3)
    }
    pub fn decoder_logvar_weight(&self) -> usize {
        self.decoder(4)
    }
    pub fn decoder_logvar_bias(&self) -> usize {
        self.decoder(5)
    }
    pub fn len(&self) -> usize {
        self.decoder(6)
    }
    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn names(&self) -> Vec<String> {
        let mut names = vec!["transition".to_string(), "initial_logits".to_string()];
        for s in 0..self.states {
            for l in 0..self.lags {
                names.push(format!("state{s}.var_coef{l}"));
            }
            names.push(format!("state{s}.var_bias"));
            for l in 0..self.lags {
                names.push(format!("state{s}.lag{l}.weight"));
                names.push(format!("state{s}.lag{l}.bias"));
            }
            for head in ["mean", "logvar", "gate_hidden", "gate_out"] {
                names.push(format!("state{s}.{head}.weight"));
                names.push(format!("state{s}.{head}.bias"));
            }
        }
        for head in ["hidden", "mean", "logvar"] {
            names.push(format!("decoder.{head}.weight"));
            names.push(format!("decoder.{head}.bias"));
        }
        names
    }
}

/// Generative parameters θ, held as a flat tensor list addressed by
/// [`ParamIndex`].
///
/// Linear maps are stored input-major: a layer with weight `W` (`in × out`)
/// and bias `b` maps a row vector `x` to `x·W + b`. VAR coefficients follow
/// the same convention, so the `K × K` matrix stored for lag `l` is the
/// transpose of the column-vector coefficient matrix. The transition tensor
/// holds one row of next-state logits per previous state.
#[derive(Clone, Debug, PartialEq)]
pub struct GenerativeParams<R> {
    pub config: ModelConfig,
    pub tensors: Vec<Tensor<R>>,
}

impl<R: Real> GenerativeParams<R> {
    /// Random initialization: input-scaled Gaussian weights, zero biases,
    /// sticky transition logits.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (k, s_count, h, z) = (config.factors, config.states, config.hidden, config.latent_dim);
        let nl = config.lags.len();
        let idx = config.param_index();
        let mut rng = rng_from_seed(seed);
        let mut gauss = |rows: usize, cols: usize, std: f64| {
            let v: Vec<R> = normal_vec(&mut rng, rows * cols);
            Tensor::matrix(rows, cols, v.into_iter().map(|x| x * R::lit(std)).collect()).unwrap()
        };
        let mut tensors = vec![Tensor::zeros(1, 1); idx.len()];

        let mut trans = gauss(s_count, s_count, 0.1);
        for i in 0..s_count {
            let v = trans.get(i, i) + R::lit(3.0);
            trans.set(i, i, v);
        }
        tensors[idx.transition()] = trans;
        tensors[idx.initial_logits()] = Tensor::zeros(1, s_count);

        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        for s in 0..s_count {
            for l in 0..nl {
                tensors[idx.var_coef(s, l)] = gauss(k, k, 0.3 * fan(k));
                tensors[idx.lag_weight(s, l)] = gauss(k, h, fan(k));
                tensors[idx.lag_bias(s, l)] = Tensor::zeros(1, h);
            }
            tensors[idx.var_bias(s)] = Tensor::zeros(1, k);
            tensors[idx.mean_weight(s)] = gauss(h, k, fan(h));
            tensors[idx.mean_bias(s)] = Tensor::zeros(1, k);
            tensors[idx.logvar_weight(s)] = gauss(h, k, 0.1 * fan(h));
            let offset = if s_count > 1 { s as f64 / (s_count - 1) as f64 - 0.5 } else { 0.0 };
            tensors[idx.logvar_bias(s)] = Tensor::filled(1, k, R::lit(2.0 * offset));
            tensors[idx.gate_hidden_weight(s)] = gauss(nl * k, h, fan(nl * k));
            tensors[idx.gate_hidden_bias(s)] = Tensor::zeros(1, h);
            tensors[idx.gate_out_weight(s)] = gauss(h, k, fan(h));
            tensors[idx.gate_out_bias(s)] = Tensor::zeros(1, k);
        }
        let kd = k * config.dim;
        tensors[idx.decoder_hidden_weight()] = gauss(z, h, fan(z));
        tensors[idx.decoder_hidden_bias()] = Tensor::zeros(1, h);
        tensors[idx.decoder_mean_weight()] = gauss(h, kd, fan(h));
        tensors[idx.decoder_mean_bias()] = Tensor::zeros(1, kd);
        tensors[idx.decoder_logvar_weight()] = gauss(h, kd, 0.1 * fan(h));
        tensors[idx.decoder_logvar_bias()] = Tensor::zeros(1, kd);
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    pub fn index(&self) -> ParamIndex {
        self.config.param_index()
    }

    pub fn names(&self) -> Vec<String> {
        self.index().names()
    }

    pub fn tensor(&self, i: usize) -> &Tensor<R> {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor<R> {
        &mut self.tensors[i]
    }

    /// Puts every tensor on `tape`, trainable or constant.
    pub fn bind<'t>(&self, tape: &'t Tape<R>, trainable: bool) -> Vec<Var<'t, R>> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }

    /// Next-state distribution `softmax(Φ·π_prev)`.
    pub fn transition_prior(&self, prev: &StateBelief<R>) -> Result<StateBelief<R>> {
        let s = self.config.states;
        if prev.probs.len() != s {
            return Err(Error::ShapeMismatch {
                op: "transition_prior",
                left: vec![prev.probs.len()],
                right: vec![s],
            });
        }
        let trans = &self.tensors[self.index().transition()];
        let logits: Vec<R> = (0..s)
            .map(|i| (0..s).map(|j| prev.probs[j] * trans.get(j, i)).sum())
            .collect();
        Ok(StateBelief::from_logits(&logits))
    }

    /// Temporal prior `p(w_t | w_{t-ℓ}, s_t = state)`; `lagged[i]` is the
    /// weight vector at lag `lags[i]`.
    pub fn temporal_prior(&self, lagged: &[Vec<R>], state: usize) -> Result<GaussianDiag<R>> {
        self.check_lagged(lagged)?;
        if state >= self.config.states {
            return Err(Error::InvalidArgument(format!("state {state} out of range")));
        }
        let tape = Tape::new();
        let theta = self.bind(&tape, false);
        let lag_vars: Vec<_> = lagged.iter().map(|w| tape.constant(Tensor::row(w.clone()))).collect();
        let (mean, log_var) = temporal_prior_vars(&self.config, &theta, state, &lag_vars);
        Ok(GaussianDiag {
            mean: mean.value().into_data(),
            log_var: log_var.value().into_data(),
        })
    }

    /// Temporal priors for every state at once.
    pub fn temporal_priors(&self, lagged: &[Vec<R>]) -> Result<Vec<GaussianDiag<R>>> {
        self.check_lagged(lagged)?;
        let tape = Tape::new();
        let theta = self.bind(&tape, false);
        let lag_vars: Vec<_> = lagged.iter().map(|w| tape.constant(Tensor::row(w.clone()))).collect();
        Ok((0..self.config.states)
            .map(|s| {
                let (mean, log_var) = temporal_prior_vars(&self.config, &theta, s, &lag_vars);
                GaussianDiag {
                    mean: mean.value().into_data(),
                    log_var: log_var.value().into_data(),
                }
            })
            .collect())
    }

    /// Temporal priors of every state for `M` lag configurations at once:
    /// `lagged[i]` is the `M × K` matrix of lag `lags[i]`. Returns per state
    /// the `M × K` mean and log-variance.
    pub fn temporal_priors_batch(&self, lagged: &[Tensor<R>]) -> Result<Vec<(Tensor<R>, Tensor<R>)>> {
        if lagged.len() != self.config.lags.len() {
            return Err(Error::LagCountMismatch {
                expected: self.config.lags.len(),
                got: lagged.len(),
            });
        }
        if let Some(t) = lagged
            .iter()
            .find(|t| t.cols() != self.config.factors || t.rows() != lagged[0].rows())
        {
            return Err(Error::ShapeMismatch {
                op: "temporal_priors_batch",
                left: t.shape().to_vec(),
                right: vec![lagged[0].rows(), self.config.factors],
            });
        }
        let tape = Tape::new();
        let theta = self.bind(&tape, false);
        let lag_vars: Vec<_> = lagged.iter().map(|w| tape.constant(w.clone())).collect();
        Ok((0..self.config.states)
            .map(|s| {
                let (mean, log_var) = temporal_prior_vars(&self.config, &theta, s, &lag_vars);
                (mean.value(), log_var.value())
            })
            .collect())
    }

    fn check_lagged(&self, lagged: &[Vec<R>]) -> Result<()> {
        if lagged.len() != self.config.lags.len() {
            return Err(Error::LagCountMismatch {
                expected: self.config.lags.len(),
                got: lagged.len(),
            });
        }
        if let Some(w) = lagged.iter().find(|w| w.len() != self.config.factors) {
            return Err(Error::ShapeMismatch {
                op: "temporal_prior",
                left: vec![w.len()],
                right: vec![self.config.factors],
            });
        }
        Ok(())
    }

    /// Gating vector `g_s` for the given lags (exposed for inspection).
    pub fn gate(&self, lagged: &[Vec<R>], state: usize) -> Result<Vec<R>> {
        self.check_lagged(lagged)?;
        let tape = Tape::new();
        let theta = self.bind(&tape, false);
        let lag_vars: Vec<_> = lagged.iter().map(|w| tape.constant(Tensor::row(w.clone()))).collect();
        Ok(gate_vars(&self.config, &theta, state, &lag_vars).value().into_data())
    }

    /// `p(F | z)` over the `K·D` factor entries, row-major in `(k, d)`.
    pub fn spatial_decoder(&self, z: &[R]) -> Result<GaussianDiag<R>> {
        if z.len() != self.config.latent_dim {
            return Err(Error::ShapeMismatch {
                op: "spatial_decoder",
                left: vec![z.len()],
                right: vec![self.config.latent_dim],
            });
        }
        let tape = Tape::new();
        let theta = self.bind(&tape, false);
        let zv = tape.constant(Tensor::row(z.to_vec()));
        let (mean, log_var) = decoder_vars(&self.config, &theta, zv);
        Ok(GaussianDiag {
            mean: mean.value().into_data(),
            log_var: log_var.value().into_data(),
        })
    }
}

fn linear<'t, R: Real>(x: Var<'t, R>, w: Var<'t, R>, b: Var<'t, R>) -> Var<'t, R> {
    x.matmul(w).add_row(b)
}

/// Gate `g_s ∈ [0,1]^K` from the concatenated lags.
pub(crate) fn gate_vars<'t, R: Real>(cfg: &ModelConfig, theta: &[Var<'t, R>], s: usize, lags: &[Var<'t, R>]) -> Var<'t, R> {
    let idx = cfg.param_index();
    let joined = if lags.len() == 1 { lags[0] } else { Var::concat_cols(lags) };
    let hidden = cfg
        .activation
        .apply(linear(joined, theta[idx.gate_hidden_weight(s)], theta[idx.gate_hidden_bias(s)]));
    linear(hidden, theta[idx.gate_out_weight(s)], theta[idx.gate_out_bias(s)]).sigmoid()
}

/// Batched temporal prior for state `s`. Each element of `lags` is an
/// `M × K` matrix of lagged weights (one row per time point); returns the
/// `M × K` mean and log-variance.
pub(crate) fn temporal_prior_vars<'t, R: Real>(
    cfg: &ModelConfig,
    theta: &[Var<'t, R>],
    s: usize,
    lags: &[Var<'t, R>],
) -> (Var<'t, R>, Var<'t, R>) {
    let idx = cfg.param_index();
    let mut linear_part = lags[0].matmul(theta[idx.var_coef(s, 0)]);
    for (l, lag) in lags.iter().enumerate().skip(1) {
        linear_part = linear_part + lag.matmul(theta[idx.var_coef(s, l)]);
    }
    let linear_part = linear_part.add_row(theta[idx.var_bias(s)]);

    let head = |l: usize| {
        cfg.activation
            .apply(linear(lags[l], theta[idx.lag_weight(s, l)], theta[idx.lag_bias(s, l)]))
    };
    let mut hidden = head(0);
    for l in 1..lags.len() {
        hidden = hidden + head(l);
    }
    let mlp_mean = linear(hidden, theta[idx.mean_weight(s)], theta[idx.mean_bias(s)]);
    let log_var = linear(hidden, theta[idx.logvar_weight(s)], theta[idx.logvar_bias(s)]);

    let gate = gate_vars(cfg, theta, s, lags);
    let mean = gate.one_minus() * linear_part + gate * mlp_mean;
    (mean, log_var)
}

/// Decoder `z ↦ (μ^F, log Σ^F)` as `1 × K·D` rows.
pub(crate) fn decoder_vars<'t, R: Real>(cfg: &ModelConfig, theta: &[Var<'t, R>], z: Var<'t, R>) -> (Var<'t, R>, Var<'t, R>) {
    let idx = cfg.param_index();
    let hidden = cfg.activation.apply(linear(
        z,
        theta[idx.decoder_hidden_weight()],
        theta[idx.decoder_hidden_bias()],
    ));
    let mean = linear(hidden, theta[idx.decoder_mean_weight()], theta[idx.decoder_mean_bias()]);
    let log_var = linear(hidden, theta[idx.decoder_logvar_weight()], theta[idx.decoder_logvar_bias()]);
    (mean, log_var)
}

/// Masked Gaussian log-likelihood of one sequence.
///
/// `x` and `mask` are `T × D` row-major, `weights` is `T × K`, `factors` is
/// `K × D`. Entries with `mask == false` contribute exactly zero and their
/// values are never read.
pub fn observation_loglik<R: Real>(
    x: &[R],
    mask: &[bool],
    weights: &Tensor<R>,
    factors: &Tensor<R>,
    obs_noise: R,
) -> Result<R> {
    if !(obs_noise > R::zero()) {
        return Err(Error::InvalidArgument("σ0 must be positive".into()));
    }
    let (t_len, k) = (weights.rows(), weights.cols());
    let d = factors.cols();
    if factors.rows() != k || x.len() != t_len * d || mask.len() != x.len() {
        return Err(Error::ShapeMismatch {
            op: "observation_loglik",
            left: vec![t_len, k, x.len()],
            right: vec![factors.rows(), d, mask.len()],
        });
    }
    let var = obs_noise * obs_noise;
    let norm = R::lit(-0.5) * (R::lit(2.0) * R::PI() * var).ln();
    let mut total = R::zero();
    for t in 0..t_len {
        let w = weights.row_slice(t);
        for j in 0..d {
            if !mask[t * d + j] {
                continue;
            }
            let pred: R = (0..k).map(|i| w[i] * factors.get(i, j)).sum();
            let r = x[t * d + j] - pred;
            total += norm - R::lit(0.5) * r * r / var;
        }
    }
    Ok(total)
}
