use rand::seq::SliceRandom;

use super::elbo::{batch_graph, BatchData, ElboBreakdown, ElboNoise, GlobalVars, GraphOptions, SeqVars};
use super::variational::{InitStrategy, SequencePosterior, VariationalParams};
use super::{anneal, state_posterior};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::generative::{GenerativeParams, ModelConfig, StateBelief};
use crate::numerics::{derive_seed, rng_from_seed, AdamState, Gradients, Tape, Tensor, Var};
use crate::real::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// KL weight at epoch 0.
    pub anneal_start: f64,
    /// Epochs over which the KL weight rises linearly to 1.
    pub anneal_epochs: usize,
    pub mc_samples: usize,
    /// Sequences per minibatch; `None` picks the whole corpus when it has at
    /// most 64 sequences and 64 otherwise.
    pub batch_size: Option<usize>,
    pub seed: u64,
    pub init: InitStrategy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            learning_rate: 0.01,
            anneal_start: 0.01,
            anneal_epochs: 100,
            mc_samples: 1,
            batch_size: None,
            seed: 0,
            init: InitStrategy::Principal,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.anneal_start) {
            return Err(Error::InvalidConfig("anneal start must lie in [0, 1]".into()));
        }
        if self.mc_samples == 0 {
            return Err(Error::InvalidConfig("need at least one Monte Carlo sample".into()));
        }
        if self.batch_size == Some(0) {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        Ok(())
    }

    pub fn batch_len(&self, sequences: usize) -> usize {
        match self.batch_size {
            Some(b) => b.min(sequences),
            None if sequences <= 64 => sequences,
            None => 64,
        }
    }
}

/// Generative parameters θ together with the variational parameters φ
/// fitted to a training corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<R> {
    pub generative: GenerativeParams<R>,
    pub variational: VariationalParams<R>,
}

impl<R: Real> Model<R> {
    pub fn init(cfg: &ModelConfig, data: &Dataset<R>, init: InitStrategy, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut generative = GenerativeParams::init(cfg, derive_seed(seed, &[1]))?;
        let mut variational = VariationalParams::init(cfg, data, init, derive_seed(seed, &[2]))?;
        if init == InitStrategy::Principal {
            super::warm_start::fit_dynamics(&mut generative, &mut variational, derive_seed(seed, &[3]))?;
        }
        Ok(Self { generative, variational })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.generative.config
    }

    /// Checks that `data` is the corpus φ was fitted to (same shape).
    pub fn check_data(&self, data: &Dataset<R>) -> Result<()> {
        let cfg = self.config();
        let lag = cfg.max_lag();
        if data.dim() != cfg.dim {
            return Err(Error::InvalidConfig(format!(
                "dataset has D = {} but the model expects D = {}",
                data.dim(),
                cfg.dim
            )));
        }
        if data.sequences() != self.variational.sequences.len() {
            return Err(Error::InvalidArgument(format!(
                "dataset has {} sequences, the posterior covers {}",
                data.sequences(),
                self.variational.sequences.len()
            )));
        }
        if let Some(s) = self.variational.sequences.iter().find(|s| s.steps(lag) != data.steps()) {
            return Err(Error::InvalidArgument(format!(
                "dataset has T = {}, the posterior covers {} steps",
                data.steps(),
                s.steps(lag)
            )));
        }
        Ok(())
    }

    /// Adam slot count: θ, then the four globals, then three per sequence.
    pub fn tensor_count(&self) -> usize {
        self.generative.tensors.len() + VariationalParams::<R>::GLOBAL_COUNT
            + VariationalParams::<R>::PER_SEQUENCE * self.variational.sequences.len()
    }

    /// Every tensor in Adam slot order.
    pub fn tensors(&self) -> Vec<&Tensor<R>> {
        let mut out: Vec<&Tensor<R>> = self.generative.tensors.iter().collect();
        out.extend(self.variational.named_tensors().into_iter().map(|(_, t)| t));
        out
    }

    /// [`Model::tensors`], mutably.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<R>> {
        let mut out: Vec<&mut Tensor<R>> = self.generative.tensors.iter_mut().collect();
        out.extend(self.variational.tensors_mut());
        out
    }

    pub(crate) fn bind_globals<'t>(&self, tape: &'t Tape<R>, trainable: bool) -> GlobalVars<'t, R> {
        let v = &self.variational;
        let put = |t: &Tensor<R>| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
        GlobalVars {
            z_mean: put(&v.z_mean),
            z_log_var: put(&v.z_log_var),
            f_mean: put(&v.f_mean),
            f_log_var: put(&v.f_log_var),
        }
    }

    pub(crate) fn bind_sequence<'t>(&self, tape: &'t Tape<R>, n: usize, trainable: bool) -> SeqVars<'t, R> {
        bind_posterior(tape, &self.variational.sequences[n], trainable)
    }

    /// Filtered state posteriors `π_0 … π_{T-1}` along a sequence, evaluated
    /// at the variational weight means.
    pub fn state_path(&self, posterior: &SequencePosterior<R>) -> Result<Vec<StateBelief<R>>> {
        let cfg = self.config();
        let lag = cfg.max_lag();
        let mut pi = StateBelief::from_logits(posterior.s0_logits.data());
        let mut out = Vec::with_capacity(posterior.steps(lag));
        for t in 0..posterior.steps(lag) {
            let row = lag + t;
            let lagged: Vec<Vec<R>> = cfg.lags.iter().map(|&l| posterior.w_mean.row_slice(row - l).to_vec()).collect();
            pi = state_posterior(&pi, posterior.w_mean.row_slice(row), &lagged, &self.generative)?;
            out.push(pi.clone());
        }
        Ok(out)
    }

    /// Most probable state per step for training sequence `n`.
    pub fn state_labels(&self, n: usize) -> Result<Vec<usize>> {
        Ok(self
            .state_path(&self.variational.sequences[n])?
            .iter()
            .map(StateBelief::argmax)
            .collect())
    }
}

fn bind_posterior<'t, R: Real>(tape: &'t Tape<R>, p: &SequencePosterior<R>, trainable: bool) -> SeqVars<'t, R> {
    let put = |t: &Tensor<R>| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
    SeqVars {
        w_mean: put(&p.w_mean),
        w_log_var: put(&p.w_log_var),
        s0_logits: put(&p.s0_logits),
    }
}

/// One row of the training curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub beta: f64,
    /// Annealed objective summed over the epoch's minibatches.
    pub objective: f64,
    /// The same with β = 1.
    pub elbo: f64,
}

/// Resumable training state: the model, optimizer moments and the epoch
/// counter. Every random draw of an epoch is derived from the seed and the
/// epoch number, so resuming from a saved trainer reproduces an
/// uninterrupted run exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer<R> {
    pub model: Model<R>,
    pub config: TrainConfig,
    pub adam: AdamState<R>,
    pub epoch: usize,
    pub curve: Vec<EpochRecord>,
}

pub struct TrainOutput<R> {
    pub model: Model<R>,
    pub curve: Vec<EpochRecord>,
}

impl<R: Real> Trainer<R> {
    pub fn new(cfg: &ModelConfig, data: &Dataset<R>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::init(cfg, data, config.init, config.seed)?;
        Ok(Self::from_model(model, config))
    }

    pub fn from_model(model: Model<R>, config: TrainConfig) -> Self {
        let mut adam = AdamState::new(config.learning_rate);
        let mut params: Vec<&Tensor<R>> = model.generative.tensors.iter().collect();
        params.extend(model.variational.named_tensors().into_iter().map(|(_, t)| t));
        adam.register(&params);
        Self {
            model,
            config,
            adam,
            epoch: 0,
            curve: Vec::new(),
        }
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    /// Runs the remaining epochs.
    pub fn run(&mut self, data: &Dataset<R>) -> Result<()> {
        while !self.is_done() {
            self.step_epoch(data)?;
        }
        Ok(())
    }

    /// One pass over the corpus in shuffled minibatches.
    pub fn step_epoch(&mut self, data: &Dataset<R>) -> Result<EpochRecord> {
        self.model.check_data(data)?;
        let n = data.sequences();
        let epoch = self.epoch;
        let seed = self.config.seed;
        let beta = anneal(epoch, self.config.anneal_start, self.config.anneal_epochs);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_from_seed(derive_seed(seed, &[0x5f, epoch as u64])));
        let batch_len = self.config.batch_len(n);
        let mut record = EpochRecord {
            epoch,
            beta,
            objective: 0.0,
            elbo: 0.0,
        };
        for (b, batch) in order.chunks(batch_len).enumerate() {
            let noise_seed = derive_seed(seed, &[0x6e, epoch as u64, b as u64]);
            let stats = self.step_batch(data, batch, beta, noise_seed).map_err(|e| match e {
                Error::NonFinite(detail) => Error::Diverged { epoch, detail },
                other => other,
            })?;
            record.objective += stats.total.to_f64_lossy();
            record.elbo += stats.unannealed().to_f64_lossy();
        }
        self.epoch += 1;
        self.curve.push(record);
        Ok(record)
    }

    fn step_batch(&mut self, data: &Dataset<R>, batch: &[usize], beta: f64, noise_seed: u64) -> Result<ElboBreakdown<R>> {
        let model = &self.model;
        let cfg = model.config().clone();
        let tape = Tape::new();
        let theta = model.generative.bind(&tape, true);
        let globals = model.bind_globals(&tape, true);
        let seqs: Vec<SeqVars<R>> = batch.iter().map(|&i| model.bind_sequence(&tape, i, true)).collect();
        let batch_data = BatchData::new(data, batch);
        let opts = GraphOptions {
            beta,
            factor_scale: batch.len() as f64 / data.sequences() as f64,
            factor_term: true,
        };
        let m = self.config.mc_samples;
        let weight = R::lit(1.0 / m as f64);
        let mut stats = ElboBreakdown::zero(R::lit(beta));
        let mut objective: Option<Var<R>> = None;
        for sample in 0..m {
            let noise = ElboNoise::draw(&cfg, batch.len(), data.steps(), derive_seed(noise_seed, &[sample as u64]));
            let out = batch_graph(&tape, &cfg, &theta, globals, &seqs, &batch_data, &noise, opts);
            stats.accumulate(&out.breakdown(beta));
            let term = out.objective.scale(weight);
            objective = Some(match objective {
                Some(acc) => acc + term,
                None => term,
            });
        }
        for v in [
            &mut stats.reconstruction,
            &mut stats.initial,
            &mut stats.state,
            &mut stats.weight,
            &mut stats.factor,
            &mut stats.total,
        ] {
            *v *= weight;
        }
        stats.check_finite()?;
        let loss = -objective.expect("at least one sample");
        let mut grads = tape.backward(loss)?;

        let p = theta.len();
        let model = &mut self.model;
        for (i, var) in theta.iter().enumerate() {
            apply(&mut self.adam, i, model.generative.tensor_mut(i), &mut grads, *var)?;
        }
        let gvars = [globals.z_mean, globals.z_log_var, globals.f_mean, globals.f_log_var];
        for (g, (param, var)) in model.variational.globals_mut().into_iter().zip(gvars).enumerate() {
            apply(&mut self.adam, p + g, param, &mut grads, var)?;
        }
        let base = p + VariationalParams::<R>::GLOBAL_COUNT;
        for (&n, sv) in batch.iter().zip(&seqs) {
            let post = &mut model.variational.sequences[n];
            let slot = base + VariationalParams::<R>::PER_SEQUENCE * n;
            apply(&mut self.adam, slot, &mut post.w_mean, &mut grads, sv.w_mean)?;
            apply(&mut self.adam, slot + 1, &mut post.w_log_var, &mut grads, sv.w_log_var)?;
            apply(&mut self.adam, slot + 2, &mut post.s0_logits, &mut grads, sv.s0_logits)?;
        }
        Ok(stats)
    }
}

fn apply<R: Real>(adam: &mut AdamState<R>, slot: usize, param: &mut Tensor<R>, grads: &mut Gradients<R>, var: Var<R>) -> Result<()> {
    match grads.take(var.id()) {
        Some(g) => adam.update(slot, param, &g),
        None => Ok(()),
    }
}

/// Fits θ and φ to `data` from scratch.
pub fn train<R: Real>(data: &Dataset<R>, cfg: &ModelConfig, config: &TrainConfig) -> Result<TrainOutput<R>> {
    let mut trainer = Trainer::new(cfg, data, config.clone())?;
    trainer.run(data)?;
    Ok(TrainOutput {
        model: trainer.model,
        curve: trainer.curve,
    })
}

/// Posterior of a sequence outside the training corpus, fitted with θ and
/// `q(F)` held fixed.
#[derive(Clone, Debug, PartialEq)]
pub struct NewSequenceFit<R> {
    pub posterior: SequencePosterior<R>,
    /// ELBO after each iteration.
    pub curve: Vec<f64>,
}

/// Optimizes `q(w, s)` of one new sequence (`T × D` values and mask) with
/// Adam while the generative parameters and the factor means stay fixed.
pub fn infer_new_sequence<R: Real>(
    model: &Model<R>,
    values: &[R],
    mask: &[bool],
    iterations: usize,
    learning_rate: f64,
    seed: u64,
) -> Result<NewSequenceFit<R>> {
    let cfg = model.config().clone();
    let d = cfg.dim;
    if values.len() != mask.len() || values.is_empty() || values.len() % d != 0 {
        return Err(Error::InvalidArgument(format!(
            "new sequence needs T × {d} values and mask entries, got {} and {}",
            values.len(),
            mask.len()
        )));
    }
    let steps = values.len() / d;
    let seq_data = Dataset::new(1, steps, d, values.to_vec(), mask.to_vec())?;
    let (x, m) = seq_data.sequence(0);
    let mut posterior = SequencePosterior::projected(&cfg, &model.variational.f_mean, x, m)?;
    let batch = BatchData::new(&seq_data, &[0]);
    let mut adam = AdamState::new(learning_rate);
    adam.register(&[&posterior.w_mean, &posterior.w_log_var, &posterior.s0_logits]);
    let opts = GraphOptions {
        beta: 1.0,
        factor_scale: 0.0,
        factor_term: false,
    };
    let mut curve = Vec::with_capacity(iterations);
    for it in 0..iterations {
        let tape = Tape::new();
        let theta = model.generative.bind(&tape, false);
        let globals = model.bind_globals(&tape, false);
        let sv = bind_posterior(&tape, &posterior, true);
        let noise = ElboNoise::draw(&cfg, 1, steps, derive_seed(seed, &[it as u64]));
        let out = batch_graph(&tape, &cfg, &theta, globals, &[sv], &batch, &noise, opts);
        let stats = out.breakdown(1.0);
        stats.check_finite()?;
        curve.push(stats.total.to_f64_lossy());
        let mut grads = tape.backward(-out.objective)?;
        apply(&mut adam, 0, &mut posterior.w_mean, &mut grads, sv.w_mean)?;
        apply(&mut adam, 1, &mut posterior.w_log_var, &mut grads, sv.w_log_var)?;
        apply(&mut adam, 2, &mut posterior.s0_logits, &mut grads, sv.s0_logits)?;
    }
    Ok(NewSequenceFit { posterior, curve })
}
