//! Data-driven start for the per-state dynamics.
//!
//! Starting from the projected weight means:
//!
//! 1. the weight basis is rotated (with the factor rows, so `W F` is
//!    unchanged) onto the eigenvectors of the one-step residual covariance
//!    of a single affine VAR, where a diagonal prior covariance fits best;
//! 2. a hard-assignment switching regression (per-state affine VAR with
//!    full residual covariance, sticky Viterbi relabelling) is run from a
//!    k-means start and several random segmentations, keeping the best
//!    scoring labels;
//! 3. each state's VAR and log-variance bias are fitted on its samples while
//!    `q(w)` variances are iterated to a fixed point with the prior.

use std::ops::Range;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng as _;

use super::variational::{factor_log_var, VariationalParams};
use crate::error::Result;
use crate::generative::{GenerativeParams, ModelConfig};
use crate::inference::SequencePosterior;
use crate::numerics::{rng_from_seed, Rng, Tensor};
use crate::real::Real;

const KMEANS_ITERS: usize = 50;
const EM_ITERS: usize = 50;
const RESTARTS: usize = 8;
const SEGMENT_LEN: (usize, usize) = (10, 100);
/// Self-transition probability used for relabelling; for two states it
/// matches the initial transition logits.
const STAY: f64 = 0.95;
const RIDGE: f64 = 1e-8;
const GATE_BIAS: f64 = -3.0;
const MIN_VAR: f64 = 1e-6;
const FIXED_POINT_ITERS: usize = 20;

struct Samples {
    /// `(sequence, row)` of each target.
    at: Vec<(usize, usize)>,
    /// Regressors `[w_{t−ℓ1}, …, w_{t−ℓL}]` per sample.
    inputs: Vec<Vec<f64>>,
    /// `q(w)` variances of the regressors.
    input_var: Vec<Vec<f64>>,
    targets: Vec<Vec<f64>>,
}

impl Samples {
    /// Index ranges of consecutive samples from the same sequence.
    fn runs(&self) -> Vec<Range<usize>> {
        let mut out = Vec::new();
        let mut start = 0;
        for i in 1..=self.at.len() {
            if i == self.at.len() || self.at[i].0 != self.at[start].0 {
                out.push(start..i);
                start = i;
            }
        }
        out
    }
}

fn collect<R: Real>(lags: &[usize], max_lag: usize, sequences: &[SequencePosterior<R>]) -> Samples {
    let mut at = Vec::new();
    let mut inputs = Vec::new();
    let mut input_var = Vec::new();
    let mut targets = Vec::new();
    for (n, seq) in sequences.iter().enumerate() {
        let w = &seq.w_mean;
        let row = |r: usize| w.row_slice(r).iter().map(|v| v.to_f64_lossy()).collect::<Vec<f64>>();
        let var = |r: usize| seq.w_log_var.row_slice(r).iter().map(|v| v.to_f64_lossy().exp()).collect::<Vec<f64>>();
        // Rows below `max_lag` are the unobserved preamble; skip targets whose
        // lags reach into it.
        for r in 2 * max_lag..w.rows() {
            at.push((n, r));
            inputs.push(lags.iter().flat_map(|&l| row(r - l)).collect());
            input_var.push(lags.iter().flat_map(|&l| var(r - l)).collect());
            targets.push(row(r));
        }
    }
    Samples { at, inputs, input_var, targets }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Columns scaled to zero mean and unit variance, so clustering is not
/// dominated by the highest-energy factor.
fn standardized(points: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let Some(first) = points.first() else {
        return Vec::new();
    };
    let n = points.len() as f64;
    let cols = first.len();
    let mean: Vec<f64> = (0..cols).map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n).collect();
    let sd: Vec<f64> = (0..cols)
        .map(|j| (points.iter().map(|p| (p[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt().max(1e-12))
        .collect();
    points
        .iter()
        .map(|p| (0..cols).map(|j| (p[j] - mean[j]) / sd[j]).collect())
        .collect()
}

/// Lloyd iterations from k-means++ centres; returns one label per point.
pub(crate) fn kmeans(points: &[Vec<f64>], k: usize, rng: &mut Rng) -> Vec<usize> {
    if points.is_empty() || k <= 1 {
        return vec![0; points.len()];
    }
    let mut centres = vec![points[rng.random_range(0..points.len())].clone()];
    while centres.len() < k {
        let d: Vec<f64> = points
            .iter()
            .map(|p| centres.iter().map(|c| dist2(p, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d.iter().sum();
        if !(total > 0.0) {
            break;
        }
        let mut u = rng.random::<f64>() * total;
        let mut pick = points.len() - 1;
        for (i, v) in d.iter().enumerate() {
            if u < *v {
                pick = i;
                break;
            }
            u -= v;
        }
        centres.push(points[pick].clone());
    }
    let mut labels = vec![0; points.len()];
    for _ in 0..KMEANS_ITERS {
        let mut changed = false;
        for (p, label) in points.iter().zip(labels.iter_mut()) {
            let best = (0..centres.len())
                .min_by(|&a, &b| dist2(p, &centres[a]).total_cmp(&dist2(p, &centres[b])))
                .unwrap_or(0);
            changed |= best != *label;
            *label = best;
        }
        for (c, centre) in centres.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = points.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(p, _)| p).collect();
            if members.is_empty() {
                continue;
            }
            for (j, slot) in centre.iter_mut().enumerate() {
                *slot = members.iter().map(|p| p[j]).sum::<f64>() / members.len() as f64;
            }
        }
        if !changed {
            break;
        }
    }
    labels
}

/// Least-squares fit `target ≈ [input, 1] · B` when each input carries
/// independent noise of variance `input_var` (the spread of the sampled
/// lags): the expected squared error adds `Σ diag(input_var)` to the Gram
/// matrix. Returns `B` (`(p+1) × K`) and the per-output expected residual
/// variance, noise included.
fn ridge_fit(inputs: &[&Vec<f64>], input_var: &[&Vec<f64>], targets: &[&Vec<f64>]) -> Option<(DMatrix<f64>, Vec<f64>)> {
    let n = inputs.len();
    let p = inputs.first()?.len() + 1;
    let k = targets.first()?.len();
    if n < p {
        return None;
    }
    let x = DMatrix::from_fn(n, p, |i, j| if j + 1 == p { 1.0 } else { inputs[i][j] });
    let y = DMatrix::from_fn(n, k, |i, j| targets[i][j]);
    let mut gram = x.transpose() * &x;
    let mut noise = vec![0.0; p - 1];
    for v in input_var {
        for (slot, vi) in noise.iter_mut().zip(v.iter()) {
            *slot += vi;
        }
    }
    for j in 0..p - 1 {
        gram[(j, j)] += noise[j] + RIDGE * n as f64;
    }
    let b = gram.cholesky()?.solve(&(x.transpose() * &y));
    let resid = &y - &x * &b;
    let var = (0..k)
        .map(|j| {
            let spread: f64 = (0..p - 1).map(|i| b[(i, j)] * b[(i, j)] * noise[i]).sum();
            (resid.column(j).norm_squared() + spread) / n as f64
        })
        .collect();
    Some((b, var))
}

fn design(samples: &Samples, rows: &[usize]) -> DMatrix<f64> {
    let p = samples.inputs[0].len() + 1;
    DMatrix::from_fn(rows.len(), p, |r, j| if j + 1 == p { 1.0 } else { samples.inputs[rows[r]][j] })
}

fn target_matrix(samples: &Samples, rows: &[usize]) -> DMatrix<f64> {
    let k = samples.targets[0].len();
    DMatrix::from_fn(rows.len(), k, |r, j| samples.targets[rows[r]][j])
}

/// Affine VAR with full residual covariance fitted to `members`, scored on
/// every sample. `None` when the state has too few samples.
fn full_cov_loglik(samples: &Samples, members: &[usize]) -> Option<Vec<f64>> {
    let p = samples.inputs[0].len() + 1;
    let k = samples.targets[0].len();
    if members.len() < p + k {
        return None;
    }
    let x = design(samples, members);
    let y = target_matrix(samples, members);
    let mut gram = x.transpose() * &x;
    for j in 0..p - 1 {
        gram[(j, j)] += RIDGE * members.len() as f64;
    }
    let b = gram.cholesky()?.solve(&(x.transpose() * &y));
    let resid = &y - &x * &b;
    let mut cov = resid.transpose() * &resid / members.len() as f64;
    for j in 0..k {
        cov[(j, j)] += MIN_VAR * MIN_VAR;
    }
    let chol = cov.cholesky()?;
    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let all: Vec<usize> = (0..samples.targets.len()).collect();
    let resid = target_matrix(samples, &all) - design(samples, &all) * &b;
    let whitened = chol.l().solve_lower_triangular(&resid.transpose())?;
    Some(
        whitened
            .column_iter()
            .map(|c| -0.5 * (c.norm_squared() + log_det))
            .collect(),
    )
}

/// Most likely label path per sequence run under a sticky chain, with its
/// total log score.
fn viterbi(loglik: &[Vec<f64>], runs: &[Range<usize>], states: usize) -> (Vec<usize>, f64) {
    let stay = STAY.ln();
    let switch = ((1.0 - STAY) / (states - 1) as f64).ln();
    let mut labels = vec![0; loglik[0].len()];
    let mut total = 0.0;
    for run in runs {
        let mut score: Vec<f64> = (0..states).map(|s| loglik[s][run.start]).collect();
        let mut back = vec![vec![0usize; states]; run.len()];
        for (step, i) in run.clone().enumerate().skip(1) {
            let prev = score.clone();
            for s in 0..states {
                let (arg, best) = (0..states)
                    .map(|q| (q, prev[q] + if q == s { stay } else { switch }))
                    .max_by(|a, b| a.1.total_cmp(&b.1))
                    .unwrap_or((0, f64::NEG_INFINITY));
                back[step][s] = arg;
                score[s] = best + loglik[s][i];
            }
        }
        let (mut cur, best) = score
            .iter()
            .copied()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap_or((0, 0.0));
        total += best;
        for step in (0..run.len()).rev() {
            labels[run.start + step] = cur;
            cur = back[step][cur];
        }
    }
    (labels, total)
}

/// Alternates per-state fits and Viterbi relabelling until the labels stop
/// changing; `None` when a state runs out of samples.
fn hard_em(samples: &Samples, runs: &[Range<usize>], states: usize, mut labels: Vec<usize>) -> Option<(Vec<usize>, f64)> {
    let mut score = f64::NEG_INFINITY;
    for _ in 0..EM_ITERS {
        let loglik: Vec<Vec<f64>> = (0..states)
            .map(|s| {
                let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == s).collect();
                full_cov_loglik(samples, &members)
            })
            .collect::<Option<_>>()?;
        let (next, next_score) = viterbi(&loglik, runs, states);
        score = next_score;
        if next == labels {
            break;
        }
        labels = next;
    }
    Some((labels, score))
}

fn random_segments(runs: &[Range<usize>], len: usize, states: usize, rng: &mut Rng) -> Vec<usize> {
    let mut labels = vec![0; len];
    for run in runs {
        let mut i = run.start;
        while i < run.end {
            let seg = rng.random_range(SEGMENT_LEN.0..=SEGMENT_LEN.1);
            let s = rng.random_range(0..states);
            labels[i..(i + seg).min(run.end)].fill(s);
            i += seg;
        }
    }
    labels
}

fn switching_labels(samples: &Samples, states: usize, rng: &mut Rng) -> Vec<usize> {
    let n = samples.targets.len();
    if states <= 1 {
        return vec![0; n];
    }
    let runs = samples.runs();
    let mut starts = vec![kmeans(&standardized(&samples.targets), states, rng)];
    for _ in 0..RESTARTS {
        starts.push(random_segments(&runs, n, states, rng));
    }
    let fallback = starts[0].clone();
    starts
        .into_iter()
        .filter_map(|l| hard_em(samples, &runs, states, l))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map_or(fallback, |(l, _)| l)
}

/// Rotates every weight row (and the factor rows) onto the eigenvectors of
/// the residual covariance of one affine VAR fitted to all samples.
fn rotate_to_innovations<R: Real>(cfg: &ModelConfig, phi: &mut VariationalParams<R>) {
    let k = cfg.factors;
    let samples = collect(&cfg.lags, cfg.max_lag(), &phi.sequences);
    if samples.targets.len() <= samples.inputs.first().map_or(0, |v| v.len()) + k {
        return;
    }
    let all: Vec<usize> = (0..samples.targets.len()).collect();
    let x = design(&samples, &all);
    let y = target_matrix(&samples, &all);
    let mut gram = x.transpose() * &x;
    for j in 0..x.ncols() - 1 {
        gram[(j, j)] += RIDGE * all.len() as f64;
    }
    let Some(chol) = gram.cholesky() else {
        return;
    };
    let resid = &y - &x * chol.solve(&(x.transpose() * &y));
    let u = SymmetricEigen::new(resid.transpose() * &resid).eigenvectors;
    for seq in &mut phi.sequences {
        for r in 0..seq.w_mean.rows() {
            let old: Vec<f64> = seq.w_mean.row_slice(r).iter().map(|v| v.to_f64_lossy()).collect();
            for (j, slot) in seq.w_mean.row_slice_mut(r).iter_mut().enumerate() {
                *slot = R::lit((0..k).map(|a| old[a] * u[(a, j)]).sum());
            }
            let old: Vec<f64> = seq.w_log_var.row_slice(r).iter().map(|v| v.to_f64_lossy().exp()).collect();
            for (j, slot) in seq.w_log_var.row_slice_mut(r).iter_mut().enumerate() {
                *slot = R::lit((0..k).map(|a| u[(a, j)] * u[(a, j)] * old[a]).sum::<f64>().ln());
            }
        }
    }
    // W F = (W U)(Uᵀ F).
    let f_old = phi.f_mean.clone();
    for j in 0..k {
        for c in 0..cfg.dim {
            let v: f64 = (0..k).map(|a| u[(a, j)] * f_old.get(a, c).to_f64_lossy()).sum();
            phi.f_mean.set(j, c, R::lit(v));
        }
    }
    phi.f_log_var = factor_log_var(cfg, &phi.sequences);
}

/// Rotates the weight basis of `phi`, then overwrites the VAR coefficients,
/// VAR bias, log-variance head, MLP mean head and gate output of every state
/// with enough samples for a fit; other parameters are left as initialized.
///
/// The zeroed output weights still receive gradients (their inputs, the
/// hidden activations, are not zero). The gate starts at the constant
/// `sigmoid(GATE_BIAS)` and the MLP mean at zero, so the gated mean is
/// `(1 − g)·VAR` and the VAR is fitted to `y / (1 − g)`.
pub(crate) fn fit_dynamics<R: Real>(theta: &mut GenerativeParams<R>, phi: &mut VariationalParams<R>, seed: u64) -> Result<()> {
    let cfg = theta.config.clone();
    let k = cfg.factors;
    let nl = cfg.lags.len();
    rotate_to_innovations(&cfg, phi);
    let sequences = &mut phi.sequences;
    let samples = collect(&cfg.lags, cfg.max_lag(), sequences);
    if samples.inputs.is_empty() {
        return Ok(());
    }
    let labels = switching_labels(&samples, cfg.states, &mut rng_from_seed(seed));
    let idx = cfg.param_index();
    let h = theta.tensor(idx.gate_out_weight(0)).rows();
    for s in 0..cfg.states {
        for l in 0..nl {
            *theta.tensor_mut(idx.var_coef(s, l)) = Tensor::zeros(k, k);
        }
        *theta.tensor_mut(idx.var_bias(s)) = Tensor::zeros(1, k);
        *theta.tensor_mut(idx.gate_out_weight(s)) = Tensor::zeros(h, k);
        *theta.tensor_mut(idx.gate_out_bias(s)) = Tensor::filled(1, k, R::lit(GATE_BIAS));
        *theta.tensor_mut(idx.logvar_weight(s)) = Tensor::zeros(h, k);
        *theta.tensor_mut(idx.mean_weight(s)) = Tensor::zeros(h, k);
        *theta.tensor_mut(idx.mean_bias(s)) = Tensor::zeros(1, k);
    }
    let g = 1.0 / (1.0 + (-GATE_BIAS).exp());
    let scale = (1.0 - g) * (1.0 - g);
    let members: Vec<Vec<usize>> = (0..cfg.states)
        .map(|s| (0..labels.len()).filter(|&i| labels[i] == s).collect())
        .collect();
    // The gated mean is (1 − g)·VAR while the MLP mean head is zero.
    let targets: Vec<Vec<f64>> = samples.targets.iter().map(|y| y.iter().map(|v| v / (1.0 - g)).collect()).collect();
    let obs_var: Vec<Vec<f64>> = samples
        .at
        .iter()
        .map(|&(n, r)| sequences[n].w_log_var.row_slice(r).iter().map(|v| v.to_f64_lossy().exp()).collect())
        .collect();
    let mut fits: Vec<Option<(DMatrix<f64>, Vec<f64>)>> = vec![None; cfg.states];
    // Fixed point between the regression (which sees the lag spread of
    // q(w)) and q(w) (whose precision gathers the observation, its own
    // prior and its role as a lag of later steps).
    for _ in 0..FIXED_POINT_ITERS {
        let input_var = collect(&cfg.lags, cfg.max_lag(), sequences).input_var;
        for (s, m) in members.iter().enumerate() {
            let x: Vec<&Vec<f64>> = m.iter().map(|&i| &samples.inputs[i]).collect();
            let v: Vec<&Vec<f64>> = m.iter().map(|&i| &input_var[i]).collect();
            let y: Vec<&Vec<f64>> = m.iter().map(|&i| &targets[i]).collect();
            fits[s] = ridge_fit(&x, &v, &y).map(|(b, var)| (b, var.iter().map(|v| (v * scale).max(MIN_VAR)).collect()));
        }
        for (i, &(n, r)) in samples.at.iter().enumerate() {
            let Some((b, prior_var)) = &fits[labels[i]] else {
                continue;
            };
            for (a, slot) in sequences[n].w_log_var.row_slice_mut(r).iter_mut().enumerate() {
                let lag_prec: f64 = (0..nl)
                    .map(|l| (0..k).map(|j| scale * b[(l * k + a, j)].powi(2) / prior_var[j]).sum::<f64>())
                    .sum();
                let prec = 1.0 / obs_var[i][a] + 1.0 / prior_var[a] + lag_prec;
                *slot = R::lit(-prec.ln());
            }
        }
    }
    for (s, fit) in fits.iter().enumerate() {
        let Some((b, prior_var)) = fit else {
            continue;
        };
        for l in 0..nl {
            let coef = Tensor::matrix(k, k, (0..k * k).map(|i| R::lit(b[(l * k + i / k, i % k)])).collect())?;
            *theta.tensor_mut(idx.var_coef(s, l)) = coef;
        }
        *theta.tensor_mut(idx.var_bias(s)) = Tensor::row((0..k).map(|j| R::lit(b[(nl * k, j)])).collect());
        *theta.tensor_mut(idx.logvar_bias(s)) = Tensor::row(prior_var.iter().map(|v| R::lit(v.ln())).collect());
    }
    Ok(())
}
