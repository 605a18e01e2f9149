use nalgebra::{DMatrix, SymmetricEigen};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::generative::{GaussianDiag, ModelConfig};
use crate::numerics::{linalg, normal_vec, rng_from_seed, Rng, Tensor};
use crate::real::Real;

/// How variational parameters are initialized before training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitStrategy {
    /// Weight means drawn from `N(0, 0.1²)`, factor means from `N(0, 1)`.
    Random,
    /// Factor means from the leading principal directions of the observed
    /// data; weight means from the masked ridge projection onto them, and
    /// the per-state dynamics fitted to those weights.
    Principal,
}

impl InitStrategy {
    pub fn name(self) -> &'static str {
        match self {
            InitStrategy::Random => "random",
            InitStrategy::Principal => "pca",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "random" => Some(InitStrategy::Random),
            "pca" | "principal" => Some(InitStrategy::Principal),
            _ => None,
        }
    }
}

pub(crate) const W_LOG_VAR_INIT: f64 = -2.0;
pub(crate) const F_LOG_VAR_INIT: f64 = -4.0;

/// Variational parameters of one sequence: a diagonal Gaussian per weight
/// vector over `t ∈ {-L, …, T-1}` (row `L + t`, `L` the largest lag) and
/// logits of `q(s_0)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SequencePosterior<R> {
    pub w_mean: Tensor<R>,
    pub w_log_var: Tensor<R>,
    pub s0_logits: Tensor<R>,
}

impl<R: Real> SequencePosterior<R> {
    pub fn steps(&self, max_lag: usize) -> usize {
        self.w_mean.rows() - max_lag
    }

    /// `q(w)` at row `row` (preamble rows first).
    pub fn weight_at(&self, row: usize) -> GaussianDiag<R> {
        GaussianDiag {
            mean: self.w_mean.row_slice(row).to_vec(),
            log_var: self.w_log_var.row_slice(row).to_vec(),
        }
    }

    pub fn random(cfg: &ModelConfig, steps: usize, rng: &mut Rng) -> Self {
        let rows = cfg.max_lag() + steps;
        let k = cfg.factors;
        let mean: Vec<R> = normal_vec(rng, rows * k);
        Self {
            w_mean: Tensor::matrix(rows, k, mean.into_iter().map(|x| x * R::lit(0.1)).collect()).unwrap(),
            w_log_var: Tensor::filled(rows, k, R::lit(W_LOG_VAR_INIT)),
            s0_logits: Tensor::zeros(1, cfg.states),
        }
    }

    /// Initializes each row at its posterior under a broad Gaussian prior
    /// centred on the previous row and the linear-Gaussian likelihood with
    /// factors `factors` (mean and marginal variances). Rows with nothing
    /// observed carry the previous mean forward at the prior variance; the
    /// preamble and any leading unobserved rows are extrapolated backward
    /// from the first two rows.
    pub fn projected(cfg: &ModelConfig, factors: &Tensor<R>, x: &[R], mask: &[bool]) -> Result<Self> {
        let (k, d) = (cfg.factors, cfg.dim);
        let steps = x.len() / d;
        let lag = cfg.max_lag();
        let mut mean = Tensor::zeros(lag + steps, k);
        let mut log_var = Tensor::filled(lag + steps, k, R::lit(W_LOG_VAR_INIT));
        let noise_var = R::lit(cfg.obs_noise * cfg.obs_noise);
        let prior_var = broad_prior_variance(x, mask, d);
        let mut prev: Option<Vec<R>> = None;
        let mut first = None;
        for t in 0..steps {
            let (xr, mr) = (&x[t * d..(t + 1) * d], &mask[t * d..(t + 1) * d]);
            let row = lag + t;
            if mr.iter().any(|&m| m) {
                let centre = prev.clone().unwrap_or_else(|| vec![R::zero(); k]);
                let (w, var) = ridge_projection(factors, xr, mr, noise_var, &centre, prior_var)?;
                mean.row_slice_mut(row).copy_from_slice(&w);
                for (slot, v) in log_var.row_slice_mut(row).iter_mut().zip(var) {
                    *slot = v.ln();
                }
                first.get_or_insert(row);
                prev = Some(w);
            } else {
                if let Some(p) = &prev {
                    mean.row_slice_mut(row).copy_from_slice(p);
                }
                log_var.row_slice_mut(row).fill(prior_var.ln());
            }
        }
        if let Some(f) = first {
            // Linear backcast from the first two rows keeps the preamble on the
            // local trend, so early lags do not look like a jump.
            let v = log_var.row_slice(f).to_vec();
            let step: Vec<R> = if f + 1 < lag + steps {
                mean.row_slice(f).iter().zip(mean.row_slice(f + 1)).map(|(&a, &b)| a - b).collect()
            } else {
                vec![R::zero(); k]
            };
            for row in (0..f).rev() {
                let next = mean.row_slice(row + 1).to_vec();
                for ((slot, n), dv) in mean.row_slice_mut(row).iter_mut().zip(next).zip(&step) {
                    *slot = n + *dv;
                }
                if row < lag {
                    log_var.row_slice_mut(row).copy_from_slice(&v);
                }
            }
        }
        Ok(Self {
            w_mean: mean,
            w_log_var: log_var,
            s0_logits: Tensor::zeros(1, cfg.states),
        })
    }
}

/// Prior variance for the initial projection: a hundred times the mean
/// observed row energy, so the prior barely shrinks well-observed rows.
fn broad_prior_variance<R: Real>(x: &[R], mask: &[bool], d: usize) -> R {
    let (sum, count) = x
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .fold((R::zero(), 0usize), |(s, c), (&v, _)| (s + v * v, c + 1));
    let energy = if count > 0 { sum / R::lit(count as f64) * R::lit(d as f64) } else { R::zero() };
    R::lit(100.0) * energy.max(R::one())
}

/// Posterior mean and marginal variances of `w` under a `N(centre, v I)`
/// prior and `x_o ~ N(F_oᵀ w, σ²)`.
fn ridge_projection<R: Real>(
    factors: &Tensor<R>,
    x: &[R],
    mask: &[bool],
    noise_var: R,
    centre: &[R],
    prior_var: R,
) -> Result<(Vec<R>, Vec<R>)> {
    let k = factors.rows();
    let mut prec = vec![R::zero(); k * k];
    let mut rhs = vec![R::zero(); k];
    for i in 0..k {
        prec[i * k + i] = R::one() / prior_var;
        rhs[i] = centre[i] / prior_var;
    }
    for (j, (&xv, &m)) in x.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        for a in 0..k {
            rhs[a] += factors.get(a, j) * xv / noise_var;
            for b in 0..k {
                prec[a * k + b] += factors.get(a, j) * factors.get(b, j) / noise_var;
            }
        }
    }
    let l = linalg::cholesky(&prec, k)?;
    let inv = linalg::cholesky_inverse(&l, k);
    Ok((linalg::cholesky_solve(&l, k, &rhs), (0..k).map(|i| inv[i * k + i]).collect()))
}

/// Variational parameters φ: corpus-global `q(z)`, `q(F)` and one
/// [`SequencePosterior`] per sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalParams<R> {
    pub z_mean: Tensor<R>,
    pub z_log_var: Tensor<R>,
    pub f_mean: Tensor<R>,
    pub f_log_var: Tensor<R>,
    pub sequences: Vec<SequencePosterior<R>>,
}

impl<R: Real> VariationalParams<R> {
    pub const GLOBAL_COUNT: usize = 4;
    pub const PER_SEQUENCE: usize = 3;

    pub fn init(cfg: &ModelConfig, data: &Dataset<R>, strategy: InitStrategy, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if data.dim() != cfg.dim {
            return Err(Error::InvalidConfig(format!(
                "dataset has D = {} but the model expects D = {}",
                data.dim(),
                cfg.dim
            )));
        }
        let mut rng = rng_from_seed(seed);
        let (k, d, z) = (cfg.factors, cfg.dim, cfg.latent_dim);
        let z_mean: Vec<R> = normal_vec(&mut rng, z);
        let z_mean = Tensor::row(z_mean.into_iter().map(|x| x * R::lit(0.1)).collect());
        let z_log_var = Tensor::filled(1, z, R::lit(W_LOG_VAR_INIT));
        let (f_mean, f_log_var, sequences) = match strategy {
            InitStrategy::Random => {
                let f = Tensor::matrix(k, d, normal_vec(&mut rng, k * d))?;
                let seqs = (0..data.sequences())
                    .map(|_| SequencePosterior::random(cfg, data.steps(), &mut rng))
                    .collect();
                (f, Tensor::filled(k, d, R::lit(F_LOG_VAR_INIT)), seqs)
            }
            InitStrategy::Principal => {
                let f = principal_factors(data, k, &mut rng)?;
                let seqs = (0..data.sequences())
                    .map(|n| {
                        let (x, m) = data.sequence(n);
                        SequencePosterior::projected(cfg, &f, x, m)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let f_log_var = factor_log_var(cfg, &seqs);
                (f, f_log_var, seqs)
            }
        };
        Ok(Self {
            z_mean,
            z_log_var,
            f_mean,
            f_log_var,
            sequences,
        })
    }

    pub fn global_names() -> [&'static str; 4] {
        ["q_z.mean", "q_z.log_var", "q_f.mean", "q_f.log_var"]
    }

    pub fn globals(&self) -> [&Tensor<R>; 4] {
        [&self.z_mean, &self.z_log_var, &self.f_mean, &self.f_log_var]
    }

    pub fn globals_mut(&mut self) -> [&mut Tensor<R>; 4] {
        [&mut self.z_mean, &mut self.z_log_var, &mut self.f_mean, &mut self.f_log_var]
    }

    /// Every tensor with its name, globals first, then per sequence.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<R>)> {
        let mut out: Vec<(String, &Tensor<R>)> = Self::global_names()
            .iter()
            .map(|n| n.to_string())
            .zip(self.globals())
            .collect();
        for (i, s) in self.sequences.iter().enumerate() {
            out.push((format!("seq{i}.w_mean"), &s.w_mean));
            out.push((format!("seq{i}.w_log_var"), &s.w_log_var));
            out.push((format!("seq{i}.s0_logits"), &s.s0_logits));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<R>> {
        let Self {
            z_mean,
            z_log_var,
            f_mean,
            f_log_var,
            sequences,
        } = self;
        let mut out: Vec<&mut Tensor<R>> = vec![z_mean, z_log_var, f_mean, f_log_var];
        for s in sequences {
            out.push(&mut s.w_mean);
            out.push(&mut s.w_log_var);
            out.push(&mut s.s0_logits);
        }
        out
    }
}

/// `log q(F)` variances from the conjugate posterior of each factor row given
/// the projected weights: `σ0² / (1 + Σ_{n,t} w_k²)`.
pub(super) fn factor_log_var<R: Real>(cfg: &ModelConfig, seqs: &[SequencePosterior<R>]) -> Tensor<R> {
    let k = cfg.factors;
    let mut energy = vec![R::one(); k];
    for s in seqs {
        for r in cfg.max_lag()..s.w_mean.rows() {
            for (e, &w) in energy.iter_mut().zip(s.w_mean.row_slice(r)) {
                *e += w * w;
            }
        }
    }
    let noise = R::lit(cfg.obs_noise * cfg.obs_noise);
    let mut out = Tensor::zeros(k, cfg.dim);
    for (a, e) in energy.into_iter().enumerate() {
        out.row_slice_mut(a).fill((noise / e).ln());
    }
    out
}

/// Top-`k` eigenvectors of the uncentered second-moment matrix of the
/// observed rows (missing cells imputed by column means), as unit-norm
/// rows so the projected weights stay in data units.
fn principal_factors<R: Real>(data: &Dataset<R>, k: usize, rng: &mut Rng) -> Result<Tensor<R>> {
    let d = data.dim();
    let mut sums = vec![0.0f64; d];
    let mut counts = vec![0usize; d];
    for (i, (&v, &m)) in data.values().iter().zip(data.mask()).enumerate() {
        if m {
            sums[i % d] += v.to_f64_lossy();
            counts[i % d] += 1;
        }
    }
    let col_mean: Vec<f64> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect();
    let rows = data.values().len() / d;
    let mut moment = DMatrix::<f64>::zeros(d, d);
    let mut row = vec![0.0f64; d];
    for r in 0..rows {
        for j in 0..d {
            let i = r * d + j;
            row[j] = if data.mask()[i] { data.values()[i].to_f64_lossy() } else { col_mean[j] };
        }
        for a in 0..d {
            for b in a..d {
                moment[(a, b)] += row[a] * row[b];
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            let v = moment[(a, b)] / rows.max(1) as f64;
            moment[(a, b)] = v;
            moment[(b, a)] = v;
        }
    }
    let eig = SymmetricEigen::new(moment);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut f = Tensor::zeros(k, d);
    for (c, slot) in (0..k).enumerate() {
        if c < d {
            let idx = order[c];
            for j in 0..d {
                f.set(slot, j, R::lit(eig.eigenvectors[(j, idx)]));
            }
        } else {
            let extra: Vec<R> = normal_vec(rng, d);
            for (j, v) in extra.into_iter().enumerate() {
                f.set(slot, j, v * R::lit(1e-2));
            }
        }
    }
    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn principal_init_reconstructs_low_rank_data() {
        let cfg = ModelConfig::new(2, 2, 4, vec![1, 2]);
        let mut rng = rng_from_seed(3);
        let w: Vec<f64> = normal_vec(&mut rng, 2 * 50);
        let f_true = [1.0, 0.5, -0.3, 0.2, -0.4, 1.0, 0.7, 0.1];
        let mut x = Vec::new();
        for t in 0..50 {
            for j in 0..4 {
                x.push(w[2 * t] * f_true[j] + w[2 * t + 1] * f_true[4 + j]);
            }
        }
        let data = Dataset::dense(1, 50, 4, x.clone()).unwrap();
        let mut cfg = cfg;
        cfg.obs_noise = 1e-4;
        let q = VariationalParams::init(&cfg, &data, InitStrategy::Principal, 1).unwrap();
        let s = &q.sequences[0];
        assert_eq!(s.w_mean.rows(), 52);
        // Preamble rows continue the trend of the first two observed rows.
        for row in [1, 0] {
            for c in 0..2 {
                let step = s.w_mean.get(row + 1, c) - s.w_mean.get(row + 2, c);
                assert!((s.w_mean.get(row, c) - s.w_mean.get(row + 1, c) - step).abs() < 1e-12);
            }
        }
        let pred = s.w_mean.matmul(&q.f_mean).unwrap();
        for t in 0..50 {
            for j in 0..4 {
                assert!((pred.get(t + 2, j) - x[t * 4 + j]).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn names_align_with_tensors() {
        let cfg = ModelConfig::new(2, 3, 3, vec![1]);
        let data = Dataset::dense(2, 5, 3, vec![0.5f64; 30]).unwrap();
        let mut q = VariationalParams::init(&cfg, &data, InitStrategy::Random, 9).unwrap();
        let shapes: Vec<Vec<usize>> = q.named_tensors().iter().map(|(_, t)| t.shape().to_vec()).collect();
        let names: Vec<String> = q.named_tensors().into_iter().map(|(n, _)| n).collect();
        let mut_shapes: Vec<Vec<usize>> = q.tensors_mut().iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, mut_shapes);
        assert_eq!(names[4], "seq0.w_mean");
        assert_eq!(shapes[4], vec![6, 2]);
        assert_eq!(shapes[6], vec![1, 3]);
    }
}
