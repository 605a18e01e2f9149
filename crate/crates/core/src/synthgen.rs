//! Synthetic benchmarks with known latents: a switching nonlinear VAR, the
//! Lorenz attractor and a double pendulum, observed through a random linear
//! projection.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numerics::{derive_seed, normal, rng_from_seed, uniform_vec, Tensor};
use crate::real::Real;

/// Observations plus the ground truth they were generated from.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticBundle<R> {
    pub observations: Dataset<R>,
    /// Per sequence, `T × K` true weights.
    pub weights: Vec<Tensor<R>>,
    /// Per sequence, 0-based regime labels; `None` when the system has no
    /// discrete regimes.
    pub states: Option<Vec<Vec<usize>>>,
    /// `K × D` projection.
    pub factors: Tensor<R>,
    pub meta: GeneratorInfo,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorInfo {
    pub system: String,
    pub seed: u64,
    pub params: Vec<(String, f64)>,
}

impl<R: Real> SyntheticBundle<R> {
    pub fn factor_count(&self) -> usize {
        self.factors.rows()
    }
}

const TOY_STAY: f64 = 0.95;

/// One step of the toy dynamics without noise. Regime 0 uses
/// `tanh(0.5·)`, `3 sin(·)`; regime 1 `tanh(0.2·)`, `sin(·)`.
pub fn toy_mean(state: usize, w1: &[f64], w2: &[f64], w3: &[f64]) -> Vec<f64> {
    let (a, c) = if state == 0 { (0.5, 3.0) } else { (0.2, 1.0) };
    (0..w1.len())
        .map(|k| 0.9 * w1[k] + (a * w2[k]).tanh() + c * w3[k].sin())
        .collect()
}

/// Switching nonlinear VAR(3) toy corpus: `N` sequences of `T` steps, two
/// regimes with self-transition 0.95, `K = 2`, factors `U(-1, 1)` and
/// observation noise of standard deviation 0.1.
///
/// Each sequence starts from three unrecorded `N(0, I)` weight vectors.
pub fn gen_toy<R: Real>(sequences: usize, steps: usize, dim: usize, seed: u64) -> Result<SyntheticBundle<R>> {
    if sequences == 0 || steps == 0 || dim == 0 {
        return Err(Error::InvalidArgument("toy corpus needs N, T, D ≥ 1".into()));
    }
    let k = 2;
    let noise_std = 0.1;
    let mut frng = rng_from_seed(derive_seed(seed, &[0]));
    let factors: Vec<f64> = uniform_vec(&mut frng, k * dim, -1.0, 1.0);
    let mut values = Vec::with_capacity(sequences * steps * dim);
    let mut weights = Vec::with_capacity(sequences);
    let mut states = Vec::with_capacity(sequences);
    for n in 0..sequences {
        let mut rng = rng_from_seed(derive_seed(seed, &[1, n as u64]));
        let mut hist: Vec<Vec<f64>> = (0..3).map(|_| (0..k).map(|_| normal(&mut rng)).collect()).collect();
        let mut s = usize::from(rand::Rng::random_bool(&mut rng, 0.5));
        let mut w_seq = Vec::with_capacity(steps * k);
        let mut s_seq = Vec::with_capacity(steps);
        for t in 0..steps {
            if t > 0 && !rand::Rng::random_bool(&mut rng, TOY_STAY) {
                s = 1 - s;
            }
            let h = hist.len();
            let mut w = toy_mean(s, &hist[h - 1], &hist[h - 2], &hist[h - 3]);
            for v in &mut w {
                *v += normal::<f64>(&mut rng);
            }
            for j in 0..dim {
                let clean: f64 = (0..k).map(|a| w[a] * factors[a * dim + j]).sum();
                values.push(R::lit(clean + noise_std * normal::<f64>(&mut rng)));
            }
            w_seq.extend(w.iter().map(|&v| R::lit(v)));
            s_seq.push(s);
            hist.push(w);
        }
        weights.push(Tensor::matrix(steps, k, w_seq)?);
        states.push(s_seq);
    }
    Ok(SyntheticBundle {
        observations: Dataset::dense(sequences, steps, dim, values)?,
        weights,
        states: Some(states),
        factors: Tensor::matrix(k, dim, factors.into_iter().map(R::lit).collect())?,
        meta: GeneratorInfo {
            system: "toy".into(),
            seed,
            params: vec![
                ("self_transition".into(), TOY_STAY),
                ("noise_std".into(), noise_std),
            ],
        },
    })
}

fn rk4<const N: usize>(f: impl Fn(&[f64; N]) -> Result<[f64; N]>, y: &[f64; N], dt: f64) -> Result<[f64; N]> {
    let shift = |a: &[f64; N], k: &[f64; N], h: f64| -> [f64; N] { std::array::from_fn(|i| a[i] + h * k[i]) };
    let k1 = f(y)?;
    let k2 = f(&shift(y, &k1, dt / 2.0))?;
    let k3 = f(&shift(y, &k2, dt / 2.0))?;
    let k4 = f(&shift(y, &k3, dt))?;
    Ok(std::array::from_fn(|i| y[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LorenzParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub dt: f64,
}

impl Default for LorenzParams {
    fn default() -> Self {
        Self {
            alpha: 10.0,
            beta: 28.0,
            gamma: 8.0 / 3.0,
            dt: 0.01,
        }
    }
}

pub fn lorenz_field(w: &[f64; 3], p: &LorenzParams) -> [f64; 3] {
    [
        p.alpha * (w[1] - w[0]),
        w[0] * (p.beta - w[2]) - w[1],
        w[0] * w[1] - p.gamma * w[2],
    ]
}

/// RK4 trajectory of `steps` points starting at `w0` (the first row), with
/// lobe labels `1` for `w1 ≥ 0` and `0` otherwise.
pub fn simulate_lorenz(steps: usize, p: &LorenzParams, w0: [f64; 3]) -> Result<(Vec<[f64; 3]>, Vec<usize>)> {
    if !(p.dt > 0.0) {
        return Err(Error::InvalidArgument("dt must be positive".into()));
    }
    let mut traj = Vec::with_capacity(steps);
    let mut w = w0;
    for t in 0..steps {
        if w.iter().any(|v| !(v.abs() <= 1e6)) {
            return Err(Error::SimulationDiverged(t));
        }
        traj.push(w);
        w = rk4(|y| Ok(lorenz_field(y, p)), &w, p.dt)?;
    }
    let labels = traj.iter().map(|w| usize::from(w[0] >= 0.0)).collect();
    Ok((traj, labels))
}

/// State reached after `steps` integration steps from `w0`; used to start
/// a recorded run on the attractor instead of in the initial transient.
pub fn lorenz_burn_in(steps: usize, p: &LorenzParams, w0: [f64; 3]) -> Result<[f64; 3]> {
    let (traj, _) = simulate_lorenz(steps + 1, p, w0)?;
    Ok(traj[steps])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PendulumParams {
    pub g: f64,
    pub dt: f64,
    /// Integration steps per recorded point.
    pub stride: usize,
}

impl Default for PendulumParams {
    fn default() -> Self {
        Self {
            g: 9.81,
            dt: 0.001,
            stride: 10,
        }
    }
}

/// Angular accelerations of the unit-length, unit-mass double pendulum at
/// `(θ1, θ2, θ̇1, θ̇2)`, from the 2×2 system
/// `[2 c; c 1]·[θ̈1; θ̈2] = [-θ̇2² s - 2g sin θ1; θ̇1² s - g sin θ2]`
/// with `c = cos(θ1-θ2)`, `s = sin(θ1-θ2)`.
pub fn pendulum_accel(y: &[f64; 4], g: f64) -> Result<[f64; 2]> {
    let (t1, t2, w1, w2) = (y[0], y[1], y[2], y[3]);
    let (s, c) = (t1 - t2).sin_cos();
    let det = 2.0 - c * c;
    if det.abs() < 1e-12 {
        return Err(Error::Singular("double pendulum mass matrix".into()));
    }
    let r1 = -w2 * w2 * s - 2.0 * g * t1.sin();
    let r2 = w1 * w1 * s - g * t2.sin();
    Ok([(r1 - c * r2) / det, (2.0 * r2 - c * r1) / det])
}

/// Total mechanical energy (unit lengths and masses).
pub fn pendulum_energy(y: &[f64; 4], g: f64) -> f64 {
    let (t1, t2, w1, w2) = (y[0], y[1], y[2], y[3]);
    let kinetic = w1 * w1 + 0.5 * w2 * w2 + w1 * w2 * (t1 - t2).cos();
    kinetic - 2.0 * g * t1.cos() - g * t2.cos()
}

/// Endpoint coordinates `(x1, y1, x2, y2)` with the pivot at the origin and
/// `y` pointing up.
pub fn pendulum_coords(y: &[f64; 4]) -> [f64; 4] {
    let (x1, y1) = (y[0].sin(), -y[0].cos());
    [x1, y1, x1 + y[1].sin(), y1 - y[1].cos()]
}

#[derive(Clone, Debug, PartialEq)]
pub struct PendulumTrajectory {
    /// `(θ1, θ2, θ̇1, θ̇2)` per recorded point.
    pub states: Vec<[f64; 4]>,
    pub coords: Vec<[f64; 4]>,
}

/// Records `steps` points, integrating `stride` RK4 steps of size `dt`
/// between consecutive points.
pub fn simulate_double_pendulum(steps: usize, p: &PendulumParams, init: [f64; 4]) -> Result<PendulumTrajectory> {
    if !(p.dt > 0.0) || p.stride == 0 {
        return Err(Error::InvalidArgument("dt and stride must be positive".into()));
    }
    let field = |y: &[f64; 4]| -> Result<[f64; 4]> {
        let a = pendulum_accel(y, p.g)?;
        Ok([y[2], y[3], a[0], a[1]])
    };
    let mut y = init;
    let mut out = PendulumTrajectory {
        states: Vec::with_capacity(steps),
        coords: Vec::with_capacity(steps),
    };
    for t in 0..steps {
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::SimulationDiverged(t));
        }
        out.states.push(y);
        out.coords.push(pendulum_coords(&y));
        for _ in 0..p.stride {
            y = rk4(field, &y, p.dt)?;
        }
    }
    Ok(out)
}

/// Draws `F ∼ U(-1, 1)^{K×D}` and returns `(W F + noise, F)`.
pub fn project<R: Real>(latent: &Tensor<R>, dim: usize, noise_std: f64, seed: u64) -> Result<(Tensor<R>, Tensor<R>)> {
    let k = latent.cols();
    if dim < k {
        return Err(Error::InvalidArgument(format!("cannot project K = {k} latents into D = {dim}")));
    }
    let mut rng = rng_from_seed(derive_seed(seed, &[0]));
    let factors = Tensor::matrix(k, dim, uniform_vec(&mut rng, k * dim, -1.0, 1.0))?;
    let x = project_with(latent, &factors, noise_std, seed)?;
    Ok((x, factors))
}

/// `W F` plus i.i.d. Gaussian noise of standard deviation `noise_std`.
pub fn project_with<R: Real>(latent: &Tensor<R>, factors: &Tensor<R>, noise_std: f64, seed: u64) -> Result<Tensor<R>> {
    let mut x = latent.matmul(factors)?;
    if noise_std > 0.0 {
        let mut rng = rng_from_seed(derive_seed(seed, &[1]));
        for v in x.data_mut() {
            *v += R::lit(noise_std * normal::<f64>(&mut rng));
        }
    }
    Ok(x)
}

fn single_sequence_bundle<R: Real>(
    latent: Tensor<R>,
    dim: usize,
    noise_std: f64,
    seed: u64,
    states: Option<Vec<usize>>,
    meta: GeneratorInfo,
) -> Result<SyntheticBundle<R>> {
    let steps = latent.rows();
    let (x, factors) = project(&latent, dim, noise_std, seed)?;
    Ok(SyntheticBundle {
        observations: Dataset::dense(1, steps, dim, x.into_data())?,
        weights: vec![latent],
        states: states.map(|s| vec![s]),
        factors,
        meta,
    })
}

/// Lorenz trajectory projected to `dim` observed channels.
pub fn lorenz_bundle<R: Real>(
    steps: usize,
    p: &LorenzParams,
    w0: [f64; 3],
    dim: usize,
    noise_std: f64,
    seed: u64,
) -> Result<SyntheticBundle<R>> {
    let (traj, labels) = simulate_lorenz(steps, p, w0)?;
    let latent = Tensor::matrix(steps, 3, traj.iter().flatten().map(|&v| R::lit(v)).collect())?;
    let meta = GeneratorInfo {
        system: "lorenz".into(),
        seed,
        params: vec![
            ("alpha".into(), p.alpha),
            ("beta".into(), p.beta),
            ("gamma".into(), p.gamma),
            ("dt".into(), p.dt),
            ("noise_std".into(), noise_std),
        ],
    };
    single_sequence_bundle(latent, dim, noise_std, seed, Some(labels), meta)
}

/// Double-pendulum endpoint coordinates projected to `dim` channels.
pub fn pendulum_bundle<R: Real>(
    steps: usize,
    p: &PendulumParams,
    init: [f64; 4],
    dim: usize,
    noise_std: f64,
    seed: u64,
) -> Result<SyntheticBundle<R>> {
    let traj = simulate_double_pendulum(steps, p, init)?;
    let latent = Tensor::matrix(steps, 4, traj.coords.iter().flatten().map(|&v| R::lit(v)).collect())?;
    let meta = GeneratorInfo {
        system: "pendulum".into(),
        seed,
        params: vec![
            ("g".into(), p.g),
            ("dt".into(), p.dt),
            ("stride".into(), p.stride as f64),
            ("noise_std".into(), noise_std),
        ],
    };
    single_sequence_bundle(latent, dim, noise_std, seed, None, meta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_shapes_and_factor_range() {
        let b = gen_toy::<f64>(4, 30, 10, 1).unwrap();
        assert_eq!(b.observations.sequences(), 4);
        assert_eq!(b.weights[0].shape(), &[30, 2]);
        assert!(b.factors.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(b.states.as_ref().unwrap().iter().flatten().all(|&s| s < 2));
    }

    #[test]
    fn lorenz_origin_is_fixed() {
        let (traj, _) = simulate_lorenz(50, &LorenzParams::default(), [0.0; 3]).unwrap();
        assert!(traj.iter().all(|w| *w == [0.0; 3]));
    }

    #[test]
    fn pendulum_rest_is_fixed() {
        let tr = simulate_double_pendulum(100, &PendulumParams::default(), [0.0; 4]).unwrap();
        assert_eq!(pendulum_accel(&[0.0; 4], 9.81).unwrap(), [0.0, 0.0]);
        assert!(tr.states.iter().all(|y| *y == [0.0; 4]));
        assert_eq!(tr.coords[0], [0.0, -1.0, 0.0, -2.0]);
    }

    #[test]
    fn identity_projection() {
        let w = Tensor::matrix(3, 2, vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let x = project_with(&w, &Tensor::identity(2), 0.0, 3).unwrap();
        assert_eq!(x, w);
    }
}
