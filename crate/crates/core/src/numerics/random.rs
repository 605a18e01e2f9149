use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use super::tensor::Tensor;
use crate::real::Real;

/// Seeded generator used throughout the crate.
pub type Rng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mixes a base seed with a sequence of tags into an independent stream seed.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut h = splitmix(base ^ 0x5EED_0F_D5A2F);
    for &t in tags {
        h = splitmix(h ^ splitmix(t.wrapping_add(0x9E37_79B9_7F4A_7C15)));
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn normal<R: Real>(rng: &mut Rng) -> R {
    let x: f64 = StandardNormal.sample(rng);
    R::lit(x)
}

pub fn normal_vec<R: Real>(rng: &mut Rng, n: usize) -> Vec<R> {
    (0..n).map(|_| normal(rng)).collect()
}

pub fn uniform_vec<R: Real>(rng: &mut Rng, n: usize, lo: f64, hi: f64) -> Vec<R> {
    let dist = Uniform::new_inclusive(lo, hi).expect("valid uniform bounds");
    (0..n).map(|_| R::lit(dist.sample(rng))).collect()
}

/// I.i.d. standard normal tensor; identical seeds give bit-identical output.
pub fn sample_gaussian<R: Real>(shape: &[usize], seed: u64) -> Tensor<R> {
    let mut rng = rng_from_seed(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), normal_vec(&mut rng, n)).expect("shape product matches")
}
