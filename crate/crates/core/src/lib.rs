//! Deep switching auto-regressive factorization of spatio-temporal data.
//!
//! Observations `X_n ∈ R^{T×D}` are factorized as `X_n ≈ W_n F` with
//! shared spatial factors `F ∈ R^{K×D}` and per-sequence weights `W_n`
//! whose dynamics switch between `S` nonlinear auto-regressive regimes
//! driven by a hidden Markov chain. Everything is generic over the scalar
//! type ([`Real`], implemented for `f32` and `f64`); the `*64` aliases
//! below fix it to `f64`.

pub mod data;
pub mod error;
pub mod forecast;
pub mod generative;
pub mod inference;
pub mod numerics;
mod real;
pub mod synthgen;

pub use data::Dataset;
pub use error::{Error, Result};
pub use generative::{Activation, GaussianDiag, GenerativeParams, ModelConfig, StateBelief};
pub use inference::{InitStrategy, Model, TrainConfig, Trainer};
pub use real::Real;

pub type Dataset64 = data::Dataset<f64>;
pub type Tensor64 = numerics::Tensor<f64>;
pub type Model64 = inference::Model<f64>;
pub type Trainer64 = inference::Trainer<f64>;
pub type GenerativeParams64 = generative::GenerativeParams<f64>;
pub type Dataset32 = data::Dataset<f32>;
pub type Model32 = inference::Model<f32>;
