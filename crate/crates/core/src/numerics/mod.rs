//! Dense tensors, reverse-mode differentiation, Adam and seeded sampling.

mod adam;
pub mod linalg;
mod random;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamSlot, AdamState};
pub use random::{derive_seed, normal, normal_vec, rng_from_seed, sample_gaussian, uniform_vec, Rng};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{log_softmax, softmax, Tensor};

