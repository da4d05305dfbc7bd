//! Small dense-tensor autodiff kernel used by the interpreter-inspired models.
//!
//! Everything is `f64` and single threaded. A [`Graph`] records one forward
//! pass over values borrowed from a [`ParamStore`]; [`Graph::backward`]
//! returns [`Gradients`] keyed by parameter name.

mod error;
pub mod gradcheck;
mod graph;
pub mod lstm;
mod params;
mod tensor;

pub use error::{Error, Result};
pub use gradcheck::{grad_check, grad_check_extrapolated, grad_check_sampled, relative_error, value_and_grad, GradCheckReport};
pub use graph::{CustomOp, Graph, Var};
pub use lstm::{LstmSpec, LstmState};
pub use params::{sgd_step, Gradients, ParamStore, PARAMS_HEADER};
pub use tensor::Tensor;

/// Deterministic RNG used for initialisation throughout the workspace.
pub type Rng = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}
