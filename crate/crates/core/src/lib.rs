//! Stagewise feature learning in a minimal attention model.
//!
//! The crate ties together a synthetic order-`w` Markov task with position
//! groups of geometrically decaying importance, a one-layer attention model
//! trained on it, and the reduced gradient-flow dynamics that explain why the
//! groups are learned one after another.
//!
//! * [`markov`] builds the task and samples sequences.
//! * [`attention`] is the trainable model, its gradients and the optimizer.
//! * [`flow`] integrates the tensor-factorization gradient flows.
//! * [`theory`] checks fixed points, Lyapunov functions and convergence claims
//!   numerically and returns structured reports.
//! * [`harness`] runs experiments, probes, ablations and writes outputs.

pub mod attention;
pub mod error;
pub mod flow;
pub mod harness;
pub mod markov;
pub mod numerics;
pub mod rng;
pub mod theory;

pub use error::{Error, Result};

// The guide's code blocks run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/markov-task.md")]
    mod markov_task {}
    #[doc = include_str!("../../../book/src/attention-model.md")]
    mod attention_model {}
    #[doc = include_str!("../../../book/src/flows.md")]
    mod flows {}
    #[doc = include_str!("../../../book/src/checks.md")]
    mod checks {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
