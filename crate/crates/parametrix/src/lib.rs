//! Transition densities for small-time Markov chains and their diffusion
//! limits, computed through parametrix series.
//!
//! The crate is organised around one pipeline:
//!
//! * [`model`] describes a drift/diffusion pair together with the innovation
//!   law of the approximating chain, and checks the standing assumptions
//!   (mean-zero innovations, uniform ellipticity, envelope domination,
//!   coefficient smoothness) at runtime.
//! * [`frozen`] evaluates the Gaussian density obtained by freezing the
//!   coefficients at the terminal point, its spatial derivatives, and the
//!   perturbation kernels built from them.
//! * [`series`] sums space-time convolutions of the frozen density against
//!   those kernels to produce the diffusion transition density.
//! * [`chain`] does the discrete analogue: one-step densities, the
//!   Chapman-Kolmogorov grid recursion, frozen-chain closed forms, and the
//!   discrete convolution series, including the correction terms that
//!   resolve the chain/diffusion gap at order `h`.
//! * [`metrics`] holds the polynomial weights, Gaussian/fat-tailed
//!   envelopes, weighted sup errors and the log-log rate fit used by the
//!   convergence experiments.
//!
//! Runnable entry points live in `examples/` (one per capability) and in a
//! thin `parametrix` binary that exposes the same experiments as
//! subcommands producing CSV/JSON artifacts.

// Numerics idioms kept on purpose: `!(v > 0.0)` rejects NaN where `v <= 0.0`
// would accept it; index loops mirror the tensor-grid arithmetic they walk;
// the flagged signatures/tuples are internal plumbing not worth newtypes.
#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop,
    clippy::type_complexity,
    clippy::manual_is_multiple_of,
    clippy::too_many_arguments
)]

pub mod chain;
pub mod config;
pub mod error;
pub mod experiments;
pub mod frozen;
pub mod grid;
pub mod metrics;
pub mod model;
pub mod quad;
pub mod series;

pub use error::{Error, Result};
