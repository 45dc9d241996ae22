//! Fully discrete solver for deterministic mean field games with
//! control-affine dynamics.
//!
//! The pipeline is: describe the continuous game ([`problem`]), build the
//! reachable lattice sets ([`lattice`]), solve the entropy-regularized
//! dynamic programming recursion against a fixed population flow ([`hjb`]),
//! push the initial distribution through the resulting Markov kernels
//! ([`transport`]), and iterate best responses with fictitious play
//! ([`fixedpoint`]). [`analysis`] holds equilibrium diagnostics and
//! [`examples`] the two builtin games.

pub mod analysis;
pub mod error;
pub mod examples;
pub mod expr;
pub mod fixedpoint;
pub mod hjb;
pub mod io;
pub mod lattice;
pub mod problem;
pub mod quadrature;
pub mod transport;

pub use error::{MfgError, Result};
pub use fixedpoint::{fictitious_play, tolerance_schedule_run, FPReport, FPOptions};
pub use hjb::{backward_sweep, gibbs_step, TransitionKernel, ValuePolicy};
pub use lattice::{build_level_sets, LatticePoint, LevelSet, LevelSets};
pub use problem::{validate, Discretization, ProblemSpec};
pub use transport::{best_response, Flow, Scheme};
