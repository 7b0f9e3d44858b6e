//! Bregman alternating minimization.
//!
//! Solves composite problems of the form
//!
//! ```text
//! min  H(x_1, ..., x_n) + f_1(x_1) + ... + f_n(x_n)
//! ```
//!
//! with a single Gauss-Seidel engine. Every block update minimizes
//! `H(.., u, ..) + f_i(u) + B_phi(u, x_i^k)` for a per-block Bregman generator
//! `phi`, and the choice of generator decides which classical scheme runs:
//!
//! - zero generator: plain alternating minimization (AM),
//! - `(alpha/2)|u|^2 - H(.., u, ..)`: proximal linearized AM (PLAM),
//! - `(alpha/2)|u|^2`: augmented AM (AAM),
//! - any mix of the above across blocks (hybrids such as AM-PLAM).
//!
//! The [`diagnostics`] module turns the descent and convergence guarantees of
//! the scheme into runtime checks over an [`driver::IterateTrace`].

pub mod blockvec;
pub mod bregman;
pub mod cli;
pub mod diagnostics;
pub mod driver;
pub mod error;
pub mod problem;
pub mod prox;
pub(crate) mod rng;

pub use blockvec::BlockVector;
pub use bregman::BregmanGenerator;
pub use diagnostics::CheckReport;
pub use driver::{run, BlockStrategy, RunResult, RunStatus, SolverConfig};
pub use error::{BamError, Result};
pub use problem::Problem;
