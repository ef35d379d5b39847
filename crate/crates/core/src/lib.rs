//! Mean field equilibria of producers trading emission permits.
//!
//! Each producer controls the rate `τ` at which it abates its emission
//! level `E ∈ [E_min, E_max]`, pays for permits at a price `S(t)`, and
//! earns revenue that falls with the local density of competitors. The
//! equilibrium couples a backward adjoint equation for the value `v` with
//! a forward Kolmogorov equation for the density `m`.
//!
//! Both are discretised with an exponentially fitted finite volume scheme
//! in `E` and a θ-scheme in time, then coupled with a fixed-point loop:
//!
//! ```no_run
//! use permit_mfg::{solve_equilibrium, InitialDensity, ModelParams, PriceSchedule, SolverConfig};
//!
//! let sol = solve_equilibrium(
//!     &SolverConfig::default(),
//!     &ModelParams::default(),
//!     &PriceSchedule::default(),
//!     &InitialDensity::default(),
//! )
//! .unwrap();
//! println!("{} iterations, eps = {:e}", sol.iterations, sol.errors.last().unwrap());
//! ```

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod coupling;
pub mod error;
pub mod field;
pub mod fitted_fvm;
pub mod grid;
pub mod hjb;
pub mod kfp;
pub mod model;
pub mod validation;

pub use config::RunConfig;
pub use coupling::{
    solve_equilibrium, EquilibriumSolution, HjbControl, InitialControl, SolverConfig, Status,
};
pub use error::{Error, Result};
pub use field::{Control, Field, Quantity};
pub use fitted_fvm::{bernoulli, is_m_matrix, solve_tridiagonal, MMatrixReport, TridiagonalSystem};
pub use grid::{Grids, SpaceGrid, TimeGrid};
pub use kfp::DensityClosure;
pub use model::{InitialDensity, ModelParams, PriceSchedule};
