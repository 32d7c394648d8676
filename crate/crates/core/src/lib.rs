//! Simulation and analysis of the one-dimensional stochastic heat equation
//! `∂_t u = ½∂²_x u + σ(u)Ẇ` with degenerate multiplicative noise, and of
//! the absorption equation `∂_t u = ½∂²_x u − σ(u)`.

pub mod diagnostics;
pub mod error;
pub mod grid;
pub mod kernel;
pub mod kv;
pub mod noise;
pub mod nonlinearity;
pub mod pde;
pub mod quad;
pub mod spde;

pub use error::{Error, Result};
pub use grid::{Boundary, Field, GridConfig};
pub use noise::{NoiseMode, NoisePlan, NoiseRecord};
pub use nonlinearity::{Family, NonlinearitySpec};
pub use pde::{solve_deterministic, AbsorptionScheme};
pub use spde::{simulate, RunOptions, SnapshotSchedule, Trajectory};
