//! Reduced stochastic dynamics of a heat-conducting chain driven by two
//! Markovian reservoirs, and tools for the large deviations of its entropy
//! production.
//!
//! * [`model`]: potentials, phase points, heat flows, entropy production.
//! * [`dynamics`]: splitting and Euler-Maruyama integrators with work integrals.
//! * [`calculus`]: pointwise generator, adjoint and tilted operators.
//! * [`estimators`]: ergodic averages, cumulant generating function, rate function.
//! * [`oracle`]: exact Gaussian results for harmonic chains and a grid eigensolver.
//! * [`diagnostics`]: energy-shell return ratios, tracking and mixing times.
//! * [`streams`]: reproducible per-task random streams.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calculus;
pub mod diagnostics;
pub mod dynamics;
pub mod estimators;
pub mod model;
pub mod oracle;
pub mod streams;

pub use model::{ChainModel, ChainParams, Observable, PotentialSpec, State};
