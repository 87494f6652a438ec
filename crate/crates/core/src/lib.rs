//! Structure-preserving simulation of the spherical pendulum.
//!
//! The centerpiece is a discrete Hamel variational integrator that evolves
//! the body-frame vertical `Γ` and angular velocity `Ω` on a staggered grid
//! and reconstructs `Γ` with a Cayley rotation, so that `‖Γ‖`, the energy and
//! the vertical angular momentum are conserved by every step. RK4, a
//! generalized Störmer–Verlet scheme and RATTLE are provided as baselines,
//! together with drift diagnostics and a scenario runner.

pub mod diagnostics;
pub mod error;
pub mod geometry;
pub mod hamel;
pub mod model;
pub mod reference;
pub mod scenario;

pub use error::{Error, Result};
pub use geometry::{cayley, hat, solve3, Matrix3, Vector3};
pub use hamel::{HalfStepState, SolverConfig, SolverMode};
pub use model::{BodyState, EmbeddedState, PendulumParams};
