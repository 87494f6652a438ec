//! Physical model of the spherical pendulum.
//!
//! The pendulum is treated as a degenerate rigid body rotating about the
//! pivot, with inertia `diag(m r², m r², 0)` in a body frame whose third axis
//! points along the rod. The state is the spatial vertical expressed in the
//! body frame (`gamma`) together with the body angular velocity (`omega`,
//! third component identically zero). The constrained formulations instead
//! use the bob position `x` and linear momentum `p` in the spatial frame.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Matrix3, Vector3};

/// Default admission tolerance on `| ‖gamma‖ - 1 |`.
pub const GAMMA_ADMISSION_TOL: f64 = 1e-6;

/// Mass (kg), rod length (m) and gravitational acceleration (m/s²).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PendulumParams {
    mass: f64,
    length: f64,
    gravity: f64,
}

impl PendulumParams {
    pub fn new(mass: f64, length: f64, gravity: f64) -> Result<Self> {
        if !(mass.is_finite() && mass > 0.0) {
            return Err(Error::invalid(
                "mass",
                format!("must be positive, got {mass}"),
            ));
        }
        if !(length.is_finite() && length > 0.0) {
            return Err(Error::invalid(
                "length",
                format!("must be positive, got {length}"),
            ));
        }
        if !(gravity.is_finite() && gravity >= 0.0) {
            return Err(Error::invalid(
                "gravity",
                format!("must be non-negative, got {gravity}"),
            ));
        }
        Ok(Self {
            mass,
            length,
            gravity,
        })
    }

    /// m = 1 kg, r = 9.8 m, g = 9.8 m/s².
    pub fn reference() -> Self {
        Self {
            mass: 1.0,
            length: 9.8,
            gravity: 9.8,
        }
    }

    pub fn mass(&self) -> f64 {
        self.mass
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn gravity(&self) -> f64 {
        self.gravity
    }

    /// Moment of inertia about either transverse body axis, m r².
    pub fn inertia(&self) -> f64 {
        self.mass * self.length * self.length
    }

    /// g / r, the squared small-oscillation frequency.
    pub fn frequency_squared(&self) -> f64 {
        self.gravity / self.length
    }
}

/// Body-frame state `(gamma, omega)` with `omega[2] == 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BodyState {
    gamma: Vector3,
    omega: Vector3,
}

impl BodyState {
    pub fn new(gamma: Vector3, omega: Vector3) -> Result<Self> {
        Self::with_tolerance(gamma, omega, GAMMA_ADMISSION_TOL)
    }

    /// Admits `gamma` whose norm lies within `tol` of one. The norm is not
    /// renormalized: the dynamics transports whatever length it is given.
    pub fn with_tolerance(gamma: Vector3, omega: Vector3, tol: f64) -> Result<Self> {
        if !gamma.is_finite() {
            return Err(Error::invalid("gamma", "components must be finite"));
        }
        if !omega.is_finite() {
            return Err(Error::invalid("omega", "components must be finite"));
        }
        if omega[2] != 0.0 {
            return Err(Error::invalid(
                "omega",
                format!("third component must be zero, got {}", omega[2]),
            ));
        }
        let norm = gamma.norm();
        if (norm - 1.0).abs() > tol {
            return Err(Error::invalid(
                "gamma",
                format!("norm {norm} is not within {tol:e} of 1"),
            ));
        }
        Ok(Self { gamma, omega })
    }

    /// Hanging equilibrium `gamma = -e3`, `omega = 0`.
    pub fn equilibrium() -> Self {
        Self {
            gamma: -Vector3::E3,
            omega: Vector3::ZERO,
        }
    }

    pub(crate) fn from_parts(gamma: Vector3, omega: Vector3) -> Self {
        debug_assert!(omega[2] == 0.0);
        Self { gamma, omega }
    }

    pub fn gamma(&self) -> Vector3 {
        self.gamma
    }

    pub fn omega(&self) -> Vector3 {
        self.omega
    }

    /// `(Ω¹, Ω², Γ¹, Γ², Γ³)`.
    pub fn components(&self) -> [f64; 5] {
        [
            self.omega[0],
            self.omega[1],
            self.gamma[0],
            self.gamma[1],
            self.gamma[2],
        ]
    }
}

/// Time derivative of a [`BodyState`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BodyRate {
    pub omega_dot: Vector3,
    pub gamma_dot: Vector3,
}

/// Bob position (m) and linear momentum (kg·m/s) in the spatial frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmbeddedState {
    pub x: Vector3,
    pub p: Vector3,
}

impl EmbeddedState {
    pub fn new(x: Vector3, p: Vector3) -> Self {
        Self { x, p }
    }

    /// Hanging equilibrium `x = -r e3`, `p = 0`.
    pub fn equilibrium(params: &PendulumParams) -> Self {
        Self {
            x: Vector3::new(0.0, 0.0, -params.length()),
            p: Vector3::ZERO,
        }
    }

    /// Checks the length constraint and the hidden constraint `x·p = 0`,
    /// both relative to the natural scales r² and r·‖p‖.
    pub fn check_admissible(&self, params: &PendulumParams, tol: f64) -> Result<()> {
        if !(self.x.is_finite() && self.p.is_finite()) {
            return Err(Error::invalid("state", "components must be finite"));
        }
        let r = params.length();
        let phi = constraint(self.x, r);
        if phi.abs() > tol * r * r {
            return Err(Error::invalid(
                "x",
                format!("length constraint violated by {phi:e}"),
            ));
        }
        let hidden = self.x.dot(self.p);
        if hidden.abs() > tol * r * self.p.norm().max(1.0) {
            return Err(Error::invalid(
                "p",
                format!("hidden constraint x·p violated by {hidden:e}"),
            ));
        }
        Ok(())
    }
}

/// U = m g r Γ³.
pub fn potential(params: &PendulumParams, gamma: Vector3) -> f64 {
    params.mass() * params.gravity() * params.length() * gamma[2]
}

fn kinetic(params: &PendulumParams, omega: Vector3) -> f64 {
    0.5 * params.inertia() * (omega[0] * omega[0] + omega[1] * omega[1])
}

/// E = ½ m r² ((Ω¹)² + (Ω²)²) + m g r Γ³.
pub fn energy(params: &PendulumParams, s: &BodyState) -> f64 {
    body_energy(params, s.gamma, s.omega)
}

pub(crate) fn body_energy(params: &PendulumParams, gamma: Vector3, omega: Vector3) -> f64 {
    kinetic(params, omega) + potential(params, gamma)
}

/// Vertical component of spatial angular momentum, J = m r² (Γ¹Ω¹ + Γ²Ω²).
pub fn vertical_momentum(params: &PendulumParams, s: &BodyState) -> f64 {
    body_momentum(params, s.gamma, s.omega)
}

pub(crate) fn body_momentum(params: &PendulumParams, gamma: Vector3, omega: Vector3) -> f64 {
    params.inertia() * (gamma[0] * omega[0] + gamma[1] * omega[1])
}

/// Right-hand side of the five-dimensional body equations:
///
/// ```text
/// Ω̇¹ = (g/r) Γ²      Γ̇¹ = -Ω² Γ³
/// Ω̇² = -(g/r) Γ¹     Γ̇² =  Ω¹ Γ³
///                    Γ̇³ =  Ω² Γ¹ - Ω¹ Γ²
/// ```
pub fn continuous_rhs(params: &PendulumParams, s: &BodyState) -> BodyRate {
    rhs_parts(params, s.gamma, s.omega)
}

pub(crate) fn rhs_parts(params: &PendulumParams, gamma: Vector3, omega: Vector3) -> BodyRate {
    let w2 = params.frequency_squared();
    BodyRate {
        omega_dot: Vector3::new(w2 * gamma[1], -w2 * gamma[0], 0.0),
        gamma_dot: gamma.cross(omega),
    }
}

/// Holonomic length constraint ½(‖x‖² - r²).
pub fn constraint(x: Vector3, r: f64) -> f64 {
    0.5 * (x.norm_squared() - r * r)
}

/// Total energy of an embedded state, ‖p‖²/(2m) + m g x³.
pub fn embedded_energy(params: &PendulumParams, s: &EmbeddedState) -> f64 {
    s.p.norm_squared() / (2.0 * params.mass()) + params.mass() * params.gravity() * s.x[2]
}

/// Vertical angular momentum x¹p² - x²p¹.
pub fn embedded_momentum(s: &EmbeddedState) -> f64 {
    s.x[0] * s.p[1] - s.x[1] * s.p[0]
}

/// Rotation axis used when `gamma` points straight down and the minimal
/// rotation onto `e3` is not unique.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AntipodalAxis {
    #[default]
    E1,
    E2,
}

/// Maps a body state to the spatial `(x, p)` picture.
///
/// The attitude `R` is a rotation taking the (unit) vertical direction
/// `gamma` to `e3`, so that `Rᵀ e3 = gamma`; then `x = r R e3` and
/// `p = m r R (Ω × e3)`. If `‖gamma‖` differs from one, its horizontal part is
/// rescaled onto the unit sphere keeping `Γ³`, so that `x³ = r Γ³` and the
/// potential energy carries over exactly.
pub fn embed(params: &PendulumParams, s: &BodyState) -> EmbeddedState {
    embed_with_axis(params, s, AntipodalAxis::E1)
}

pub fn embed_with_axis(
    params: &PendulumParams,
    s: &BodyState,
    axis: AntipodalAxis,
) -> EmbeddedState {
    let rot = attitude(project_to_sphere(s.gamma), axis);
    let r = params.length();
    let x = rot.column(2).scale(r);
    let p = rot
        .mul_vec(s.omega.cross(Vector3::E3))
        .scale(params.mass() * r);
    EmbeddedState { x, p }
}

fn project_to_sphere(gamma: Vector3) -> Vector3 {
    let vertical = gamma[2].clamp(-1.0, 1.0);
    let horizontal = gamma[0].hypot(gamma[1]);
    if horizontal == 0.0 {
        return Vector3::new(0.0, 0.0, vertical.signum());
    }
    let scale = (1.0 - vertical * vertical).sqrt() / horizontal;
    Vector3::new(gamma[0] * scale, gamma[1] * scale, vertical)
}

/// Rotation `R` with `R u = e3` for unit `u`.
///
/// The upper hemisphere uses the minimal rotation. The lower hemisphere first
/// applies the half turn selected by `axis`, which keeps `1 + c` away from zero
/// and makes the antipode map to that half turn itself.
fn attitude(u: Vector3, axis: AntipodalAxis) -> Matrix3 {
    if u[2] >= 0.0 {
        return minimal_attitude(u);
    }
    let flip = match axis {
        AntipodalAxis::E1 => Matrix3([[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]]),
        AntipodalAxis::E2 => Matrix3([[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]]),
    };
    minimal_attitude(flip.mul_vec(u)).mul_mat(&flip)
}

// Rodrigues form I + [v]x + [v]x² / (1 + c) with v = u × e3, written out so
// that the last row is exactly u.
fn minimal_attitude(u: Vector3) -> Matrix3 {
    let (a, b, c) = (u[0], u[1], u[2]);
    let d = 1.0 + c;
    Matrix3([
        [1.0 - a * a / d, -a * b / d, -a],
        [-a * b / d, 1.0 - b * b / d, -b],
        [a, b, c],
    ])
}
