//! Discrete Hamel variational integrator.
//!
//! The discrete Lagrangian is the midpoint rule applied to
//! `l(Ω, Γ) = ½⟨I Ω, Ω⟩ - m g r Γ³`. The resulting update lives on a
//! staggered grid: `Γ` is sampled at half-integer nodes `(k + ½) h` and `Ω`
//! on the intervals `[k h, (k + 1) h]`, so both describe the motion at the
//! same instant `(k + ½) h`. One step solves
//!
//! ```text
//! Ω⁺¹ - Ω⁻¹ =  (h g / 2r) (Γ⁺² + Γ⁻²)
//! Ω⁺² - Ω⁻² = -(h g / 2r) (Γ⁺¹ + Γ⁻¹)
//! Γ⁺ - Γ⁻   =  h · ½(Γ⁺ + Γ⁻) × ½(Ω⁺ + Ω⁻)
//! ```
//!
//! for `(Γ⁺, Ω⁺)`. The last line is equivalent to `Γ⁺ = cay(-(h/4) (Ω⁺ + Ω⁻)^) Γ⁻`,
//! an orthogonal map, so `‖Γ‖` is preserved for any iterate of `Ω⁺`. Energy
//! `½ m r² |Ω⁺|² + m g r Γ⁺³` and the vertical momentum
//! `m r² (Γ⁺¹Ω⁺¹ + Γ⁺²Ω⁺²)` are conserved exactly by solutions of the system.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{hat, solve3, Matrix3, Vector3};
use crate::model::{body_energy, body_momentum, BodyState, PendulumParams};

/// How the implicit step equations are solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverMode {
    /// Alternate the Cayley reconstruction and the explicit momentum update.
    #[default]
    FixedPoint,
    /// Newton's method on the five component equations.
    Newton,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Bound on the infinity norm of the change between successive iterates,
    /// relative to `max(1, ‖iterate‖∞)`.
    pub tolerance: f64,
    pub max_iterations: usize,
    pub mode: SolverMode,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-14,
            max_iterations: 50,
            mode: SolverMode::FixedPoint,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance.is_finite() && self.tolerance > 0.0) {
            return Err(Error::invalid(
                "tolerance",
                format!("must be positive, got {}", self.tolerance),
            ));
        }
        if self.max_iterations == 0 {
            return Err(Error::invalid("max_iterations", "must be at least 1"));
        }
        Ok(())
    }
}

/// Discrete state `(Γ_{k+½}, Ω_{k,k+1})`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HalfStepState {
    gamma_half: Vector3,
    omega_mid: Vector3,
    k: usize,
    h: f64,
    iterations: usize,
    residual: f64,
}

impl HalfStepState {
    /// Builds a state directly from its discrete components, at index 0.
    pub fn from_parts(gamma_half: Vector3, omega_mid: Vector3, h: f64) -> Result<Self> {
        validate_step(h)?;
        if !(gamma_half.is_finite() && omega_mid.is_finite()) {
            return Err(Error::invalid("state", "components must be finite"));
        }
        if omega_mid[2] != 0.0 {
            return Err(Error::invalid("omega", "third component must be zero"));
        }
        Ok(Self {
            gamma_half,
            omega_mid,
            k: 0,
            h,
            iterations: 0,
            residual: 0.0,
        })
    }

    pub fn gamma_half(&self) -> Vector3 {
        self.gamma_half
    }

    pub fn omega_mid(&self) -> Vector3 {
        self.omega_mid
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    /// Iterations used by the solve that produced this state.
    pub fn iterations(&self) -> usize {
        self.iterations
    }

    /// Size of the final iterate update of that solve.
    pub fn residual(&self) -> f64 {
        self.residual
    }

    /// The instant `(k + ½) h` both components refer to.
    pub fn time(&self) -> f64 {
        (self.k as f64 + 0.5) * self.h
    }

    pub fn energy(&self, params: &PendulumParams) -> f64 {
        body_energy(params, self.gamma_half, self.omega_mid)
    }

    pub fn vertical_momentum(&self, params: &PendulumParams) -> f64 {
        body_momentum(params, self.gamma_half, self.omega_mid)
    }

    /// The same discrete state with angular velocity reversed; stepping it
    /// forward retraces the original trajectory backwards.
    pub fn reversed(&self) -> Self {
        Self {
            omega_mid: -self.omega_mid + Vector3::ZERO,
            ..*self
        }
    }

    /// Body state carried by this discrete state (no renormalization).
    pub fn as_body_state(&self) -> BodyState {
        BodyState::from_parts(self.gamma_half, self.omega_mid)
    }
}

fn validate_step(h: f64) -> Result<()> {
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::invalid("h", format!("must be positive, got {h}")));
    }
    Ok(())
}

/// `Γ⁺` from the reconstruction equation, i.e. `cay(-(h/4)(ω_prev + ω_new)^) Γ⁻`.
///
/// Solved as `(I + B) Γ⁺ = (I - B) Γ⁻` with `B = (h/4) hat(ω_prev + ω_new)`.
pub fn cayley_update(
    omega_prev: Vector3,
    omega_new: Vector3,
    gamma_prev_half: Vector3,
    h: f64,
) -> Vector3 {
    let b = hat((omega_prev + omega_new).scale(0.25 * h));
    let rhs = (Matrix3::IDENTITY - b).mul_vec(gamma_prev_half);
    // I + B has determinant 1 + |b|² >= 1 for skew B.
    solve3(&(Matrix3::IDENTITY + b), rhs).expect("I + B is nonsingular for skew-symmetric B")
}

/// `Ω⁺` from the discrete momentum equations given both half-node verticals.
fn momentum_update(
    params: &PendulumParams,
    omega_prev: Vector3,
    gamma_prev: Vector3,
    gamma_new: Vector3,
    h: f64,
) -> Vector3 {
    let c = 0.5 * h * params.frequency_squared();
    Vector3::new(
        omega_prev[0] + c * (gamma_new[1] + gamma_prev[1]),
        omega_prev[1] - c * (gamma_new[0] + gamma_prev[0]),
        0.0,
    )
}

/// Largest absolute residual of the five component equations linking two
/// consecutive discrete states, each equation divided through by `h`.
pub fn step_residual(params: &PendulumParams, prev: &HalfStepState, next: &HalfStepState) -> f64 {
    let h = next.h;
    let (gm, gp) = (prev.gamma_half, next.gamma_half);
    let (wm, wp) = (prev.omega_mid, next.omega_mid);
    let c = 0.5 * params.frequency_squared();
    let gbar = (gp + gm).scale(0.5);
    let wbar = (wp + wm).scale(0.5);
    let rec = (gp - gm).scale(1.0 / h) - gbar.cross(wbar);
    let r1 = (wp[0] - wm[0]) / h - c * (gp[1] + gm[1]);
    let r2 = (wp[1] - wm[1]) / h + c * (gp[0] + gm[0]);
    rec.max_abs().max(r1.abs()).max(r2.abs())
}

/// Advances `(Γ_{k-½}, Ω_{k-1,k})` to `(Γ_{k+½}, Ω_{k,k+1})`.
pub fn step(
    params: &PendulumParams,
    s: &HalfStepState,
    cfg: &SolverConfig,
) -> Result<HalfStepState> {
    cfg.validate()?;
    let (gamma, omega, iterations, residual) = match cfg.mode {
        SolverMode::FixedPoint => solve_fixed_point(params, s, cfg)?,
        SolverMode::Newton => solve_newton(params, s, cfg)?,
    };
    Ok(HalfStepState {
        gamma_half: gamma,
        omega_mid: omega,
        k: s.k + 1,
        h: s.h,
        iterations,
        residual,
    })
}

fn converged(delta: f64, scale: f64, cfg: &SolverConfig) -> bool {
    delta <= cfg.tolerance * scale.max(1.0)
}

fn solve_fixed_point(
    params: &PendulumParams,
    s: &HalfStepState,
    cfg: &SolverConfig,
) -> Result<(Vector3, Vector3, usize, f64)> {
    let (gamma_prev, omega_prev, h) = (s.gamma_half, s.omega_mid, s.h);
    let mut omega = omega_prev;
    let mut gamma = gamma_prev;
    let mut delta = f64::INFINITY;

    for iteration in 1..=cfg.max_iterations {
        let gamma_next = cayley_update(omega_prev, omega, gamma_prev, h);
        let omega_next = momentum_update(params, omega_prev, gamma_prev, gamma_next, h);
        delta = (omega_next - omega)
            .max_abs()
            .max((gamma_next - gamma).max_abs());
        let scale = omega_next.max_abs().max(gamma_next.max_abs());
        gamma = gamma_next;
        omega = omega_next;
        if converged(delta, scale, cfg) {
            // Γ from the final Ω iterate keeps both halves of the pair in step.
            let gamma = cayley_update(omega_prev, omega, gamma_prev, h);
            return Ok((gamma, omega, iteration, delta));
        }
    }
    Err(Error::Diverged {
        iterations: cfg.max_iterations,
        residual: delta,
    })
}

fn solve_newton(
    params: &PendulumParams,
    s: &HalfStepState,
    cfg: &SolverConfig,
) -> Result<(Vector3, Vector3, usize, f64)> {
    let (gm, wm, h) = (s.gamma_half, s.omega_mid, s.h);
    let c = 0.5 * h * params.frequency_squared();
    // Unknowns z = (Ω⁺¹, Ω⁺², Γ⁺¹, Γ⁺², Γ⁺³).
    let mut z = [wm[0], wm[1], gm[0], gm[1], gm[2]];
    let mut delta = f64::INFINITY;

    for iteration in 1..=cfg.max_iterations {
        let wp = Vector3::new(z[0], z[1], 0.0);
        let gp = Vector3::new(z[2], z[3], z[4]);
        let gbar = (gp + gm).scale(0.5);
        let wbar = (wp + wm).scale(0.5);
        let rec = gp - gm - gbar.cross(wbar).scale(h);
        let residual = [
            wp[0] - wm[0] - c * (gp[1] + gm[1]),
            wp[1] - wm[1] + c * (gp[0] + gm[0]),
            rec[0],
            rec[1],
            rec[2],
        ];
        let hh = 0.5 * h;
        let jacobian = [
            [1.0, 0.0, 0.0, -c, 0.0],
            [0.0, 1.0, c, 0.0, 0.0],
            [0.0, hh * gbar[2], 1.0, 0.0, hh * wbar[1]],
            [-hh * gbar[2], 0.0, 0.0, 1.0, -hh * wbar[0]],
            [
                hh * gbar[1],
                -hh * gbar[0],
                -hh * wbar[1],
                hh * wbar[0],
                1.0,
            ],
        ];
        let dz = solve_dense(jacobian, residual).ok_or(Error::Singular { pivot: 0.0 })?;
        for (zi, dzi) in z.iter_mut().zip(dz) {
            *zi -= dzi;
        }
        delta = dz.iter().fold(0.0_f64, |m, d| m.max(d.abs()));
        let scale = z.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if converged(delta, scale, cfg) {
            let omega = Vector3::new(z[0], z[1], 0.0);
            let gamma = cayley_update(wm, omega, gm, h);
            return Ok((gamma, omega, iteration, delta));
        }
    }
    Err(Error::Diverged {
        iterations: cfg.max_iterations,
        residual: delta,
    })
}

/// Dense Gaussian elimination with partial pivoting.
fn solve_dense<const N: usize>(mut a: [[f64; N]; N], mut b: [f64; N]) -> Option<[f64; N]> {
    for col in 0..N {
        let pivot_row = (col..N).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot_row][col].abs() < crate::geometry::SINGULAR_PIVOT {
            return None;
        }
        a.swap(col, pivot_row);
        b.swap(col, pivot_row);
        for row in col + 1..N {
            let factor = a[row][col] / a[col][col];
            for k in col..N {
                a[row][k] -= factor * a[col][k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = [0.0; N];
    for row in (0..N).rev() {
        let tail: f64 = (row + 1..N).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - tail) / a[row][row];
    }
    Some(x)
}

/// Builds the first discrete state `(Γ_{½}, Ω_{0,1})` from continuous data
/// `(Γ₀, Ω₀)` at `t = 0`.
///
/// A pre-initial state is constructed around `t = 0`: `Γ_{-½}` is `Γ₀` rotated
/// back by the half-step Cayley rotation generated by `Ω₀`, and `Ω_{-1,0}` is
/// chosen so that `½(Ω_{-1,0} + Ω_{0,1}) = Ω₀`. One ordinary step from it then
/// yields the returned state.
pub fn init_state(
    params: &PendulumParams,
    gamma0: Vector3,
    omega0: Vector3,
    h: f64,
    cfg: &SolverConfig,
) -> Result<HalfStepState> {
    validate_step(h)?;
    let start = BodyState::new(gamma0, omega0)?;
    let (gamma0, omega0) = (start.gamma(), start.omega());

    // A forward half step with constant Ω₀ is cay(-(h/4) Ω₀^); undo it.
    let gamma_before = cayley_update(-omega0, Vector3::ZERO, gamma0, h);
    // With Ω_{-1,0} + Ω_{0,1} = 2Ω₀ the reconstruction is explicit.
    let gamma_after = cayley_update(omega0, omega0, gamma_before, h);
    let omega_after = momentum_update(params, omega0, gamma_before, gamma_after, 0.5 * h);
    let omega_before = Vector3::new(
        2.0 * omega0[0] - omega_after[0],
        2.0 * omega0[1] - omega_after[1],
        0.0,
    );

    let pre = HalfStepState::from_parts(gamma_before, omega_before, h)?;
    let first = step(params, &pre, cfg)?;
    Ok(HalfStepState { k: 0, ..first })
}

/// Iterates [`step`] `n_steps` times; the result has `n_steps + 1` entries.
pub fn run(
    params: &PendulumParams,
    init: &HalfStepState,
    n_steps: usize,
    cfg: &SolverConfig,
) -> Result<Vec<HalfStepState>> {
    let mut trajectory = Vec::with_capacity(n_steps + 1);
    trajectory.push(*init);
    let mut current = *init;
    for i in 0..n_steps {
        current = step(params, &current, cfg).map_err(|e| e.at_step(i + 1))?;
        trajectory.push(current);
    }
    Ok(trajectory)
}
