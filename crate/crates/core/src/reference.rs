//! Baseline integrators: classical RK4 on the body equations, the
//! generalized Störmer–Verlet scheme on the index-reduced embedded equations,
//! and RATTLE with the holonomic length constraint.
//!
//! The embedded formulations are written for a rod of length `r`:
//!
//! ```text
//! ẋ = p / m
//! ṗ = f(x, p) = -m g e3 + (m g x³ - ‖p‖²/m) x / r²
//! ```
//!
//! which is the unit-sphere system verbatim when `r = 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vector3;
use crate::hamel::{SolverConfig, SolverMode};
use crate::model::{constraint, rhs_parts, BodyState, EmbeddedState, PendulumParams};

/// Classical fourth-order Runge–Kutta step of the body equations.
pub fn rk4_step(params: &PendulumParams, s: &BodyState, h: f64) -> BodyState {
    let (g, w) = (s.gamma(), s.omega());
    let k1 = rhs_parts(params, g, w);
    let k2 = rhs_parts(
        params,
        g + k1.gamma_dot * (0.5 * h),
        w + k1.omega_dot * (0.5 * h),
    );
    let k3 = rhs_parts(
        params,
        g + k2.gamma_dot * (0.5 * h),
        w + k2.omega_dot * (0.5 * h),
    );
    let k4 = rhs_parts(params, g + k3.gamma_dot * h, w + k3.omega_dot * h);
    let dg = k1.gamma_dot + k2.gamma_dot * 2.0 + k3.gamma_dot * 2.0 + k4.gamma_dot;
    let dw = k1.omega_dot + k2.omega_dot * 2.0 + k3.omega_dot * 2.0 + k4.omega_dot;
    BodyState::from_parts(g + dg * (h / 6.0), w + dw * (h / 6.0))
}

/// Index-reduced force `f(x, p)`.
pub fn sv_force(params: &PendulumParams, x: Vector3, p: Vector3) -> Vector3 {
    let (m, g, r) = (params.mass(), params.gravity(), params.length());
    let multiplier = (m * g * x[2] - p.norm_squared() / m) / (r * r);
    Vector3::new(0.0, 0.0, -m * g) + x * multiplier
}

/// Classical RK4 step of the index-reduced embedded equations.
pub fn rk4_embedded_step(params: &PendulumParams, s: &EmbeddedState, h: f64) -> EmbeddedState {
    let inv_m = 1.0 / params.mass();
    let f = |x: Vector3, p: Vector3| (p * inv_m, sv_force(params, x, p));
    let (k1x, k1p) = f(s.x, s.p);
    let (k2x, k2p) = f(s.x + k1x * (0.5 * h), s.p + k1p * (0.5 * h));
    let (k3x, k3p) = f(s.x + k2x * (0.5 * h), s.p + k2p * (0.5 * h));
    let (k4x, k4p) = f(s.x + k3x * h, s.p + k3p * h);
    EmbeddedState {
        x: s.x + (k1x + k2x * 2.0 + k3x * 2.0 + k4x) * (h / 6.0),
        p: s.p + (k1p + k2p * 2.0 + k3p * 2.0 + k4p) * (h / 6.0),
    }
}

/// Result of an implicit step with its solver statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub state: EmbeddedState,
    pub iterations: usize,
    pub residual: f64,
}

/// Generalized Störmer–Verlet step for the partitioned system.
///
/// ```text
/// p_{n+½} = p_n + (h/2) f(x_n, p_{n+½})
/// x_{n+1} = x_n + (h/m) p_{n+½}
/// p_{n+1} = p_{n+½} + (h/2) f(x_{n+1}, p_{n+½})
/// ```
pub fn sv_step(
    params: &PendulumParams,
    s: &EmbeddedState,
    h: f64,
    cfg: &SolverConfig,
) -> Result<EmbeddedState> {
    sv_step_report(params, s, h, cfg).map(|r| r.state)
}

pub fn sv_step_report(
    params: &PendulumParams,
    s: &EmbeddedState,
    h: f64,
    cfg: &SolverConfig,
) -> Result<StepReport> {
    cfg.validate()?;
    let (m, g, r) = (params.mass(), params.gravity(), params.length());
    let x = s.x;

    // p_{n+½} = a + β(σ) x with σ = ‖p_{n+½}‖², the only implicit quantity.
    let a = s.p + Vector3::new(0.0, 0.0, -0.5 * h * m * g);
    let beta = |sigma: f64| 0.5 * h * (m * g * x[2] - sigma / m) / (r * r);
    let half = |sigma: f64| a + x * beta(sigma);

    let mut sigma = s.p.norm_squared();
    let mut delta = f64::INFINITY;
    let mut iterations = 0;
    let mut done = false;
    for iteration in 1..=cfg.max_iterations {
        let next = match cfg.mode {
            SolverMode::FixedPoint => half(sigma).norm_squared(),
            SolverMode::Newton => {
                let b = beta(sigma);
                let db = -0.5 * h / (m * r * r);
                let resid = half(sigma).norm_squared() - sigma;
                let slope = 2.0 * db * (a.dot(x) + b * x.norm_squared()) - 1.0;
                sigma - resid / slope
            }
        };
        delta = (next - sigma).abs();
        sigma = next;
        iterations = iteration;
        if delta <= cfg.tolerance * sigma.max(1.0) {
            done = true;
            break;
        }
    }
    if !done {
        return Err(Error::Diverged {
            iterations: cfg.max_iterations,
            residual: delta,
        });
    }

    let p_half = half(sigma);
    let x_next = x + p_half * (h / m);
    let p_next = p_half + sv_force(params, x_next, p_half) * (0.5 * h);
    Ok(StepReport {
        state: EmbeddedState {
            x: x_next,
            p: p_next,
        },
        iterations,
        residual: delta,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RattleConfig {
    /// Target for `|φ(x_{n+1})| / r²` when polishing the multiplier.
    pub root_tolerance: f64,
    pub max_iterations: usize,
}

impl Default for RattleConfig {
    fn default() -> Self {
        Self {
            root_tolerance: 1e-14,
            max_iterations: 50,
        }
    }
}

/// Result of a RATTLE step including both multipliers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RattleReport {
    pub state: EmbeddedState,
    pub lambda: f64,
    pub mu: f64,
    pub iterations: usize,
}

/// RATTLE for a particle in uniform gravity constrained to `φ(x) = ½(‖x‖² - r²) = 0`.
///
/// ```text
/// p_{n+½} = p_n - (h/2)(m g e3 + x_n λ)
/// x_{n+1} = x_n + (h/m) p_{n+½}
/// 0       = φ(x_{n+1})
/// p_{n+1} = p_{n+½} - (h/2)(m g e3 + x_{n+1} μ)
/// 0       = x_{n+1} · p_{n+1} / m
/// ```
pub fn rattle_step(
    params: &PendulumParams,
    s: &EmbeddedState,
    h: f64,
    cfg: &RattleConfig,
) -> Result<EmbeddedState> {
    rattle_step_report(params, s, h, cfg).map(|r| r.state)
}

pub fn rattle_step_report(
    params: &PendulumParams,
    s: &EmbeddedState,
    h: f64,
    cfg: &RattleConfig,
) -> Result<RattleReport> {
    if !(cfg.root_tolerance.is_finite() && cfg.root_tolerance > 0.0) {
        return Err(Error::invalid("root_tolerance", "must be positive"));
    }
    let (m, g, r) = (params.mass(), params.gravity(), params.length());
    let gravity = Vector3::new(0.0, 0.0, m * g);
    let x = s.x;

    // x_{n+1}(λ) = y - c λ x_n
    let c = h * h / (2.0 * m);
    let y = x + (s.p - gravity * (0.5 * h)) * (h / m);
    let position = |lambda: f64| y - x * (c * lambda);

    // ‖y - cλx‖² - r² = qa λ² + qb λ + qc
    let qa = c * c * x.norm_squared();
    let qb = -2.0 * c * y.dot(x);
    let qc = y.norm_squared() - r * r;
    let discriminant = qb * qb - 4.0 * qa * qc;
    if discriminant < 0.0 || qa == 0.0 {
        return Err(Error::NoRealRoot { discriminant });
    }
    // Smaller-magnitude root, in cancellation-free form.
    let q = -0.5 * (qb + qb.signum() * discriminant.sqrt());
    let mut lambda = if q != 0.0 { qc / q } else { 0.0 };

    let target = cfg.root_tolerance * r * r;
    let mut iterations = 0;
    loop {
        let xn = position(lambda);
        let phi = constraint(xn, r);
        if phi.abs() <= target {
            break;
        }
        if iterations == cfg.max_iterations {
            return Err(Error::Diverged {
                iterations,
                residual: phi.abs() / (r * r),
            });
        }
        iterations += 1;
        // dφ/dλ = x_{n+1} · (-c x_n)
        let slope = -c * xn.dot(x);
        if slope == 0.0 {
            return Err(Error::Diverged {
                iterations,
                residual: phi.abs() / (r * r),
            });
        }
        lambda -= phi / slope;
    }

    let x_next = position(lambda);
    let p_half = s.p - (gravity + x * lambda) * (0.5 * h);
    // x_{n+1}·p_{n+1} = 0 is linear in μ.
    let mu = (x_next.dot(p_half) - 0.5 * h * m * g * x_next[2]) / (0.5 * h * x_next.norm_squared());
    let p_next = p_half - (gravity + x_next * mu) * (0.5 * h);

    Ok(RattleReport {
        state: EmbeddedState {
            x: x_next,
            p: p_next,
        },
        lambda,
        mu,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{embed, embedded_energy};

    fn params() -> PendulumParams {
        PendulumParams::reference()
    }

    fn sample_body() -> BodyState {
        BodyState::new(
            Vector3::new(0.3, 0.2, -0.932738),
            Vector3::new(0.6, 0.0, 0.0),
        )
        .unwrap()
    }

    fn rk4_final(h: f64, t: f64) -> BodyState {
        let n = (t / h).round() as usize;
        let mut s = sample_body();
        for _ in 0..n {
            s = rk4_step(&params(), &s, h);
        }
        s
    }

    fn diff(a: &BodyState, b: &BodyState) -> f64 {
        a.components()
            .iter()
            .zip(b.components())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    }

    #[test]
    fn rk4_keeps_equilibrium() {
        let s = BodyState::equilibrium();
        assert_eq!(rk4_step(&params(), &s, 0.2), s);
    }

    #[test]
    fn rk4_self_convergence_is_fourth_order() {
        let fine = rk4_final(0.0025, 1.0);
        let e1 = diff(&rk4_final(0.02, 1.0), &fine);
        let e2 = diff(&rk4_final(0.01, 1.0), &fine);
        let ratio = e1 / e2;
        assert!((13.0..=19.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn rk4_norm_drift_is_small() {
        let mut s = sample_body();
        for _ in 0..1000 {
            let next = rk4_step(&params(), &s, 1e-3);
            assert!((next.gamma().norm() - s.gamma().norm()).abs() <= 1e-12);
            s = next;
        }
    }

    #[test]
    fn sv_keeps_equilibrium() {
        let p = params();
        let s = EmbeddedState::equilibrium(&p);
        let next = sv_step(&p, &s, 0.2, &SolverConfig::default()).unwrap();
        assert_eq!(next.x, s.x);
        assert!(next.p.max_abs() <= 1e-15);
    }

    #[test]
    fn sv_modes_agree() {
        let p = params();
        let s = embed(&p, &sample_body());
        let fp = sv_step(&p, &s, 0.2, &SolverConfig::default()).unwrap();
        let nt = sv_step(
            &p,
            &s,
            0.2,
            &SolverConfig {
                mode: SolverMode::Newton,
                ..SolverConfig::default()
            },
        )
        .unwrap();
        assert!((fp.x - nt.x).max_abs() < 1e-13);
        assert!((fp.p - nt.p).max_abs() < 1e-13);
    }

    #[test]
    fn sv_is_time_symmetric() {
        let p = params();
        let cfg = SolverConfig::default();
        let s = embed(&p, &sample_body());
        let fwd = sv_step(&p, &s, 0.2, &cfg).unwrap();
        let back = sv_step(&p, &fwd, -0.2, &cfg).unwrap();
        assert!((back.x - s.x).max_abs() <= 1e-12);
        assert!((back.p - s.p).max_abs() <= 1e-12);
    }

    #[test]
    fn sv_length_and_energy_stay_bounded() {
        let p = params();
        let cfg = SolverConfig::default();
        let mut s = embed(&p, &sample_body());
        let e0 = embedded_energy(&p, &s);
        let mut worst_len = 0.0_f64;
        let mut worst_e = 0.0_f64;
        for _ in 0..10_000 {
            s = sv_step(&p, &s, 0.2, &cfg).unwrap();
            worst_len = worst_len.max((s.x.norm() - 9.8).abs());
            worst_e = worst_e.max((embedded_energy(&p, &s) - e0).abs());
        }
        assert!(worst_len <= 1e-6 * 9.8, "{worst_len}");
        assert!(worst_e < 5.0, "{worst_e}");
    }

    #[test]
    fn sv_diverges_with_one_iteration() {
        let p = params();
        let cfg = SolverConfig {
            max_iterations: 1,
            ..SolverConfig::default()
        };
        let s = embed(&p, &sample_body());
        assert!(matches!(
            sv_step(&p, &s, 0.2, &cfg),
            Err(Error::Diverged { .. })
        ));
    }

    #[test]
    fn rattle_keeps_equilibrium() {
        let p = params();
        let s = EmbeddedState::equilibrium(&p);
        let report = rattle_step_report(&p, &s, 0.2, &RattleConfig::default()).unwrap();
        // Static balance m g e3 + x λ = 0 with x = -r e3.
        assert!((report.lambda - p.mass() * p.gravity() / p.length()).abs() < 1e-14);
        assert!((report.state.x - s.x).max_abs() <= 1e-15);
        assert!(report.state.p.max_abs() <= 1e-15);
    }

    #[test]
    fn rattle_enforces_both_constraints() {
        let p = params();
        let cfg = RattleConfig::default();
        let mut s = embed(&p, &sample_body());
        for _ in 0..2000 {
            s = rattle_step(&p, &s, 0.2, &cfg).unwrap();
            assert!(constraint(s.x, 9.8).abs() <= 1e-13 * 9.8 * 9.8);
            assert!(s.x.dot(s.p).abs() <= 1e-12);
        }
    }

    #[test]
    fn rattle_is_time_symmetric() {
        let p = params();
        let cfg = RattleConfig::default();
        let s = rattle_step(&p, &embed(&p, &sample_body()), 0.2, &cfg).unwrap();
        let fwd = rattle_step(&p, &s, 0.2, &cfg).unwrap();
        let back = rattle_step(&p, &fwd, -0.2, &cfg).unwrap();
        assert!((back.x - s.x).max_abs() <= 1e-12);
        assert!((back.p - s.p).max_abs() <= 1e-12);
    }

    #[test]
    fn rattle_and_sv_agree_at_small_step() {
        let p = params();
        let s = embed(&p, &sample_body());
        let h = 1e-4;
        let a = sv_step(&p, &s, h, &SolverConfig::default()).unwrap();
        let b = rattle_step(&p, &s, h, &RattleConfig::default()).unwrap();
        // Both are consistent to second order, so one step differs by O(h³).
        assert!((a.x - b.x).max_abs() <= h * h);
        assert!((a.p - b.p).max_abs() <= h * h);
    }

    #[test]
    fn rattle_rejects_huge_step() {
        let p = params();
        let s = embed(&p, &sample_body());
        let err = rattle_step(&p, &s, 50.0, &RattleConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NoRealRoot { .. }));
    }

    #[test]
    fn embedded_rk4_matches_body_rk4_invariants() {
        let p = params();
        let body = sample_body();
        let mut e = embed(&p, &body);
        let mut b = body;
        for _ in 0..1000 {
            e = rk4_embedded_step(&p, &e, 1e-3);
            b = rk4_step(&p, &b, 1e-3);
        }
        // Γ₀ is unit only to ~1e-8, so heights agree to that level.
        assert!((e.x[2] - 9.8 * b.gamma()[2]).abs() < 1e-6);
    }
}
