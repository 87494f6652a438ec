//! Conservation drift series, convergence-order estimates and compensated
//! accumulation.

use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hamel::HalfStepState;
use crate::model::{
    embedded_energy, embedded_momentum, energy, vertical_momentum, BodyState, EmbeddedState,
    PendulumParams,
};

/// Quantities tracked along a trajectory.
pub trait Observables {
    /// Deviation of the length-like invariant from its reference value.
    fn norm_error(&self, first: &Self, params: &PendulumParams) -> f64;
    fn energy(&self, params: &PendulumParams) -> f64;
    fn momentum(&self, params: &PendulumParams) -> f64;
}

impl Observables for HalfStepState {
    fn norm_error(&self, first: &Self, _: &PendulumParams) -> f64 {
        (self.gamma_half().norm() - first.gamma_half().norm()).abs()
    }

    fn energy(&self, params: &PendulumParams) -> f64 {
        HalfStepState::energy(self, params)
    }

    fn momentum(&self, params: &PendulumParams) -> f64 {
        self.vertical_momentum(params)
    }
}

impl Observables for BodyState {
    fn norm_error(&self, first: &Self, _: &PendulumParams) -> f64 {
        (self.gamma().norm() - first.gamma().norm()).abs()
    }

    fn energy(&self, params: &PendulumParams) -> f64 {
        energy(params, self)
    }

    fn momentum(&self, params: &PendulumParams) -> f64 {
        vertical_momentum(params, self)
    }
}

impl Observables for EmbeddedState {
    /// `| ‖x‖ - r |`, measured against the rod length rather than `x₀`.
    fn norm_error(&self, _: &Self, params: &PendulumParams) -> f64 {
        (self.x.norm() - params.length()).abs()
    }

    fn energy(&self, params: &PendulumParams) -> f64 {
        embedded_energy(params, self)
    }

    fn momentum(&self, _: &PendulumParams) -> f64 {
        embedded_momentum(self)
    }
}

/// Kahan–Babuška (Neumaier) compensated accumulator.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CompensatedSum {
    sum: f64,
    compensation: f64,
}

impl CompensatedSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, value: f64) {
        let t = self.sum + value;
        if self.sum.abs() >= value.abs() {
            self.compensation += (self.sum - t) + value;
        } else {
            self.compensation += (value - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

impl AddAssign<f64> for CompensatedSum {
    fn add_assign(&mut self, rhs: f64) {
        self.add(rhs);
    }
}

impl FromIterator<f64> for CompensatedSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = Self::new();
        iter.into_iter().for_each(|v| acc.add(v));
        acc
    }
}

/// Functional form of [`CompensatedSum::add`].
pub fn compensated_sum(mut acc: CompensatedSum, value: f64) -> CompensatedSum {
    acc.add(value);
    acc
}

/// Running sum that is either naive or compensated.
#[derive(Debug, Clone, Copy)]
pub enum Accumulator {
    Naive(f64),
    Compensated(CompensatedSum),
}

impl Accumulator {
    pub fn new(compensated: bool) -> Self {
        if compensated {
            Accumulator::Compensated(CompensatedSum::new())
        } else {
            Accumulator::Naive(0.0)
        }
    }

    pub fn starting_at(value: f64, compensated: bool) -> Self {
        let mut acc = Self::new(compensated);
        acc.add(value);
        acc
    }

    pub fn add(&mut self, value: f64) {
        match self {
            Accumulator::Naive(s) => *s += value,
            Accumulator::Compensated(c) => c.add(value),
        }
    }

    pub fn value(&self) -> f64 {
        match self {
            Accumulator::Naive(s) => *s,
            Accumulator::Compensated(c) => c.value(),
        }
    }
}

/// Time labels of a uniformly stepped trajectory: `t0`, `t0 + h`, ...
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub t0: f64,
    pub h: f64,
    /// Accumulate the clock with compensated summation.
    pub compensated: bool,
}

impl TimeGrid {
    pub fn new(t0: f64, h: f64) -> Self {
        Self {
            t0,
            h,
            compensated: false,
        }
    }

    pub fn clock(&self) -> Clock {
        Clock {
            acc: Accumulator::starting_at(self.t0, self.compensated),
            h: self.h,
        }
    }
}

/// Iterator-like clock that advances by `h` per tick.
#[derive(Debug, Clone, Copy)]
pub struct Clock {
    acc: Accumulator,
    h: f64,
}

impl Clock {
    pub fn now(&self) -> f64 {
        self.acc.value()
    }

    pub fn tick(&mut self) {
        self.acc.add(self.h);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftRecord {
    pub t: f64,
    pub norm_error: f64,
    pub energy_error: f64,
    pub momentum_error: f64,
}

/// Per-step conservation errors relative to the first state.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DriftSeries {
    pub records: Vec<DriftRecord>,
}

impl DriftSeries {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn max_norm_error(&self) -> f64 {
        self.max_of(|r| r.norm_error)
    }

    pub fn max_energy_error(&self) -> f64 {
        self.max_of(|r| r.energy_error)
    }

    pub fn max_momentum_error(&self) -> f64 {
        self.max_of(|r| r.momentum_error)
    }

    fn max_of(&self, f: impl Fn(&DriftRecord) -> f64) -> f64 {
        self.records.iter().map(f).fold(0.0, f64::max)
    }

    /// Pearson correlation between the norm and energy error series, or
    /// `None` when either series is constant.
    pub fn norm_energy_correlation(&self) -> Option<f64> {
        let xs: Vec<f64> = self.records.iter().map(|r| r.norm_error).collect();
        let ys: Vec<f64> = self.records.iter().map(|r| r.energy_error).collect();
        correlation(&xs, &ys)
    }
}

pub fn correlation(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len().min(ys.len());
    if n < 2 {
        return None;
    }
    let mean = |v: &[f64]| v[..n].iter().sum::<f64>() / n as f64;
    let (mx, my) = (mean(xs), mean(ys));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs[..n].iter().zip(&ys[..n]) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Drift of every state against `trajectory[0]`.
///
/// # Panics
/// Panics on an empty trajectory.
pub fn drift<S: Observables>(
    trajectory: &[S],
    params: &PendulumParams,
    grid: TimeGrid,
) -> DriftSeries {
    let first = trajectory.first().expect("drift of an empty trajectory");
    let e0 = first.energy(params);
    let j0 = first.momentum(params);
    let mut clock = grid.clock();
    let records = trajectory
        .iter()
        .map(|s| {
            let record = DriftRecord {
                t: clock.now(),
                norm_error: s.norm_error(first, params),
                energy_error: (s.energy(params) - e0).abs(),
                momentum_error: (s.momentum(params) - j0).abs(),
            };
            clock.tick();
            record
        })
        .collect();
    DriftSeries { records }
}

/// `log(e_coarse / e_fine) / log(h_coarse / h_fine)`.
pub fn observed_order(e_coarse: f64, e_fine: f64, h_coarse: f64, h_fine: f64) -> Result<f64> {
    for (name, v) in [
        ("e_coarse", e_coarse),
        ("e_fine", e_fine),
        ("h_coarse", h_coarse),
        ("h_fine", h_fine),
    ] {
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::invalid(name, format!("must be positive, got {v}")));
        }
    }
    if h_coarse == h_fine {
        return Err(Error::invalid("h_fine", "must differ from h_coarse"));
    }
    Ok((e_coarse / e_fine).ln() / (h_coarse / h_fine).ln())
}

/// Terminal errors of one integrator at several step sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub integrator: String,
    pub t_final: f64,
    pub step_sizes: Vec<f64>,
    pub errors: Vec<f64>,
    /// `orders[i]` compares `step_sizes[i]` with `step_sizes[i + 1]`.
    pub orders: Vec<f64>,
}

impl ConvergenceReport {
    pub fn new(
        integrator: impl Into<String>,
        t_final: f64,
        step_sizes: Vec<f64>,
        errors: Vec<f64>,
    ) -> Result<Self> {
        if step_sizes.len() < 2 || step_sizes.len() != errors.len() {
            return Err(Error::invalid(
                "step_sizes",
                "need at least two step sizes with one error each",
            ));
        }
        let orders = step_sizes
            .windows(2)
            .zip(errors.windows(2))
            .map(|(h, e)| observed_order(e[0], e[1], h[0], h[1]))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            integrator: integrator.into(),
            t_final,
            step_sizes,
            errors,
            orders,
        })
    }
}

/// Euclidean distance between two 5-component `(Ω¹, Ω², Γ)` vectors.
pub fn body_distance(a: &[f64; 5], b: &[f64; 5]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Node value at `k h` from the half states at `(k - ½) h` and `(k + ½) h`.
pub fn node_average(before: &HalfStepState, after: &HalfStepState) -> [f64; 5] {
    let g = (before.gamma_half() + after.gamma_half()).scale(0.5);
    let w = (before.omega_mid() + after.omega_mid()).scale(0.5);
    [w[0], w[1], g[0], g[1], g[2]]
}
