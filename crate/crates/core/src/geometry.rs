//! Fixed-size 3-vector and 3×3-matrix algebra.
//!
//! Only what the integrators need: the hat map onto skew-symmetric matrices,
//! the Cayley transform, and a pivoted 3×3 solve.

use std::ops::{Add, AddAssign, Index, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pivots smaller than this are treated as singular.
pub const SINGULAR_PIVOT: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector3(pub [f64; 3]);

impl Vector3 {
    pub const ZERO: Self = Self([0.0; 3]);
    pub const E1: Self = Self([1.0, 0.0, 0.0]);
    pub const E2: Self = Self([0.0, 1.0, 0.0]);
    pub const E3: Self = Self([0.0, 0.0, 1.0]);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self([x, y, z])
    }

    pub fn dot(self, other: Self) -> f64 {
        self.0[0] * other.0[0] + self.0[1] * other.0[1] + self.0[2] * other.0[2]
    }

    pub fn cross(self, other: Self) -> Self {
        let [a1, a2, a3] = self.0;
        let [b1, b2, b3] = other.0;
        Self([a2 * b3 - a3 * b2, a3 * b1 - a1 * b3, a1 * b2 - a2 * b1])
    }

    pub fn norm_squared(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_squared().sqrt()
    }

    pub fn scale(self, s: f64) -> Self {
        Self(self.0.map(|c| c * s))
    }

    pub fn max_abs(self) -> f64 {
        self.0.iter().fold(0.0_f64, |m, c| m.max(c.abs()))
    }

    pub fn is_finite(self) -> bool {
        self.0.iter().all(|c| c.is_finite())
    }
}

impl Index<usize> for Vector3 {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl Add for Vector3 {
    type Output = Self;

    fn add(self, rhs: Self) -> Self {
        Self([
            self.0[0] + rhs.0[0],
            self.0[1] + rhs.0[1],
            self.0[2] + rhs.0[2],
        ])
    }
}

impl AddAssign for Vector3 {
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

impl Sub for Vector3 {
    type Output = Self;

    fn sub(self, rhs: Self) -> Self {
        Self([
            self.0[0] - rhs.0[0],
            self.0[1] - rhs.0[1],
            self.0[2] - rhs.0[2],
        ])
    }
}

impl Neg for Vector3 {
    type Output = Self;

    fn neg(self) -> Self {
        Self(self.0.map(|c| -c))
    }
}

impl Mul<f64> for Vector3 {
    type Output = Self;

    fn mul(self, s: f64) -> Self {
        self.scale(s)
    }
}

impl Mul<Vector3> for f64 {
    type Output = Vector3;

    fn mul(self, v: Vector3) -> Vector3 {
        v.scale(self)
    }
}

/// Row-major 3×3 matrix: `self.0[row][col]`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Matrix3(pub [[f64; 3]; 3]);

impl Matrix3 {
    pub const ZERO: Self = Self([[0.0; 3]; 3]);
    pub const IDENTITY: Self = Self([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    pub fn from_columns(c0: Vector3, c1: Vector3, c2: Vector3) -> Self {
        let mut m = [[0.0; 3]; 3];
        for (j, c) in [c0, c1, c2].into_iter().enumerate() {
            for (i, row) in m.iter_mut().enumerate() {
                row[j] = c.0[i];
            }
        }
        Self(m)
    }

    pub fn column(&self, j: usize) -> Vector3 {
        Vector3([self.0[0][j], self.0[1][j], self.0[2][j]])
    }

    pub fn transpose(&self) -> Self {
        let m = &self.0;
        Self([
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ])
    }

    pub fn mul_vec(&self, v: Vector3) -> Vector3 {
        let m = &self.0;
        Vector3([
            m[0][0] * v.0[0] + m[0][1] * v.0[1] + m[0][2] * v.0[2],
            m[1][0] * v.0[0] + m[1][1] * v.0[1] + m[1][2] * v.0[2],
            m[2][0] * v.0[0] + m[2][1] * v.0[1] + m[2][2] * v.0[2],
        ])
    }

    pub fn mul_mat(&self, other: &Self) -> Self {
        let mut r = [[0.0; 3]; 3];
        for (i, row) in r.iter_mut().enumerate() {
            for (j, out) in row.iter_mut().enumerate() {
                *out = self.0[i][0] * other.0[0][j]
                    + self.0[i][1] * other.0[1][j]
                    + self.0[i][2] * other.0[2][j];
            }
        }
        Self(r)
    }

    pub fn scale(&self, s: f64) -> Self {
        Self(self.0.map(|row| row.map(|c| c * s)))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0
            .iter()
            .flat_map(|row| row.iter())
            .map(|c| c * c)
            .sum::<f64>()
            .sqrt()
    }
}

impl Add for Matrix3 {
    type Output = Self;

    fn add(self, rhs: Self) -> Self {
        let mut r = self.0;
        for (row, rrow) in r.iter_mut().zip(rhs.0.iter()) {
            for (c, rc) in row.iter_mut().zip(rrow.iter()) {
                *c += rc;
            }
        }
        Self(r)
    }
}

impl Sub for Matrix3 {
    type Output = Self;

    fn sub(self, rhs: Self) -> Self {
        self + rhs.scale(-1.0)
    }
}

impl Neg for Matrix3 {
    type Output = Self;

    fn neg(self) -> Self {
        self.scale(-1.0)
    }
}

/// Skew-symmetric matrix of `v`, so that `hat(v) * w == v × w`.
///
/// Built component-wise, so `hat(v)ᵀ == -hat(v)` holds exactly.
pub fn hat(v: Vector3) -> Matrix3 {
    let [x, y, z] = v.0;
    Matrix3([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
}

/// Solves `a * x = b` by Gaussian elimination with partial pivoting.
pub fn solve3(a: &Matrix3, b: Vector3) -> Result<Vector3> {
    let mut m = a.0;
    let mut rhs = b.0;

    for col in 0..3 {
        let pivot_row = (col..3)
            .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
            .unwrap_or(col);
        let pivot = m[pivot_row][col];
        if pivot.abs() < SINGULAR_PIVOT {
            return Err(Error::Singular { pivot });
        }
        m.swap(col, pivot_row);
        rhs.swap(col, pivot_row);

        for row in col + 1..3 {
            let factor = m[row][col] / m[col][col];
            if factor != 0.0 {
                for k in col..3 {
                    m[row][k] -= factor * m[col][k];
                }
                rhs[row] -= factor * rhs[col];
            }
        }
    }

    let mut x = [0.0; 3];
    for row in (0..3).rev() {
        let tail: f64 = (row + 1..3).map(|k| m[row][k] * x[k]).sum();
        x[row] = (rhs[row] - tail) / m[row][row];
    }
    Ok(Vector3(x))
}

/// Cayley transform `(I - A)⁻¹ (I + A)`.
///
/// Orthogonal with unit determinant whenever `a` is skew-symmetric. Each
/// column is obtained by a separate solve against the corresponding column of
/// `I + A`; no explicit inverse is formed.
pub fn cayley(a: &Matrix3) -> Result<Matrix3> {
    let lhs = Matrix3::IDENTITY - *a;
    let rhs = Matrix3::IDENTITY + *a;
    let c0 = solve3(&lhs, rhs.column(0))?;
    let c1 = solve3(&lhs, rhs.column(1))?;
    let c2 = solve3(&lhs, rhs.column(2))?;
    Ok(Matrix3::from_columns(c0, c1, c2))
}
