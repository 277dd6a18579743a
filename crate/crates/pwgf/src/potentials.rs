//! Experiment potentials with analytic gradients, plus the exact 1D
//! ground-state solution used for benchmarking.
//!
//! All three potentials are even under any coordinate sign flip, and they are
//! evaluated so that `V(-x) = V(x)` and `grad V(-x) = -grad V(x)` hold
//! bitwise (trigonometric terms go through `|x|` with the sign reapplied).
//! The particle estimators' exact cancellation properties depend on this.

use std::f64::consts::PI;

/// `sin^2(freq * x)`, bitwise even in `x`.
#[inline]
fn sin2_even(x: f64, freq: f64) -> f64 {
    let s = (freq * x.abs()).sin();
    s * s
}

/// `sin(freq * x)`, bitwise odd in `x`.
#[inline]
fn sin_odd(x: f64, freq: f64) -> f64 {
    let s = (freq * x.abs()).sin();
    if x.is_sign_negative() {
        -s
    } else {
        s
    }
}

/// Value-plus-gradient contract for external trapping potentials.
pub trait PotentialField: Send + Sync {
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> f64;
    /// Writes `grad V(x)` into `out` (length `dim`).
    fn grad_into(&self, x: &[f64], out: &mut [f64]);
}

/// Identifier used in run configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PotentialKind {
    /// 1D: `V(x) = beta cos^2(pi (x+1) / 2)` on `(-1, 1)`.
    Cos1d,
    /// 2D: `V = 2 sin^2(pi x1 / 4) sin^2(pi x2 / 4)` on `(-16, 16)^2`.
    Lattice2d,
    /// 3D: harmonic trap plus optical lattice on `(-8, 8)^3`.
    TrapLattice3d,
}

impl PotentialKind {
    pub fn dim(self) -> usize {
        match self {
            PotentialKind::Cos1d => 1,
            PotentialKind::Lattice2d => 2,
            PotentialKind::TrapLattice3d => 3,
        }
    }

    /// Instantiate. `beta` only parameterizes the 1D potential's amplitude;
    /// the 2D/3D potentials are fixed.
    pub fn build(self, beta: f64) -> Potential {
        match self {
            PotentialKind::Cos1d => Potential::Cos1d { beta },
            PotentialKind::Lattice2d => Potential::Lattice2d,
            PotentialKind::TrapLattice3d => Potential::TrapLattice3d,
        }
    }
}

/// The closed set of experiment potentials. New problems can plug in through
/// [`PotentialField`] without touching the solver.
#[derive(Debug, Clone, Copy)]
pub enum Potential {
    Cos1d { beta: f64 },
    Lattice2d,
    TrapLattice3d,
}

impl PotentialField for Potential {
    fn dim(&self) -> usize {
        match self {
            Potential::Cos1d { .. } => 1,
            Potential::Lattice2d => 2,
            Potential::TrapLattice3d => 3,
        }
    }

    fn value(&self, x: &[f64]) -> f64 {
        match self {
            // beta cos^2(pi (x+1)/2) == beta sin^2(pi x / 2)
            Potential::Cos1d { beta } => beta * sin2_even(x[0], PI / 2.0),
            Potential::Lattice2d => {
                2.0 * sin2_even(x[0], PI / 4.0) * sin2_even(x[1], PI / 4.0)
            }
            Potential::TrapLattice3d => {
                let mut v = 0.0;
                for &xi in &x[..3] {
                    v += xi * xi + 100.0 * sin2_even(xi, PI / 4.0);
                }
                v
            }
        }
    }

    fn grad_into(&self, x: &[f64], out: &mut [f64]) {
        match self {
            Potential::Cos1d { beta } => {
                out[0] = beta * (PI / 2.0) * sin_odd(x[0], PI);
            }
            Potential::Lattice2d => {
                let s0 = sin2_even(x[0], PI / 4.0);
                let s1 = sin2_even(x[1], PI / 4.0);
                out[0] = (PI / 2.0) * sin_odd(x[0], PI / 2.0) * s1;
                out[1] = (PI / 2.0) * sin_odd(x[1], PI / 2.0) * s0;
            }
            Potential::TrapLattice3d => {
                for k in 0..3 {
                    out[k] = 2.0 * x[k] + 25.0 * PI * sin_odd(x[k], PI / 2.0);
                }
            }
        }
    }
}

/// Exact 1D ground state `u*(x) = sin(pi (x + 1) / 2)` on `(-1, 1)`.
pub fn exact_ground_state_1d(x: f64) -> f64 {
    (PI * (x + 1.0) / 2.0).sin()
}

/// `(lambda*, E*)` for the 1D problem: `lambda* = pi^2/4 + beta`,
/// `E* = lambda*/2 - 3 beta / 16`.
pub fn exact_constants_1d(beta: f64) -> (f64, f64) {
    let lambda = PI * PI / 4.0 + beta;
    (lambda, lambda / 2.0 - 3.0 * beta / 16.0)
}
