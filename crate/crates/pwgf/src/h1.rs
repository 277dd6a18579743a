//! Finite-difference Sobolev gradient flow on the unit L2 sphere.
//!
//! The reference solver for the same minimization, on a uniform Dirichlet
//! grid with `n` interior nodes per axis and `h = 2L/(n+1)`. The discrete
//! energy uses edge-centered forward differences for the gradient term and
//! nodal quadrature for the potential and interaction terms:
//!
//! ```text
//! E_h(u) = 0.5 h^(d-2) sum_edges (du)^2
//!        + h^d sum_i (0.5 V_i u_i^2 + 0.25 beta u_i^4),    h^d sum u^2 = 1.
//! ```
//!
//! One flow step preconditions the sphere-tangential residual with
//! `(-Lap + I)^{-1}` (inner conjugate gradients), projects back onto the
//! tangent space and renormalizes:
//!
//! ```text
//! r   = -Lap u + V u + beta u^3
//! r_t = r - <r, u> u
//! y   = (-Lap + I)^{-1} r_t
//! y_t = y - <y, u> u
//! u'  = normalize(u - tau y_t)
//! ```
//!
//! The tangent projection is applied on both sides of the elliptic solve so
//! that the discrete constrained stationary points are exactly the fixed
//! points of the iteration. The driver halves `tau` within a step whenever
//! the energy would increase, which makes the energy non-increasing across
//! accepted steps.

use crate::error::{Error, Result};
use crate::potentials::PotentialField;
use crate::reconstruct::GridFunction;
use rayon::prelude::*;

/// Discretized problem: grid geometry, nodal potential, interaction strength.
#[derive(Debug, Clone)]
pub struct FdProblem {
    pub d: usize,
    /// Interior nodes per axis.
    pub n: usize,
    pub l: f64,
    /// Spacing `2L / (n+1)`.
    pub h: f64,
    /// Potential at the interior nodes, row-major.
    pub v: Vec<f64>,
    pub beta: f64,
}

impl FdProblem {
    pub fn new<P: PotentialField>(d: usize, n: usize, l: f64, potential: &P, beta: f64) -> Result<Self> {
        if potential.dim() != d {
            return Err(Error::Config(format!(
                "potential is {}-dimensional, problem is {d}-dimensional",
                potential.dim()
            )));
        }
        let h = 2.0 * l / (n + 1) as f64;
        let total = n.pow(d as u32);
        let mut v = vec![0.0; total];
        let mut x = [0.0_f64; 3];
        for (idx, slot) in v.iter_mut().enumerate() {
            let mut rem = idx;
            for a in (0..d).rev() {
                x[a] = -l + ((rem % n) + 1) as f64 * h;
                rem /= n;
            }
            *slot = potential.value(&x[..d]);
        }
        Ok(Self { d, n, l, h, v, beta })
    }

    /// Build from precomputed nodal values (tests, file-driven runs).
    pub fn from_nodal_values(d: usize, n: usize, l: f64, v: Vec<f64>, beta: f64) -> Result<Self> {
        if v.len() != n.pow(d as u32) {
            return Err(Error::ShapeMismatch(format!(
                "expected {} nodal values, got {}",
                n.pow(d as u32),
                v.len()
            )));
        }
        let h = 2.0 * l / (n + 1) as f64;
        Ok(Self { d, n, l, h, v, beta })
    }

    fn strides(&self) -> [usize; 3] {
        match self.d {
            1 => [1, 0, 0],
            2 => [self.n, 1, 0],
            _ => [self.n * self.n, self.n, 1],
        }
    }

    fn check_grid(&self, u: &GridFunction) -> Result<()> {
        if u.d != self.d || u.n != self.n + 2 || (u.l - self.l).abs() > 1e-12 {
            return Err(Error::ShapeMismatch(format!(
                "grid ({}d, {} nodes, L={}) does not match problem ({}d, {} interior, L={})",
                u.d, u.n, u.l, self.d, self.n, self.l
            )));
        }
        if !u.boundary_is_zero() {
            return Err(Error::InvalidGrid("boundary values must be zero".into()));
        }
        Ok(())
    }
}

/// `out = (-Lap_h u)` on interior vectors with zero Dirichlet data.
fn laplacian(prob: &FdProblem, u: &[f64], out: &mut [f64]) {
    let n = prob.n;
    let d = prob.d;
    let strides = prob.strides();
    let inv_h2 = 1.0 / (prob.h * prob.h);
    let two_d = 2.0 * d as f64;
    out.par_iter_mut().enumerate().for_each(|(idx, o)| {
        let mut acc = two_d * u[idx];
        let mut rem = idx;
        for a in (0..d).rev() {
            let i = rem % n;
            rem /= n;
            let s = strides[a];
            if i > 0 {
                acc -= u[idx - s];
            }
            if i + 1 < n {
                acc -= u[idx + s];
            }
        }
        *o = acc * inv_h2;
    });
}

/// Edge-based gradient quadratic form `sum_edges (u_+ - u_-)^2` including the
/// boundary edges of every grid line.
fn edge_sum(prob: &FdProblem, u: &[f64]) -> f64 {
    let n = prob.n;
    let d = prob.d;
    let strides = prob.strides();
    let mut total = 0.0;
    for a in 0..d {
        let s = strides[a];
        let part: f64 = (0..u.len())
            .into_par_iter()
            .map(|idx| {
                let i = (idx / s) % n;
                let mut acc = 0.0;
                if i == 0 {
                    acc += u[idx] * u[idx];
                }
                if i + 1 < n {
                    let diff = u[idx + s] - u[idx];
                    acc += diff * diff;
                } else {
                    acc += u[idx] * u[idx];
                }
                acc
            })
            .sum();
        total += part;
    }
    total
}

fn dot_h(prob: &FdProblem, a: &[f64], b: &[f64]) -> f64 {
    let s: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    s * prob.h.powi(prob.d as i32)
}

fn energy_interior(prob: &FdProblem, u: &[f64]) -> (f64, f64) {
    let hd = prob.h.powi(prob.d as i32);
    let grad = 0.5 * prob.h.powi(prob.d as i32 - 2) * edge_sum(prob, u);
    let mut pot = 0.0;
    let mut quart = 0.0;
    for (ui, vi) in u.iter().zip(&prob.v) {
        pot += vi * ui * ui;
        quart += ui * ui * ui * ui;
    }
    let fv = 0.5 * hd * pot;
    let fr = 0.25 * prob.beta * hd * quart;
    let e = grad + fv + fr;
    (e, 2.0 * e + 2.0 * fr)
}

/// Discrete energy and eigenvalue of a normalized grid function.
pub fn fd_energy(u: &GridFunction, prob: &FdProblem) -> Result<(f64, f64)> {
    prob.check_grid(u)?;
    let interior = u.interior();
    let norm2 = dot_h(prob, &interior, &interior);
    if (norm2 - 1.0).abs() > 1e-8 {
        return Err(Error::InvalidGrid(format!(
            "input must be normalized in the discrete L2 norm (got ||u||^2 = {norm2})"
        )));
    }
    Ok(energy_interior(prob, &interior))
}

/// Inner CG for `(-Lap + I) y = r`, relative residual `1e-10` or 500
/// iterations. Errors if the iteration stalls above `1e-6`.
fn elliptic_solve(prob: &FdProblem, rhs: &[f64]) -> Result<Vec<f64>> {
    let m = rhs.len();
    let mut x = vec![0.0; m];
    let rhs_norm: f64 = rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
    if rhs_norm == 0.0 {
        return Ok(x);
    }
    let mut r = rhs.to_vec();
    let mut p = r.clone();
    let mut lap = vec![0.0; m];
    let mut rs: f64 = r.iter().map(|v| v * v).sum();
    let tol = 1e-10 * rhs_norm;
    let max_iter = 500;
    let mut iters = 0;
    while iters < max_iter {
        laplacian(prob, &p, &mut lap);
        let mut pap = 0.0;
        for i in 0..m {
            lap[i] += p[i];
            pap += p[i] * lap[i];
        }
        let alpha = rs / pap;
        for i in 0..m {
            x[i] += alpha * p[i];
            r[i] -= alpha * lap[i];
        }
        let rs_new: f64 = r.iter().map(|v| v * v).sum();
        iters += 1;
        if rs_new.sqrt() <= tol {
            return Ok(x);
        }
        let beta = rs_new / rs;
        for i in 0..m {
            p[i] = r[i] + beta * p[i];
        }
        rs = rs_new;
    }
    let rel = rs.sqrt() / rhs_norm;
    if rel > 1e-6 {
        return Err(Error::InnerSolveStalled {
            residual: rel,
            iterations: max_iter,
        });
    }
    Ok(x)
}

struct StepOutcome {
    u_next: Vec<f64>,
    /// `||y_t||_h`, the preconditioned tangential residual.
    residual: f64,
}

fn step_interior(prob: &FdProblem, u: &[f64], tau: f64) -> Result<StepOutcome> {
    let m = u.len();
    let mut r = vec![0.0; m];
    laplacian(prob, u, &mut r);
    for i in 0..m {
        r[i] += prob.v[i] * u[i] + prob.beta * u[i] * u[i] * u[i];
    }
    let ru = dot_h(prob, &r, u);
    for i in 0..m {
        r[i] -= ru * u[i];
    }
    let mut y = elliptic_solve(prob, &r)?;
    let yu = dot_h(prob, &y, u);
    for i in 0..m {
        y[i] -= yu * u[i];
    }
    let residual = dot_h(prob, &y, &y).sqrt();
    let mut u_next = vec![0.0; m];
    for i in 0..m {
        u_next[i] = u[i] - tau * y[i];
    }
    let norm = dot_h(prob, &u_next, &u_next).sqrt();
    for v in u_next.iter_mut() {
        *v /= norm;
    }
    Ok(StepOutcome { u_next, residual })
}

/// One preconditioned, projected, renormalized descent step.
pub fn h1_step(u: &GridFunction, prob: &FdProblem, tau: f64) -> Result<GridFunction> {
    prob.check_grid(u)?;
    let interior = u.interior();
    let norm2 = dot_h(prob, &interior, &interior);
    if (norm2 - 1.0).abs() > 1e-8 {
        return Err(Error::InvalidGrid(format!(
            "input must be normalized (got ||u||^2 = {norm2})"
        )));
    }
    let out = step_interior(prob, &interior, tau)?;
    GridFunction::from_interior(prob.d, prob.n, prob.l, &out.u_next)
}

/// One accepted-step record of the flow.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct H1StepLog {
    pub step: usize,
    pub e: f64,
    pub lambda: f64,
    /// Preconditioned tangential residual norm (0 for the initial row).
    pub residual: f64,
    /// Step size actually accepted (0 for the initial row).
    pub tau: f64,
}

#[derive(Debug, Clone)]
pub struct H1Outcome {
    pub u: GridFunction,
    pub e: f64,
    pub lambda: f64,
    pub converged: bool,
    /// Row 0 is the initial state; one row per accepted step after that.
    pub history: Vec<H1StepLog>,
}

/// Run the flow until `|E_k - E_{k-1}| <= tol` or `max_steps`, halving `tau`
/// within a step whenever the energy would increase.
pub fn h1_solve(
    u0: &GridFunction,
    prob: &FdProblem,
    tau0: f64,
    max_steps: usize,
    tol: f64,
) -> Result<H1Outcome> {
    prob.check_grid(u0)?;
    let mut u = u0.interior();
    let norm2 = dot_h(prob, &u, &u);
    if (norm2 - 1.0).abs() > 1e-8 {
        return Err(Error::InvalidGrid(format!(
            "initial iterate must be normalized (got ||u||^2 = {norm2})"
        )));
    }
    let (mut e_prev, mut lambda) = energy_interior(prob, &u);
    let mut history = vec![H1StepLog {
        step: 0,
        e: e_prev,
        lambda,
        residual: 0.0,
        tau: 0.0,
    }];
    let mut converged = false;
    for step in 1..=max_steps {
        let mut tau = tau0;
        let accepted = loop {
            let trial = step_interior(prob, &u, tau)?;
            let (e_new, lam_new) = energy_interior(prob, &trial.u_next);
            if e_new <= e_prev {
                break (trial, e_new, lam_new, tau);
            }
            tau *= 0.5;
            if tau < 1e-14 {
                return Err(Error::FlowStalled {
                    step,
                    tau,
                    energy: e_prev,
                });
            }
        };
        let (outcome, e_new, lam_new, tau_used) = accepted;
        u = outcome.u_next;
        lambda = lam_new;
        history.push(H1StepLog {
            step,
            e: e_new,
            lambda: lam_new,
            residual: outcome.residual,
            tau: tau_used,
        });
        let drop = e_prev - e_new;
        e_prev = e_new;
        if drop <= tol {
            converged = true;
            break;
        }
    }
    Ok(H1Outcome {
        u: GridFunction::from_interior(prob.d, prob.n, prob.l, &u)?,
        e: e_prev,
        lambda,
        converged,
        history,
    })
}

/// Normalized constant-one initial iterate.
pub fn constant_one_init(prob: &FdProblem) -> GridFunction {
    let total = prob.n.pow(prob.d as u32);
    let mut g = GridFunction::from_interior(prob.d, prob.n, prob.l, &vec![1.0; total])
        .expect("shape is consistent");
    g.normalize().expect("nonzero");
    g
}

/// Normalized `|N(0,1)|` initial iterate with the given seed.
pub fn random_init(prob: &FdProblem, seed: u64) -> GridFunction {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let total = prob.n.pow(prob.d as u32);
    let vals: Vec<f64> = (0..total)
        .map(|_| {
            let x: f64 = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
            x.abs()
        })
        .collect();
    let mut g = GridFunction::from_interior(prob.d, prob.n, prob.l, &vals)
        .expect("shape is consistent");
    g.normalize().expect("nonzero");
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potentials::{Potential, PotentialKind};
    use std::f64::consts::PI;

    fn zero_potential(d: usize, n: usize, l: f64) -> FdProblem {
        FdProblem::from_nodal_values(d, n, l, vec![0.0; n.pow(d as u32)], 0.0).unwrap()
    }

    fn laplacian_eigvec(d: usize, n: usize, l: f64) -> GridFunction {
        let mut vals = vec![0.0; n.pow(d as u32)];
        for (idx, v) in vals.iter_mut().enumerate() {
            let mut rem = idx;
            let mut prod = 1.0;
            for _ in 0..d {
                let i = rem % n;
                rem /= n;
                prod *= (PI * (i + 1) as f64 / (n + 1) as f64).sin();
            }
            *v = prod;
        }
        let mut g = GridFunction::from_interior(d, n, l, &vals).unwrap();
        g.normalize().unwrap();
        g
    }

    #[test]
    fn eigenvector_energy_matches_closed_form() {
        for (d, n, l) in [(1usize, 37usize, 1.0), (2, 25, 2.0), (3, 11, 8.0)] {
            let prob = zero_potential(d, n, l);
            let u = laplacian_eigvec(d, n, l);
            let (e, lambda) = fd_energy(&u, &prob).unwrap();
            let eig = d as f64 * 4.0 / (prob.h * prob.h)
                * (PI * prob.h / (4.0 * l)).sin().powi(2);
            assert!(
                (e - 0.5 * eig).abs() <= 1e-10 * eig,
                "d={d}: E={e} vs {}",
                0.5 * eig
            );
            assert!((lambda - eig).abs() <= 1e-10 * eig);
        }
    }

    #[test]
    fn constant_one_energy_2d() {
        let prob = FdProblem::new(2, 200, 16.0, &Potential::Lattice2d, 10.0).unwrap();
        let u = constant_one_init(&prob);
        let (e, _) = fd_energy(&u, &prob).unwrap();
        assert!((e - 0.6495).abs() <= 0.02 * 0.6495, "E = {e}");
    }

    #[test]
    fn constant_one_energy_3d() {
        let prob = FdProblem::new(3, 99, 8.0, &Potential::TrapLattice3d, 1600.0).unwrap();
        let u = constant_one_init(&prob);
        let (e, _) = fd_energy(&u, &prob).unwrap();
        assert!((e - 108.40).abs() <= 0.02 * 108.40, "E = {e}");
    }

    #[test]
    fn unnormalized_input_is_rejected() {
        let prob = zero_potential(1, 20, 1.0);
        let mut u = constant_one_init(&prob);
        for v in u.values.iter_mut() {
            *v *= 2.0;
        }
        assert!(fd_energy(&u, &prob).is_err());
        assert!(h1_step(&u, &prob, 0.5).is_err());
    }

    #[test]
    fn steps_preserve_the_norm_and_decrease_energy() {
        let pot = PotentialKind::Cos1d.build(10.0);
        let prob = FdProblem::new(1, 100, 1.0, &pot, 10.0).unwrap();
        let out = h1_solve(&constant_one_init(&prob), &prob, 0.9, 200, 1e-10).unwrap();
        assert!(out.converged);
        for w in out.history.windows(2) {
            assert!(w[1].e <= w[0].e, "energy rose: {} -> {}", w[0].e, w[1].e);
        }
        let interior = out.u.interior();
        let norm2 = dot_h(&prob, &interior, &interior);
        assert!((norm2 - 1.0).abs() < 1e-12);
        // ground-state positivity
        assert!(interior.iter().all(|v| *v > 0.0));
    }

    #[test]
    fn converged_state_is_a_fixed_point() {
        let pot = PotentialKind::Cos1d.build(10.0);
        let prob = FdProblem::new(1, 50, 1.0, &pot, 10.0).unwrap();
        let out = h1_solve(&constant_one_init(&prob), &prob, 0.9, 2000, 1e-14).unwrap();
        let next = h1_step(&out.u, &prob, 0.1).unwrap();
        let diff: f64 = out
            .u
            .values
            .iter()
            .zip(&next.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(diff <= 1e-8, "moved by {diff}");
    }

    #[test]
    fn solve_matches_exact_1d_ground_state() {
        // The FD minimizer converges to the continuum solution as n grows;
        // at n = 400 the discrete energy sits within O(h^2) of E*.
        let pot = PotentialKind::Cos1d.build(10.0);
        let prob = FdProblem::new(1, 400, 1.0, &pot, 10.0).unwrap();
        let out = h1_solve(&constant_one_init(&prob), &prob, 0.9, 2000, 1e-12).unwrap();
        let (lambda_star, e_star) = crate::potentials::exact_constants_1d(10.0);
        assert!((out.e - e_star).abs() < 5e-3, "E = {} vs {e_star}", out.e);
        assert!(
            (out.lambda - lambda_star).abs() < 2e-2,
            "lambda = {} vs {lambda_star}",
            out.lambda
        );
    }
}
