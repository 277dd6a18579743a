//! The outer natural-gradient descent loop.
//!
//! Each step evaluates the energy, gradient and per-particle Jacobians at the
//! current parameters, assembles the pullback metric, solves the regularized
//! system for the direction `xi`, clips its norm, and trial-evaluates the
//! energy at `theta - alpha xi` on the same particle set. Steps that would
//! raise the energy by more than `e_tol` are rejected in favor of a small
//! normalized plain-gradient step. The lowest energy seen and its parameters
//! are tracked throughout; the energy itself is not guaranteed to decrease
//! monotonically.

use crate::energy::{self, EnergyBreakdown};
use crate::error::{Error, Result};
use crate::metric;
use crate::potentials::{Potential, PotentialKind};
use crate::reference::{sample_sign_symmetric, ParticleSet, RefKind, ReferenceDensity};
use crate::transport::TransportMap;
use std::io::Write;
use std::time::Instant;

/// Hyperparameters of one run. `seed` drives the particle draw; the weight
/// initialization uses `seed + 1`.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PwgfConfig {
    pub d: usize,
    /// Particle count (divisible by `2^d`).
    pub n: usize,
    /// Outer iterations.
    pub k: usize,
    /// Step size.
    pub alpha: f64,
    /// Hidden width of the per-axis network.
    pub h: usize,
    /// Euler substeps of the transport ODE.
    pub n_ode: usize,
    /// CG iterations for the metric solve.
    pub n_cg: usize,
    /// Backtracking tolerance on the trial energy.
    pub e_tol: f64,
    /// Norm clip for the descent direction.
    pub clip: f64,
    /// Tikhonov regularization.
    pub eps: f64,
    pub seed: u64,
    /// Interaction strength.
    pub beta: f64,
    /// Box half-width.
    pub l: f64,
    pub potential: PotentialKind,
    pub reference: RefKind,
    /// Weight initialization scale.
    pub init_scale: f64,
}

impl PwgfConfig {
    /// 1D experiment defaults.
    pub fn gpe1d() -> Self {
        Self {
            d: 1,
            n: 3000,
            k: 400,
            alpha: 0.005,
            h: 10,
            n_ode: 10,
            n_cg: 100,
            e_tol: 0.05,
            clip: 10.0,
            eps: 1e-6,
            seed: 0,
            beta: 10.0,
            l: 1.0,
            potential: PotentialKind::Cos1d,
            reference: RefKind::Beta22,
            init_scale: 0.01,
        }
    }

    /// 2D experiment defaults.
    pub fn gpe2d() -> Self {
        Self {
            d: 2,
            n: 3000,
            k: 400,
            alpha: 0.005,
            h: 10,
            n_ode: 10,
            n_cg: 200,
            e_tol: 0.05,
            clip: 10.0,
            eps: 1e-6,
            seed: 0,
            beta: 10.0,
            l: 16.0,
            potential: PotentialKind::Lattice2d,
            reference: RefKind::GaussMix,
            init_scale: 0.01,
        }
    }

    /// 3D experiment defaults.
    pub fn gpe3d() -> Self {
        Self {
            d: 3,
            n: 6000,
            k: 400,
            alpha: 0.005,
            h: 10,
            n_ode: 10,
            n_cg: 300,
            e_tol: 5.0,
            clip: 50.0,
            eps: 1e-6,
            seed: 0,
            beta: 1600.0,
            l: 8.0,
            potential: PotentialKind::TrapLattice3d,
            reference: RefKind::Beta55,
            init_scale: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d > 3 {
            return Err(Error::Config(format!("dimension {} not in 1..=3", self.d)));
        }
        let pat = 1usize << self.d;
        if self.n == 0 || self.n % pat != 0 {
            return Err(Error::Config(format!(
                "particle count N = {} must be divisible by 2^d = {pat} (sign-symmetric sampling in d = {})",
                self.n, self.d
            )));
        }
        if self.potential.dim() != self.d {
            return Err(Error::Config(format!(
                "potential {:?} is {}-dimensional but d = {}",
                self.potential,
                self.potential.dim(),
                self.d
            )));
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("e_tol", self.e_tol),
            ("clip", self.clip),
            ("eps", self.eps),
            ("beta", self.beta),
            ("l", self.l),
            ("init_scale", self.init_scale),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        if self.alpha <= 0.0 || self.clip <= 0.0 || self.eps <= 0.0 || self.l <= 0.0 {
            return Err(Error::Config("alpha, clip, eps and l must be positive".into()));
        }
        if self.h == 0 || self.n_ode == 0 || self.n_cg == 0 {
            return Err(Error::Config("h, n_ode and n_cg must be positive".into()));
        }
        Ok(())
    }

    /// One reference density per axis.
    pub fn build_references(&self) -> Vec<ReferenceDensity> {
        let make = || match self.reference {
            RefKind::Beta22 => ReferenceDensity::beta22(self.l),
            RefKind::Beta55 => ReferenceDensity::beta55(self.l),
            RefKind::GaussMix => ReferenceDensity::gauss_mix_default(self.l),
        };
        (0..self.d).map(|_| make()).collect()
    }

    pub fn build_potential(&self) -> Potential {
        self.potential.build(self.beta)
    }
}

/// One row of the run log. `e` and the components describe the state at the
/// start of the step; `accepted` records whether the metric step survived the
/// backtracking check (otherwise the fallback gradient step was taken).
#[derive(Debug, Clone, serde::Serialize)]
pub struct StepLog {
    pub step: usize,
    pub e: f64,
    pub fq: f64,
    pub fv: f64,
    pub fr: f64,
    pub lambda: f64,
    pub grad_norm: f64,
    pub xi_norm: f64,
    pub xi_norm_clipped: f64,
    pub cg_residual: f64,
    pub cg_iterations: usize,
    pub cg_ritz_min: f64,
    pub cg_ritz_max: f64,
    pub accepted: bool,
    pub best_e: f64,
}

/// Wall time spent per phase, milliseconds.
#[derive(Debug, Clone, Default, serde::Serialize)]
pub struct PhaseTimes {
    pub sweep_ms: f64,
    pub metric_ms: f64,
    pub cg_ms: f64,
    pub trial_ms: f64,
}

/// Complete log of a run plus the best parameters seen.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub steps: Vec<StepLog>,
    pub best_e: f64,
    pub best_lambda: f64,
    pub best_step: usize,
    pub best_theta: Vec<f64>,
    /// Energy of the final iterate (also folded into the best tracking).
    pub final_e: f64,
    pub seed: u64,
    pub phase: PhaseTimes,
}

impl RunRecord {
    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(
            out,
            "step,e,fq,fv,fr,lambda,grad_norm,xi_norm,xi_norm_clipped,cg_residual,cg_iterations,cg_ritz_min,cg_ritz_max,accepted,best_e"
        )?;
        for s in &self.steps {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                s.step,
                s.e,
                s.fq,
                s.fv,
                s.fr,
                s.lambda,
                s.grad_norm,
                s.xi_norm,
                s.xi_norm_clipped,
                s.cg_residual,
                s.cg_iterations,
                s.cg_ritz_min,
                s.cg_ritz_max,
                s.accepted,
                s.best_e
            )?;
        }
        Ok(())
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Norm clipping `xi <- min(1, c/||xi||) xi`; returns pre- and post-norms.
pub fn clip_direction(xi: &mut [f64], c: f64) -> (f64, f64) {
    let norm = l2(xi);
    if norm > c {
        let s = c / norm;
        for v in xi.iter_mut() {
            *v *= s;
        }
        (norm, l2(xi))
    } else {
        (norm, norm)
    }
}

/// The backtracking acceptance rule.
pub fn accept_step(e_trial: f64, e_current: f64, e_tol: f64) -> bool {
    e_trial <= e_current + e_tol
}

/// Live state of a run: the map, the fixed particles, best-so-far tracking.
pub struct PwgfState {
    pub config: PwgfConfig,
    pub map: TransportMap,
    pub particles: ParticleSet,
    potential: Potential,
    step_index: usize,
    best_e: f64,
    best_lambda: f64,
    best_step: usize,
    best_theta: Vec<f64>,
    phase: PhaseTimes,
}

impl PwgfState {
    pub fn new(config: PwgfConfig) -> Result<Self> {
        config.validate()?;
        let refs = config.build_references();
        let particles = sample_sign_symmetric(&refs, config.n, config.seed)?;
        let map = TransportMap::random_init(
            config.d,
            config.h,
            config.l,
            config.n_ode,
            config.init_scale,
            config.seed.wrapping_add(1),
        );
        let potential = config.build_potential();
        Ok(Self {
            config,
            map,
            particles,
            potential,
            step_index: 0,
            best_e: f64::INFINITY,
            best_lambda: f64::NAN,
            best_step: 0,
            best_theta: Vec::new(),
        phase: PhaseTimes::default(),
        })
    }

    fn track_best(&mut self, b: &EnergyBreakdown, step: usize, theta: &[f64]) {
        // ties broken by the earliest step
        if b.e < self.best_e {
            self.best_e = b.e;
            self.best_lambda = b.lambda;
            self.best_step = step;
            self.best_theta = theta.to_vec();
        }
    }

    /// One descent step: propose the natural-gradient direction, clip, check,
    /// update. Returns the log row for the state the step departed from.
    pub fn step(&mut self) -> Result<StepLog> {
        let cfg = &self.config;
        let theta = self.map.theta();

        let t0 = Instant::now();
        let (breakdown, grad, jac) = energy::energy_gradient_with_jacobian(
            &self.map,
            &self.particles,
            &self.potential,
            cfg.beta,
        )?;
        self.phase.sweep_ms += t0.elapsed().as_secs_f64() * 1e3;
        self.track_best(&breakdown, self.step_index, &theta);

        let t1 = Instant::now();
        let metric_tensor = metric::assemble_metric(&jac);
        self.phase.metric_ms += t1.elapsed().as_secs_f64() * 1e3;

        let t2 = Instant::now();
        let cg = metric::natural_direction(&metric_tensor, &grad, cfg.n_cg, cfg.eps)?;
        self.phase.cg_ms += t2.elapsed().as_secs_f64() * 1e3;

        let mut xi = cg.direction;
        let (xi_norm, xi_norm_clipped) = clip_direction(&mut xi, cfg.clip);

        let t3 = Instant::now();
        let trial_theta: Vec<f64> = theta
            .iter()
            .zip(&xi)
            .map(|(t, x)| t - cfg.alpha * x)
            .collect();
        let mut trial_map = self.map.clone();
        trial_map.set_theta(&trial_theta)?;
        // A trial that blows up (non-finite state, escaped box) counts as an
        // energy increase and falls back to the plain gradient step.
        let e_trial = match energy::energy(&trial_map, &self.particles, &self.potential, cfg.beta)
        {
            Ok(b) => b.e,
            Err(Error::NonFiniteState { .. }) | Err(Error::NotDiffeomorphism { .. }) => {
                f64::INFINITY
            }
            Err(e) => return Err(e),
        };
        self.phase.trial_ms += t3.elapsed().as_secs_f64() * 1e3;

        let accepted = accept_step(e_trial, breakdown.e, cfg.e_tol);
        if accepted {
            self.map = trial_map;
        } else {
            let gnorm = l2(&grad);
            if gnorm > 0.0 {
                let fallback: Vec<f64> = theta
                    .iter()
                    .zip(&grad)
                    .map(|(t, g)| t - cfg.alpha * g / gnorm)
                    .collect();
                self.map.set_theta(&fallback)?;
            }
        }

        let (ritz_min, ritz_max) = cg.ritz_bounds.unwrap_or((f64::NAN, f64::NAN));
        let log = StepLog {
            step: self.step_index,
            e: breakdown.e,
            fq: breakdown.fq,
            fv: breakdown.fv,
            fr: breakdown.fr,
            lambda: breakdown.lambda,
            grad_norm: l2(&grad),
            xi_norm,
            xi_norm_clipped,
            cg_residual: cg.residual_norm,
            cg_iterations: cg.iterations,
            cg_ritz_min: ritz_min,
            cg_ritz_max: ritz_max,
            accepted,
            best_e: self.best_e,
        };
        self.step_index += 1;
        Ok(log)
    }

    /// Run the remaining steps and finish: evaluates the final iterate so the
    /// best tracking covers it, then returns the record and the map rewound
    /// to the best parameters.
    pub fn finish(mut self, steps: Vec<StepLog>) -> Result<(RunRecord, TransportMap)> {
        let final_b = energy::energy(
            &self.map,
            &self.particles,
            &self.potential,
            self.config.beta,
        )?;
        let theta = self.map.theta();
        self.track_best(&final_b, self.step_index, &theta);
        let mut best_map = self.map.clone();
        best_map.set_theta(&self.best_theta)?;
        Ok((
            RunRecord {
                steps,
                best_e: self.best_e,
                best_lambda: self.best_lambda,
                best_step: self.best_step,
                best_theta: self.best_theta,
                final_e: final_b.e,
                seed: self.config.seed,
                phase: self.phase,
            },
            best_map,
        ))
    }
}

/// Full run: `K` steps from a fresh sign-symmetric particle draw and random
/// zero-bias initialization. Returns the log and the map at the best
/// parameters.
pub fn run(config: &PwgfConfig) -> Result<(RunRecord, TransportMap)> {
    let mut state = PwgfState::new(config.clone())?;
    let mut steps = Vec::with_capacity(config.k);
    for _ in 0..config.k {
        steps.push(state.step()?);
    }
    state.finish(steps)
}
