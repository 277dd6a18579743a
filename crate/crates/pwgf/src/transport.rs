//! Boundary-preserving neural-ODE transport maps.
//!
//! Per coordinate, a particle at `z` flows over pseudo-time `[0, 1]` under
//! `dw/dtau = f(w) = (1 - w^2/L^2) g(w)` with `g` a small tanh network. The
//! boundary factor vanishes at `w = +-L`, so the interval endpoints are fixed
//! points bit-exactly and the open interval is invariant. For `d > 1` the map
//! is a product of independent per-axis maps.
//!
//! Alongside the position we evolve the log-Jacobian `ell = log T'(z)`, the
//! Jacobian `J = exp(ell)` and the spatial derivative `ell' = d ell / dz`:
//!
//! ```text
//! w'    = f(w)
//! ell'  = f'(w)          (then J = exp(ell))
//! ellp' = f''(w) * J     (with the freshly updated J)
//! ```
//!
//! integrated by forward Euler with `n_ode` substeps. This gives the score of
//! the pushed density without any numerical differentiation. Gradients with
//! respect to the parameters differentiate the Euler recursion itself, so the
//! optimizer, the metric tensor and the estimators all live on the same
//! discrete object.

use crate::error::{Error, Result};
use crate::net::{self, NetEval, NetScratch, NetworkParams};
use crate::reference::ParticleSet;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Product transport map: one network per coordinate, shared box and substep
/// count. The flat parameter vector is the concatenation of the per-axis
/// flattened networks, `M = d * M1`.
#[derive(Debug, Clone)]
pub struct TransportMap {
    pub axes: Vec<NetworkParams>,
    pub l: f64,
    pub n_ode: usize,
}

impl TransportMap {
    /// Identity map: all parameters zero.
    pub fn identity(d: usize, h: usize, l: f64, n_ode: usize) -> Self {
        Self {
            axes: (0..d).map(|_| NetworkParams::zeros(h)).collect(),
            l,
            n_ode,
        }
    }

    /// Small random weights (standard deviation `scale`), zero biases. All
    /// axes start from the same draw, which keeps the product map symmetric
    /// under axis exchange at initialization.
    pub fn random_init(d: usize, h: usize, l: f64, n_ode: usize, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = NetworkParams::random(h, scale, &mut rng);
        Self {
            axes: vec![params; d],
            l,
            n_ode,
        }
    }

    pub fn d(&self) -> usize {
        self.axes.len()
    }

    pub fn width(&self) -> usize {
        self.axes[0].h
    }

    /// Per-axis parameter count.
    pub fn m1(&self) -> usize {
        NetworkParams::param_count(self.axes[0].h)
    }

    /// Total parameter count `d * M1`.
    pub fn m(&self) -> usize {
        self.d() * self.m1()
    }

    pub fn theta(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.m());
        for p in &self.axes {
            out.extend_from_slice(&p.to_flat());
        }
        out
    }

    pub fn set_theta(&mut self, theta: &[f64]) -> Result<()> {
        let m1 = self.m1();
        if theta.len() != self.m() {
            return Err(Error::ShapeMismatch(format!(
                "theta length {} does not match {} axes x {} parameters",
                theta.len(),
                self.d(),
                m1
            )));
        }
        let h = self.width();
        for (k, chunk) in theta.chunks(m1).enumerate() {
            self.axes[k] = NetworkParams::from_flat(h, chunk)?;
        }
        Ok(())
    }

    /// Forward map of a single coordinate along axis `k` (position only).
    pub fn map_axis(&self, k: usize, z: f64) -> f64 {
        let p = &self.axes[k];
        let dt = 1.0 / self.n_ode as f64;
        let mut w = z;
        for _ in 0..self.n_ode {
            let (g, _, _) = net::eval3(p, w);
            let (f, _, _) = velocity_from(w, self.l, g, 0.0, 0.0);
            w += dt * f;
        }
        w
    }

    /// Position and log-Jacobian along axis `k` (no score tracking).
    pub(crate) fn map_axis_logj(&self, k: usize, z: f64) -> (f64, f64) {
        let p = &self.axes[k];
        let dt = 1.0 / self.n_ode as f64;
        let mut w = z;
        let mut ell = 0.0;
        for _ in 0..self.n_ode {
            let (g, dg, _) = net::eval3(p, w);
            let (f, fp, _) = velocity_from(w, self.l, g, dg, 0.0);
            w += dt * f;
            ell += dt * fp;
        }
        (w, ell)
    }
}

/// Augmented per-particle, per-axis state after integration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugState {
    /// Final position `T(z)`.
    pub w: f64,
    /// Log-Jacobian `log T'(z)`.
    pub ell: f64,
    /// Jacobian `exp(ell)`.
    pub jac: f64,
    /// Spatial derivative of the log-Jacobian.
    pub ell_prime: f64,
}

impl AugState {
    fn initial(z: f64) -> Self {
        Self {
            w: z,
            ell: 0.0,
            jac: 1.0,
            ell_prime: 0.0,
        }
    }
}

/// Boundary-factor chain: turns `(g, g', g'')` at `w` into `(f, f', f'')`.
#[inline]
pub(crate) fn velocity_from(w: f64, l: f64, g: f64, dg: f64, d2g: f64) -> (f64, f64, f64) {
    let bf = 1.0 - (w * w) / (l * l);
    let bfp = -2.0 * w / (l * l);
    let bfpp = -2.0 / (l * l);
    let f = bf * g;
    let fp = bfp * g + bf * dg;
    let fpp = bfpp * g + 2.0 * bfp * dg + bf * d2g;
    (f, fp, fpp)
}

/// Velocity field and its first two spatial derivatives at `w`.
pub fn velocity(p: &NetworkParams, l: f64, w: f64) -> (f64, f64, f64) {
    let (g, dg, d2g) = net::eval3(p, w);
    velocity_from(w, l, g, dg, d2g)
}

/// One Euler substep of the augmented state. `ell` is advanced before `J` is
/// refreshed, and the refreshed `J` drives the `ell'` update.
#[inline]
fn substep(s: &mut AugState, dt: f64, f: f64, fp: f64, fpp: f64) {
    s.w += dt * f;
    s.ell += dt * fp;
    s.jac = s.ell.exp();
    s.ell_prime += dt * fpp * s.jac;
}

fn integrate_axis(p: &NetworkParams, l: f64, n_ode: usize, z: f64) -> AugState {
    let dt = 1.0 / n_ode as f64;
    let mut s = AugState::initial(z);
    for _ in 0..n_ode {
        let (g, dg, d2g) = net::eval3(p, s.w);
        let (f, fp, fpp) = velocity_from(s.w, l, g, dg, d2g);
        substep(&mut s, dt, f, fp, fpp);
    }
    s
}

fn validate_state(s: &AugState, l: f64, particle: usize) -> Result<()> {
    if !(s.w.is_finite() && s.ell.is_finite() && s.jac.is_finite() && s.ell_prime.is_finite()) {
        return Err(Error::NonFiniteState { particle });
    }
    if s.w.abs() >= l {
        return Err(Error::NonFiniteState { particle });
    }
    Ok(())
}

fn first_error<T>(results: Vec<Result<T>>) -> Result<Vec<T>> {
    let mut out = Vec::with_capacity(results.len());
    for r in results {
        out.push(r?);
    }
    Ok(out)
}

/// Integrate the augmented ODE for every particle and axis. Output is
/// particle-major: entry `i * d + k` is particle `i`, axis `k`.
pub fn integrate_augmented(map: &TransportMap, particles: &ParticleSet) -> Result<Vec<AugState>> {
    let d = map.d();
    if particles.d != d {
        return Err(Error::ShapeMismatch(format!(
            "map has {} axes, particles have {}",
            d, particles.d
        )));
    }
    let per: Vec<Result<Vec<AugState>>> = (0..particles.n)
        .into_par_iter()
        .map(|i| {
            let mut out = Vec::with_capacity(d);
            for k in 0..d {
                let s = integrate_axis(&map.axes[k], map.l, map.n_ode, particles.coord(i, k));
                validate_state(&s, map.l, i)?;
                out.push(s);
            }
            Ok(out)
        })
        .collect();
    Ok(first_error(per)?.into_iter().flatten().collect())
}

/// Pushed density at the particle images: `rho(x_i) = exp(log mu(z_i) - ell_i)`
/// with the product map's additive log-Jacobian.
pub fn density_at_particles(particles: &ParticleSet, aug: &[AugState]) -> Vec<f64> {
    let d = particles.d;
    (0..particles.n)
        .map(|i| {
            let mut log_rho = 0.0;
            for k in 0..d {
                log_rho += particles.log_mu[i * d + k];
            }
            for k in 0..d {
                log_rho -= aug[i * d + k].ell;
            }
            log_rho.exp()
        })
        .collect()
}

/// Per-axis score of the pushed density at the particle images:
/// `s_k = (d/dz log mu_k - ell'_k) / J_k`. Errors if any Jacobian fails to be
/// positive.
pub fn score_at_particles(particles: &ParticleSet, aug: &[AugState]) -> Result<Vec<f64>> {
    let d = particles.d;
    let mut out = vec![0.0; particles.n * d];
    for i in 0..particles.n {
        for k in 0..d {
            let a = &aug[i * d + k];
            if !(a.jac > 0.0) {
                return Err(Error::NotDiffeomorphism {
                    particle: i,
                    jacobian: a.jac,
                });
            }
            out[i * d + k] = (particles.score_mu[i * d + k] - a.ell_prime) / a.jac;
        }
    }
    Ok(out)
}

/// One recorded substep: input position, network evaluation there, and the
/// post-update Jacobian (needed by the reverse pass).
pub(crate) struct SubstepTape {
    pub w: f64,
    pub ev: NetEval,
    pub j_next: f64,
}

/// Forward integration of one axis with a full tape.
pub(crate) fn forward_taped(
    p: &NetworkParams,
    l: f64,
    n_ode: usize,
    z: f64,
) -> (AugState, Vec<SubstepTape>) {
    let dt = 1.0 / n_ode as f64;
    let mut s = AugState::initial(z);
    let mut tape = Vec::with_capacity(n_ode);
    for _ in 0..n_ode {
        let ev = net::eval(p, s.w);
        let w_in = s.w;
        let (f, fp, fpp) = velocity_from(w_in, l, ev.g, ev.dg, ev.d2g);
        substep(&mut s, dt, f, fp, fpp);
        tape.push(SubstepTape {
            w: w_in,
            ev,
            j_next: s.jac,
        });
    }
    (s, tape)
}

/// Reverse sweep for the energy gradient. Starting from cotangents of the
/// final `(w, ell, ell')`, accumulates the parameter gradient of the traced
/// axis into `out` (length `M1`).
pub(crate) fn reverse_energy_chain(
    p: &NetworkParams,
    l: f64,
    n_ode: usize,
    tape: &[SubstepTape],
    mut lam_w: f64,
    mut lam_ell: f64,
    lam_ellp: f64,
    scratch: &mut NetScratch,
    out: &mut [f64],
) {
    let dt = 1.0 / n_ode as f64;
    let l2 = l * l;
    for t in tape.iter().rev() {
        let ev = &t.ev;
        let bf = 1.0 - (t.w * t.w) / l2;
        let bfp = -2.0 * t.w / l2;
        let bfpp = -2.0 / l2;
        let fp = bfp * ev.g + bf * ev.dg;
        let fpp = bfpp * ev.g + 2.0 * bfp * ev.dg + bf * ev.d2g;
        let fppp = -(6.0 / l2) * ev.dg - (6.0 * t.w / l2) * ev.d2g + bf * ev.d3g;

        // ell_{n+1} also feeds the ell' update through J = exp(ell_{n+1}).
        let lam_ell_plus = lam_ell + lam_ellp * dt * fpp * t.j_next;
        let a = lam_w * dt;
        let b = lam_ell_plus * dt;
        let c = lam_ellp * dt * t.j_next;

        let lg = a * bf + b * bfp + c * bfpp;
        let ldg = b * bf + c * 2.0 * bfp;
        let ld2g = c * bf;
        net::backprop_acc(p, &ev.tape, lg, ldg, ld2g, scratch, out);

        lam_w += a * fp + b * fpp + c * fppp;
        lam_ell = lam_ell_plus;
    }
}

/// Reverse sweep for the map Jacobian: gradient of the final position with
/// respect to the axis parameters, accumulated into `out`.
pub(crate) fn reverse_position_chain(
    p: &NetworkParams,
    l: f64,
    n_ode: usize,
    tape: &[SubstepTape],
    scratch: &mut NetScratch,
    out: &mut [f64],
) {
    let dt = 1.0 / n_ode as f64;
    let l2 = l * l;
    let mut lam = 1.0;
    for t in tape.iter().rev() {
        let ev = &t.ev;
        let bf = 1.0 - (t.w * t.w) / l2;
        let bfp = -2.0 * t.w / l2;
        let fp = bfp * ev.g + bf * ev.dg;
        let a = lam * dt;
        net::backprop_acc(p, &ev.tape, a * bf, 0.0, 0.0, scratch, out);
        lam += a * fp;
    }
}

/// Per-particle parameter Jacobians of the map. Under the product ansatz the
/// `d x M` Jacobian of particle `i` is block-sparse: axis `k` only depends on
/// its own `M1` parameters, so only those rows are stored.
#[derive(Debug, Clone)]
pub struct Jacobians {
    pub n: usize,
    pub d: usize,
    pub m1: usize,
    /// `n * d` rows of length `m1`; row `(i, k)` is `d T_k(z_i) / d theta_k`.
    rows: Vec<f64>,
}

impl Jacobians {
    /// Row `(i, k)`.
    pub fn row(&self, i: usize, k: usize) -> &[f64] {
        let start = (i * self.d + k) * self.m1;
        &self.rows[start..start + self.m1]
    }

    /// Assemble from raw rows (mainly for tests): `rows` is `n * d * m1`.
    pub fn from_raw(n: usize, d: usize, m1: usize, rows: Vec<f64>) -> Result<Self> {
        if rows.len() != n * d * m1 {
            return Err(Error::ShapeMismatch(format!(
                "expected {} row entries, got {}",
                n * d * m1,
                rows.len()
            )));
        }
        Ok(Self { n, d, m1, rows })
    }

    /// Dense `d x M` Jacobian of one particle (zeros off the axis blocks).
    pub fn dense_for(&self, i: usize) -> Vec<f64> {
        let m = self.d * self.m1;
        let mut out = vec![0.0; self.d * m];
        for k in 0..self.d {
            let row = self.row(i, k);
            out[k * m + k * self.m1..k * m + (k + 1) * self.m1].copy_from_slice(row);
        }
        out
    }
}

/// Exact parameter Jacobian of the Euler-discretized map at every particle.
pub fn parameter_jacobian(map: &TransportMap, particles: &ParticleSet) -> Result<Jacobians> {
    let d = map.d();
    if particles.d != d {
        return Err(Error::ShapeMismatch(format!(
            "map has {} axes, particles have {}",
            d, particles.d
        )));
    }
    let m1 = map.m1();
    let per: Vec<Result<Vec<f64>>> = (0..particles.n)
        .into_par_iter()
        .map(|i| {
            let mut rows = vec![0.0; d * m1];
            let mut scratch = NetScratch::default();
            for k in 0..d {
                let (state, tape) =
                    forward_taped(&map.axes[k], map.l, map.n_ode, particles.coord(i, k));
                validate_state(&state, map.l, i)?;
                reverse_position_chain(
                    &map.axes[k],
                    map.l,
                    map.n_ode,
                    &tape,
                    &mut scratch,
                    &mut rows[k * m1..(k + 1) * m1],
                );
            }
            Ok(rows)
        })
        .collect();
    let rows: Vec<f64> = first_error(per)?.into_iter().flatten().collect();
    Ok(Jacobians {
        n: particles.n,
        d,
        m1,
        rows,
    })
}
