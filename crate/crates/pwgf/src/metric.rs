//! Pullback metric tensor and the regularized natural-gradient solve.
//!
//! The metric is the Gram-matrix average of per-particle map Jacobians,
//! `G = 1/N sum_i J_i^T J_i`, symmetric positive semi-definite by
//! construction and block-diagonal across axis parameter blocks under the
//! product-map ansatz. It is assembled explicitly by default (the blocks are
//! small); a matrix-free handle over the raw Jacobians implements the same
//! contract for the `(G + eps I) x` product.
//!
//! The descent direction solves `(G + eps I) xi = grad E` by conjugate
//! gradients from a zero initial guess, run for a fixed number of iterations
//! with no residual short-circuit; the iteration cap acts as additional
//! regularization on these very ill-conditioned systems. The final residual
//! and extreme Ritz values (from the Lanczos tridiagonal CG builds) are
//! reported for the run log.

use crate::error::{Error, Result};
use crate::reduce::pair_tree;
use crate::transport::Jacobians;
use rayon::prelude::*;

enum Repr {
    /// One dense `m1 x m1` Gram block per axis.
    Dense { blocks: Vec<Vec<f64>> },
    /// Matrix-free: keep the Jacobian rows and apply `J^T (J x)` on the fly.
    Free { jac: Jacobians },
}

/// The `M x M` pullback metric (block-diagonal storage or matrix-free).
pub struct MetricTensor {
    d: usize,
    m1: usize,
    repr: Repr,
}

impl MetricTensor {
    pub fn m(&self) -> usize {
        self.d * self.m1
    }

    pub fn block_count(&self) -> usize {
        self.d
    }

    /// Dense per-axis block (assembled representation only).
    pub fn block(&self, k: usize) -> Option<&[f64]> {
        match &self.repr {
            Repr::Dense { blocks } => Some(&blocks[k]),
            Repr::Free { .. } => None,
        }
    }

    /// Materialize the full `M x M` matrix (tests, diagnostics).
    pub fn to_dense_full(&self) -> Vec<f64> {
        let m = self.m();
        let m1 = self.m1;
        let mut out = vec![0.0; m * m];
        match &self.repr {
            Repr::Dense { blocks } => {
                for (k, b) in blocks.iter().enumerate() {
                    for a in 0..m1 {
                        for c in 0..m1 {
                            out[(k * m1 + a) * m + (k * m1 + c)] = b[a * m1 + c];
                        }
                    }
                }
            }
            Repr::Free { .. } => {
                let mut x = vec![0.0; m];
                let mut col = vec![0.0; m];
                for j in 0..m {
                    x[j] = 1.0;
                    self.apply(&x, 0.0, &mut col);
                    for i in 0..m {
                        out[i * m + j] = col[i];
                    }
                    x[j] = 0.0;
                }
            }
        }
        out
    }

    /// `out = (G + eps I) x`.
    pub fn apply(&self, x: &[f64], eps: f64, out: &mut [f64]) {
        let m1 = self.m1;
        match &self.repr {
            Repr::Dense { blocks } => {
                for k in 0..self.d {
                    let b = &blocks[k];
                    let xs = &x[k * m1..(k + 1) * m1];
                    let os = &mut out[k * m1..(k + 1) * m1];
                    for a in 0..m1 {
                        let row = &b[a * m1..(a + 1) * m1];
                        let mut acc = 0.0;
                        for c in 0..m1 {
                            acc += row[c] * xs[c];
                        }
                        os[a] = acc + eps * xs[a];
                    }
                }
            }
            Repr::Free { jac } => {
                let n = jac.n;
                let block = 1usize << self.d;
                let n_inv = 1.0 / n as f64;
                let mut buf = [0.0_f64; 8];
                for k in 0..self.d {
                    let xs = &x[k * m1..(k + 1) * m1];
                    let dots: Vec<f64> = (0..n)
                        .map(|i| {
                            let r = jac.row(i, k);
                            let mut acc = 0.0;
                            for c in 0..m1 {
                                acc += r[c] * xs[c];
                            }
                            acc
                        })
                        .collect();
                    let os = &mut out[k * m1..(k + 1) * m1];
                    for a in 0..m1 {
                        let mut acc = 0.0;
                        for blk in 0..n / block {
                            for p in 0..block {
                                let i = blk * block + p;
                                buf[p] = jac.row(i, k)[a] * dots[i];
                            }
                            acc += pair_tree(&buf[..block]);
                        }
                        os[a] = acc * n_inv + eps * xs[a];
                    }
                }
            }
        }
    }
}

/// Assemble the dense block-diagonal metric from per-particle Jacobians.
///
/// Entries are summed pairwise inside each mirror block of particles and
/// sequentially across blocks, so the cross-parity entries (bias x weight
/// under sign-symmetric sampling) cancel to exact zeros and the zero-bias
/// subspace is invariant under the assembled operator.
pub fn assemble_metric(jac: &Jacobians) -> MetricTensor {
    let (n, d, m1) = (jac.n, jac.d, jac.m1);
    let block = 1usize << d;
    debug_assert_eq!(n % block, 0);
    let n_inv = 1.0 / n as f64;
    let blocks: Vec<Vec<f64>> = (0..d)
        .map(|k| {
            let mut g = vec![0.0; m1 * m1];
            // Upper triangle, parallel over row bands; mirrored afterwards.
            g.par_chunks_mut(m1)
                .enumerate()
                .for_each(|(a, row)| {
                    let mut buf = [0.0_f64; 8];
                    for blk in 0..n / block {
                        let base = blk * block;
                        for c in a..m1 {
                            for p in 0..block {
                                let r = jac.row(base + p, k);
                                buf[p] = r[a] * r[c];
                            }
                            row[c] += pair_tree(&buf[..block]);
                        }
                    }
                    for c in a..m1 {
                        row[c] *= n_inv;
                    }
                });
            for a in 0..m1 {
                for c in 0..a {
                    g[a * m1 + c] = g[c * m1 + a];
                }
            }
            g
        })
        .collect();
    MetricTensor {
        d,
        m1,
        repr: Repr::Dense { blocks },
    }
}

/// Matrix-free metric over the raw Jacobians (same `apply` contract).
pub fn matrix_free_metric(jac: Jacobians) -> MetricTensor {
    MetricTensor {
        d: jac.d,
        m1: jac.m1,
        repr: Repr::Free { jac },
    }
}

/// Build a metric directly from dense blocks (tests and oracles).
pub fn from_dense_blocks(d: usize, m1: usize, blocks: Vec<Vec<f64>>) -> Result<MetricTensor> {
    if blocks.len() != d || blocks.iter().any(|b| b.len() != m1 * m1) {
        return Err(Error::ShapeMismatch(format!(
            "expected {d} blocks of {m1}x{m1}"
        )));
    }
    Ok(MetricTensor {
        d,
        m1,
        repr: Repr::Dense { blocks },
    })
}

/// Outcome of the regularized CG solve.
#[derive(Debug, Clone)]
pub struct CgOutcome {
    pub direction: Vec<f64>,
    pub residual_norm: f64,
    pub iterations: usize,
    /// Residual norms, one entry per iteration starting at iteration 0.
    pub residual_history: Vec<f64>,
    /// Estimated extreme eigenvalues of `G + eps I` from the Lanczos
    /// tridiagonal (absent when the solve exits before two iterations).
    pub ritz_bounds: Option<(f64, f64)>,
}

/// Solve `(G + eps I) xi = rhs` by CG from a zero start, capped at `n_cg`
/// iterations (no residual-based early exit).
pub fn natural_direction(
    g: &MetricTensor,
    rhs: &[f64],
    n_cg: usize,
    eps: f64,
) -> Result<CgOutcome> {
    let m = g.m();
    assert_eq!(rhs.len(), m, "rhs length mismatch");
    let mut x = vec![0.0; m];
    let mut r = rhs.to_vec();
    let mut rs: f64 = r.iter().map(|v| v * v).sum();
    let mut history = vec![rs.sqrt()];
    if rs == 0.0 {
        return Ok(CgOutcome {
            direction: x,
            residual_norm: 0.0,
            iterations: 0,
            residual_history: history,
            ritz_bounds: None,
        });
    }
    let mut p = r.clone();
    let mut ap = vec![0.0; m];
    let mut alphas: Vec<f64> = Vec::new();
    let mut betas: Vec<f64> = Vec::new();
    let mut iterations = 0;
    for it in 0..n_cg {
        g.apply(&p, eps, &mut ap);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if pap <= 0.0 {
            // Exact zero residual (or loss of positivity from rounding);
            // nothing further to extract.
            break;
        }
        let alpha = rs / pap;
        for i in 0..m {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rs_new: f64 = r.iter().map(|v| v * v).sum();
        if !(rs_new.is_finite() && alpha.is_finite()) {
            return Err(Error::SolverBreakdown {
                iteration: it,
                residual: rs_new.sqrt(),
            });
        }
        history.push(rs_new.sqrt());
        iterations = it + 1;
        if rs_new == 0.0 {
            alphas.push(alpha);
            break;
        }
        let beta = rs_new / rs;
        for i in 0..m {
            p[i] = r[i] + beta * p[i];
        }
        alphas.push(alpha);
        betas.push(beta);
        rs = rs_new;
    }
    let ritz = ritz_extremes(&alphas, &betas);
    Ok(CgOutcome {
        direction: x,
        residual_norm: *history.last().unwrap(),
        iterations,
        residual_history: history,
        ritz_bounds: ritz,
    })
}

/// Extreme eigenvalues of the Lanczos tridiagonal implied by the CG
/// coefficients: diag `1/a_i + b_{i-1}/a_{i-1}`, off-diag `sqrt(b_i)/a_i`.
fn ritz_extremes(alphas: &[f64], betas: &[f64]) -> Option<(f64, f64)> {
    let k = alphas.len();
    if k < 2 {
        return None;
    }
    let mut diag = vec![0.0; k];
    let mut off = vec![0.0; k - 1];
    for i in 0..k {
        diag[i] = 1.0 / alphas[i];
        if i > 0 {
            diag[i] += betas[i - 1] / alphas[i - 1];
        }
        if i + 1 < k {
            off[i] = betas[i].sqrt() / alphas[i];
        }
    }
    // Gershgorin bracket, then bisection with the Sturm count.
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..k {
        let r = (if i > 0 { off[i - 1].abs() } else { 0.0 })
            + (if i + 1 < k { off[i].abs() } else { 0.0 });
        lo = lo.min(diag[i] - r);
        hi = hi.max(diag[i] + r);
    }
    let count_below = |x: f64| -> usize {
        let mut d = diag[0] - x;
        let mut count = if d < 0.0 { 1 } else { 0 };
        for i in 1..k {
            let denom = if d.abs() < 1e-300 { 1e-300_f64.copysign(d) } else { d };
            d = diag[i] - x - off[i - 1] * off[i - 1] / denom;
            if d < 0.0 {
                count += 1;
            }
        }
        count
    };
    let bisect = |target: usize| -> f64 {
        let (mut a, mut b) = (lo, hi);
        for _ in 0..80 {
            let mid = 0.5 * (a + b);
            if count_below(mid) >= target {
                b = mid;
            } else {
                a = mid;
            }
        }
        0.5 * (a + b)
    };
    Some((bisect(1), bisect(k)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference::{sample_sign_symmetric, ReferenceDensity};
    use crate::transport::{parameter_jacobian, TransportMap};
    use nalgebra::{DMatrix, DVector};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_spd(m: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f64> = (0..m * m).map(|_| rng.gen::<f64>() - 0.5).collect();
        // A^T A + small shift
        let mut g = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                let mut acc = 0.0;
                for k in 0..m {
                    acc += a[k * m + i] * a[k * m + j];
                }
                g[i * m + j] = acc + if i == j { 1e-3 } else { 0.0 };
            }
        }
        g
    }

    fn dense_solve(g: &[f64], rhs: &[f64], eps: f64) -> Vec<f64> {
        let m = rhs.len();
        let mut a = DMatrix::from_fn(m, m, |i, j| g[i * m + j]);
        for i in 0..m {
            a[(i, i)] += eps;
        }
        let b = DVector::from_column_slice(rhs);
        let chol = a.cholesky().expect("SPD");
        chol.solve(&b).iter().copied().collect()
    }

    #[test]
    fn single_particle_gram_is_rank_one_outer_product() {
        let m1 = 5;
        let row: Vec<f64> = (0..m1).map(|i| (i as f64 + 1.0) * 0.3).collect();
        let jac = Jacobians::from_raw(1, 1, m1, row.clone()).unwrap();
        let g = assemble_metric(&jac);
        let b = g.block(0).unwrap();
        for a in 0..m1 {
            for c in 0..m1 {
                assert_eq!(b[a * m1 + c], row[a] * row[c]);
            }
        }
        let mat = DMatrix::from_fn(m1, m1, |i, j| b[i * m1 + j]);
        let eig = mat.symmetric_eigenvalues();
        let norm2: f64 = row.iter().map(|v| v * v).sum();
        let mut vals: Vec<f64> = eig.iter().copied().collect();
        vals.sort_by(|x, y| x.partial_cmp(y).unwrap());
        assert!((vals[m1 - 1] - norm2).abs() < 1e-12);
        for v in &vals[..m1 - 1] {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn orthogonal_rows_give_half_squared_norms() {
        let m1 = 4;
        let r1 = vec![2.0, 0.0, 0.0, 0.0];
        let r2 = vec![0.0, 0.0, 3.0, 0.0];
        let jac =
            Jacobians::from_raw(2, 1, m1, [r1, r2].concat()).unwrap();
        let g = assemble_metric(&jac);
        let b = g.block(0).unwrap();
        let mat = DMatrix::from_fn(m1, m1, |i, j| b[i * m1 + j]);
        let mut vals: Vec<f64> = mat.symmetric_eigenvalues().iter().copied().collect();
        vals.sort_by(|x, y| x.partial_cmp(y).unwrap());
        assert!((vals[3] - 4.5).abs() < 1e-14); // 3^2 / 2
        assert!((vals[2] - 2.0).abs() < 1e-14); // 2^2 / 2
        assert!(vals[0].abs() < 1e-14 && vals[1].abs() < 1e-14);
    }

    fn jacobians_2d() -> Jacobians {
        let refs = vec![
            ReferenceDensity::gauss_mix_default(16.0),
            ReferenceDensity::gauss_mix_default(16.0),
        ];
        let p = sample_sign_symmetric(&refs, 32, 0).unwrap();
        let map = TransportMap::random_init(2, 4, 16.0, 10, 0.1, 1);
        parameter_jacobian(&map, &p).unwrap()
    }

    #[test]
    fn product_map_metric_is_block_diagonal_and_symmetric() {
        let jac = jacobians_2d();
        let g = assemble_metric(&jac);
        let m = g.m();
        let m1 = m / 2;
        let full = g.to_dense_full();
        for i in 0..m {
            for j in 0..m {
                assert_eq!(full[i * m + j], full[j * m + i]);
                if (i < m1) != (j < m1) {
                    assert_eq!(full[i * m + j], 0.0);
                }
            }
        }
    }

    #[test]
    fn metric_is_positive_semidefinite() {
        let jac = jacobians_2d();
        let g = assemble_metric(&jac);
        let m = g.m();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut out = vec![0.0; m];
        for _ in 0..16 {
            let v: Vec<f64> = (0..m).map(|_| rng.gen::<f64>() - 0.5).collect();
            g.apply(&v, 0.0, &mut out);
            let quad: f64 = v.iter().zip(&out).map(|(a, b)| a * b).sum();
            let norm2: f64 = v.iter().map(|a| a * a).sum();
            assert!(quad >= -1e-12 * norm2, "v^T G v = {quad}");
        }
    }

    #[test]
    fn permuting_particles_leaves_metric_unchanged() {
        let jac = jacobians_2d();
        let g0 = assemble_metric(&jac);
        // Reverse whole mirror blocks (preserves the block layout invariant).
        let block = 4;
        let blocks_n = jac.n / block;
        let mut rows = Vec::new();
        for b in (0..blocks_n).rev() {
            for p in 0..block {
                for k in 0..jac.d {
                    rows.extend_from_slice(jac.row(b * block + p, k));
                }
            }
        }
        let jac_perm = Jacobians::from_raw(jac.n, jac.d, jac.m1, rows).unwrap();
        let g1 = assemble_metric(&jac_perm);
        let f0 = g0.to_dense_full();
        let f1 = g1.to_dense_full();
        let scale = f0.iter().fold(0.0_f64, |a, b| a.max(b.abs()));
        for (a, b) in f0.iter().zip(&f1) {
            assert!((a - b).abs() <= 1e-12 * scale.max(1.0));
        }
    }

    #[test]
    fn matrix_free_apply_matches_dense() {
        let jac = jacobians_2d();
        let dense = assemble_metric(&jac);
        let free = matrix_free_metric(jac);
        let m = dense.m();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v: Vec<f64> = (0..m).map(|_| rng.gen::<f64>() - 0.5).collect();
        let mut yd = vec![0.0; m];
        let mut yf = vec![0.0; m];
        dense.apply(&v, 1e-6, &mut yd);
        free.apply(&v, 1e-6, &mut yf);
        let scale = yd.iter().fold(0.0_f64, |a, b| a.max(b.abs()));
        for (a, b) in yd.iter().zip(&yf) {
            assert!((a - b).abs() <= 1e-13 * scale.max(1.0));
        }
    }

    #[test]
    fn zero_metric_gives_rhs_over_eps() {
        let g = from_dense_blocks(1, 3, vec![vec![0.0; 9]]).unwrap();
        let rhs = vec![1.0, -2.0, 0.5];
        let eps = 1e-6;
        let out = natural_direction(&g, &rhs, 10, eps).unwrap();
        for (x, r) in out.direction.iter().zip(&rhs) {
            assert!((x - r / eps).abs() <= 1e-9 * (r / eps).abs().max(1.0));
        }
    }

    #[test]
    fn identity_metric_converges_in_one_iteration() {
        let m1 = 4;
        let mut id = vec![0.0; m1 * m1];
        for i in 0..m1 {
            id[i * m1 + i] = 1.0;
        }
        let g = from_dense_blocks(1, m1, vec![id]).unwrap();
        let rhs = vec![0.3, -1.0, 2.0, 0.7];
        let eps = 1e-6;
        let out = natural_direction(&g, &rhs, 50, eps).unwrap();
        assert!(out.residual_history[1] <= 1e-12);
        for (x, r) in out.direction.iter().zip(&rhs) {
            assert!((x - r / (1.0 + eps)).abs() <= 1e-12);
        }
    }

    #[test]
    fn zero_rhs_returns_zero_direction() {
        let g = from_dense_blocks(1, 3, vec![random_spd(3, 0)]).unwrap();
        let out = natural_direction(&g, &[0.0; 3], 10, 1e-6).unwrap();
        assert_eq!(out.direction, vec![0.0; 3]);
        assert_eq!(out.iterations, 0);
    }

    #[test]
    fn cg_matches_dense_cholesky_solve() {
        for (m, seed) in [(20usize, 0u64), (20, 1), (50, 2)] {
            let gm = random_spd(m, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let rhs: Vec<f64> = (0..m).map(|_| rng.gen::<f64>() - 0.5).collect();
            let eps = 1e-6;
            let g = from_dense_blocks(1, m, vec![gm.clone()]).unwrap();
            let out = natural_direction(&g, &rhs, 200, eps).unwrap();
            let exact = dense_solve(&gm, &rhs, eps);
            let norm: f64 = exact.iter().map(|v| v * v).sum::<f64>().sqrt();
            let diff: f64 = out
                .direction
                .iter()
                .zip(&exact)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            assert!(diff / norm <= 1e-8, "m={m} seed={seed}: rel {}", diff / norm);
        }
    }

    #[test]
    fn residual_history_is_nonincreasing_on_spd_systems() {
        let m = 12;
        let gm = random_spd(m, 7);
        let g = from_dense_blocks(1, m, vec![gm]).unwrap();
        let rhs: Vec<f64> = (0..m).map(|i| (i as f64 * 0.37).sin()).collect();
        let out = natural_direction(&g, &rhs, 40, 1e-6).unwrap();
        for w in out.residual_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-10 * (1.0 + w[0]));
        }
    }

    #[test]
    fn block_solves_match_the_full_solve() {
        let m1 = 6;
        let b0 = random_spd(m1, 3);
        let b1 = random_spd(m1, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rhs: Vec<f64> = (0..2 * m1).map(|_| rng.gen::<f64>() - 0.5).collect();
        let full = from_dense_blocks(2, m1, vec![b0.clone(), b1.clone()]).unwrap();
        let whole = natural_direction(&full, &rhs, 200, 1e-6).unwrap();
        let g0 = from_dense_blocks(1, m1, vec![b0]).unwrap();
        let g1 = from_dense_blocks(1, m1, vec![b1]).unwrap();
        let x0 = natural_direction(&g0, &rhs[..m1], 200, 1e-6).unwrap();
        let x1 = natural_direction(&g1, &rhs[m1..], 200, 1e-6).unwrap();
        let cat: Vec<f64> = x0
            .direction
            .iter()
            .chain(x1.direction.iter())
            .copied()
            .collect();
        let norm: f64 = cat.iter().map(|v| v * v).sum::<f64>().sqrt();
        let diff: f64 = whole
            .direction
            .iter()
            .zip(&cat)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(diff / norm <= 1e-8);
    }

    #[test]
    fn ritz_bounds_bracket_the_spectrum() {
        let m = 16;
        let gm = random_spd(m, 11);
        let g = from_dense_blocks(1, m, vec![gm.clone()]).unwrap();
        let rhs: Vec<f64> = (0..m).map(|i| 1.0 + (i as f64).cos()).collect();
        let eps = 1e-6;
        let out = natural_direction(&g, &rhs, m, eps).unwrap();
        let (lo, hi) = out.ritz_bounds.unwrap();
        let mat = DMatrix::from_fn(m, m, |i, j| gm[i * m + j] + if i == j { eps } else { 0.0 });
        let mut eig: Vec<f64> = mat.symmetric_eigenvalues().iter().copied().collect();
        eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
        // Ritz values lie inside the spectrum and approach the extremes.
        assert!(lo >= eig[0] - 1e-8 && hi <= eig[m - 1] + 1e-8);
        assert!(hi >= 0.5 * eig[m - 1]);
    }
}
