//! Grid reconstruction of the wavefunction and warm-start interpolation.
//!
//! A trained map is evaluated on a uniform grid in physical space: per axis
//! the monotone 1D map is inverted by bisection, the pushed density
//! `rho_k(x) = mu_k(z(x)) exp(-ell(z(x)))` is tabulated on the axis grid, and
//! the product over axes gives `rho` at every node. The wavefunction is
//! `u = sqrt(rho)`, normalized in the discrete (trapezoid) L2 norm. Boundary
//! nodes are exactly zero.
//!
//! [`interpolate_to_fd`] resamples a grid function onto the interior grid of
//! a finite-difference problem: multilinear interpolation on the source's
//! interior nodes (with linear extension inside the two boundary cells, so
//! constants and linear ramps reproduce exactly), boundary zeros forced,
//! then renormalization.

use crate::error::{Error, Result};
use crate::reference::ReferenceDensity;
use crate::transport::TransportMap;
use rayon::prelude::*;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

/// Scalar field sampled on a uniform tensor grid over `[-L, L]^d`, boundary
/// nodes included and required to be exactly zero. The discrete L2 norm is
/// the trapezoid rule, which with zero boundary reduces to `h^d` times the
/// plain nodal sum.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    pub d: usize,
    /// Nodes per axis, boundary included (`n >= 3`).
    pub n: usize,
    /// Half-width of the box.
    pub l: f64,
    /// `n^d` values, row-major (last axis fastest).
    pub values: Vec<f64>,
}

impl GridFunction {
    pub fn new(d: usize, n: usize, l: f64, values: Vec<f64>) -> Result<Self> {
        if d == 0 || d > 3 || n < 3 {
            return Err(Error::InvalidGrid(format!("unsupported shape d={d}, n={n}")));
        }
        if values.len() != n.pow(d as u32) {
            return Err(Error::ShapeMismatch(format!(
                "expected {} values, got {}",
                n.pow(d as u32),
                values.len()
            )));
        }
        Ok(Self { d, n, l, values })
    }

    /// Grid spacing `2L / (n - 1)`.
    pub fn h(&self) -> f64 {
        2.0 * self.l / (self.n - 1) as f64
    }

    /// Coordinate of node index `i` along any axis.
    pub fn coord(&self, i: usize) -> f64 {
        -self.l + i as f64 * self.h()
    }

    /// Trapezoid L2 norm (exact nodal sum thanks to the zero boundary).
    pub fn l2_norm(&self) -> f64 {
        let sum: f64 = self.values.iter().map(|v| v * v).sum();
        (self.h().powi(self.d as i32) * sum).sqrt()
    }

    pub fn normalize(&mut self) -> Result<()> {
        let norm = self.l2_norm();
        if !(norm > 0.0) {
            return Err(Error::InvalidGrid("cannot normalize a zero field".into()));
        }
        for v in self.values.iter_mut() {
            *v /= norm;
        }
        Ok(())
    }

    /// True when every node on the box boundary is exactly zero.
    pub fn boundary_is_zero(&self) -> bool {
        let n = self.n;
        let idx = |multi: &[usize]| -> usize {
            multi.iter().fold(0, |acc, &i| acc * n + i)
        };
        let mut multi = vec![0usize; self.d];
        // walk all nodes; cheap relative to everything else done with grids
        loop {
            if multi.iter().any(|&i| i == 0 || i == n - 1)
                && self.values[idx(&multi)] != 0.0
            {
                return false;
            }
            let mut axis = self.d;
            loop {
                if axis == 0 {
                    return true;
                }
                axis -= 1;
                multi[axis] += 1;
                if multi[axis] < n {
                    break;
                }
                multi[axis] = 0;
            }
        }
    }

    /// Values at the interior nodes only, row-major over `(n-2)^d`.
    pub fn interior(&self) -> Vec<f64> {
        let n = self.n;
        let ni = n - 2;
        let mut out = Vec::with_capacity(ni.pow(self.d as u32));
        match self.d {
            1 => {
                out.extend_from_slice(&self.values[1..n - 1]);
            }
            2 => {
                for i in 1..n - 1 {
                    out.extend_from_slice(&self.values[i * n + 1..i * n + n - 1]);
                }
            }
            _ => {
                for i in 1..n - 1 {
                    for j in 1..n - 1 {
                        let base = (i * n + j) * n;
                        out.extend_from_slice(&self.values[base + 1..base + n - 1]);
                    }
                }
            }
        }
        out
    }

    /// Rebuild a grid function from interior values (boundary zeros).
    pub fn from_interior(d: usize, n_interior: usize, l: f64, interior: &[f64]) -> Result<Self> {
        let n = n_interior + 2;
        if interior.len() != n_interior.pow(d as u32) {
            return Err(Error::ShapeMismatch(format!(
                "expected {} interior values, got {}",
                n_interior.pow(d as u32),
                interior.len()
            )));
        }
        let mut values = vec![0.0; n.pow(d as u32)];
        match d {
            1 => values[1..n - 1].copy_from_slice(interior),
            2 => {
                for i in 0..n_interior {
                    let src = &interior[i * n_interior..(i + 1) * n_interior];
                    values[(i + 1) * n + 1..(i + 1) * n + 1 + n_interior].copy_from_slice(src);
                }
            }
            _ => {
                for i in 0..n_interior {
                    for j in 0..n_interior {
                        let src = &interior
                            [(i * n_interior + j) * n_interior..(i * n_interior + j + 1) * n_interior];
                        let base = ((i + 1) * n + (j + 1)) * n + 1;
                        values[base..base + n_interior].copy_from_slice(src);
                    }
                }
            }
        }
        Self::new(d, n, l, values)
    }

    /// Write the `.f64` + `.json` file pair under `stem`.
    pub fn write_files(&self, stem: &Path) -> Result<()> {
        let bin_path = stem.with_extension("f64");
        let mut buf = Vec::with_capacity(self.values.len() * 8);
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(&bin_path, &buf)?;
        let sidecar = serde_json::json!({
            "d": self.d,
            "n": self.n,
            "l": self.l,
            "h": self.h(),
            "order": "row-major",
            "norm": "trapezoid",
            "dtype": "f64-le",
        });
        fs::write(
            stem.with_extension("json"),
            serde_json::to_string_pretty(&sidecar).expect("static json"),
        )?;
        Ok(())
    }

    /// Read a `.f64` + `.json` pair written by [`GridFunction::write_files`].
    pub fn read_files(stem: &Path) -> Result<Self> {
        let json_path = stem.with_extension("json");
        let meta: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(&json_path)?).map_err(|e| Error::Format {
                path: json_path.display().to_string(),
                message: e.to_string(),
            })?;
        let grab = |key: &str| -> Result<f64> {
            meta.get(key)
                .and_then(|v| v.as_f64())
                .ok_or_else(|| Error::Format {
                    path: json_path.display().to_string(),
                    message: format!("missing field {key}"),
                })
        };
        let d = grab("d")? as usize;
        let n = grab("n")? as usize;
        let l = grab("l")?;
        let bin_path = stem.with_extension("f64");
        let mut bytes = Vec::new();
        fs::File::open(&bin_path)?.read_to_end(&mut bytes)?;
        if bytes.len() != n.pow(d as u32) * 8 {
            return Err(Error::Format {
                path: bin_path.display().to_string(),
                message: format!(
                    "expected {} bytes for n={n}, d={d}, found {}",
                    n.pow(d as u32) * 8,
                    bytes.len()
                ),
            });
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(d, n, l, values)
    }

    /// CSV export for 1D fields: `x,u` per node.
    pub fn write_csv_1d<W: Write>(&self, out: &mut W) -> Result<()> {
        if self.d != 1 {
            return Err(Error::InvalidGrid("CSV export is for 1D grids".into()));
        }
        writeln!(out, "x,u")?;
        for i in 0..self.n {
            writeln!(out, "{},{}", self.coord(i), self.values[i])?;
        }
        Ok(())
    }
}

/// Pushed 1D density of axis `k` on a uniform `n`-node grid in physical
/// space (boundary nodes map to zero). The map is inverted by bisection to
/// interval width `1e-12 * L`.
pub fn pushed_axis_density(
    map: &TransportMap,
    reference: &ReferenceDensity,
    k: usize,
    n: usize,
) -> Result<Vec<f64>> {
    let l = map.l;
    let h = 2.0 * l / (n - 1) as f64;
    // Monotonicity check on the node images.
    let mut prev = -l;
    for j in 1..n {
        let img = map.map_axis(k, -l + j as f64 * h);
        if img <= prev {
            return Err(Error::NonMonotoneMap { axis: k });
        }
        prev = img;
    }
    let vals: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|j| {
            if j == 0 || j == n - 1 {
                return Ok(0.0);
            }
            let x = -l + j as f64 * h;
            // bisection for z with T(z) = x
            let (mut a, mut b) = (-l, l);
            let tol = 1e-12 * l;
            while b - a > tol {
                let mid = 0.5 * (a + b);
                if map.map_axis(k, mid) < x {
                    a = mid;
                } else {
                    b = mid;
                }
            }
            let z = 0.5 * (a + b);
            let (_, ell) = map.map_axis_logj(k, z);
            Ok((reference.log_density(z)? - ell).exp())
        })
        .collect::<Vec<Result<f64>>>()
        .into_iter()
        .collect::<Result<Vec<f64>>>()?;
    Ok(vals)
}

/// Evaluate the trained map on an `n`-per-axis uniform grid and return the
/// normalized wavefunction `u = sqrt(rho)`.
pub fn reconstruct_u(
    map: &TransportMap,
    refs: &[ReferenceDensity],
    n: usize,
) -> Result<GridFunction> {
    let d = map.d();
    if refs.len() != d {
        return Err(Error::ShapeMismatch(format!(
            "{} reference densities for a {}-axis map",
            refs.len(),
            d
        )));
    }
    let axis_rho: Vec<Vec<f64>> = (0..d)
        .map(|k| pushed_axis_density(map, &refs[k], k, n))
        .collect::<Result<_>>()?;
    let total = n.pow(d as u32);
    let mut values = vec![0.0; total];
    match d {
        1 => {
            for j in 0..n {
                values[j] = axis_rho[0][j].sqrt();
            }
        }
        2 => {
            for i in 0..n {
                for j in 0..n {
                    values[i * n + j] = (axis_rho[0][i] * axis_rho[1][j]).sqrt();
                }
            }
        }
        _ => {
            for i in 0..n {
                for j in 0..n {
                    for q in 0..n {
                        values[(i * n + j) * n + q] =
                            (axis_rho[0][i] * axis_rho[1][j] * axis_rho[2][q]).sqrt();
                    }
                }
            }
        }
    }
    let mut g = GridFunction::new(d, n, map.l, values)?;
    g.normalize()?;
    Ok(g)
}

/// Per-axis linear interpolation weight against the source's interior grid,
/// with linear extension inside the boundary cells. Returns the cell index
/// and the (possibly out-of-[0,1]) fraction.
fn locate(x: f64, l: f64, h_src: f64, n_int: usize) -> (usize, f64) {
    let x0 = -l + h_src; // first interior node
    let t = (x - x0) / h_src;
    let cell = (t.floor() as isize).clamp(0, n_int as isize - 2) as usize;
    (cell, t - cell as f64)
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

/// Resample onto the interior grid of an FD problem with `n_fd` interior
/// nodes per axis, preserving boundary zeros and renormalizing.
pub fn interpolate_to_fd(src: &GridFunction, n_fd: usize) -> Result<GridFunction> {
    if n_fd < 2 {
        return Err(Error::InvalidGrid("need at least 2 interior nodes".into()));
    }
    let d = src.d;
    let n_src_int = src.n - 2;
    if n_src_int < 2 {
        return Err(Error::InvalidGrid("source grid too coarse".into()));
    }
    let l = src.l;
    let h_src = src.h();
    let h_t = 2.0 * l / (n_fd + 1) as f64;
    let src_int = src.interior();
    let loc: Vec<(usize, f64)> = (0..n_fd)
        .map(|i| locate(-l + (i + 1) as f64 * h_t, l, h_src, n_src_int))
        .collect();
    let mut interior = vec![0.0; n_fd.pow(d as u32)];
    match d {
        1 => {
            for i in 0..n_fd {
                let (c, t) = loc[i];
                interior[i] = lerp(src_int[c], src_int[c + 1], t);
            }
        }
        2 => {
            for i in 0..n_fd {
                let (ci, ti) = loc[i];
                for j in 0..n_fd {
                    let (cj, tj) = loc[j];
                    let v00 = src_int[ci * n_src_int + cj];
                    let v01 = src_int[ci * n_src_int + cj + 1];
                    let v10 = src_int[(ci + 1) * n_src_int + cj];
                    let v11 = src_int[(ci + 1) * n_src_int + cj + 1];
                    interior[i * n_fd + j] = lerp(lerp(v00, v01, tj), lerp(v10, v11, tj), ti);
                }
            }
        }
        _ => {
            let s2 = n_src_int * n_src_int;
            for i in 0..n_fd {
                let (ci, ti) = loc[i];
                for j in 0..n_fd {
                    let (cj, tj) = loc[j];
                    for q in 0..n_fd {
                        let (cq, tq) = loc[q];
                        let at = |a: usize, b: usize, c: usize| src_int[a * s2 + b * n_src_int + c];
                        let f0 = lerp(
                            lerp(at(ci, cj, cq), at(ci, cj, cq + 1), tq),
                            lerp(at(ci, cj + 1, cq), at(ci, cj + 1, cq + 1), tq),
                            tj,
                        );
                        let f1 = lerp(
                            lerp(at(ci + 1, cj, cq), at(ci + 1, cj, cq + 1), tq),
                            lerp(at(ci + 1, cj + 1, cq), at(ci + 1, cj + 1, cq + 1), tq),
                            tj,
                        );
                        interior[(i * n_fd + j) * n_fd + q] = lerp(f0, f1, ti);
                    }
                }
            }
        }
    }
    let mut g = GridFunction::from_interior(d, n_fd, l, &interior)?;
    g.normalize()?;
    Ok(g)
}

/// Trapezoid L2 distance between a 1D grid function and a closed-form
/// function evaluated at the nodes.
pub fn l2_distance_1d(u: &GridFunction, f: impl Fn(f64) -> f64) -> Result<f64> {
    if u.d != 1 {
        return Err(Error::InvalidGrid("1D grids only".into()));
    }
    let mut sum = 0.0;
    for i in 0..u.n {
        let w = if i == 0 || i == u.n - 1 { 0.5 } else { 1.0 };
        let diff = u.values[i] - f(u.coord(i));
        sum += w * diff * diff;
    }
    Ok((u.h() * sum).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference::ReferenceDensity;
    use crate::transport::TransportMap;
    use tempfile::tempdir;

    #[test]
    fn identity_map_reconstructs_the_reference() {
        let map = TransportMap::identity(1, 10, 1.0, 10);
        let refs = vec![ReferenceDensity::beta22(1.0)];
        let u = reconstruct_u(&map, &refs, 501).unwrap();
        // mu is already a unit-mass density, so u = sqrt(mu) up to the
        // trapezoid normalization of order h^2.
        for (i, v) in u.values.iter().enumerate() {
            let x = u.coord(i);
            let expect = if x.abs() >= 1.0 {
                0.0
            } else {
                (0.75 * (1.0 - x * x)).sqrt()
            };
            assert!((v - expect).abs() < 1e-4, "node {i}: {v} vs {expect}");
        }
        assert!((u.l2_norm() - 1.0).abs() < 1e-12);
        assert!(u.boundary_is_zero());
    }

    #[test]
    fn pushed_density_has_unit_mass() {
        let map = TransportMap::random_init(1, 8, 1.0, 10, 0.2, 5);
        let r = ReferenceDensity::beta22(1.0);
        let rho = pushed_axis_density(&map, &r, 0, 2001).unwrap();
        let h = 2.0 / 2000.0;
        let mass: f64 = rho.iter().sum::<f64>() * h; // boundary zeros
        assert!((mass - 1.0).abs() < 0.01, "mass {mass}");
    }

    #[test]
    fn normalization_is_exact_after_reconstruct() {
        let map = TransportMap::random_init(1, 8, 1.0, 10, 0.3, 6);
        let refs = vec![ReferenceDensity::beta22(1.0)];
        let u = reconstruct_u(&map, &refs, 1001).unwrap();
        assert!((u.l2_norm() - 1.0).abs() < 1e-12);
        assert!(u.values.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn non_monotone_map_is_detected() {
        // A large negative velocity bump makes the Euler map fold over.
        let mut map = TransportMap::identity(1, 2, 1.0, 1);
        map.axes[0].w1[0] = 8.0;
        map.axes[0].w2[0] = 8.0;
        map.axes[0].w3[0] = -8.0;
        let r = ReferenceDensity::beta22(1.0);
        match pushed_axis_density(&map, &r, 0, 101) {
            Err(Error::NonMonotoneMap { axis: 0 }) => {}
            other => panic!("expected NonMonotoneMap, got {other:?}"),
        }
    }

    #[test]
    fn interpolation_reproduces_normalized_constants() {
        for (n_src, n_fd) in [(41usize, 99usize), (21, 10), (11, 33)] {
            let mut src = GridFunction::from_interior(
                2,
                n_src - 2,
                16.0,
                &vec![1.0; (n_src - 2) * (n_src - 2)],
            )
            .unwrap();
            src.normalize().unwrap();
            let dst = interpolate_to_fd(&src, n_fd).unwrap();
            let interior = dst.interior();
            let c = interior[0];
            for v in &interior {
                assert!((v - c).abs() <= 1e-13 * c.abs());
            }
            assert!((dst.l2_norm() - 1.0).abs() < 1e-12);
            assert!(dst.boundary_is_zero());
        }
    }

    #[test]
    fn interpolation_reproduces_linear_ramps() {
        let n_int = 30;
        let l = 1.0;
        let h = 2.0 * l / (n_int + 1) as f64;
        let ramp: Vec<f64> = (0..n_int).map(|i| -l + (i + 1) as f64 * h).collect();
        let mut src = GridFunction::from_interior(1, n_int, l, &ramp).unwrap();
        src.normalize().unwrap();
        let scale = src.values[1] / ramp[0];
        let dst = interpolate_to_fd(&src, 77).unwrap();
        // interpolation preserves the linear shape; renormalization rescales
        let dst_unscaled: Vec<f64> = dst.interior();
        let h_t = 2.0 * l / 78.0;
        let expect_raw: Vec<f64> = (0..77).map(|i| (-l + (i + 1) as f64 * h_t) * scale).collect();
        let norm: f64 = (h_t * expect_raw.iter().map(|v| v * v).sum::<f64>()).sqrt();
        for (v, e) in dst_unscaled.iter().zip(&expect_raw) {
            assert!((v - e / norm).abs() <= 1e-12 * (e / norm).abs().max(1e-12));
        }
    }

    #[test]
    fn interpolation_is_idempotent_at_fixed_resolution() {
        let map = TransportMap::random_init(1, 6, 1.0, 10, 0.2, 9);
        let refs = vec![ReferenceDensity::beta22(1.0)];
        let u = reconstruct_u(&map, &refs, 101).unwrap();
        let once = interpolate_to_fd(&u, 99).unwrap();
        let twice = interpolate_to_fd(&once, 99).unwrap();
        for (a, b) in once.values.iter().zip(&twice.values) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn file_round_trip() {
        let map = TransportMap::random_init(2, 4, 16.0, 10, 0.1, 2);
        let refs = vec![
            ReferenceDensity::gauss_mix_default(16.0),
            ReferenceDensity::gauss_mix_default(16.0),
        ];
        let u = reconstruct_u(&map, &refs, 21).unwrap();
        let dir = tempdir().unwrap();
        let stem = dir.path().join("u_grid");
        u.write_files(&stem).unwrap();
        let back = GridFunction::read_files(&stem).unwrap();
        assert_eq!(u, back);
    }

    #[test]
    fn csv_export_1d() {
        let map = TransportMap::identity(1, 4, 1.0, 10);
        let refs = vec![ReferenceDensity::beta22(1.0)];
        let u = reconstruct_u(&map, &refs, 11).unwrap();
        let mut buf = Vec::new();
        u.write_csv_1d(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("x,u\n"));
        assert_eq!(text.lines().count(), 12);
    }
}
