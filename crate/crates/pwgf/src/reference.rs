//! Reference densities on `(-L, L)` and sign-symmetric particle sampling.
//!
//! Three families cover the experiments: a scaled Beta(2,2), a scaled
//! Beta(5,5), and a boundary-damped Gaussian mixture. Each provides an exact
//! log-density and score. All three are even in `z`, and the evaluation is
//! arranged so that evenness holds bitwise: `log_density(-z)` equals
//! `log_density(z)` and `score(-z)` equals `-score(z)` exactly. The particle
//! estimators rely on this for their exact cancellation properties.
//!
//! Sampling is by inverse CDF from a tabulated cumulative (4096 cells,
//! per-cell Simpson, monotone piecewise-quadratic inversion) on the positive
//! half-interval; full sets are completed by mirroring through every
//! coordinate sign pattern.

use crate::error::{Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Write;

const CDF_CELLS: usize = 4096;

/// Which density family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum RefKind {
    /// `3/(4L) (1 - z^2/L^2)` — scaled Beta(2,2).
    Beta22,
    /// `315/(256 L) (1 - z^2/L^2)^4` — scaled Beta(5,5).
    Beta55,
    /// `C (1 - z^2/L^2) sum_k exp(-(z-k)^2 / (2 sigma^2))`.
    GaussMix,
}

/// A reference density `mu` on `(-L, L)`: log-density, score, sampler.
#[derive(Debug, Clone)]
pub struct ReferenceDensity {
    kind: RefKind,
    l: f64,
    /// Mixture centers, ascending; paired `(c, -c)` with optional center 0.
    centers: Vec<f64>,
    sigma: f64,
    /// `log` of the normalization constant in front of the shape factor.
    log_norm: f64,
    cdf: CdfTable,
}

impl ReferenceDensity {
    pub fn beta22(l: f64) -> Self {
        let log_norm = (3.0 / (4.0 * l)).ln();
        let mut me = Self {
            kind: RefKind::Beta22,
            l,
            centers: Vec::new(),
            sigma: 0.0,
            log_norm,
            cdf: CdfTable::default(),
        };
        me.cdf = CdfTable::build(&me);
        me
    }

    pub fn beta55(l: f64) -> Self {
        let log_norm = (315.0 / (256.0 * l)).ln();
        let mut me = Self {
            kind: RefKind::Beta55,
            l,
            centers: Vec::new(),
            sigma: 0.0,
            log_norm,
            cdf: CdfTable::default(),
        };
        me.cdf = CdfTable::build(&me);
        me
    }

    /// Gaussian mixture damped by the boundary factor. The center set must be
    /// symmetric about 0; the normalization constant is computed once by
    /// quadrature and cached.
    pub fn gauss_mix(l: f64, centers: &[f64], sigma: f64) -> Result<Self> {
        let mut sorted = centers.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for c in &sorted {
            if !sorted.iter().any(|d| *d == -c) {
                return Err(Error::Config(format!(
                    "mixture centers must be symmetric about 0; {c} has no mirror"
                )));
            }
            if c.abs() >= l {
                return Err(Error::Config(format!(
                    "mixture center {c} outside (-{l}, {l})"
                )));
            }
        }
        let mut me = Self {
            kind: RefKind::GaussMix,
            l,
            centers: sorted,
            sigma,
            log_norm: 0.0,
        cdf: CdfTable::default(),
        };
        // Simpson over the full interval for the normalization constant.
        let cells = 1 << 14;
        let h = 2.0 * l / cells as f64;
        let mut total = 0.0;
        for j in 0..cells {
            let a = -l + j as f64 * h;
            let fa = me.shape(a);
            let fm = me.shape(a + 0.5 * h);
            let fb = me.shape(a + h);
            total += h / 6.0 * (fa + 4.0 * fm + fb);
        }
        me.log_norm = -(total.ln());
        me.cdf = CdfTable::build(&me);
        Ok(me)
    }

    /// The experiment mixture: centers `-12, -8, ..., 12`, `sigma = 1.5`.
    pub fn gauss_mix_default(l: f64) -> Self {
        let centers: Vec<f64> = (-3..=3).map(|k| 4.0 * k as f64).collect();
        Self::gauss_mix(l, &centers, 1.5).expect("default mixture is symmetric")
    }

    pub fn kind(&self) -> RefKind {
        self.kind
    }

    pub fn half_width(&self) -> f64 {
        self.l
    }

    fn check_domain(&self, z: f64) -> Result<()> {
        if z.abs() >= self.l || !z.is_finite() {
            return Err(Error::OutsideDomain {
                value: z,
                half_width: self.l,
            });
        }
        Ok(())
    }

    /// Unnormalized shape factor (no domain check); used by quadrature.
    fn shape(&self, z: f64) -> f64 {
        let b = 1.0 - (z * z) / (self.l * self.l);
        match self.kind {
            RefKind::Beta22 => b,
            RefKind::Beta55 => b * b * b * b,
            RefKind::GaussMix => b * self.mixture_sum(z).0,
        }
    }

    /// `(sum_k e_k, max exponent)`, summed center-pair-wise so the value is
    /// bitwise even in `z`. Terms are rescaled by the max exponent.
    fn mixture_sum(&self, z: f64) -> (f64, f64) {
        let inv = 1.0 / (2.0 * self.sigma * self.sigma);
        let mut m = f64::NEG_INFINITY;
        for &c in &self.centers {
            let d = z - c;
            m = m.max(-(d * d) * inv);
        }
        let mut sum = 0.0;
        let mut i = 0;
        let mut j = self.centers.len() - 1;
        // Pairs (c_min, c_max) mirror onto each other; the middle center, if
        // any, is 0.
        loop {
            if i < j {
                let da = z - self.centers[i];
                let db = z - self.centers[j];
                sum += (-(da * da) * inv - m).exp() + (-(db * db) * inv - m).exp();
                i += 1;
                j -= 1;
            } else {
                if i == j {
                    let d = z - self.centers[i];
                    sum += (-(d * d) * inv - m).exp();
                }
                break;
            }
        }
        (sum * m.exp(), m)
    }

    /// `log mu(z)`; error outside the open interval.
    pub fn log_density(&self, z: f64) -> Result<f64> {
        self.check_domain(z)?;
        let b = 1.0 - (z * z) / (self.l * self.l);
        Ok(match self.kind {
            RefKind::Beta22 => self.log_norm + b.ln(),
            RefKind::Beta55 => self.log_norm + 4.0 * b.ln(),
            RefKind::GaussMix => {
                let inv = 1.0 / (2.0 * self.sigma * self.sigma);
                let mut m = f64::NEG_INFINITY;
                for &c in &self.centers {
                    let d = z - c;
                    m = m.max(-(d * d) * inv);
                }
                let mut sum = 0.0;
                let mut i = 0;
                let mut j = self.centers.len() - 1;
                loop {
                    if i < j {
                        let da = z - self.centers[i];
                        let db = z - self.centers[j];
                        sum += (-(da * da) * inv - m).exp() + (-(db * db) * inv - m).exp();
                        i += 1;
                        j -= 1;
                    } else {
                        if i == j {
                            let d = z - self.centers[i];
                            sum += (-(d * d) * inv - m).exp();
                        }
                        break;
                    }
                }
                self.log_norm + b.ln() + m + sum.ln()
            }
        })
    }

    /// Score `d/dz log mu(z)`; odd in `z`, bitwise.
    pub fn score(&self, z: f64) -> Result<f64> {
        self.check_domain(z)?;
        let denom = self.l * self.l - z * z;
        Ok(match self.kind {
            RefKind::Beta22 => (-2.0 * z) / denom,
            RefKind::Beta55 => (-8.0 * z) / denom,
            RefKind::GaussMix => {
                let inv = 1.0 / (2.0 * self.sigma * self.sigma);
                let s2 = self.sigma * self.sigma;
                let mut m = f64::NEG_INFINITY;
                for &c in &self.centers {
                    let d = z - c;
                    m = m.max(-(d * d) * inv);
                }
                let mut num = 0.0;
                let mut den = 0.0;
                let mut i = 0;
                let mut j = self.centers.len() - 1;
                loop {
                    if i < j {
                        let da = z - self.centers[i];
                        let db = z - self.centers[j];
                        let ea = (-(da * da) * inv - m).exp();
                        let eb = (-(db * db) * inv - m).exp();
                        num += ea * (-da / s2) + eb * (-db / s2);
                        den += ea + eb;
                        i += 1;
                        j -= 1;
                    } else {
                        if i == j {
                            let d = z - self.centers[i];
                            let e = (-(d * d) * inv - m).exp();
                            num += e * (-d / s2);
                            den += e;
                        }
                        break;
                    }
                }
                num / den + (-2.0 * z) / denom
            }
        })
    }

    /// One draw from `mu` restricted to `(0, L)`, by inverse CDF.
    pub fn sample_positive<R: Rng>(&self, rng: &mut R) -> f64 {
        loop {
            let u: f64 = rng.gen();
            let z = self.cdf.invert(u);
            if z > 0.0 && z < self.l {
                return z;
            }
        }
    }
}

/// Cumulative table of the positive half-interval restriction.
#[derive(Debug, Clone, Default)]
struct CdfTable {
    /// Node spacing `L / CDF_CELLS`.
    h: f64,
    /// Normalized density at the nodes (4097 values).
    density: Vec<f64>,
    /// Normalized cumulative at the nodes, `cdf[0] = 0`, `cdf[last] = 1`.
    cdf: Vec<f64>,
}

impl CdfTable {
    fn build(r: &ReferenceDensity) -> Self {
        let n = CDF_CELLS;
        let h = r.l / n as f64;
        let mut density: Vec<f64> = (0..=n).map(|j| r.shape(j as f64 * h)).collect();
        let mut cdf = vec![0.0; n + 1];
        for j in 0..n {
            let fm = r.shape((j as f64 + 0.5) * h);
            cdf[j + 1] = cdf[j] + h / 6.0 * (density[j] + 4.0 * fm + density[j + 1]);
        }
        let total = cdf[n];
        for v in cdf.iter_mut() {
            *v /= total;
        }
        for v in density.iter_mut() {
            *v /= total;
        }
        Self { h, density, cdf }
    }

    /// Monotone inversion: locate the cell by bisection, then solve the
    /// quadratic model (density linear within the cell).
    fn invert(&self, u: f64) -> f64 {
        let n = self.cdf.len() - 1;
        let mut lo = 0;
        let mut hi = n;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if self.cdf[mid] <= u {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let du = u - self.cdf[lo];
        let b = self.density[lo];
        let a = (self.density[lo + 1] - self.density[lo]) / (2.0 * self.h);
        let disc = (b * b + 4.0 * a * du).max(0.0);
        let x = if disc.sqrt() + b > 0.0 {
            2.0 * du / (b + disc.sqrt())
        } else {
            0.0
        };
        lo as f64 * self.h + x.clamp(0.0, self.h)
    }
}

/// Fixed quadrature particles, mirror-block layout.
///
/// Particles are stored as `n/2^d` consecutive blocks; block `b` holds one
/// positive-orthant base draw expanded through all `2^d` coordinate sign
/// patterns (axis `k` flipped when bit `k` of the in-block index is set).
/// Per-coordinate reference log-densities and scores are cached.
#[derive(Debug, Clone)]
pub struct ParticleSet {
    pub d: usize,
    pub n: usize,
    /// `n x d`, row-major.
    pub coords: Vec<f64>,
    /// `log mu_k(z_{k,i})`, `n x d`.
    pub log_mu: Vec<f64>,
    /// `d/dz log mu_k(z_{k,i})`, `n x d`.
    pub score_mu: Vec<f64>,
}

impl ParticleSet {
    /// Size of one mirror block.
    pub fn block(&self) -> usize {
        1 << self.d
    }

    pub fn coord(&self, i: usize, k: usize) -> f64 {
        self.coords[i * self.d + k]
    }

    /// Export as CSV with columns `index, z_1..z_d`.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        write!(out, "index")?;
        for k in 0..self.d {
            write!(out, ",z_{}", k + 1)?;
        }
        writeln!(out)?;
        for i in 0..self.n {
            write!(out, "{i}")?;
            for k in 0..self.d {
                write!(out, ",{}", self.coord(i, k))?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Draw `n` particles with full sign symmetry: `n / 2^d` base points from the
/// positive-orthant restriction (one density per axis), each completed by all
/// `2^d` sign patterns. Deterministic for a given seed.
pub fn sample_sign_symmetric(
    refs: &[ReferenceDensity],
    n: usize,
    seed: u64,
) -> Result<ParticleSet> {
    let d = refs.len();
    if d == 0 || d > 3 {
        return Err(Error::Config(format!("dimension must be 1..=3, got {d}")));
    }
    let patterns = 1usize << d;
    if n == 0 || n % patterns != 0 {
        return Err(Error::Config(format!(
            "particle count N = {n} must be divisible by 2^d = {patterns} for sign-symmetric sampling in d = {d}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blocks = n / patterns;
    let mut coords = vec![0.0; n * d];
    let mut log_mu = vec![0.0; n * d];
    let mut score_mu = vec![0.0; n * d];
    let mut base = vec![0.0; d];
    for b in 0..blocks {
        for k in 0..d {
            base[k] = refs[k].sample_positive(&mut rng);
        }
        for p in 0..patterns {
            let i = b * patterns + p;
            for k in 0..d {
                let z = if (p >> k) & 1 == 1 { -base[k] } else { base[k] };
                coords[i * d + k] = z;
                log_mu[i * d + k] = refs[k].log_density(z)?;
                score_mu[i * d + k] = refs[k].score(z)?;
            }
        }
    }
    Ok(ParticleSet {
        d,
        n,
        coords,
        log_mu,
        score_mu,
    })
}
