//! Tiny tanh network `g: R -> R` (1 -> H -> H -> 1) with analytic input
//! derivatives up to third order and reverse-mode parameter gradients.
//!
//! The network is the learnable part of the per-axis transport velocity. The
//! descent direction needs `d(a*g + b*g' + c*g'')/dtheta` for arbitrary
//! cotangents `(a, b, c)`, so the forward pass records a tape of activations
//! and input-derivative chains. Depth is fixed at two hidden layers; no
//! general-purpose graph engine is involved.

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Parameters of one `1 -> H -> H -> 1` tanh network.
///
/// Flattening order is `w1, b1, w2 (row-major), b2, w3, b3`, total length
/// `H^2 + 4H + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub h: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub w3: Vec<f64>,
    pub b3: f64,
}

impl NetworkParams {
    pub fn param_count(h: usize) -> usize {
        h * h + 4 * h + 1
    }

    pub fn zeros(h: usize) -> Self {
        Self {
            h,
            w1: vec![0.0; h],
            b1: vec![0.0; h],
            w2: vec![0.0; h * h],
            b2: vec![0.0; h],
            w3: vec![0.0; h],
            b3: 0.0,
        }
    }

    /// Gaussian weights of standard deviation `scale`, zero biases.
    pub fn random<R: Rng>(h: usize, scale: f64, rng: &mut R) -> Self {
        let mut p = Self::zeros(h);
        let normal = StandardNormal;
        for v in p.w1.iter_mut() {
            *v = scale * <StandardNormal as Distribution<f64>>::sample(&normal, rng);
        }
        for v in p.w2.iter_mut() {
            *v = scale * <StandardNormal as Distribution<f64>>::sample(&normal, rng);
        }
        for v in p.w3.iter_mut() {
            *v = scale * <StandardNormal as Distribution<f64>>::sample(&normal, rng);
        }
        p
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(Self::param_count(self.h));
        out.extend_from_slice(&self.w1);
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(&self.w2);
        out.extend_from_slice(&self.b2);
        out.extend_from_slice(&self.w3);
        out.push(self.b3);
        out
    }

    pub fn from_flat(h: usize, flat: &[f64]) -> Result<Self> {
        if flat.len() != Self::param_count(h) {
            return Err(Error::ShapeMismatch(format!(
                "expected {} parameters for width {h}, got {}",
                Self::param_count(h),
                flat.len()
            )));
        }
        let mut it = flat.iter().copied();
        let mut take = |n: usize| -> Vec<f64> { (&mut it).take(n).collect() };
        let w1 = take(h);
        let b1 = take(h);
        let w2 = take(h * h);
        let b2 = take(h);
        let w3 = take(h);
        let b3 = it.next().unwrap();
        Ok(Self { h, w1, b1, w2, b2, w3, b3 })
    }
}

/// tanh evaluated so that `tanh_odd(-x)` is bitwise `-tanh_odd(x)`.
#[inline]
fn tanh_odd(x: f64) -> f64 {
    let t = x.abs().tanh();
    if x.is_sign_negative() {
        -t
    } else {
        t
    }
}

/// Activation tape of one forward evaluation; everything the reverse pass
/// needs, indexed per hidden unit.
#[derive(Debug, Clone)]
pub struct NetTape {
    w: f64,
    a1: Vec<f64>,
    t1p: Vec<f64>,
    t1pp: Vec<f64>,
    t1ppp: Vec<f64>,
    p1: Vec<f64>,
    q1: Vec<f64>,
    a2: Vec<f64>,
    t2p: Vec<f64>,
    t2pp: Vec<f64>,
    t2ppp: Vec<f64>,
    v: Vec<f64>,
    acc: Vec<f64>,
    a2p: Vec<f64>,
    a2pp: Vec<f64>,
}

/// Value and input derivatives of `g` at one point, plus the reverse-mode tape.
#[derive(Debug, Clone)]
pub struct NetEval {
    pub g: f64,
    pub dg: f64,
    pub d2g: f64,
    pub d3g: f64,
    pub tape: NetTape,
}

/// Forward pass with first/second/third input derivatives and tape.
pub fn eval(p: &NetworkParams, w: f64) -> NetEval {
    let h = p.h;
    let mut a1 = vec![0.0; h];
    let mut t1p = vec![0.0; h];
    let mut t1pp = vec![0.0; h];
    let mut t1ppp = vec![0.0; h];
    let mut p1 = vec![0.0; h];
    let mut q1 = vec![0.0; h];
    let mut r1 = vec![0.0; h];
    for j in 0..h {
        let u = p.w1[j] * w + p.b1[j];
        let t = tanh_odd(u);
        let tp = 1.0 - t * t;
        let tpp = -2.0 * t * tp;
        let tppp = tp * (4.0 * (t * t) - 2.0 * tp);
        a1[j] = t;
        t1p[j] = tp;
        t1pp[j] = tpp;
        t1ppp[j] = tppp;
        p1[j] = tp * p.w1[j];
        q1[j] = tpp * (p.w1[j] * p.w1[j]);
        r1[j] = tppp * (p.w1[j] * p.w1[j] * p.w1[j]);
    }

    let mut a2 = vec![0.0; h];
    let mut t2p = vec![0.0; h];
    let mut t2pp = vec![0.0; h];
    let mut t2ppp = vec![0.0; h];
    let mut v = vec![0.0; h];
    let mut acc = vec![0.0; h];
    let mut a2p = vec![0.0; h];
    let mut a2pp = vec![0.0; h];
    let (mut g, mut dg, mut d2g, mut d3g) = (p.b3, 0.0, 0.0, 0.0);
    for j in 0..h {
        let row = &p.w2[j * h..(j + 1) * h];
        let mut u = p.b2[j];
        let mut vj = 0.0;
        let mut aj = 0.0;
        let mut a3 = 0.0;
        for m in 0..h {
            u += row[m] * a1[m];
            vj += row[m] * p1[m];
            aj += row[m] * q1[m];
            a3 += row[m] * r1[m];
        }
        let t = tanh_odd(u);
        let tp = 1.0 - t * t;
        let tpp = -2.0 * t * tp;
        let tppp = tp * (4.0 * (t * t) - 2.0 * tp);
        a2[j] = t;
        t2p[j] = tp;
        t2pp[j] = tpp;
        t2ppp[j] = tppp;
        v[j] = vj;
        acc[j] = aj;
        let d1 = tp * vj;
        let d2 = tpp * (vj * vj) + tp * aj;
        let d3 = tppp * (vj * vj * vj) + 3.0 * tpp * vj * aj + tp * a3;
        a2p[j] = d1;
        a2pp[j] = d2;
        g += p.w3[j] * t;
        dg += p.w3[j] * d1;
        d2g += p.w3[j] * d2;
        d3g += p.w3[j] * d3;
    }

    NetEval {
        g,
        dg,
        d2g,
        d3g,
        tape: NetTape {
            w,
            a1,
            t1p,
            t1pp,
            t1ppp,
            p1,
            q1,
            a2,
            t2p,
            t2pp,
            t2ppp,
            v,
            acc,
            a2p,
            a2pp,
        },
    }
}

/// Lean forward pass: `(g, g', g'')` only, no tape. Arithmetic for the shared
/// outputs is kept identical to [`eval`] so the two paths agree bitwise.
pub fn eval3(p: &NetworkParams, w: f64) -> (f64, f64, f64) {
    let h = p.h;
    let mut a1 = vec![0.0; h];
    let mut p1 = vec![0.0; h];
    let mut q1 = vec![0.0; h];
    for j in 0..h {
        let u = p.w1[j] * w + p.b1[j];
        let t = tanh_odd(u);
        let tp = 1.0 - t * t;
        let tpp = -2.0 * t * tp;
        a1[j] = t;
        p1[j] = tp * p.w1[j];
        q1[j] = tpp * (p.w1[j] * p.w1[j]);
    }
    let (mut g, mut dg, mut d2g) = (p.b3, 0.0, 0.0);
    for j in 0..h {
        let row = &p.w2[j * h..(j + 1) * h];
        let mut u = p.b2[j];
        let mut vj = 0.0;
        let mut aj = 0.0;
        for m in 0..h {
            u += row[m] * a1[m];
            vj += row[m] * p1[m];
            aj += row[m] * q1[m];
        }
        let t = tanh_odd(u);
        let tp = 1.0 - t * t;
        let tpp = -2.0 * t * tp;
        let d1 = tp * vj;
        let d2 = tpp * (vj * vj) + tp * aj;
        g += p.w3[j] * t;
        dg += p.w3[j] * d1;
        d2g += p.w3[j] * d2;
    }
    (g, dg, d2g)
}

/// Reusable scratch for [`backprop_acc`].
#[derive(Debug, Default)]
pub struct NetScratch {
    du2: Vec<f64>,
    dv: Vec<f64>,
    dacc: Vec<f64>,
    la1: Vec<f64>,
    lp1: Vec<f64>,
    lq1: Vec<f64>,
}

impl NetScratch {
    fn resize(&mut self, h: usize) {
        for v in [
            &mut self.du2,
            &mut self.dv,
            &mut self.dacc,
            &mut self.la1,
            &mut self.lp1,
            &mut self.lq1,
        ] {
            v.clear();
            v.resize(h, 0.0);
        }
    }
}

/// Accumulate `d(lg*g + ldg*g' + ld2g*g'')/dtheta` into `out` (flat layout).
pub fn backprop_acc(
    p: &NetworkParams,
    tape: &NetTape,
    lg: f64,
    ldg: f64,
    ld2g: f64,
    scratch: &mut NetScratch,
    out: &mut [f64],
) {
    let h = p.h;
    debug_assert_eq!(tape.a1.len(), h);
    debug_assert_eq!(out.len(), NetworkParams::param_count(h));
    scratch.resize(h);
    let (w1o, b1o, w2o, b2o, w3o, b3o) =
        (0, h, 2 * h, 2 * h + h * h, 3 * h + h * h, 4 * h + h * h);

    out[b3o] += lg;
    for j in 0..h {
        out[w3o + j] += lg * tape.a2[j] + ldg * tape.a2p[j] + ld2g * tape.a2pp[j];
        let vj = tape.v[j];
        scratch.du2[j] = p.w3[j]
            * (lg * tape.t2p[j]
                + ldg * tape.t2pp[j] * vj
                + ld2g * (tape.t2ppp[j] * (vj * vj) + tape.t2pp[j] * tape.acc[j]));
        scratch.dv[j] = p.w3[j] * (ldg * tape.t2p[j] + ld2g * 2.0 * tape.t2pp[j] * vj);
        scratch.dacc[j] = p.w3[j] * ld2g * tape.t2p[j];
    }
    for m in 0..h {
        let (mut la, mut lp, mut lq) = (0.0, 0.0, 0.0);
        for j in 0..h {
            let w2jm = p.w2[j * h + m];
            la += w2jm * scratch.du2[j];
            lp += w2jm * scratch.dv[j];
            lq += w2jm * scratch.dacc[j];
        }
        scratch.la1[m] = la;
        scratch.lp1[m] = lp;
        scratch.lq1[m] = lq;
    }
    for j in 0..h {
        for m in 0..h {
            out[w2o + j * h + m] += scratch.du2[j] * tape.a1[m]
                + scratch.dv[j] * tape.p1[m]
                + scratch.dacc[j] * tape.q1[m];
        }
        out[b2o + j] += scratch.du2[j];
    }
    for m in 0..h {
        let du1 = scratch.la1[m] * tape.t1p[m]
            + scratch.lp1[m] * tape.t1pp[m] * p.w1[m]
            + scratch.lq1[m] * tape.t1ppp[m] * (p.w1[m] * p.w1[m]);
        out[w1o + m] += du1 * tape.w
            + scratch.lp1[m] * tape.t1p[m]
            + scratch.lq1[m] * 2.0 * tape.t1pp[m] * p.w1[m];
        out[b1o + m] += du1;
    }
}

/// Parameter gradient of `lg*g + ldg*g' + ld2g*g''` as a fresh flat vector.
pub fn backprop(
    p: &NetworkParams,
    eval: &NetEval,
    cotangents: (f64, f64, f64),
) -> Result<Vec<f64>> {
    if eval.tape.a1.len() != p.h {
        return Err(Error::ShapeMismatch(format!(
            "tape built for width {}, parameters have width {}",
            eval.tape.a1.len(),
            p.h
        )));
    }
    let mut out = vec![0.0; NetworkParams::param_count(p.h)];
    let mut scratch = NetScratch::default();
    backprop_acc(
        p,
        &eval.tape,
        cotangents.0,
        cotangents.1,
        cotangents.2,
        &mut scratch,
        &mut out,
    );
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params_seed(h: usize, scale: f64, seed: u64) -> NetworkParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        NetworkParams::random(h, scale, &mut rng)
    }

    /// Params with nonzero biases too, for generic-derivative checks.
    fn dense_params(h: usize, scale: f64, seed: u64) -> NetworkParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut flat = vec![0.0; NetworkParams::param_count(h)];
        for v in flat.iter_mut() {
            *v = scale
                * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
        }
        NetworkParams::from_flat(h, &flat).unwrap()
    }

    #[test]
    fn zero_params_evaluate_to_zero() {
        let p = NetworkParams::zeros(6);
        for w in [-1.0, -0.3, 0.0, 0.7, 1.0] {
            let e = eval(&p, w);
            assert_eq!((e.g, e.dg, e.d2g, e.d3g), (0.0, 0.0, 0.0, 0.0));
        }
    }

    #[test]
    fn flatten_round_trips_exactly() {
        let p = dense_params(5, 0.7, 3);
        let flat = p.to_flat();
        assert_eq!(flat.len(), NetworkParams::param_count(5));
        let q = NetworkParams::from_flat(5, &flat).unwrap();
        assert_eq!(p, q);
        assert!(NetworkParams::from_flat(4, &flat).is_err());
    }

    #[test]
    fn derivatives_match_finite_differences_seed0() {
        // g'' against the second central difference, random params scale 0.01.
        let p = params_seed(10, 0.01, 0);
        let w = 0.5;
        let h = 1e-4;
        let e = eval(&p, w);
        let gp = eval(&p, w + h).g;
        let gm = eval(&p, w - h).g;
        let fd1 = (gp - gm) / (2.0 * h);
        let fd2 = (gp - 2.0 * e.g + gm) / (h * h);
        assert!((e.dg - fd1).abs() <= 1e-6 * fd1.abs().max(1e-6));
        assert!((e.d2g - fd2).abs() <= 1e-5 * fd2.abs().max(1e-6));
    }

    #[test]
    fn third_derivative_matches_finite_difference_of_second() {
        let p = dense_params(6, 0.4, 11);
        let w = 0.3;
        let h = 1e-5;
        let e = eval(&p, w);
        let fd3 = (eval(&p, w + h).d2g - eval(&p, w - h).d2g) / (2.0 * h);
        assert!((e.d3g - fd3).abs() <= 1e-5 * fd3.abs().max(1e-3));
    }

    #[test]
    fn single_path_derivative_against_finite_difference() {
        // One active hidden path: W1 = e1 scaled, identity-ish routing.
        let mut p = NetworkParams::zeros(4);
        p.w1[0] = 1.3;
        p.b1[0] = 0.2;
        p.w2[2 * 4] = 0.9; // unit 2 of layer 2 reads unit 0 of layer 1
        p.b2[2] = -0.1;
        p.w3[2] = 1.7;
        p.b3 = 0.4;
        let w = 0.0;
        let e = eval(&p, w);
        // g = b3 + 1.7 tanh(-0.1 + 0.9 tanh(0.2))
        let expect = 0.4 + 1.7 * (0.9 * 0.2_f64.tanh() - 0.1).tanh();
        assert!((e.g - expect).abs() < 1e-15);
        let h = 1e-4;
        let fd1 = (eval(&p, w + h).g - eval(&p, w - h).g) / (2.0 * h);
        assert!((e.dg - fd1).abs() <= 1e-6 * fd1.abs());
    }

    #[test]
    fn backprop_zero_cotangents_is_zero() {
        let p = dense_params(4, 0.3, 5);
        let e = eval(&p, 0.4);
        let g = backprop(&p, &e, (0.0, 0.0, 0.0)).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backprop_value_cotangent_zero_params_hits_output_bias_only() {
        let p = NetworkParams::zeros(5);
        let e = eval(&p, 0.3);
        let g = backprop(&p, &e, (1.0, 0.0, 0.0)).unwrap();
        let b3_index = NetworkParams::param_count(5) - 1;
        for (i, v) in g.iter().enumerate() {
            if i == b3_index {
                assert_eq!(*v, 1.0);
            } else {
                assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn backprop_matches_finite_differences() {
        // S(theta) = g + 0.3 g' - 0.2 g''; compare against central differences
        // in every parameter direction.
        let p = dense_params(4, 0.2, 0);
        let w = 0.37;
        let (lg, ldg, ld2g) = (1.0, 0.3, -0.2);
        let e = eval(&p, w);
        let grad = backprop(&p, &e, (lg, ldg, ld2g)).unwrap();
        let flat = p.to_flat();
        let h = 1e-5;
        let s = |theta: &[f64]| {
            let q = NetworkParams::from_flat(4, theta).unwrap();
            let e = eval(&q, w);
            lg * e.g + ldg * e.dg + ld2g * e.d2g
        };
        for i in 0..flat.len() {
            let mut tp = flat.clone();
            let mut tm = flat.clone();
            tp[i] += h;
            tm[i] -= h;
            let fd = (s(&tp) - s(&tm)) / (2.0 * h);
            let denom = fd.abs().max(1e-6);
            assert!(
                (grad[i] - fd).abs() / denom <= 1e-5,
                "component {i}: ad={} fd={}",
                grad[i],
                fd
            );
        }
    }

    #[test]
    fn backprop_dimension_mismatch_is_an_error() {
        let p4 = dense_params(4, 0.2, 1);
        let p5 = dense_params(5, 0.2, 1);
        let e = eval(&p4, 0.1);
        assert!(backprop(&p5, &e, (1.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn backprop_is_linear_in_cotangents() {
        let p = dense_params(5, 0.3, 9);
        let e = eval(&p, -0.6);
        let ga = backprop(&p, &e, (1.0, 0.0, 0.0)).unwrap();
        let gb = backprop(&p, &e, (0.0, 1.0, 0.0)).unwrap();
        let gc = backprop(&p, &e, (0.0, 0.0, 1.0)).unwrap();
        let combo = backprop(&p, &e, (0.5, -2.0, 3.0)).unwrap();
        for i in 0..combo.len() {
            let lin = 0.5 * ga[i] - 2.0 * gb[i] + 3.0 * gc[i];
            assert!((combo[i] - lin).abs() <= 1e-12 * lin.abs().max(1.0));
        }
    }

    #[test]
    fn zero_biases_make_g_exactly_odd() {
        let p = params_seed(10, 0.5, 2);
        for w in [0.0, 0.3, 0.8, 2.5] {
            let plus = eval(&p, w);
            let minus = eval(&p, -w);
            assert_eq!(minus.g, -plus.g);
            assert_eq!(minus.dg, plus.dg);
            assert_eq!(minus.d2g, -plus.d2g);
            assert_eq!(minus.d3g, plus.d3g);
        }
    }

    proptest! {
        #[test]
        fn prop_first_derivative_matches_fd(seed in 0u64..200, w in -1.0f64..1.0) {
            let p = dense_params(6, 0.3, seed);
            let e = eval(&p, w);
            let h = 1e-4;
            let fd = (eval(&p, w + h).g - eval(&p, w - h).g) / (2.0 * h);
            prop_assert!((e.dg - fd).abs() <= 1e-6 * fd.abs().max(1e-4));
        }

        #[test]
        fn prop_eval3_agrees_with_eval_bitwise(seed in 0u64..200, w in -2.0f64..2.0) {
            let p = dense_params(5, 0.4, seed);
            let full = eval(&p, w);
            let lean = eval3(&p, w);
            prop_assert_eq!(lean, (full.g, full.dg, full.d2g));
        }
    }
}
