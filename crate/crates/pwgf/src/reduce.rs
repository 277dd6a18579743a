//! Deterministic reductions over particle sets.
//!
//! Particles are laid out in mirror blocks of `2^d` consecutive entries (one
//! base draw and all its coordinate sign flips). Sums over particles are
//! taken pairwise inside each block and then sequentially across blocks.
//! Within a block, exactly opposite contributions cancel to exactly 0.0 and
//! swapped contributions commute bitwise, which is what makes the symmetry
//! invariants of the estimators hold exactly, not just to rounding.

/// Pairwise (tree) sum of a short slice.
pub fn pair_tree(vals: &[f64]) -> f64 {
    match vals.len() {
        0 => 0.0,
        1 => vals[0],
        2 => vals[0] + vals[1],
        n => {
            let mid = n / 2;
            pair_tree(&vals[..mid]) + pair_tree(&vals[mid..])
        }
    }
}

/// Sum of `vals`, pairwise within consecutive blocks of `block`, sequential
/// across blocks in ascending order.
pub fn blocked_sum(vals: &[f64], block: usize) -> f64 {
    debug_assert!(block > 0 && vals.len() % block == 0);
    let mut total = 0.0;
    for chunk in vals.chunks(block) {
        total += pair_tree(chunk);
    }
    total
}

/// Column-wise blocked sum of per-particle vectors: `out[j] += sum_i rows[i][j]`
/// with the same block/pairwise policy as [`blocked_sum`].
pub fn blocked_sum_columns(out: &mut [f64], rows: &[&[f64]], block: usize) {
    debug_assert!(block > 0 && rows.len() % block == 0);
    let m = out.len();
    let mut buf = [0.0_f64; 8];
    debug_assert!(block <= buf.len());
    for blk in rows.chunks(block) {
        for j in 0..m {
            for (p, row) in blk.iter().enumerate() {
                debug_assert_eq!(row.len(), m);
                buf[p] = row[j];
            }
            out[j] += pair_tree(&buf[..block]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mirror_pairs_cancel_exactly() {
        // A sequential sum of (s + v) - v drifts by rounding; the blocked sum
        // must return exact zero for mirrored values.
        let vals = vec![0.6, -0.6, 1e-17 * 3.0, -1e-17 * 3.0, 0.1, -0.1];
        assert_eq!(blocked_sum(&vals, 2), 0.0);
    }

    #[test]
    fn block_of_eight_cancels_high_axis() {
        // Mirror structure of a d=3 block: highest axis flips the last four.
        let m = [0.1, 0.7, 0.3, 0.9];
        let vals: Vec<f64> = m.iter().chain(m.iter()).enumerate()
            .map(|(i, v)| if i < 4 { *v } else { -*v })
            .collect();
        assert_eq!(blocked_sum(&vals, 8), 0.0);
    }

    #[test]
    fn swapped_pairs_are_bit_identical() {
        let a = 0.1 + 0.2;
        let b = 0.7;
        assert_eq!(blocked_sum(&[a, b], 2), blocked_sum(&[b, a], 2));
    }

    #[test]
    fn columns_match_scalar_reduction() {
        let r0 = vec![1.0, 2.0];
        let r1 = vec![3.0, -2.0];
        let r2 = vec![0.5, 0.25];
        let r3 = vec![-0.5, 4.0];
        let rows: Vec<&[f64]> = vec![&r0, &r1, &r2, &r3];
        let mut out = vec![0.0; 2];
        blocked_sum_columns(&mut out, &rows, 2);
        for j in 0..2 {
            let col: Vec<f64> = [&r0, &r1, &r2, &r3].iter().map(|r| r[j]).collect();
            assert_eq!(out[j], blocked_sum(&col, 2));
        }
    }
}
