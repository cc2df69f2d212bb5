//! Differentiable distribution distances for representation balancing.
//!
//! Two estimators of a distance between empirical point clouds are provided:
//! an entropic-regularized optimal-transport cost (squared-Euclidean ground
//! cost, Sinkhorn-solved plan held fixed in the backward pass) and a sliced
//! 1-Wasserstein distance (random 1-D projections, closed-form transport
//! between the projected quantile functions). Both run on the autodiff tape,
//! so gradients flow into the point coordinates.
//!
//! On top of either estimator, [`joint_product_ipm`] measures the dependence
//! between a representation and the pair `(t, z)` as the distance between
//! the observed joint sample and a product sample obtained by permuting `t`
//! and `z` with two independent uniform permutations.

use std::rc::Rc;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// Entropic regularization strength for the optimal-transport estimator.
pub const OT_EPSILON: f64 = 0.1;
/// Sinkhorn iteration cap.
pub const OT_MAX_ITERS: usize = 100;
/// Number of random projections for the sliced estimator.
pub const SLICED_PROJECTIONS: usize = 64;

/// Which empirical distance estimator to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum IpmKind {
    /// Entropic-regularized optimal transport with squared-Euclidean cost.
    #[default]
    EntropicOt,
    /// Sliced 1-Wasserstein over random unit projections.
    SlicedW1,
}

/// Pairwise squared-Euclidean cost matrix built on the tape:
/// `C_ij = |a_i|^2 + |b_j|^2 - 2 a_i . b_j` for row clouds `a` (n x d) and
/// `b` (m x d).
fn pairwise_sq_cost(tape: &mut Tape, a: Var, b: Var) -> Var {
    let cross = tape.matmul_t(a, b, false, true);
    let cross = tape.scale(cross, -2.0);
    let a2 = tape.square(a);
    let ra = tape.sum_cols(a2); // n x 1
    let b2 = tape.square(b);
    let rb = tape.sum_cols(b2); // m x 1
    let rb_row = tape.transpose(rb); // 1 x m
    let with_b = tape.add_row_broadcast(cross, rb_row);
    tape.add_col_broadcast(with_b, ra)
}

/// Log-domain Sinkhorn for uniform marginals; returns the transport plan.
fn sinkhorn_plan(cost: &Array2<f64>, epsilon: f64, max_iters: usize) -> Array2<f64> {
    let (n, m) = cost.dim();
    let log_a = -(n as f64).ln();
    let log_b = -(m as f64).ln();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];

    // log-sum-exp over a row/column of (f_i + g_j - C_ij) / eps.
    let lse = |terms: &mut dyn Iterator<Item = f64>| -> f64 {
        let vals: Vec<f64> = terms.collect();
        let mx = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if mx == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        mx + vals.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
    };

    for _ in 0..max_iters {
        // f-update: row marginals become exact.
        for i in 0..n {
            f[i] =
                -epsilon * lse(&mut (0..m).map(|j| (g[j] - cost[(i, j)]) / epsilon + log_b));
        }
        // g-update: column marginals become exact.
        let mut worst = 0.0_f64;
        for j in 0..m {
            let new_g =
                -epsilon * lse(&mut (0..n).map(|i| (f[i] - cost[(i, j)]) / epsilon + log_a));
            worst = worst.max((new_g - g[j]).abs());
            g[j] = new_g;
        }
        if worst < 1e-9 {
            break;
        }
    }
    // One last f-update so row marginals are exact, then materialize the plan
    // P_ij = exp((f_i + g_j - C_ij)/eps + log_a + log_b).
    for i in 0..n {
        f[i] = -epsilon * lse(&mut (0..m).map(|j| (g[j] - cost[(i, j)]) / epsilon + log_b));
    }
    Array2::from_shape_fn((n, m), |(i, j)| {
        ((f[i] + g[j] - cost[(i, j)]) / epsilon + log_a + log_b).exp()
    })
}

/// Entropic-OT distance between row clouds on the tape. The plan is solved
/// on detached values; the differentiable output is `<plan, cost>` with the
/// plan held fixed, so `d/d_cost = plan`.
pub fn entropic_ot_distance(tape: &mut Tape, a: Var, b: Var) -> Var {
    let cost = pairwise_sq_cost(tape, a, b);
    let plan = Rc::new(sinkhorn_plan(tape.value(cost), OT_EPSILON, OT_MAX_ITERS));
    tape.plan_cost(cost, plan)
}

/// 1-D Wasserstein-1 between uniform empirical distributions with possibly
/// different support sizes, plus subgradients with respect to each support
/// point. Points are compared through their quantile functions, which are
/// piecewise constant with breakpoints at i/n and j/m.
fn w1_one_dim(a: &[f64], b: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let n = a.len();
    let m = b.len();
    let mut ia: Vec<usize> = (0..n).collect();
    ia.sort_by(|&p, &q| a[p].partial_cmp(&a[q]).unwrap());
    let mut ib: Vec<usize> = (0..m).collect();
    ib.sort_by(|&p, &q| b[p].partial_cmp(&b[q]).unwrap());

    let mut dist = 0.0;
    let mut ga = vec![0.0; n];
    let mut gb = vec![0.0; m];
    let (mut p, mut q) = (0usize, 0usize);
    let mut lo = 0.0_f64;
    while p < n && q < m {
        let hi_a = (p + 1) as f64 / n as f64;
        let hi_b = (q + 1) as f64 / m as f64;
        let hi = hi_a.min(hi_b);
        let w = hi - lo;
        if w > 0.0 {
            let diff = a[ia[p]] - b[ib[q]];
            dist += w * diff.abs();
            let s = if diff >= 0.0 { 1.0 } else { -1.0 };
            ga[ia[p]] += w * s;
            gb[ib[q]] -= w * s;
        }
        if hi_a <= hi_b {
            p += 1;
        }
        if hi_b <= hi_a {
            q += 1;
        }
        lo = hi;
    }
    (dist, ga, gb)
}

/// Sliced 1-Wasserstein distance between row clouds on the tape: the mean of
/// 1-D Wasserstein distances over random unit projections. Sorting orders
/// and signs are held fixed in the backward pass (exact subgradients almost
/// everywhere).
pub fn sliced_w1_distance(tape: &mut Tape, a: Var, b: Var, rng: &mut ChaCha8Rng) -> Var {
    let av = tape.value(a).clone();
    let bv = tape.value(b).clone();
    let d = av.ncols();
    assert_eq!(d, bv.ncols(), "clouds must share the feature dimension");

    let mut total = 0.0;
    let mut ga = Array2::zeros(av.dim());
    let mut gb = Array2::zeros(bv.dim());
    for _ in 0..SLICED_PROJECTIONS {
        // Random direction on the unit sphere.
        let mut theta: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let norm = theta.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        for v in &mut theta {
            *v /= norm;
        }
        let pa: Vec<f64> = av.rows().into_iter().map(|r| {
            r.iter().zip(&theta).map(|(x, t)| x * t).sum()
        }).collect();
        let pb: Vec<f64> = bv.rows().into_iter().map(|r| {
            r.iter().zip(&theta).map(|(x, t)| x * t).sum()
        }).collect();
        let (dist, da, db) = w1_one_dim(&pa, &pb);
        total += dist;
        // Chain rule through the projection: d(proj_i)/d(a_ic) = theta_c.
        for i in 0..av.nrows() {
            for c in 0..d {
                ga[(i, c)] += da[i] * theta[c];
            }
        }
        for j in 0..bv.nrows() {
            for c in 0..d {
                gb[(j, c)] += db[j] * theta[c];
            }
        }
    }
    let scale = 1.0 / SLICED_PROJECTIONS as f64;
    total *= scale;
    ga.mapv_inplace(|v| v * scale);
    gb.mapv_inplace(|v| v * scale);
    tape.custom_scalar(total, a, b, ga, gb)
}

/// Distance between two row clouds under the selected estimator.
pub fn cloud_distance(
    tape: &mut Tape,
    a: Var,
    b: Var,
    kind: IpmKind,
    rng: &mut ChaCha8Rng,
) -> Var {
    match kind {
        IpmKind::EntropicOt => entropic_ot_distance(tape, a, b),
        IpmKind::SlicedW1 => sliced_w1_distance(tape, a, b, rng),
    }
}

/// Dependence measure between a representation and `(t, z)`: the distance
/// between the joint sample `{(rep_i, t_i, z_i)}` and the product sample
/// `{(rep_i, t_{pi1(i)}, z_{pi2(i)})}` for explicit permutations `pi1, pi2`.
pub fn joint_product_ipm_with_perms(
    tape: &mut Tape,
    rep: Var,
    t: &[u8],
    z: &[f64],
    pi1: &[usize],
    pi2: &[usize],
    kind: IpmKind,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let n = tape.value(rep).nrows();
    if n < 2 {
        return Err(Error::Input(format!(
            "dependence penalty needs at least 2 units, got {n}"
        )));
    }
    if t.len() != n || z.len() != n {
        return Err(Error::Input(format!(
            "representation has {n} rows but t has {} and z has {}",
            t.len(),
            z.len()
        )));
    }
    if pi1.len() != n || pi2.len() != n {
        return Err(Error::Input("permutation length mismatch".into()));
    }
    let t_col = Array2::from_shape_fn((n, 1), |(i, _)| f64::from(t[i]));
    let z_col = Array2::from_shape_fn((n, 1), |(i, _)| z[i]);
    let t_perm = Array2::from_shape_fn((n, 1), |(i, _)| f64::from(t[pi1[i]]));
    let z_perm = Array2::from_shape_fn((n, 1), |(i, _)| z[pi2[i]]);

    let t_col = tape.constant(t_col);
    let z_col = tape.constant(z_col);
    let t_perm = tape.constant(t_perm);
    let z_perm = tape.constant(z_perm);

    let joint = tape.concat_cols(rep, t_col);
    let joint = tape.concat_cols(joint, z_col);
    let product = tape.concat_cols(rep, t_perm);
    let product = tape.concat_cols(product, z_perm);
    Ok(cloud_distance(tape, joint, product, kind, rng))
}

/// [`joint_product_ipm_with_perms`] with two independent uniform
/// permutations drawn from `rng`.
pub fn joint_product_ipm(
    tape: &mut Tape,
    rep: Var,
    t: &[u8],
    z: &[f64],
    kind: IpmKind,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let n = tape.value(rep).nrows();
    let mut pi1: Vec<usize> = (0..n).collect();
    pi1.shuffle(rng);
    let mut pi2: Vec<usize> = (0..n).collect();
    pi2.shuffle(rng);
    joint_product_ipm_with_perms(tape, rep, t, z, &pi1, &pi2, kind, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| StandardNormal.sample(rng))
    }

    #[test]
    fn sinkhorn_plan_has_uniform_marginals() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = randn(&mut rng, 7, 3);
        let b = randn(&mut rng, 5, 3);
        let mut tape = Tape::new();
        let av = tape.constant(a);
        let bv = tape.constant(b);
        let cost = pairwise_sq_cost(&mut tape, av, bv);
        let plan = sinkhorn_plan(tape.value(cost), OT_EPSILON, OT_MAX_ITERS);
        // Rows are exact (the plan is materialized right after an f-update);
        // columns are only as good as the truncated iteration allows.
        for i in 0..7 {
            let row: f64 = (0..5).map(|j| plan[(i, j)]).sum();
            assert!((row - 1.0 / 7.0).abs() < 1e-12, "row {i}: {row}");
        }
        for j in 0..5 {
            let col: f64 = (0..7).map(|i| plan[(i, j)]).sum();
            assert!((col - 1.0 / 5.0).abs() < 1e-3, "col {j}: {col}");
        }
    }

    #[test]
    fn pairwise_cost_matches_direct_distances() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = randn(&mut rng, 4, 3);
        let b = randn(&mut rng, 6, 3);
        let mut tape = Tape::new();
        let av = tape.constant(a.clone());
        let bv = tape.constant(b.clone());
        let cost = pairwise_sq_cost(&mut tape, av, bv);
        for i in 0..4 {
            for j in 0..6 {
                let direct: f64 = (0..3).map(|c| (a[(i, c)] - b[(j, c)]).powi(2)).sum();
                assert!((tape.value(cost)[(i, j)] - direct).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn identical_clouds_stay_within_the_regularization_bias() {
        // With identical clouds the unregularized cost is 0; the entropic
        // optimum can pay at most eps * ln(n) in transport cost, since the
        // diagonal plan is feasible with entropy gap ln(n).
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for n in [4usize, 16, 64] {
            let a = randn(&mut rng, n, 3);
            let mut tape = Tape::new();
            let av = tape.constant(a.clone());
            let bv = tape.constant(a.clone());
            let d = entropic_ot_distance(&mut tape, av, bv);
            let got = tape.scalar_value(d);
            assert!(got >= 0.0);
            assert!(
                got <= OT_EPSILON * (n as f64).ln() + 1e-9,
                "n={n}: {got} vs bound {}",
                OT_EPSILON * (n as f64).ln()
            );
        }
    }

    #[test]
    fn identical_clouds_have_zero_sliced_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = randn(&mut rng, 10, 4);
        let mut tape = Tape::new();
        let av = tape.constant(a.clone());
        let bv = tape.constant(a);
        let d = sliced_w1_distance(&mut tape, av, bv, &mut rng);
        assert!(tape.scalar_value(d).abs() < 1e-12);
    }

    #[test]
    fn translated_one_dim_clouds_recover_the_shift_exactly() {
        // {0} x m vs {c} x m: every projection theta in {-1, +1} sees a pure
        // translation, so the sliced distance equals |c| for any draw.
        for (m, c) in [(3usize, 2.5_f64), (8, -0.75), (5, 0.0)] {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let mut tape = Tape::new();
            let a = tape.constant(Array2::zeros((m, 1)));
            let b = tape.constant(Array2::from_elem((m, 1), c));
            let d = sliced_w1_distance(&mut tape, a, b, &mut rng);
            assert!(
                (tape.scalar_value(d) - c.abs()).abs() < 1e-6,
                "m={m} c={c}: {}",
                tape.scalar_value(d)
            );
        }
    }

    #[test]
    fn one_dim_transport_handles_unequal_support_sizes() {
        // {0, 1} vs {0.5}: quantile functions differ by 0.5 everywhere.
        let (d, _, _) = w1_one_dim(&[0.0, 1.0], &[0.5]);
        assert!((d - 0.5).abs() < 1e-12);
        // {0} x 2 vs {1} x 3 is still a unit translation.
        let (d, ga, gb) = w1_one_dim(&[0.0, 0.0], &[1.0, 1.0, 1.0]);
        assert!((d - 1.0).abs() < 1e-12);
        // Subgradients: d(dist)/d(a_i) = -1/n per point, +1/m per b point.
        for g in ga {
            assert!((g - (-0.5)).abs() < 1e-12);
        }
        for g in gb {
            assert!((g - (1.0 / 3.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn sliced_subgradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a0 = randn(&mut rng, 6, 2);
        let b0 = randn(&mut rng, 4, 2);

        let eval = |a_arr: &Array2<f64>, b_arr: &Array2<f64>| -> f64 {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let mut tape = Tape::new();
            let a = tape.constant(a_arr.clone());
            let b = tape.constant(b_arr.clone());
            let d = sliced_w1_distance(&mut tape, a, b, &mut rng);
            tape.scalar_value(d)
        };

        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut tape = Tape::new();
        let a = tape.input(a0.clone());
        let b = tape.input(b0.clone());
        let d = sliced_w1_distance(&mut tape, a, b, &mut rng);
        let grads = tape.backward(d);
        let ga = grads.for_var(a).unwrap().clone();
        let gb = grads.for_var(b).unwrap().clone();

        let h = 1e-6;
        for (r, c) in [(0usize, 0usize), (2, 1), (5, 0)] {
            let mut up = a0.clone();
            up[(r, c)] += h;
            let mut dn = a0.clone();
            dn[(r, c)] -= h;
            let fd = (eval(&up, &b0) - eval(&dn, &b0)) / (2.0 * h);
            assert!(
                (fd - ga[(r, c)]).abs() < 1e-4,
                "a[{r},{c}]: fd={fd} got={}",
                ga[(r, c)]
            );
        }
        for (r, c) in [(0usize, 1usize), (3, 0)] {
            let mut up = b0.clone();
            up[(r, c)] += h;
            let mut dn = b0.clone();
            dn[(r, c)] -= h;
            let fd = (eval(&a0, &up) - eval(&a0, &dn)) / (2.0 * h);
            assert!(
                (fd - gb[(r, c)]).abs() < 1e-4,
                "b[{r},{c}]: fd={fd} got={}",
                gb[(r, c)]
            );
        }
    }

    #[test]
    fn entropic_gradient_pulls_clouds_together() {
        // Single-point clouds: cost (a - b)^2, plan = [[1.0]]; gradient of
        // the distance in a must point from b toward a with slope 2(a - b).
        let mut tape = Tape::new();
        let a = tape.input(Array2::from_elem((1, 1), 3.0));
        let b = tape.constant(Array2::from_elem((1, 1), 1.0));
        let d = entropic_ot_distance(&mut tape, a, b);
        assert!((tape.scalar_value(d) - 4.0).abs() < 1e-9);
        let grads = tape.backward(d);
        let ga = grads.for_var(a).unwrap();
        assert!((ga[(0, 0)] - 4.0).abs() < 1e-9, "d/da (a-b)^2 = 2(a-b)");
    }

    #[test]
    fn joint_and_product_coincide_under_identity_permutations() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let rep_arr = randn(&mut rng, 12, 3);
        let t: Vec<u8> = (0..12).map(|i| (i % 2) as u8).collect();
        let z: Vec<f64> = (0..12).map(|i| i as f64 / 12.0).collect();
        let idp: Vec<usize> = (0..12).collect();

        for kind in [IpmKind::EntropicOt, IpmKind::SlicedW1] {
            let mut tape = Tape::new();
            let rep = tape.constant(rep_arr.clone());
            let d = joint_product_ipm_with_perms(
                &mut tape, rep, &t, &z, &idp, &idp, kind, &mut rng,
            )
            .unwrap();
            let got = tape.scalar_value(d);
            let bound = match kind {
                IpmKind::EntropicOt => OT_EPSILON * 12.0_f64.ln() + 1e-9,
                IpmKind::SlicedW1 => 1e-12,
            };
            assert!(got >= 0.0);
            assert!(got <= bound, "{kind:?}: {got} > {bound}");
        }
    }

    #[test]
    fn loss_is_invariant_under_a_common_relabeling_of_both_samples() {
        // Relabeling units permutes the rows of both clouds identically;
        // set-valued estimators must not care.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let rep_arr = randn(&mut rng, 9, 3);
        let t: Vec<u8> = (0..9).map(|i| (i % 2) as u8).collect();
        let z: Vec<f64> = (0..9).map(|i| (i as f64) / 9.0).collect();
        let pi1: Vec<usize> = vec![3, 0, 1, 2, 8, 7, 4, 5, 6];
        let pi2: Vec<usize> = vec![1, 2, 0, 5, 3, 4, 8, 6, 7];

        // Common relabeling sigma applied to rows of rep, t, z, and the
        // permutations conjugated accordingly.
        let sigma: Vec<usize> = vec![4, 2, 7, 0, 8, 1, 6, 3, 5];
        let mut inv = vec![0usize; 9];
        for (i, &s) in sigma.iter().enumerate() {
            inv[s] = i;
        }
        let mut rep_p = Array2::zeros((9, 3));
        let mut t_p = vec![0u8; 9];
        let mut z_p = vec![0.0; 9];
        for i in 0..9 {
            rep_p.row_mut(sigma[i]).assign(&rep_arr.row(i));
            t_p[sigma[i]] = t[i];
            z_p[sigma[i]] = z[i];
        }
        // Conjugated permutation: row sigma(i) of the product sample must
        // pick up t_p[sigma(pi1(i))].
        let pi1_p: Vec<usize> = (0..9).map(|r| sigma[pi1[inv[r]]]).collect();
        let pi2_p: Vec<usize> = (0..9).map(|r| sigma[pi2[inv[r]]]).collect();

        for kind in [IpmKind::EntropicOt, IpmKind::SlicedW1] {
            let mut rng_a = ChaCha8Rng::seed_from_u64(8);
            let mut tape = Tape::new();
            let rep = tape.constant(rep_arr.clone());
            let base =
                joint_product_ipm_with_perms(&mut tape, rep, &t, &z, &pi1, &pi2, kind, &mut rng_a)
                    .unwrap();
            let base = tape.scalar_value(base);

            let mut rng_b = ChaCha8Rng::seed_from_u64(8);
            let mut tape = Tape::new();
            let rep = tape.constant(rep_p.clone());
            let perm = joint_product_ipm_with_perms(
                &mut tape, rep, &t_p, &z_p, &pi1_p, &pi2_p, kind, &mut rng_b,
            )
            .unwrap();
            let perm = tape.scalar_value(perm);
            assert!(
                (base - perm).abs() < 1e-8,
                "{kind:?}: {base} vs {perm}"
            );
        }
    }

    #[test]
    fn batches_below_two_units_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tape = Tape::new();
        let rep = tape.constant(Array2::zeros((1, 3)));
        let err = joint_product_ipm(&mut tape, rep, &[1], &[0.5], IpmKind::EntropicOt, &mut rng);
        assert!(matches!(err, Err(Error::Input(_))));
    }

    #[test]
    fn mismatched_lengths_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut tape = Tape::new();
        let rep = tape.constant(Array2::zeros((4, 3)));
        let err = joint_product_ipm(
            &mut tape,
            rep,
            &[1, 0, 1],
            &[0.5, 0.0, 0.2, 0.1],
            IpmKind::EntropicOt,
            &mut rng,
        );
        assert!(matches!(err, Err(Error::Input(_))));
    }

    #[test]
    fn dependent_representation_scores_higher_than_independent() {
        // rep equals t in one coordinate: the joint is supported on the
        // diagonal while the product mixes, so the dependence measure should
        // be clearly positive and exceed the independent case.
        let n = 40;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let z: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();

        let mut dep_rep = Array2::zeros((n, 2));
        for i in 0..n {
            dep_rep[(i, 0)] = f64::from(t[i]) * 4.0;
            dep_rep[(i, 1)] = 1.0;
        }
        let ind_rep = Array2::from_elem((n, 2), 1.0);

        let mut dep_total = 0.0;
        let mut ind_total = 0.0;
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let mut tape = Tape::new();
            let rep = tape.constant(dep_rep.clone());
            let d =
                joint_product_ipm(&mut tape, rep, &t, &z, IpmKind::EntropicOt, &mut rng).unwrap();
            dep_total += tape.scalar_value(d);

            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let mut tape = Tape::new();
            let rep = tape.constant(ind_rep.clone());
            let d =
                joint_product_ipm(&mut tape, rep, &t, &z, IpmKind::EntropicOt, &mut rng).unwrap();
            ind_total += tape.scalar_value(d);
        }
        assert!(
            dep_total > ind_total + 0.5,
            "dependent {dep_total} vs independent {ind_total}"
        );
    }
}
