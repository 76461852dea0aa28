//! Randomized cross-check of the QP solver against a projected-gradient
//! oracle on box-constrained problems, where the projection is exact.

use decklander::qp::{solve_qp, QpStatus, KKT_TOL};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Minimize 1/2 x'Hx + g'x over lb <= x <= ub by projected gradient.
fn projected_gradient(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    lb: &DVector<f64>,
    ub: &DVector<f64>,
) -> DVector<f64> {
    let n = g.len();
    // Step size 1/L with L an upper bound on the largest eigenvalue.
    let lip = h.abs().column_sum().max();
    let step = 1.0 / lip;
    let mut x = DVector::zeros(n);
    for i in 0..n {
        x[i] = 0.5 * (lb[i] + ub[i]);
    }
    for _ in 0..200_000 {
        let grad = h * &x + g;
        let mut next = &x - step * grad;
        for i in 0..n {
            next[i] = next[i].clamp(lb[i], ub[i]);
        }
        let delta = (&next - &x).amax();
        x = next;
        if delta < 1e-13 {
            break;
        }
    }
    x
}

#[test]
fn random_box_qps_match_projected_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..100 {
        let n = rng.gen_range(2..=8);
        // H = M'M + d I is positive definite.
        let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let h = m.transpose() * &m + DMatrix::identity(n, n) * rng.gen_range(0.1..1.0);
        let g = DVector::from_fn(n, |_, _| rng.gen_range(-2.0..2.0_f64));
        let lb = DVector::from_fn(n, |_, _| rng.gen_range(-2.0..-0.1_f64));
        let ub = DVector::from_fn(n, |_, _| rng.gen_range(0.1..2.0_f64));

        let mut normals = DMatrix::zeros(2 * n, n);
        let mut offsets = DVector::zeros(2 * n);
        for i in 0..n {
            normals[(i, i)] = 1.0;
            offsets[i] = ub[i];
            normals[(n + i, i)] = -1.0;
            offsets[n + i] = -lb[i];
        }

        let sol = solve_qp(&h, &g, &normals, &offsets, None).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal, "trial {trial}");
        assert!(sol.kkt_residual <= KKT_TOL, "trial {trial}: kkt {}", sol.kkt_residual);

        let oracle = projected_gradient(&h, &g, &lb, &ub);
        let gap = (&sol.primal - &oracle).amax();
        assert!(gap < 1e-5, "trial {trial}: solutions differ by {gap}");
    }
}
