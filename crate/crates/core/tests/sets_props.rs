//! Property and oracle tests for the set-algebra module: 2-D vertex
//! enumeration and point sampling serve as independent oracles, and
//! proptest drives randomized instances of the algebraic identities.

use decklander::sets::{mrpi_approx, HPolytope, Zonotope};
use nalgebra::{dmatrix, dvector, DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Enumerate the vertices of a bounded 2-D polytope by intersecting every
/// pair of halfspace boundaries and keeping feasible points.
fn vertices_2d(p: &HPolytope, tol: f64) -> Vec<DVector<f64>> {
    let a = p.normals();
    let b = p.offsets();
    let mut verts = Vec::new();
    for i in 0..a.nrows() {
        for j in i + 1..a.nrows() {
            let m = dmatrix![a[(i, 0)], a[(i, 1)]; a[(j, 0)], a[(j, 1)]];
            let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
            if det.abs() < 1e-12 {
                continue;
            }
            let x = dvector![
                (b[i] * m[(1, 1)] - b[j] * m[(0, 1)]) / det,
                (b[j] * m[(0, 0)] - b[i] * m[(1, 0)]) / det
            ];
            if p.contains(&x, tol) {
                verts.push(x);
            }
        }
    }
    verts
}

/// All corner points `c + G sigma`, `sigma in {-1, 1}^g`.
fn zonotope_corners(z: &Zonotope) -> Vec<DVector<f64>> {
    let g = z.num_generators();
    let mut out = Vec::with_capacity(1 << g);
    for mask in 0u32..(1 << g) {
        let mut x = z.center().clone();
        for j in 0..g {
            let s = if mask >> j & 1 == 1 { 1.0 } else { -1.0 };
            x += s * DVector::from_iterator(z.dim(), z.generators().column(j).iter().copied());
        }
        out.push(x);
    }
    out
}

fn sample_in_zonotope(z: &Zonotope, rng: &mut impl Rng) -> DVector<f64> {
    let mut x = z.center().clone();
    for j in 0..z.num_generators() {
        let s: f64 = rng.gen_range(-1.0..1.0);
        x += s * DVector::from_iterator(z.dim(), z.generators().column(j).iter().copied());
    }
    x
}

#[test]
fn support_dominates_sampled_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let g = DMatrix::from_fn(3, 3, |_, _| rng.gen_range(-1.0..1.0));
    let c = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
    let z = Zonotope::new(c, g).unwrap();
    for _ in 0..100 {
        let dir = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0_f64));
        let h = z.support(&dir).unwrap();
        let mut best = f64::NEG_INFINITY;
        for _ in 0..10_000 {
            best = best.max(dir.dot(&sample_in_zonotope(&z, &mut rng)));
        }
        assert!(best <= h + 1e-9);
        // The corners achieve the support exactly.
        let corner_best = zonotope_corners(&z)
            .iter()
            .map(|x| dir.dot(x))
            .fold(f64::NEG_INFINITY, f64::max);
        assert!((corner_best - h).abs() < 1e-9);
    }
}

#[test]
fn erosion_vertices_plus_zonotope_stay_inside() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..50 {
        let lower = DVector::from_fn(2, |_, _| rng.gen_range(-3.0..-1.0_f64));
        let upper = DVector::from_fn(2, |_, _| rng.gen_range(1.0..3.0_f64));
        let mut p = HPolytope::from_bounds(&lower, &upper).unwrap();
        // A couple of random slanted cuts through the interior.
        for _ in 0..2 {
            let n = dvector![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0_f64)];
            if n.amax() < 0.1 {
                continue;
            }
            let cut = HPolytope::new(
                DMatrix::from_row_slice(1, 2, &[n[0], n[1]]),
                dvector![rng.gen_range(0.5..2.0)],
            )
            .unwrap();
            p = p.intersect(&cut).unwrap();
        }
        let gz = DMatrix::from_fn(2, 2, |_, _| rng.gen_range(-0.3..0.3));
        let z = Zonotope::new(DVector::zeros(2), gz).unwrap();
        let e = p.erode(&z).unwrap();
        if e.is_empty().unwrap() {
            continue;
        }
        for v in vertices_2d(&e, 1e-7) {
            for w in zonotope_corners(&z) {
                assert!(
                    p.contains(&(&v + &w), 1e-9),
                    "eroded vertex {v:?} plus {w:?} left the polytope"
                );
            }
        }
    }
}

#[test]
fn preimage_membership_matches_direct_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..20 {
        let p = HPolytope::from_bounds(&dvector![-2.0, -1.5], &dvector![1.0, 2.5]).unwrap();
        let mut m = DMatrix::from_fn(2, 2, |_, _| rng.gen_range(-1.0..1.0));
        m += DMatrix::identity(2, 2) * 1.5;
        let shift = DVector::from_fn(2, |_, _| rng.gen_range(-0.5..0.5_f64));
        let pre = p.affine_preimage(&m, &shift).unwrap();
        for _ in 0..1000 {
            let x = DVector::from_fn(2, |_, _| rng.gen_range(-3.0..3.0_f64));
            let direct = p.contains(&(&m * &x + &shift), 1e-9);
            assert_eq!(pre.contains(&x, 1e-9), direct);
        }
    }
}

#[test]
fn intersection_membership_matches_both() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..20 {
        let p1 = HPolytope::from_bounds(
            &DVector::from_fn(2, |_, _| rng.gen_range(-2.0..-0.5_f64)),
            &DVector::from_fn(2, |_, _| rng.gen_range(0.5..2.0_f64)),
        )
        .unwrap();
        let p2 = HPolytope::from_bounds(
            &DVector::from_fn(2, |_, _| rng.gen_range(-2.0..-0.5_f64)),
            &DVector::from_fn(2, |_, _| rng.gen_range(0.5..2.0_f64)),
        )
        .unwrap();
        let both = p1.intersect(&p2).unwrap();
        for _ in 0..1000 {
            let x = DVector::from_fn(2, |_, _| rng.gen_range(-2.5..2.5_f64));
            assert_eq!(
                both.contains(&x, 0.0),
                p1.contains(&x, 0.0) && p2.contains(&x, 0.0)
            );
        }
    }
}

#[test]
fn emptiness_agrees_with_vertex_oracle_on_slabs() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..50 {
        // Bounded box plus a random slab that may or may not intersect it.
        let bx = HPolytope::from_bounds(&dvector![-1.0, -1.0], &dvector![1.0, 1.0]).unwrap();
        let th: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let n = dvector![th.cos(), th.sin()];
        let mid: f64 = rng.gen_range(-2.5..2.5);
        let halfw: f64 = rng.gen_range(0.01..0.3);
        let slab = HPolytope::new(
            DMatrix::from_rows(&[n.transpose(), -n.transpose()]),
            dvector![mid + halfw, -(mid - halfw)],
        )
        .unwrap();
        let p = bx.intersect(&slab).unwrap();
        let has_vertex = !vertices_2d(&p, 1e-7).is_empty();
        assert_eq!(p.is_empty().unwrap(), !has_vertex);
    }
}

#[test]
fn mrpi_double_integrator_is_invariant() {
    // x+ = (A - B K) x + d with a discretized double integrator.
    let tau = 0.1;
    let a = dmatrix![1.0, tau; 0.0, 1.0];
    let b = dvector![0.5 * tau * tau, tau];
    let k = dmatrix![0.8, 1.2];
    let ak = a - b * k;
    let d = Zonotope::from_box(dvector![0.0, 0.0], &dvector![0.01, 0.05]).unwrap();
    let z = mrpi_approx(&ak, &d, 1e-6).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let corners = zonotope_corners(&d);
    for _ in 0..1000 {
        // Boundary point of Z: support-achieving corner in a random direction.
        let th: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let dir = dvector![th.cos(), th.sin()];
        let mut x = z.center().clone();
        for j in 0..z.num_generators() {
            let gcol = DVector::from_iterator(2, z.generators().column(j).iter().copied());
            x += gcol.dot(&dir).signum() * gcol;
        }
        assert!((dir.dot(&x) - z.support(&dir).unwrap()).abs() < 1e-9);
        for w in &corners {
            let next = &ak * &x + w;
            // Membership via support comparison in many directions would be
            // loose; use the sufficient exact check for zonotope membership
            // by solving through the outer box first, then supports.
            for kk in 0..64 {
                let phi = kk as f64 * std::f64::consts::TAU / 64.0;
                let probe = dvector![phi.cos(), phi.sin()];
                assert!(
                    probe.dot(&next) <= z.support(&probe).unwrap() + 1e-9,
                    "invariance violated"
                );
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn minkowski_support_additivity(
        c1 in prop::array::uniform2(-2.0..2.0f64),
        c2 in prop::array::uniform2(-2.0..2.0f64),
        g1 in prop::array::uniform4(-1.0..1.0f64),
        g2 in prop::array::uniform4(-1.0..1.0f64),
    ) {
        let z1 = Zonotope::new(
            DVector::from_row_slice(&c1),
            DMatrix::from_row_slice(2, 2, &g1),
        ).unwrap();
        let z2 = Zonotope::new(
            DVector::from_row_slice(&c2),
            DMatrix::from_row_slice(2, 2, &g2),
        ).unwrap();
        let s = z1.minkowski_sum(&z2).unwrap();
        for k in 0..32 {
            let th = k as f64 * std::f64::consts::TAU / 32.0;
            let dir = dvector![th.cos(), th.sin()];
            let lhs = s.support(&dir).unwrap();
            let rhs = z1.support(&dir).unwrap() + z2.support(&dir).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-9);
        }
    }

    #[test]
    fn erode_then_inflate_stays_inside(
        upper in prop::array::uniform2(0.5..2.0f64),
        gz in prop::array::uniform4(-0.2..0.2f64),
        sample in prop::array::uniform2(-1.0..1.0f64),
    ) {
        let up = DVector::from_row_slice(&upper);
        let p = HPolytope::from_bounds(&(-&up), &up).unwrap();
        let z = Zonotope::new(DVector::zeros(2), DMatrix::from_row_slice(2, 2, &gz)).unwrap();
        let back = p.erode(&z).unwrap().inflate(&z).unwrap();
        // (P erode Z) inflate Z is a subset of P: any point of the former
        // satisfies P's halfspaces.
        let x = DVector::from_row_slice(&sample);
        if back.contains(&x, 0.0) {
            prop_assert!(p.contains(&x, 1e-9));
        }
    }

    #[test]
    fn rotated_box_support_matches(angle in 0.0..std::f64::consts::TAU) {
        let z = Zonotope::from_box(DVector::zeros(2), &dvector![1.0, 2.0]).unwrap();
        let rot = dmatrix![angle.cos(), -angle.sin(); angle.sin(), angle.cos()];
        let zr = z.affine_image(&rot, &DVector::zeros(2)).unwrap();
        for k in 0..16 {
            let th = k as f64 * std::f64::consts::TAU / 16.0;
            let dir = dvector![th.cos(), th.sin()];
            let back = rot.transpose() * &dir;
            prop_assert!((zr.support(&dir).unwrap() - z.support(&back).unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn preimage_of_image_is_identity_on_membership(
        x in prop::array::uniform2(-2.0..2.0f64),
        skew in -0.8..0.8f64,
    ) {
        let p = HPolytope::from_bounds(&dvector![-1.0, -1.0], &dvector![1.0, 1.0]).unwrap();
        let m = dmatrix![1.0, skew; 0.0, 1.0];
        let shift = dvector![0.3, -0.2];
        let pre = p.affine_preimage(&m, &shift).unwrap();
        let xv = DVector::from_row_slice(&x);
        prop_assert_eq!(pre.contains(&xv, 1e-9), p.contains(&(&m * &xv + &shift), 1e-9));
    }
}
