//! Convex set algebra: H-polytopes and zonotopes.
//!
//! Everything the tube controller needs reduces to a handful of closed-form
//! operations: support functions, Minkowski sums, halfspace erosion, affine
//! images/preimages, intersection, an emptiness test (feasibility LP via the
//! [`crate::qp`] solver), and an invariant-set approximation for stable
//! linear dynamics under bounded disturbances.
//!
//! Disturbance tubes are kept as zonotopes (sums of linear images of boxes
//! are exact in that class); constraint sets are H-polytopes. All types are
//! immutable values and all operations are pure.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::qp::{self, QpStatus};

/// A polytope declared nonempty when the feasibility LP finds a point with
/// at most this much constraint violation.
pub const EMPTINESS_TOL: f64 = 1e-8;

/// Fraction of the converged interval hull used to inflate degenerate rows
/// of the disturbance box inside [`mrpi_approx`].
pub const MRPI_INFLATION_REL: f64 = 0.01;

/// Iteration cap for the invariant-set recursion. Slow closed-loop modes
/// paired with the degenerate-row inflation can legitimately need several
/// hundred terms; each term costs one small matrix product.
pub const MRPI_MAX_STEPS: usize = 2000;

/// Default generator-count cap for [`Zonotope::reduce_order`] callers.
pub const DEFAULT_MAX_GENERATORS: usize = 60;

#[derive(Debug, Error)]
pub enum SetError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid set data: {0}")]
    Invalid(String),
    #[error("matrix is singular (smallest singular value {0:.3e})")]
    Singular(f64),
    #[error("dynamics matrix is not stable (spectral radius {0:.6})")]
    Unstable(f64),
    #[error("invariant-set recursion did not converge within {0} steps")]
    IterationCap(usize),
    #[error("feasibility subproblem failed: {0}")]
    Solver(#[from] qp::QpError),
}

/// `{x | A x <= b}` with one halfspace per row of `normals`.
#[derive(Debug, Clone, PartialEq)]
pub struct HPolytope {
    normals: DMatrix<f64>,
    offsets: DVector<f64>,
}

/// `{c + G beta | norm_inf(beta) <= 1}`; symmetric about its center.
#[derive(Debug, Clone, PartialEq)]
pub struct Zonotope {
    center: DVector<f64>,
    generators: DMatrix<f64>,
}

impl HPolytope {
    pub fn new(normals: DMatrix<f64>, offsets: DVector<f64>) -> Result<Self, SetError> {
        if normals.nrows() != offsets.len() {
            return Err(SetError::Dimension(format!(
                "{} normal rows vs {} offsets",
                normals.nrows(),
                offsets.len()
            )));
        }
        for r in 0..normals.nrows() {
            if normals.row(r).amax() == 0.0 {
                return Err(SetError::Invalid(format!("zero normal in row {r}")));
            }
        }
        Ok(Self { normals, offsets })
    }

    /// Axis-aligned box `lower <= x <= upper`.
    pub fn from_bounds(lower: &DVector<f64>, upper: &DVector<f64>) -> Result<Self, SetError> {
        let n = lower.len();
        if upper.len() != n {
            return Err(SetError::Dimension(format!(
                "lower dim {} vs upper dim {}",
                n,
                upper.len()
            )));
        }
        let mut normals = DMatrix::zeros(2 * n, n);
        let mut offsets = DVector::zeros(2 * n);
        for i in 0..n {
            normals[(i, i)] = 1.0;
            offsets[i] = upper[i];
            normals[(n + i, i)] = -1.0;
            offsets[n + i] = -lower[i];
        }
        Ok(Self { normals, offsets })
    }

    pub fn normals(&self) -> &DMatrix<f64> {
        &self.normals
    }

    pub fn offsets(&self) -> &DVector<f64> {
        &self.offsets
    }

    pub fn dim(&self) -> usize {
        self.normals.ncols()
    }

    pub fn num_rows(&self) -> usize {
        self.normals.nrows()
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        if x.len() != self.dim() {
            return false;
        }
        let slack = &self.normals * x - &self.offsets;
        slack.iter().all(|&s| s <= tol)
    }

    /// Pontryagin erosion `P (-) Z`: each halfspace `a'x <= b` becomes
    /// `a'x <= b - h_{Z - c_Z}(a) - a'c_Z`, i.e. the offset drops by the
    /// support of `Z` itself. The result may be empty.
    pub fn erode(&self, z: &Zonotope) -> Result<HPolytope, SetError> {
        if self.dim() != z.dim() {
            return Err(SetError::Dimension(format!(
                "polytope dim {} vs zonotope dim {}",
                self.dim(),
                z.dim()
            )));
        }
        let mut offsets = self.offsets.clone();
        for r in 0..self.num_rows() {
            let dir = self.normals.row(r).transpose();
            offsets[r] -= z.support(&dir)?;
        }
        Ok(HPolytope {
            normals: self.normals.clone(),
            offsets,
        })
    }

    /// Minkowski sum `P (+) Z`, exact for halfspace representations:
    /// each offset grows by the support of the centered zonotope.
    pub fn inflate(&self, z: &Zonotope) -> Result<HPolytope, SetError> {
        if self.dim() != z.dim() {
            return Err(SetError::Dimension(format!(
                "polytope dim {} vs zonotope dim {}",
                self.dim(),
                z.dim()
            )));
        }
        let mut offsets = self.offsets.clone();
        for r in 0..self.num_rows() {
            let dir = self.normals.row(r).transpose();
            offsets[r] += z.support(&dir)?;
        }
        Ok(HPolytope {
            normals: self.normals.clone(),
            offsets,
        })
    }

    /// `{x | M x + shift in P}`. `M` must be square and well-conditioned.
    pub fn affine_preimage(
        &self,
        m: &DMatrix<f64>,
        shift: &DVector<f64>,
    ) -> Result<HPolytope, SetError> {
        let n = self.dim();
        if m.nrows() != n || m.ncols() != n || shift.len() != n {
            return Err(SetError::Dimension(format!(
                "map {}x{} + shift {} vs polytope dim {}",
                m.nrows(),
                m.ncols(),
                shift.len(),
                n
            )));
        }
        let svd = m.clone().svd(false, false);
        let smin = svd.singular_values.min();
        if smin < 1e-10 {
            return Err(SetError::Singular(smin));
        }
        Ok(HPolytope {
            normals: &self.normals * m,
            offsets: &self.offsets - &self.normals * shift,
        })
    }

    /// Halfspace concatenation.
    pub fn intersect(&self, other: &HPolytope) -> Result<HPolytope, SetError> {
        if self.dim() != other.dim() {
            return Err(SetError::Dimension(format!(
                "dims {} vs {}",
                self.dim(),
                other.dim()
            )));
        }
        let rows = self.num_rows() + other.num_rows();
        let mut normals = DMatrix::zeros(rows, self.dim());
        let mut offsets = DVector::zeros(rows);
        normals.rows_mut(0, self.num_rows()).copy_from(&self.normals);
        normals
            .rows_mut(self.num_rows(), other.num_rows())
            .copy_from(&other.normals);
        offsets.rows_mut(0, self.num_rows()).copy_from(&self.offsets);
        offsets
            .rows_mut(self.num_rows(), other.num_rows())
            .copy_from(&other.offsets);
        Ok(HPolytope { normals, offsets })
    }

    /// Feasibility LP: true iff no point satisfies all halfspaces within
    /// [`EMPTINESS_TOL`]. Solved as a QP with a tiny quadratic term.
    pub fn is_empty(&self) -> Result<bool, SetError> {
        if self.num_rows() == 0 {
            return Ok(false);
        }
        let n = self.dim();
        let hess = DMatrix::identity(n, n) * 1e-8;
        let grad = DVector::zeros(n);
        let sol = qp::solve_qp(&hess, &grad, &self.normals, &self.offsets, None)?;
        match sol.status {
            QpStatus::Infeasible => Ok(true),
            _ => {
                let violation = (&self.normals * &sol.primal - &self.offsets).max();
                Ok(violation > EMPTINESS_TOL)
            }
        }
    }

    /// A feasible point strictly inside if one exists (Chebyshev-flavored:
    /// the regularized LP centers the point away from the boundary).
    pub fn feasible_point(&self) -> Result<Option<DVector<f64>>, SetError> {
        let n = self.dim();
        if self.num_rows() == 0 {
            return Ok(Some(DVector::zeros(n)));
        }
        let hess = DMatrix::identity(n, n) * 1e-8;
        let grad = DVector::zeros(n);
        let sol = qp::solve_qp(&hess, &grad, &self.normals, &self.offsets, None)?;
        if sol.status == QpStatus::Infeasible {
            return Ok(None);
        }
        let violation = (&self.normals * &sol.primal - &self.offsets).max();
        if violation > EMPTINESS_TOL {
            Ok(None)
        } else {
            Ok(Some(sol.primal))
        }
    }

    /// Support value `max {dir'x | x in P}` via the regularized feasibility
    /// QP. Returns `None` when the polytope is empty. The tiny quadratic
    /// term biases the value low by an `O(1e-9 |x|^2)` amount, so callers
    /// comparing against a bound should allow a small margin.
    pub fn support_lp(&self, dir: &DVector<f64>) -> Result<Option<f64>, SetError> {
        if dir.len() != self.dim() {
            return Err(SetError::Dimension(format!(
                "dir dim {} vs polytope dim {}",
                dir.len(),
                self.dim()
            )));
        }
        let n = self.dim();
        let hess = DMatrix::identity(n, n) * 1e-9;
        let sol = qp::solve_qp(&hess, &(-dir), &self.normals, &self.offsets, None)?;
        if sol.status == QpStatus::Infeasible {
            return Ok(None);
        }
        Ok(Some(dir.dot(&sol.primal)))
    }

    /// Drop rows that are provably redundant. A row is removed only when
    /// maximizing its normal over the remaining rows stays at least
    /// `margin` below its offset, so pruning can never enlarge the set
    /// beyond roundoff. Optional everywhere; correctness never relies on
    /// irredundancy.
    pub fn prune(&self, margin: f64) -> Result<HPolytope, SetError> {
        let n = self.dim();
        let mut keep: Vec<usize> = (0..self.num_rows()).collect();
        let hess = DMatrix::identity(n, n) * 1e-9;
        let mut r = 0;
        while r < keep.len() {
            if keep.len() <= 1 {
                break;
            }
            let row_idx = keep[r];
            let others: Vec<usize> = keep
                .iter()
                .copied()
                .filter(|&i| i != row_idx)
                .collect();
            let mut normals = DMatrix::zeros(others.len(), n);
            let mut offsets = DVector::zeros(others.len());
            for (j, &i) in others.iter().enumerate() {
                normals.row_mut(j).copy_from(&self.normals.row(i));
                offsets[j] = self.offsets[i];
            }
            let grad = -self.normals.row(row_idx).transpose();
            let sol = qp::solve_qp(&hess, &grad, &normals, &offsets, None)?;
            let redundant = sol.status == QpStatus::Optimal
                && self.normals.row(row_idx).transpose().dot(&sol.primal)
                    <= self.offsets[row_idx] - margin;
            if redundant {
                keep.remove(r);
            } else {
                r += 1;
            }
        }
        let mut normals = DMatrix::zeros(keep.len(), n);
        let mut offsets = DVector::zeros(keep.len());
        for (j, &i) in keep.iter().enumerate() {
            normals.row_mut(j).copy_from(&self.normals.row(i));
            offsets[j] = self.offsets[i];
        }
        Ok(HPolytope { normals, offsets })
    }
}

impl Zonotope {
    pub fn new(center: DVector<f64>, generators: DMatrix<f64>) -> Result<Self, SetError> {
        if generators.ncols() > 0 && generators.nrows() != center.len() {
            return Err(SetError::Dimension(format!(
                "center dim {} vs generator dim {}",
                center.len(),
                generators.nrows()
            )));
        }
        let generators = if generators.ncols() == 0 {
            DMatrix::zeros(center.len(), 0)
        } else {
            generators
        };
        Ok(Self { center, generators })
    }

    pub fn point(center: DVector<f64>) -> Self {
        let n = center.len();
        Self {
            center,
            generators: DMatrix::zeros(n, 0),
        }
    }

    /// Axis-aligned box `center +- radii`.
    pub fn from_box(center: DVector<f64>, radii: &DVector<f64>) -> Result<Self, SetError> {
        let n = center.len();
        if radii.len() != n {
            return Err(SetError::Dimension(format!(
                "center dim {} vs radii dim {}",
                n,
                radii.len()
            )));
        }
        if radii.iter().any(|&r| r < 0.0) {
            return Err(SetError::Invalid("negative box radius".into()));
        }
        Ok(Self {
            center,
            generators: DMatrix::from_diagonal(radii),
        })
    }

    pub fn center(&self) -> &DVector<f64> {
        &self.center
    }

    pub fn generators(&self) -> &DMatrix<f64> {
        &self.generators
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn num_generators(&self) -> usize {
        self.generators.ncols()
    }

    /// `h_Z(dir) = dir'c + sum_j |dir'g_j|`.
    pub fn support(&self, dir: &DVector<f64>) -> Result<f64, SetError> {
        if dir.len() != self.dim() {
            return Err(SetError::Dimension(format!(
                "dir dim {} vs zonotope dim {}",
                dir.len(),
                self.dim()
            )));
        }
        let mut h = dir.dot(&self.center);
        for j in 0..self.num_generators() {
            h += self.generators.column(j).dot(dir).abs();
        }
        Ok(h)
    }

    /// Per-axis half-width: the radii of the tightest enclosing box.
    pub fn interval_radii(&self) -> DVector<f64> {
        let mut r = DVector::zeros(self.dim());
        for i in 0..self.dim() {
            for j in 0..self.num_generators() {
                r[i] += self.generators[(i, j)].abs();
            }
        }
        r
    }

    pub fn minkowski_sum(&self, other: &Zonotope) -> Result<Zonotope, SetError> {
        if self.dim() != other.dim() {
            return Err(SetError::Dimension(format!(
                "dims {} vs {}",
                self.dim(),
                other.dim()
            )));
        }
        let g = self.num_generators() + other.num_generators();
        let mut generators = DMatrix::zeros(self.dim(), g);
        generators
            .columns_mut(0, self.num_generators())
            .copy_from(&self.generators);
        generators
            .columns_mut(self.num_generators(), other.num_generators())
            .copy_from(&other.generators);
        Ok(Zonotope {
            center: &self.center + &other.center,
            generators,
        })
    }

    /// `M Z + b`; with a rectangular selector `M` this is also the
    /// projection onto a subspace.
    pub fn affine_image(&self, m: &DMatrix<f64>, b: &DVector<f64>) -> Result<Zonotope, SetError> {
        if m.ncols() != self.dim() || b.len() != m.nrows() {
            return Err(SetError::Dimension(format!(
                "map {}x{} + shift {} vs zonotope dim {}",
                m.nrows(),
                m.ncols(),
                b.len(),
                self.dim()
            )));
        }
        Ok(Zonotope {
            center: m * &self.center + b,
            generators: m * &self.generators,
        })
    }

    /// Outer-bounding order reduction: keep the longest generators, collapse
    /// the rest into an axis-aligned box. Never shrinks the set, so every
    /// robustness margin derived from the result remains valid.
    pub fn reduce_order(&self, max_generators: usize) -> Zonotope {
        let n = self.dim();
        let g = self.num_generators();
        if g <= max_generators || max_generators < n {
            return self.clone();
        }
        let keep = max_generators - n;
        // Girard's heuristic: box the generators with the smallest
        // l1-minus-linf score (closest to axis-aligned / shortest).
        let mut order: Vec<usize> = (0..g).collect();
        let score = |j: usize| -> f64 {
            let col = self.generators.column(j);
            col.iter().map(|v| v.abs()).sum::<f64>() - col.amax()
        };
        order.sort_by(|&a, &b| score(b).partial_cmp(&score(a)).unwrap());
        let mut generators = DMatrix::zeros(n, keep + n);
        for (slot, &j) in order[..keep].iter().enumerate() {
            generators.column_mut(slot).copy_from(&self.generators.column(j));
        }
        let mut box_radii = DVector::zeros(n);
        for &j in &order[keep..] {
            for i in 0..n {
                box_radii[i] += self.generators[(i, j)].abs();
            }
        }
        for i in 0..n {
            generators[(i, keep + i)] = box_radii[i];
        }
        Zonotope {
            center: self.center.clone(),
            generators,
        }
    }

    /// Tightest enclosing axis-aligned H-polytope.
    pub fn outer_box(&self) -> HPolytope {
        let r = self.interval_radii();
        HPolytope::from_bounds(&(&self.center - &r), &(&self.center + &r))
            .expect("consistent dims")
    }
}

fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues().iter().map(|l| l.norm()).fold(0.0, f64::max)
}

/// True iff every generator touches at most one coordinate, i.e. the set
/// is an axis-aligned box.
fn is_axis_box(g: &DMatrix<f64>) -> bool {
    (0..g.ncols()).all(|j| g.column(j).iter().filter(|v| **v != 0.0).count() <= 1)
}

/// Outer approximation of the minimal invariant set of `x+ = A x + d`,
/// `d in D`, by the truncated-series construction: find the smallest `s`
/// with `A^s D~ ⊆ alpha D~` and return `(1-alpha)^-1 (+)_{i<s} A^i D~`.
///
/// `D~` equals `D` when `D` is a full-dimensional axis-aligned box. When
/// `D` is degenerate (low-rank, as a mapped disturbance set always is) the
/// scaling test is ill posed, so `D~` augments the true generators with a
/// small box — [`MRPI_INFLATION_REL`] times the converged interval hull per
/// axis — and checks the scaling through that box. Either way `D ⊆ D~`, so
/// the result is rigorously invariant for the true disturbance:
/// `A Z (+) D ⊆ Z` holds exactly, while the outer-approximation error
/// relative to the truncated sum stays below `eps` per axis.
pub fn mrpi_approx(a_k: &DMatrix<f64>, d: &Zonotope, eps: f64) -> Result<Zonotope, SetError> {
    let n = d.dim();
    if a_k.nrows() != n || a_k.ncols() != n {
        return Err(SetError::Dimension(format!(
            "dynamics {}x{} vs disturbance dim {}",
            a_k.nrows(),
            a_k.ncols(),
            n
        )));
    }
    let rho = spectral_radius(a_k);
    if rho >= 1.0 {
        return Err(SetError::Unstable(rho));
    }

    // Offset in D shifts the fixed point: solve (I - A) xc = center.
    let center_fix = if d.center().amax() > 0.0 {
        let lu = (DMatrix::identity(n, n) - a_k).lu();
        lu.solve(d.center()).ok_or(SetError::Singular(0.0))?
    } else {
        DVector::zeros(n)
    };

    // Converged interval hull of sum_i A^i D (centered part), using the
    // true generators so cross-coordinate correlation is preserved.
    let base = d.interval_radii();
    let mut hull = base.clone();
    let mut powg = d.generators().clone();
    for _ in 0..50_000 {
        if powg.ncols() == 0 {
            break;
        }
        powg = a_k * powg;
        let mut inc = 0.0_f64;
        for i in 0..n {
            let row_sum: f64 = powg.row(i).iter().map(|v| v.abs()).sum();
            hull[i] += row_sum;
            inc = inc.max(row_sum);
        }
        if inc <= 1e-13 * (1.0 + hull.amax()) {
            break;
        }
    }
    let scale = hull.amax();
    if scale == 0.0 {
        return Ok(Zonotope::point(center_fix));
    }

    let boxlike = is_axis_box(d.generators());
    // Generators of D~ and the box radii used by the scaling test.
    let (gen_base, test_radii) = if boxlike {
        // Only inflate axes the disturbance never reaches directly but the
        // dynamics do; a full-dimensional box needs no inflation at all.
        let mut radii = base.clone();
        for i in 0..n {
            if radii[i] < 1e-12 * scale {
                let infl = MRPI_INFLATION_REL * hull[i];
                if infl > 0.0 {
                    radii[i] = infl;
                }
            }
        }
        (DMatrix::from_diagonal(&radii), radii)
    } else {
        let eps_radii = DVector::from_fn(n, |i, _| MRPI_INFLATION_REL * hull[i]);
        let extra: Vec<usize> = (0..n).filter(|&i| eps_radii[i] > 0.0).collect();
        let g0 = d.generators();
        let mut gens = DMatrix::zeros(n, g0.ncols() + extra.len());
        gens.columns_mut(0, g0.ncols()).copy_from(g0);
        for (slot, &i) in extra.iter().enumerate() {
            gens[(i, g0.ncols() + slot)] = eps_radii[i];
        }
        (gens, eps_radii)
    };

    // Grow s until A^s D~ fits inside alpha times the test box (a subset of
    // alpha D~) with alpha small enough that the (1-alpha)^-1 scaling stays
    // within eps of the truncated hull.
    let mut trunc_hull: DVector<f64> = DVector::zeros(n);
    let mut term = gen_base.clone();
    let mut terms: Vec<DMatrix<f64>> = Vec::new();
    let mut result: Option<(usize, f64)> = None;
    for s in 1..=MRPI_MAX_STEPS {
        for i in 0..n {
            trunc_hull[i] += term.row(i).iter().map(|v| v.abs()).sum::<f64>();
        }
        terms.push(term.clone());
        term = a_k * term;
        let mut alpha = 0.0_f64;
        for i in 0..n {
            let reach: f64 = term.row(i).iter().map(|v| v.abs()).sum();
            if reach == 0.0 {
                continue;
            }
            if test_radii[i] > 0.0 {
                alpha = alpha.max(reach / test_radii[i]);
            } else {
                alpha = f64::INFINITY;
            }
        }
        if alpha < 1.0 && alpha / (1.0 - alpha) * trunc_hull.amax() <= eps {
            result = Some((s, alpha));
            break;
        }
    }
    let (s, alpha) = result.ok_or(SetError::IterationCap(MRPI_MAX_STEPS))?;

    let factor = 1.0 / (1.0 - alpha);
    let g_per = gen_base.ncols();
    let mut generators = DMatrix::zeros(n, s * g_per);
    for (i, t) in terms.iter().enumerate() {
        generators.columns_mut(i * g_per, g_per).copy_from(&(t * factor));
    }
    // Drop all-zero columns to keep downstream support sums cheap.
    let nonzero: Vec<usize> = (0..generators.ncols())
        .filter(|&j| generators.column(j).amax() > 0.0)
        .collect();
    let mut compact = DMatrix::zeros(n, nonzero.len());
    for (slot, &j) in nonzero.iter().enumerate() {
        compact.column_mut(slot).copy_from(&generators.column(j));
    }
    Ok(Zonotope {
        center: center_fix,
        generators: compact,
    })
}

#[derive(Serialize, Deserialize)]
struct HPolytopeRepr {
    normals: Vec<Vec<f64>>,
    offsets: Vec<f64>,
}

impl Serialize for HPolytope {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let repr = HPolytopeRepr {
            normals: (0..self.num_rows())
                .map(|r| self.normals.row(r).iter().copied().collect())
                .collect(),
            offsets: self.offsets.iter().copied().collect(),
        };
        repr.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for HPolytope {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let repr = HPolytopeRepr::deserialize(deserializer)?;
        let rows = repr.normals.len();
        let cols = repr.normals.first().map_or(0, Vec::len);
        if repr.normals.iter().any(|r| r.len() != cols) {
            return Err(serde::de::Error::custom("ragged normals matrix"));
        }
        let normals =
            DMatrix::from_fn(rows, cols, |i, j| repr.normals[i][j]);
        let offsets = DVector::from_vec(repr.offsets);
        HPolytope::new(normals, offsets).map_err(serde::de::Error::custom)
    }
}

#[derive(Serialize, Deserialize)]
struct ZonotopeRepr {
    center: Vec<f64>,
    generators: Vec<Vec<f64>>,
}

impl Serialize for Zonotope {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let repr = ZonotopeRepr {
            center: self.center.iter().copied().collect(),
            generators: (0..self.num_generators())
                .map(|j| self.generators.column(j).iter().copied().collect())
                .collect(),
        };
        repr.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Zonotope {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let repr = ZonotopeRepr::deserialize(deserializer)?;
        let n = repr.center.len();
        if repr.generators.iter().any(|g| g.len() != n) {
            return Err(serde::de::Error::custom("generator dimension mismatch"));
        }
        let g = repr.generators.len();
        let generators = DMatrix::from_fn(n, g, |i, j| repr.generators[j][i]);
        Zonotope::new(DVector::from_vec(repr.center), generators)
            .map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    fn unit_box(n: usize) -> Zonotope {
        Zonotope::from_box(DVector::zeros(n), &DVector::from_element(n, 1.0)).unwrap()
    }

    #[test]
    fn support_of_box_and_point() {
        let b = unit_box(2);
        assert_eq!(b.support(&dvector![1.0, 0.0]).unwrap(), 1.0);
        let p = Zonotope::point(dvector![2.0, 3.0]);
        assert_eq!(p.support(&dvector![0.0, 1.0]).unwrap(), 3.0);
    }

    #[test]
    fn minkowski_sum_of_intervals() {
        let a = Zonotope::from_box(dvector![0.0], &dvector![1.0]).unwrap();
        let b = Zonotope::from_box(dvector![0.0], &dvector![2.0]).unwrap();
        let s = a.minkowski_sum(&b).unwrap();
        assert_eq!(s.support(&dvector![1.0]).unwrap(), 3.0);
        assert_eq!(s.support(&dvector![-1.0]).unwrap(), 3.0);
        let z = Zonotope::point(dvector![0.0]);
        let same = a.minkowski_sum(&z).unwrap();
        assert_eq!(same.support(&dvector![1.0]).unwrap(), 1.0);
    }

    #[test]
    fn erosion_of_boxes() {
        let p = HPolytope::from_bounds(&dvector![-1.0, -1.0], &dvector![1.0, 1.0]).unwrap();
        let z = Zonotope::from_box(dvector![0.0, 0.0], &dvector![0.2, 0.2]).unwrap();
        let e = p.erode(&z).unwrap();
        assert!(e.contains(&dvector![0.8, 0.8], 1e-12));
        assert!(!e.contains(&dvector![0.81, 0.0], 0.0));

        let p1 = HPolytope::from_bounds(&dvector![-1.0], &dvector![1.0]).unwrap();
        let z1 = Zonotope::from_box(dvector![0.0], &dvector![1.0]).unwrap();
        let e1 = p1.erode(&z1).unwrap();
        assert!(e1.contains(&dvector![0.0], 1e-12));
        assert!(!e1.contains(&dvector![1e-6], 0.0));
    }

    #[test]
    fn affine_image_identity_and_collapse() {
        let z = unit_box(2);
        let id = z
            .affine_image(&DMatrix::identity(2, 2), &DVector::zeros(2))
            .unwrap();
        assert_eq!(id, z);
        let b = dvector![3.0, -1.0];
        let pt = z.affine_image(&DMatrix::zeros(2, 2), &b).unwrap();
        assert_eq!(pt.center(), &b);
        assert_eq!(pt.interval_radii().amax(), 0.0);
    }

    #[test]
    fn affine_preimage_scaling() {
        let p = HPolytope::from_bounds(&dvector![-1.0, -1.0], &dvector![1.0, 1.0]).unwrap();
        let half = p
            .affine_preimage(&(DMatrix::identity(2, 2) * 2.0), &DVector::zeros(2))
            .unwrap();
        assert!(half.contains(&dvector![0.5, 0.5], 1e-12));
        assert!(!half.contains(&dvector![0.51, 0.0], 0.0));
        let id = p
            .affine_preimage(&DMatrix::identity(2, 2), &DVector::zeros(2))
            .unwrap();
        assert_eq!(id.offsets(), p.offsets());
        let singular = p.affine_preimage(&DMatrix::zeros(2, 2), &DVector::zeros(2));
        assert!(matches!(singular, Err(SetError::Singular(_))));
    }

    #[test]
    fn intersect_intervals() {
        let a = HPolytope::from_bounds(&dvector![-1.0], &dvector![1.0]).unwrap();
        let b = HPolytope::from_bounds(&dvector![0.0], &dvector![2.0]).unwrap();
        let c = a.intersect(&b).unwrap();
        assert!(c.contains(&dvector![0.5], 1e-12));
        assert!(!c.contains(&dvector![-0.1], 0.0));
        assert!(!c.contains(&dvector![1.1], 0.0));
    }

    #[test]
    fn emptiness() {
        let full = HPolytope::from_bounds(
            &DVector::from_element(3, -1.0),
            &DVector::from_element(3, 1.0),
        )
        .unwrap();
        assert!(!full.is_empty().unwrap());
        // x <= -1 and x >= 1.
        let empty = HPolytope::new(dmatrix![1.0; -1.0], dvector![-1.0, -1.0]).unwrap();
        assert!(empty.is_empty().unwrap());
    }

    #[test]
    fn mrpi_deadbeat_returns_disturbance_set() {
        let d = Zonotope::from_box(dvector![0.0], &dvector![1.0]).unwrap();
        let z = mrpi_approx(&DMatrix::zeros(1, 1), &d, 1e-6).unwrap();
        assert!((z.support(&dvector![1.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((z.support(&dvector![-1.0]).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mrpi_scalar_geometric_series() {
        // x+ = 0.5 x + d, |d| <= 1: invariant interval is exactly [-2, 2].
        let d = Zonotope::from_box(dvector![0.0], &dvector![1.0]).unwrap();
        let z = mrpi_approx(&dmatrix![0.5], &d, 1e-3).unwrap();
        let hi = z.support(&dvector![1.0]).unwrap();
        let lo = -z.support(&dvector![-1.0]).unwrap();
        assert!(hi >= 1.999 && hi <= 2.001, "upper bound {hi}");
        assert!(lo <= -1.999 && lo >= -2.001, "lower bound {lo}");
    }

    #[test]
    fn mrpi_rejects_unstable_dynamics() {
        let d = Zonotope::from_box(dvector![0.0], &dvector![1.0]).unwrap();
        assert!(matches!(
            mrpi_approx(&dmatrix![1.0], &d, 1e-3),
            Err(SetError::Unstable(_))
        ));
    }

    #[test]
    fn order_reduction_outer_bounds() {
        let g = DMatrix::from_row_slice(
            2,
            5,
            &[1.0, 0.3, 0.1, 0.05, 0.02, 0.0, 0.4, 0.2, 0.03, 0.01],
        );
        let z = Zonotope::new(dvector![1.0, -1.0], g).unwrap();
        let r = z.reduce_order(4);
        assert_eq!(r.num_generators(), 4);
        for k in 0..32 {
            let th = k as f64 * std::f64::consts::TAU / 32.0;
            let dir = dvector![th.cos(), th.sin()];
            assert!(r.support(&dir).unwrap() >= z.support(&dir).unwrap() - 1e-12);
        }
    }

    #[test]
    fn prune_drops_redundant_row_only() {
        // Unit interval plus a redundant x <= 5.
        let p = HPolytope::new(dmatrix![1.0; -1.0; 1.0], dvector![1.0, 1.0, 5.0]).unwrap();
        let q = p.prune(1e-6).unwrap();
        assert_eq!(q.num_rows(), 2);
        assert!(q.contains(&dvector![1.0], 1e-9));
        assert!(!q.contains(&dvector![1.01], 0.0));
    }

    #[test]
    fn json_round_trip() {
        let p = HPolytope::from_bounds(&dvector![-1.0, 0.0], &dvector![2.0, 3.0]).unwrap();
        let s = serde_json::to_string(&p).unwrap();
        let back: HPolytope = serde_json::from_str(&s).unwrap();
        assert_eq!(p, back);
        let z = Zonotope::from_box(dvector![1.0, 2.0], &dvector![0.5, 0.0]).unwrap();
        let s = serde_json::to_string(&z).unwrap();
        let back: Zonotope = serde_json::from_str(&s).unwrap();
        assert_eq!(z, back);
    }
}
