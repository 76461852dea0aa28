//! Dense convex QP solver.
//!
//! Active-set method of Goldfarb and Idnani for strictly convex programs
//!
//! ```text
//!     minimize    1/2 x' H x + g' x
//!     subject to  A x <= b
//! ```
//!
//! The dual strategy starts from the unconstrained minimum and adds violated
//! constraints one at a time, so no phase-1 feasible point is required and
//! infeasibility falls out of the dual step becoming unbounded. The factors
//! `J = L^-T Q` and `R` of the active-set QR are updated with Givens
//! rotations on add/drop, which keeps each iteration O(n^2).
//!
//! A positive-semidefinite Hessian is accepted; a diagonal regularization of
//! `1e-9` is added before factorization so the Cholesky always exists.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Diagonal shift applied to the Hessian before factorization.
pub const HESSIAN_REG: f64 = 1e-9;

/// KKT tolerance required for an `Optimal` status to be trustworthy.
pub const KKT_TOL: f64 = 1e-6;

const VIOLATION_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("hessian not positive definite after regularization")]
    NotPositiveDefinite,
    #[error("non-finite entry in problem data")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

/// Result of a solve. `dual` holds one multiplier per inequality row
/// (nonnegative, zero for inactive rows).
#[derive(Debug, Clone)]
pub struct QpSolution {
    pub primal: DVector<f64>,
    pub dual: DVector<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    pub kkt_residual: f64,
    /// Indices of the active inequality rows at termination.
    pub active_set: Vec<usize>,
}

/// y += a * x
#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

/// In-place Cholesky of a column-packed symmetric matrix; the upper triangle
/// ends up holding `L^T` with `A = L L^T`.
fn cholesky(mat: &mut [f64], n: usize) -> Result<(), QpError> {
    for j in 0..n {
        for k in 0..j {
            mat[k + j * n] = (mat[k + j * n] - dot(&mat[k * n..k * n + k], &mat[j * n..j * n + k]))
                / mat[k + k * n];
        }
        let s = mat[j + j * n] - dot(&mat[j * n..j * n + j], &mat[j * n..j * n + j]);
        if s <= 0.0 {
            return Err(QpError::NotPositiveDefinite);
        }
        mat[j + j * n] = s.sqrt();
    }
    Ok(())
}

/// Solve `R^T x = b` in place for upper-triangular `R` (column-packed n x n).
fn tri_solve_transpose(mat: &[f64], vec: &mut [f64], n: usize) {
    for k in 0..n {
        vec[k] -= dot(&mat[k * n..k * n + k], &vec[..k]);
        vec[k] /= mat[k + k * n];
    }
}

/// Solve `R x = b` in place.
fn tri_solve(mat: &[f64], vec: &mut [f64], n: usize) {
    for k in (0..n).rev() {
        vec[k] /= mat[k + k * n];
        axpy(-vec[k], &mat[k * n..k * n + k], &mut vec[..k]);
    }
}

/// Invert an upper-triangular matrix in place.
fn tri_invert(mat: &mut [f64], n: usize) {
    for k in 0..n {
        mat[k + k * n] = 1.0 / mat[k + k * n];
        let d = -mat[k + k * n];
        for v in &mut mat[k * n..k * n + k] {
            *v *= d;
        }
        let (left, right) = mat.split_at_mut(n + k * n);
        for j in 0..n - k - 1 {
            axpy(
                right[k + j * n],
                &left[k * n..k * n + k],
                &mut right[j * n..j * n + k],
            );
            right[k + j * n] *= left[k + k * n];
        }
    }
}

fn hypot(a: f64, b: f64) -> f64 {
    let (lo, hi) = if a.abs() < b.abs() { (a, b) } else { (b, a) };
    let r = lo / hi;
    hi.abs() * (1.0 + r * r).sqrt()
}

fn left_right<'a>(slice: &'a mut [f64], split: usize, len: usize) -> (&'a mut [f64], &'a mut [f64]) {
    let (left, right) = slice.split_at_mut(split);
    (&mut left[split - len..], &mut right[..len])
}

/// Zero out components `r..n` of `vec` with Givens rotations, applying the
/// same rotations to the columns of `mat` (n x n, column-packed).
fn qr_insert(r: usize, vec: &mut [f64], mat: &mut [f64], n: usize) {
    for i in (r..n).rev() {
        if vec[i] == 0.0 {
            continue;
        }
        let (left, right) = left_right(mat, i * n, n);
        if vec[i - 1] == 0.0 {
            vec[i - 1] = vec[i];
            left.swap_with_slice(right);
        } else {
            let h = hypot(vec[i - 1], vec[i]).copysign(vec[i - 1]);
            let gc = vec[i - 1] / h;
            let gs = vec[i] / h;
            let nu = vec[i] / (vec[i - 1] + h);
            vec[i - 1] = h;
            for (li, ri) in left.iter_mut().zip(right.iter_mut()) {
                let temp = gc * *li + gs * *ri;
                *ri = nu * (*li + temp) - *ri;
                *li = temp;
            }
        }
    }
}

/// Drop column `col` (1-based) of the packed triangular `rmat` holding `r`
/// active columns, restoring triangularity and updating `qmat` to match.
fn qr_delete(col: usize, qmat: &mut [f64], rmat: &mut [f64], n: usize, r: usize) {
    for i in col..r {
        let di = i * (i + 1) / 2;
        let l = di + i;
        if rmat[l] == 0.0 {
            continue;
        }
        let (left, right) = left_right(qmat, i * n, n);
        if rmat[l - 1] == 0.0 {
            let mut ind = l;
            for j in i + 1..=r {
                rmat.swap(ind - 1, ind);
                ind += j;
            }
            left.swap_with_slice(right);
        } else {
            let h = hypot(rmat[l - 1], rmat[l]).copysign(rmat[l - 1]);
            let gc = rmat[l - 1] / h;
            let gs = rmat[l] / h;
            let nu = rmat[l] / (rmat[l - 1] + h);
            let mut ind = l;
            for j in i + 1..=r {
                let temp = gc * rmat[ind - 1] + gs * rmat[ind];
                rmat[ind] = nu * (rmat[ind - 1] + temp) - rmat[ind];
                rmat[ind - 1] = temp;
                ind += j;
            }
            for (li, ri) in left.iter_mut().zip(right.iter_mut()) {
                let temp = gc * *li + gs * *ri;
                *ri = nu * (*li + temp) - *ri;
                *li = temp;
            }
        }
        let (left, right) = left_right(rmat, di, i);
        left.swap_with_slice(right);
    }
}

/// Solve `min 1/2 x' H x + g' x  s.t.  A x <= b`.
///
/// `warm_hint` may carry constraint indices expected to be active (for
/// example from the previous solve of a slowly varying problem); violated
/// hinted rows are pulled into the active set first, which only changes the
/// iteration order, never the optimum. Selection is deterministic:
/// most-violated row (normalized), lowest index on ties.
pub fn solve_qp(
    hessian: &DMatrix<f64>,
    gradient: &DVector<f64>,
    ineq_normals: &DMatrix<f64>,
    ineq_offsets: &DVector<f64>,
    warm_hint: Option<&[usize]>,
) -> Result<QpSolution, QpError> {
    let n = gradient.len();
    let q = ineq_offsets.len();
    if hessian.nrows() != n || hessian.ncols() != n {
        return Err(QpError::Dimension(format!(
            "hessian {}x{} vs gradient {}",
            hessian.nrows(),
            hessian.ncols(),
            n
        )));
    }
    if ineq_normals.nrows() != q || (q > 0 && ineq_normals.ncols() != n) {
        return Err(QpError::Dimension(format!(
            "constraints {}x{} vs n={} q={}",
            ineq_normals.nrows(),
            ineq_normals.ncols(),
            n,
            q
        )));
    }
    if !hessian.iter().all(|v| v.is_finite())
        || !gradient.iter().all(|v| v.is_finite())
        || !ineq_normals.iter().all(|v| v.is_finite())
        || !ineq_offsets.iter().all(|v| v.is_finite())
    {
        return Err(QpError::NonFinite);
    }

    // Column-packed copies; constraint rows stored contiguously.
    let mut qmat: Vec<f64> = vec![0.0; n * n];
    for j in 0..n {
        for i in 0..n {
            qmat[i + j * n] = hessian[(i, j)];
        }
        qmat[j + j * n] += HESSIAN_REG;
    }
    let mut amat: Vec<f64> = vec![0.0; q * n];
    for r in 0..q {
        for j in 0..n {
            amat[r * n + j] = ineq_normals[(r, j)];
        }
    }
    let bvec: Vec<f64> = ineq_offsets.iter().copied().collect();
    let gvec: Vec<f64> = gradient.iter().copied().collect();

    let rmax = n.min(q);
    let mut dv = vec![0.0; n];
    let mut zv = vec![0.0; n];
    let mut rv_mem = vec![0.0; rmax];
    let mut rmat = vec![0.0; rmax * (rmax + 1) / 2];
    let mut sv = vec![0.0; q];
    let mut row_norm = vec![0.0; q];
    let mut iact: Vec<usize> = Vec::with_capacity(rmax);
    let mut uv: Vec<f64> = Vec::with_capacity(rmax);
    let mut hinted = vec![false; q];
    if let Some(h) = warm_hint {
        for &i in h {
            if i < q {
                hinted[i] = true;
            }
        }
    }

    // x = -H^-1 g, J = L^-T.
    let mut sol: Vec<f64> = gvec.iter().map(|v| -v).collect();
    cholesky(&mut qmat, n)?;
    tri_solve_transpose(&qmat, &mut sol, n);
    tri_solve(&qmat, &mut sol, n);
    tri_invert(&mut qmat, n);
    for j in 0..n {
        for i in j + 1..n {
            qmat[i + j * n] = 0.0;
        }
    }

    for (r, nrm) in row_norm.iter_mut().enumerate() {
        let row = &amat[r * n..(r + 1) * n];
        *nrm = dot(row, row).sqrt().max(f64::MIN_POSITIVE);
    }

    let max_iter = 20 * (n + q) + 100;
    let mut iter = 0_usize;
    let mut status = QpStatus::Optimal;

    loop {
        // Slacks b - Ax, with active rows pinned to zero against roundoff.
        for r in 0..q {
            sv[r] = bvec[r] - dot(&sol, &amat[r * n..(r + 1) * n]);
        }
        for &ind in &iact {
            sv[ind] = 0.0;
        }

        // Pick the most violated row; hinted rows take priority while any
        // of them is violated.
        let mut iadd = q;
        let mut max_violation = VIOLATION_TOL;
        let mut pass_hinted = warm_hint.is_some();
        loop {
            for r in 0..q {
                if pass_hinted && !hinted[r] {
                    continue;
                }
                let v = -sv[r] / row_norm[r];
                if v > max_violation {
                    iadd = r;
                    max_violation = v;
                }
            }
            if iadd != q || !pass_hinted {
                break;
            }
            pass_hinted = false;
        }
        if iadd == q {
            break;
        }
        if iter >= max_iter {
            status = QpStatus::MaxIter;
            break;
        }
        iter += 1;

        let mut slack = sv[iadd];
        let mut u = 0.0;

        'add: loop {
            let aadd = &amat[iadd * n..(iadd + 1) * n];
            // d = J^T a  (sign flipped: internal convention wants >=).
            for (i, dvi) in dv.iter_mut().enumerate() {
                *dvi = -dot(&qmat[i * n..(i + 1) * n], aadd);
            }
            // z = J2 d2: primal step direction.
            zv.fill(0.0);
            for i in iact.len()..n {
                axpy(dv[i], &qmat[i * n..(i + 1) * n], &mut zv);
            }
            // r = R^-1 d1: dual step direction for the active rows.
            let nact = iact.len();
            let rv = &mut rv_mem[..nact];
            rv.clone_from_slice(&dv[..nact]);
            for i in (0..nact).rev() {
                let start = i * (i + 1) / 2;
                rv[i] /= rmat[start + i];
                axpy(-rv[i], &rmat[start..start + i], &mut rv[..i]);
            }

            let mut t1 = f64::INFINITY;
            let mut idel = rmax;
            for (i, (uvi, rvi)) in uv.iter().zip(rv.iter()).enumerate() {
                if *rvi > 0.0 {
                    let temp = uvi / rvi;
                    if temp < t1 {
                        t1 = temp;
                        idel = i;
                    }
                }
            }

            let znorm2 = dot(&zv, &zv);
            let t2 = if znorm2 <= f64::EPSILON {
                f64::INFINITY
            } else {
                // z'a < 0 here; slack < 0 as well, so t2 > 0.
                slack / dot(&zv, aadd)
            };

            if t1 == f64::INFINITY && t2 == f64::INFINITY {
                // Dual unbounded along (r, 1): Farkas certificate of
                // primal infeasibility.
                status = QpStatus::Infeasible;
                break;
            }

            let partial = t2 > t1;
            let step = if partial { t1 } else { t2 };
            axpy(step, &zv, &mut sol);
            for (uvi, rvi) in uv.iter_mut().zip(rv.iter()) {
                *uvi -= step * rvi;
            }
            u += step;

            if !partial {
                // Full step: constraint iadd becomes active.
                uv.push(u);
                iact.push(iadd);
                qr_insert(iact.len(), &mut dv, &mut qmat, n);
                let start = iact.len() * (iact.len() - 1) / 2;
                rmat[start..start + iact.len()].clone_from_slice(&dv[..iact.len()]);
                break 'add;
            }

            // Partial step: drop the blocking row, retry the same iadd.
            qr_delete(idel + 1, &mut qmat, &mut rmat[..nact * (nact + 1) / 2], n, nact);
            uv.remove(idel);
            iact.remove(idel);
            slack = bvec[iadd] - dot(&sol, &amat[iadd * n..(iadd + 1) * n]);
            if slack >= -VIOLATION_TOL {
                // Roundoff resolved the violation while dropping; move on.
                break 'add;
            }
        }
        if status == QpStatus::Infeasible {
            break;
        }
    }

    let primal = DVector::from_vec(sol);
    let mut dual = DVector::zeros(q);
    for (&act, &uvi) in iact.iter().zip(uv.iter()) {
        dual[act] = uvi;
    }
    let kkt_residual = if status == QpStatus::Optimal {
        kkt_residual(hessian, gradient, ineq_normals, ineq_offsets, &primal, &dual)
    } else {
        f64::INFINITY
    };

    Ok(QpSolution {
        primal,
        dual,
        status,
        iterations: iter,
        kkt_residual,
        active_set: iact,
    })
}

/// Max of stationarity, primal feasibility and complementarity residuals for
/// `min 1/2 x'Hx + g'x, Ax <= b` with multipliers `lambda >= 0`:
/// `||Hx + g + A'lambda||_inf`, `max(Ax - b)_+`, `max |lambda_i (Ax - b)_i|`.
pub fn kkt_residual(
    hessian: &DMatrix<f64>,
    gradient: &DVector<f64>,
    ineq_normals: &DMatrix<f64>,
    ineq_offsets: &DVector<f64>,
    primal: &DVector<f64>,
    dual: &DVector<f64>,
) -> f64 {
    let mut stat = hessian * primal + gradient;
    if ineq_normals.nrows() > 0 {
        stat += ineq_normals.transpose() * dual;
    }
    let mut res = stat.amax();
    if ineq_normals.nrows() > 0 {
        let slack = ineq_normals * primal - ineq_offsets;
        for i in 0..slack.len() {
            res = res.max(slack[i]).max((dual[i] * slack[i]).abs());
            res = res.max(-dual[i]); // dual feasibility
        }
    }
    res
}
