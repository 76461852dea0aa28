//! Touchdown stage: the fixed linear reference controller that flies the
//! final descent, and the backward-reachability synthesis of the terminal
//! set handed to the horizon controller.
//!
//! The touchdown controller regulates the nominal state toward a setpoint
//! below the deck at the target descent rate:
//!
//! ```text
//! v_td = -K_td (z - z_r),    z+ = A_td z + B K_td z_r,   A_td = A - B K_td
//! ```
//!
//! The terminal set is the set of nominal states from which this controller
//! reaches the landed set in exactly `n_td` steps while honoring the
//! tube-tightened touchdown envelope the whole way:
//!
//! ```text
//! R_0    = landed set
//! R_k+1  = A_td^-1 (R_k - B K_td z_r)  ∩  (F_td ⊖ Z)
//! X_T    = R_n_td ∩ ({p_z >= 0} ⊖ Z)
//! ```
//!
//! Constant-disturbance coordinates are frozen (identity rows, no input),
//! so the result is a family of sets parameterized by the offset estimate.

use log::warn;
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::model::{DiscreteLinearSystem, DBAR_IDX, NUM_STATES, P_Z};
use crate::observer::error_state_indices;
use crate::sets::{HPolytope, SetError, Zonotope};

#[derive(Debug, Error)]
pub enum TerminalError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("touchdown loop unstable: spectral radius {0:.6} (offset rows excluded)")]
    Unstable(f64),
    #[error(transparent)]
    Set(#[from] SetError),
}

/// Touchdown controller and the sets defining a safe landing.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TouchdownConfig {
    /// Touchdown feedback gain (inputs x states).
    pub k_td: DMatrix<f64>,
    /// Setpoint: at-deck position, target descent rate, level attitude.
    pub z_r: DVector<f64>,
    /// Steps the touchdown stage is allowed to take.
    pub n_td: usize,
    /// Safe touchdown envelope (position, relative velocity, attitude and
    /// offset bounds that must hold throughout the final descent).
    pub f_td: HPolytope,
    /// Landed-success set: at or below deck level, inside the envelope,
    /// shrunk by the error tube.
    pub x_td_start: HPolytope,
}

/// Iterated discrete-time Riccati recursion; returns the stationary LQR
/// gain for `x+ = A x + B u` with costs `x'Qx + u'Ru`.
pub fn dlqr(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>, TerminalError> {
    let n = a.nrows();
    if b.nrows() != n || q.nrows() != n || r.nrows() != b.ncols() {
        return Err(TerminalError::Dimension(format!(
            "A {}x{}, B {}x{}, Q {}x{}, R {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols(),
            q.nrows(),
            q.ncols(),
            r.nrows(),
            r.ncols()
        )));
    }
    let mut p = q.clone();
    for _ in 0..10_000 {
        let btp = b.transpose() * &p;
        let gram = (r + &btp * b)
            .try_inverse()
            .ok_or_else(|| TerminalError::Dimension("singular input Gram matrix".into()))?;
        let k = &gram * &btp * a;
        let acl = a - b * &k;
        let p_next = q + k.transpose() * r * &k + acl.transpose() * &p * acl;
        let delta = (&p_next - &p).amax();
        p = p_next;
        if delta < 1e-11 * (1.0 + p.amax()) {
            break;
        }
    }
    let btp = b.transpose() * &p;
    let gram = (r + &btp * b)
        .try_inverse()
        .ok_or_else(|| TerminalError::Dimension("singular input Gram matrix".into()))?;
    Ok(&gram * &btp * a)
}

fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues().iter().map(|l| l.norm()).fold(0.0, f64::max)
}

/// Spectral radius of `A - B K_td` with the frozen offset rows excluded.
pub fn validate_touchdown_gain(
    sys: &DiscreteLinearSystem,
    k_td: &DMatrix<f64>,
) -> Result<f64, TerminalError> {
    let acl = &sys.a - &sys.b * k_td;
    let idx = error_state_indices();
    let core = DMatrix::from_fn(idx.len(), idx.len(), |i, j| acl[(idx[i], idx[j])]);
    let rho = spectral_radius(&core);
    if rho >= 1.0 {
        return Err(TerminalError::Unstable(rho));
    }
    Ok(rho)
}

/// One nominal touchdown step: returns the propagated state and the input
/// that produced it.
pub fn touchdown_step(
    z: &DVector<f64>,
    cfg: &TouchdownConfig,
    sys: &DiscreteLinearSystem,
) -> (DVector<f64>, DVector<f64>) {
    let v = -&cfg.k_td * (z - &cfg.z_r);
    let next = &sys.a * z + &sys.b * &v;
    (next, v)
}

/// Check that the landed set inflated by the tube stays inside the
/// touchdown envelope intersected with the at-or-below-deck halfspace
/// (support comparison per facet, small conservative margin).
pub fn validate_start_set(
    cfg: &TouchdownConfig,
    tube: &Zonotope,
    f_z_minus: &HPolytope,
) -> Result<bool, TerminalError> {
    let target = cfg.f_td.intersect(f_z_minus)?;
    for r in 0..target.num_rows() {
        let dir = target.normals().row(r).transpose();
        let Some(h_set) = cfg.x_td_start.support_lp(&dir)? else {
            // Empty landed set is vacuously contained, and useless; report
            // it as a failed validation instead.
            return Ok(false);
        };
        let h = h_set + tube.support(&dir)?;
        if h > target.offsets()[r] + 1e-7 {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Backward recursion for the terminal set. `tube` is the state-space error
/// tube; `f_z_plus` the above-deck halfspace for the handoff instant.
/// An empty result is reported through a warning and the returned set; the
/// touchdown envelope, step count or gain must then be rebalanced.
pub fn compute_terminal_set(
    cfg: &TouchdownConfig,
    sys: &DiscreteLinearSystem,
    tube: &Zonotope,
    f_z_plus: &HPolytope,
) -> Result<HPolytope, TerminalError> {
    let a_td = &sys.a - &sys.b * &cfg.k_td;
    let shift = &sys.b * (&cfg.k_td * &cfg.z_r);
    let stage = cfg.f_td.erode(tube)?;
    let mut r = cfg.x_td_start.clone();
    for k in 0..cfg.n_td {
        r = r.affine_preimage(&a_td, &shift)?.intersect(&stage)?;
        // The row count grows by the envelope size each step; prune
        // periodically to keep the preimages cheap.
        if (k + 1) % 5 == 0 || k + 1 == cfg.n_td {
            r = r.prune(1e-6)?;
        }
    }
    let terminal = r.intersect(&f_z_plus.erode(tube)?)?.prune(1e-6)?;
    if terminal.is_empty()? {
        warn!(
            "terminal set is empty after {} backward steps; relax the touchdown \
             envelope, shorten the descent, or shrink the disturbance tube",
            cfg.n_td
        );
    }
    Ok(terminal)
}

/// Defaults for the full model: LQR touchdown gain with offset
/// compensation, a touchdown envelope consistent with the published
/// landing statistics, and the landed set built from it via the tube.
pub fn default_touchdown_config(
    sys: &DiscreteLinearSystem,
    tube: &Zonotope,
) -> Result<TouchdownConfig, TerminalError> {
    assert_eq!(sys.num_states(), NUM_STATES);
    let idx = error_state_indices();
    let nc = idx.len();
    let a_core = DMatrix::from_fn(nc, nc, |i, j| sys.a[(idx[i], idx[j])]);
    let b_core = DMatrix::from_fn(nc, 3, |i, j| sys.b[(idx[i], j)]);
    // Heavy weights on vertical speed and on the reference accelerations so
    // the controller levels out while holding the descent rate; light
    // weight on position so the descent is not bent toward the setpoint.
    let mut q = DMatrix::zeros(nc, nc);
    let weights = [
        0.4, 2.0, 10.0, 0.1, // lon p, v, a_r, j_r
        0.4, 2.0, 10.0, 0.1, // lat
        0.002, 10.0, // vertical p, v
    ];
    for (i, wq) in weights.iter().enumerate() {
        q[(i, i)] = *wq;
    }
    let r = DMatrix::identity(3, 3);
    let k_core = dlqr(&a_core, &b_core, &q, &r)?;
    let mut k_td = DMatrix::zeros(3, NUM_STATES);
    for (col, &si) in idx.iter().enumerate() {
        for row in 0..3 {
            k_td[(row, si)] = k_core[(row, col)];
        }
    }
    // Unit gain on the matched offset estimate cancels it at low frequency.
    for (axis, &di) in DBAR_IDX.iter().enumerate() {
        k_td[(axis, di)] = 1.0;
    }
    validate_touchdown_gain(sys, &k_td)?;

    // Setpoint: aim below the deck at the target descent rate.
    let mut z_r = DVector::zeros(NUM_STATES);
    z_r[P_Z] = -2.0;
    z_r[P_Z + 1] = -0.7;

    // Touchdown envelope: position over the deck, relative velocity near
    // the descent target, near-level attitude, bounded offsets. The small
    // below-deck allowance leaves room for the landed set plus tube.
    let lower = DVector::from_vec(vec![
        -0.6, -0.6, -0.7, -2.0, -1.0, // lon
        -0.6, -0.6, -0.7, -2.0, -1.0, // lat
        -0.15, -1.15, -0.5, // vertical
    ]);
    let upper = DVector::from_vec(vec![
        0.6, 0.6, 0.7, 2.0, 1.0, //
        0.6, 0.6, 0.7, 2.0, 1.0, //
        1.2, -0.25, 0.5,
    ]);
    // Reorder into the state layout [p v a j dbar | p v a j dbar | p v dbar].
    let perm = [0usize, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12];
    let lo = DVector::from_fn(NUM_STATES, |i, _| lower[perm[i]]);
    let hi = DVector::from_fn(NUM_STATES, |i, _| upper[perm[i]]);
    let f_td = HPolytope::from_bounds(&lo, &hi)?;

    let below_deck = below_deck_halfspace();
    let x_td_start = f_td.intersect(&below_deck)?.erode(tube)?;
    Ok(TouchdownConfig {
        k_td,
        z_r,
        n_td: 50,
        f_td,
        x_td_start,
    })
}

/// `{p_z <= 0}`: at or below deck level.
pub fn below_deck_halfspace() -> HPolytope {
    let mut n = DMatrix::zeros(1, NUM_STATES);
    n[(0, P_Z)] = 1.0;
    HPolytope::new(n, DVector::from_element(1, 0.0)).expect("static halfspace")
}

/// `{p_z >= 0}`: above deck level.
pub fn above_deck_halfspace() -> HPolytope {
    let mut n = DMatrix::zeros(1, NUM_STATES);
    n[(0, P_Z)] = -1.0;
    HPolytope::new(n, DVector::from_element(1, 0.0)).expect("static halfspace")
}
