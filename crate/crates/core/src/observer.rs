//! Disturbance observer and ancillary feedback.
//!
//! The closed loop around a planned trajectory `(z, v)` applies
//! `u = v - K (x - z) - K_d dhat`, where `dhat` estimates the residual
//! velocity disturbance from state and input histories:
//!
//! ```text
//! s+    = A_W s - L ((A - I) x + B u + W L x),    A_W = I - L W
//! dhat  = s + L x
//! ```
//!
//! Algebraically this makes the estimate a first-order low-pass of the true
//! residual: `dhat+ = A_W dhat + L W d`. The tracking error together with
//! the estimation error forms a linear system driven only by the bounded
//! residual disturbance; its invariant set is the tube used to tighten
//! constraints. Offset (`dbar`) error rows are identically zero and are
//! excluded from the error state.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::model::{DiscreteLinearSystem, DBAR_IDX, NUM_STATES, P_Z, V_Z};
use crate::sets::{mrpi_approx, SetError, Zonotope};

#[derive(Debug, Error)]
pub enum ObserverError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("observer dynamics unstable: spectral radius of I - L W is {0:.6}")]
    ObserverUnstable(f64),
    #[error("ancillary loop unstable: spectral radius of A - B K is {0:.6} (offset rows excluded)")]
    FeedbackUnstable(f64),
    #[error(transparent)]
    Set(#[from] SetError),
}

/// Observer gain and auxiliary state.
#[derive(Debug, Clone)]
pub struct ObserverState {
    /// Auxiliary variable, one entry per disturbance channel.
    pub s: DVector<f64>,
    /// Observer gain (channels x states).
    pub l: DMatrix<f64>,
}

/// Ancillary feedback gains.
#[derive(Debug, Clone)]
pub struct AncillaryGains {
    /// State feedback (inputs x states).
    pub k: DMatrix<f64>,
    /// Disturbance feedforward (inputs x channels).
    pub k_d: DMatrix<f64>,
}

/// State indices that carry tracking error (everything but the constant
/// disturbance offsets).
pub fn error_state_indices() -> Vec<usize> {
    (0..NUM_STATES).filter(|i| !DBAR_IDX.contains(i)).collect()
}

fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    a.complex_eigenvalues().iter().map(|l| l.norm()).fold(0.0, f64::max)
}

impl ObserverState {
    pub fn new(l: DMatrix<f64>, sys: &DiscreteLinearSystem) -> Result<Self, ObserverError> {
        let ldim = l.nrows();
        if l.ncols() != sys.num_states() || sys.w.ncols() != ldim {
            return Err(ObserverError::Dimension(format!(
                "gain {}x{} vs system n={} l={}",
                l.nrows(),
                l.ncols(),
                sys.num_states(),
                sys.w.ncols()
            )));
        }
        let a_w = DMatrix::identity(ldim, ldim) - &l * &sys.w;
        let rho = spectral_radius(&a_w);
        if rho >= 1.0 {
            return Err(ObserverError::ObserverUnstable(rho));
        }
        Ok(Self {
            s: DVector::zeros(ldim),
            l,
        })
    }

    /// Default gain: act on velocity states only, scaled so each channel of
    /// `I - L W` sits at `pole` (0.8 by default elsewhere; time constant
    /// about 0.09 s at a 20 ms sample time).
    pub fn with_velocity_pole(sys: &DiscreteLinearSystem, pole: f64) -> Result<Self, ObserverError> {
        let ldim = sys.w.ncols();
        let mut l = DMatrix::zeros(ldim, sys.num_states());
        for ch in 0..ldim {
            // Pick this channel's dominant state row in W.
            let mut best_row = 0;
            let mut best = 0.0;
            for r in 0..sys.num_states() {
                if sys.w[(r, ch)].abs() > best {
                    best = sys.w[(r, ch)].abs();
                    best_row = r;
                }
            }
            if best == 0.0 {
                return Err(ObserverError::Dimension(format!(
                    "disturbance channel {ch} has zero W column"
                )));
            }
            l[(ch, best_row)] = (1.0 - pole) / sys.w[(best_row, ch)];
        }
        Self::new(l, sys)
    }

    /// `I - L W`, the estimation-error dynamics.
    pub fn a_w(&self, sys: &DiscreteLinearSystem) -> DMatrix<f64> {
        DMatrix::identity(self.s.len(), self.s.len()) - &self.l * &sys.w
    }
}

/// One observer update: return the current estimate and the propagated
/// auxiliary state.
pub fn observer_step(
    obs: &ObserverState,
    x: &DVector<f64>,
    u: &DVector<f64>,
    sys: &DiscreteLinearSystem,
) -> (ObserverState, DVector<f64>) {
    let d_hat = &obs.s + &obs.l * x;
    let n = sys.num_states();
    let drift = (&sys.a - DMatrix::identity(n, n)) * x + &sys.b * u + &sys.w * (&obs.l * x);
    let a_w = obs.a_w(sys);
    let s_next = &a_w * &obs.s - &obs.l * drift;
    (
        ObserverState {
            s: s_next,
            l: obs.l.clone(),
        },
        d_hat,
    )
}

/// `u = v - K (x - z) - K_d dhat`.
pub fn ancillary_control(
    v: &DVector<f64>,
    x: &DVector<f64>,
    z: &DVector<f64>,
    d_hat: &DVector<f64>,
    gains: &AncillaryGains,
) -> DVector<f64> {
    v - &gains.k * (x - z) - &gains.k_d * d_hat
}

impl AncillaryGains {
    /// Feedback gains from the flight experiments: per-axis position and
    /// velocity gains plus a shared acceleration gain on the reference
    /// acceleration and the disturbance offset.
    pub fn experiment_defaults() -> Self {
        let mut k = DMatrix::zeros(3, NUM_STATES);
        // Longitudinal: [p, v, a_r, j_r, dbar].
        for (j, g) in [0.6, 1.4, 0.5, 0.0, 0.5].iter().enumerate() {
            k[(0, j)] = *g;
        }
        // Lateral.
        for (j, g) in [0.4, 1.0, 0.5, 0.0, 0.5].iter().enumerate() {
            k[(1, 5 + j)] = *g;
        }
        // Vertical: [p_z, v_z, dbar_z].
        k[(2, P_Z)] = 2.0;
        k[(2, V_Z)] = 3.0;
        let k_d = DMatrix::from_diagonal(&DVector::from_vec(vec![1.5, 1.5, 1.0]));
        Self { k, k_d }
    }

    /// Spectral radius of the ancillary loop with offset rows excluded
    /// (offsets are marginally stable by construction and carry no error).
    pub fn validate(&self, sys: &DiscreteLinearSystem) -> Result<f64, ObserverError> {
        if self.k.ncols() != sys.num_states() || self.k.nrows() != sys.b.ncols() {
            return Err(ObserverError::Dimension(format!(
                "K is {}x{} vs system n={} m={}",
                self.k.nrows(),
                self.k.ncols(),
                sys.num_states(),
                sys.b.ncols()
            )));
        }
        let acl = &sys.a - &sys.b * &self.k;
        let idx = error_state_indices();
        let core = DMatrix::from_fn(idx.len(), idx.len(), |i, j| acl[(idx[i], idx[j])]);
        let rho = spectral_radius(&core);
        if rho >= 1.0 {
            return Err(ObserverError::FeedbackUnstable(rho));
        }
        Ok(rho)
    }
}

/// Augmented error system driving the tube computation. The state stacks
/// the tracking error over [`error_state_indices`] with the estimation
/// error; offset rows are dropped because their error is identically zero:
///
/// ```text
/// Atil = [ A - B K   -B K_d ]      Btil = [ W   ]
///        [ 0          I-L W ]             [ L W ]
/// ```
pub fn build_augmented_error_system(
    sys: &DiscreteLinearSystem,
    gains: &AncillaryGains,
    obs: &ObserverState,
) -> Result<(DMatrix<f64>, DMatrix<f64>), ObserverError> {
    gains.validate(sys)?;
    let a_w = obs.a_w(sys);
    let rho_w = spectral_radius(&a_w);
    if rho_w >= 1.0 {
        return Err(ObserverError::ObserverUnstable(rho_w));
    }
    let idx = error_state_indices();
    let ne = idx.len();
    let ld = obs.s.len();
    let acl = &sys.a - &sys.b * &gains.k;
    let bkd = &sys.b * &gains.k_d;
    let lw = &obs.l * &sys.w;
    let mut a_aug = DMatrix::zeros(ne + ld, ne + ld);
    let mut b_aug = DMatrix::zeros(ne + ld, sys.w.ncols());
    for i in 0..ne {
        for j in 0..ne {
            a_aug[(i, j)] = acl[(idx[i], idx[j])];
        }
        for j in 0..ld {
            a_aug[(i, ne + j)] = -bkd[(idx[i], j)];
        }
        for j in 0..sys.w.ncols() {
            b_aug[(i, j)] = sys.w[(idx[i], j)];
        }
    }
    for i in 0..ld {
        for j in 0..ld {
            a_aug[(ne + i, ne + j)] = a_w[(i, j)];
        }
        for j in 0..sys.w.ncols() {
            b_aug[(ne + i, j)] = lw[(i, j)];
        }
    }
    Ok((a_aug, b_aug))
}

/// Invariant tube of the augmented error system under the residual
/// disturbance box `|d| <= dv_radii` componentwise.
pub fn compute_error_tube(
    sys: &DiscreteLinearSystem,
    gains: &AncillaryGains,
    obs: &ObserverState,
    dv_radii: &DVector<f64>,
    eps: f64,
) -> Result<Zonotope, ObserverError> {
    let (a_aug, b_aug) = build_augmented_error_system(sys, gains, obs)?;
    let dv = Zonotope::from_box(DVector::zeros(dv_radii.len()), dv_radii)?;
    let driven = dv.affine_image(&b_aug, &DVector::zeros(a_aug.nrows()))?;
    Ok(mrpi_approx(&a_aug, &driven, eps)?)
}

/// Project the augmented tube onto the full 13-dimensional state (offset
/// rows zero): the set of tracking errors `x - z`.
pub fn project_tube_to_state(tube: &Zonotope) -> Result<Zonotope, SetError> {
    let idx = error_state_indices();
    let mut sel = DMatrix::zeros(NUM_STATES, tube.dim());
    for (col, &row) in idx.iter().enumerate() {
        sel[(row, col)] = 1.0;
    }
    tube.affine_image(&sel, &DVector::zeros(NUM_STATES))
}

/// The set of input deviations `u - v` produced by the ancillary law while
/// the error lives in the tube. The estimate is clamped to the disturbance
/// box before use, so its contribution is bounded by `K_d` times that box
/// regardless of the estimation error.
pub fn project_tube_to_input(
    tube: &Zonotope,
    gains: &AncillaryGains,
    dv_radii: &DVector<f64>,
) -> Result<Zonotope, SetError> {
    let idx = error_state_indices();
    let m = gains.k.nrows();
    let mut k_sel = DMatrix::zeros(m, tube.dim());
    for (col, &row) in idx.iter().enumerate() {
        for i in 0..m {
            k_sel[(i, col)] = gains.k[(i, row)];
        }
    }
    let from_state = tube.affine_image(&k_sel, &DVector::zeros(m))?;
    let dv = Zonotope::from_box(DVector::zeros(dv_radii.len()), dv_radii)?;
    let from_estimate = dv.affine_image(&gains.k_d, &DVector::zeros(m))?;
    from_state.minkowski_sum(&from_estimate)
}

/// Clamp a disturbance estimate into the configured residual box.
pub fn clamp_estimate(d_hat: &DVector<f64>, dv_radii: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(d_hat.len(), |i, _| d_hat[i].clamp(-dv_radii[i], dv_radii[i]))
}


#[cfg(test)]
mod tube_probe {
    use super::*;
    use crate::model::{build_discrete_model, PlanningModelParams};
    use nalgebra::dvector;

    #[test]
    #[ignore = "diagnostic: prints tube extents"]
    fn print_tube_extents() {
        let sys = build_discrete_model(&PlanningModelParams::default()).unwrap();
        let gains = AncillaryGains::experiment_defaults();
        let dv = dvector![0.06, 0.05, 0.15];
        let obs = ObserverState::with_velocity_pole(&sys, 0.8).unwrap();
        let tube = compute_error_tube(&sys, &gains, &obs, &dv, 1e-2).unwrap();
        println!("generators: {}", tube.num_generators());
        let xs = project_tube_to_state(&tube).unwrap();
        println!("state tube radii: {:.4}", xs.interval_radii().transpose());
        let us = project_tube_to_input(&tube, &gains, &dv).unwrap();
        println!("input tube radii: {:.4}", us.interval_radii().transpose());
    }
}
