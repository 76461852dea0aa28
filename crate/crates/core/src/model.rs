//! Planning model: simplified translational dynamics with a second-order
//! attitude-reference filter per horizontal axis, exact zero-order-hold
//! discretization, constant-disturbance augmentation, and the nonlinear
//! thrust/attitude transform pair.
//!
//! # State layout
//!
//! The full discrete state is 13-dimensional and block diagonal per axis:
//!
//! ```text
//! x = [ p_x v_x a_rx j_rx dbar_x | p_y v_y a_ry j_ry dbar_y | p_z v_z dbar_z ]
//! ```
//!
//! Horizontal axes carry the attitude-filter states `(a_r, j_r)`; the
//! vertical input acts directly on acceleration. `dbar` is the constant
//! (slowly varying) disturbance per axis; the remaining disturbance `d^v`
//! enters the velocity rows through `W`.
//!
//! # Sign conventions
//!
//! Planner, constraints and simulator all use a ship-relative frame with
//! `p_z` positive **up** (height above deck). The attitude transform pair
//! works in the conventional z-down frame; [`plan_to_ned`] / [`ned_to_plan`]
//! flip the vertical component and are the only place the two conventions
//! meet.

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const NUM_STATES: usize = 13;
pub const NUM_CORE_STATES: usize = 10;
pub const NUM_INPUTS: usize = 3;
pub const NUM_DISTURBANCES: usize = 3;

/// Full-state indices.
pub const P_X: usize = 0;
pub const V_X: usize = 1;
pub const AR_X: usize = 2;
pub const JR_X: usize = 3;
pub const DBAR_X: usize = 4;
pub const P_Y: usize = 5;
pub const V_Y: usize = 6;
pub const AR_Y: usize = 7;
pub const JR_Y: usize = 8;
pub const DBAR_Y: usize = 9;
pub const P_Z: usize = 10;
pub const V_Z: usize = 11;
pub const DBAR_Z: usize = 12;

pub const POS_IDX: [usize; 3] = [P_X, P_Y, P_Z];
pub const VEL_IDX: [usize; 3] = [V_X, V_Y, V_Z];
pub const DBAR_IDX: [usize; 3] = [DBAR_X, DBAR_Y, DBAR_Z];

pub const STATE_LABELS: [&str; NUM_STATES] = [
    "p_x", "v_x", "a_rx", "j_rx", "dbar_x", "p_y", "v_y", "a_ry", "j_ry", "dbar_y", "p_z",
    "v_z", "dbar_z",
];

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model parameter: {0}")]
    InvalidParam(String),
    #[error("thrust transform singular: commanded vertical acceleration cancels gravity")]
    FreeFall,
}

/// Physical parameters of the planning model.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PlanningModelParams {
    /// Aerodynamic drag per axis (1/s).
    pub drag: [f64; 3],
    /// Attitude-filter bandwidth for pitch (x) and roll (y), rad/s.
    pub att_bandwidth: [f64; 2],
    /// Attitude-filter damping for pitch (x) and roll (y).
    pub att_damping: [f64; 2],
    /// Gravitational acceleration, m/s^2.
    pub gravity: f64,
    /// Control sample time, s.
    pub sample_time: f64,
    /// The attitude filter as published places the squared bandwidth on the
    /// rate term and the damping product on the stiffness term:
    /// `jdot_r = -w^2 j_r - 2 w zeta (a_r - a_c)`. That form is the default.
    /// Setting this flag swaps the coefficients into the textbook
    /// second-order arrangement `jdot_r = -2 w zeta j_r - w^2 (a_r - a_c)`.
    pub standard_attitude_form: bool,
}

impl Default for PlanningModelParams {
    fn default() -> Self {
        Self {
            drag: [0.05, 0.05, 0.1],
            att_bandwidth: [2.0, 2.0],
            att_damping: [1.8, 1.8],
            gravity: 9.81,
            sample_time: 0.02,
            standard_attitude_form: false,
        }
    }
}

impl PlanningModelParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.drag.iter().any(|&d| d < 0.0) {
            return Err(ModelError::InvalidParam("drag must be nonnegative".into()));
        }
        if self.att_bandwidth.iter().any(|&w| w <= 0.0) {
            return Err(ModelError::InvalidParam("bandwidth must be positive".into()));
        }
        if self.att_damping.iter().any(|&z| z <= 0.0 || z > 2.0) {
            return Err(ModelError::InvalidParam("damping must lie in (0, 2]".into()));
        }
        if self.sample_time <= 0.0 {
            return Err(ModelError::InvalidParam("sample time must be positive".into()));
        }
        if self.gravity <= 0.0 {
            return Err(ModelError::InvalidParam("gravity must be positive".into()));
        }
        Ok(())
    }
}

/// Continuous-time core model (no disturbance-offset states).
#[derive(Debug, Clone)]
pub struct ContinuousModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub w: DMatrix<f64>,
}

/// Discrete-time model `x+ = A x + B u + W d`.
#[derive(Debug, Clone)]
pub struct DiscreteLinearSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub state_labels: Vec<String>,
    pub tau: f64,
}

impl DiscreteLinearSystem {
    pub fn num_states(&self) -> usize {
        self.a.nrows()
    }

    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>, d: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u + &self.w * d
    }
}

/// Thrust magnitude plus pitch/roll commands recovered from a planned
/// acceleration.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AttitudeCommand {
    /// Specific thrust, m/s^2.
    pub thrust: f64,
    /// Pitch command, rad.
    pub pitch: f64,
    /// Roll command, rad.
    pub roll: f64,
}

/// Flip the planner's z-up acceleration into the z-down frame of the
/// attitude transform. Involution: applying it twice is the identity.
pub fn plan_to_ned(a_up: &Vector3<f64>) -> Vector3<f64> {
    Vector3::new(a_up.x, a_up.y, -a_up.z)
}

/// Inverse of [`plan_to_ned`].
pub fn ned_to_plan(a_ned: &Vector3<f64>) -> Vector3<f64> {
    plan_to_ned(a_ned)
}

/// Continuous core: per horizontal axis
/// `pdot = v, vdot = a_r - D v (+ d), adot_r = j_r, jdot_r = filter(a_r, j_r, a_c)`;
/// vertical axis `pdot_z = v_z, vdot_z = a_cz - D_z v_z (+ d_z)`.
pub fn build_continuous(params: &PlanningModelParams) -> Result<ContinuousModel, ModelError> {
    params.validate()?;
    let mut a = DMatrix::zeros(NUM_CORE_STATES, NUM_CORE_STATES);
    let mut b = DMatrix::zeros(NUM_CORE_STATES, NUM_INPUTS);
    let mut w = DMatrix::zeros(NUM_CORE_STATES, NUM_DISTURBANCES);
    for axis in 0..2 {
        let o = axis * 4;
        let omega = params.att_bandwidth[axis];
        let zeta = params.att_damping[axis];
        let (rate_coef, stiff_coef) = if params.standard_attitude_form {
            (2.0 * omega * zeta, omega * omega)
        } else {
            (omega * omega, 2.0 * omega * zeta)
        };
        a[(o, o + 1)] = 1.0;
        a[(o + 1, o + 1)] = -params.drag[axis];
        a[(o + 1, o + 2)] = 1.0;
        a[(o + 2, o + 3)] = 1.0;
        a[(o + 3, o + 2)] = -stiff_coef;
        a[(o + 3, o + 3)] = -rate_coef;
        b[(o + 3, axis)] = stiff_coef;
        w[(o + 1, axis)] = 1.0;
    }
    // Vertical axis: direct acceleration input.
    a[(8, 9)] = 1.0;
    a[(9, 9)] = -params.drag[2];
    b[(9, 2)] = 1.0;
    w[(9, 2)] = 1.0;
    Ok(ContinuousModel { a, b, w })
}

/// Exact zero-order-hold discretization of `xdot = A x + B u + W d` via the
/// matrix exponential of the stacked block `[[A, B, W], [0, 0, 0]]`.
pub fn zoh(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    w: &DMatrix<f64>,
    tau: f64,
) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let m = b.ncols();
    let l = w.ncols();
    let total = n + m + l;
    let mut stack = DMatrix::zeros(total, total);
    stack.view_mut((0, 0), (n, n)).copy_from(&(a * tau));
    stack.view_mut((0, n), (n, m)).copy_from(&(b * tau));
    stack.view_mut((0, n + m), (n, l)).copy_from(&(w * tau));
    let e = stack.exp();
    (
        e.view((0, 0), (n, n)).into(),
        e.view((0, n), (n, m)).into(),
        e.view((0, n + m), (n, l)).into(),
    )
}

/// ZOH discretization of the continuous core model.
pub fn discretize(cont: &ContinuousModel, tau: f64) -> DiscreteLinearSystem {
    let (a, b, w) = zoh(&cont.a, &cont.b, &cont.w, tau);
    let labels = [
        "p_x", "v_x", "a_rx", "j_rx", "p_y", "v_y", "a_ry", "j_ry", "p_z", "v_z",
    ];
    DiscreteLinearSystem {
        a,
        b,
        w,
        state_labels: labels.iter().map(|s| s.to_string()).collect(),
        tau,
    }
}

/// Insert one constant-disturbance state per axis: `dbar+ = dbar`, feeding
/// the same rows as the matched `W` column, which thereafter carries only
/// the residual disturbance.
pub fn augment_disturbance(core: &DiscreteLinearSystem) -> DiscreteLinearSystem {
    assert_eq!(core.num_states(), NUM_CORE_STATES, "core model expected");
    // Map core index -> full index.
    let map: [usize; NUM_CORE_STATES] = [P_X, V_X, AR_X, JR_X, P_Y, V_Y, AR_Y, JR_Y, P_Z, V_Z];
    let axis_rows: [&[usize]; 3] = [&[0, 1, 2, 3], &[4, 5, 6, 7], &[8, 9]];
    let mut a = DMatrix::zeros(NUM_STATES, NUM_STATES);
    let mut b = DMatrix::zeros(NUM_STATES, NUM_INPUTS);
    let mut w = DMatrix::zeros(NUM_STATES, NUM_DISTURBANCES);
    for i in 0..NUM_CORE_STATES {
        for j in 0..NUM_CORE_STATES {
            a[(map[i], map[j])] = core.a[(i, j)];
        }
        for j in 0..NUM_INPUTS {
            b[(map[i], j)] = core.b[(i, j)];
        }
        for j in 0..NUM_DISTURBANCES {
            w[(map[i], j)] = core.w[(i, j)];
        }
    }
    for axis in 0..3 {
        let dbar = DBAR_IDX[axis];
        a[(dbar, dbar)] = 1.0;
        for &row in axis_rows[axis] {
            a[(map[row], dbar)] = core.w[(row, axis)];
        }
    }
    DiscreteLinearSystem {
        a,
        b,
        w,
        state_labels: STATE_LABELS.iter().map(|s| s.to_string()).collect(),
        tau: core.tau,
    }
}

/// Convenience: continuous build, ZOH discretization and disturbance
/// augmentation in one call.
pub fn build_discrete_model(
    params: &PlanningModelParams,
) -> Result<DiscreteLinearSystem, ModelError> {
    let cont = build_continuous(params)?;
    Ok(augment_disturbance(&discretize(&cont, params.sample_time)))
}

/// Recover thrust and attitude from a commanded z-down acceleration:
/// `T = sqrt(ax^2 + ay^2 + (az - g)^2)`, `theta = atan(ax / (az - g))`,
/// `phi = asin(ay / T)`. Hover (`a_c = 0`) maps to `T = g`, level attitude.
pub fn inverse_transform(a_c: &Vector3<f64>, g: f64) -> Result<AttitudeCommand, ModelError> {
    let den = a_c.z - g;
    let thrust = (a_c.x * a_c.x + a_c.y * a_c.y + den * den).sqrt();
    if thrust < 1e-6 || den.abs() < 1e-9 {
        return Err(ModelError::FreeFall);
    }
    let pitch = (a_c.x / den).atan();
    let roll = (a_c.y / thrust).clamp(-1.0, 1.0).asin();
    Ok(AttitudeCommand {
        thrust,
        pitch,
        roll,
    })
}

/// Forward map: build the rotation from `(roll, pitch, yaw = 0)` and
/// evaluate `a_c = -R e_z T + e_z g` in the z-down frame. Exact inverse of
/// [`inverse_transform`] on its admissible domain.
pub fn forward_transform(cmd: &AttitudeCommand, g: f64) -> Vector3<f64> {
    // Third column of the ZYX rotation with zero yaw.
    let r_ez = Vector3::new(
        cmd.pitch.sin() * cmd.roll.cos(),
        -cmd.roll.sin(),
        cmd.pitch.cos() * cmd.roll.cos(),
    );
    -r_ez * cmd.thrust + Vector3::new(0.0, 0.0, g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params() -> PlanningModelParams {
        PlanningModelParams::default()
    }

    #[test]
    fn continuous_filter_rows_match_published_form() {
        let p = PlanningModelParams {
            drag: [0.0; 3],
            att_bandwidth: [1.0, 1.0],
            att_damping: [0.5, 0.5],
            ..params()
        };
        let c = build_continuous(&p).unwrap();
        // jdot_r = -w^2 j_r - 2 w zeta (a_r - a_c) with w = 1, zeta = 0.5.
        assert_eq!(c.a[(3, 3)], -1.0);
        assert_eq!(c.a[(3, 2)], -1.0);
        assert_eq!(c.b[(3, 0)], 1.0);
        assert_eq!(c.a[(0, 1)], 1.0);
        assert_eq!(c.a[(1, 2)], 1.0);
        assert_eq!(c.a[(2, 3)], 1.0);
    }

    #[test]
    fn velocity_decays_with_drag() {
        let p = PlanningModelParams {
            drag: [0.1, 0.05, 0.1],
            ..params()
        };
        let sys = build_discrete_model(&p).unwrap();
        let mut x = DVector::zeros(NUM_STATES);
        x[V_X] = 1.0;
        let u = DVector::zeros(3);
        let d = DVector::zeros(3);
        let steps = 100; // 2 seconds
        for _ in 0..steps {
            x = sys.step(&x, &u, &d);
        }
        let expected = (-0.1_f64 * p.sample_time * steps as f64).exp();
        assert!((x[V_X] - expected).abs() < 1e-10);
    }

    #[test]
    fn attitude_filter_has_unit_dc_gain() {
        let p = PlanningModelParams {
            drag: [0.0; 3],
            ..params()
        };
        let sys = build_discrete_model(&p).unwrap();
        let mut x = DVector::zeros(NUM_STATES);
        let u = dvector![1.0, 0.0, 0.0];
        let d = DVector::zeros(3);
        for _ in 0..3000 {
            x = sys.step(&x, &u, &d);
        }
        assert!((x[AR_X] - 1.0).abs() < 1e-8, "a_r settled at {}", x[AR_X]);
        // Same under the standard-form flag.
        let p2 = PlanningModelParams {
            standard_attitude_form: true,
            drag: [0.0; 3],
            ..params()
        };
        let sys2 = build_discrete_model(&p2).unwrap();
        let mut x2 = DVector::zeros(NUM_STATES);
        for _ in 0..3000 {
            x2 = sys2.step(&x2, &u, &d);
        }
        assert!((x2[AR_X] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn zoh_double_integrator_closed_form() {
        let a = dmatrix![0.0, 1.0; 0.0, 0.0];
        let b = dmatrix![0.0; 1.0];
        let w = DMatrix::zeros(2, 0);
        let (ad, bd, _) = zoh(&a, &b, &w, 0.1);
        assert!((ad - dmatrix![1.0, 0.1; 0.0, 1.0]).amax() < 1e-14);
        assert!((bd - dmatrix![0.005; 0.1]).amax() < 1e-14);
    }

    #[test]
    fn zoh_scalar_decay_closed_form() {
        let tau = std::f64::consts::LN_2;
        let (ad, bd, _) = zoh(
            &dmatrix![-1.0],
            &dmatrix![1.0],
            &DMatrix::zeros(1, 0),
            tau,
        );
        assert!((ad[(0, 0)] - 0.5).abs() < 1e-14);
        assert!((bd[(0, 0)] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn vertical_axis_matches_analytic_discretization() {
        let p = params();
        let sys = build_discrete_model(&p).unwrap();
        let dz = p.drag[2];
        let tau = p.sample_time;
        let decay = (-dz * tau).exp();
        assert!((sys.a[(V_Z, V_Z)] - decay).abs() < 1e-12);
        assert!((sys.a[(P_Z, V_Z)] - (1.0 - decay) / dz).abs() < 1e-12);
        assert!((sys.a[(P_Z, P_Z)] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn full_model_spectral_and_structure_checks() {
        let sys = build_discrete_model(&params()).unwrap();
        let rho = sys
            .a
            .complex_eigenvalues()
            .iter()
            .map(|l| l.norm())
            .fold(0.0, f64::max);
        assert!(rho <= 1.0 + 1e-12, "spectral radius {rho}");
        for &i in &DBAR_IDX {
            for j in 0..NUM_STATES {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert_eq!(sys.a[(i, j)], expect);
            }
        }
        // Block diagonality: zero cross-axis coupling.
        let axis_of = |i: usize| -> usize {
            match i {
                P_X | V_X | AR_X | JR_X | DBAR_X => 0,
                P_Y | V_Y | AR_Y | JR_Y | DBAR_Y => 1,
                _ => 2,
            }
        };
        for i in 0..NUM_STATES {
            for j in 0..NUM_STATES {
                if axis_of(i) != axis_of(j) {
                    assert_eq!(sys.a[(i, j)], 0.0, "coupling at ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn constant_offset_state_equals_constant_input_disturbance() {
        let p = params();
        let core = discretize(&build_continuous(&p).unwrap(), p.sample_time);
        let sys = augment_disturbance(&core);
        let c = 0.37;
        // Augmented run with dbar_x = c, zero residual disturbance.
        let mut xa = DVector::zeros(NUM_STATES);
        xa[DBAR_X] = c;
        // Core run with w-channel disturbance held at c.
        let mut xc = DVector::zeros(NUM_CORE_STATES);
        let u = dvector![0.3, -0.2, 0.1];
        for _ in 0..200 {
            xa = sys.step(&xa, &u, &DVector::zeros(3));
            xc = core.step(&xc, &u, &dvector![c, 0.0, 0.0]);
        }
        assert!((xa[P_X] - xc[0]).abs() < 1e-10);
        assert!((xa[V_X] - xc[1]).abs() < 1e-10);
    }

    #[test]
    fn discrete_step_matches_fine_integration() {
        let p = params();
        let cont = build_continuous(&p).unwrap();
        let sys = build_discrete_model(&p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let x0 = DVector::from_fn(NUM_STATES, |_, _| rng.gen_range(-2.0..2.0_f64));
            let u = DVector::from_fn(3, |_, _| rng.gen_range(-2.0..2.0_f64));
            let d = DVector::from_fn(3, |_, _| rng.gen_range(-0.5..0.5_f64));
            // RK4 on the core states with dbar folded into the disturbance.
            let map: [usize; NUM_CORE_STATES] =
                [P_X, V_X, AR_X, JR_X, P_Y, V_Y, AR_Y, JR_Y, P_Z, V_Z];
            let mut xc = DVector::from_fn(NUM_CORE_STATES, |i, _| x0[map[i]]);
            let dtot = DVector::from_fn(3, |i, _| d[i] + x0[DBAR_IDX[i]]);
            let f = |x: &DVector<f64>| -> DVector<f64> {
                &cont.a * x + &cont.b * &u + &cont.w * &dtot
            };
            let sub = 200;
            let h = p.sample_time / sub as f64;
            for _ in 0..sub {
                let k1 = f(&xc);
                let k2 = f(&(&xc + &k1 * (h / 2.0)));
                let k3 = f(&(&xc + &k2 * (h / 2.0)));
                let k4 = f(&(&xc + &k3 * h));
                xc += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
            }
            let xd = sys.step(&x0, &u, &d);
            for i in 0..NUM_CORE_STATES {
                assert!(
                    (xd[map[i]] - xc[i]).abs() < 1e-9,
                    "state {i}: {} vs {}",
                    xd[map[i]],
                    xc[i]
                );
            }
        }
    }

    #[test]
    fn transform_hover_and_axis_cases() {
        let g = 9.81;
        let hover = inverse_transform(&Vector3::zeros(), g).unwrap();
        assert!((hover.thrust - g).abs() < 1e-12);
        assert_eq!(hover.pitch, 0.0);
        assert_eq!(hover.roll, 0.0);

        let fwd = inverse_transform(&Vector3::new(1.0, 0.0, 0.0), g).unwrap();
        assert!((fwd.thrust - (1.0 + g * g).sqrt()).abs() < 1e-12);
        assert!((fwd.pitch - (1.0 / -g).atan()).abs() < 1e-12);
        assert_eq!(fwd.roll, 0.0);

        let side = inverse_transform(&Vector3::new(0.0, 1.0, 0.0), g).unwrap();
        assert!((side.thrust - (1.0 + g * g).sqrt()).abs() < 1e-12);
        assert_eq!(side.pitch, 0.0);
        assert!((side.roll - (1.0 / side.thrust).asin()).abs() < 1e-12);

        let climb = forward_transform(
            &AttitudeCommand {
                thrust: 2.0 * g,
                pitch: 0.0,
                roll: 0.0,
            },
            g,
        );
        assert!((climb - Vector3::new(0.0, 0.0, -g)).amax() < 1e-12);
    }

    #[test]
    fn transform_round_trip() {
        let g = 9.81;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let a_c = Vector3::new(
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..g - 1.0),
            );
            let cmd = inverse_transform(&a_c, g).unwrap();
            let back = forward_transform(&cmd, g);
            assert!((back - a_c).amax() < 1e-10, "round trip failed for {a_c:?}");
        }
    }

    #[test]
    fn free_fall_is_rejected() {
        assert!(matches!(
            inverse_transform(&Vector3::new(0.0, 0.0, 9.81), 9.81),
            Err(ModelError::FreeFall)
        ));
    }

    #[test]
    fn param_validation() {
        let bad = PlanningModelParams {
            drag: [-0.1, 0.0, 0.0],
            ..params()
        };
        assert!(bad.validate().is_err());
        let bad = PlanningModelParams {
            sample_time: 0.0,
            ..params()
        };
        assert!(bad.validate().is_err());
        assert!(params().validate().is_ok());
    }
}
