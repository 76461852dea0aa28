//! Closed-loop landing simulation.
//!
//! Runs the two-stage landing controller against a nonlinear translational
//! plant: thrust is mapped through the full attitude rotation, the attitude
//! reference follows second-order dynamics, the true attitude tracks the
//! reference with a bounded injected error, and wind acts as a constant trim
//! offset plus a bounded time-varying part.  The ship moves at constant
//! velocity and the planner works entirely in deck-relative coordinates.

use crate::model::{
    build_discrete_model, inverse_transform, ned_to_plan, plan_to_ned, AttitudeCommand,
    ModelError, PlanningModelParams, AR_X, AR_Y, DBAR_IDX, JR_X, JR_Y, NUM_INPUTS, NUM_STATES,
    P_X, P_Y, P_Z, V_X, V_Y, V_Z,
};
use crate::observer::{
    ancillary_control, clamp_estimate, compute_error_tube, observer_step, project_tube_to_input,
    project_tube_to_state, AncillaryGains, ObserverError, ObserverState,
};
use crate::sets::{HPolytope, SetError, Zonotope};
use crate::shmpc::{cartesian_product, ShmpcConfig, ShmpcController, ShmpcError};
use crate::terminal::{
    above_deck_halfspace, below_deck_halfspace, compute_terminal_set, default_touchdown_config,
    touchdown_step, validate_start_set, TerminalError, TouchdownConfig,
};
use nalgebra::{DMatrix, DVector, Vector3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("model error: {0}")]
    Model(#[from] ModelError),
    #[error("observer error: {0}")]
    Observer(#[from] ObserverError),
    #[error("terminal-stage error: {0}")]
    Terminal(#[from] TerminalError),
    #[error("controller error at step {step}: {source}")]
    Controller {
        step: usize,
        #[source]
        source: ShmpcError,
    },
    #[error("initial problem infeasible, scenario rejected: {0}")]
    InfeasibleStart(String),
    #[error("set computation error: {0}")]
    Set(#[from] SetError),
    #[error("attitude out of range: {0} rad")]
    AttitudeOutOfRange(f64),
    #[error("premature ground contact at step {step}")]
    PrematureContact { step: usize },
    #[error("no touchdown within the allowed window")]
    NoTouchdown,
    #[error("touchdown not yet detected in this log")]
    NoTouchdownInLog,
    #[error("csv write error: {0}")]
    Csv(#[from] csv::Error),
}

// ---------------------------------------------------------------------------
// Plant
// ---------------------------------------------------------------------------

/// Physical state of the helicopter (absolute coordinates, z up).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlantState {
    pub p: Vector3<f64>,
    pub v: Vector3<f64>,
    pub pitch_ref: f64,
    pub pitch_rate: f64,
    pub roll_ref: f64,
    pub roll_rate: f64,
    /// True attitude: reference plus the injected inner-loop tracking error.
    pub pitch: f64,
    pub roll: f64,
}

impl PlantState {
    pub fn at_rest(p: Vector3<f64>, v: Vector3<f64>) -> Self {
        Self {
            p,
            v,
            pitch_ref: 0.0,
            pitch_rate: 0.0,
            roll_ref: 0.0,
            roll_rate: 0.0,
            pitch: 0.0,
            roll: 0.0,
        }
    }
}

const PLANT_DIM: usize = 10;

fn plant_deriv(
    y: &[f64; PLANT_DIM],
    cmd: &AttitudeCommand,
    d: &Vector3<f64>,
    params: &PlanningModelParams,
) -> [f64; PLANT_DIM] {
    let g = params.gravity;
    // Thrust acts along the reference attitude: the inner-loop tracking
    // error perturbs the reported attitude, but its force-level effect is
    // part of the bounded disturbance `d` (which already saturates at the
    // modelled box), not an extra unmodelled input.
    let pitch = y[6];
    let roll = y[8];
    // thrust direction: third column of the zero-yaw ZYX rotation
    let r_ez = Vector3::new(
        pitch.sin() * roll.cos(),
        -roll.sin(),
        pitch.cos() * roll.cos(),
    );
    let accel_ned = -r_ez * cmd.thrust + Vector3::new(0.0, 0.0, g);
    let accel = ned_to_plan(&accel_ned);
    let mut dy = [0.0; PLANT_DIM];
    for i in 0..3 {
        dy[i] = y[3 + i];
        dy[3 + i] = accel[i] - params.drag[i] * y[3 + i] + d[i];
    }
    // attitude reference dynamics, matching the planning filter written in
    // acceleration coordinates (stiffness 2*w*zeta, damping w^2) unless the
    // conventional second-order form is selected
    let (w_lon, z_lon) = (params.att_bandwidth[0], params.att_damping[0]);
    let (w_lat, z_lat) = (params.att_bandwidth[1], params.att_damping[1]);
    if params.standard_attitude_form {
        dy[6] = y[7];
        dy[7] = -2.0 * z_lon * w_lon * y[7] - w_lon * w_lon * (y[6] - cmd.pitch);
        dy[8] = y[9];
        dy[9] = -2.0 * z_lat * w_lat * y[9] - w_lat * w_lat * (y[8] - cmd.roll);
    } else {
        dy[6] = y[7];
        dy[7] = -w_lon * w_lon * y[7] - 2.0 * w_lon * z_lon * (y[6] - cmd.pitch);
        dy[8] = y[9];
        dy[9] = -w_lat * w_lat * y[9] - 2.0 * w_lat * z_lat * (y[8] - cmd.roll);
    }
    dy
}

/// One RK4 step of the nonlinear plant with command, attitude error, and
/// disturbance held constant over the step.
pub fn plant_step(
    state: &PlantState,
    cmd: &AttitudeCommand,
    att_err: &[f64; 2],
    d: &Vector3<f64>,
    tau: f64,
    params: &PlanningModelParams,
) -> Result<PlantState, SimError> {
    let mut y = [
        state.p.x,
        state.p.y,
        state.p.z,
        state.v.x,
        state.v.y,
        state.v.z,
        state.pitch_ref,
        state.pitch_rate,
        state.roll_ref,
        state.roll_rate,
    ];
    let k1 = plant_deriv(&y, cmd, d, params);
    let mut y2 = y;
    for i in 0..PLANT_DIM {
        y2[i] = y[i] + 0.5 * tau * k1[i];
    }
    let k2 = plant_deriv(&y2, cmd, d, params);
    let mut y3 = y;
    for i in 0..PLANT_DIM {
        y3[i] = y[i] + 0.5 * tau * k2[i];
    }
    let k3 = plant_deriv(&y3, cmd, d, params);
    let mut y4 = y;
    for i in 0..PLANT_DIM {
        y4[i] = y[i] + tau * k3[i];
    }
    let k4 = plant_deriv(&y4, cmd, d, params);
    for i in 0..PLANT_DIM {
        y[i] += tau / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    let pitch = y[6] + att_err[0];
    let roll = y[8] + att_err[1];
    for a in [pitch, roll] {
        if !a.is_finite() || a.abs() >= PI / 2.0 - 1e-3 {
            return Err(SimError::AttitudeOutOfRange(a));
        }
    }
    Ok(PlantState {
        p: Vector3::new(y[0], y[1], y[2]),
        v: Vector3::new(y[3], y[4], y[5]),
        pitch_ref: y[6],
        pitch_rate: y[7],
        roll_ref: y[8],
        roll_rate: y[9],
        pitch,
        roll,
    })
}

/// Quasi-static map from the reference attitude to the linear-model attitude
/// states: the horizontal specific accelerations `(a_rx, a_ry)` produced at
/// level-flight thrust, and their time derivatives `(j_rx, j_ry)`.
pub fn attitude_outputs(state: &PlantState, g: f64) -> ([f64; 2], [f64; 2]) {
    let th = state.pitch_ref;
    let ph = state.roll_ref;
    let a_rx = -g * th.tan();
    let a_ry = g * ph.tan() / th.cos();
    let j_rx = -g * state.pitch_rate / (th.cos() * th.cos());
    let j_ry = g * (state.roll_rate / (ph.cos() * ph.cos() * th.cos())
        + ph.tan() * th.tan() * state.pitch_rate / th.cos());
    ([a_rx, a_ry], [j_rx, j_ry])
}

// ---------------------------------------------------------------------------
// Disturbances
// ---------------------------------------------------------------------------

/// Wind/trim disturbance model: constant part plus a bounded varying part.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DisturbanceConfig {
    /// Constant acceleration offset, m/s^2.
    pub d_bar: [f64; 3],
    /// Componentwise half-widths of the varying part, m/s^2.
    pub dv_box: [f64; 3],
    /// Fraction of the box filled by the low-frequency sinusoids.
    pub amplitude_frac: f64,
    /// Fraction of the box filled by the band-limited noise component.
    pub noise_frac: f64,
    pub seed: u64,
    /// Window over which each component is analytically de-meaned.
    pub detrend_duration: f64,
}

impl DisturbanceConfig {
    pub fn quiet(d_bar: [f64; 3], dv_box: [f64; 3]) -> Self {
        Self {
            d_bar,
            dv_box,
            amplitude_frac: 0.0,
            noise_frac: 0.0,
            seed: 0,
            detrend_duration: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
struct Sinusoid {
    amp: f64,
    omega: f64,
    phase: f64,
    /// Analytic mean over the detrend window, subtracted at evaluation.
    mean: f64,
}

/// Seeded, reproducible disturbance signal that stays inside its box.
#[derive(Debug, Clone)]
pub struct DisturbanceGenerator {
    d_bar: Vector3<f64>,
    dv_box: Vector3<f64>,
    components: [Vec<Sinusoid>; 3],
}

impl DisturbanceGenerator {
    pub fn new(cfg: &DisturbanceConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let horizon = cfg.detrend_duration.max(1e-6);
        let mut components: [Vec<Sinusoid>; 3] = Default::default();
        for (axis, comp) in components.iter_mut().enumerate() {
            let box_j = cfg.dv_box[axis];
            // three slow sinusoids carrying most of the budget
            for (frac, base_hz) in [(0.5, 0.05), (0.3, 0.13), (0.2, 0.31)] {
                let amp = cfg.amplitude_frac * box_j * frac;
                let omega = 2.0 * PI * base_hz * rng.gen_range(0.8..1.2);
                let phase = rng.gen_range(0.0..2.0 * PI);
                comp.push(make_sinusoid(amp, omega, phase, horizon));
            }
            // band-limited noise: many small fast sinusoids
            let n_noise = 12;
            for _ in 0..n_noise {
                let amp = cfg.noise_frac * box_j / (n_noise as f64).sqrt();
                let omega = 2.0 * PI * rng.gen_range(0.5..2.0);
                let phase = rng.gen_range(0.0..2.0 * PI);
                comp.push(make_sinusoid(amp, omega, phase, horizon));
            }
        }
        Self {
            d_bar: Vector3::from_row_slice(&cfg.d_bar),
            dv_box: Vector3::from_row_slice(&cfg.dv_box),
            components,
        }
    }

    /// Varying part only, clamped into the box.
    pub fn varying(&self, t: f64) -> Vector3<f64> {
        Vector3::from_fn(|axis, _| {
            let raw: f64 = self.components[axis]
                .iter()
                .map(|s| s.amp * (s.omega * t + s.phase).sin() - s.mean)
                .sum();
            raw.clamp(-self.dv_box[axis], self.dv_box[axis])
        })
    }

    /// Total disturbance `d_bar + d_v(t)`.
    pub fn total(&self, t: f64) -> Vector3<f64> {
        self.d_bar + self.varying(t)
    }

    pub fn d_bar(&self) -> Vector3<f64> {
        self.d_bar
    }
}

fn make_sinusoid(amp: f64, omega: f64, phase: f64, horizon: f64) -> Sinusoid {
    // mean of amp*sin(w t + phi) over [0, T]
    let mean = if omega.abs() > 1e-12 {
        amp * (phase.cos() - (omega * horizon + phase).cos()) / (omega * horizon)
    } else {
        amp * phase.sin()
    };
    Sinusoid {
        amp,
        omega,
        phase,
        mean,
    }
}

/// Calibration from mean wind to the constant trim acceleration: quadratic
/// in speed, pointing downwind, with a small downdraft component.
pub fn wind_to_dbar(speed: f64, from_deg: f64) -> [f64; 3] {
    let mag = 0.0125 * speed * speed;
    let toward = (from_deg + 180.0).to_radians();
    [mag * toward.cos(), mag * toward.sin(), -0.0023 * speed * speed]
}

// ---------------------------------------------------------------------------
// Scenario
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ManeuverTag {
    A,
    B,
    C,
}

fn default_amp_frac() -> f64 {
    0.45
}
fn default_noise_frac() -> f64 {
    0.1
}
fn default_att_err_deg() -> f64 {
    0.2
}

/// One landing scenario in deck-relative coordinates (z up, x along the ship
/// heading).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManeuverScenario {
    pub tag: ManeuverTag,
    /// Initial position relative to the deck, m.
    pub start_pos: [f64; 3],
    /// Initial velocity relative to the deck, m/s.
    #[serde(default)]
    pub start_vel: [f64; 3],
    pub ship_speed: f64,
    #[serde(default)]
    pub ship_heading_deg: f64,
    pub wind_speed: f64,
    pub wind_dir_deg: f64,
    pub n0: usize,
    pub n_td: usize,
    pub tau: f64,
    #[serde(default)]
    pub seed: u64,
    /// Half-widths of the residual (time-varying) disturbance set, m/s^2.
    pub dv_box: [f64; 3],
    /// Overrides the wind-derived constant disturbance when set.
    #[serde(default)]
    pub d_bar_override: Option<[f64; 3]>,
    /// Error added to the constant-disturbance estimate handed to the
    /// planner, to probe robustness against a degraded estimate.
    #[serde(default)]
    pub dbar_est_error: [f64; 3],
    #[serde(default = "default_amp_frac")]
    pub amplitude_frac: f64,
    #[serde(default = "default_noise_frac")]
    pub noise_frac: f64,
    /// Amplitude of the injected inner-loop attitude tracking error, deg.
    #[serde(default = "default_att_err_deg")]
    pub att_err_deg: f64,
}

impl ManeuverScenario {
    /// Reference scenarios: straight-in, oblique, and lateral approaches.
    pub fn preset(tag: ManeuverTag) -> Self {
        let start_pos = match tag {
            ManeuverTag::A => [-30.0, 0.0, 30.0],
            ManeuverTag::B => [-15.0, -10.0, 25.0],
            ManeuverTag::C => [0.0, -15.0, 20.0],
        };
        Self {
            tag,
            start_pos,
            start_vel: [0.0; 3],
            ship_speed: 5.0,
            ship_heading_deg: 0.0,
            wind_speed: 8.0,
            wind_dir_deg: 30.0,
            n0: 495,
            n_td: 50,
            tau: 0.02,
            seed: 1,
            dv_box: [0.06, 0.05, 0.15],
            d_bar_override: None,
            dbar_est_error: [0.0; 3],
            amplitude_frac: default_amp_frac(),
            noise_frac: default_noise_frac(),
            att_err_deg: default_att_err_deg(),
        }
    }

    pub fn d_bar(&self) -> [f64; 3] {
        self.d_bar_override
            .unwrap_or_else(|| wind_to_dbar(self.wind_speed, self.wind_dir_deg))
    }

    pub fn ship_velocity(&self) -> Vector3<f64> {
        let h = self.ship_heading_deg.to_radians();
        Vector3::new(self.ship_speed * h.cos(), self.ship_speed * h.sin(), 0.0)
    }
}

/// Deck position and velocity at time `t` (deck starts at the origin).
pub fn ship_state(t: f64, scenario: &ManeuverScenario) -> (Vector3<f64>, Vector3<f64>) {
    let v = scenario.ship_velocity();
    (v * t, v)
}

// ---------------------------------------------------------------------------
// Operating envelope
// ---------------------------------------------------------------------------

/// Box and shaped limits of the stage constraint set over `[u; x]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnvelopeParams {
    pub u_horiz: f64,
    pub u_vert: f64,
    pub p_horiz: f64,
    pub p_z_max: f64,
    pub v_horiz: f64,
    pub v_z: f64,
    pub a_r: f64,
    pub j_r: f64,
    pub d_bar: f64,
    /// Descent-rate limit: descent <= b_vrs + gamma_vrs * forward airspeed.
    pub gamma_vrs: f64,
    pub b_vrs: f64,
    /// Deck-relative forward airspeed at hover over the deck (ship speed
    /// into still air); shifts the descent-rate limit.
    pub vrs_airspeed_bias: f64,
    /// Near-ground attitude-acceleration limit: |a_r| <= b_acc + gamma_acc*h.
    pub gamma_acc: f64,
    pub b_acc: f64,
    /// Height below which the shaped rows are active.
    pub activation_height: f64,
}

impl Default for EnvelopeParams {
    fn default() -> Self {
        Self {
            u_horiz: 4.0,
            u_vert: 3.5,
            p_horiz: 45.0,
            p_z_max: 40.0,
            v_horiz: 8.0,
            // above the natural peak descent rate of a minimum-effort
            // profile (1.5x the mean rate for the steepest preset)
            v_z: 5.5,
            a_r: 5.0,
            j_r: 12.0,
            d_bar: 2.0,
            gamma_vrs: 4.0,
            b_vrs: 1.5,
            vrs_airspeed_bias: 5.0,
            gamma_acc: 0.6,
            b_acc: 3.5,
            activation_height: 5.0,
        }
    }
}

/// Build the raw stage set over `[u; x]` and the indices of the shaped rows
/// (descent-rate and near-ground acceleration limits, activated near deck).
pub fn build_envelope(params: &EnvelopeParams) -> Result<(HPolytope, Vec<usize>), SetError> {
    let dim = NUM_INPUTS + NUM_STATES;
    let x0 = NUM_INPUTS; // column offset of the state block
    let mut lower = DVector::zeros(dim);
    let mut upper = DVector::zeros(dim);
    for j in 0..2 {
        lower[j] = -params.u_horiz;
        upper[j] = params.u_horiz;
    }
    lower[2] = -params.u_vert;
    upper[2] = params.u_vert;
    for (idx, lo, hi) in [
        (P_X, -params.p_horiz, params.p_horiz),
        (P_Y, -params.p_horiz, params.p_horiz),
        (P_Z, 0.0, params.p_z_max),
        (V_X, -params.v_horiz, params.v_horiz),
        (V_Y, -params.v_horiz, params.v_horiz),
        (V_Z, -params.v_z, params.v_z),
        (AR_X, -params.a_r, params.a_r),
        (AR_Y, -params.a_r, params.a_r),
        (JR_X, -params.j_r, params.j_r),
        (JR_Y, -params.j_r, params.j_r),
        (DBAR_IDX[0], -params.d_bar, params.d_bar),
        (DBAR_IDX[1], -params.d_bar, params.d_bar),
        (DBAR_IDX[2], -params.d_bar, params.d_bar),
    ] {
        lower[x0 + idx] = lo;
        upper[x0 + idx] = hi;
    }
    let num_box = 2 * dim;
    let num_shaped = 5;
    let mut normals = DMatrix::zeros(num_box + num_shaped, dim);
    let mut offsets = DVector::zeros(num_box + num_shaped);
    for j in 0..dim {
        normals[(2 * j, j)] = 1.0;
        offsets[2 * j] = upper[j];
        normals[(2 * j + 1, j)] = -1.0;
        offsets[2 * j + 1] = -lower[j];
    }
    // descent rate: -v_z - gamma*(v_x + bias) <= b  (z up: descent = -v_z)
    let r = num_box;
    normals[(r, x0 + V_Z)] = -1.0;
    normals[(r, x0 + V_X)] = -params.gamma_vrs;
    offsets[r] = params.b_vrs + params.gamma_vrs * params.vrs_airspeed_bias;
    // near-ground acceleration: +-a_r - gamma*h <= b
    for (off, idx) in [(1, AR_X), (3, AR_Y)] {
        normals[(r + off, x0 + idx)] = 1.0;
        normals[(r + off, x0 + P_Z)] = -params.gamma_acc;
        offsets[r + off] = params.b_acc;
        normals[(r + off + 1, x0 + idx)] = -1.0;
        normals[(r + off + 1, x0 + P_Z)] = -params.gamma_acc;
        offsets[r + off + 1] = params.b_acc;
    }
    let dense = (num_box..num_box + num_shaped).collect();
    Ok((HPolytope::new(normals, offsets)?, dense))
}

// ---------------------------------------------------------------------------
// Offline pipeline
// ---------------------------------------------------------------------------

/// Controller/observer/weight configuration shared by all scenarios.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LandingConfig {
    pub model: PlanningModelParams,
    pub envelope: EnvelopeParams,
    pub observer_pole: f64,
    pub mrpi_eps: f64,
    pub reduction: usize,
    pub nbar: usize,
    pub stage_pos_weight: f64,
    pub input_weight: f64,
    pub terminal_pos_vel_weight: f64,
    pub p0_weight: f64,
    /// Inflation applied to the disturbance box when computing the error
    /// tube.  The tube must bound every source of plant/model mismatch —
    /// attitude measurement error and linearisation residue as well as the
    /// external disturbance — so the box fed to the tube computation is
    /// slightly larger than the box the generator and estimator use.
    pub tube_margin: f64,
}

impl Default for LandingConfig {
    fn default() -> Self {
        Self {
            model: PlanningModelParams::default(),
            envelope: EnvelopeParams::default(),
            observer_pole: 0.8,
            mrpi_eps: 1e-2,
            reduction: 15,
            nbar: 17,
            stage_pos_weight: 0.02,
            input_weight: 0.5,
            terminal_pos_vel_weight: 1000.0,
            p0_weight: 100.0,
            tube_margin: 1.05,
        }
    }
}

/// Expensive offline artifacts: error tubes, touchdown stage, terminal set,
/// and the tightened stage set.  Reusable across runs of the same scenario
/// geometry (and serializable for on-disk caching).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrecomputedSets {
    pub state_tube: Zonotope,
    pub input_tube: Zonotope,
    pub touchdown: TouchdownConfig,
    pub terminal_set: HPolytope,
    pub f_raw: HPolytope,
    pub f_bar: HPolytope,
    pub dense_rows: Vec<usize>,
    /// Height below which the shaped rows apply.
    pub activation_height: f64,
}

/// Run the offline pipeline for one scenario geometry.
pub fn precompute_sets(
    cfg: &LandingConfig,
    scenario: &ManeuverScenario,
) -> Result<PrecomputedSets, SimError> {
    let mut model = cfg.model.clone();
    model.sample_time = scenario.tau;
    let sys = build_discrete_model(&model)?;
    let gains = AncillaryGains::experiment_defaults();
    let obs = ObserverState::with_velocity_pole(&sys, cfg.observer_pole)?;
    let dv = DVector::from_row_slice(&scenario.dv_box) * cfg.tube_margin;
    let tube = compute_error_tube(&sys, &gains, &obs, &dv, cfg.mrpi_eps)?;
    let state_tube = project_tube_to_state(&tube)?;
    let input_tube = project_tube_to_input(&tube, &gains, &dv)?;
    let touchdown = default_touchdown_config(&sys, &state_tube)?;
    if !validate_start_set(&touchdown, &state_tube, &below_deck_halfspace())? {
        return Err(SimError::InfeasibleStart(
            "landed set inflated by the tube leaves the touchdown envelope".into(),
        ));
    }
    let terminal_set = compute_terminal_set(&touchdown, &sys, &state_tube, &above_deck_halfspace())?;
    if terminal_set.is_empty()? {
        return Err(SimError::InfeasibleStart("terminal set is empty".into()));
    }
    let mut env = cfg.envelope.clone();
    env.vrs_airspeed_bias = scenario.ship_speed;
    let (f_raw, dense_rows) = build_envelope(&env)?;
    let product = cartesian_product(&input_tube, &state_tube)
        .map_err(|e| SimError::InfeasibleStart(format!("{e}")))?;
    let f_bar = f_raw.erode(&product)?;
    if f_bar.is_empty()? {
        return Err(SimError::InfeasibleStart(
            "tightened stage set is empty".into(),
        ));
    }
    Ok(PrecomputedSets {
        state_tube,
        input_tube,
        touchdown,
        terminal_set,
        f_raw,
        f_bar,
        dense_rows,
        activation_height: cfg.envelope.activation_height,
    })
}

/// Assemble the planner configuration for one scenario.
pub fn build_shmpc_config(
    cfg: &LandingConfig,
    scenario: &ManeuverScenario,
    sets: &PrecomputedSets,
    d_bar_est: &[f64; 3],
) -> Result<ShmpcConfig, SimError> {
    let n = NUM_STATES;
    let m = NUM_INPUTS;
    let mut h = DMatrix::zeros(n + m, n + m);
    for idx in [P_X, P_Y, P_Z] {
        h[(idx, idx)] = cfg.stage_pos_weight;
    }
    for j in 0..m {
        h[(n + j, n + j)] = cfg.input_weight;
    }
    let mut p = DMatrix::identity(n, n);
    for idx in [P_X, P_Y, P_Z, V_X, V_Y, V_Z] {
        p[(idx, idx)] = cfg.terminal_pos_vel_weight;
    }
    for idx in [AR_X, AR_Y] {
        p[(idx, idx)] = 10.0;
    }
    let target = sets
        .terminal_set
        .feasible_point()?
        .ok_or_else(|| SimError::InfeasibleStart("terminal set is empty".into()))?;
    let mut ref_start = DVector::zeros(n);
    for i in 0..3 {
        ref_start[[P_X, P_Y, P_Z][i]] = scenario.start_pos[i];
        ref_start[[V_X, V_Y, V_Z][i]] = scenario.start_vel[i];
        ref_start[DBAR_IDX[i]] = d_bar_est[i];
    }
    let mut ref_end = target;
    for i in 0..3 {
        ref_end[DBAR_IDX[i]] = d_bar_est[i];
    }
    Ok(ShmpcConfig {
        n0: scenario.n0,
        nbar: cfg.nbar,
        h,
        p,
        p0: DMatrix::identity(n, n) * cfg.p0_weight,
        f_bar: sets.f_bar.clone(),
        xt_bar: sets.terminal_set.clone(),
        tube: sets.state_tube.clone(),
        ref_start,
        ref_end,
        init_error_directions: coupled_pair_directions(),
        dbar_idx: DBAR_IDX.to_vec(),
        dense_rows: sets.dense_rows.clone(),
        dense_height: Some((P_Z, cfg.envelope.activation_height)),
        reduction: cfg.reduction,
    })
}

/// Support directions tightening the initial-error membership constraint
/// beyond the axis-aligned box: 16 evenly spaced directions in the plane of
/// every coupled state pair within each axis block.  The four axis-aligned
/// members of each fan are already present as box rows and are skipped to
/// keep the constraint set nondegenerate.  Without these rows the planner may
/// re-centre the nominal into a corner of the outer box that lies outside the
/// invariant error set, and the open-loop touchdown stage can then drift past
/// the box. See `build_qp`'s initial-error rows for how they are applied.
fn coupled_pair_directions() -> Vec<DVector<f64>> {
    let blocks: [&[usize]; 3] = [&[P_X, V_X, AR_X], &[P_Y, V_Y, AR_Y], &[P_Z, V_Z]];
    let mut dirs = Vec::new();
    for block in blocks {
        for a in 0..block.len() {
            for b in (a + 1)..block.len() {
                for k in 0..16 {
                    if k % 4 == 0 {
                        continue;
                    }
                    let ang = f64::from(k) * PI / 8.0;
                    let mut d = DVector::zeros(NUM_STATES);
                    d[block[a]] = ang.cos();
                    d[block[b]] = ang.sin();
                    dirs.push(d);
                }
            }
        }
    }
    dirs
}

// ---------------------------------------------------------------------------
// Logging and reporting
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Mpc,
    Touchdown,
}

/// One control step of a landing run (deck-relative quantities).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub t: f64,
    pub phase: Phase,
    /// Measured deck-relative planner state.
    pub x: Vec<f64>,
    /// Nominal planner state.
    pub z: Vec<f64>,
    /// Applied input (commanded acceleration).
    pub u: [f64; 3],
    /// Nominal input.
    pub v: [f64; 3],
    /// True total disturbance on the velocity channels.
    pub d: [f64; 3],
    /// Clamped residual-disturbance estimate used by the ancillary law.
    pub d_hat_v: [f64; 3],
    /// True attitude, rad.
    pub roll: f64,
    pub pitch: f64,
    pub solve_ms: f64,
    pub qp_iters: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryLog {
    pub steps: Vec<StepLog>,
    pub n0: usize,
    pub tau: f64,
}

impl TrajectoryLog {
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<(), SimError> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header: Vec<String> = vec!["step".into(), "t".into(), "phase".into()];
        for i in 0..NUM_STATES {
            header.push(format!("x{i}"));
        }
        for i in 0..NUM_STATES {
            header.push(format!("z{i}"));
        }
        for (name, len) in [("u", 3), ("v", 3), ("d", 3), ("dhat_v", 3)] {
            for i in 0..len {
                header.push(format!("{name}{i}"));
            }
        }
        // solve_ms is deliberately not part of the CSV: wall-clock timing
        // would break byte-identical reproducibility of logged runs
        header.extend(["roll", "pitch", "qp_iters"].iter().map(|s| s.to_string()));
        wtr.write_record(&header)?;
        for s in &self.steps {
            let mut rec: Vec<String> = vec![
                s.step.to_string(),
                format!("{:.6}", s.t),
                match s.phase {
                    Phase::Mpc => "mpc".into(),
                    Phase::Touchdown => "touchdown".into(),
                },
            ];
            for v in s.x.iter().chain(s.z.iter()) {
                rec.push(format!("{v:.9}"));
            }
            for arr in [&s.u, &s.v, &s.d, &s.d_hat_v] {
                for v in arr {
                    rec.push(format!("{v:.9}"));
                }
            }
            rec.push(format!("{:.9}", s.roll));
            rec.push(format!("{:.9}", s.pitch));
            rec.push(s.qp_iters.to_string());
            wtr.write_record(&rec)?;
        }
        wtr.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Pass/fail bounds on the touchdown metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TouchdownBounds {
    pub roll_deg: f64,
    pub pitch_deg: f64,
    pub p_h: f64,
    pub v_h: f64,
    pub v_z: f64,
}

impl Default for TouchdownBounds {
    fn default() -> Self {
        Self {
            roll_deg: 4.0,
            pitch_deg: 6.0,
            p_h: 0.60,
            v_h: 0.60,
            v_z: 1.15,
        }
    }
}

/// Ship-relative metrics at the touchdown instant.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TouchdownReport {
    pub delta_roll_deg: f64,
    pub delta_pitch_deg: f64,
    pub delta_p_h: f64,
    pub delta_v_h: f64,
    pub delta_v_z: f64,
    pub t_maneuver: f64,
    pub touchdown_step: usize,
    pub success: bool,
}

/// Scan a log for the first deck crossing and interpolate the metrics inside
/// the step for sub-sample accuracy.
pub fn compute_report(
    log: &TrajectoryLog,
    bounds: &TouchdownBounds,
) -> Result<TouchdownReport, SimError> {
    for w in log.steps.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        let h0 = a.x[P_Z];
        let h1 = b.x[P_Z];
        if h0 > 0.0 && h1 <= 0.0 {
            let frac = h0 / (h0 - h1);
            let lerp = |p: f64, q: f64| p + frac * (q - p);
            let vx = lerp(a.x[V_X], b.x[V_X]);
            let vy = lerp(a.x[V_Y], b.x[V_Y]);
            let vz = lerp(a.x[V_Z], b.x[V_Z]);
            let px = lerp(a.x[P_X], b.x[P_X]);
            let py = lerp(a.x[P_Y], b.x[P_Y]);
            let roll = lerp(a.roll, b.roll);
            let pitch = lerp(a.pitch, b.pitch);
            let report = TouchdownReport {
                delta_roll_deg: roll.to_degrees().abs(),
                delta_pitch_deg: pitch.to_degrees().abs(),
                delta_p_h: px.hypot(py),
                delta_v_h: vx.hypot(vy),
                delta_v_z: vz.abs(),
                t_maneuver: lerp(a.t, b.t),
                touchdown_step: b.step,
                success: false,
            };
            let success = report.delta_roll_deg <= bounds.roll_deg
                && report.delta_pitch_deg <= bounds.pitch_deg
                && report.delta_p_h <= bounds.p_h
                && report.delta_v_h <= bounds.v_h
                && report.delta_v_z <= bounds.v_z;
            return Ok(TouchdownReport { success, ..report });
        }
    }
    Err(SimError::NoTouchdownInLog)
}

// ---------------------------------------------------------------------------
// Closed-loop run
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LandingOutcome {
    pub log: TrajectoryLog,
    pub report: TouchdownReport,
}

/// Injected inner-loop attitude tracking error: a bounded seeded two-tone
/// signal per axis.
struct AttitudeErrorProcess {
    tones: [[(f64, f64, f64); 2]; 2],
}

impl AttitudeErrorProcess {
    fn new(amplitude_rad: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_a77e);
        let mut tones = [[(0.0, 0.0, 0.0); 2]; 2];
        for axis in tones.iter_mut() {
            for (i, tone) in axis.iter_mut().enumerate() {
                let amp = amplitude_rad * if i == 0 { 0.7 } else { 0.3 };
                let omega = 2.0 * PI * rng.gen_range(0.3..1.5);
                let phase = rng.gen_range(0.0..2.0 * PI);
                *tone = (amp, omega, phase);
            }
        }
        Self { tones }
    }

    /// `(pitch error, roll error)` at time `t`, rad.
    fn at(&self, t: f64) -> [f64; 2] {
        let mut e = [0.0; 2];
        for (axis, tones) in self.tones.iter().enumerate() {
            e[axis] = tones
                .iter()
                .map(|(a, w, p)| a * (w * t + p).sin())
                .sum();
        }
        e
    }
}

/// Measured planner state from the plant, deck, and disturbance estimate.
fn measure_state(
    plant: &PlantState,
    deck_p: &Vector3<f64>,
    deck_v: &Vector3<f64>,
    d_bar_est: &[f64; 3],
    g: f64,
) -> DVector<f64> {
    let rel_p = plant.p - deck_p;
    let rel_v = plant.v - deck_v;
    let (a_r, j_r) = attitude_outputs(plant, g);
    let mut x = DVector::zeros(NUM_STATES);
    x[P_X] = rel_p.x;
    x[P_Y] = rel_p.y;
    x[P_Z] = rel_p.z;
    x[V_X] = rel_v.x;
    x[V_Y] = rel_v.y;
    x[V_Z] = rel_v.z;
    x[AR_X] = a_r[0];
    x[AR_Y] = a_r[1];
    x[JR_X] = j_r[0];
    x[JR_Y] = j_r[1];
    for i in 0..3 {
        x[DBAR_IDX[i]] = d_bar_est[i];
    }
    x
}

/// Execute one full landing: the shrinking-horizon phase for `n0` steps, then
/// the touchdown stage until deck contact.
pub fn run_landing(
    scenario: &ManeuverScenario,
    cfg: &LandingConfig,
    sets: &PrecomputedSets,
) -> Result<LandingOutcome, SimError> {
    let mut model = cfg.model.clone();
    model.sample_time = scenario.tau;
    let sys = build_discrete_model(&model)?;
    let g = model.gravity;
    let tau = scenario.tau;
    let gains = AncillaryGains::experiment_defaults();
    let mut obs = ObserverState::with_velocity_pole(&sys, cfg.observer_pole)?;

    let d_bar_true = scenario.d_bar();
    let ship_v_const = scenario.ship_velocity();
    let mut d_bar_est = [0.0; 3];
    for i in 0..3 {
        // the planner works deck-relative, so drag on the constant ship
        // velocity appears as an extra trim offset in its coordinates
        d_bar_est[i] =
            d_bar_true[i] - model.drag[i] * ship_v_const[i] + scenario.dbar_est_error[i];
    }
    let total_time = (scenario.n0 + scenario.n_td) as f64 * tau;
    let dist = DisturbanceGenerator::new(&DisturbanceConfig {
        d_bar: d_bar_true,
        dv_box: scenario.dv_box,
        amplitude_frac: scenario.amplitude_frac,
        noise_frac: scenario.noise_frac,
        seed: scenario.seed,
        detrend_duration: total_time,
    });
    let att_err = AttitudeErrorProcess::new(scenario.att_err_deg.to_radians(), scenario.seed);

    let shmpc_cfg = build_shmpc_config(cfg, scenario, sets, &d_bar_est)?;
    let mut ctrl = ShmpcController::new(shmpc_cfg, sys.clone())
        .map_err(|e| SimError::InfeasibleStart(format!("{e}")))?;
    let d_bar_est_vec = DVector::from_row_slice(&d_bar_est);
    let dv_radii = DVector::from_row_slice(&scenario.dv_box);

    // plant starts relative-at-rest unless the scenario says otherwise
    let ship_v = scenario.ship_velocity();
    let mut plant = PlantState::at_rest(
        Vector3::from_row_slice(&scenario.start_pos),
        ship_v + Vector3::from_row_slice(&scenario.start_vel),
    );
    let mut d_hat = DVector::zeros(3);
    let mut log = TrajectoryLog {
        steps: Vec::with_capacity(scenario.n0 + scenario.n_td),
        n0: scenario.n0,
        tau,
    };

    let mut z_td: Option<DVector<f64>> = None;
    for step in 0..scenario.n0 + scenario.n_td + 1 {
        let t = step as f64 * tau;
        let (deck_p, deck_v) = ship_state(t, scenario);
        let x = measure_state(&plant, &deck_p, &deck_v, &d_bar_est, g);
        let in_mpc_phase = step < scenario.n0;
        if x[P_Z] <= 0.0 {
            if in_mpc_phase {
                return Err(SimError::PrematureContact { step });
            }
            // contact reached: the crossing is in the log already
            break;
        }
        if step == scenario.n0 + scenario.n_td {
            return Err(SimError::NoTouchdown);
        }
        if step % 50 == 0 {
            log::debug!(
                "k={step} p=({:.2},{:.2},{:.2}) v=({:.2},{:.2},{:.2})",
                x[P_X],
                x[P_Y],
                x[P_Z],
                x[V_X],
                x[V_Y],
                x[V_Z]
            );
        }
        // the constant offset lives in the dbar state slots, so the observer
        // output is already the residual (time-varying) part
        let d_hat_v = clamp_estimate(&d_hat, &dv_radii);
        let (z, v, solve_ms, qp_iters, phase) = if in_mpc_phase {
            let sol = ctrl.step(&x, &d_bar_est_vec).map_err(|e| {
                if step == 0 {
                    SimError::InfeasibleStart(format!("{e}"))
                } else {
                    SimError::Controller {
                        step,
                        source: e,
                    }
                }
            })?;
            if step == scenario.n0 - 1 {
                z_td = Some(sol.predicted[1].clone());
            }
            (
                sol.z0.clone(),
                sol.v0.clone(),
                sol.stats.solve_time_s * 1e3,
                sol.stats.qp_iterations,
                Phase::Mpc,
            )
        } else {
            let z = z_td.take().expect("touchdown nominal state missing");
            let (z_next, v) = touchdown_step(&z, &sets.touchdown, &sys);
            z_td = Some(z_next);
            (z, v, 0.0, 0, Phase::Touchdown)
        };
        let u = ancillary_control(&v, &x, &z, &d_hat_v, &gains);
        let u_vec = Vector3::new(u[0], u[1], u[2]);
        let cmd = inverse_transform(&plan_to_ned(&u_vec), g)?;
        let d_true = dist.total(t);
        let e_att = att_err.at(t);
        log.steps.push(StepLog {
            step,
            t,
            phase,
            x: x.iter().copied().collect(),
            z: z.iter().copied().collect(),
            u: [u[0], u[1], u[2]],
            v: [v[0], v[1], v[2]],
            d: [d_true.x, d_true.y, d_true.z],
            d_hat_v: [d_hat_v[0], d_hat_v[1], d_hat_v[2]],
            roll: plant.roll,
            pitch: plant.pitch,
            solve_ms,
            qp_iters,
        });
        plant = plant_step(&plant, &cmd, &e_att, &d_true, tau, &model)?;
        let (obs_next, d_hat_next) = observer_step(&obs, &x, &u, &sys);
        obs = obs_next;
        d_hat = d_hat_next;
    }
    // append the final (crossing) sample so the report can interpolate
    {
        let step = log.steps.last().map(|s| s.step + 1).unwrap_or(0);
        let t = step as f64 * tau;
        let (deck_p, deck_v) = ship_state(t, scenario);
        let x = measure_state(&plant, &deck_p, &deck_v, &d_bar_est, g);
        let prev = log.steps.last().ok_or(SimError::NoTouchdown)?.clone();
        log.steps.push(StepLog {
            step,
            t,
            phase: Phase::Touchdown,
            x: x.iter().copied().collect(),
            z: prev.z.clone(),
            u: prev.u,
            v: prev.v,
            d: prev.d,
            d_hat_v: prev.d_hat_v,
            roll: plant.roll,
            pitch: plant.pitch,
            solve_ms: 0.0,
            qp_iters: 0,
        });
    }
    let report = compute_report(&log, &TouchdownBounds::default())?;
    Ok(LandingOutcome { log, report })
}

/// Post-hoc audit of a completed run against the closed-loop guarantees:
/// tube containment during the optimized phase, raw envelope satisfaction of
/// the applied input and measured state, no premature contact, and touchdown
/// inside the allotted window.  Returns human-readable violation messages.
pub fn check_run_invariants(
    out: &LandingOutcome,
    sets: &PrecomputedSets,
    scenario: &ManeuverScenario,
) -> Vec<String> {
    const MAX_MESSAGES: usize = 25;
    let mut violations = Vec::new();
    let radii = sets.state_tube.interval_radii();
    let dim = NUM_INPUTS + NUM_STATES;
    for s in &out.log.steps {
        if violations.len() >= MAX_MESSAGES {
            violations.push("... further violations suppressed".into());
            break;
        }
        if s.step >= out.report.touchdown_step {
            break;
        }
        if s.phase == Phase::Mpc {
            for idx in 0..NUM_STATES {
                let e = (s.x[idx] - s.z[idx]).abs();
                if e > radii[idx] + 1e-6 {
                    violations.push(format!(
                        "step {}: tracking error {e:.3e} at state {idx} outside tube \
                         radius {:.3e}",
                        s.step, radii[idx]
                    ));
                }
            }
            if s.x[P_Z] <= 0.0 {
                violations.push(format!("step {}: premature ground contact", s.step));
            }
        }
        let mut ux = DVector::zeros(dim);
        for j in 0..NUM_INPUTS {
            ux[j] = s.u[j];
        }
        for idx in 0..NUM_STATES {
            ux[NUM_INPUTS + idx] = s.x[idx];
        }
        for r in 0..sets.f_raw.num_rows() {
            if sets.dense_rows.contains(&r) && s.x[P_Z] >= sets.activation_height {
                continue;
            }
            let lhs = sets.f_raw.normals().row(r).transpose().dot(&ux);
            let rhs = sets.f_raw.offsets()[r];
            if lhs > rhs + 1e-6 {
                violations.push(format!(
                    "step {}: envelope row {r} violated ({lhs:.4} > {rhs:.4})",
                    s.step
                ));
            }
        }
    }
    let td = out.report.touchdown_step;
    if td < scenario.n0 || td > scenario.n0 + scenario.n_td {
        violations.push(format!(
            "touchdown at step {td} outside the window [{}, {}]",
            scenario.n0,
            scenario.n0 + scenario.n_td
        ));
    }
    violations
}
