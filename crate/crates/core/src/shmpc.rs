//! Shrinking-horizon model-predictive controller with move blocking.
//!
//! Each control step solves a condensed quadratic program over the initial
//! nominal state `z0` and a blocked input sequence `Vbar`.  The prediction
//! horizon shrinks by one every step while the block boundaries stay fixed in
//! absolute maneuver time, so the shifted previous solution remains
//! representable and feasibility carries over from step to step.  Stage and
//! terminal constraints are tightened offline by the closed-loop error tube;
//! online, a reduced subset of stage rows is imposed up front and the full
//! resolution is restored lazily by re-solving with any violated rows added.

use crate::model::DiscreteLinearSystem;
use crate::qp::{solve_qp, QpError, QpStatus};
use crate::sets::{HPolytope, SetError, Zonotope};
use nalgebra::{DMatrix, DVector};
use std::ops::AddAssign;
use thiserror::Error;

/// Tolerance used by the lazy full-resolution constraint check.
pub const LAZY_CHECK_TOL: f64 = 1e-7;
/// Maximum number of lazy re-solve rounds before a step is declared failed.
pub const MAX_LAZY_ROUNDS: usize = 8;
/// Half-width of the interval that pins the disturbance components of `z0`
/// to the supplied estimate (equality imposed as a tight two-sided bound).
pub const DBAR_PIN_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum ShmpcError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid controller configuration: {0}")]
    InvalidConfig(String),
    #[error("maneuver already complete (step {step} >= horizon {n0})")]
    HorizonExhausted { step: usize, n0: usize },
    #[error("QP infeasible at step {step}; conflicting constraints: {rows:?}")]
    Infeasible { step: usize, rows: Vec<String> },
    #[error("lazy constraint rounds exhausted at step {step}")]
    LazyRoundsExhausted { step: usize },
    #[error("QP solver failure: {0}")]
    Solver(#[from] QpError),
    #[error("set computation failure: {0}")]
    Set(#[from] SetError),
}

// ---------------------------------------------------------------------------
// Move blocking
// ---------------------------------------------------------------------------

/// Partition of the current horizon into input blocks.  Block boundaries are
/// fixed in absolute maneuver time: shrinking removes one step from the first
/// block and drops it entirely once it is empty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockSchedule {
    blocks: Vec<usize>,
}

impl BlockSchedule {
    /// Initial schedule for a horizon of `n` steps and at most `nbar` blocks.
    ///
    /// The tail blocks taper dyadically (1, 2, 4, ...) so that input
    /// resolution is finest near the end of the maneuver; the remaining steps
    /// are split as evenly as possible over the head blocks.  The taper stops
    /// growing once the next dyadic length would exceed the even share of the
    /// remaining head blocks.
    pub fn new(n: usize, nbar: usize) -> Result<Self, ShmpcError> {
        if n == 0 || nbar == 0 {
            return Err(ShmpcError::InvalidConfig(
                "horizon and block count must be positive".into(),
            ));
        }
        let nb = nbar.min(n);
        if nb == n {
            return Ok(Self {
                blocks: vec![1; n],
            });
        }
        let mut tail: Vec<usize> = Vec::new();
        let mut used = 0usize;
        let mut next = 1usize;
        while tail.len() + 1 < nb {
            let head_blocks = nb - tail.len() - 1;
            let remaining = n - used - next;
            if remaining < head_blocks {
                break;
            }
            // Stop growing the taper once it would out-size the head blocks.
            let share = (n - used) as f64 / (head_blocks + 1) as f64;
            if next as f64 > share {
                break;
            }
            tail.push(next);
            used += next;
            next *= 2;
        }
        let head_blocks = nb - tail.len();
        let remaining = n - used;
        let base = remaining / head_blocks;
        let extra = remaining % head_blocks;
        let mut blocks = Vec::with_capacity(nb);
        for i in 0..head_blocks {
            blocks.push(base + usize::from(i < extra));
        }
        tail.reverse();
        blocks.extend(tail);
        debug_assert_eq!(blocks.iter().sum::<usize>(), n);
        Ok(Self { blocks })
    }

    /// Schedule after `k` one-step shrinks of the initial `(n0, nbar)` plan.
    pub fn at_step(n0: usize, nbar: usize, k: usize) -> Result<Self, ShmpcError> {
        if k >= n0 {
            return Err(ShmpcError::HorizonExhausted { step: k, n0 });
        }
        let mut s = Self::new(n0, nbar)?;
        for _ in 0..k {
            s.shrink();
        }
        Ok(s)
    }

    /// Remove one step from the front (the elapsed control step).
    pub fn shrink(&mut self) {
        if let Some(first) = self.blocks.first_mut() {
            *first -= 1;
            if *first == 0 {
                self.blocks.remove(0);
            }
        }
    }

    pub fn horizon(&self) -> usize {
        self.blocks.iter().sum()
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn blocks(&self) -> &[usize] {
        &self.blocks
    }

    /// Index of the block that step `i` of the current horizon belongs to.
    pub fn block_of(&self, i: usize) -> usize {
        let mut acc = 0;
        for (j, len) in self.blocks.iter().enumerate() {
            acc += len;
            if i < acc {
                return j;
            }
        }
        self.blocks.len().saturating_sub(1)
    }

    /// Steps of the current horizon at which a new block begins.
    pub fn block_starts(&self) -> Vec<usize> {
        let mut starts = Vec::with_capacity(self.blocks.len());
        let mut acc = 0;
        for len in &self.blocks {
            starts.push(acc);
            acc += len;
        }
        starts
    }

    /// Dense 0/1 blocking matrix (horizon x num_blocks), one 1 per row.
    pub fn matrix(&self) -> DMatrix<f64> {
        let n = self.horizon();
        let nb = self.num_blocks();
        let mut m = DMatrix::zeros(n, nb);
        for i in 0..n {
            m[(i, self.block_of(i))] = 1.0;
        }
        m
    }
}

/// Blocking matrix for a horizon of `n_k` steps with at most `nbar` blocks.
pub fn blocking_matrix(n_k: usize, nbar: usize) -> Result<DMatrix<f64>, ShmpcError> {
    Ok(BlockSchedule::new(n_k, nbar)?.matrix())
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Controller configuration for one maneuver.
///
/// Conventions: the stage cost matrix `h` acts on the stacked vector
/// `[z_i; v_i]` (state first), while the tightened stage set `f_bar` is an
/// H-polytope over `[v_i; z_i]` (input first) to match the input/state
/// ordering used when tightening the raw operating envelope.
#[derive(Debug, Clone)]
pub struct ShmpcConfig {
    /// Total maneuver length in control steps.
    pub n0: usize,
    /// Maximum number of blocked inputs.
    pub nbar: usize,
    /// Stage cost over `[z; v]`, positive semi-definite.
    pub h: DMatrix<f64>,
    /// Terminal cost over `z`, positive definite.
    pub p: DMatrix<f64>,
    /// Initial-error cost over `x - z0`, positive definite.
    pub p0: DMatrix<f64>,
    /// Tightened stage constraint set over `[v; z]`.
    pub f_bar: HPolytope,
    /// Tightened terminal constraint set over `z`.
    pub xt_bar: HPolytope,
    /// Closed-loop error tube in state space; constrains `x_k - z0`.
    pub tube: Zonotope,
    /// Straight-line reference: full state at maneuver start ...
    pub ref_start: DVector<f64>,
    /// ... and at maneuver end (also the terminal cost reference).
    pub ref_end: DVector<f64>,
    /// Extra support directions for the initial-error membership test, in
    /// addition to the axis-aligned outer box of the tube.
    pub init_error_directions: Vec<DVector<f64>>,
    /// State indices carrying the constant-disturbance estimate; the matching
    /// components of `z0` are pinned to the supplied estimate.
    pub dbar_idx: Vec<usize>,
    /// Rows of `f_bar` that are only relevant close to the deck; they are
    /// imposed (and lazily checked) when the predicted height is below the
    /// threshold given in `dense_height`.
    pub dense_rows: Vec<usize>,
    /// `(height state index, threshold)` activating `dense_rows`.
    pub dense_height: Option<(usize, f64)>,
    /// Impose regular stage rows every `reduction`-th step (plus block
    /// boundaries); 1 means full resolution up front.
    pub reduction: usize,
}

impl ShmpcConfig {
    /// Validate dimensions and definiteness requirements.
    pub fn validate(&self, sys: &DiscreteLinearSystem) -> Result<(), ShmpcError> {
        let n = sys.num_states();
        let m = sys.b.ncols();
        if self.nbar == 0 || self.n0 == 0 || self.nbar > self.n0 {
            return Err(ShmpcError::InvalidConfig(
                "need 1 <= nbar <= n0".into(),
            ));
        }
        if self.reduction == 0 {
            return Err(ShmpcError::InvalidConfig("reduction must be >= 1".into()));
        }
        if self.h.nrows() != n + m || self.h.ncols() != n + m {
            return Err(ShmpcError::Dimension("stage cost must act on [z; v]".into()));
        }
        if self.p.nrows() != n || self.p0.nrows() != n {
            return Err(ShmpcError::Dimension("terminal/initial costs act on z".into()));
        }
        if self.f_bar.dim() != n + m {
            return Err(ShmpcError::Dimension("stage set must be over [v; z]".into()));
        }
        if self.xt_bar.dim() != n || self.tube.dim() != n {
            return Err(ShmpcError::Dimension("terminal set and tube live on z".into()));
        }
        if self.ref_start.len() != n || self.ref_end.len() != n {
            return Err(ShmpcError::Dimension("references must be full states".into()));
        }
        let sym_err = (&self.h - self.h.transpose()).amax();
        if sym_err > 1e-9 {
            return Err(ShmpcError::InvalidConfig("stage cost not symmetric".into()));
        }
        let eigs = self.h.clone().symmetric_eigen().eigenvalues;
        if eigs.min() < -1e-8 {
            return Err(ShmpcError::InvalidConfig("stage cost not PSD".into()));
        }
        if self.p.clone().cholesky().is_none() || self.p0.clone().cholesky().is_none() {
            return Err(ShmpcError::InvalidConfig(
                "terminal and initial-error costs must be positive definite".into(),
            ));
        }
        if self.dbar_idx.iter().any(|&j| j >= n) {
            return Err(ShmpcError::Dimension("dbar index out of range".into()));
        }
        if self.dense_rows.iter().any(|&r| r >= self.f_bar.num_rows()) {
            return Err(ShmpcError::Dimension("dense row index out of range".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Constraint tightening
// ---------------------------------------------------------------------------

/// Erode the stage set (over `[u; x]`) by the Cartesian product of an input
/// tube and a state tube, and the terminal set by the state tube alone.
pub fn tighten_sets(
    f: &HPolytope,
    xt: &HPolytope,
    input_tube: &Zonotope,
    state_tube: &Zonotope,
) -> Result<(HPolytope, HPolytope), ShmpcError> {
    let m = input_tube.dim();
    let n = state_tube.dim();
    if f.dim() != m + n || xt.dim() != n {
        return Err(ShmpcError::Dimension(
            "stage set must be over [u; x], terminal set over x".into(),
        ));
    }
    let product = cartesian_product(input_tube, state_tube)?;
    let f_bar = f.erode(&product)?;
    let xt_bar = xt.erode(state_tube)?;
    if f_bar.is_empty()? || xt_bar.is_empty()? {
        return Err(ShmpcError::InvalidConfig(
            "tightened constraint set is empty; tube too large for envelope".into(),
        ));
    }
    Ok((f_bar, xt_bar))
}

/// Tightening with the input tube taken as the image of the state tube under
/// the ancillary feedback gain: erode by `K Z x Z` in `[u; x]` and by `Z` in
/// the terminal set.
pub fn tighten(
    f: &HPolytope,
    xt: &HPolytope,
    z: &Zonotope,
    k_gain: &DMatrix<f64>,
) -> Result<(HPolytope, HPolytope), ShmpcError> {
    let m = k_gain.nrows();
    let input_tube = z.affine_image(k_gain, &DVector::zeros(m))?;
    tighten_sets(f, xt, &input_tube, z)
}

/// Cartesian product of two zonotopes as a zonotope in the stacked space.
pub fn cartesian_product(a: &Zonotope, b: &Zonotope) -> Result<Zonotope, ShmpcError> {
    let (na, nb) = (a.dim(), b.dim());
    let (ga, gb) = (a.num_generators(), b.num_generators());
    let mut center = DVector::zeros(na + nb);
    center.rows_mut(0, na).copy_from(a.center());
    center.rows_mut(na, nb).copy_from(b.center());
    let mut gens = DMatrix::zeros(na + nb, ga + gb);
    gens.view_mut((0, 0), (na, ga)).copy_from(a.generators());
    gens.view_mut((na, ga), (nb, gb)).copy_from(b.generators());
    Ok(Zonotope::new(center, gens)?)
}

// ---------------------------------------------------------------------------
// QP construction
// ---------------------------------------------------------------------------

/// Identity of one inequality row, stable across horizon shifts: stage rows
/// are tagged with the absolute maneuver step they apply to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RowTag {
    /// Support-direction row of the initial-error membership test.
    InitError(usize),
    /// Lower/upper pin of one disturbance-estimate component of `z0`.
    DbarLower(usize),
    DbarUpper(usize),
    /// Row `row` of the stage set imposed at absolute maneuver step `time`.
    Stage { time: usize, row: usize },
    /// Row of the terminal set on the last predicted state.
    Terminal(usize),
}

impl RowTag {
    fn describe(&self) -> String {
        match self {
            RowTag::InitError(d) => format!("init-error direction {d}"),
            RowTag::DbarLower(j) => format!("dbar pin (lower) state {j}"),
            RowTag::DbarUpper(j) => format!("dbar pin (upper) state {j}"),
            RowTag::Stage { time, row } => format!("stage row {row} at step {time}"),
            RowTag::Terminal(r) => format!("terminal row {r}"),
        }
    }
}

/// Condensed QP over the decision vector `[z0; Vbar]`.
#[derive(Debug, Clone)]
pub struct QpInstance {
    pub hessian: DMatrix<f64>,
    pub gradient: DVector<f64>,
    pub ineq_normals: DMatrix<f64>,
    pub ineq_offsets: DVector<f64>,
    pub tags: Vec<RowTag>,
    /// Constant cost offset dropped by the QP (reference and `x_k` terms).
    pub cost_offset: f64,
    pub num_states: usize,
    pub num_blocks: usize,
}

/// Rollout matrices mapping the decision vector to predicted states:
/// `z_i = s_z[i] * z0 + s_v[i] * Vbar` for `i = 0..=horizon`.
pub fn prediction_matrices(
    sys: &DiscreteLinearSystem,
    schedule: &BlockSchedule,
) -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
    let n = sys.num_states();
    let m = sys.b.ncols();
    let nb = schedule.num_blocks();
    let horizon = schedule.horizon();
    let mut s_z = Vec::with_capacity(horizon + 1);
    let mut s_v = Vec::with_capacity(horizon + 1);
    s_z.push(DMatrix::identity(n, n));
    s_v.push(DMatrix::zeros(n, m * nb));
    for i in 0..horizon {
        let blk = schedule.block_of(i);
        let mut next_z = &sys.a * &s_z[i];
        let mut next_v = &sys.a * &s_v[i];
        next_v
            .view_mut((0, m * blk), (n, m))
            .add_assign_b(&sys.b);
        // add_assign for the block column range
        let _ = &mut next_z;
        s_z.push(next_z);
        s_v.push(next_v);
    }
    (s_z, s_v)
}

trait AddAssignB {
    fn add_assign_b(&mut self, b: &DMatrix<f64>);
}

impl AddAssignB for nalgebra::DMatrixViewMut<'_, f64> {
    fn add_assign_b(&mut self, b: &DMatrix<f64>) {
        *self += b;
    }
}

/// Linear interpolation of the straight-line reference at absolute step `t`,
/// with the disturbance components overridden by the current estimate.
fn state_reference(cfg: &ShmpcConfig, t: usize, d_bar_est: &DVector<f64>) -> DVector<f64> {
    let alpha = (t as f64 / cfg.n0 as f64).min(1.0);
    let mut r = &cfg.ref_start * (1.0 - alpha) + &cfg.ref_end * alpha;
    for (j, &idx) in cfg.dbar_idx.iter().enumerate() {
        r[idx] = d_bar_est[j];
    }
    r
}

/// Symmetric PSD factorization `h = u^T u` with `u` of full row rank.
fn psd_factor(h: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = h.clone().symmetric_eigen();
    let mut rows = Vec::new();
    for (i, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam > 1e-12 {
            rows.push(eig.eigenvectors.column(i) * lam.sqrt());
        }
    }
    let mut u = DMatrix::zeros(rows.len(), h.nrows());
    for (r, col) in rows.iter().enumerate() {
        u.row_mut(r).copy_from(&col.transpose());
    }
    u
}

/// Steps of the current horizon at which regular stage rows are imposed.
fn imposed_steps(cfg: &ShmpcConfig, schedule: &BlockSchedule) -> Vec<usize> {
    let horizon = schedule.horizon();
    let mut mask = vec![false; horizon];
    for s in schedule.block_starts() {
        mask[s] = true;
    }
    for (i, slot) in mask.iter_mut().enumerate() {
        if i % cfg.reduction == 0 {
            *slot = true;
        }
    }
    mask[horizon - 1] = true;
    mask.iter()
        .enumerate()
        .filter_map(|(i, &on)| on.then_some(i))
        .collect()
}

struct RowBuilder {
    normals: Vec<DVector<f64>>,
    offsets: Vec<f64>,
    tags: Vec<RowTag>,
}

impl RowBuilder {
    fn push(&mut self, normal: DVector<f64>, offset: f64, tag: RowTag) {
        self.normals.push(normal);
        self.offsets.push(offset);
        self.tags.push(tag);
    }
}

/// Normal/offset of stage-set row `row` applied at horizon step `i`,
/// expressed over the decision vector.
fn stage_row(
    cfg: &ShmpcConfig,
    sys: &DiscreteLinearSystem,
    schedule: &BlockSchedule,
    s_z: &[DMatrix<f64>],
    s_v: &[DMatrix<f64>],
    i: usize,
    row: usize,
) -> (DVector<f64>, f64) {
    let n = sys.num_states();
    let m = sys.b.ncols();
    let nb = schedule.num_blocks();
    let nv = n + m * nb;
    let a = cfg.f_bar.normals().row(row);
    let a_u = a.columns(0, m);
    let a_x = a.columns(m, n);
    let mut normal = DVector::zeros(nv);
    let zn = (a_x * &s_z[i]).transpose();
    normal.rows_mut(0, n).copy_from(&zn);
    let vn = (a_x * &s_v[i]).transpose();
    normal.rows_mut(n, m * nb).copy_from(&vn);
    let blk = schedule.block_of(i);
    for j in 0..m {
        normal[n + m * blk + j] += a_u[j];
    }
    (normal, cfg.f_bar.offsets()[row])
}

/// Precomputed cost terms for every step of a maneuver.
///
/// The condensed Hessian and the reference part of the gradient depend on
/// the step index but not on the measured state, and the step-`k` quantities
/// are related to the step-`k+1` quantities by the linear shift map
/// `(z0, Vbar_k) -> (A z0 + B v0, Vbar_{k+1})`.  A single backward fold over
/// the maneuver therefore produces all of them at once, which removes the
/// dominant per-step cost of a long horizon.
#[derive(Debug, Clone)]
pub struct CostCache {
    /// Stage + terminal Hessian (without the initial-error block), per step.
    hessians: Vec<DMatrix<f64>>,
    /// Reference part of the gradient, per step.
    ref_grads: Vec<DVector<f64>>,
    /// Constant cost offsets from the references, per step.
    offsets: Vec<f64>,
}

/// Shift map from the step-`k` decision space onto the step-`k+1` space:
/// `z0' = A z0 + B v0`, later blocked inputs carried over.
fn shift_map(
    sys: &DiscreteLinearSystem,
    schedule_k: &BlockSchedule,
    schedule_next: &BlockSchedule,
) -> DMatrix<f64> {
    let n = sys.num_states();
    let m = sys.b.ncols();
    let nb = schedule_k.num_blocks();
    let nb_next = schedule_next.num_blocks();
    let dropped = nb_next < nb;
    let mut t = DMatrix::zeros(n + m * nb_next, n + m * nb);
    t.view_mut((0, 0), (n, n)).copy_from(&sys.a);
    t.view_mut((0, n), (n, m)).copy_from(&sys.b);
    for b_next in 0..nb_next {
        let b_old = if dropped { b_next + 1 } else { b_next };
        for j in 0..m {
            t[(n + m * b_next + j, n + m * b_old + j)] = 1.0;
        }
    }
    t
}

impl CostCache {
    /// Fold the stage, terminal, and reference cost terms backward over the
    /// whole maneuver.
    pub fn build(
        cfg: &ShmpcConfig,
        sys: &DiscreteLinearSystem,
        d_bar_est: &DVector<f64>,
    ) -> Result<Self, ShmpcError> {
        let n = sys.num_states();
        let m = sys.b.ncols();
        let mut schedules = Vec::with_capacity(cfg.n0);
        let mut s = BlockSchedule::new(cfg.n0, cfg.nbar)?;
        schedules.push(s.clone());
        for _ in 1..cfg.n0 {
            s.shrink();
            schedules.push(s.clone());
        }
        let mut hessians = vec![DMatrix::zeros(0, 0); cfg.n0];
        let mut ref_grads = vec![DVector::zeros(0); cfg.n0];
        let mut offsets = vec![0.0; cfg.n0];
        let z_t_ref = state_reference(cfg, cfg.n0, d_bar_est);
        for k in (0..cfg.n0).rev() {
            let sched = &schedules[k];
            let nb = sched.num_blocks();
            let nv = n + m * nb;
            // stage term at i = 0: G0 = [I 0; 0 E0]
            let mut g0 = DMatrix::zeros(n + m, nv);
            g0.view_mut((0, 0), (n, n))
                .copy_from(&DMatrix::identity(n, n));
            for j in 0..m {
                g0[(n + j, n + j)] = 1.0;
            }
            let hg0 = &cfg.h * &g0;
            let mut hess = DMatrix::zeros(nv, nv);
            hess.gemm_tr(2.0, &g0, &hg0, 1.0);
            let mut r0 = DVector::zeros(n + m);
            r0.rows_mut(0, n)
                .copy_from(&state_reference(cfg, k, d_bar_est));
            let hr = &cfg.h * &r0;
            let mut grad = DVector::zeros(nv);
            grad.gemv_tr(-2.0, &g0, &hr, 1.0);
            let mut offset = r0.dot(&hr);
            if k + 1 < cfg.n0 {
                let t = shift_map(sys, sched, &schedules[k + 1]);
                let st = &hessians[k + 1] * &t;
                hess.gemm_tr(1.0, &t, &st, 1.0);
                grad.gemv_tr(1.0, &t, &ref_grads[k + 1], 1.0);
                offset += offsets[k + 1];
            } else {
                // last step: horizon 1, terminal applies to z1 = A z0 + B v0
                let mut g_t = DMatrix::zeros(n, nv);
                g_t.view_mut((0, 0), (n, n)).copy_from(&sys.a);
                g_t.view_mut((0, n), (n, m)).copy_from(&sys.b);
                let pt = &cfg.p * &g_t;
                hess.gemm_tr(2.0, &g_t, &pt, 1.0);
                let pr = &cfg.p * &z_t_ref;
                grad.gemv_tr(-2.0, &g_t, &pr, 1.0);
                offset += z_t_ref.dot(&pr);
            }
            hessians[k] = hess;
            ref_grads[k] = grad;
            offsets[k] = offset;
        }
        Ok(Self {
            hessians,
            ref_grads,
            offsets,
        })
    }
}

/// Build the condensed QP for state `x_k` at step `k`.
pub fn build_qp(
    x_k: &DVector<f64>,
    k: usize,
    cfg: &ShmpcConfig,
    sys: &DiscreteLinearSystem,
    d_bar_est: &DVector<f64>,
) -> Result<QpInstance, ShmpcError> {
    build_qp_with_cache(x_k, k, cfg, sys, d_bar_est, None)
}

/// [`build_qp`] with an optional precomputed cost cache.
pub fn build_qp_with_cache(
    x_k: &DVector<f64>,
    k: usize,
    cfg: &ShmpcConfig,
    sys: &DiscreteLinearSystem,
    d_bar_est: &DVector<f64>,
    cache: Option<&CostCache>,
) -> Result<QpInstance, ShmpcError> {
    let schedule = BlockSchedule::at_step(cfg.n0, cfg.nbar, k)?;
    let pred = prediction_matrices(sys, &schedule);
    build_qp_prepredicted(x_k, k, cfg, sys, d_bar_est, cache, &schedule, &pred)
}

/// [`build_qp_with_cache`] with the prediction matrices supplied by the
/// caller, so the per-step solve loop does not compute them twice.
#[allow(clippy::too_many_arguments)]
fn build_qp_prepredicted(
    x_k: &DVector<f64>,
    k: usize,
    cfg: &ShmpcConfig,
    sys: &DiscreteLinearSystem,
    d_bar_est: &DVector<f64>,
    cache: Option<&CostCache>,
    schedule: &BlockSchedule,
    pred: &(Vec<DMatrix<f64>>, Vec<DMatrix<f64>>),
) -> Result<QpInstance, ShmpcError> {
    let n = sys.num_states();
    let m = sys.b.ncols();
    if x_k.len() != n {
        return Err(ShmpcError::Dimension("state dimension mismatch".into()));
    }
    if d_bar_est.len() != cfg.dbar_idx.len() {
        return Err(ShmpcError::Dimension(
            "disturbance estimate must match dbar_idx".into(),
        ));
    }
    let horizon = schedule.horizon();
    let nb = schedule.num_blocks();
    let nv = n + m * nb;
    let (s_z, s_v) = pred;

    // --- cost ---------------------------------------------------------------
    let (mut hess, mut grad, mut offset) = if let Some(cache) = cache {
        (
            cache.hessians[k].clone(),
            cache.ref_grads[k].clone(),
            cache.offsets[k],
        )
    } else {
        let mut hess = DMatrix::zeros(nv, nv);
        let mut grad = DVector::zeros(nv);
        let mut offset = 0.0;
        let u = psd_factor(&cfg.h);
        let has_stage_cost = u.nrows() > 0;
        let mut g_i = DMatrix::zeros(n + m, nv);
        for i in 0..horizon {
            if !has_stage_cost {
                break;
            }
            g_i.fill(0.0);
            g_i.view_mut((0, 0), (n, n)).copy_from(&s_z[i]);
            g_i.view_mut((0, n), (n, m * nb)).copy_from(&s_v[i]);
            let blk = schedule.block_of(i);
            for j in 0..m {
                g_i[(n + j, n + m * blk + j)] = 1.0;
            }
            let w = &u * &g_i;
            hess.gemm_tr(2.0, &w, &w, 1.0);
            let mut r_i = DVector::zeros(n + m);
            r_i.rows_mut(0, n)
                .copy_from(&state_reference(cfg, k + i, d_bar_est));
            let hr = &cfg.h * &r_i;
            grad.gemv_tr(-2.0, &g_i, &hr, 1.0);
            offset += r_i.dot(&hr);
        }
        // terminal cost
        let mut g_t = DMatrix::zeros(n, nv);
        g_t.view_mut((0, 0), (n, n)).copy_from(&s_z[horizon]);
        g_t.view_mut((0, n), (n, m * nb)).copy_from(&s_v[horizon]);
        let pt = &cfg.p * &g_t;
        hess.gemm_tr(2.0, &g_t, &pt, 1.0);
        let z_t_ref = state_reference(cfg, cfg.n0, d_bar_est);
        let pr = &cfg.p * &z_t_ref;
        grad.gemv_tr(-2.0, &g_t, &pr, 1.0);
        offset += z_t_ref.dot(&pr);
        (hess, grad, offset)
    };
    // initial-error cost on x_k - z0
    hess.view_mut((0, 0), (n, n)).add_assign(&(2.0 * &cfg.p0));
    let p0x = &cfg.p0 * x_k;
    grad.rows_mut(0, n).add_assign(&(-2.0 * &p0x));
    offset += x_k.dot(&p0x);
    // symmetrize against accumulation round-off
    let hess = (&hess + hess.transpose()) * 0.5;

    // --- constraints ---------------------------------------------------------
    let mut rows = RowBuilder {
        normals: Vec::new(),
        offsets: Vec::new(),
        tags: Vec::new(),
    };
    // init error membership: d . (x_k - z0) <= h_Z(d)
    let mut dirs: Vec<DVector<f64>> = Vec::with_capacity(2 * n + cfg.init_error_directions.len());
    for j in 0..n {
        // disturbance coordinates are handled by the pin rows below; axis
        // rows there would duplicate them and degenerate the active set
        if cfg.dbar_idx.contains(&j) {
            continue;
        }
        let mut e = DVector::zeros(n);
        e[j] = 1.0;
        dirs.push(e.clone());
        e[j] = -1.0;
        dirs.push(e);
    }
    dirs.extend(cfg.init_error_directions.iter().cloned());
    for (idx, d) in dirs.iter().enumerate() {
        let sup = cfg.tube.support(d)?;
        let mut normal = DVector::zeros(nv);
        normal.rows_mut(0, n).copy_from(&(-d));
        rows.push(normal, sup - d.dot(x_k), RowTag::InitError(idx));
    }
    // pin disturbance components of z0 to the estimate
    for (j, &idx) in cfg.dbar_idx.iter().enumerate() {
        let mut lo = DVector::zeros(nv);
        lo[idx] = -1.0;
        rows.push(lo, DBAR_PIN_TOL - d_bar_est[j], RowTag::DbarLower(idx));
        let mut hi = DVector::zeros(nv);
        hi[idx] = 1.0;
        rows.push(hi, DBAR_PIN_TOL + d_bar_est[j], RowTag::DbarUpper(idx));
    }
    // reduced stage rows
    let dense: std::collections::HashSet<usize> = cfg.dense_rows.iter().copied().collect();
    for &i in &imposed_steps(cfg, &schedule) {
        for row in 0..cfg.f_bar.num_rows() {
            if dense.contains(&row) {
                continue;
            }
            let (normal, off) = stage_row(cfg, sys, &schedule, &s_z, &s_v, i, row);
            rows.push(normal, off, RowTag::Stage { time: k + i, row });
        }
    }
    // near-deck rows wherever the reference predicts low height
    if let Some((h_idx, thresh)) = cfg.dense_height {
        for i in 0..horizon {
            let r = state_reference(cfg, k + i, d_bar_est);
            if r[h_idx] < thresh {
                for &row in &cfg.dense_rows {
                    let (normal, off) = stage_row(cfg, sys, &schedule, &s_z, &s_v, i, row);
                    rows.push(normal, off, RowTag::Stage { time: k + i, row });
                }
            }
        }
    }
    // terminal set on z_horizon
    for r in 0..cfg.xt_bar.num_rows() {
        let a = cfg.xt_bar.normals().row(r);
        let mut normal = DVector::zeros(nv);
        let zn = (a * &s_z[horizon]).transpose();
        normal.rows_mut(0, n).copy_from(&zn);
        let vn = (a * &s_v[horizon]).transpose();
        normal.rows_mut(n, m * nb).copy_from(&vn);
        rows.push(normal, cfg.xt_bar.offsets()[r], RowTag::Terminal(r));
    }

    let q = rows.normals.len();
    let mut ineq_normals = DMatrix::zeros(q, nv);
    for (r, normal) in rows.normals.iter().enumerate() {
        ineq_normals.row_mut(r).copy_from(&normal.transpose());
    }
    Ok(QpInstance {
        hessian: hess,
        gradient: grad,
        ineq_normals,
        ineq_offsets: DVector::from_vec(rows.offsets),
        tags: rows.tags,
        cost_offset: offset,
        num_states: n,
        num_blocks: nb,
    })
}

// ---------------------------------------------------------------------------
// Per-step solve
// ---------------------------------------------------------------------------

/// Solver statistics for one control step.
#[derive(Debug, Clone, Default)]
pub struct SolveStats {
    pub qp_iterations: usize,
    pub lazy_rounds: usize,
    pub rows: usize,
    pub active_set_size: usize,
    pub solve_time_s: f64,
}

/// Result of one SHMPC step.
#[derive(Debug, Clone)]
pub struct StepSolution {
    pub z0: DVector<f64>,
    pub v0: DVector<f64>,
    pub v_bar: Vec<DVector<f64>>,
    /// Predicted nominal states `z_0 ..= z_{N_k}`.
    pub predicted: Vec<DVector<f64>>,
    /// True objective value (including constant terms).
    pub cost: f64,
    /// Tags of the constraints active at the optimum (warm-start carrier).
    pub active_tags: Vec<RowTag>,
    pub stats: SolveStats,
}

/// Roll the nominal model forward with the blocked inputs of a solution.
fn rollout(
    sys: &DiscreteLinearSystem,
    schedule: &BlockSchedule,
    z0: &DVector<f64>,
    v_bar: &[DVector<f64>],
) -> Vec<DVector<f64>> {
    let horizon = schedule.horizon();
    let mut zs = Vec::with_capacity(horizon + 1);
    zs.push(z0.clone());
    for i in 0..horizon {
        let v = &v_bar[schedule.block_of(i)];
        let next = &sys.a * &zs[i] + &sys.b * v;
        zs.push(next);
    }
    zs
}

/// True objective of a candidate `(z0, Vbar)` at step `k` (by direct rollout).
pub fn evaluate_cost(
    x_k: &DVector<f64>,
    k: usize,
    cfg: &ShmpcConfig,
    sys: &DiscreteLinearSystem,
    d_bar_est: &DVector<f64>,
    z0: &DVector<f64>,
    v_bar: &[DVector<f64>],
) -> Result<f64, ShmpcError> {
    let n = sys.num_states();
    let m = sys.b.ncols();
    let schedule = BlockSchedule::at_step(cfg.n0, cfg.nbar, k)?;
    let zs = rollout(sys, &schedule, z0, v_bar);
    let mut cost = 0.0;
    for (i, z) in zs.iter().take(schedule.horizon()).enumerate() {
        let mut zv = DVector::zeros(n + m);
        zv.rows_mut(0, n).copy_from(z);
        zv.rows_mut(n, m).copy_from(&v_bar[schedule.block_of(i)]);
        let mut r = DVector::zeros(n + m);
        r.rows_mut(0, n)
            .copy_from(&state_reference(cfg, k + i, d_bar_est));
        let dev = zv - r;
        cost += dev.dot(&(&cfg.h * &dev));
    }
    let zt = &zs[schedule.horizon()] - state_reference(cfg, cfg.n0, d_bar_est);
    cost += zt.dot(&(&cfg.p * &zt));
    let eps = x_k - z0;
    cost += eps.dot(&(&cfg.p0 * &eps));
    Ok(cost)
}

/// Solve the step-`k` problem, lazily restoring full-resolution stage
/// constraints on the solved trajectory.
pub fn solve_step(
    x_k: &DVector<f64>,
    k: usize,
    cfg: &ShmpcConfig,
    sys: &DiscreteLinearSystem,
    d_bar_est: &DVector<f64>,
    warm_tags: Option<&[RowTag]>,
) -> Result<StepSolution, ShmpcError> {
    solve_step_with_cache(x_k, k, cfg, sys, d_bar_est, warm_tags, None)
}

/// [`solve_step`] with an optional precomputed cost cache.
#[allow(clippy::too_many_arguments)]
pub fn solve_step_with_cache(
    x_k: &DVector<f64>,
    k: usize,
    cfg: &ShmpcConfig,
    sys: &DiscreteLinearSystem,
    d_bar_est: &DVector<f64>,
    warm_tags: Option<&[RowTag]>,
    cache: Option<&CostCache>,
) -> Result<StepSolution, ShmpcError> {
    // thread CPU time: per-step solver cost must be comparable across
    // machines, so scheduler preemption on a loaded host is excluded
    let start = cpu_time::ThreadTime::now();
    let n = sys.num_states();
    let m = sys.b.ncols();
    let schedule = BlockSchedule::at_step(cfg.n0, cfg.nbar, k)?;
    let horizon = schedule.horizon();
    let pred = prediction_matrices(sys, &schedule);
    let mut inst =
        build_qp_prepredicted(x_k, k, cfg, sys, d_bar_est, cache, &schedule, &pred)?;
    let (s_z, s_v) = &pred;
    let dense: std::collections::HashSet<usize> = cfg.dense_rows.iter().copied().collect();

    let axis_init_rows = 2 * (n - cfg.dbar_idx.len());
    let mut hint: Vec<usize> = warm_tags
        .map(|tags| {
            tags.iter()
                .filter_map(|t| inst.tags.iter().position(|u| u == t))
                .collect()
        })
        .unwrap_or_default();

    let mut total_iters = 0;
    let mut lazy_rounds = 0;
    loop {
        let sol = solve_qp(
            &inst.hessian,
            &inst.gradient,
            &inst.ineq_normals,
            &inst.ineq_offsets,
            if hint.is_empty() { None } else { Some(&hint) },
        )?;
        total_iters += sol.iterations;
        match sol.status {
            QpStatus::Optimal => {}
            QpStatus::Infeasible => {
                let rows = sol
                    .active_set
                    .iter()
                    .map(|&r| inst.tags[r].describe())
                    .collect();
                return Err(ShmpcError::Infeasible { step: k, rows });
            }
            QpStatus::MaxIter => {
                return Err(ShmpcError::Solver(QpError::NonFinite));
            }
        }
        let z0 = DVector::from_iterator(n, sol.primal.iter().take(n).copied());
        let v_bar: Vec<DVector<f64>> = (0..inst.num_blocks)
            .map(|b| {
                DVector::from_iterator(
                    m,
                    sol.primal.iter().skip(n + m * b).take(m).copied(),
                )
            })
            .collect();
        let predicted = rollout(sys, &schedule, &z0, &v_bar);
        // full-resolution check of all stage rows on the solved trajectory
        let mut added = 0;
        let imposed: std::collections::HashSet<RowTag> = inst.tags.iter().copied().collect();
        let mut new_rows = RowBuilder {
            normals: Vec::new(),
            offsets: Vec::new(),
            tags: Vec::new(),
        };
        // lazy check of the extra initial-error template directions; the
        // axis-aligned box rows are always imposed in build_qp, so indices
        // continue after them
        for (j, d) in cfg.init_error_directions.iter().enumerate() {
            let tag = RowTag::InitError(axis_init_rows + j);
            if imposed.contains(&tag) {
                continue;
            }
            let sup = cfg.tube.support(d)?;
            if d.dot(&(x_k - &z0)) > sup + LAZY_CHECK_TOL {
                let mut normal = DVector::zeros(inst.hessian.nrows());
                normal.rows_mut(0, n).copy_from(&(-d));
                new_rows.push(normal, sup - d.dot(x_k), tag);
                added += 1;
            }
        }
        for i in 0..horizon {
            let z = &predicted[i];
            let v = &v_bar[schedule.block_of(i)];
            for row in 0..cfg.f_bar.num_rows() {
                let is_dense = dense.contains(&row);
                if is_dense {
                    match cfg.dense_height {
                        Some((h_idx, thresh)) if z[h_idx] < thresh => {}
                        _ => continue,
                    }
                }
                let tag = RowTag::Stage { time: k + i, row };
                if imposed.contains(&tag) {
                    continue;
                }
                let a = cfg.f_bar.normals().row(row);
                let val = a.columns(0, m).transpose().dot(v)
                    + a.columns(m, n).transpose().dot(z);
                if val > cfg.f_bar.offsets()[row] + LAZY_CHECK_TOL {
                    let (normal, off) = stage_row(cfg, sys, &schedule, &s_z, &s_v, i, row);
                    new_rows.push(normal, off, tag);
                    added += 1;
                }
            }
        }
        if added == 0 {
            let cost = evaluate_cost(x_k, k, cfg, sys, d_bar_est, &z0, &v_bar)?;
            let active_tags = sol.active_set.iter().map(|&r| inst.tags[r]).collect();
            let v0 = v_bar[0].clone();
            return Ok(StepSolution {
                z0,
                v0,
                v_bar,
                predicted,
                cost,
                active_tags,
                stats: SolveStats {
                    qp_iterations: total_iters,
                    lazy_rounds,
                    rows: inst.ineq_offsets.len(),
                    active_set_size: sol.active_set.len(),
                    solve_time_s: start.elapsed().as_secs_f64(),
                },
            });
        }
        lazy_rounds += 1;
        if lazy_rounds > MAX_LAZY_ROUNDS {
            return Err(ShmpcError::LazyRoundsExhausted { step: k });
        }
        // append the violated rows (indices of existing rows stay valid)
        hint = sol.active_set.clone();
        append_rows(&mut inst, &new_rows);
    }
}

/// Append constraint rows to an instance, preserving existing row indices.
fn append_rows(inst: &mut QpInstance, new_rows: &RowBuilder) {
    let added = new_rows.tags.len();
    let old_q = inst.ineq_offsets.len();
    let nv = inst.hessian.nrows();
    let mut normals = DMatrix::zeros(old_q + added, nv);
    normals.view_mut((0, 0), (old_q, nv)).copy_from(&inst.ineq_normals);
    let mut offsets = DVector::zeros(old_q + added);
    offsets.rows_mut(0, old_q).copy_from(&inst.ineq_offsets);
    for (j, normal) in new_rows.normals.iter().enumerate() {
        normals.row_mut(old_q + j).copy_from(&normal.transpose());
        offsets[old_q + j] = new_rows.offsets[j];
    }
    inst.ineq_normals = normals;
    inst.ineq_offsets = offsets;
    inst.tags.extend_from_slice(&new_rows.tags);
}

// ---------------------------------------------------------------------------
// Stateful controller
// ---------------------------------------------------------------------------

/// One controller instance per maneuver: tracks the current step and carries
/// the warm start (active constraint tags) between solves.
#[derive(Debug, Clone)]
pub struct ShmpcController {
    cfg: ShmpcConfig,
    sys: DiscreteLinearSystem,
    k: usize,
    warm: Option<Vec<RowTag>>,
    cache: Option<(DVector<f64>, CostCache)>,
}

impl ShmpcController {
    pub fn new(cfg: ShmpcConfig, sys: DiscreteLinearSystem) -> Result<Self, ShmpcError> {
        cfg.validate(&sys)?;
        Ok(Self {
            cfg,
            sys,
            k: 0,
            warm: None,
            cache: None,
        })
    }

    pub fn step_index(&self) -> usize {
        self.k
    }

    pub fn remaining_steps(&self) -> usize {
        self.cfg.n0.saturating_sub(self.k)
    }

    pub fn config(&self) -> &ShmpcConfig {
        &self.cfg
    }

    /// Solve the current step and advance the horizon.
    pub fn step(
        &mut self,
        x_k: &DVector<f64>,
        d_bar_est: &DVector<f64>,
    ) -> Result<StepSolution, ShmpcError> {
        if self.k >= self.cfg.n0 {
            return Err(ShmpcError::HorizonExhausted {
                step: self.k,
                n0: self.cfg.n0,
            });
        }
        let stale = match &self.cache {
            Some((est, _)) => est != d_bar_est,
            None => true,
        };
        if stale {
            self.cache = Some((
                d_bar_est.clone(),
                CostCache::build(&self.cfg, &self.sys, d_bar_est)?,
            ));
        }
        let cache = self.cache.as_ref().map(|(_, c)| c);
        let sol = solve_step_with_cache(
            x_k,
            self.k,
            &self.cfg,
            &self.sys,
            d_bar_est,
            self.warm.as_deref(),
            cache,
        )?;
        self.warm = Some(sol.active_tags.clone());
        self.k += 1;
        Ok(sol)
    }
}
