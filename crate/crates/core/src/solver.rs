//! Constrained low-rank plus sparse-change recovery.
//!
//! The recovery program is
//!
//! ```text
//! minimize   ||K||_* + lambda ||D||_1
//! subject to |Y - (K + D) U A|   <= Xi_y
//!            |z^T W - C (K + D)| <= xi_z
//! ```
//!
//! and the refinement program drops the L1 term and pins `D` to zero outside
//! a support set. Both are solved by ADMM on the consensus form
//!
//! ```text
//! K = X_K,  D = X_D,  v = B(X_K + X_D),  v in box
//! ```
//!
//! where `B(X) = (X U A, C X)`. The first block (`K`, `D`, `v`) separates
//! into singular value thresholding, soft thresholding and a clamp. The
//! second block is a linear system `(I + 2 B^T B) s = r` whose structure
//! (`B^T B s = s V V^T + C^T C s` with `V = U A`) admits an exact solve
//! through one eigendecomposition of `C^T C` and small Cholesky factors.
//! A linearized variant that never solves a system is available through
//! [`Splitting::Linearized`].

use std::collections::BTreeSet;
use std::time::Instant;

use nalgebra::{Cholesky, Dyn, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{exceedance, Decomposition, MeasurementOperator, MeasurementSet};
use crate::prox::{prox_l1, shrink_singular_values, SvdMode};
use crate::transforms::{
    adjoint_cumsum, apply_cumsum, estimate_operator_norm, AveragingOperator, Matrix,
};

/// Weight that yields 0.05 at a 420-minute horizon.
pub const LAMBDA_CONSTANT: f64 = 1.024_695_076_595_959_8;

/// `c / sqrt(T)` with `c` chosen so that `T = 420` gives 0.05.
pub fn default_lambda(horizon: usize) -> f64 {
    assert!(horizon >= 1, "horizon must be positive");
    if horizon == 420 {
        return 0.05;
    }
    LAMBDA_CONSTANT / (horizon as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Splitting {
    /// Exact updates of both ADMM blocks.
    #[default]
    Consensus,
    /// Gradient-linearized primal updates with a step bounded by the
    /// power-iteration norm of the stacked measurement map.
    Linearized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub lambda: f64,
    pub max_iters: usize,
    pub eps_abs: f64,
    pub eps_rel: f64,
    /// Penalty relative to the mean absolute meter reading, which keeps the
    /// iterates equivariant under rescaling of the data.
    pub rho: f64,
    /// Penalty multiplier on the measurement box coupling relative to the
    /// `K`, `D` consensus coupling; consensus splitting only.
    pub constraint_weight: f64,
    /// Over-relaxation factor in (0, 2); consensus splitting only.
    pub relaxation: f64,
    /// Safety factor on the linearized step; linearized splitting only.
    pub step_scale: f64,
    pub support_abs: f64,
    pub support_rel: f64,
    /// Allowed constraint violation. When absent, `feas_rel` times the
    /// largest constraint center `max(|Y|, |z^T W|)`.
    pub feas_tol: Option<f64>,
    pub feas_rel: f64,
    pub splitting: Splitting,
    pub svd: SvdMode,
    pub power_iters: usize,
    pub power_seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            lambda: 0.05,
            max_iters: 20_000,
            eps_abs: 1e-6,
            eps_rel: 1e-5,
            rho: 6.0,
            constraint_weight: 1.0,
            relaxation: 1.7,
            step_scale: 0.9,
            support_abs: 0.01,
            support_rel: 1e-3,
            feas_tol: None,
            feas_rel: 1e-6,
            splitting: Splitting::Consensus,
            svd: SvdMode::Full,
            power_iters: 50,
            power_seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lambda", self.lambda),
            ("eps_abs", self.eps_abs),
            ("eps_rel", self.eps_rel),
            ("rho", self.rho),
            ("constraint_weight", self.constraint_weight),
            ("feas_rel", self.feas_rel),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.step_scale > 0.0 && self.step_scale <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "step_scale must lie in (0, 1], got {}",
                self.step_scale
            )));
        }
        if !(self.relaxation > 0.0 && self.relaxation < 2.0) {
            return Err(Error::InvalidParameter(format!(
                "relaxation must lie in (0, 2), got {}",
                self.relaxation
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidParameter("max_iters must be at least 1".into()));
        }
        if !(self.support_abs >= 0.0) || !(self.support_rel >= 0.0) {
            return Err(Error::InvalidParameter("support thresholds must be nonnegative".into()));
        }
        if let Some(tol) = self.feas_tol {
            if !(tol >= 0.0) {
                return Err(Error::InvalidParameter(format!("feas_tol must be nonnegative, got {tol}")));
            }
        }
        Ok(())
    }

    /// Constraint violation accepted for `ms`.
    pub fn resolved_feas_tol(&self, ms: &MeasurementSet) -> f64 {
        self.feas_tol
            .unwrap_or_else(|| self.feas_rel * ms.measurement_scale())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Recovery,
    Refinement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub stage: Stage,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub primal_threshold: f64,
    pub dual_threshold: f64,
    pub objective: f64,
    pub feasibility_violation: f64,
    pub feas_tol: f64,
    pub converged: bool,
    /// Set by [`run_algorithm1`] when refinement did not converge and the
    /// first-stage result was returned instead.
    pub refinement_failed: bool,
    pub rank: usize,
    pub nonzeros_d: usize,
    pub rho_effective: f64,
    /// Seconds; not serialized so that run outputs stay reproducible.
    #[serde(skip)]
    pub wall_time: f64,
}

/// One row of the iteration trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub objective: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub feasibility_violation: f64,
}

/// Every iterate and scaled dual of a solve, for warm starts.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverState {
    pub k: Matrix,
    pub d: Matrix,
    pub xk: Matrix,
    pub xd: Matrix,
    pub u_k: Matrix,
    pub u_d: Matrix,
    pub u_meter: Matrix,
    pub u_aggregate: Matrix,
    /// Penalty the scaled duals refer to.
    pub rho: f64,
}

impl SolverState {
    fn zeros(ms: &MeasurementSet, rho: f64) -> Self {
        let (n, t) = (ms.nodes(), ms.horizon());
        let z = Matrix::zeros(n, t);
        Self {
            k: z.clone(),
            d: z.clone(),
            xk: z.clone(),
            xd: z.clone(),
            u_k: z.clone(),
            u_d: z,
            u_meter: Matrix::zeros(n, ms.meter().ncols()),
            u_aggregate: Matrix::zeros(ms.sensors(), t),
            rho,
        }
    }

    /// Primal start at `dec` with zero duals.
    pub fn from_decomposition(dec: &Decomposition, ms: &MeasurementSet) -> Result<Self> {
        if dec.shape() != (ms.nodes(), ms.horizon()) {
            return Err(Error::shape(
                "warm start",
                (ms.nodes(), ms.horizon()),
                dec.shape(),
            ));
        }
        let mut state = Self::zeros(ms, 1.0);
        state.k = dec.k.clone();
        state.d = dec.d.clone();
        state.xk = dec.k.clone();
        state.xd = dec.d.clone();
        Ok(state)
    }

    fn check(&self, ms: &MeasurementSet) -> Result<()> {
        let shape = (ms.nodes(), ms.horizon());
        for m in [&self.k, &self.d, &self.xk, &self.xd, &self.u_k, &self.u_d] {
            if m.shape() != shape {
                return Err(Error::shape("warm start", shape, m.shape()));
            }
        }
        if self.u_meter.shape() != ms.meter().shape() {
            return Err(Error::shape("warm start meter dual", ms.meter().shape(), self.u_meter.shape()));
        }
        if self.u_aggregate.shape() != ms.aggregate().shape() {
            return Err(Error::shape(
                "warm start aggregate dual",
                ms.aggregate().shape(),
                self.u_aggregate.shape(),
            ));
        }
        Ok(())
    }

    fn rescale_duals(&mut self, rho: f64) {
        if self.rho > 0.0 && self.rho != rho {
            let c = self.rho / rho;
            self.u_k *= c;
            self.u_d *= c;
            self.u_meter *= c;
            self.u_aggregate *= c;
        }
        self.rho = rho;
    }
}

#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub decomposition: Decomposition,
    pub report: SolveReport,
    pub trace: Vec<TraceRecord>,
    /// Fixed-point residual of the ADMM map per iteration; non-increasing
    /// for the consensus splitting.
    pub merit: Vec<f64>,
    pub state: SolverState,
}

/// Index pairs `(node, slot)` where the refinement lets `D` be nonzero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SupportSet {
    nodes: usize,
    horizon: usize,
    entries: BTreeSet<(usize, usize)>,
}

impl SupportSet {
    pub fn new(
        nodes: usize,
        horizon: usize,
        entries: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        let entries: BTreeSet<_> = entries.into_iter().collect();
        if let Some(&(n, t)) = entries.iter().find(|&&(n, t)| n >= nodes || t >= horizon) {
            return Err(Error::InvalidParameter(format!(
                "support entry ({n}, {t}) outside {nodes}x{horizon}"
            )));
        }
        Ok(Self {
            nodes,
            horizon,
            entries,
        })
    }

    pub fn empty(nodes: usize, horizon: usize) -> Self {
        Self {
            nodes,
            horizon,
            entries: BTreeSet::new(),
        }
    }

    pub fn full(nodes: usize, horizon: usize) -> Self {
        let entries = (0..nodes).flat_map(|n| (0..horizon).map(move |t| (n, t))).collect();
        Self {
            nodes,
            horizon,
            entries,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.nodes, self.horizon)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, node: usize, slot: usize) -> bool {
        self.entries.contains(&(node, slot))
    }

    /// Entries in row-major order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.entries.iter().copied()
    }

    /// 1 on the support, 0 elsewhere.
    pub fn mask(&self) -> Matrix {
        let mut m = Matrix::zeros(self.nodes, self.horizon);
        for &(n, t) in &self.entries {
            m[(n, t)] = 1.0;
        }
        m
    }
}

/// Entries of `d_hat` above `max(support_abs, support_rel * max|d_hat|)`.
pub fn extract_support(d_hat: &Matrix, cfg: &SolverConfig) -> SupportSet {
    let threshold = cfg.support_abs.max(cfg.support_rel * d_hat.amax());
    let mut entries = BTreeSet::new();
    for n in 0..d_hat.nrows() {
        for t in 0..d_hat.ncols() {
            if d_hat[(n, t)].abs() > threshold {
                entries.insert((n, t));
            }
        }
    }
    SupportSet {
        nodes: d_hat.nrows(),
        horizon: d_hat.ncols(),
        entries,
    }
}

/// Step 1: the full recovery program from a cold start.
pub fn solve_recovery(ms: &MeasurementSet, cfg: &SolverConfig) -> Result<SolveOutcome> {
    solve_recovery_from(ms, cfg, None)
}

pub fn solve_recovery_from(
    ms: &MeasurementSet,
    cfg: &SolverConfig,
    warm: Option<&SolverState>,
) -> Result<SolveOutcome> {
    let penalty = Penalty::L1(cfg.lambda);
    solve(ms, cfg, penalty, warm, Stage::Recovery)
}

/// Nuclear-norm minimization with `D` confined to `support`.
pub fn solve_refinement(
    ms: &MeasurementSet,
    support: &SupportSet,
    cfg: &SolverConfig,
    warm: Option<&SolverState>,
) -> Result<SolveOutcome> {
    if support.shape() != (ms.nodes(), ms.horizon()) {
        return Err(Error::shape(
            "support set",
            (ms.nodes(), ms.horizon()),
            support.shape(),
        ));
    }
    solve(ms, cfg, Penalty::Support(support.mask()), warm, Stage::Refinement)
}

/// Result of the two-step pipeline.
#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub decomposition: Decomposition,
    pub report: SolveReport,
    pub support: SupportSet,
    pub step1: SolveOutcome,
    /// Absent when refinement failed and the step-1 result was kept.
    pub refinement: Option<SolveOutcome>,
}

/// Recovery, support extraction, then refinement warm-started from the
/// recovery iterates.
pub fn run_algorithm1(ms: &MeasurementSet, cfg: &SolverConfig) -> Result<PipelineOutcome> {
    let step1 = solve_recovery(ms, cfg)?;
    let support = extract_support(&step1.decomposition.d, cfg);
    let refined = solve_refinement(ms, &support, cfg, Some(&step1.state))?;
    if refined.report.converged || !step1.report.converged {
        Ok(PipelineOutcome {
            decomposition: refined.decomposition.clone(),
            report: refined.report.clone(),
            support,
            step1,
            refinement: Some(refined),
        })
    } else {
        let mut report = step1.report.clone();
        report.refinement_failed = true;
        Ok(PipelineOutcome {
            decomposition: step1.decomposition.clone(),
            report,
            support,
            step1,
            refinement: None,
        })
    }
}

enum Penalty {
    L1(f64),
    Support(Matrix),
}

impl Penalty {
    fn prox(&self, m: &Matrix, step: f64) -> Matrix {
        match self {
            Penalty::L1(lambda) => prox_l1(m, lambda * step),
            Penalty::Support(mask) => m.zip_map(mask, |v, keep| if keep != 0.0 { v } else { 0.0 }),
        }
    }

    fn value(&self, d: &Matrix) -> f64 {
        match self {
            Penalty::L1(lambda) => lambda * d.iter().map(|v| v.abs()).sum::<f64>(),
            Penalty::Support(_) => 0.0,
        }
    }
}

/// Box constraints on the measured images, as lower and upper limits.
struct Constraints {
    op: MeasurementOperator,
    meter_center: Matrix,
    meter_radius: Matrix,
    meter_lo: Matrix,
    meter_hi: Matrix,
    aggregate_center: Matrix,
    aggregate_radius: Matrix,
    aggregate_lo: Matrix,
    aggregate_hi: Matrix,
}

impl Constraints {
    fn new(ms: &MeasurementSet) -> Self {
        let meter_center = ms.meter().clone();
        let meter_radius = ms.meter_bounds().clone();
        let aggregate_center = ms.differenced_aggregate();
        let aggregate_radius = ms.aggregate_bounds().clone();
        Self {
            op: ms.measurement_operator(),
            meter_lo: &meter_center - &meter_radius,
            meter_hi: &meter_center + &meter_radius,
            aggregate_lo: &aggregate_center - &aggregate_radius,
            aggregate_hi: &aggregate_center + &aggregate_radius,
            meter_center,
            meter_radius,
            aggregate_center,
            aggregate_radius,
        }
    }

    fn clamp_meter(&self, m: &Matrix) -> Matrix {
        clamp(m, &self.meter_lo, &self.meter_hi)
    }

    fn clamp_aggregate(&self, m: &Matrix) -> Matrix {
        clamp(m, &self.aggregate_lo, &self.aggregate_hi)
    }

    fn violation(&self, x: &Matrix) -> f64 {
        let (meter, aggregate) = self.op.apply(x);
        exceedance(&(&self.meter_center - meter), &self.meter_radius)
            .max(exceedance(&(&self.aggregate_center - aggregate), &self.aggregate_radius))
    }
}

fn clamp(m: &Matrix, lo: &Matrix, hi: &Matrix) -> Matrix {
    let mut out = m.clone();
    for ((v, &l), &h) in out.iter_mut().zip(lo.iter()).zip(hi.iter()) {
        *v = v.clamp(l, h);
    }
    out
}

/// Exact solver for `(I + 2 w B^T B) s = r`.
struct ConsensusSystem {
    averaging: AveragingOperator,
    rotation: Matrix,
    weight: f64,
    scales: Vec<f64>,
    factors: Vec<Cholesky<f64, Dyn>>,
}

impl ConsensusSystem {
    fn new(op: &MeasurementOperator, weight: f64) -> Result<Self> {
        let averaging = op.averaging().clone();
        let coarse = averaging.coarse_len();
        // Gram matrix V^T V of V = U A, one row of V^T at a time.
        let spread = averaging.adjoint(&Matrix::identity(coarse, coarse))?;
        let gram = averaging.apply(&apply_cumsum(&adjoint_cumsum(&spread)))?;
        let c = op.aggregation_map();
        let eig = SymmetricEigen::new(c.tr_mul(c));
        let mut scales = Vec::with_capacity(eig.eigenvalues.len());
        let mut factors = Vec::with_capacity(eig.eigenvalues.len());
        for &gamma in eig.eigenvalues.iter() {
            let scale = 1.0 + 2.0 * weight * gamma.max(0.0);
            let mut m = &gram * (2.0 * weight);
            for i in 0..coarse {
                m[(i, i)] += scale;
            }
            let chol = Cholesky::new(m)
                .ok_or_else(|| Error::InvalidParameter("consensus system is not positive definite".into()))?;
            scales.push(scale);
            factors.push(chol);
        }
        Ok(Self {
            averaging,
            rotation: eig.eigenvectors,
            weight,
            scales,
            factors,
        })
    }

    fn solve(&self, rhs: &Matrix) -> Matrix {
        // In the eigenbasis of C^T C each row k solves
        // x (c_k I + 2 w V V^T) = r, and by Woodbury
        // x = (r - 2 w (r V) (c_k I + 2 w V^T V)^{-1} V^T) / c_k.
        let rotated = self.rotation.tr_mul(rhs);
        let mut coarse = self
            .averaging
            .apply(&apply_cumsum(&rotated))
            .expect("rotated rhs has the operator horizon");
        for (k, chol) in self.factors.iter().enumerate() {
            let row = coarse.row(k).transpose();
            let sol = chol.solve(&row);
            coarse.row_mut(k).copy_from(&sol.transpose());
        }
        let back = adjoint_cumsum(
            &self
                .averaging
                .adjoint(&coarse)
                .expect("coarse solution has the operator width"),
        );
        let mut out = rotated - back * (2.0 * self.weight);
        for (k, &scale) in self.scales.iter().enumerate() {
            out.row_mut(k).scale_mut(1.0 / scale);
        }
        &self.rotation * out
    }
}

struct Thresholds {
    primal: f64,
    dual: f64,
    feasibility: f64,
}

impl Thresholds {
    fn met(&self, primal: f64, dual: f64, violation: f64) -> bool {
        primal <= self.primal && dual <= self.dual && violation <= self.feasibility
    }

    /// Worst ratio of a residual to its threshold.
    fn score(&self, primal: f64, dual: f64, violation: f64) -> f64 {
        let ratio = |r: f64, t: f64| if t > 0.0 { r / t } else if r > 0.0 { f64::INFINITY } else { 0.0 };
        ratio(primal, self.primal)
            .max(ratio(dual, self.dual))
            .max(ratio(violation, self.feasibility))
    }
}

struct Best {
    score: f64,
    k: Matrix,
    d: Matrix,
    record: TraceRecord,
    rank: usize,
    thresholds: (f64, f64),
}

fn solve(
    ms: &MeasurementSet,
    cfg: &SolverConfig,
    penalty: Penalty,
    warm: Option<&SolverState>,
    stage: Stage,
) -> Result<SolveOutcome> {
    cfg.validate()?;
    let rho = cfg.rho / ms.data_scale();
    let state = match warm {
        Some(w) => {
            w.check(ms)?;
            let mut s = w.clone();
            s.rescale_duals(rho);
            s
        }
        None => SolverState::zeros(ms, rho),
    };
    let constraints = Constraints::new(ms);
    let feas_tol = cfg.resolved_feas_tol(ms);
    let start = Instant::now();
    let mut outcome = match cfg.splitting {
        Splitting::Consensus => consensus(&constraints, cfg, &penalty, state, feas_tol, stage)?,
        Splitting::Linearized => linearized(&constraints, cfg, &penalty, state, feas_tol, stage)?,
    };
    outcome.report.wall_time = start.elapsed().as_secs_f64();
    Ok(outcome)
}

fn problem_size(c: &Constraints) -> f64 {
    let (n, t) = (c.meter_center.nrows(), c.aggregate_center.ncols());
    (2 * n * t + c.meter_center.len() + c.aggregate_center.len()) as f64
}

#[allow(clippy::too_many_arguments)]
fn finish(
    stage: Stage,
    iterations: usize,
    converged: bool,
    best: Option<Best>,
    current: (Matrix, Matrix, TraceRecord, usize, (f64, f64)),
    feas_tol: f64,
    rho: f64,
    trace: Vec<TraceRecord>,
    merit: Vec<f64>,
    state: SolverState,
) -> SolveOutcome {
    let (k, d, record, rank, thresholds) = match (converged, best) {
        (false, Some(b)) => (b.k, b.d, b.record, b.rank, b.thresholds),
        _ => current,
    };
    let nonzeros_d = d.iter().filter(|v| **v != 0.0).count();
    SolveOutcome {
        report: SolveReport {
            stage,
            iterations,
            primal_residual: record.primal_residual,
            dual_residual: record.dual_residual,
            primal_threshold: thresholds.0,
            dual_threshold: thresholds.1,
            objective: record.objective,
            feasibility_violation: record.feasibility_violation,
            feas_tol,
            converged,
            refinement_failed: false,
            rank,
            nonzeros_d,
            rho_effective: rho,
            wall_time: 0.0,
        },
        decomposition: Decomposition { k, d },
        trace,
        merit,
        state,
    }
}

fn consensus(
    c: &Constraints,
    cfg: &SolverConfig,
    penalty: &Penalty,
    mut st: SolverState,
    feas_tol: f64,
    stage: Stage,
) -> Result<SolveOutcome> {
    let weight = cfg.constraint_weight;
    let system = ConsensusSystem::new(&c.op, weight)?;
    let rho = st.rho;
    let alpha = cfg.relaxation;
    let sqrt_size = problem_size(c).sqrt();
    let mut trace = Vec::new();
    let mut merit = Vec::new();
    let mut best: Option<Best> = None;

    let (mut b_meter, mut b_aggregate) = c.op.apply(&(&st.xk + &st.xd));
    let mut last = None;
    for iter in 1..=cfg.max_iters {
        let shrunk = shrink_singular_values(&(&st.xk - &st.u_k), 1.0 / rho, cfg.svd)?;
        let k = shrunk.value;
        let d = penalty.prox(&(&st.xd - &st.u_d), 1.0 / rho);
        let v_meter = c.clamp_meter(&(&b_meter + &st.u_meter));
        let v_aggregate = c.clamp_aggregate(&(&b_aggregate + &st.u_aggregate));

        let relax = |new: &Matrix, old: &Matrix| new * alpha + old * (1.0 - alpha);
        let k_hat = relax(&k, &st.xk);
        let d_hat = relax(&d, &st.xd);
        let vm_hat = relax(&v_meter, &b_meter);
        let va_hat = relax(&v_aggregate, &b_aggregate);

        let r_k = &k_hat + &st.u_k;
        let r_d = &d_hat + &st.u_d;
        let pulled = c.op.adjoint(&(&vm_hat - &st.u_meter), &(&va_hat - &st.u_aggregate));
        let s = system.solve(&(&r_k + &r_d + pulled * (2.0 * weight)));
        let split = &r_k - &r_d;
        let xk = (&s + &split) * 0.5;
        let xd = (&s - &split) * 0.5;
        let (nb_meter, nb_aggregate) = c.op.apply(&s);

        let du_k = &k_hat - &xk;
        let du_d = &d_hat - &xd;
        let du_meter = &nb_meter - &vm_hat;
        let du_aggregate = &nb_aggregate - &va_hat;

        let primal = ((&k - &xk).norm_squared()
            + (&d - &xd).norm_squared()
            + (&nb_meter - &v_meter).norm_squared()
            + (&nb_aggregate - &v_aggregate).norm_squared())
        .sqrt();
        let moved_kd = (&xk - &st.xk).norm_squared() + (&xd - &st.xd).norm_squared();
        let moved_b = (&nb_meter - &b_meter).norm_squared() + (&nb_aggregate - &b_aggregate).norm_squared();
        let dual = rho * (moved_kd + weight * weight * moved_b).sqrt();
        let dual_moved = du_k.norm_squared()
            + du_d.norm_squared()
            + weight * (du_meter.norm_squared() + du_aggregate.norm_squared());
        merit.push(rho * (moved_kd + weight * moved_b + dual_moved));

        st.u_k += du_k;
        st.u_d += du_d;
        st.u_meter += du_meter;
        st.u_aggregate += du_aggregate;
        st.xk = xk;
        st.xd = xd;
        b_meter = nb_meter;
        b_aggregate = nb_aggregate;

        let primal_scale = (k.norm_squared()
            + d.norm_squared()
            + v_meter.norm_squared()
            + v_aggregate.norm_squared())
        .max(st.xk.norm_squared() + st.xd.norm_squared() + b_meter.norm_squared() + b_aggregate.norm_squared())
        .sqrt();
        let dual_scale = rho
            * (st.u_k.norm_squared()
                + st.u_d.norm_squared()
                + weight * weight * (st.u_meter.norm_squared() + st.u_aggregate.norm_squared()))
            .sqrt();
        let thresholds = Thresholds {
            primal: cfg.eps_abs * sqrt_size + cfg.eps_rel * primal_scale,
            dual: cfg.eps_abs * sqrt_size + cfg.eps_rel * dual_scale,
            feasibility: feas_tol,
        };
        let violation = c.violation(&(&k + &d));
        let record = TraceRecord {
            iteration: iter,
            objective: shrunk.nuclear_norm + penalty.value(&d),
            primal_residual: primal,
            dual_residual: dual,
            feasibility_violation: violation,
        };
        trace.push(record);
        let pair = (thresholds.primal, thresholds.dual);
        st.k = k;
        st.d = d;

        if thresholds.met(primal, dual, violation) {
            let current = (st.k.clone(), st.d.clone(), record, shrunk.rank, pair);
            return Ok(finish(stage, iter, true, None, current, feas_tol, rho, trace, merit, st));
        }
        let score = thresholds.score(primal, dual, violation);
        if best.as_ref().is_none_or(|b| score < b.score) {
            best = Some(Best {
                score,
                k: st.k.clone(),
                d: st.d.clone(),
                record,
                rank: shrunk.rank,
                thresholds: pair,
            });
        }
        last = Some((record, shrunk.rank, pair));
    }
    let (record, rank, pair) = last.expect("at least one iteration");
    let current = (st.k.clone(), st.d.clone(), record, rank, pair);
    Ok(finish(stage, cfg.max_iters, false, best, current, feas_tol, rho, trace, merit, st))
}

/// Squared operator norm of `(K, D) -> B(K + D)`, i.e. `2 ||B||^2`.
fn stacked_norm_squared(op: &MeasurementOperator, nodes: usize, horizon: usize, cfg: &SolverConfig) -> f64 {
    let coarse = op.averaging().coarse_len();
    let sensors = op.aggregation_map().nrows();
    let meter_len = nodes * coarse;
    let forward = |x: &Matrix| {
        let (m, a) = op.apply(x);
        Matrix::from_iterator(meter_len + a.len(), 1, m.iter().chain(a.iter()).copied())
    };
    let adjoint = |y: &Matrix| {
        let m = Matrix::from_column_slice(nodes, coarse, &y.as_slice()[..meter_len]);
        let a = Matrix::from_column_slice(sensors, horizon, &y.as_slice()[meter_len..]);
        op.adjoint(&m, &a)
    };
    let norm = estimate_operator_norm(nodes, horizon, forward, adjoint, cfg.power_iters, cfg.power_seed);
    2.0 * norm * norm
}

fn linearized(
    c: &Constraints,
    cfg: &SolverConfig,
    penalty: &Penalty,
    mut st: SolverState,
    feas_tol: f64,
    stage: Stage,
) -> Result<SolveOutcome> {
    let (nodes, horizon) = st.k.shape();
    let rho = st.rho;
    let norm_sq = stacked_norm_squared(&c.op, nodes, horizon, cfg);
    let tau = cfg.step_scale / (rho * norm_sq.max(f64::MIN_POSITIVE));
    let sqrt_size = problem_size(c).sqrt();
    let mut trace = Vec::new();
    let mut merit = Vec::new();
    let mut best: Option<Best> = None;
    let mut last = None;

    let (mut b_meter, mut b_aggregate) = c.op.apply(&(&st.k + &st.d));
    let mut v_meter = c.clamp_meter(&(&b_meter + &st.u_meter));
    let mut v_aggregate = c.clamp_aggregate(&(&b_aggregate + &st.u_aggregate));
    for iter in 1..=cfg.max_iters {
        let grad = c.op.adjoint(
            &(&b_meter - &v_meter + &st.u_meter),
            &(&b_aggregate - &v_aggregate + &st.u_aggregate),
        ) * rho;
        let shrunk = shrink_singular_values(&(&st.k - &grad * tau), tau, cfg.svd)?;
        let k = shrunk.value;
        let d = penalty.prox(&(&st.d - &grad * tau), tau);
        let (nb_meter, nb_aggregate) = c.op.apply(&(&k + &d));
        let nv_meter = c.clamp_meter(&(&nb_meter + &st.u_meter));
        let nv_aggregate = c.clamp_aggregate(&(&nb_aggregate + &st.u_aggregate));
        let du_meter = &nb_meter - &nv_meter;
        let du_aggregate = &nb_aggregate - &nv_aggregate;

        let primal = (du_meter.norm_squared() + du_aggregate.norm_squared()).sqrt();
        let moved = (&k - &st.k).norm_squared() + (&d - &st.d).norm_squared();
        let dual = moved.sqrt() / tau;
        merit.push(moved / tau + rho * (du_meter.norm_squared() + du_aggregate.norm_squared()));

        st.u_meter += du_meter;
        st.u_aggregate += du_aggregate;
        st.k = k;
        st.d = d;
        st.xk = st.k.clone();
        st.xd = st.d.clone();
        b_meter = nb_meter;
        b_aggregate = nb_aggregate;
        v_meter = nv_meter;
        v_aggregate = nv_aggregate;

        let primal_scale = (b_meter.norm_squared() + b_aggregate.norm_squared())
            .max(v_meter.norm_squared() + v_aggregate.norm_squared())
            .sqrt();
        let dual_scale = rho * (st.u_meter.norm_squared() + st.u_aggregate.norm_squared()).sqrt();
        let thresholds = Thresholds {
            primal: cfg.eps_abs * sqrt_size + cfg.eps_rel * primal_scale,
            dual: cfg.eps_abs * sqrt_size + cfg.eps_rel * dual_scale,
            feasibility: feas_tol,
        };
        let violation = c.violation(&(&st.k + &st.d));
        let record = TraceRecord {
            iteration: iter,
            objective: shrunk.nuclear_norm + penalty.value(&st.d),
            primal_residual: primal,
            dual_residual: dual,
            feasibility_violation: violation,
        };
        trace.push(record);
        let pair = (thresholds.primal, thresholds.dual);
        if thresholds.met(primal, dual, violation) {
            let current = (st.k.clone(), st.d.clone(), record, shrunk.rank, pair);
            return Ok(finish(stage, iter, true, None, current, feas_tol, rho, trace, merit, st));
        }
        let score = thresholds.score(primal, dual, violation);
        if best.as_ref().is_none_or(|b| score < b.score) {
            best = Some(Best {
                score,
                k: st.k.clone(),
                d: st.d.clone(),
                record,
                rank: shrunk.rank,
                thresholds: pair,
            });
        }
        last = Some((record, shrunk.rank, pair));
    }
    let (record, rank, pair) = last.expect("at least one iteration");
    let current = (st.k.clone(), st.d.clone(), record, rank, pair);
    Ok(finish(stage, cfg.max_iters, false, best, current, feas_tol, rho, trace, merit, st))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{simulate_measurements, LoadMatrix, NoiseSpec};

    #[test]
    fn lambda_rule() {
        assert_eq!(default_lambda(420), 0.05);
        assert!((default_lambda(4 * 420) - 0.025).abs() < 1e-15);
        assert_eq!(default_lambda(1), LAMBDA_CONSTANT);
        assert!((LAMBDA_CONSTANT - 0.05 * 420f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn support_extraction() {
        let cfg = SolverConfig::default();
        assert!(extract_support(&Matrix::zeros(3, 4), &cfg).is_empty());
        let mut d = Matrix::from_element(3, 4, 1e-6);
        d[(1, 2)] = 3.3;
        let s = extract_support(&d, &cfg);
        assert_eq!(s.iter().collect::<Vec<_>>(), vec![(1, 2)]);
        assert!(SupportSet::new(2, 2, [(2, 0)]).is_err());
        assert_eq!(SupportSet::full(2, 3).len(), 6);
    }

    #[test]
    fn config_validation() {
        let bad = |f: fn(&mut SolverConfig)| {
            let mut c = SolverConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(SolverConfig::default().validate().is_ok());
        assert!(bad(|c| c.lambda = 0.0));
        assert!(bad(|c| c.step_scale = 1.5));
        assert!(bad(|c| c.relaxation = 2.0));
        assert!(bad(|c| c.max_iters = 0));
        assert!(bad(|c| c.feas_tol = Some(-1.0)));
    }

    #[test]
    fn consensus_system_inverts_normal_operator() {
        let p = LoadMatrix::from_values(Matrix::from_fn(4, 30, |i, j| (i * 7 + j) as f64 * 0.1)).unwrap();
        let ms = simulate_measurements(&p, 15, &NoiseSpec::noiseless()).unwrap();
        let op = ms.measurement_operator();
        let system = ConsensusSystem::new(&op, 1.5).unwrap();
        let rhs = Matrix::from_fn(4, 30, |i, j| ((i * 31 + j * 7) % 11) as f64 - 5.0);
        let s = system.solve(&rhs);
        let (m, a) = op.apply(&s);
        let lhs = &s + op.adjoint(&m, &a) * 3.0;
        assert!((lhs - rhs).amax() < 1e-10);
    }
}
