//! Recovery quality: event detection, ROC sweeps, PV pattern alignment,
//! matrix errors and recoverability diagnostics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{singular_values, thin_svd};
use crate::transforms::{apply_diff, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Start,
    Stop,
}

impl Direction {
    pub fn sign(self) -> f64 {
        match self {
            Direction::Start => 1.0,
            Direction::Stop => -1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Start => "start",
            Direction::Stop => "stop",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Ev,
    Hvac,
    Other,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Ev => "ev",
            EventKind::Hvac => "hvac",
            EventKind::Other => "other",
        }
    }
}

/// An on or off transition. `minute` is 1-based: minute `m` is column
/// `m - 1` of the load matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub house: usize,
    pub minute: usize,
    pub magnitude_kw: f64,
    pub direction: Direction,
    pub kind: EventKind,
    /// A stop placed at the horizon because the appliance was still on; it
    /// has no counterpart in the differenced matrix.
    #[serde(default)]
    pub truncated: bool,
}

impl Event {
    pub fn slot(&self) -> usize {
        self.minute - 1
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EventSet {
    pub events: Vec<Event>,
}

impl EventSet {
    pub fn new(mut events: Vec<Event>) -> Self {
        sort_events(&mut events);
        Self { events }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Event> {
        self.events.iter()
    }

    pub fn of_kind(&self, kind: EventKind) -> EventSet {
        EventSet {
            events: self.events.iter().filter(|e| e.kind == kind).cloned().collect(),
        }
    }

    /// Events visible in the differenced matrix.
    pub fn observable(&self) -> EventSet {
        EventSet {
            events: self.events.iter().filter(|e| !e.truncated).cloned().collect(),
        }
    }

    /// Checks minute range and positive magnitudes for an `nodes x horizon`
    /// matrix.
    pub fn validate(&self, nodes: usize, horizon: usize) -> Result<()> {
        for e in &self.events {
            if e.house >= nodes || e.minute == 0 || e.minute > horizon {
                return Err(Error::InvalidParameter(format!(
                    "event at house {} minute {} outside {nodes}x{horizon}",
                    e.house, e.minute
                )));
            }
            if !(e.magnitude_kw > 0.0) || !e.magnitude_kw.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "event magnitude must be positive, got {}",
                    e.magnitude_kw
                )));
            }
        }
        Ok(())
    }
}

fn sort_events(events: &mut [Event]) {
    events.sort_by(|a, b| {
        (a.house, a.minute, a.direction, a.kind)
            .cmp(&(b.house, b.minute, b.direction, b.kind))
            .then(a.magnitude_kw.total_cmp(&b.magnitude_kw))
    });
}

/// Entries with `|d| > threshold_frac * rating_kw`, signed into starts and
/// stops. Within one house and direction, detections closer than
/// `min_gap_min` minutes are merged onto the largest one (greedy by
/// magnitude, so raising the threshold only ever removes detections).
pub fn detect_events(
    d_hat: &Matrix,
    rating_kw: f64,
    threshold_frac: f64,
    min_gap_min: usize,
) -> Result<EventSet> {
    if !(rating_kw > 0.0) {
        return Err(Error::InvalidParameter(format!("rating must be positive, got {rating_kw}")));
    }
    if !(threshold_frac > 0.0 && threshold_frac <= 2.0) {
        return Err(Error::InvalidParameter(format!(
            "threshold fraction must lie in (0, 2], got {threshold_frac}"
        )));
    }
    let threshold = threshold_frac * rating_kw;
    let mut events = Vec::new();
    for house in 0..d_hat.nrows() {
        for direction in [Direction::Start, Direction::Stop] {
            let mut candidates: Vec<(usize, f64)> = (0..d_hat.ncols())
                .filter_map(|t| {
                    let v = d_hat[(house, t)] * direction.sign();
                    (v > threshold).then_some((t, v))
                })
                .collect();
            candidates.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            let mut kept: Vec<(usize, f64)> = Vec::new();
            for (t, v) in candidates {
                if kept.iter().all(|&(s, _)| t.abs_diff(s) > min_gap_min) {
                    kept.push((t, v));
                }
            }
            events.extend(kept.into_iter().map(|(t, v)| Event {
                house,
                minute: t + 1,
                magnitude_kw: v,
                direction,
                kind: EventKind::Other,
                truncated: false,
            }));
        }
    }
    Ok(EventSet::new(events))
}

/// Number of truth events matched one-to-one by `detected`: candidate pairs
/// share house and direction and lie within `window` minutes; pairs are
/// taken greedily by increasing time offset.
pub fn match_events(detected: &EventSet, truth: &EventSet, window: usize) -> usize {
    let mut pairs = Vec::new();
    for (i, d) in detected.events.iter().enumerate() {
        for (j, t) in truth.events.iter().enumerate() {
            let gap = d.minute.abs_diff(t.minute);
            if d.house == t.house && d.direction == t.direction && gap <= window {
                pairs.push((gap, j, i));
            }
        }
    }
    pairs.sort_unstable();
    let mut used_d = vec![false; detected.len()];
    let mut used_t = vec![false; truth.len()];
    let mut matched = 0;
    for (_, j, i) in pairs {
        if !used_d[i] && !used_t[j] {
            used_d[i] = true;
            used_t[j] = true;
            matched += 1;
        }
    }
    matched
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold_fraction: f64,
    pub tp_rate: f64,
    pub fp_rate: f64,
    pub detections: usize,
    pub matched: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// ROC over a threshold sweep. `negatives` is the number of non-event
/// slots used as false-positive denominator, normally `N * T - |truth|`.
pub fn roc(
    sweep: &[(f64, EventSet)],
    truth: &EventSet,
    match_window_min: usize,
    negatives: usize,
) -> Result<RocCurve> {
    if truth.is_empty() {
        return Err(Error::Evaluation("ROC needs at least one truth event".into()));
    }
    if negatives == 0 {
        return Err(Error::Evaluation("ROC needs a positive false-positive denominator".into()));
    }
    if sweep.windows(2).any(|w| !(w[0].0 < w[1].0)) {
        return Err(Error::InvalidParameter("thresholds must be strictly increasing".into()));
    }
    let points: Vec<RocPoint> = sweep
        .iter()
        .map(|(threshold, detected)| {
            let matched = match_events(detected, truth, match_window_min);
            RocPoint {
                threshold_fraction: *threshold,
                tp_rate: matched as f64 / truth.len() as f64,
                fp_rate: ((detected.len() - matched) as f64 / negatives as f64).min(1.0),
                detections: detected.len(),
                matched,
            }
        })
        .collect();
    let auc = area_under(&points);
    Ok(RocCurve { points, auc })
}

/// Trapezoid area through `(0, 0)`, the points ordered by false-positive
/// rate, and `(1, 1)`.
fn area_under(points: &[RocPoint]) -> f64 {
    let mut xy: Vec<(f64, f64)> = points.iter().map(|p| (p.fp_rate, p.tp_rate)).collect();
    xy.push((0.0, 0.0));
    xy.push((1.0, 1.0));
    xy.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    xy.windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

/// Detections at each threshold fraction, for [`roc`].
pub fn threshold_sweep(
    d_hat: &Matrix,
    rating_kw: f64,
    fractions: &[f64],
    min_gap_min: usize,
) -> Result<Vec<(f64, EventSet)>> {
    fractions
        .iter()
        .map(|&f| Ok((f, detect_events(d_hat, rating_kw, f, min_gap_min)?)))
        .collect()
}

/// Settings for scoring detected changes against typed truth events.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RocOptions {
    /// Appliance rating the threshold fractions refer to.
    pub rating_kw: f64,
    /// Strictly increasing threshold fractions.
    pub fractions: Vec<f64>,
    pub match_window_min: usize,
    pub min_gap_min: usize,
    /// Restrict the truth to one kind; `None` scores every kind.
    pub kind: Option<EventKind>,
}

impl Default for RocOptions {
    fn default() -> Self {
        Self {
            rating_kw: 3.3,
            fractions: (1..=40).map(|i| i as f64 * 0.05).collect(),
            match_window_min: 2,
            min_gap_min: 5,
            kind: Some(EventKind::Ev),
        }
    }
}

/// ROC of `d_hat` against the observable truth events selected by `opts`.
pub fn event_roc(d_hat: &Matrix, truth: &EventSet, opts: &RocOptions) -> Result<RocCurve> {
    let truth = match opts.kind {
        Some(kind) => truth.of_kind(kind),
        None => truth.clone(),
    }
    .observable();
    let slots = d_hat.nrows() * d_hat.ncols();
    let sweep = threshold_sweep(d_hat, opts.rating_kw, &opts.fractions, opts.min_gap_min)?;
    roc(&sweep, &truth, opts.match_window_min, slots.saturating_sub(truth.len()))
}

/// First right singular vector of a load-domain matrix, sign-fixed so its
/// largest entry is positive.
pub fn leading_right_singular_vector(m: &Matrix) -> Result<Vec<f64>> {
    if m.is_empty() || m.amax() == 0.0 {
        return Err(Error::Evaluation("matrix is zero".into()));
    }
    let svd = thin_svd(m)?;
    let mut v: Vec<f64> = svd.v_t.row(0).iter().copied().collect();
    let (peak, _) = v.iter().enumerate().fold((0, 0.0f64), |acc, (i, &x)| {
        if x.abs() > acc.1 {
            (i, x.abs())
        } else {
            acc
        }
    });
    if v[peak] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    Ok(v)
}

/// `|cos|` between the leading right singular vector of `l_hat` (load
/// domain) and `pv_truth`.
pub fn pattern_recovery_score(l_hat: &Matrix, pv_truth: &[f64]) -> Result<f64> {
    if pv_truth.len() != l_hat.ncols() {
        return Err(Error::shape("PV profile", (1, l_hat.ncols()), (1, pv_truth.len())));
    }
    let norm = pv_truth.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::Evaluation("PV profile is zero".into()));
    }
    let v = leading_right_singular_vector(l_hat)?;
    let dot: f64 = v.iter().zip(pv_truth).map(|(a, b)| a * b).sum();
    Ok((dot / norm).abs().min(1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatrixMetrics {
    pub rel_error_p: f64,
    pub rel_error_l: f64,
    pub rel_error_d: f64,
    pub support_precision: f64,
    pub support_recall: f64,
    pub rank_l: usize,
}

/// `||a - b||_F / ||b||_F`, or the absolute error when `b = 0`.
pub fn relative_error(a: &Matrix, b: &Matrix) -> f64 {
    let diff = (a - b).norm();
    let base = b.norm();
    if base > 0.0 {
        diff / base
    } else {
        diff
    }
}

/// Sum of squared differences between consecutive columns.
pub fn high_frequency_energy(m: &Matrix) -> f64 {
    (1..m.ncols())
        .map(|t| (m.column(t) - m.column(t - 1)).norm_squared())
        .sum()
}

/// Count of singular values above `rel_tol * sigma_1`; 0 for empty or
/// non-finite input.
pub fn numerical_rank(m: &Matrix, rel_tol: f64) -> usize {
    let Ok(sv) = singular_values(m) else {
        return 0;
    };
    let top = sv.first().copied().unwrap_or(0.0);
    if top == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * top).count()
}

/// Errors of the load, low-rank and change matrices, and support agreement
/// of `d_hat` (entries above `support_tol`) with the nonzeros of `d_true`.
pub fn matrix_metrics(
    p_hat: &Matrix,
    p_true: &Matrix,
    l_hat: &Matrix,
    l_true: &Matrix,
    d_hat: &Matrix,
    d_true: &Matrix,
    support_tol: f64,
) -> Result<MatrixMetrics> {
    let shape = p_true.shape();
    for (name, m) in [("P estimate", p_hat), ("L estimate", l_hat), ("L truth", l_true), ("D estimate", d_hat), ("D truth", d_true)] {
        if m.shape() != shape {
            return Err(Error::shape(name, shape, m.shape()));
        }
    }
    let mut both = 0usize;
    let mut claimed = 0usize;
    let mut planted = 0usize;
    for (h, t) in d_hat.iter().zip(d_true.iter()) {
        let est = h.abs() > support_tol;
        let tru = *t != 0.0;
        claimed += est as usize;
        planted += tru as usize;
        both += (est && tru) as usize;
    }
    let ratio = |num: usize, den: usize| if den == 0 { 1.0 } else { num as f64 / den as f64 };
    Ok(MatrixMetrics {
        rel_error_p: relative_error(p_hat, p_true),
        rel_error_l: relative_error(l_hat, l_true),
        rel_error_d: relative_error(d_hat, d_true),
        support_precision: ratio(both, claimed),
        support_recall: ratio(both, planted),
        rank_l: numerical_rank(l_hat, 1e-6),
    })
}

/// Pooled autocorrelation of a 0/1 indicator matrix along time: rows are
/// centered by the global mean and correlated with their own lagged copy.
/// Returns the largest value over lags `min_lag..=T/2` and its lag.
pub fn autocorrelation_peak(indicator: &Matrix, min_lag: usize) -> (f64, usize) {
    let horizon = indicator.ncols();
    let mean = indicator.mean();
    let centered = indicator.map(|v| v - mean);
    let energy = centered.norm_squared();
    if energy == 0.0 {
        return (0.0, 0);
    }
    let mut best = (f64::NEG_INFINITY, 0);
    for lag in min_lag.max(1)..=horizon / 2 {
        let mut acc = 0.0;
        for n in 0..centered.nrows() {
            for t in 0..horizon - lag {
                acc += centered[(n, t)] * centered[(n, t + lag)];
            }
        }
        let r = acc / energy;
        if r > best.0 {
            best = (r, lag);
        }
    }
    if best.0 == f64::NEG_INFINITY {
        (0.0, 0)
    } else {
        best
    }
}

/// 1 where `d` is nonzero.
pub fn support_indicator(d: &Matrix) -> Matrix {
    d.map(|v| if v != 0.0 { 1.0 } else { 0.0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionDiagnostics {
    /// `max_ij U_ij^2 * N` over the left singular vectors of `L W`, in
    /// `[1, N]`.
    pub row_coherence: f64,
    /// `max_ij V_ij^2 * T` over the right singular vectors of `L W`, in
    /// `[1, T]`.
    pub column_coherence: f64,
    /// Largest squared entry of either set of singular vectors, in
    /// `[1 / max(N, T), 1]`.
    pub relative_coherence: f64,
    pub low_rank: usize,
    pub autocorrelation_peak: f64,
    pub autocorrelation_lag: usize,
    pub sparse_rank: usize,
}

/// Advisory recoverability indicators for a planted low-rank matrix
/// `l_true` and change matrix `d_true`.
pub fn condition_diagnostics(l_true: &Matrix, d_true: &Matrix) -> Result<ConditionDiagnostics> {
    if l_true.shape() != d_true.shape() {
        return Err(Error::shape("condition diagnostics", l_true.shape(), d_true.shape()));
    }
    let k = apply_diff(l_true);
    let rank = numerical_rank(&k, 1e-9);
    let (mut row, mut col) = (0.0f64, 0.0f64);
    if rank > 0 {
        let svd = thin_svd(&k)?;
        for i in 0..rank {
            row = row.max(svd.u.column(i).iter().map(|x| x * x).fold(0.0, f64::max));
            col = col.max(svd.v_t.row(i).iter().map(|x| x * x).fold(0.0, f64::max));
        }
    }
    let (peak, lag) = autocorrelation_peak(&support_indicator(d_true), 5);
    Ok(ConditionDiagnostics {
        row_coherence: row * k.nrows() as f64,
        column_coherence: col * k.ncols() as f64,
        relative_coherence: row.max(col),
        low_rank: rank,
        autocorrelation_peak: peak,
        autocorrelation_lag: lag,
        sparse_rank: numerical_rank(d_true, 1e-9),
    })
}
