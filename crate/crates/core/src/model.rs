//! Measurement models and the data types shared across the pipeline.
//!
//! The unknown load matrix `P` (`N` houses by `T` minutes) is observed through
//! two linear channels:
//!
//! * smart meters: `Y = P A + E_Y`, one `T/r`-interval average per house;
//! * a feeder sensor: `z^T = C P + e_z^T`, by default `C = 1^T` (a single
//!   sensor summing all houses).
//!
//! Recovery works in the differenced domain `X = P W = K + D`, so the
//! aggregate constraint is written on `z^T W` and its bound is transported
//! through `|W|`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transforms::{
    adjoint_cumsum, apply_cumsum, apply_diff, AveragingOperator, Matrix,
};

/// Position of the first slot and slot length, in minutes since midnight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeAxis {
    pub start_minute: u32,
    pub slot_minutes: u32,
}

impl Default for TimeAxis {
    fn default() -> Self {
        Self {
            start_minute: 0,
            slot_minutes: 1,
        }
    }
}

impl TimeAxis {
    /// `HH:MM` label of slot `t` (0-based). Hours keep counting past 24.
    pub fn label(&self, t: usize) -> String {
        let minute = self.start_minute as usize + t * self.slot_minutes as usize;
        format!("{:02}:{:02}", minute / 60, minute % 60)
    }
}

/// Active power per house and time slot, in kW. Negative entries are net
/// export (PV).
#[derive(Debug, Clone, PartialEq)]
pub struct LoadMatrix {
    values: Matrix,
    node_ids: Vec<String>,
    time: TimeAxis,
}

impl LoadMatrix {
    pub fn new(values: Matrix, node_ids: Vec<String>, time: TimeAxis) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::InvalidParameter(
                "load matrix needs at least one node and one slot".into(),
            ));
        }
        if node_ids.len() != values.nrows() {
            return Err(Error::InvalidParameter(format!(
                "{} node ids for {} rows",
                node_ids.len(),
                values.nrows()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("load matrix"));
        }
        Ok(Self {
            values,
            node_ids,
            time,
        })
    }

    /// Wraps a matrix with default labels `house-01, house-02, ...` and a
    /// one-minute axis starting at midnight.
    pub fn from_values(values: Matrix) -> Result<Self> {
        let ids = default_node_ids(values.nrows());
        Self::new(values, ids, TimeAxis::default())
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn into_values(self) -> Matrix {
        self.values
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    pub fn time(&self) -> TimeAxis {
        self.time
    }

    pub fn nodes(&self) -> usize {
        self.values.nrows()
    }

    pub fn horizon(&self) -> usize {
        self.values.ncols()
    }

    pub fn with_time(mut self, time: TimeAxis) -> Self {
        self.time = time;
        self
    }
}

pub fn default_node_ids(n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("house-{i:02}")).collect()
}

/// Instrument accuracies used to perturb and bound the measurements.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    /// Smart-meter accuracy as a fraction (0.002 is +-0.2 %).
    pub meter_accuracy: f64,
    /// Feeder-sensor active power accuracy as a fraction (0.0002 is +-0.02 %).
    pub pmu_accuracy: f64,
    pub seed: u64,
    /// Multiplier on the calibrated bounds; must be at least 1. Noise is
    /// proportional to the clean value while bounds are proportional to the
    /// measured one, and `1 / (1 - meter_accuracy)` covers the difference.
    pub bound_slack: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            meter_accuracy: 0.002,
            pmu_accuracy: 0.0002,
            seed: 0,
            bound_slack: 1.01,
        }
    }
}

impl NoiseSpec {
    pub fn noiseless() -> Self {
        Self {
            meter_accuracy: 0.0,
            pmu_accuracy: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, a) in [
            ("meter_accuracy", self.meter_accuracy),
            ("pmu_accuracy", self.pmu_accuracy),
        ] {
            if !(0.0..=0.1).contains(&a) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must lie in [0, 0.1], got {a}"
                )));
            }
        }
        if !(self.bound_slack >= 1.0) || !self.bound_slack.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "bound_slack must be >= 1, got {}",
                self.bound_slack
            )));
        }
        Ok(())
    }
}

/// Smart-meter and feeder observations plus their entrywise error bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementSet {
    meter: Matrix,
    aggregate: Matrix,
    meter_bounds: Matrix,
    aggregate_bounds: Matrix,
    factor: usize,
    aggregation_map: Matrix,
}

impl MeasurementSet {
    /// `meter` is `N x T/r`; `aggregate` holds one row of `T` raw readings
    /// per feeder sensor; `aggregate_bounds` applies to the differenced
    /// aggregate `z^T W`; `aggregation_map` is `sensors x N`.
    pub fn new(
        meter: Matrix,
        aggregate: Matrix,
        meter_bounds: Matrix,
        aggregate_bounds: Matrix,
        factor: usize,
        aggregation_map: Matrix,
    ) -> Result<Self> {
        let horizon = aggregate.ncols();
        let averaging = AveragingOperator::new(horizon, factor)?;
        let nodes = meter.nrows();
        if nodes == 0 {
            return Err(Error::InvalidParameter("no meter rows".into()));
        }
        if meter.ncols() != averaging.coarse_len() {
            return Err(Error::shape(
                "meter matrix",
                (nodes, averaging.coarse_len()),
                meter.shape(),
            ));
        }
        if meter_bounds.shape() != meter.shape() {
            return Err(Error::shape("meter bounds", meter.shape(), meter_bounds.shape()));
        }
        if aggregate_bounds.shape() != aggregate.shape() {
            return Err(Error::shape(
                "aggregate bounds",
                aggregate.shape(),
                aggregate_bounds.shape(),
            ));
        }
        if aggregation_map.shape() != (aggregate.nrows(), nodes) {
            return Err(Error::shape(
                "aggregation map",
                (aggregate.nrows(), nodes),
                aggregation_map.shape(),
            ));
        }
        for (name, m) in [
            ("meter matrix", &meter),
            ("aggregate", &aggregate),
            ("meter bounds", &meter_bounds),
            ("aggregate bounds", &aggregate_bounds),
            ("aggregation map", &aggregation_map),
        ] {
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(name));
            }
        }
        if meter_bounds.iter().chain(aggregate_bounds.iter()).any(|&b| b < 0.0) {
            return Err(Error::InvalidParameter(
                "error bounds must be nonnegative".into(),
            ));
        }
        if aggregation_map.iter().any(|&c| c < 0.0) {
            return Err(Error::InvalidParameter(
                "aggregation map must be nonnegative".into(),
            ));
        }
        Ok(Self {
            meter,
            aggregate,
            meter_bounds,
            aggregate_bounds,
            factor,
            aggregation_map,
        })
    }

    pub fn meter(&self) -> &Matrix {
        &self.meter
    }

    pub fn aggregate(&self) -> &Matrix {
        &self.aggregate
    }

    pub fn meter_bounds(&self) -> &Matrix {
        &self.meter_bounds
    }

    pub fn aggregate_bounds(&self) -> &Matrix {
        &self.aggregate_bounds
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    pub fn aggregation_map(&self) -> &Matrix {
        &self.aggregation_map
    }

    pub fn nodes(&self) -> usize {
        self.meter.nrows()
    }

    pub fn horizon(&self) -> usize {
        self.aggregate.ncols()
    }

    pub fn sensors(&self) -> usize {
        self.aggregate.nrows()
    }

    pub fn averaging(&self) -> AveragingOperator {
        AveragingOperator::new(self.horizon(), self.factor).expect("validated at construction")
    }

    /// `z^T W`, the aggregate in the differenced domain.
    pub fn differenced_aggregate(&self) -> Matrix {
        apply_diff(&self.aggregate)
    }

    /// Typical magnitude of one meter reading: the mean of `|Y|`, falling
    /// back to the largest differenced aggregate per house, then to 1.
    pub fn data_scale(&self) -> f64 {
        let mean = self.meter.iter().map(|v| v.abs()).sum::<f64>() / self.meter.len() as f64;
        if mean > 0.0 {
            return mean;
        }
        let agg = self.differenced_aggregate().amax() / self.nodes() as f64;
        if agg > 0.0 {
            agg
        } else {
            1.0
        }
    }

    /// Largest absolute value among the constraint centers `Y` and `z^T W`.
    pub fn measurement_scale(&self) -> f64 {
        self.meter.amax().max(self.differenced_aggregate().amax())
    }

    /// Multiplies readings and bounds by `c > 0`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        if !(c > 0.0) || !c.is_finite() {
            return Err(Error::InvalidParameter(format!("scale must be positive, got {c}")));
        }
        Self::new(
            &self.meter * c,
            &self.aggregate * c,
            &self.meter_bounds * c,
            &self.aggregate_bounds * c,
            self.factor,
            self.aggregation_map.clone(),
        )
    }

    pub fn measurement_operator(&self) -> MeasurementOperator {
        MeasurementOperator {
            averaging: self.averaging(),
            aggregation_map: self.aggregation_map.clone(),
        }
    }
}

/// The stacked linear image `X -> (X U A, C X)` of a differenced-domain
/// matrix, with its adjoint.
#[derive(Debug, Clone)]
pub struct MeasurementOperator {
    averaging: AveragingOperator,
    aggregation_map: Matrix,
}

impl MeasurementOperator {
    pub fn averaging(&self) -> &AveragingOperator {
        &self.averaging
    }

    pub fn aggregation_map(&self) -> &Matrix {
        &self.aggregation_map
    }

    pub fn apply(&self, x: &Matrix) -> (Matrix, Matrix) {
        let meter = self
            .averaging
            .apply(&apply_cumsum(x))
            .expect("differenced matrix has the operator horizon");
        let aggregate = &self.aggregation_map * x;
        (meter, aggregate)
    }

    pub fn adjoint(&self, meter: &Matrix, aggregate: &Matrix) -> Matrix {
        let spread = self
            .averaging
            .adjoint(meter)
            .expect("meter matrix has the operator width");
        let mut out = adjoint_cumsum(&spread);
        out.gemm_tr(1.0, &self.aggregation_map, aggregate, 1.0);
        out
    }
}

/// Low-rank plus sparse-change split in the differenced domain.
///
/// Only `K` and `D` are stored; everything else is derived on demand:
/// `L = K U`, `S = D U`, `X = K + D`, `P = (K + D) U`.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub k: Matrix,
    pub d: Matrix,
}

impl Decomposition {
    pub fn new(k: Matrix, d: Matrix) -> Result<Self> {
        if k.shape() != d.shape() {
            return Err(Error::shape("decomposition", k.shape(), d.shape()));
        }
        Ok(Self { k, d })
    }

    pub fn zeros(nodes: usize, horizon: usize) -> Self {
        Self {
            k: Matrix::zeros(nodes, horizon),
            d: Matrix::zeros(nodes, horizon),
        }
    }

    /// The trivial split `K = P W`, `D = 0`.
    pub fn from_load(p: &Matrix) -> Self {
        Self {
            k: apply_diff(p),
            d: Matrix::zeros(p.nrows(), p.ncols()),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.k.shape()
    }

    pub fn transformed(&self) -> Matrix {
        &self.k + &self.d
    }

    pub fn low_rank(&self) -> Matrix {
        apply_cumsum(&self.k)
    }

    pub fn sparse(&self) -> Matrix {
        apply_cumsum(&self.d)
    }

    pub fn load(&self) -> Matrix {
        apply_cumsum(&self.transformed())
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            k: &self.k * c,
            d: &self.d * c,
        }
    }
}

/// `(K + D) U` labelled with the given node ids and time axis.
pub fn compose_estimate(
    dec: &Decomposition,
    node_ids: Vec<String>,
    time: TimeAxis,
) -> Result<LoadMatrix> {
    LoadMatrix::new(dec.load(), node_ids, time)
}

/// Draws noisy smart-meter and single-sensor aggregate readings from `p` and
/// calibrates their bounds. Deterministic in `noise.seed`.
pub fn simulate_measurements(
    p: &LoadMatrix,
    factor: usize,
    noise: &NoiseSpec,
) -> Result<MeasurementSet> {
    let map = Matrix::from_element(1, p.nodes(), 1.0);
    simulate_measurements_with_map(p, factor, noise, map)
}

/// As [`simulate_measurements`] with an explicit `sensors x N` aggregation map.
pub fn simulate_measurements_with_map(
    p: &LoadMatrix,
    factor: usize,
    noise: &NoiseSpec,
    aggregation_map: Matrix,
) -> Result<MeasurementSet> {
    noise.validate()?;
    let averaging = AveragingOperator::new(p.horizon(), factor)?;
    if aggregation_map.ncols() != p.nodes() || aggregation_map.nrows() == 0 {
        return Err(Error::shape(
            "aggregation map",
            (aggregation_map.nrows().max(1), p.nodes()),
            aggregation_map.shape(),
        ));
    }

    let mut meter = averaging.apply(p.values())?;
    let mut meter_rng = ChaCha8Rng::seed_from_u64(noise.seed);
    meter_rng.set_stream(1);
    perturb(&mut meter, noise.meter_accuracy, &mut meter_rng);

    let mut aggregate = &aggregation_map * p.values();
    let mut pmu_rng = ChaCha8Rng::seed_from_u64(noise.seed);
    pmu_rng.set_stream(2);
    perturb(&mut aggregate, noise.pmu_accuracy, &mut pmu_rng);

    let (meter_bounds, aggregate_bounds) =
        calibrate_bounds(&meter, &aggregate, noise, noise.bound_slack)?;
    MeasurementSet::new(
        meter,
        aggregate,
        meter_bounds,
        aggregate_bounds,
        factor,
        aggregation_map,
    )
}

/// Entrywise `v <- v + a |v| u`, `u ~ Uniform[-1, 1]`.
fn perturb(m: &mut Matrix, accuracy: f64, rng: &mut ChaCha8Rng) {
    if accuracy == 0.0 {
        return;
    }
    for v in m.iter_mut() {
        let u: f64 = rng.random_range(-1.0..=1.0);
        *v += accuracy * v.abs() * u;
    }
}

/// Bounds proportional to what the operator measured:
/// `Xi_y = slack * a_m * |Y|` and `xi_z = slack * a_p * |z|^T |W|`, i.e.
/// `slack * a_p * (|z_t| + |z_{t-1}|)` with the first slot using `|z_1|` only.
pub fn calibrate_bounds(
    meter: &Matrix,
    aggregate: &Matrix,
    noise: &NoiseSpec,
    slack: f64,
) -> Result<(Matrix, Matrix)> {
    if !(slack >= 1.0) {
        return Err(Error::InvalidParameter(format!("slack must be >= 1, got {slack}")));
    }
    let meter_bounds = meter.map(|v| slack * noise.meter_accuracy * v.abs());
    let abs = aggregate.map(f64::abs);
    let mut transported = abs.clone();
    for t in 1..abs.ncols() {
        let prev = abs.column(t - 1).into_owned();
        transported.column_mut(t).axpy(1.0, &prev, 1.0);
    }
    let aggregate_bounds = transported * (slack * noise.pmu_accuracy);
    Ok((meter_bounds, aggregate_bounds))
}

/// Constraint residuals `Y - (K + D) U A` and `z^T W - C (K + D)`.
pub fn residuals(dec: &Decomposition, ms: &MeasurementSet) -> Result<(Matrix, Matrix)> {
    if dec.shape() != (ms.nodes(), ms.horizon()) {
        return Err(Error::shape(
            "decomposition vs measurements",
            (ms.nodes(), ms.horizon()),
            dec.shape(),
        ));
    }
    let (meter_image, aggregate_image) = ms.measurement_operator().apply(&dec.transformed());
    Ok((
        ms.meter() - meter_image,
        ms.differenced_aggregate() - aggregate_image,
    ))
}

/// Largest entrywise exceedance `(|residual| - bound)_+` over both
/// constraint families.
pub fn feasibility_violation(dec: &Decomposition, ms: &MeasurementSet) -> Result<f64> {
    let (meter_res, agg_res) = residuals(dec, ms)?;
    Ok(exceedance(&meter_res, ms.meter_bounds()).max(exceedance(&agg_res, ms.aggregate_bounds())))
}

pub(crate) fn exceedance(residual: &Matrix, bound: &Matrix) -> f64 {
    residual
        .iter()
        .zip(bound.iter())
        .map(|(r, b)| (r.abs() - b).max(0.0))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_load(n: usize, t: usize, c: f64) -> LoadMatrix {
        LoadMatrix::from_values(Matrix::from_element(n, t, c)).unwrap()
    }

    #[test]
    fn load_matrix_rejects_bad_input() {
        assert!(LoadMatrix::from_values(Matrix::zeros(0, 3)).is_err());
        let mut m = Matrix::zeros(2, 2);
        m[(1, 1)] = f64::NAN;
        assert!(matches!(LoadMatrix::from_values(m), Err(Error::NonFinite(_))));
        assert!(LoadMatrix::new(Matrix::zeros(2, 2), vec!["a".into()], TimeAxis::default()).is_err());
    }

    #[test]
    fn noiseless_constant_load() {
        let p = constant_load(2, 30, 1.0);
        let ms = simulate_measurements(&p, 15, &NoiseSpec::noiseless()).unwrap();
        assert_eq!(ms.meter(), &Matrix::from_element(2, 2, 1.0));
        assert_eq!(ms.aggregate(), &Matrix::from_element(1, 30, 2.0));
        assert_eq!(ms.meter_bounds(), &Matrix::zeros(2, 2));
    }

    #[test]
    fn simulate_rejects_indivisible_horizon() {
        let p = constant_load(2, 31, 1.0);
        assert!(matches!(
            simulate_measurements(&p, 15, &NoiseSpec::default()),
            Err(Error::NotDivisible { .. })
        ));
        let bad = NoiseSpec {
            meter_accuracy: 0.5,
            ..NoiseSpec::default()
        };
        assert!(simulate_measurements(&constant_load(2, 30, 1.0), 15, &bad).is_err());
    }

    #[test]
    fn aggregate_bound_transport() {
        let noise = NoiseSpec::default();
        let z = Matrix::from_row_slice(1, 2, &[10.0, 10.0]);
        let (yb, zb) = calibrate_bounds(&Matrix::zeros(3, 2), &z, &noise, 1.0).unwrap();
        assert_eq!(yb, Matrix::zeros(3, 2));
        assert!((zb[(0, 0)] - 0.002).abs() < 1e-15);
        assert!((zb[(0, 1)] - 0.004).abs() < 1e-15);
        assert!(calibrate_bounds(&Matrix::zeros(1, 1), &z, &noise, 0.5).is_err());
    }

    #[test]
    fn simulation_is_deterministic_per_seed() {
        let p = LoadMatrix::from_values(Matrix::from_fn(3, 30, |i, j| (i + j) as f64 * 0.1 + 1.0)).unwrap();
        let noise = NoiseSpec {
            seed: 9,
            ..NoiseSpec::default()
        };
        let a = simulate_measurements(&p, 15, &noise).unwrap();
        let b = simulate_measurements(&p, 15, &noise).unwrap();
        assert_eq!(a, b);
        let c = simulate_measurements(&p, 15, &NoiseSpec { seed: 10, ..noise }).unwrap();
        assert_ne!(a.meter(), c.meter());
    }

    #[test]
    fn residuals_are_linear_in_meter_perturbation() {
        let p = Matrix::from_fn(2, 30, |i, j| 1.0 + (i * 30 + j) as f64 * 0.01);
        let lm = LoadMatrix::from_values(p.clone()).unwrap();
        let ms = simulate_measurements(&lm, 15, &NoiseSpec::noiseless()).unwrap();
        let dec = Decomposition::from_load(&p);
        let (r0, a0) = residuals(&dec, &ms).unwrap();
        assert!(r0.amax() < 1e-12 && a0.amax() < 1e-12);

        let mut meter = ms.meter().clone();
        meter[(1, 0)] += 0.25;
        let perturbed = MeasurementSet::new(
            meter,
            ms.aggregate().clone(),
            ms.meter_bounds().clone(),
            ms.aggregate_bounds().clone(),
            15,
            ms.aggregation_map().clone(),
        )
        .unwrap();
        let (r1, _) = residuals(&dec, &perturbed).unwrap();
        let delta = &r1 - &r0;
        assert!((delta[(1, 0)] - 0.25).abs() < 1e-15);
        assert_eq!(delta.iter().filter(|v| v.abs() > 0.0).count(), 1);
    }

    #[test]
    fn measurement_set_validation() {
        let ok = || {
            (
                Matrix::zeros(2, 2),
                Matrix::zeros(1, 30),
                Matrix::zeros(2, 2),
                Matrix::zeros(1, 30),
                Matrix::from_element(1, 2, 1.0),
            )
        };
        let (y, z, yb, zb, c) = ok();
        assert!(MeasurementSet::new(y, z, yb, zb, 15, c).is_ok());
        let (y, z, _, zb, c) = ok();
        assert!(MeasurementSet::new(y, z, Matrix::from_element(2, 2, -1.0), zb, 15, c).is_err());
        let (y, z, yb, zb, c) = ok();
        assert!(MeasurementSet::new(y, z, yb, zb, 10, c).is_err());
        let (y, z, yb, zb, _) = ok();
        assert!(MeasurementSet::new(y, z, yb, zb, 15, Matrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn single_impulse_composes_to_step() {
        let mut d = Matrix::zeros(2, 5);
        d[(0, 0)] = 1.0;
        let dec = Decomposition::new(Matrix::zeros(2, 5), d).unwrap();
        let p = compose_estimate(&dec, default_node_ids(2), TimeAxis::default()).unwrap();
        assert!(p.values().row(0).iter().all(|&v| v == 1.0));
        assert!(p.values().row(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn time_labels() {
        let axis = TimeAxis {
            start_minute: 9 * 60,
            slot_minutes: 1,
        };
        assert_eq!(axis.label(0), "09:00");
        assert_eq!(axis.label(61), "10:01");
    }
}
