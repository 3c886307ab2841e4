//! Synthetic ground-truth scenarios with planted low-rank and sparse parts.
//!
//! Every scenario is `P = L + S` where `L` is a sum of outer products of
//! house scales with smooth daily profiles, and `S = cumsum(D)` holds
//! rectangular appliance runs. Event magnitudes are multiples of 2^-10 kW so
//! that differencing the cumulative sum reproduces them bit for bit.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{autocorrelation_peak, support_indicator, Direction, Event, EventKind, EventSet};
use crate::model::{default_node_ids, Decomposition, LoadMatrix, TimeAxis};
use crate::transforms::{apply_cumsum, apply_diff, Matrix};

const QUANTUM: f64 = 1.0 / 1024.0;
const MAX_PLACEMENT_ATTEMPTS: usize = 64;
const APERIODIC_ATTEMPTS: usize = 32;
/// Autocorrelation ceiling for winter event supports.
pub const APERIODIC_LIMIT: f64 = 0.2;

/// Closed interval `[min, max]`, serialized as a two-element array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range(pub f64, pub f64);

impl Range {
    pub fn min(&self) -> f64 {
        self.0
    }

    pub fn max(&self) -> f64 {
        self.1
    }

    fn validate(&self, name: &str) -> Result<()> {
        if !(self.0 >= 0.0 && self.0 <= self.1) || !self.1.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "{name} must satisfy 0 <= min <= max, got [{}, {}]",
                self.0, self.1
            )));
        }
        Ok(())
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        if self.0 == self.1 {
            self.0
        } else {
            rng.random_range(self.0..=self.1)
        }
    }

    /// A draw rounded to the magnitude grid and kept inside the range.
    fn draw_quantized(&self, rng: &mut ChaCha8Rng) -> f64 {
        let lo = (self.0 / QUANTUM).ceil().max(1.0) * QUANTUM;
        let hi = ((self.1 / QUANTUM).floor() * QUANTUM).max(lo);
        ((self.draw(rng) / QUANTUM).round() * QUANTUM).clamp(lo, hi)
    }

    fn draw_minutes(&self, rng: &mut ChaCha8Rng) -> usize {
        (self.0.ceil() as usize).max(1)
            + rng.random_range(0..=(self.1.floor() as usize).saturating_sub(self.0.ceil() as usize))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "name")]
pub enum Case {
    WinterDay,
    WinterNight,
    SummerDay,
    Random { rank: usize, sparsity: f64 },
}

impl Case {
    pub fn label(&self) -> &'static str {
        match self {
            Case::WinterDay => "winter-day",
            Case::WinterNight => "winter-night",
            Case::SummerDay => "summer-day",
            Case::Random { .. } => "random",
        }
    }

    fn default_start_minute(&self) -> u32 {
        match self {
            Case::WinterNight => 18 * 60,
            _ => 9 * 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSpec {
    pub n_houses: usize,
    pub n_pv: usize,
    pub n_ev: usize,
    pub n_hvac: usize,
    pub horizon: usize,
    /// Smart-meter averaging factor the horizon must be a multiple of.
    pub meter_factor: usize,
    /// Clock time of the first slot; the case default when absent.
    pub start_minute: Option<u32>,
    pub base_load_kw: Range,
    pub pv_peak_kw: Range,
    pub ev_power_kw: Range,
    pub ev_duration_min: Range,
    pub hvac_power_kw: Range,
    pub hvac_period_min: Range,
    /// Fraction of each HVAC period spent on, in [0, 1).
    pub hvac_duty: f64,
    pub hvac_enabled: bool,
    /// Non-EV, non-HVAC appliance runs spread over random houses.
    pub other_events: usize,
    pub other_power_kw: Range,
    pub other_duration_min: Range,
    pub sunrise_minute: u32,
    pub sunset_minute: u32,
    pub seed: u64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            n_houses: 30,
            n_pv: 15,
            n_ev: 6,
            n_hvac: 15,
            horizon: 420,
            meter_factor: 15,
            start_minute: None,
            base_load_kw: Range(0.2, 0.8),
            pv_peak_kw: Range(2.0, 5.0),
            ev_power_kw: Range(3.3, 6.6),
            ev_duration_min: Range(30.0, 180.0),
            hvac_power_kw: Range(2.0, 4.0),
            hvac_period_min: Range(20.0, 40.0),
            hvac_duty: 0.5,
            hvac_enabled: false,
            other_events: 12,
            other_power_kw: Range(0.5, 2.0),
            other_duration_min: Range(5.0, 60.0),
            sunrise_minute: 7 * 60 + 15,
            sunset_minute: 17 * 60 + 45,
            seed: 0,
        }
    }
}

impl ScenarioSpec {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    /// Defaults with HVAC switched on.
    pub fn summer(seed: u64) -> Self {
        Self {
            hvac_enabled: true,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_houses == 0 || self.horizon == 0 {
            return Err(Error::InvalidParameter("need at least one house and one minute".into()));
        }
        for (name, count) in [("n_pv", self.n_pv), ("n_ev", self.n_ev), ("n_hvac", self.n_hvac)] {
            if count > self.n_houses {
                return Err(Error::InvalidParameter(format!(
                    "{name} = {count} exceeds n_houses = {}",
                    self.n_houses
                )));
            }
        }
        if self.meter_factor == 0 || self.horizon % self.meter_factor != 0 {
            return Err(Error::NotDivisible {
                horizon: self.horizon,
                factor: self.meter_factor,
            });
        }
        for (name, r) in [
            ("base_load_kw", self.base_load_kw),
            ("pv_peak_kw", self.pv_peak_kw),
            ("ev_power_kw", self.ev_power_kw),
            ("ev_duration_min", self.ev_duration_min),
            ("hvac_power_kw", self.hvac_power_kw),
            ("hvac_period_min", self.hvac_period_min),
            ("other_power_kw", self.other_power_kw),
            ("other_duration_min", self.other_duration_min),
        ] {
            r.validate(name)?;
        }
        if !(0.0..1.0).contains(&self.hvac_duty) {
            return Err(Error::InvalidParameter(format!(
                "hvac_duty must lie in [0, 1), got {}",
                self.hvac_duty
            )));
        }
        if self.hvac_period_min.min() < 1.0 {
            return Err(Error::InvalidParameter("hvac_period_min must be at least 1".into()));
        }
        if self.sunset_minute <= self.sunrise_minute {
            return Err(Error::InvalidParameter("sunset must follow sunrise".into()));
        }
        Ok(())
    }

    fn time_axis(&self, case: &Case) -> TimeAxis {
        TimeAxis {
            start_minute: self.start_minute.unwrap_or_else(|| case.default_start_minute()),
            slot_minutes: 1,
        }
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

/// A generated scenario with its planted components.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub case: Case,
    pub spec: ScenarioSpec,
    pub load: LoadMatrix,
    pub low_rank: Matrix,
    pub sparse: Matrix,
    pub events: EventSet,
    /// Normalized PV shape over the horizon; all zeros when there is no sun
    /// or no PV house.
    pub pv_profile: Vec<f64>,
}

impl GroundTruth {
    /// `D = S W`.
    pub fn change_matrix(&self) -> Matrix {
        apply_diff(&self.sparse)
    }

    /// `(L W, S W)`.
    pub fn decomposition(&self) -> Decomposition {
        Decomposition {
            k: apply_diff(&self.low_rank),
            d: self.change_matrix(),
        }
    }

    /// `P = L + S` bit for bit, and the non-truncated events are exactly
    /// the nonzeros of `S W`.
    pub fn check_invariants(&self) -> Result<()> {
        let p = self.load.values();
        if p.shape() != self.low_rank.shape() || p.shape() != self.sparse.shape() {
            return Err(Error::shape("ground truth components", p.shape(), self.sparse.shape()));
        }
        if *p != &self.low_rank + &self.sparse {
            return Err(Error::InvalidParameter("P differs from L + S".into()));
        }
        self.events.validate(p.nrows(), p.ncols())?;
        let mut planted = Matrix::zeros(p.nrows(), p.ncols());
        for e in self.events.iter().filter(|e| !e.truncated) {
            if planted[(e.house, e.slot())] != 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "two events share house {} minute {}",
                    e.house, e.minute
                )));
            }
            planted[(e.house, e.slot())] = e.direction.sign() * e.magnitude_kw;
        }
        if planted != self.change_matrix() {
            return Err(Error::InvalidParameter(
                "events disagree with the differenced sparse component".into(),
            ));
        }
        Ok(())
    }
}

pub fn generate(case: Case, spec: &ScenarioSpec) -> Result<GroundTruth> {
    match case {
        Case::WinterDay => generate_winter_day(spec),
        Case::WinterNight => generate_winter_night(spec),
        Case::SummerDay => generate_summer_day(spec),
        Case::Random { rank, sparsity } => generate_random(spec, rank, sparsity),
    }
}

/// Base load plus PV (rank at most 2) with sparse aperiodic appliance runs.
pub fn generate_winter_day(spec: &ScenarioSpec) -> Result<GroundTruth> {
    spec.validate()?;
    if spec.hvac_enabled {
        return Err(Error::InvalidParameter("winter scenarios have no HVAC".into()));
    }
    let case = Case::WinterDay;
    let time = spec.time_axis(&case);
    let (low_rank, pv_profile) = daytime_low_rank(spec, time);
    let events = aperiodic_events(spec, false, &BTreeSet::new(), &Vec::new())?;
    assemble(case, spec, time, low_rank, events, pv_profile)
}

/// Evening base load (rank 1) with one EV charge on each of `n_ev` houses.
pub fn generate_winter_night(spec: &ScenarioSpec) -> Result<GroundTruth> {
    spec.validate()?;
    if spec.hvac_enabled {
        return Err(Error::InvalidParameter("winter scenarios have no HVAC".into()));
    }
    let case = Case::WinterNight;
    let time = spec.time_axis(&case);
    let mut rng = spec.rng(1);
    let profile = smooth_profile(&mut rng, spec.horizon);
    let scales: Vec<f64> = (0..spec.n_houses).map(|_| spec.base_load_kw.draw(&mut rng)).collect();
    let low_rank = Matrix::from_fn(spec.n_houses, spec.horizon, |n, t| scales[n] * profile[t]);
    let events = aperiodic_events(spec, true, &BTreeSet::new(), &Vec::new())?;
    assemble(case, spec, time, low_rank, events, vec![0.0; spec.horizon])
}

/// The winter-day structure plus periodic HVAC cycling. The period is
/// shared by all HVAC houses; phases and ratings are per house.
pub fn generate_summer_day(spec: &ScenarioSpec) -> Result<GroundTruth> {
    spec.validate()?;
    if !spec.hvac_enabled {
        return Err(Error::InvalidParameter("summer scenarios need hvac_enabled".into()));
    }
    let case = Case::SummerDay;
    let time = spec.time_axis(&case);
    let (low_rank, pv_profile) = daytime_low_rank(spec, time);

    let mut rng = spec.rng(5);
    let period = spec.hvac_period_min.draw_minutes(&mut rng);
    let on = (spec.hvac_duty * period as f64).round() as usize;
    let mut houses: Vec<usize> = sample(&mut rng, spec.n_houses, spec.n_hvac).into_vec();
    houses.sort_unstable();
    let mut board = Board::new(spec.n_houses, spec.horizon);
    for &house in &houses {
        let power = spec.hvac_power_kw.draw_quantized(&mut rng);
        let phase = rng.random_range(1..=period);
        if on == 0 {
            continue;
        }
        let mut start = phase;
        while start < spec.horizon {
            board.place(house, start, on, power, EventKind::Hvac);
            start += period;
        }
    }
    let events = aperiodic_events(spec, false, &board.occupied_set(), &board.events)?;
    assemble(case, spec, time, low_rank, events, pv_profile)
}

/// Random rank-`rank` smooth low-rank part and a Bernoulli(`sparsity`)
/// change matrix.
pub fn generate_random(spec: &ScenarioSpec, rank: usize, sparsity: f64) -> Result<GroundTruth> {
    spec.validate()?;
    if rank == 0 || rank > spec.n_houses.min(spec.horizon) {
        return Err(Error::InvalidParameter(format!(
            "rank must lie in [1, {}], got {rank}",
            spec.n_houses.min(spec.horizon)
        )));
    }
    if !(0.0..=1.0).contains(&sparsity) {
        return Err(Error::InvalidParameter(format!("sparsity must lie in [0, 1], got {sparsity}")));
    }
    let case = Case::Random { rank, sparsity };
    let time = spec.time_axis(&case);
    let mut rng = spec.rng(1);
    let mut low_rank = Matrix::zeros(spec.n_houses, spec.horizon);
    for _ in 0..rank {
        let profile = smooth_profile(&mut rng, spec.horizon);
        for n in 0..spec.n_houses {
            let g = spec.base_load_kw.draw(&mut rng);
            for t in 0..spec.horizon {
                low_rank[(n, t)] += g * profile[t];
            }
        }
    }
    let mut rng = spec.rng(3);
    let mut events = Vec::new();
    for n in 0..spec.n_houses {
        for t in 0..spec.horizon {
            if rng.random_bool(sparsity) {
                let magnitude = spec.other_power_kw.draw_quantized(&mut rng);
                let direction = if rng.random_bool(0.5) { Direction::Start } else { Direction::Stop };
                events.push(Event {
                    house: n,
                    minute: t + 1,
                    magnitude_kw: magnitude,
                    direction,
                    kind: EventKind::Other,
                    truncated: false,
                });
            }
        }
    }
    assemble(case, spec, time, low_rank, events, vec![0.0; spec.horizon])
}

fn assemble(
    case: Case,
    spec: &ScenarioSpec,
    time: TimeAxis,
    low_rank: Matrix,
    events: Vec<Event>,
    pv_profile: Vec<f64>,
) -> Result<GroundTruth> {
    let mut d = Matrix::zeros(spec.n_houses, spec.horizon);
    for e in events.iter().filter(|e| !e.truncated) {
        d[(e.house, e.slot())] += e.direction.sign() * e.magnitude_kw;
    }
    let sparse = apply_cumsum(&d);
    let load = LoadMatrix::new(&low_rank + &sparse, default_node_ids(spec.n_houses), time)?;
    let truth = GroundTruth {
        case,
        spec: spec.clone(),
        load,
        low_rank,
        sparse,
        events: EventSet::new(events),
        pv_profile,
    };
    truth.check_invariants()?;
    Ok(truth)
}

/// Shared base profile with positive house scales, minus a PV profile
/// scaled on `n_pv` houses.
fn daytime_low_rank(spec: &ScenarioSpec, time: TimeAxis) -> (Matrix, Vec<f64>) {
    let mut rng = spec.rng(1);
    let base = smooth_profile(&mut rng, spec.horizon);
    let base_scales: Vec<f64> = (0..spec.n_houses).map(|_| spec.base_load_kw.draw(&mut rng)).collect();

    let mut rng = spec.rng(2);
    let pv = pv_shape(spec, time);
    let mut pv_scales = vec![0.0; spec.n_houses];
    for house in sample(&mut rng, spec.n_houses, spec.n_pv).into_vec() {
        pv_scales[house] = spec.pv_peak_kw.draw(&mut rng);
    }
    let low_rank = Matrix::from_fn(spec.n_houses, spec.horizon, |n, t| {
        base_scales[n] * base[t] - pv_scales[n] * pv[t]
    });
    let profile = if spec.n_pv == 0 { vec![0.0; spec.horizon] } else { pv };
    (low_rank, profile)
}

/// Half-sine between sunrise and sunset, scaled to a unit maximum over the
/// horizon.
fn pv_shape(spec: &ScenarioSpec, time: TimeAxis) -> Vec<f64> {
    let day = (spec.sunset_minute - spec.sunrise_minute) as f64;
    let raw: Vec<f64> = (0..spec.horizon)
        .map(|t| {
            let clock = (time.start_minute as usize + t * time.slot_minutes as usize) % 1440;
            let x = (clock as f64 - spec.sunrise_minute as f64) / day;
            if (0.0..=1.0).contains(&x) {
                (std::f64::consts::PI * x).sin()
            } else {
                0.0
            }
        })
        .collect();
    let peak = raw.iter().cloned().fold(0.0, f64::max);
    if peak > 0.0 {
        raw.into_iter().map(|v| v / peak).collect()
    } else {
        raw
    }
}

/// Quadratic trend plus three Gaussian bumps, normalized to unit mean.
/// Always at least 0.7 before normalization.
fn smooth_profile(rng: &mut ChaCha8Rng, horizon: usize) -> Vec<f64> {
    let a1 = rng.random_range(-0.4..=0.4);
    let a2 = rng.random_range(-0.6..=0.6);
    let bumps: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.1..=0.4),
                rng.random_range(0.0..=1.0),
                rng.random_range(0.05..=0.2),
            )
        })
        .collect();
    let denom = (horizon.max(2) - 1) as f64;
    let raw: Vec<f64> = (0..horizon)
        .map(|t| {
            let x = t as f64 / denom;
            let c = x - 0.5;
            let trend = 1.0 + a1 * c + a2 * (c * c - 1.0 / 12.0);
            let hills: f64 = bumps
                .iter()
                .map(|&(amp, center, width)| amp * (-(x - center).powi(2) / (2.0 * width * width)).exp())
                .sum();
            trend + hills
        })
        .collect();
    let mean = raw.iter().sum::<f64>() / horizon as f64;
    raw.into_iter().map(|v| v / mean).collect()
}

/// Transition bookkeeping: no two transitions share a house and slot.
struct Board {
    horizon: usize,
    occupied: Vec<BTreeSet<usize>>,
    events: Vec<Event>,
}

impl Board {
    fn new(houses: usize, horizon: usize) -> Self {
        Self {
            horizon,
            occupied: vec![BTreeSet::new(); houses],
            events: Vec::new(),
        }
    }

    fn seeded(houses: usize, horizon: usize, taken: &BTreeSet<(usize, usize)>, events: &[Event]) -> Self {
        let mut board = Self::new(houses, horizon);
        for &(h, t) in taken {
            board.occupied[h].insert(t);
        }
        board.events = events.to_vec();
        board
    }

    fn occupied_set(&self) -> BTreeSet<(usize, usize)> {
        self.occupied
            .iter()
            .enumerate()
            .flat_map(|(h, s)| s.iter().map(move |&t| (h, t)))
            .collect()
    }

    fn free(&self, house: usize, start: usize, duration: usize) -> bool {
        let stop = start + duration;
        !self.occupied[house].contains(&start) && (stop >= self.horizon || !self.occupied[house].contains(&stop))
    }

    /// Run from slot `start` for `duration` slots; a run reaching the
    /// horizon gets a truncated stop at minute `T`.
    fn place(&mut self, house: usize, start: usize, duration: usize, power: f64, kind: EventKind) -> bool {
        if start == 0 || start >= self.horizon || duration == 0 || !self.free(house, start, duration) {
            return false;
        }
        let stop = start + duration;
        let truncated = stop >= self.horizon;
        self.occupied[house].insert(start);
        if !truncated {
            self.occupied[house].insert(stop);
        }
        self.events.push(Event {
            house,
            minute: start + 1,
            magnitude_kw: power,
            direction: Direction::Start,
            kind,
            truncated: false,
        });
        self.events.push(Event {
            house,
            minute: if truncated { self.horizon } else { stop + 1 },
            magnitude_kw: power,
            direction: Direction::Stop,
            kind,
            truncated,
        });
        true
    }
}

/// EV runs (when `with_ev`) and other appliance runs on top of existing
/// transitions. Without existing transitions the draws are repeated until
/// the support autocorrelation falls below [`APERIODIC_LIMIT`]; the least
/// periodic draw is kept if no attempt gets there.
fn aperiodic_events(
    spec: &ScenarioSpec,
    with_ev: bool,
    taken: &BTreeSet<(usize, usize)>,
    existing: &[Event],
) -> Result<Vec<Event>> {
    let enforce = existing.is_empty();
    let mut ev_rng = spec.rng(4);
    let mut other_rng = spec.rng(3);
    let mut best: Option<(f64, Vec<Event>)> = None;
    for _ in 0..APERIODIC_ATTEMPTS {
        let mut board = Board::seeded(spec.n_houses, spec.horizon, taken, existing);
        if with_ev {
            place_ev(spec, &mut board, &mut ev_rng)?;
        }
        place_other(spec, &mut board, &mut other_rng)?;
        if !enforce {
            return Ok(board.events);
        }
        let mut d = Matrix::zeros(spec.n_houses, spec.horizon);
        for e in board.events.iter().filter(|e| !e.truncated) {
            d[(e.house, e.slot())] = 1.0;
        }
        let (peak, _) = autocorrelation_peak(&support_indicator(&d), 5);
        if peak < APERIODIC_LIMIT {
            return Ok(board.events);
        }
        if best.as_ref().is_none_or(|(p, _)| peak < *p) {
            best = Some((peak, board.events));
        }
    }
    Ok(best.map(|(_, e)| e).unwrap_or_default())
}

fn place_ev(spec: &ScenarioSpec, board: &mut Board, rng: &mut ChaCha8Rng) -> Result<()> {
    let mut houses: Vec<usize> = sample(rng, spec.n_houses, spec.n_ev).into_vec();
    houses.sort_unstable();
    let mut durations = BTreeSet::new();
    for house in houses {
        let power = spec.ev_power_kw.draw_quantized(rng);
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let duration = spec.ev_duration_min.draw_minutes(rng);
            let start = rng.random_range(1..spec.horizon.max(2));
            if durations.contains(&duration) {
                continue;
            }
            if board.place(house, start, duration, power, EventKind::Ev) {
                durations.insert(duration);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::InvalidParameter(format!("could not place an EV run on house {house}")));
        }
    }
    Ok(())
}

fn place_other(spec: &ScenarioSpec, board: &mut Board, rng: &mut ChaCha8Rng) -> Result<()> {
    for _ in 0..spec.other_events {
        let power = spec.other_power_kw.draw_quantized(rng);
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let house = rng.random_range(0..spec.n_houses);
            let duration = spec.other_duration_min.draw_minutes(rng);
            let start = rng.random_range(1..spec.horizon.max(2));
            if board.place(house, start, duration, power, EventKind::Other) {
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::InvalidParameter("could not place an appliance run".into()));
        }
    }
    Ok(())
}
