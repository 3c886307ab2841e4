use loadrec::eval::{autocorrelation_peak, support_indicator, Direction, EventKind};
use loadrec::synth::{
    generate, generate_random, generate_summer_day, generate_winter_day, generate_winter_night,
    Case, GroundTruth, Range, ScenarioSpec,
};
use loadrec::transforms::{apply_cumsum, apply_diff};
use loadrec::Matrix;
use proptest::prelude::*;

fn density(m: &Matrix) -> f64 {
    m.iter().filter(|v| **v != 0.0).count() as f64 / m.len() as f64
}

fn singular_values(m: &Matrix) -> Vec<f64> {
    let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

// Pooled autocorrelation of a 0/1 indicator at one lag.
fn autocorrelation_at(ind: &Matrix, lag: usize) -> f64 {
    let mean = ind.iter().sum::<f64>() / ind.len() as f64;
    let mut num = 0.0;
    let mut den = 0.0;
    for n in 0..ind.nrows() {
        for t in 0..ind.ncols() {
            let a = ind[(n, t)] - mean;
            den += a * a;
            if t + lag < ind.ncols() {
                num += a * (ind[(n, t + lag)] - mean);
            }
        }
    }
    num / den
}

#[test]
fn winter_day_without_pv_or_events_is_rank_one() {
    let spec = ScenarioSpec {
        n_pv: 0,
        other_events: 0,
        ..ScenarioSpec::with_seed(4)
    };
    let gt = generate_winter_day(&spec).unwrap();
    assert_eq!(gt.sparse, Matrix::zeros(30, 420));
    let s = singular_values(gt.load.values());
    assert!(s[0] > 0.0 && s[1] <= 1e-12 * s[0]);
    assert!(gt.pv_profile.iter().all(|v| *v == 0.0));
}

#[test]
fn winter_day_low_rank_has_two_components() {
    let gt = generate_winter_day(&ScenarioSpec::with_seed(8)).unwrap();
    let s = singular_values(&gt.low_rank);
    assert!(s[1] > 1e-3 * s[0]);
    assert!(s[2] <= 1e-12 * s[0], "{:?}", &s[..4]);
}

#[test]
fn pv_houses_dip_below_base_at_midday() {
    let seed = 12;
    let with_pv = generate_winter_day(&ScenarioSpec::with_seed(seed)).unwrap();
    let base_only = generate_winter_day(&ScenarioSpec {
        n_pv: 0,
        ..ScenarioSpec::with_seed(seed)
    })
    .unwrap();
    let mid = (0..420)
        .max_by(|&a, &b| with_pv.pv_profile[a].total_cmp(&with_pv.pv_profile[b]))
        .unwrap();
    assert_eq!(with_pv.pv_profile[mid], 1.0);
    let dipping = (0..30)
        .filter(|&n| with_pv.low_rank[(n, mid)] < base_only.low_rank[(n, mid)] - 1.0)
        .count();
    let untouched = (0..30)
        .filter(|&n| with_pv.low_rank.row(n) == base_only.low_rank.row(n))
        .count();
    assert_eq!(dipping, 15);
    assert_eq!(untouched, 15);
}

#[test]
fn ground_truth_invariants_hold_for_all_cases() {
    for seed in 0..5 {
        for case in [
            Case::WinterDay,
            Case::WinterNight,
            Case::SummerDay,
            Case::Random { rank: 3, sparsity: 0.02 },
        ] {
            let spec = if case == Case::SummerDay {
                ScenarioSpec::summer(seed)
            } else {
                ScenarioSpec::with_seed(seed)
            };
            let gt = generate(case, &spec).unwrap();
            gt.check_invariants().unwrap();
            assert_eq!(*gt.load.values(), &gt.low_rank + &gt.sparse);
            assert_eq!(apply_cumsum(&apply_diff(&gt.sparse)), gt.sparse);
            check_event_pairs(&gt);
        }
    }
}

// Every start has a matching stop of the same magnitude later on the same house.
fn check_event_pairs(gt: &GroundTruth) {
    let d = gt.change_matrix();
    for n in 0..gt.spec.n_houses {
        let row: Vec<_> = gt.events.iter().filter(|e| e.house == n).collect();
        let starts = row.iter().filter(|e| e.direction == Direction::Start).count();
        let stops = row.iter().filter(|e| e.direction == Direction::Stop).count();
        if !matches!(gt.case, Case::Random { .. }) {
            assert_eq!(starts, stops, "house {n}");
        }
        for e in row.iter().filter(|e| !e.truncated) {
            let expected = e.direction.sign() * e.magnitude_kw;
            assert_eq!(d[(n, e.slot())], expected);
        }
    }
    let observable = gt.events.observable().len();
    assert_eq!(observable, d.iter().filter(|v| **v != 0.0).count());
}

#[test]
fn generation_is_deterministic_per_seed() {
    let a = generate_summer_day(&ScenarioSpec::summer(3)).unwrap();
    let b = generate_summer_day(&ScenarioSpec::summer(3)).unwrap();
    let c = generate_summer_day(&ScenarioSpec::summer(4)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.load.values(), c.load.values());
}

#[test]
fn winter_night_without_ev_is_event_free() {
    let spec = ScenarioSpec {
        n_ev: 0,
        other_events: 0,
        ..ScenarioSpec::with_seed(1)
    };
    let gt = generate_winter_night(&spec).unwrap();
    assert!(gt.events.is_empty());
    assert_eq!(gt.sparse, Matrix::zeros(30, 420));
    assert!(gt.pv_profile.iter().all(|v| *v == 0.0));
}

#[test]
fn winter_night_audit_over_fifty_seeds() {
    for seed in 0..50 {
        let gt = generate_winter_night(&ScenarioSpec::with_seed(seed)).unwrap();
        let ev = gt.events.of_kind(EventKind::Ev);
        let starts: Vec<_> = ev.iter().filter(|e| e.direction == Direction::Start).collect();
        let stops: Vec<_> = ev.iter().filter(|e| e.direction == Direction::Stop).collect();
        assert_eq!(starts.len(), 6, "seed {seed}");
        assert_eq!(stops.len(), 6, "seed {seed}");
        let mut houses: Vec<usize> = starts.iter().map(|e| e.house).collect();
        houses.dedup();
        assert_eq!(houses.len(), 6);
        for s in &starts {
            assert!(s.magnitude_kw >= 3.3 && s.magnitude_kw <= 6.6);
            let stop = stops.iter().find(|e| e.house == s.house).unwrap();
            assert_eq!(stop.magnitude_kw, s.magnitude_kw);
            let duration = stop.minute - s.minute;
            if stop.truncated {
                assert_eq!(stop.minute, 420);
            } else {
                assert!((30..=180).contains(&duration), "seed {seed}: {duration}");
            }
        }
    }
}

#[test]
fn single_ev_rectangle_example() {
    // One 6.6 kW charge from minute 150 to minute 300.
    let mut s = Matrix::zeros(1, 420);
    for t in 149..299 {
        s[(0, t)] = 6.6;
    }
    let d = apply_diff(&s);
    assert_eq!(d[(0, 149)], 6.6);
    assert_eq!(d[(0, 299)], -6.6);
    assert_eq!(d.iter().filter(|v| **v != 0.0).count(), 2);
}

#[test]
fn winter_supports_are_aperiodic() {
    for seed in 0..10 {
        for case in [Case::WinterDay, Case::WinterNight] {
            let gt = generate(case, &ScenarioSpec::with_seed(seed)).unwrap();
            let ind = support_indicator(&gt.change_matrix());
            let (peak, _) = autocorrelation_peak(&ind, 5);
            let direct = (5..=210).map(|lag| autocorrelation_at(&ind, lag)).fold(f64::MIN, f64::max);
            assert!((peak - direct).abs() < 1e-12);
            assert!(peak < 0.2, "{case:?} seed {seed}: {peak}");
        }
    }
}

#[test]
fn summer_supports_repeat_at_the_hvac_period() {
    for seed in 0..5 {
        let gt = generate_summer_day(&ScenarioSpec::summer(seed)).unwrap();
        let hvac = gt.events.of_kind(EventKind::Hvac);
        let house = hvac.iter().next().unwrap().house;
        let starts: Vec<usize> = hvac
            .iter()
            .filter(|e| e.house == house && e.direction == Direction::Start)
            .map(|e| e.minute)
            .collect();
        let period = starts[1] - starts[0];
        assert!((20..=40).contains(&period));
        let ind = support_indicator(&gt.change_matrix());
        let r = autocorrelation_at(&ind, period);
        assert!(r > 0.5, "seed {seed}: {r} at lag {period}");
        assert!(autocorrelation_peak(&ind, 5).0 >= r - 1e-12);
    }
}

#[test]
fn hvac_schedule_counts_with_period_thirty() {
    let spec = ScenarioSpec {
        hvac_period_min: Range(30.0, 30.0),
        hvac_duty: 0.5,
        ..ScenarioSpec::summer(6)
    };
    let gt = generate_summer_day(&spec).unwrap();
    let hvac = gt.events.of_kind(EventKind::Hvac);
    let mut houses: Vec<usize> = hvac.iter().map(|e| e.house).collect();
    houses.sort_unstable();
    houses.dedup();
    assert_eq!(houses.len(), 15);
    for house in houses {
        let own: Vec<_> = hvac.iter().filter(|e| e.house == house).collect();
        let first = own.iter().map(|e| e.minute).min().unwrap();
        // Starts at first, first + 30, ... within the horizon; each run lasts 15.
        let expected_starts: Vec<usize> = (first..=420).step_by(30).collect();
        let starts: Vec<usize> = own
            .iter()
            .filter(|e| e.direction == Direction::Start)
            .map(|e| e.minute)
            .collect();
        assert_eq!(starts, expected_starts, "house {house}");
        assert!((13..=14).contains(&starts.len()));
        let clean_stops = own.iter().filter(|e| e.direction == Direction::Stop && !e.truncated).count();
        let expected_clean = expected_starts.iter().filter(|&&s| s - 1 + 15 < 420).count();
        assert_eq!(clean_stops, expected_clean);
    }
}

#[test]
fn zero_duty_reduces_to_winter_day() {
    for seed in 0..3 {
        let summer = generate_summer_day(&ScenarioSpec {
            hvac_duty: 0.0,
            ..ScenarioSpec::summer(seed)
        })
        .unwrap();
        let winter = generate_winter_day(&ScenarioSpec::with_seed(seed)).unwrap();
        assert_eq!(summer.load, winter.load);
        assert_eq!(summer.events, winter.events);
        assert_eq!(summer.low_rank, winter.low_rank);
    }
}

#[test]
fn summer_is_much_denser_than_winter() {
    for seed in 0..5 {
        let summer = generate_summer_day(&ScenarioSpec::summer(seed)).unwrap();
        let winter = generate_winter_day(&ScenarioSpec::with_seed(seed)).unwrap();
        let ds = density(&summer.change_matrix());
        let dw = density(&winter.change_matrix());
        assert!(ds >= 5.0 * dw, "seed {seed}: {ds} vs {dw}");
    }
}

#[test]
fn random_case_examples() {
    let spec = ScenarioSpec::with_seed(2);
    let gt = generate_random(&spec, 2, 0.0).unwrap();
    assert_eq!(gt.sparse, Matrix::zeros(30, 420));
    let gt = generate_random(&spec, 1, 0.0).unwrap();
    let s = singular_values(gt.load.values());
    assert!(s[1] <= 1e-12 * s[0]);
    for seed in 0..20 {
        let gt = generate_random(&ScenarioSpec::with_seed(seed), 2, 0.01).unwrap();
        let d = density(&gt.change_matrix());
        assert!((0.005..=0.02).contains(&d), "seed {seed}: {d}");
        let s = singular_values(&gt.low_rank);
        assert!(s[2] <= 1e-12 * s[0]);
    }
}

#[test]
fn spec_violations_are_rejected() {
    let too_many = ScenarioSpec {
        n_ev: 31,
        ..ScenarioSpec::default()
    };
    assert!(generate_winter_night(&too_many).is_err());
    let indivisible = ScenarioSpec {
        horizon: 100,
        ..ScenarioSpec::default()
    };
    assert!(generate_winter_day(&indivisible).is_err());
    let negative = ScenarioSpec {
        ev_power_kw: Range(-1.0, 2.0),
        ..ScenarioSpec::default()
    };
    assert!(generate_winter_night(&negative).is_err());
    assert!(generate_winter_day(&ScenarioSpec::summer(0)).is_err());
    assert!(generate_summer_day(&ScenarioSpec::default()).is_err());
    assert!(generate_random(&ScenarioSpec::default(), 0, 0.01).is_err());
    assert!(generate_random(&ScenarioSpec::default(), 2, 1.5).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn random_scenarios_decompose_exactly(seed in any::<u64>(), rank in 1usize..4, p in 0f64..0.05) {
        let spec = ScenarioSpec {
            n_houses: 8,
            n_pv: 4,
            n_ev: 2,
            n_hvac: 4,
            horizon: 60,
            ..ScenarioSpec::with_seed(seed)
        };
        let gt = generate_random(&spec, rank, p).unwrap();
        gt.check_invariants().unwrap();
        let s = singular_values(&gt.low_rank);
        if rank < 8 {
            prop_assert!(s[rank] <= 1e-10 * s[0]);
        }
    }
}
