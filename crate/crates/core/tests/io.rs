use std::fs;

use loadrec::io::{
    read_events_csv, read_json, read_load_csv, read_measurements, read_scenario, read_support_csv,
    write_events_csv, write_json, write_load_csv, write_measurements, write_scenario,
    write_support_csv, IoError, MatrixFile, SCENARIO_FILES, SCENARIO_MANIFEST, MEASUREMENT_MANIFEST,
};
use loadrec::model::{simulate_measurements, LoadMatrix, TimeAxis};
use loadrec::solver::SupportSet;
use loadrec::synth::{generate, Case, ScenarioSpec};
use loadrec::{Matrix, NoiseSpec};
use proptest::prelude::*;
use tempfile::tempdir;

fn small_spec(seed: u64) -> ScenarioSpec {
    ScenarioSpec {
        n_houses: 6,
        n_pv: 2,
        n_ev: 2,
        n_hvac: 0,
        horizon: 60,
        ..ScenarioSpec::with_seed(seed)
    }
}

#[test]
fn hand_written_file_parses_exactly() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("m.csv");
    fs::write(&path, "node,18:00,18:01,18:02\nh1,1.5,-2,0.125\nh2,3e2,0,7.25\n").unwrap();
    let file = MatrixFile::read(&path).unwrap();
    assert_eq!(file.row_ids, vec!["h1", "h2"]);
    assert_eq!(file.column_labels, vec!["18:00", "18:01", "18:02"]);
    assert_eq!(file.values, Matrix::from_row_slice(2, 3, &[1.5, -2.0, 0.125, 300.0, 0.0, 7.25]));
    let load = read_load_csv(&path).unwrap();
    assert_eq!(
        load.time(),
        TimeAxis {
            start_minute: 18 * 60,
            slot_minutes: 1
        }
    );
}

#[test]
fn ragged_file_names_the_row() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("m.csv");
    fs::write(&path, "node,a,b\nh1,1,2\nh2,3\n").unwrap();
    match MatrixFile::read(&path) {
        Err(e @ IoError::Ragged { row: 3, expected: 3, found: 2, .. }) => {
            assert!(e.to_string().contains("row 3"));
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn parse_errors_carry_location() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("m.csv");
    fs::write(&path, "node,a,b\nh1,1,x2\n").unwrap();
    let err = MatrixFile::read(&path).unwrap_err();
    assert!(matches!(err, IoError::NonNumeric { row: 2, column: 3, .. }));
    fs::write(&path, "").unwrap();
    assert!(matches!(MatrixFile::read(&path), Err(IoError::Empty { .. })));
    assert!(matches!(
        MatrixFile::read(&dir.path().join("absent.csv")),
        Err(IoError::Missing { .. })
    ));
}

#[test]
fn scenario_bundle_round_trips() {
    let truth = generate(Case::WinterDay, &small_spec(3)).unwrap();
    let dir = tempdir().unwrap();
    write_scenario(dir.path(), &truth).unwrap();
    let back = read_scenario(dir.path()).unwrap();
    assert_eq!(back.load, truth.load);
    assert_eq!(back.low_rank, truth.low_rank);
    assert_eq!(back.sparse, truth.sparse);
    assert_eq!(back.events, truth.events);
    assert_eq!(back.pv_profile, truth.pv_profile);
    assert_eq!(back.spec, truth.spec);
    back.check_invariants().unwrap();

    let again = tempdir().unwrap();
    write_scenario(again.path(), &back).unwrap();
    for name in SCENARIO_FILES.iter().chain([&SCENARIO_MANIFEST]) {
        assert_eq!(
            fs::read(dir.path().join(name)).unwrap(),
            fs::read(again.path().join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn tampered_events_fail_the_checksum() {
    let truth = generate(Case::WinterNight, &small_spec(4)).unwrap();
    let dir = tempdir().unwrap();
    write_scenario(dir.path(), &truth).unwrap();
    let path = dir.path().join("events.csv");
    let mut text = fs::read_to_string(&path).unwrap();
    text.push_str("house-1,5,1,start,other,false\n");
    fs::write(&path, text).unwrap();
    assert!(matches!(read_scenario(dir.path()), Err(IoError::Checksum { .. })));
}

#[test]
fn missing_bundle_file_is_reported() {
    let truth = generate(Case::WinterDay, &small_spec(5)).unwrap();
    let dir = tempdir().unwrap();
    write_scenario(dir.path(), &truth).unwrap();
    fs::remove_file(dir.path().join("S_true.csv")).unwrap();
    match read_scenario(dir.path()) {
        Err(IoError::Missing { path }) => assert!(path.ends_with("S_true.csv")),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn old_format_version_is_rejected() {
    let truth = generate(Case::WinterDay, &small_spec(6)).unwrap();
    let dir = tempdir().unwrap();
    write_scenario(dir.path(), &truth).unwrap();
    let manifest_path = dir.path().join(SCENARIO_MANIFEST);
    let mut manifest: serde_json::Value = read_json(&manifest_path).unwrap();
    manifest["format_version"] = 0.into();
    write_json(&manifest_path, &manifest).unwrap();
    assert!(matches!(
        read_scenario(dir.path()),
        Err(IoError::UnsupportedVersion { found: 0, supported: 1, .. })
    ));

    // An old manifest missing later fields still reports the version.
    fs::write(&manifest_path, "{\"format_version\": 0}").unwrap();
    assert!(matches!(read_scenario(dir.path()), Err(IoError::UnsupportedVersion { .. })));
}

#[test]
fn measurement_bundle_round_trips() {
    let truth = generate(Case::WinterDay, &small_spec(7)).unwrap();
    let noise = NoiseSpec {
        seed: 7,
        ..NoiseSpec::default()
    };
    let ms = simulate_measurements(&truth.load, 15, &noise).unwrap();
    let dir = tempdir().unwrap();
    write_measurements(dir.path(), &ms, truth.load.node_ids(), truth.load.time(), Some(noise)).unwrap();
    let back = read_measurements(dir.path()).unwrap();
    assert_eq!(back.measurements, ms);
    assert_eq!(back.node_ids, truth.load.node_ids());
    assert_eq!(back.time, truth.load.time());
    assert_eq!(back.manifest.noise, Some(noise));

    let path = dir.path().join("meter.csv");
    let text = fs::read_to_string(&path).unwrap().replacen(',', ";", 3);
    fs::write(&path, text).unwrap();
    assert!(matches!(read_measurements(dir.path()), Err(IoError::Checksum { .. })));
    fs::remove_file(dir.path().join(MEASUREMENT_MANIFEST)).unwrap();
    assert!(matches!(read_measurements(dir.path()), Err(IoError::Missing { .. })));
}

#[test]
fn events_and_support_round_trip() {
    let truth = generate(Case::WinterNight, &small_spec(8)).unwrap();
    let ids = truth.load.node_ids();
    let dir = tempdir().unwrap();
    let path = dir.path().join("events.csv");
    write_events_csv(&path, &truth.events, ids).unwrap();
    assert_eq!(read_events_csv(&path, ids).unwrap(), truth.events);

    let support = SupportSet::new(6, 60, [(0, 0), (2, 17), (5, 59)]).unwrap();
    let path = dir.path().join("support.csv");
    write_support_csv(&path, &support, ids).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("house,minute\n"));
    assert!(text.contains(&format!("{},1\n", ids[0])));
    assert_eq!(read_support_csv(&path, ids, 60).unwrap(), support);
    fs::write(&path, "house,minute\nnobody,3\n").unwrap();
    assert!(matches!(read_support_csv(&path, ids, 60), Err(IoError::Field { row: 2, .. })));
}

#[test]
fn failed_write_leaves_no_partial_file() {
    let dir = tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let load = LoadMatrix::from_values(Matrix::from_element(1, 2, 1.0)).unwrap();
    assert!(write_load_csv(&blocker.join("nested.csv"), &load).is_err());
    let entries: Vec<_> = fs::read_dir(dir.path()).unwrap().collect();
    assert_eq!(entries.len(), 1);
}

proptest! {
    #[test]
    fn load_csv_round_trips(values in prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::ZERO, 12), start in 0u32..1380) {
        let m = Matrix::from_row_slice(3, 4, &values);
        let load = LoadMatrix::new(
            m,
            vec!["a".into(), "b".into(), "c".into()],
            TimeAxis { start_minute: start, slot_minutes: 1 },
        )
        .unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("p.csv");
        write_load_csv(&path, &load).unwrap();
        let back = read_load_csv(&path).unwrap();
        prop_assert_eq!(back.node_ids(), load.node_ids());
        prop_assert_eq!(back.time(), load.time());
        for (a, b) in back.values().iter().zip(load.values().iter()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
