//! CSV and JSON artifacts.
//!
//! Matrix files have a header row `node,<label>,<label>,...` followed by one
//! row per node: its id and the values. Values use the shortest decimal form
//! that parses back to the same `f64`. Every write goes to a temporary file
//! in the target directory and is renamed into place.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tempfile::NamedTempFile;

use crate::eval::{Direction, Event, EventKind, EventSet, RocCurve};
use crate::model::{LoadMatrix, MeasurementSet, NoiseSpec, TimeAxis};
use crate::solver::{SupportSet, TraceRecord};
use crate::synth::{Case, GroundTruth, ScenarioSpec};
use crate::transforms::Matrix;

/// Version written into every bundle manifest.
pub const FORMAT_VERSION: u32 = 1;

pub const SCENARIO_MANIFEST: &str = "spec.json";
pub const MEASUREMENT_MANIFEST: &str = "measurements.json";

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: file is empty")]
    Empty { path: PathBuf },
    #[error("{path}: row {row} has {found} fields, expected {expected}")]
    Ragged {
        path: PathBuf,
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("{path}: row {row}, column {column}: cannot parse {value:?} as a number")]
    NonNumeric {
        path: PathBuf,
        row: usize,
        column: usize,
        value: String,
    },
    #[error("{path}: row {row}: {message}")]
    Field {
        path: PathBuf,
        row: usize,
        message: String,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: missing required file")]
    Missing { path: PathBuf },
    #[error("{path}: checksum mismatch (manifest {expected}, file {found})")]
    Checksum {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("{path}: unsupported format version {found} (supported: {supported})")]
    UnsupportedVersion {
        path: PathBuf,
        found: u32,
        supported: u32,
    },
    #[error("{path}: {source}")]
    Model {
        path: PathBuf,
        #[source]
        source: crate::error::Error,
    },
}

pub type IoResult<T> = std::result::Result<T, IoError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn model_err(path: &Path) -> impl FnOnce(crate::error::Error) -> IoError + '_ {
    move |source| IoError::Model {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `bytes` to `path` through a temporary sibling and an atomic
/// rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> IoResult<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let mut tmp = NamedTempFile::new_in(&dir).map_err(io_err(path))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| IoError::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

fn read_bytes(path: &Path) -> IoResult<Vec<u8>> {
    fs::read(path).map_err(|source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            IoError::Missing {
                path: path.to_path_buf(),
            }
        } else {
            IoError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Shortest decimal text that parses back to `v`.
pub fn format_value(v: f64) -> String {
    format!("{v}")
}

fn csv_bytes(records: &[Vec<String>]) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new().flexible(true).from_writer(Vec::new());
    for r in records {
        w.write_record(r).expect("writing to memory");
    }
    w.into_inner().expect("flushing to memory")
}

/// Labelled matrix: row ids, column labels and values.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixFile {
    pub row_ids: Vec<String>,
    pub column_labels: Vec<String>,
    pub values: Matrix,
}

impl MatrixFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut records = Vec::with_capacity(self.values.nrows() + 1);
        let mut header = vec!["node".to_string()];
        header.extend(self.column_labels.iter().cloned());
        records.push(header);
        for (i, id) in self.row_ids.iter().enumerate() {
            let mut row = vec![id.clone()];
            row.extend(self.values.row(i).iter().map(|&v| format_value(v)));
            records.push(row);
        }
        csv_bytes(&records)
    }

    pub fn parse(path: &Path, bytes: &[u8]) -> IoResult<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .from_reader(bytes);
        let mut rows = Vec::new();
        for record in reader.records() {
            rows.push(record.map_err(|source| IoError::Csv {
                path: path.to_path_buf(),
                source,
            })?);
        }
        let Some(header) = rows.first() else {
            return Err(IoError::Empty {
                path: path.to_path_buf(),
            });
        };
        let width = header.len();
        let column_labels: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        if rows.len() < 2 || column_labels.is_empty() {
            return Err(IoError::Empty {
                path: path.to_path_buf(),
            });
        }
        let mut row_ids = Vec::with_capacity(rows.len() - 1);
        let mut values = Matrix::zeros(rows.len() - 1, column_labels.len());
        for (i, record) in rows.iter().enumerate().skip(1) {
            if record.len() != width {
                return Err(IoError::Ragged {
                    path: path.to_path_buf(),
                    row: i + 1,
                    expected: width,
                    found: record.len(),
                });
            }
            row_ids.push(record[0].to_string());
            for (j, cell) in record.iter().enumerate().skip(1) {
                let v: f64 = cell.trim().parse().map_err(|_| IoError::NonNumeric {
                    path: path.to_path_buf(),
                    row: i + 1,
                    column: j + 1,
                    value: cell.to_string(),
                })?;
                values[(i - 1, j - 1)] = v;
            }
        }
        Ok(Self {
            row_ids,
            column_labels,
            values,
        })
    }

    pub fn read(path: &Path) -> IoResult<Self> {
        Self::parse(path, &read_bytes(path)?)
    }

    pub fn write(&self, path: &Path) -> IoResult<()> {
        write_atomic(path, &self.to_bytes())
    }
}

/// `HH:MM` to minutes.
fn parse_clock(label: &str) -> Option<u32> {
    let (h, m) = label.trim().split_once(':')?;
    let h: u32 = h.parse().ok()?;
    let m: u32 = m.parse().ok()?;
    (m < 60).then_some(h * 60 + m)
}

/// Time axis from `HH:MM` column labels; midnight with one-minute slots
/// when the labels are not clock times.
pub fn time_axis_from_labels(labels: &[String]) -> TimeAxis {
    let first = labels.first().and_then(|l| parse_clock(l));
    let second = labels.get(1).and_then(|l| parse_clock(l));
    match (first, second) {
        (Some(a), Some(b)) if b > a => TimeAxis {
            start_minute: a,
            slot_minutes: b - a,
        },
        (Some(a), None) if labels.len() == 1 => TimeAxis {
            start_minute: a,
            slot_minutes: 1,
        },
        _ => TimeAxis::default(),
    }
}

pub fn time_labels(time: TimeAxis, count: usize) -> Vec<String> {
    (0..count).map(|t| time.label(t)).collect()
}

fn load_file(load: &LoadMatrix) -> MatrixFile {
    MatrixFile {
        row_ids: load.node_ids().to_vec(),
        column_labels: time_labels(load.time(), load.horizon()),
        values: load.values().clone(),
    }
}

fn labelled(values: &Matrix, like: &LoadMatrix) -> MatrixFile {
    MatrixFile {
        values: values.clone(),
        ..load_file(like)
    }
}

pub fn write_load_csv(path: &Path, load: &LoadMatrix) -> IoResult<()> {
    load_file(load).write(path)
}

pub fn read_load_csv(path: &Path) -> IoResult<LoadMatrix> {
    let file = MatrixFile::read(path)?;
    let time = time_axis_from_labels(&file.column_labels);
    LoadMatrix::new(file.values, file.row_ids, time).map_err(model_err(path))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> IoResult<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|source| IoError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> IoResult<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|source| IoError::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn events_bytes(events: &EventSet, node_ids: &[String]) -> Vec<u8> {
    let mut records = vec![["house", "minute", "magnitude_kw", "direction", "kind", "truncated"]
        .iter()
        .map(|s| s.to_string())
        .collect::<Vec<_>>()];
    for e in events.iter() {
        records.push(vec![
            node_ids[e.house].clone(),
            e.minute.to_string(),
            format_value(e.magnitude_kw),
            e.direction.as_str().to_string(),
            e.kind.as_str().to_string(),
            e.truncated.to_string(),
        ]);
    }
    csv_bytes(&records)
}

pub fn write_events_csv(path: &Path, events: &EventSet, node_ids: &[String]) -> IoResult<()> {
    write_atomic(path, &events_bytes(events, node_ids))
}

pub fn parse_events_csv(path: &Path, bytes: &[u8], node_ids: &[String]) -> IoResult<EventSet> {
    let index: BTreeMap<&str, usize> = node_ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
    let mut events = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2;
        let record = record.map_err(|source| IoError::Csv {
            path: path.to_path_buf(),
            source,
        })?;
        let field = |message: String| IoError::Field {
            path: path.to_path_buf(),
            row,
            message,
        };
        if record.len() < 5 {
            return Err(IoError::Ragged {
                path: path.to_path_buf(),
                row,
                expected: 6,
                found: record.len(),
            });
        }
        let house = *index
            .get(&record[0])
            .ok_or_else(|| field(format!("unknown house {:?}", &record[0])))?;
        let minute: usize = record[1].parse().map_err(|_| field(format!("bad minute {:?}", &record[1])))?;
        let magnitude_kw: f64 = record[2].parse().map_err(|_| IoError::NonNumeric {
            path: path.to_path_buf(),
            row,
            column: 3,
            value: record[2].to_string(),
        })?;
        let direction = match &record[3] {
            "start" => Direction::Start,
            "stop" => Direction::Stop,
            other => return Err(field(format!("bad direction {other:?}"))),
        };
        let kind = match &record[4] {
            "ev" => EventKind::Ev,
            "hvac" => EventKind::Hvac,
            "other" => EventKind::Other,
            other => return Err(field(format!("bad kind {other:?}"))),
        };
        let truncated = match record.get(5) {
            None | Some("false") => false,
            Some("true") => true,
            Some(other) => return Err(field(format!("bad truncated flag {other:?}"))),
        };
        events.push(Event {
            house,
            minute,
            magnitude_kw,
            direction,
            kind,
            truncated,
        });
    }
    Ok(EventSet::new(events))
}

pub fn read_events_csv(path: &Path, node_ids: &[String]) -> IoResult<EventSet> {
    parse_events_csv(path, &read_bytes(path)?, node_ids)
}

/// Manifest of a scenario bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioManifest {
    pub format_version: u32,
    pub case: Case,
    pub spec: ScenarioSpec,
    /// SHA-256 of every data file, keyed by file name.
    pub checksums: BTreeMap<String, String>,
}

pub const SCENARIO_FILES: [&str; 5] = ["P.csv", "L_true.csv", "S_true.csv", "events.csv", "pv_profile.csv"];

/// Writes the data files, then `spec.json` with their checksums.
pub fn write_scenario(dir: &Path, truth: &GroundTruth) -> IoResult<()> {
    let load = &truth.load;
    let pv = MatrixFile {
        row_ids: vec!["pv".into()],
        column_labels: time_labels(load.time(), load.horizon()),
        values: Matrix::from_row_slice(1, truth.pv_profile.len(), &truth.pv_profile),
    };
    let files: [(&str, Vec<u8>); 5] = [
        ("P.csv", load_file(load).to_bytes()),
        ("L_true.csv", labelled(&truth.low_rank, load).to_bytes()),
        ("S_true.csv", labelled(&truth.sparse, load).to_bytes()),
        ("events.csv", events_bytes(&truth.events, load.node_ids())),
        ("pv_profile.csv", pv.to_bytes()),
    ];
    let mut checksums = BTreeMap::new();
    for (name, bytes) in &files {
        write_atomic(&dir.join(name), bytes)?;
        checksums.insert(name.to_string(), sha256_hex(bytes));
    }
    let manifest = ScenarioManifest {
        format_version: FORMAT_VERSION,
        case: truth.case,
        spec: truth.spec.clone(),
        checksums,
    };
    write_json(&dir.join(SCENARIO_MANIFEST), &manifest)
}

fn check_version(path: &Path, found: u32) -> IoResult<()> {
    if found != FORMAT_VERSION {
        return Err(IoError::UnsupportedVersion {
            path: path.to_path_buf(),
            found,
            supported: FORMAT_VERSION,
        });
    }
    Ok(())
}

fn verified(dir: &Path, name: &str, checksums: &BTreeMap<String, String>) -> IoResult<Vec<u8>> {
    let path = dir.join(name);
    let bytes = read_bytes(&path)?;
    let expected = checksums.get(name).ok_or_else(|| IoError::Field {
        path: dir.join(SCENARIO_MANIFEST),
        row: 0,
        message: format!("no checksum recorded for {name}"),
    })?;
    let found = sha256_hex(&bytes);
    if &found != expected {
        return Err(IoError::Checksum {
            path,
            expected: expected.clone(),
            found,
        });
    }
    Ok(bytes)
}

/// Minimal view of a manifest used to check the version before parsing the
/// rest.
#[derive(Deserialize)]
struct VersionProbe {
    format_version: u32,
}

pub fn read_scenario(dir: &Path) -> IoResult<GroundTruth> {
    let manifest_path = dir.join(SCENARIO_MANIFEST);
    let probe: VersionProbe = read_json(&manifest_path)?;
    check_version(&manifest_path, probe.format_version)?;
    let manifest: ScenarioManifest = read_json(&manifest_path)?;
    let sums = &manifest.checksums;
    let p_path = dir.join("P.csv");
    let p = MatrixFile::parse(&p_path, &verified(dir, "P.csv", sums)?)?;
    let l = MatrixFile::parse(&dir.join("L_true.csv"), &verified(dir, "L_true.csv", sums)?)?;
    let s = MatrixFile::parse(&dir.join("S_true.csv"), &verified(dir, "S_true.csv", sums)?)?;
    let pv = MatrixFile::parse(&dir.join("pv_profile.csv"), &verified(dir, "pv_profile.csv", sums)?)?;
    let events_path = dir.join("events.csv");
    let events = parse_events_csv(&events_path, &verified(dir, "events.csv", sums)?, &p.row_ids)?;
    let time = time_axis_from_labels(&p.column_labels);
    let load = LoadMatrix::new(p.values, p.row_ids, time).map_err(model_err(&p_path))?;
    let truth = GroundTruth {
        case: manifest.case,
        spec: manifest.spec,
        load,
        low_rank: l.values,
        sparse: s.values,
        events,
        pv_profile: pv.values.row(0).iter().copied().collect(),
    };
    truth.check_invariants().map_err(model_err(dir))?;
    Ok(truth)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementManifest {
    pub format_version: u32,
    pub factor: usize,
    /// Generating noise settings when the readings were simulated.
    pub noise: Option<NoiseSpec>,
    pub start_minute: u32,
    pub checksums: BTreeMap<String, String>,
}

pub const MEASUREMENT_FILES: [&str; 5] = [
    "meter.csv",
    "meter_bounds.csv",
    "aggregate.csv",
    "aggregate_bounds.csv",
    "aggregation_map.csv",
];

/// Writes readings, bounds and the aggregation map, then the manifest.
pub fn write_measurements(
    dir: &Path,
    ms: &MeasurementSet,
    node_ids: &[String],
    time: TimeAxis,
    noise: Option<NoiseSpec>,
) -> IoResult<()> {
    let coarse_time = TimeAxis {
        start_minute: time.start_minute,
        slot_minutes: time.slot_minutes * ms.factor() as u32,
    };
    let coarse_labels = time_labels(coarse_time, ms.meter().ncols());
    let fine_labels = time_labels(time, ms.horizon());
    let sensor_ids: Vec<String> = (1..=ms.sensors()).map(|i| format!("sensor-{i}")).collect();
    let file = |row_ids: &[String], labels: &[String], values: &Matrix| MatrixFile {
        row_ids: row_ids.to_vec(),
        column_labels: labels.to_vec(),
        values: values.clone(),
    };
    let files: [(&str, Vec<u8>); 5] = [
        ("meter.csv", file(node_ids, &coarse_labels, ms.meter()).to_bytes()),
        ("meter_bounds.csv", file(node_ids, &coarse_labels, ms.meter_bounds()).to_bytes()),
        ("aggregate.csv", file(&sensor_ids, &fine_labels, ms.aggregate()).to_bytes()),
        (
            "aggregate_bounds.csv",
            file(&sensor_ids, &fine_labels, ms.aggregate_bounds()).to_bytes(),
        ),
        ("aggregation_map.csv", file(&sensor_ids, node_ids, ms.aggregation_map()).to_bytes()),
    ];
    let mut checksums = BTreeMap::new();
    for (name, bytes) in &files {
        write_atomic(&dir.join(name), bytes)?;
        checksums.insert(name.to_string(), sha256_hex(bytes));
    }
    let manifest = MeasurementManifest {
        format_version: FORMAT_VERSION,
        factor: ms.factor(),
        noise,
        start_minute: time.start_minute,
        checksums,
    };
    write_json(&dir.join(MEASUREMENT_MANIFEST), &manifest)
}

/// Measurements with the meter node ids and the minute-level time axis.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementBundle {
    pub measurements: MeasurementSet,
    pub node_ids: Vec<String>,
    pub time: TimeAxis,
    pub manifest: MeasurementManifest,
}

pub fn read_measurements(dir: &Path) -> IoResult<MeasurementBundle> {
    let manifest_path = dir.join(MEASUREMENT_MANIFEST);
    let probe: VersionProbe = read_json(&manifest_path)?;
    check_version(&manifest_path, probe.format_version)?;
    let manifest: MeasurementManifest = read_json(&manifest_path)?;
    let sums = &manifest.checksums;
    let mut parsed = Vec::new();
    for name in MEASUREMENT_FILES {
        parsed.push(MatrixFile::parse(&dir.join(name), &verified(dir, name, sums)?)?);
    }
    let [meter, meter_bounds, aggregate, aggregate_bounds, map]: [MatrixFile; 5] =
        parsed.try_into().expect("five files");
    let time = TimeAxis {
        start_minute: manifest.start_minute,
        slot_minutes: time_axis_from_labels(&aggregate.column_labels).slot_minutes,
    };
    let ms = MeasurementSet::new(
        meter.values,
        aggregate.values,
        meter_bounds.values,
        aggregate_bounds.values,
        manifest.factor,
        map.values,
    )
    .map_err(model_err(dir))?;
    Ok(MeasurementBundle {
        measurements: ms,
        node_ids: meter.row_ids,
        time,
        manifest,
    })
}

pub fn write_trace_csv(path: &Path, trace: &[TraceRecord]) -> IoResult<()> {
    let mut records = vec![[
        "iteration",
        "objective",
        "primal_residual",
        "dual_residual",
        "feasibility_violation",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect::<Vec<_>>()];
    for r in trace {
        records.push(vec![
            r.iteration.to_string(),
            format_value(r.objective),
            format_value(r.primal_residual),
            format_value(r.dual_residual),
            format_value(r.feasibility_violation),
        ]);
    }
    write_atomic(path, &csv_bytes(&records))
}

/// Support entries as `house,minute` rows (1-based minutes).
pub fn write_support_csv(path: &Path, support: &SupportSet, node_ids: &[String]) -> IoResult<()> {
    let mut records = vec![vec!["house".to_string(), "minute".to_string()]];
    for (n, t) in support.iter() {
        records.push(vec![node_ids[n].clone(), (t + 1).to_string()]);
    }
    write_atomic(path, &csv_bytes(&records))
}

pub fn read_support_csv(path: &Path, node_ids: &[String], horizon: usize) -> IoResult<SupportSet> {
    let bytes = read_bytes(path)?;
    let index: BTreeMap<&str, usize> = node_ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes.as_slice());
    let mut entries = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2;
        let record = record.map_err(|source| IoError::Csv {
            path: path.to_path_buf(),
            source,
        })?;
        let field = |message: String| IoError::Field {
            path: path.to_path_buf(),
            row,
            message,
        };
        let house = *index
            .get(&record[0])
            .ok_or_else(|| field(format!("unknown house {:?}", &record[0])))?;
        let minute: usize = record
            .get(1)
            .and_then(|m| m.parse().ok())
            .filter(|&m| m >= 1)
            .ok_or_else(|| field("bad minute".into()))?;
        entries.push((house, minute - 1));
    }
    SupportSet::new(node_ids.len(), horizon, entries).map_err(model_err(path))
}

pub fn write_roc_csv(path: &Path, curve: &RocCurve) -> IoResult<()> {
    let mut records = vec![["threshold_fraction", "tp_rate", "fp_rate", "detections", "matched"]
        .iter()
        .map(|s| s.to_string())
        .collect::<Vec<_>>()];
    for p in &curve.points {
        records.push(vec![
            format_value(p.threshold_fraction),
            format_value(p.tp_rate),
            format_value(p.fp_rate),
            p.detections.to_string(),
            p.matched.to_string(),
        ]);
    }
    write_atomic(path, &csv_bytes(&records))
}

/// Two-column `metric,value` table.
pub fn write_metrics_csv(path: &Path, rows: &[(String, String)]) -> IoResult<()> {
    let mut records = vec![vec!["metric".to_string(), "value".to_string()]];
    records.extend(rows.iter().map(|(k, v)| vec![k.clone(), v.clone()]));
    write_atomic(path, &csv_bytes(&records))
}

/// Tidy `series,x,y` rows.
pub fn write_series_csv(path: &Path, rows: &[(String, f64, f64)]) -> IoResult<()> {
    let mut records = vec![vec!["series".to_string(), "x".to_string(), "y".to_string()]];
    records.extend(rows.iter().map(|(s, x, y)| vec![s.clone(), format_value(*x), format_value(*y)]));
    write_atomic(path, &csv_bytes(&records))
}

pub fn write_matrix_like(path: &Path, values: &Matrix, like: &LoadMatrix) -> IoResult<()> {
    labelled(values, like).write(path)
}
