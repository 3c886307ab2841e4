use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use loadrec::eval::leading_right_singular_vector;
use loadrec::linalg::singular_values;
use loadrec::io::{read_json, read_scenario, write_atomic, write_json, write_series_csv, MatrixFile};
use loadrec::synth::GroundTruth;
use loadrec::transforms::{apply_averaging, apply_diff, AveragingOperator};

use crate::commands::read_run_matrix;
use crate::{CliError, PlotArgs};

/// Figure ids with their titles.
pub const FIGURES: [(&str, &str); 8] = [
    ("load-profiles", "Minute-level load of every house"),
    ("singular-values", "Singular values of the recovered and true low-rank load"),
    ("irradiance", "Leading right singular vector of the recovered low-rank load against the PV profile"),
    ("ev-profile", "One house: true load, smart-meter staircase and recovered load"),
    ("sparse-changes", "One house: recovered and true change sequence"),
    ("postprocess", "One house: low-rank load before and after refinement, with the truth"),
    ("roc", "Event detection ROC"),
    ("convergence", "Solver trace: objective, residuals and constraint violation"),
];

type Series = Vec<(String, Vec<(f64, f64)>)>;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestEntry {
    title: String,
    csv: String,
    svg: Option<String>,
}

fn need<'a, T>(value: &'a Option<T>, flag: &str, figure: &str) -> Result<&'a T, CliError> {
    value
        .as_ref()
        .ok_or_else(|| CliError::Usage(format!("figure {figure} needs --{flag}")))
}

fn row(m: &loadrec::Matrix, i: usize) -> Vec<f64> {
    m.row(i).iter().copied().collect()
}

fn indexed(values: &[f64], x0: f64) -> Vec<(f64, f64)> {
    values.iter().enumerate().map(|(t, &v)| (x0 + t as f64, v)).collect()
}

fn house_index(truth_nodes: usize, house: usize) -> Result<usize, CliError> {
    if house == 0 || house > truth_nodes {
        return Err(CliError::Usage(format!("--house must lie in 1..={truth_nodes}")));
    }
    Ok(house - 1)
}

fn truth(args: &PlotArgs, figure: &str) -> Result<GroundTruth, CliError> {
    Ok(read_scenario(need(&args.truth, "truth", figure)?)?)
}

fn series_for(figure: &str, args: &PlotArgs) -> Result<(Series, &'static str, &'static str, bool), CliError> {
    let minutes = "minute";
    let kw = "kW";
    match figure {
        "load-profiles" => {
            let t = truth(args, figure)?;
            let s = (0..t.load.nodes())
                .map(|i| (t.load.node_ids()[i].clone(), indexed(&row(t.load.values(), i), 1.0)))
                .collect();
            Ok((s, minutes, kw, false))
        }
        "singular-values" => {
            let run = need(&args.run, "run", figure)?;
            let l_hat = read_run_matrix(run, "L_hat.csv")?;
            let mut s = vec![(
                "recovered".to_string(),
                indexed(&singular_values(l_hat.values())?, 1.0),
            )];
            if args.truth.is_some() {
                let t = truth(args, figure)?;
                s.push(("truth".into(), indexed(&singular_values(&t.low_rank)?, 1.0)));
            }
            for (_, pts) in &mut s {
                pts.sort_by(|a, b| b.1.total_cmp(&a.1));
                for (i, p) in pts.iter_mut().enumerate() {
                    p.0 = (i + 1) as f64;
                }
            }
            Ok((s, "index", "singular value", true))
        }
        "irradiance" => {
            let run = need(&args.run, "run", figure)?;
            let t = truth(args, figure)?;
            let l_hat = read_run_matrix(run, "L_hat.csv")?;
            let v = leading_right_singular_vector(l_hat.values())?;
            let norm = t.pv_profile.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(CliError::Usage("the scenario has no PV profile".into()));
            }
            let dot: f64 = v.iter().zip(&t.pv_profile).map(|(a, b)| a * b).sum();
            let sign = if dot < 0.0 { -1.0 } else { 1.0 };
            let v: Vec<f64> = v.iter().map(|x| x * sign).collect();
            let pv: Vec<f64> = t.pv_profile.iter().map(|x| x / norm).collect();
            Ok((
                vec![("recovered-v1".into(), indexed(&v, 1.0)), ("pv-truth".into(), indexed(&pv, 1.0))],
                minutes,
                "normalized",
                false,
            ))
        }
        "ev-profile" => {
            let run = need(&args.run, "run", figure)?;
            let t = truth(args, figure)?;
            let h = house_index(t.load.nodes(), args.house)?;
            let p_hat = read_run_matrix(run, "P_hat.csv")?;
            let r = t.spec.meter_factor;
            let meter_path = run.join("measurements").join("meter.csv");
            let meter = if meter_path.exists() {
                MatrixFile::read(&meter_path)?.values
            } else {
                apply_averaging(t.load.values(), &AveragingOperator::new(t.load.horizon(), r)?)?
            };
            let staircase: Vec<f64> = (0..t.load.horizon()).map(|i| meter[(h, i / r)]).collect();
            Ok((
                vec![
                    ("truth".into(), indexed(&row(t.load.values(), h), 1.0)),
                    ("smart-meter".into(), indexed(&staircase, 1.0)),
                    ("recovered".into(), indexed(&row(p_hat.values(), h), 1.0)),
                ],
                minutes,
                kw,
                false,
            ))
        }
        "sparse-changes" => {
            let run = need(&args.run, "run", figure)?;
            let t = truth(args, figure)?;
            let h = house_index(t.load.nodes(), args.house)?;
            let d_hat = read_run_matrix(run, "D_hat.csv")?;
            let d_true = apply_diff(&t.sparse);
            Ok((
                vec![
                    ("truth".into(), indexed(&row(&d_true, h), 1.0)),
                    ("recovered".into(), indexed(&row(d_hat.values(), h), 1.0)),
                ],
                minutes,
                "kW change",
                false,
            ))
        }
        "postprocess" => {
            let run = need(&args.run, "run", figure)?;
            let t = truth(args, figure)?;
            let h = house_index(t.load.nodes(), args.house)?;
            let refined = read_run_matrix(run, "L_hat.csv")?;
            let step1 = read_run_matrix(&run.join("step1"), "L_hat.csv")?;
            Ok((
                vec![
                    ("truth".into(), indexed(&row(&t.low_rank, h), 1.0)),
                    ("step1".into(), indexed(&row(step1.values(), h), 1.0)),
                    ("refined".into(), indexed(&row(refined.values(), h), 1.0)),
                ],
                minutes,
                kw,
                false,
            ))
        }
        "roc" => {
            if args.evals.is_empty() {
                return Err(CliError::Usage("figure roc needs at least one --eval".into()));
            }
            let mut s = Vec::new();
            for dir in &args.evals {
                let name = dir
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "roc".into());
                s.push((name, read_roc(&dir.join("roc.csv"))?));
            }
            Ok((s, "false positive rate", "true positive rate", false))
        }
        "convergence" => {
            let run = need(&args.run, "run", figure)?;
            let trace = read_trace(&run.join("trace.csv"))?;
            Ok((trace, "iteration", "value", true))
        }
        other => {
            let ids: Vec<&str> = FIGURES.iter().map(|f| f.0).collect();
            Err(CliError::Usage(format!(
                "unknown figure {other:?}; valid ids: {}",
                ids.join(", ")
            )))
        }
    }
}

fn read_csv_columns(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>), CliError> {
    let text = std::fs::read_to_string(path).map_err(|source| loadrec::io::IoError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| loadrec::io::IoError::Empty { path: path.to_path_buf() })?
        .split(',')
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let values = line
            .split(',')
            .enumerate()
            .map(|(j, cell)| {
                cell.parse::<f64>().map_err(|_| loadrec::io::IoError::NonNumeric {
                    path: path.to_path_buf(),
                    row: i + 2,
                    column: j + 1,
                    value: cell.to_string(),
                })
            })
            .collect::<Result<Vec<f64>, _>>()?;
        rows.push(values);
    }
    Ok((header, rows))
}

fn read_roc(path: &Path) -> Result<Vec<(f64, f64)>, CliError> {
    let (_, rows) = read_csv_columns(path)?;
    let mut pts: Vec<(f64, f64)> = rows.iter().map(|r| (r[2], r[1])).collect();
    pts.push((0.0, 0.0));
    pts.push((1.0, 1.0));
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    Ok(pts)
}

fn read_trace(path: &Path) -> Result<Series, CliError> {
    let (header, rows) = read_csv_columns(path)?;
    Ok((1..header.len())
        .map(|c| {
            let pts = rows.iter().map(|r| (r[0], r[c])).collect();
            (header[c].clone(), pts)
        })
        .collect())
}

pub fn run(args: PlotArgs) -> Result<(), CliError> {
    let figure = args.figure.as_str();
    let (series, x_label, y_label, log_y) = series_for(figure, &args)?;
    let title = FIGURES.iter().find(|f| f.0 == figure).map(|f| f.1).unwrap_or(figure);
    let rows: Vec<(String, f64, f64)> = series
        .iter()
        .flat_map(|(name, pts)| pts.iter().map(move |&(x, y)| (name.clone(), x, y)))
        .collect();
    let csv_name = format!("{figure}.csv");
    write_series_csv(&args.out.join(&csv_name), &rows)?;
    let svg_name = if args.svg {
        let name = format!("{figure}.svg");
        let svg = render_svg(title, x_label, y_label, &series, log_y);
        write_atomic(&args.out.join(&name), svg.as_bytes())?;
        Some(name)
    } else {
        None
    };
    let manifest_path = args.out.join("manifest.json");
    let mut manifest: BTreeMap<String, ManifestEntry> = if manifest_path.exists() {
        read_json(&manifest_path)?
    } else {
        BTreeMap::new()
    };
    manifest.insert(
        figure.to_string(),
        ManifestEntry {
            title: title.to_string(),
            csv: csv_name,
            svg: svg_name,
        },
    );
    write_json(&manifest_path, &manifest)?;
    Ok(())
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

/// Line chart as a standalone SVG document. With `log_y`, nonpositive
/// values are dropped and the axis shows log10.
pub fn render_svg(title: &str, x_label: &str, y_label: &str, series: &Series, log_y: bool) -> String {
    let (w, h) = (800.0, 480.0);
    let (left, right, top, bottom) = (70.0, 160.0, 40.0, 50.0);
    let map_y = |y: f64| if log_y { y.log10() } else { y };
    let pts: Vec<Vec<(f64, f64)>> = series
        .iter()
        .map(|(_, p)| {
            p.iter()
                .filter(|&&(x, y)| x.is_finite() && y.is_finite() && (!log_y || y > 0.0))
                .map(|&(x, y)| (x, map_y(y)))
                .collect()
        })
        .collect();
    let all = pts.iter().flatten();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let pw = w - left - right;
    let ph = h - top - bottom;
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let xv = x0 + f * (x1 - x0);
        let yv = y0 + f * (y1 - y0);
        let ylab = if log_y { format!("1e{yv:.1}") } else { format!("{yv:.3}") };
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{:.4}</text>"#,
            sx(xv),
            top + ph + 16.0,
            xv
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            left - 6.0,
            sy(yv) + 4.0,
            ylab
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        left + pw / 2.0,
        h - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        escape(y_label)
    );
    for (i, ((name, _), p)) in series.iter().zip(&pts).enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = p.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.2" points="{}"/>"#,
            path.join(" ")
        );
        if i < 20 {
            let ly = top + 14.0 + 16.0 * i as f64;
            let _ = writeln!(
                s,
                r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{}</text>"#,
                left + pw + 10.0,
                left + pw + 30.0,
                left + pw + 36.0,
                ly + 4.0,
                escape(name)
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
