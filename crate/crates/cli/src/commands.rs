use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use loadrec::eval::{
    condition_diagnostics, event_roc, matrix_metrics, pattern_recovery_score, EventKind,
};
use loadrec::io::{
    read_load_csv, read_measurements, read_scenario, write_json, write_matrix_like, write_measurements, write_metrics_csv, write_roc_csv, write_scenario,
    write_support_csv, write_trace_csv, MeasurementBundle, IoError, MEASUREMENT_MANIFEST,
    SCENARIO_MANIFEST,
};
use loadrec::solver::{SolveOutcome, TraceRecord};
use loadrec::synth::{generate, Case};
use loadrec::{
    run_algorithm1, simulate_measurements, solve_recovery, Decomposition, LoadMatrix, SolveReport,
};

use crate::config::{parse_grid, parse_seeds, RunConfig};
use crate::{CliError, EvalArgs, NoiseArgs, RecoverArgs, SimulateArgs, SynthArgs};

pub const CONFIG_FILE: &str = "config.json";

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Runs `f` over `items` on `jobs` threads. Hard errors win over
/// non-convergence so a batch reports the most serious failure.
fn batch<T, F>(jobs: usize, items: &[T], f: F) -> Result<(), CliError>
where
    T: Sync,
    F: Fn(&T) -> Result<(), CliError> + Sync + Send,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| usage(e.to_string()))?;
    let results: Vec<Result<(), CliError>> = pool.install(|| items.par_iter().map(&f).collect());
    let mut not_converged = Vec::new();
    for r in results {
        match r {
            Ok(()) => {}
            Err(CliError::NotConverged(m)) => not_converged.push(m),
            Err(e) => return Err(e),
        }
    }
    if not_converged.is_empty() {
        Ok(())
    } else {
        Err(CliError::NotConverged(not_converged.join("; ")))
    }
}

fn parse_case(name: &str, rank: usize, sparsity: f64) -> Result<Case, CliError> {
    match name {
        "winter-day" => Ok(Case::WinterDay),
        "winter-night" => Ok(Case::WinterNight),
        "summer-day" => Ok(Case::SummerDay),
        "random" => Ok(Case::Random { rank, sparsity }),
        other => Err(usage(format!(
            "unknown case {other:?}; expected winter-day, winter-night, summer-day or random"
        ))),
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

pub fn synth(a: SynthArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(a.common.config.as_deref())?;
    if let Some(name) = &a.case {
        cfg.case = Some(parse_case(name, a.rank, a.sparsity)?);
    }
    let case = cfg.case.ok_or_else(|| usage("--case is required"))?;
    let spec = &mut cfg.scenario;
    set(&mut spec.n_houses, a.n_houses);
    set(&mut spec.n_pv, a.n_pv);
    set(&mut spec.n_ev, a.n_ev);
    set(&mut spec.n_hvac, a.n_hvac);
    set(&mut spec.horizon, a.horizon);
    set(&mut spec.meter_factor, a.meter_factor);
    if a.hvac || case == Case::SummerDay {
        spec.hvac_enabled = true;
    }
    spec.validate()?;
    let seeds = match &a.seed {
        Some(text) => parse_seeds(text).map_err(CliError::Usage)?,
        None => vec![cfg.scenario.seed],
    };
    let single = seeds.len() == 1;
    batch(a.common.jobs, &seeds, |&seed| {
        let mut cfg = cfg.clone();
        cfg.scenario.seed = seed;
        let dir = if single {
            a.common.out.clone()
        } else {
            a.common.out.join(format!("seed-{seed}"))
        };
        let truth = generate(case, &cfg.scenario)?;
        write_scenario(&dir, &truth)?;
        write_json(&dir.join(CONFIG_FILE), &cfg)?;
        Ok(())
    })
}

fn apply_noise(cfg: &mut RunConfig, n: &NoiseArgs) -> Result<(), CliError> {
    set(&mut cfg.noise.meter_accuracy, n.meter_accuracy);
    set(&mut cfg.noise.pmu_accuracy, n.pmu_accuracy);
    set(&mut cfg.noise.seed, n.noise_seed);
    set(&mut cfg.noise.bound_slack, n.bound_slack);
    cfg.noise.validate()?;
    Ok(())
}

pub fn simulate(a: SimulateArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(a.common.config.as_deref())?;
    apply_noise(&mut cfg, &a.noise)?;
    let truth = read_scenario(&a.scenario)?;
    cfg.case = Some(truth.case);
    cfg.scenario = truth.spec.clone();
    let ms = simulate_measurements(&truth.load, truth.spec.meter_factor, &cfg.noise)?;
    let out = &a.common.out;
    write_measurements(out, &ms, truth.load.node_ids(), truth.load.time(), Some(cfg.noise))?;
    write_json(&out.join(CONFIG_FILE), &cfg)?;
    Ok(())
}

/// Measurements from a measurement bundle, or simulated from a scenario
/// bundle and saved under `out/measurements`.
fn load_measurements(input: &Path, cfg: &mut RunConfig, out: &Path) -> Result<MeasurementBundle, CliError> {
    if input.join(MEASUREMENT_MANIFEST).exists() {
        let bundle = read_measurements(input)?;
        if let Some(noise) = bundle.manifest.noise {
            cfg.noise = noise;
        }
        return Ok(bundle);
    }
    if input.join(SCENARIO_MANIFEST).exists() {
        let truth = read_scenario(input)?;
        cfg.case = Some(truth.case);
        cfg.scenario = truth.spec.clone();
        let ms = simulate_measurements(&truth.load, truth.spec.meter_factor, &cfg.noise)?;
        let dir = out.join("measurements");
        write_measurements(&dir, &ms, truth.load.node_ids(), truth.load.time(), Some(cfg.noise))?;
        return Ok(read_measurements(&dir)?);
    }
    Err(IoError::Missing {
        path: input.join(MEASUREMENT_MANIFEST),
    }
    .into())
}

#[derive(Serialize)]
struct RunReport<'a> {
    tool_version: &'a str,
    #[serde(flatten)]
    report: &'a SolveReport,
    stages: Vec<&'a SolveReport>,
    support_size: Option<usize>,
}

fn write_decomposition(dir: &Path, dec: &Decomposition, like: &LoadMatrix) -> Result<(), CliError> {
    write_matrix_like(&dir.join("K_hat.csv"), &dec.k, like)?;
    write_matrix_like(&dir.join("D_hat.csv"), &dec.d, like)?;
    write_matrix_like(&dir.join("P_hat.csv"), &dec.load(), like)?;
    write_matrix_like(&dir.join("L_hat.csv"), &dec.low_rank(), like)?;
    Ok(())
}

fn write_stage(dir: &Path, outcome: &SolveOutcome, like: &LoadMatrix) -> Result<(), CliError> {
    write_decomposition(dir, &outcome.decomposition, like)?;
    write_trace_csv(&dir.join("trace.csv"), &outcome.trace)?;
    let report = RunReport {
        tool_version: crate::config::TOOL_VERSION,
        report: &outcome.report,
        stages: vec![&outcome.report],
        support_size: None,
    };
    write_json(&dir.join("report.json"), &report)?;
    Ok(())
}

fn recover_one(input: &Path, out: &Path, base: &RunConfig) -> Result<(), CliError> {
    let mut cfg = base.clone();
    let bundle = load_measurements(input, &mut cfg, out)?;
    let ms = &bundle.measurements;
    let like = LoadMatrix::new(
        loadrec::Matrix::zeros(ms.nodes(), ms.horizon()),
        bundle.node_ids.clone(),
        bundle.time,
    )?;
    let stale = out.join("support.csv");
    if stale.exists() {
        fs::remove_file(&stale).map_err(|source| IoError::Io {
            path: stale.clone(),
            source,
        })?;
    }
    let report = if cfg.skip_postprocess {
        let outcome = solve_recovery(ms, &cfg.solver)?;
        write_stage(out, &outcome, &like)?;
        outcome.report
    } else {
        let pipeline = run_algorithm1(ms, &cfg.solver)?;
        write_stage(&out.join("step1"), &pipeline.step1, &like)?;
        write_decomposition(out, &pipeline.decomposition, &like)?;
        write_support_csv(&out.join("support.csv"), &pipeline.support, &bundle.node_ids)?;
        let mut trace: Vec<TraceRecord> = pipeline.step1.trace.clone();
        let mut stages = vec![&pipeline.step1.report];
        if let Some(refined) = &pipeline.refinement {
            let offset = pipeline.step1.report.iterations;
            trace.extend(refined.trace.iter().map(|r| TraceRecord {
                iteration: r.iteration + offset,
                ..*r
            }));
            stages.push(&refined.report);
        }
        write_trace_csv(&out.join("trace.csv"), &trace)?;
        let run = RunReport {
            tool_version: crate::config::TOOL_VERSION,
            report: &pipeline.report,
            stages,
            support_size: Some(pipeline.support.len()),
        };
        write_json(&out.join("report.json"), &run)?;
        pipeline.report
    };
    write_json(&out.join(CONFIG_FILE), &cfg)?;
    if report.converged {
        Ok(())
    } else {
        Err(CliError::NotConverged(format!(
            "{}: no convergence after {} iterations (violation {:.3e}, tolerance {:.3e}); best iterate written",
            input.display(),
            report.iterations,
            report.feasibility_violation,
            report.feas_tol
        )))
    }
}

pub fn recover(a: RecoverArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(a.common.config.as_deref())?;
    apply_noise(&mut cfg, &a.noise)?;
    let s = &mut cfg.solver;
    set(&mut s.lambda, a.lambda);
    set(&mut s.rho, a.rho);
    set(&mut s.max_iters, a.max_iters);
    set(&mut s.eps_abs, a.eps_abs);
    set(&mut s.eps_rel, a.eps_rel);
    if a.feas_tol.is_some() {
        s.feas_tol = a.feas_tol;
    }
    s.validate()?;
    cfg.skip_postprocess |= a.skip_postprocess;
    let out = &a.common.out;
    let single = a.input.len() == 1;
    let targets: Vec<(PathBuf, PathBuf)> = a
        .input
        .iter()
        .map(|input| {
            let dir = if single {
                out.clone()
            } else {
                let name = input.file_name().map(|n| n.to_owned()).unwrap_or_else(|| "input".into());
                out.join(name)
            };
            (input.clone(), dir)
        })
        .collect();
    batch(a.common.jobs, &targets, |(input, dir)| recover_one(input, dir, &cfg))
}

fn parse_kind(name: &str) -> Result<Option<EventKind>, CliError> {
    match name {
        "ev" => Ok(Some(EventKind::Ev)),
        "hvac" => Ok(Some(EventKind::Hvac)),
        "other" => Ok(Some(EventKind::Other)),
        "all" => Ok(None),
        other => Err(usage(format!("unknown event kind {other:?}; expected ev, hvac, other or all"))),
    }
}

pub fn eval(a: EvalArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(a.common.config.as_deref())?;
    let roc_opts = &mut cfg.roc;
    set(&mut roc_opts.rating_kw, a.rating);
    set(&mut roc_opts.match_window_min, a.window);
    if let Some(text) = &a.thresholds {
        roc_opts.fractions = parse_grid(text).map_err(CliError::Usage)?;
    }
    if let Some(kind) = &a.kind {
        roc_opts.kind = parse_kind(kind)?;
    }
    let truth = read_scenario(&a.truth)?;
    cfg.case = Some(truth.case);
    cfg.scenario = truth.spec.clone();
    let p_hat = read_load_csv(&a.recovered.join("P_hat.csv"))?;
    let l_hat = read_load_csv(&a.recovered.join("L_hat.csv"))?;
    let d_hat = read_load_csv(&a.recovered.join("D_hat.csv"))?;
    let d_true = truth.change_matrix();
    let m = matrix_metrics(
        p_hat.values(),
        truth.load.values(),
        l_hat.values(),
        &truth.low_rank,
        d_hat.values(),
        &d_true,
        cfg.solver.support_abs,
    )?;
    let mut rows: Vec<(String, String)> = vec![
        ("rel_error_p".into(), m.rel_error_p.to_string()),
        ("rel_error_l".into(), m.rel_error_l.to_string()),
        ("rel_error_d".into(), m.rel_error_d.to_string()),
        ("support_precision".into(), m.support_precision.to_string()),
        ("support_recall".into(), m.support_recall.to_string()),
        ("rank_l".into(), m.rank_l.to_string()),
    ];
    if truth.pv_profile.iter().any(|&v| v != 0.0) {
        let score = pattern_recovery_score(l_hat.values(), &truth.pv_profile)?;
        rows.push(("pattern_recovery_score".into(), score.to_string()));
    }
    let diag = condition_diagnostics(&truth.low_rank, &d_true)?;
    rows.extend([
        ("row_coherence".into(), diag.row_coherence.to_string()),
        ("column_coherence".into(), diag.column_coherence.to_string()),
        ("relative_coherence".into(), diag.relative_coherence.to_string()),
        ("low_rank".into(), diag.low_rank.to_string()),
        ("autocorrelation_peak".into(), diag.autocorrelation_peak.to_string()),
        ("autocorrelation_lag".into(), diag.autocorrelation_lag.to_string()),
        ("sparse_rank".into(), diag.sparse_rank.to_string()),
    ]);
    let out = &a.common.out;
    let roc_result = if a.roc {
        Some(event_roc(d_hat.values(), &truth.events, &cfg.roc))
    } else {
        None
    };
    if let Some(Ok(curve)) = &roc_result {
        rows.push(("auc".into(), curve.auc.to_string()));
        write_roc_csv(&out.join("roc.csv"), curve)?;
    }
    write_metrics_csv(&out.join("metrics.csv"), &rows)?;
    write_json(&out.join(CONFIG_FILE), &cfg)?;
    if let Some(Err(e)) = roc_result {
        return Err(e.into());
    }
    Ok(())
}

/// Reads a load-shaped CSV written by this tool.
pub fn read_run_matrix(dir: &Path, name: &str) -> Result<LoadMatrix, CliError> {
    Ok(read_load_csv(&dir.join(name))?)
}

