//! One runner per subcommand. Each writes its files into the output
//! directory and returns a [`Report`]; failures listed there make the
//! process exit with status 1.

use std::path::Path;

use anisoperc::clusters::cluster_stats;
use anisoperc::coupling::{equivalence_check, explore_coupled, verify_trace, Condition, Outcome, StepRecord};
use anisoperc::estimators::{
    bound_check, estimate_qc_bisect, estimate_qc_sweep, fit_crossover_exponent, CurvePoint, ExponentFit,
};
use anisoperc::sampling::{sample_configuration, Params, SeedPlan};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checks;
use crate::manifest::{ExperimentManifest, Method};
use crate::output::*;
use crate::CliError;

#[derive(Debug, Default)]
pub struct Report {
    /// Lines for standard output.
    pub summary: Vec<String>,
    /// Itemized check failures.
    pub failures: Vec<String>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn grid_tag(index: usize) -> u32 {
    u32::try_from(index).expect("grid has fewer than 2^32 points")
}

/// Cluster statistics for every replica at every grid point.
pub fn run_sample(m: &ExperimentManifest, out: &mut OutputDir) -> Result<Report, CliError> {
    let spec = m.spec()?;
    let hash = m.hash();
    let grid = m.grid()?;
    let mut rows = Vec::new();
    for (k, &(p, q)) in grid.iter().enumerate() {
        let params = Params::for_spec(&spec, p, q).map_err(|e| CliError::from_core("params", e))?;
        let chunk: Vec<SampleRow> = (0..m.seeds.replicas)
            .into_par_iter()
            .map(|i| {
                let stream = SeedPlan::stream(grid_tag(k), i);
                let cfg = sample_configuration(&spec, &params, m.seeds.master, stream);
                let stats = cluster_stats(&cfg);
                SampleRow {
                    schema: SampleRow::SCHEMA,
                    manifest_sha256: hash.clone(),
                    p,
                    q,
                    replica: i,
                    stream,
                    origin_size: stats.origin_size,
                    max_size: stats.max_size,
                    components: stats.components,
                    spans: stats.spans.iter().map(|&s| if s { '1' } else { '0' }).collect(),
                }
            })
            .collect();
        rows.extend(chunk);
    }
    out.csv("sample.csv", &rows)?;
    Ok(Report {
        summary: vec![format!("{} rows over {} grid points", rows.len(), grid.len())],
        failures: Vec::new(),
    })
}

#[derive(Serialize)]
struct TraceLine<'a> {
    p: f64,
    q: f64,
    step: &'a StepRecord,
}

/// Coupled explorations with trace verification.
pub fn run_explore(m: &ExperimentManifest, out: &mut OutputDir) -> Result<Report, CliError> {
    let spec = m.spec()?;
    if spec.s() != 1 {
        return Err(CliError::Manifest {
            field: "lattice.s".into(),
            message: format!("the exploration needs s = 1, got s = {}", spec.s()),
        });
    }
    let hash = m.hash();
    let budget = m.explore.step_budget;
    if budget == 0 {
        return Err(CliError::Manifest {
            field: "explore.step_budget".into(),
            message: "must be at least 1".into(),
        });
    }
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    let mut traces: Vec<(f64, f64, u64, Vec<StepRecord>)> = Vec::new();
    let mut report = Report::default();
    for (k, &(p, q)) in m.grid()?.iter().enumerate() {
        let params = Params::for_spec(&spec, p, q).map_err(|e| CliError::from_core("params", e))?;
        let runs: Vec<(ExploreRow, Option<Vec<StepRecord>>)> = (0..m.seeds.replicas)
            .into_par_iter()
            .map(|i| {
                let stream = SeedPlan::stream(grid_tag(k), i);
                let run = explore_coupled(&spec, &params, m.seeds.master, stream, budget).expect("validated spec");
                let check = verify_trace(&run);
                let first_violation = check
                    .failures()
                    .next()
                    .map(|c| format!("{}: {}", c.name, c.detail.clone().unwrap_or_default()))
                    .unwrap_or_default();
                let st = &run.state;
                let row = ExploreRow {
                    schema: ExploreRow::SCHEMA,
                    manifest_sha256: hash.clone(),
                    p,
                    q,
                    replica: i,
                    outcome: outcome_name(run.outcome).into(),
                    steps: st.step,
                    accepted: st.accepted.len(),
                    rejected: st.rejected.len(),
                    hooks: st.steps.iter().filter(|s| s.condition == Some(Condition::B)).count(),
                    max_layer: st.explored.iter().map(|&(_, t)| t).max().unwrap_or(0),
                    trace_ok: check.passed(),
                    first_violation,
                };
                let steps = m.output.trace.then_some(run.state.steps);
                (row, steps)
            })
            .collect();

        let count = |name: &str| runs.iter().filter(|(r, _)| r.outcome == name).count() as u64;
        let steps: u64 = runs.iter().map(|(r, _)| r.steps as u64).sum();
        let accepted: u64 = runs.iter().map(|(r, _)| r.accepted as u64).sum();
        let failed = runs.iter().filter(|(r, _)| !r.trace_ok).count() as u64;
        for (r, _) in runs.iter().filter(|(r, _)| !r.trace_ok) {
            report
                .failures
                .push(format!("p={p} q={q} replica {}: {}", r.replica, r.first_violation));
        }
        summaries.push(ExploreSummaryRow {
            schema: ExploreSummaryRow::SCHEMA,
            manifest_sha256: hash.clone(),
            p,
            q,
            qbar: params.qbar,
            r: params.r,
            runs: m.seeds.replicas,
            died: count("died"),
            reached_boundary: count("reached_boundary"),
            budget_exhausted: count("budget_exhausted"),
            window_exhausted: count("window_exhausted"),
            steps,
            eta_fraction: if steps == 0 { 0.0 } else { accepted as f64 / steps as f64 },
            trace_failures: failed,
        });
        report.summary.push(format!(
            "p={p} q={q}: {} runs, eta fraction {:.6} (r = {:.6}), {failed} trace failures",
            m.seeds.replicas,
            summaries.last().unwrap().eta_fraction,
            params.r
        ));
        for (row, steps) in runs {
            if let Some(steps) = steps {
                traces.push((p, q, row.replica, steps));
            }
            rows.push(row);
        }
    }
    out.csv("explore.csv", &rows)?;
    out.csv("explore_summary.csv", &summaries)?;
    if m.output.trace {
        let records = traces.iter().flat_map(|(p, q, replica, steps)| {
            steps.iter().map(|step| Record {
                schema: "coupling_trace.v1",
                kind: "coupling-trace",
                tool: TOOL,
                manifest_sha256: &hash,
                replica: Some(*replica),
                payload: TraceLine { p: *p, q: *q, step },
            })
        });
        out.jsonl("explore_trace.jsonl", records)?;
    }
    Ok(report)
}

fn outcome_name(o: Outcome) -> &'static str {
    match o {
        Outcome::Died => "died",
        Outcome::ReachedBoundary => "reached_boundary",
        Outcome::BudgetExhausted => "budget_exhausted",
        Outcome::WindowExhausted => "window_exhausted",
    }
}

#[derive(Serialize)]
struct CurveRecord<'a> {
    point: &'a CurvePoint,
    bound: Option<&'a anisoperc::estimators::BoundReport>,
}

/// Estimate `q_c(p)` over the `p` grid and compare with the bound line.
pub fn run_qc_scan(m: &ExperimentManifest, out: &mut OutputDir) -> Result<(Report, Vec<CurvePoint>), CliError> {
    let spec = m.spec()?;
    let hash = m.hash();
    let p_c = m.p_c()?;
    m.grid()?;
    let mut report = Report::default();
    let mut rows = Vec::new();
    let mut points = Vec::new();
    let mut bounds = Vec::new();
    let mut previous: Option<(f64, f64)> = None;
    for &p in &m.params.p {
        let mut row = CurveRow {
            schema: CurveRow::SCHEMA,
            manifest_sha256: hash.clone(),
            p,
            pc_minus_p: p_c - p,
            side: spec.side_d(),
            ..CurveRow::default()
        };
        if p >= p_c {
            row.flag = "p_not_below_pc".into();
            report.summary.push(format!("p={p}: not below p_c = {p_c}, skipped"));
            rows.push(row);
            continue;
        }
        let point = match m.estimator.method {
            Method::Bisection => estimate_qc_bisect(&spec, p, m.estimator.surrogate, &m.estimator.bisection(), m.seeds.master),
            Method::Sweep => estimate_qc_sweep(&spec, p, m.estimator.surrogate, m.seeds.replicas, m.seeds.master),
        }
        .map_err(|e| CliError::from_core("estimator", e))?;
        let bound = bound_check(&point, spec.d(), p_c)?;
        if !bound.holds {
            report.failures.push(format!(
                "p={p}: q_c upper end {} exceeds the bound line {}",
                point.hi, bound.line
            ));
        }
        let monotone = previous.map(|(_, prev_hi)| point.lo <= prev_hi);
        if monotone == Some(false) {
            report.summary.push(format!("p={p}: interval lies above the previous point's"));
        }
        previous = Some((point.lo, point.hi));
        report.summary.push(format!(
            "p={p}: q_c = {:.6} [{:.6}, {:.6}], bound {:.6}{}",
            point.qc,
            point.lo,
            point.hi,
            bound.line,
            if bound.vacuous { " (vacuous)" } else { "" }
        ));
        row.qc = Some(point.qc);
        row.qc_lo = Some(point.lo);
        row.qc_hi = Some(point.hi);
        row.bound_line = Some(bound.line);
        row.bound_vacuous = Some(bound.vacuous);
        row.bound_holds = Some(bound.holds);
        row.ratio = Some(bound.ratio);
        row.monotone_ok = monotone;
        row.samples = point.samples;
        row.method = format!("{:?}", point.method).to_lowercase();
        row.surrogate = point.surrogate.clone();
        row.flag = point
            .flag
            .map(|f| format!("{f:?}"))
            .map(|s| to_snake(&s))
            .unwrap_or_default();
        rows.push(row);
        points.push(point);
        bounds.push(bound);
    }
    out.csv("qc_scan.csv", &rows)?;
    let records = points.iter().zip(&bounds).map(|(point, bound)| Record {
        schema: "qc_scan_record.v1",
        kind: "qc",
        tool: TOOL,
        manifest_sha256: &hash,
        replica: None,
        payload: CurveRecord {
            point,
            bound: Some(bound),
        },
    });
    out.jsonl("qc_scan.jsonl", records)?;
    Ok((report, points))
}

fn to_snake(camel: &str) -> String {
    let mut s = String::new();
    for (i, c) in camel.chars().enumerate() {
        if c.is_uppercase() && i > 0 {
            s.push('_');
        }
        s.push(c.to_ascii_lowercase());
    }
    s
}

#[derive(Debug, Deserialize)]
struct CurveInput {
    p: f64,
    qc: Option<f64>,
    qc_lo: Option<f64>,
    qc_hi: Option<f64>,
}

/// Read `p, qc[, qc_lo, qc_hi]` columns from a curve CSV. Rows without
/// `qc` are skipped.
pub fn read_curve(path: &Path) -> Result<(Vec<CurvePoint>, String), CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    let hash = hex::encode(Sha256::digest(&bytes));
    let mut reader = csv::Reader::from_reader(bytes.as_slice());
    let mut points = Vec::new();
    for (line, row) in reader.deserialize::<CurveInput>().enumerate() {
        let row = row.map_err(|e| CliError::Usage(format!("{}: row {}: {e}", path.display(), line + 1)))?;
        if let Some(qc) = row.qc {
            points.push(CurvePoint {
                lo: row.qc_lo.unwrap_or(qc),
                hi: row.qc_hi.unwrap_or(qc),
                ..CurvePoint::exact(row.p, qc)
            });
        }
    }
    Ok((points, hash))
}

/// Fit the crossover exponent and write the fit and residual tables.
pub fn write_fit(points: &[CurvePoint], p_c: f64, source: &str, out: &mut OutputDir) -> Result<(Report, ExponentFit), CliError> {
    let fit = fit_crossover_exponent(points, p_c)?;
    let row = FitRow {
        schema: FitRow::SCHEMA,
        source_sha256: source.into(),
        p_c,
        psi: fit.psi,
        psi_se: fit.psi_se,
        intercept: fit.intercept,
        cov_intercept: fit.covariance[0][0],
        cov_cross: fit.covariance[0][1],
        cov_psi: fit.covariance[1][1],
        points: fit.p_grid.len(),
        weighted: fit.weighted,
        refused: fit.refused.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(";"),
    };
    let residuals: Vec<ResidualRow> = fit
        .p_grid
        .iter()
        .zip(&fit.residuals)
        .map(|(&p, &res)| {
            let qc = points.iter().find(|pt| pt.p == p).expect("fit uses input points").qc;
            ResidualRow {
                schema: ResidualRow::SCHEMA,
                source_sha256: source.into(),
                p,
                log_gap: (p_c - p).ln(),
                log_qc: qc.ln(),
                residual: res,
            }
        })
        .collect();
    out.csv("fit.csv", &[row])?;
    out.csv("fit_residuals.csv", &residuals)?;
    out.jsonl(
        "fit.jsonl",
        [Record {
            schema: "fit_record.v1",
            kind: "fit",
            tool: TOOL,
            manifest_sha256: source,
            replica: None,
            payload: &fit,
        }],
    )?;
    let report = Report {
        summary: vec![format!(
            "psi = {:.6} +- {:.6} over {} points ({} refused)",
            fit.psi,
            fit.psi_se,
            fit.p_grid.len(),
            fit.refused.len()
        )],
        failures: Vec::new(),
    };
    Ok((report, fit))
}

/// The zero-randomness verification suite.
pub fn run_check(pc_override: Option<f64>, out: &mut OutputDir) -> Result<Report, CliError> {
    let rows = checks::all_rows(pc_override);
    out.csv("check.csv", &rows)?;
    let failures: Vec<String> = rows
        .iter()
        .filter(|r| !r.holds)
        .map(|r| {
            format!(
                "{} d={} m={} p={} q={} p_c={}: lhs {} vs rhs {}",
                r.check,
                opt(r.d),
                opt(r.m),
                opt(r.p),
                r.q,
                opt(r.p_c),
                r.lhs,
                r.rhs
            )
        })
        .collect();
    Ok(Report {
        summary: vec![format!("{} checks, {} failed", rows.len(), failures.len())],
        failures,
    })
}

fn opt<T: ToString>(x: Option<T>) -> String {
    x.map(|v| v.to_string()).unwrap_or_else(|| "-".into())
}

/// Compare plain and collapsed-multigraph laws of `|C(0)|` at every grid
/// point.
pub fn run_equivalence(m: &ExperimentManifest, out: &mut OutputDir) -> Result<Report, CliError> {
    let spec = m.spec()?;
    if spec.s() != 1 {
        return Err(CliError::Manifest {
            field: "lattice.s".into(),
            message: "the multigraph needs s = 1".into(),
        });
    }
    let hash = m.hash();
    let tol = m.equivalence.tv_tolerance;
    let mut rows = Vec::new();
    let mut report = Report::default();
    for (k, &(p, q)) in m.grid()?.iter().enumerate() {
        let params = Params::for_spec(&spec, p, q).map_err(|e| CliError::from_core("params", e))?;
        let seed = m.seeds.master.wrapping_add(k as u64);
        let r = equivalence_check(&spec, &params, m.seeds.replicas, seed)?;
        let pass = r.tv_distance < tol;
        if !pass {
            report
                .failures
                .push(format!("p={p} q={q}: total variation {} >= {tol}", r.tv_distance));
        }
        report.summary.push(format!(
            "p={p} q={q}: TV {:.6} (noise floor {:.6}, {} plain law)",
            r.tv_distance,
            r.noise_floor,
            if r.exact { "exact" } else { "sampled" }
        ));
        rows.push(EquivalenceRow {
            schema: EquivalenceRow::SCHEMA,
            manifest_sha256: hash.clone(),
            p,
            q,
            exact: r.exact,
            samples: r.samples,
            tv_distance: r.tv_distance,
            noise_floor: r.noise_floor,
            chi_square: r.chi_square,
            dof: r.dof,
            p_value: r.p_value,
            tolerance: tol,
            pass,
        });
    }
    out.csv("equivalence.csv", &rows)?;
    Ok(report)
}
