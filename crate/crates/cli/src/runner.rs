//! Plan execution: runs each task in order, collects pass/fail criteria and
//! metrics, writes artifact files, and assembles the run report.
//!
//! Failure classes are kept apart deliberately:
//! - a **criterion failure** (a solver ran fine but a configured expectation
//!   did not hold) marks the task `"failed"` and the run unsuccessful, but
//!   execution continues;
//! - a **solver failure** (a task could not produce its result at all) marks
//!   the task `"error"`, skips everything after it, and is echoed in
//!   `results.solver_error`.
//!
//! The report is written in both cases; exit codes are the caller's job.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::json;

use fbsde_core::rng::subseed;
use fbsde_core::{
    audit_assumptions, certify_comparison, check_viscosity, cross_validate, epsilon_sweep,
    linear_fit, local_expansion_probe, mean, regularity_audit, simulate, solve_fd, solve_lsmc,
    solve_picard, AssumptionReport, AuditOptions, BackwardSolution, ComparisonOptions,
    ComparisonReport, CrossValidateOptions, ExpansionOptions, ExprAst, GridSolution, PathEnsemble,
    Scheme, SpaceTimeMesh, TimeGrid, ViscosityReport,
};

use crate::config::{
    parse_tx, parse_x, AuditTask, CheckViscosityTask, CompareTask, CrossValidateTask,
    LocalExpansionTask, MollifySweepTask, RegularityTask, ScenarioConfig, SchemeChoice,
    SimulateTask, SolveFdTask, SolveLsmcTask, SolvePicardTask, TaskSpec, ValidatedScenario,
};
use crate::report::{
    fmt_f64, CriterionOutcome, Results, RunReport, TaskResult, Timing, ToolStamp,
};
use crate::with_coeffs;

/// Resolved run parameters (config values merged with command-line
/// overrides).
pub struct RunSettings {
    pub seed: u64,
    pub strict: bool,
    pub out_dir: PathBuf,
}

/// A task-level solver failure; aborts the remainder of the plan.
struct TaskError(String);

fn solver<E: std::fmt::Display>(e: E) -> TaskError {
    TaskError(e.to_string())
}

type TaskOutput = (Vec<CriterionOutcome>, serde_json::Value, Vec<String>);

/// Artifacts produced by earlier tasks, consumed by later ones. Plan
/// validation guarantees every consumer runs after its producer.
#[derive(Default)]
struct Artifacts {
    ensemble: Option<PathEnsemble>,
    lsmc: Option<BackwardSolution>,
    grid: Option<GridSolution>,
    audit_primary: Option<AssumptionReport>,
    audit_compare: Option<AssumptionReport>,
}

/// Execute the whole plan and write `report.json` (plus per-task artifact
/// files) into the output directory. `Err` is reserved for environment
/// problems — an unwritable output directory — not for solver or criterion
/// failures, which are encoded in the report.
pub fn run_scenario(
    cfg: &ScenarioConfig,
    v: &ValidatedScenario,
    settings: &RunSettings,
) -> Result<RunReport, String> {
    fs::create_dir_all(&settings.out_dir).map_err(|e| {
        format!(
            "cannot create output directory {}: {e}",
            settings.out_dir.display()
        )
    })?;

    let started = Instant::now();
    let mut artifacts = Artifacts::default();
    let mut tasks: Vec<TaskResult> = Vec::with_capacity(cfg.plan.len());
    let mut task_seconds = Vec::with_capacity(cfg.plan.len());
    let mut solver_error: Option<String> = None;

    for (index, task) in cfg.plan.iter().enumerate() {
        if solver_error.is_some() {
            tasks.push(TaskResult {
                index,
                task: task.kind().to_string(),
                status: "skipped".to_string(),
                criteria: Vec::new(),
                metrics: json!({}),
                files: Vec::new(),
            });
            task_seconds.push(0.0);
            continue;
        }
        let t0 = Instant::now();
        let task_seed = subseed(settings.seed, index as u64);
        let outcome = execute(task, task_seed, v, settings, &mut artifacts);
        task_seconds.push(t0.elapsed().as_secs_f64());
        match outcome {
            Ok((criteria, metrics, files)) => {
                let failed = criteria.iter().any(|c| !c.passed);
                tasks.push(TaskResult {
                    index,
                    task: task.kind().to_string(),
                    status: if failed { "failed" } else { "passed" }.to_string(),
                    criteria,
                    metrics,
                    files,
                });
            }
            Err(TaskError(detail)) => {
                let message = format!("plan[{index}] ({}): {detail}", task.kind());
                tasks.push(TaskResult {
                    index,
                    task: task.kind().to_string(),
                    status: "error".to_string(),
                    criteria: Vec::new(),
                    metrics: json!({}),
                    files: Vec::new(),
                });
                solver_error = Some(message);
            }
        }
    }

    let passed = solver_error.is_none() && tasks.iter().all(|t| t.status == "passed");
    let report = RunReport {
        tool: ToolStamp::default(),
        scenario: cfg.label.clone(),
        seed: settings.seed,
        strict: settings.strict,
        results: Results {
            passed,
            solver_error,
            tasks,
        },
        timing: Timing {
            total_seconds: started.elapsed().as_secs_f64(),
            tasks: task_seconds,
        },
    };

    let report_path = settings.out_dir.join("report.json");
    fs::write(&report_path, report.to_json_pretty())
        .map_err(|e| format!("cannot write {}: {e}", report_path.display()))?;
    Ok(report)
}

fn execute(
    task: &TaskSpec,
    task_seed: u64,
    v: &ValidatedScenario,
    settings: &RunSettings,
    artifacts: &mut Artifacts,
) -> Result<TaskOutput, TaskError> {
    match task {
        TaskSpec::Audit(t) => run_audit(t, task_seed, v, settings, artifacts),
        TaskSpec::Simulate(t) => run_simulate(t, task_seed, v, settings, artifacts),
        TaskSpec::SolveLsmc(t) => run_solve_lsmc(t, v, settings, artifacts),
        TaskSpec::SolvePicard(t) => run_solve_picard(t, v, settings, artifacts),
        TaskSpec::SolveFd(t) => run_solve_fd(t, v, settings, artifacts),
        TaskSpec::CrossValidate(t) => run_cross_validate(t, task_seed, v, settings, artifacts),
        TaskSpec::Compare(t) => run_compare(t, task_seed, v, settings, artifacts),
        TaskSpec::MollifySweep(t) => run_mollify_sweep(t, settings),
        TaskSpec::LocalExpansion(t) => run_local_expansion(t, task_seed, v, settings),
        TaskSpec::CheckViscosity(t) => run_check_viscosity(t, v, settings, artifacts),
        TaskSpec::Regularity(t) => run_regularity(t, task_seed, settings, artifacts),
    }
}

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<(), TaskError> {
    fs::write(dir.join(name), bytes).map_err(|e| TaskError(format!("cannot write {name}: {e}")))
}

/// Scan every stored node of a grid solution: are all values finite, and
/// what is the sup of their magnitudes?
fn scan_grid(sol: &GridSolution) -> (bool, f64) {
    let mesh = sol.mesh();
    let mut finite = true;
    let mut scale = 0.0_f64;
    for i in 0..sol.component_count() {
        for j in 0..=mesh.time_steps() {
            for c in 0..mesh.columns() {
                let value = sol.value(i, j, c);
                if value.is_finite() {
                    scale = scale.max(value.abs());
                } else {
                    finite = false;
                }
            }
        }
    }
    (finite, scale)
}

fn start_values(sol: &BackwardSolution) -> (Vec<f64>, Vec<f64>) {
    let n = sol.component_count();
    let mut means = Vec::with_capacity(n);
    let mut errs = Vec::with_capacity(n);
    for i in 0..n {
        let (m, e) = sol.y_start(i);
        means.push(m);
        errs.push(e);
    }
    (means, errs)
}

/// Criterion: per-component start values match the expected list.
fn y0_criterion(got: &[f64], want: &[f64], tolerance: f64) -> CriterionOutcome {
    let mut worst = 0.0_f64;
    let mut lines = Vec::with_capacity(got.len());
    for (i, (g, w)) in got.iter().zip(want).enumerate() {
        let gap = (g - w).abs();
        worst = worst.max(gap);
        lines.push(format!(
            "component {}: got {}, expected {} (|gap| {})",
            i + 1,
            fmt_f64(*g),
            fmt_f64(*w),
            fmt_f64(gap)
        ));
    }
    CriterionOutcome::new(
        "start_values_match",
        worst <= tolerance,
        format!(
            "worst gap {} vs bound {}; {}",
            fmt_f64(worst),
            fmt_f64(tolerance),
            lines.join("; ")
        ),
    )
}

fn to_value<T: serde::Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("metric serialization cannot fail")
}

// ---------------------------------------------------------------------------
// Task implementations
// ---------------------------------------------------------------------------

fn audit_summary(report: &AssumptionReport) -> serde_json::Value {
    json!({
        "label": report.label,
        "drift_lipschitz_x": report.drift_lipschitz_x,
        "diffusion_lipschitz_x": report.diffusion_lipschitz_x,
        "terminal_lipschitz_x": report.terminal_lipschitz_x,
        "driver_lipschitz_yz_max": report
            .drivers
            .iter()
            .map(|d| d.lipschitz_yz_max())
            .collect::<Vec<f64>>(),
        "predicted_x_lipschitz": report.predicted_x_lipschitz(),
        "monotone_all_ok": report.monotone_all_ok,
        "violation_count": report.violations.len(),
    })
}

fn audit_is_finite(report: &AssumptionReport) -> bool {
    report.drift_lipschitz_x.is_finite()
        && report.diffusion_lipschitz_x.is_finite()
        && report.terminal_lipschitz_x.iter().all(|l| l.is_finite())
        && report.drivers.iter().all(|d| {
            d.lipschitz_x.is_finite()
                && d.lipschitz_z.is_finite()
                && d.lipschitz_y.iter().all(|l| l.is_finite())
        })
}

fn run_audit(
    t: &AuditTask,
    task_seed: u64,
    v: &ValidatedScenario,
    settings: &RunSettings,
    artifacts: &mut Artifacts,
) -> Result<TaskOutput, TaskError> {
    let options = AuditOptions {
        box_radius: t.box_radius,
        sample_count: t.samples,
        seed: task_seed,
    };
    let primary = audit_assumptions(&v.raw_primary, &options).map_err(solver)?;
    let compare = match &v.raw_compare {
        Some(raw) => {
            let options = AuditOptions {
                box_radius: t.box_radius,
                sample_count: t.samples,
                seed: subseed(task_seed, 1),
            };
            Some(audit_assumptions(raw, &options).map_err(solver)?)
        }
        None => None,
    };

    let mut criteria = Vec::new();
    let finite =
        audit_is_finite(&primary) && compare.as_ref().map_or(true, audit_is_finite);
    criteria.push(CriterionOutcome::new(
        "sampled_constants_finite",
        finite,
        if finite {
            "all sampled Lipschitz constants are finite".to_string()
        } else {
            "a sampled Lipschitz constant is non-finite; the coefficient grows \
             superlinearly over the sampling box"
                .to_string()
        },
    ));

    let count_warnings = |r: &AssumptionReport| r.violations.len() + usize::from(!r.monotone_all_ok);
    let warnings = count_warnings(&primary) + compare.as_ref().map_or(0, count_warnings);
    criteria.push(CriterionOutcome::new(
        "no_assumption_warnings",
        warnings == 0 || !settings.strict,
        if warnings == 0 {
            "no warnings".to_string()
        } else if settings.strict {
            format!("{warnings} warning(s); failing because --strict is set")
        } else {
            format!("{warnings} warning(s); advisory only (use --strict to enforce)")
        },
    ));

    let full = json!({ "primary": to_value(&primary), "compare": compare.as_ref().map(to_value) });
    write_file(
        &settings.out_dir,
        "audit.json",
        serde_json::to_string_pretty(&full).expect("audit serialization").as_bytes(),
    )?;

    let metrics = json!({
        "seed": task_seed,
        "box_radius": t.box_radius,
        "samples": t.samples,
        "primary": audit_summary(&primary),
        "compare": compare.as_ref().map(audit_summary),
    });
    artifacts.audit_primary = Some(primary);
    artifacts.audit_compare = compare;
    Ok((criteria, metrics, vec!["audit.json".to_string()]))
}

fn run_simulate(
    t: &SimulateTask,
    task_seed: u64,
    v: &ValidatedScenario,
    settings: &RunSettings,
    artifacts: &mut Artifacts,
) -> Result<TaskOutput, TaskError> {
    let grid = TimeGrid::new(0.0, v.effective.horizon(), t.steps).map_err(solver)?;
    let ens =
        with_coeffs!(v.effective, |c| simulate(c, grid, t.x0, t.paths, task_seed))
            .map_err(solver)?;

    let terminal = ens.states_at(t.steps);
    let finite = terminal.iter().all(|x| x.is_finite());
    let criteria = vec![CriterionOutcome::new(
        "terminal_states_finite",
        finite,
        if finite {
            format!("all {} terminal states are finite", t.paths)
        } else {
            "a terminal state is non-finite (the forward dynamics blew up)".to_string()
        },
    )];

    let mut files = Vec::new();
    if t.save_csv {
        let mut buf = Vec::new();
        ens.write_csv(&mut buf).map_err(solver)?;
        write_file(&settings.out_dir, "paths.csv", &buf)?;
        files.push("paths.csv".to_string());
    }

    let metrics = json!({
        "seed": task_seed,
        "x0": t.x0,
        "paths": t.paths,
        "steps": t.steps,
        "dt": grid.dt(),
        "terminal_mean": mean(&terminal),
    });
    artifacts.ensemble = Some(ens);
    Ok((criteria, metrics, files))
}

fn run_solve_lsmc(
    t: &SolveLsmcTask,
    v: &ValidatedScenario,
    settings: &RunSettings,
    artifacts: &mut Artifacts,
) -> Result<TaskOutput, TaskError> {
    let ens = artifacts.ensemble.as_ref().expect("plan validated: simulate precedes");
    let sol =
        with_coeffs!(v.effective, |c| solve_lsmc(c, ens, t.degree)).map_err(solver)?;
    let (y0, y0_stderr) = start_values(&sol);

    let mut criteria = Vec::new();
    let finite = y0.iter().all(|y| y.is_finite());
    criteria.push(CriterionOutcome::new(
        "start_values_finite",
        finite,
        format!("y0 = [{}]", y0.iter().map(|y| fmt_f64(*y)).collect::<Vec<_>>().join(", ")),
    ));
    if let Some(want) = &t.expect_y0 {
        criteria.push(y0_criterion(&y0, want, t.y0_tolerance));
    }

    let mut csv = String::from("component,y0,stderr\n");
    for (i, (m, e)) in y0.iter().zip(&y0_stderr).enumerate() {
        csv.push_str(&format!("{},{},{}\n", i + 1, fmt_f64(*m), fmt_f64(*e)));
    }
    write_file(&settings.out_dir, "lsmc_y0.csv", csv.as_bytes())?;

    let metrics = json!({
        "degree": t.degree,
        "y0": y0,
        "y0_stderr": y0_stderr,
    });
    artifacts.lsmc = Some(sol);
    Ok((criteria, metrics, vec!["lsmc_y0.csv".to_string()]))
}

fn run_solve_picard(
    t: &SolvePicardTask,
    v: &ValidatedScenario,
    settings: &RunSettings,
    artifacts: &mut Artifacts,
) -> Result<TaskOutput, TaskError> {
    let ens = artifacts.ensemble.as_ref().expect("plan validated: simulate precedes");
    let sol = with_coeffs!(v.effective, |c| solve_picard(
        c,
        ens,
        t.degree,
        t.max_sweeps,
        t.tol
    ))
    .map_err(solver)?;
    let (y0, y0_stderr) = start_values(&sol);
    let history = sol.residual_history().to_vec();
    // Residuals past the first exact zero carry no contraction information.
    let positive: Vec<f64> = history.iter().copied().take_while(|r| *r > 0.0).collect();

    let mut criteria = Vec::new();
    let finite = y0.iter().all(|y| y.is_finite());
    criteria.push(CriterionOutcome::new(
        "start_values_finite",
        finite,
        format!("y0 = [{}]", y0.iter().map(|y| fmt_f64(*y)).collect::<Vec<_>>().join(", ")),
    ));

    if t.expect_contraction {
        let ratios: Vec<f64> = positive.windows(2).map(|w| w[1] / w[0]).collect();
        let (passed, detail) = if ratios.is_empty() {
            (
                positive.len() <= 1 && !history.is_empty(),
                format!("converged immediately (history {history:?})"),
            )
        } else {
            let worst = ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (
                worst < 1.0,
                format!(
                    "successive residual ratios [{}], worst {}",
                    ratios.iter().map(|r| fmt_f64(*r)).collect::<Vec<_>>().join(", "),
                    fmt_f64(worst)
                ),
            )
        };
        criteria.push(CriterionOutcome::new("residuals_contract", passed, detail));
    }

    let mut fit_value = serde_json::Value::Null;
    if let Some(min_r2) = t.min_fit_r2 {
        if positive.len() >= 3 {
            let xs: Vec<f64> = (0..positive.len()).map(|k| k as f64).collect();
            let ys: Vec<f64> = positive.iter().map(|r| r.ln()).collect();
            let fit = linear_fit(&xs, &ys);
            criteria.push(CriterionOutcome::new(
                "geometric_decay_fit",
                fit.r2 >= min_r2,
                format!(
                    "log-residual line fit: slope {}, r2 {} vs required {}",
                    fmt_f64(fit.slope),
                    fmt_f64(fit.r2),
                    fmt_f64(min_r2)
                ),
            ));
            fit_value = to_value(&fit);
        } else {
            criteria.push(CriterionOutcome::new(
                "geometric_decay_fit",
                false,
                format!(
                    "need at least 3 positive residuals to fit a decay rate, got {}",
                    positive.len()
                ),
            ));
        }
    }

    if let Some(want) = &t.expect_y0 {
        criteria.push(y0_criterion(&y0, want, t.y0_tolerance));
    }

    if let Some(bound) = t.agree_with_lsmc {
        let lsmc = artifacts.lsmc.as_ref().expect("plan validated: solve_lsmc precedes");
        let (lsmc_y0, _) = start_values(lsmc);
        let worst = y0
            .iter()
            .zip(&lsmc_y0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0_f64, f64::max);
        criteria.push(CriterionOutcome::new(
            "agrees_with_regression_solve",
            worst <= bound,
            format!(
                "worst start-value gap between the two solvers {} vs bound {}",
                fmt_f64(worst),
                fmt_f64(bound)
            ),
        ));
    }

    let mut csv = String::from("sweep,residual\n");
    for (k, r) in history.iter().enumerate() {
        csv.push_str(&format!("{},{}\n", k + 1, fmt_f64(*r)));
    }
    write_file(&settings.out_dir, "picard_residuals.csv", csv.as_bytes())?;

    let metrics = json!({
        "degree": t.degree,
        "max_sweeps": t.max_sweeps,
        "tol": t.tol,
        "sweeps_used": sol.picard_iterations(),
        "residual_history": history,
        "decay_fit": fit_value,
        "y0": y0,
        "y0_stderr": y0_stderr,
    });
    Ok((criteria, metrics, vec!["picard_residuals.csv".to_string()]))
}

fn run_solve_fd(
    t: &SolveFdTask,
    v: &ValidatedScenario,
    settings: &RunSettings,
    artifacts: &mut Artifacts,
) -> Result<TaskOutput, TaskError> {
    let mesh = SpaceTimeMesh::new(t.x_lo, t.x_hi, t.interior_columns, t.time_steps)
        .map_err(solver)?;
    let scheme = match t.scheme {
        SchemeChoice::SemiImplicit => Scheme::SemiImplicit,
        SchemeChoice::Explicit => Scheme::Explicit,
    };
    let sol = with_coeffs!(v.effective, |c| solve_fd(c, &mesh, scheme)).map_err(solver)?;

    let (finite, scale) = scan_grid(&sol);
    let criteria = vec![CriterionOutcome::new(
        "grid_values_finite",
        finite,
        if finite {
            format!("all nodes finite; sup magnitude {}", fmt_f64(scale))
        } else {
            "a grid node is non-finite (unstable march?)".to_string()
        },
    )];

    sol.save(&settings.out_dir.join("grid.fbgd")).map_err(solver)?;
    let mut files = vec!["grid.fbgd".to_string()];
    if t.save_csv {
        for i in 0..sol.component_count() {
            let mut buf = Vec::new();
            sol.write_csv(i, &mut buf).map_err(solver)?;
            let name = format!("grid_component_{}.csv", i + 1);
            write_file(&settings.out_dir, &name, &buf)?;
            files.push(name);
        }
    }

    let center = mesh.columns() / 2;
    let metrics = json!({
        "x_lo": t.x_lo,
        "x_hi": t.x_hi,
        "interior_columns": t.interior_columns,
        "time_steps": t.time_steps,
        "dx": mesh.dx(),
        "dt": sol.dt(),
        "scheme": match t.scheme {
            SchemeChoice::SemiImplicit => "semi_implicit",
            SchemeChoice::Explicit => "explicit",
        },
        "sup_magnitude": scale,
        "start_center_values": (0..sol.component_count())
            .map(|i| sol.value(i, 0, center))
            .collect::<Vec<f64>>(),
    });
    artifacts.grid = Some(sol);
    Ok((criteria, metrics, files))
}

fn run_cross_validate(
    t: &CrossValidateTask,
    task_seed: u64,
    v: &ValidatedScenario,
    settings: &RunSettings,
    artifacts: &mut Artifacts,
) -> Result<TaskOutput, TaskError> {
    let grid = artifacts.grid.as_ref().expect("plan validated: solve_fd precedes");
    let options = CrossValidateOptions {
        n_paths: t.paths,
        time_steps: t.steps,
        basis_degree: t.degree,
        seed: task_seed,
    };
    let cv = with_coeffs!(v.effective, |c| cross_validate(c, grid, &t.probes, &options))
        .map_err(solver)?;

    let worst = cv
        .probes
        .iter()
        .max_by(|a, b| a.gap.abs().total_cmp(&b.gap.abs()))
        .expect("at least one probe point");
    let criteria = vec![CriterionOutcome::new(
        "probe_gaps_within_bound",
        cv.max_gap <= t.max_gap,
        format!(
            "largest grid-vs-Monte-Carlo gap {} vs bound {} (worst probe: t {}, x {}, component {})",
            fmt_f64(cv.max_gap),
            fmt_f64(t.max_gap),
            fmt_f64(worst.t),
            fmt_f64(worst.x),
            worst.component
        ),
    )];

    let mut csv = String::from("t,x,component,grid_value,mc_value,gap\n");
    for p in &cv.probes {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            fmt_f64(p.t),
            fmt_f64(p.x),
            p.component,
            fmt_f64(p.grid_value),
            fmt_f64(p.mc_value),
            fmt_f64(p.gap)
        ));
    }
    write_file(&settings.out_dir, "probes.csv", csv.as_bytes())?;

    let metrics = json!({
        "seed": task_seed,
        "paths": t.paths,
        "steps": t.steps,
        "degree": t.degree,
        "max_gap": cv.max_gap,
        "bound": t.max_gap,
        "probes": to_value(&cv.probes),
    });
    Ok((criteria, metrics, vec!["probes.csv".to_string()]))
}

fn compare_criteria(
    t: &CompareTask,
    report: &ComparisonReport,
    horizon: f64,
    audited_yz_lipschitz: Option<f64>,
) -> Vec<CriterionOutcome> {
    let mut criteria = Vec::new();

    let total_violations: usize = report.components.iter().map(|c| c.violations).sum();
    let min_gap = report
        .components
        .iter()
        .map(|c| c.min_gap)
        .fold(f64::INFINITY, f64::min);
    criteria.push(CriterionOutcome::new(
        "ordering_holds",
        report.all_ordered,
        format!(
            "{total_violations} node(s) violate the ordering beyond tolerance {}; \
             smallest pathwise gap {}",
            fmt_f64(report.tolerance),
            fmt_f64(min_gap)
        ),
    ));

    criteria.push(CriterionOutcome::new(
        "ordering_hypotheses_hold",
        !report.hypotheses_violated,
        if report.hypotheses_violated {
            "sampled driver/terminal ordering premises fail somewhere in the box".to_string()
        } else {
            "driver and terminal ordering premises hold over the sampled box".to_string()
        },
    ));

    if let Some(factor) = t.max_quotient_factor {
        let audited = audited_yz_lipschitz.expect("plan validated: audit precedes");
        let sampled = report.max_abs_own_quotient + report.max_abs_slope_quotient;
        let bound = factor * audited + 1e-9;
        criteria.push(CriterionOutcome::new(
            "linearization_quotients_bounded",
            sampled <= bound,
            format!(
                "|own quotient| + |slope quotient| = {} + {} = {} vs {} x audited constant {} = {}",
                fmt_f64(report.max_abs_own_quotient),
                fmt_f64(report.max_abs_slope_quotient),
                fmt_f64(sampled),
                fmt_f64(factor),
                fmt_f64(audited),
                fmt_f64(bound)
            ),
        ));
    }

    if let Some(rate) = t.expected_gap_rate {
        let mut worst = 0.0_f64;
        let mut at = (0usize, 0usize);
        for comp in &report.components {
            let steps = comp.mean_gap_by_step.len() - 1;
            for (k, gap) in comp.mean_gap_by_step.iter().enumerate() {
                let t_k = horizon * k as f64 / steps as f64;
                let want = rate * (horizon - t_k);
                let dev = (gap - want).abs();
                if dev > worst {
                    worst = dev;
                    at = (comp.component, k);
                }
            }
        }
        criteria.push(CriterionOutcome::new(
            "mean_gap_follows_expected_rate",
            worst <= t.expected_gap_tolerance,
            format!(
                "worst deviation from {} x (horizon - t) is {} (component {}, step {}) vs bound {}",
                fmt_f64(rate),
                fmt_f64(worst),
                at.0,
                at.1,
                fmt_f64(t.expected_gap_tolerance)
            ),
        ));
    }

    criteria
}

fn run_compare(
    t: &CompareTask,
    task_seed: u64,
    v: &ValidatedScenario,
    settings: &RunSettings,
    artifacts: &mut Artifacts,
) -> Result<TaskOutput, TaskError> {
    let lower_eff = v.effective_compare.as_ref().expect("plan validated: compare_problem present");
    let horizon = v.effective.horizon();

    let tg = TimeGrid::new(0.0, horizon, t.steps).map_err(solver)?;
    let ens = with_coeffs!(v.effective, |c| simulate(c, tg, t.x0, t.paths, task_seed))
        .map_err(solver)?;
    let sol_upper =
        with_coeffs!(v.effective, |c| solve_lsmc(c, &ens, t.degree)).map_err(solver)?;
    let sol_lower =
        with_coeffs!(*lower_eff, |c| solve_lsmc(c, &ens, t.degree)).map_err(solver)?;

    let mut options = ComparisonOptions::new(t.tolerance);
    options.seed = subseed(task_seed, 1);
    let report = with_coeffs!(v.effective, |up| with_coeffs!(*lower_eff, |lo| {
        certify_comparison(up, lo, &ens, &sol_upper, &sol_lower, &options)
    }))
    .map_err(solver)?;

    let audited = artifacts.audit_primary.as_ref().map(|primary| {
        let mut l = primary
            .drivers
            .iter()
            .map(|d| d.lipschitz_yz_max())
            .fold(0.0_f64, f64::max);
        if let Some(compare) = &artifacts.audit_compare {
            l = compare
                .drivers
                .iter()
                .map(|d| d.lipschitz_yz_max())
                .fold(l, f64::max);
        }
        l
    });
    let criteria = compare_criteria(t, &report, horizon, audited);

    let mut csv = String::from("step,t");
    for comp in &report.components {
        csv.push_str(&format!(",mean_gap_c{}", comp.component));
    }
    csv.push('\n');
    for k in 0..=t.steps {
        let t_k = horizon * k as f64 / t.steps as f64;
        csv.push_str(&format!("{},{}", k, fmt_f64(t_k)));
        for comp in &report.components {
            csv.push_str(&format!(",{}", fmt_f64(comp.mean_gap_by_step[k])));
        }
        csv.push('\n');
    }
    write_file(&settings.out_dir, "comparison_gap.csv", csv.as_bytes())?;

    let metrics = json!({
        "seed": task_seed,
        "x0": t.x0,
        "paths": t.paths,
        "steps": t.steps,
        "degree": t.degree,
        "tolerance": t.tolerance,
        "upper_label": report.upper_label,
        "lower_label": report.lower_label,
        "all_ordered": report.all_ordered,
        "hypotheses_violated": report.hypotheses_violated,
        "max_abs_own_quotient": report.max_abs_own_quotient,
        "max_abs_slope_quotient": report.max_abs_slope_quotient,
        "audited_driver_lipschitz": audited,
        "components": report
            .components
            .iter()
            .map(|c| json!({
                "component": c.component,
                "violations": c.violations,
                "min_gap": c.min_gap,
                "worst_violation": c.worst_violation,
                "terminal_gap_min": c.terminal_gap_min,
                "driver_gap_min": c.driver_gap_min,
                "cross_term_min": c.cross_term_min,
                "sampled_driver_gap_min": c.sampled_driver_gap_min,
            }))
            .collect::<Vec<_>>(),
    });
    Ok((criteria, metrics, vec!["comparison_gap.csv".to_string()]))
}

fn run_mollify_sweep(
    t: &MollifySweepTask,
    settings: &RunSettings,
) -> Result<TaskOutput, TaskError> {
    let probes: Vec<f64> = (0..t.probe_count)
        .map(|i| {
            t.probe_lo + (t.probe_hi - t.probe_lo) * i as f64 / (t.probe_count - 1) as f64
        })
        .collect();

    let mut criteria = Vec::new();
    let mut csv = String::from("coefficient,epsilon,sup_error,ratio\n");
    let mut sweeps = serde_json::Map::new();

    for check in &t.checks {
        let expr = parse_x(&check.coefficient, "sweep coefficient").map_err(solver)?;
        let points = epsilon_sweep(&expr, &t.epsilons, &probes).map_err(solver)?;
        for p in &points {
            csv.push_str(&format!(
                "{},{},{},{}\n",
                check.coefficient,
                fmt_f64(p.epsilon),
                fmt_f64(p.sup_error),
                fmt_f64(p.ratio_to_epsilon)
            ));
        }
        let sups: Vec<f64> = points.iter().map(|p| p.sup_error).collect();
        let ratios: Vec<f64> = points.iter().map(|p| p.ratio_to_epsilon).collect();
        let name = |what: &str| format!("{}: {what}", check.coefficient);

        if check.expect_decreasing {
            let ok = sups.windows(2).all(|w| w[1] < w[0]);
            criteria.push(CriterionOutcome::new(
                &name("sup_error_decreasing"),
                ok,
                format!(
                    "sup errors [{}] across widths [{}]",
                    sups.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(", "),
                    t.epsilons.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(", ")
                ),
            ));
        }
        if let Some(spread) = check.max_ratio_spread {
            let lo = ratios.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = ratios.iter().copied().fold(0.0_f64, f64::max);
            let (ok, detail) = if lo <= 0.0 {
                (false, format!("a ratio is non-positive ({})", fmt_f64(lo)))
            } else {
                (
                    hi / lo <= spread,
                    format!(
                        "ratio spread max/min = {}/{} = {} vs bound {}",
                        fmt_f64(hi),
                        fmt_f64(lo),
                        fmt_f64(hi / lo),
                        fmt_f64(spread)
                    ),
                )
            };
            criteria.push(CriterionOutcome::new(&name("ratio_spread_bounded"), ok, detail));
        }
        if let Some(want) = check.expect_ratio {
            let worst = ratios
                .iter()
                .map(|r| (r - want).abs())
                .fold(0.0_f64, f64::max);
            let bound = check.ratio_rel_tol * want.abs();
            criteria.push(CriterionOutcome::new(
                &name("ratio_matches_expected"),
                worst <= bound,
                format!(
                    "ratios [{}] vs expected {} (worst deviation {} vs bound {})",
                    ratios.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(", "),
                    fmt_f64(want),
                    fmt_f64(worst),
                    fmt_f64(bound)
                ),
            ));
        }
        if let Some(bound) = check.max_ratio {
            let hi = ratios.iter().copied().fold(0.0_f64, f64::max);
            criteria.push(CriterionOutcome::new(
                &name("ratio_below_bound"),
                hi <= bound,
                format!("largest ratio {} vs bound {}", fmt_f64(hi), fmt_f64(bound)),
            ));
        }
        if let Some(bound) = check.max_sup_error {
            let hi = sups.iter().copied().fold(0.0_f64, f64::max);
            criteria.push(CriterionOutcome::new(
                &name("sup_error_below_bound"),
                hi <= bound,
                format!("largest sup error {} vs bound {}", fmt_f64(hi), fmt_f64(bound)),
            ));
        }
        sweeps.insert(check.coefficient.clone(), to_value(&points));
    }

    write_file(&settings.out_dir, "mollify_sweep.csv", csv.as_bytes())?;
    let metrics = json!({
        "probe_lo": t.probe_lo,
        "probe_hi": t.probe_hi,
        "probe_count": t.probe_count,
        "epsilons": t.epsilons,
        "sweeps": serde_json::Value::Object(sweeps),
    });
    Ok((criteria, metrics, vec!["mollify_sweep.csv".to_string()]))
}

fn run_local_expansion(
    t: &LocalExpansionTask,
    task_seed: u64,
    v: &ValidatedScenario,
    settings: &RunSettings,
) -> Result<TaskOutput, TaskError> {
    let gamma: Vec<ExprAst> = t
        .test_functions
        .iter()
        .map(|s| parse_tx(s, "test function"))
        .collect::<Result<_, _>>()
        .map_err(solver)?;
    let options = ExpansionOptions {
        n_paths: t.paths,
        time_step: t.time_step,
        basis_degree: t.degree,
        ode_substeps: t.ode_substeps,
        seed: task_seed,
    };
    let probe = with_coeffs!(v.effective, |c| local_expansion_probe(
        c, &gamma, t.t, t.x, &t.deltas, &options
    ))
    .map_err(solver)?;

    let mut criteria = Vec::new();
    if let Some(min_rate) = t.min_rate {
        let mut lines = Vec::new();
        let mut ok = true;
        for (i, fit) in probe.rate_fits.iter().enumerate() {
            match fit {
                Some(f) => {
                    if f.slope < min_rate {
                        ok = false;
                    }
                    lines.push(format!(
                        "component {}: rate {} (r2 {})",
                        i + 1,
                        fmt_f64(f.slope),
                        fmt_f64(f.r2)
                    ));
                }
                None => {
                    ok = false;
                    lines.push(format!("component {}: no power-law fit", i + 1));
                }
            }
        }
        criteria.push(CriterionOutcome::new(
            "gap_decay_rate_meets_bound",
            ok,
            format!("required rate {}; {}", fmt_f64(min_rate), lines.join("; ")),
        ));
    }
    if let Some(bound) = t.max_identity_residual {
        criteria.push(CriterionOutcome::new(
            "subtraction_identity_tight",
            probe.max_identity_residual <= bound,
            format!(
                "worst relative identity residual {} vs bound {}",
                fmt_f64(probe.max_identity_residual),
                fmt_f64(bound)
            ),
        ));
    }

    let mut csv = String::from("delta,component,shifted_start,frozen_start,gap\n");
    for point in &probe.points {
        for i in 0..point.gap.len() {
            csv.push_str(&format!(
                "{},{},{},{},{}\n",
                fmt_f64(point.delta),
                i + 1,
                fmt_f64(point.shifted_start[i]),
                fmt_f64(point.frozen_start[i]),
                fmt_f64(point.gap[i])
            ));
        }
    }
    write_file(&settings.out_dir, "expansion.csv", csv.as_bytes())?;

    let metrics = json!({
        "seed": task_seed,
        "probe": to_value(&probe),
    });
    Ok((criteria, metrics, vec!["expansion.csv".to_string()]))
}

fn viscosity_csv_rows(csv: &mut String, label: &str, report: &ViscosityReport) {
    for comp in &report.components {
        for (side, ok, residual, at) in [
            (
                "sub",
                comp.sub_ok,
                comp.worst_sub_residual,
                &comp.worst_sub_location,
            ),
            (
                "super",
                comp.super_ok,
                comp.worst_super_residual,
                &comp.worst_super_location,
            ),
        ] {
            csv.push_str(&format!(
                "{label},{},{side},{ok},{},{},{},{},{},{}\n",
                comp.component,
                fmt_f64(residual),
                fmt_f64(at.t),
                fmt_f64(at.x),
                at.level,
                at.column,
                fmt_f64(at.curvature)
            ));
        }
    }
}

fn run_check_viscosity(
    t: &CheckViscosityTask,
    v: &ValidatedScenario,
    settings: &RunSettings,
    artifacts: &mut Artifacts,
) -> Result<TaskOutput, TaskError> {
    let grid = artifacts.grid.as_ref().expect("plan validated: solve_fd precedes");
    let n = grid.component_count();
    let mesh = *grid.mesh();
    let horizon = grid.horizon();

    let mut criteria = Vec::new();
    let mut csv =
        String::from("candidate,component,side,ok,worst_residual,t,x,level,column,curvature\n");
    let mut reports = serde_json::Map::new();

    if t.candidates.is_empty() {
        let (_, scale) = scan_grid(grid);
        let tolerance = t.tolerance_rel * (1.0 + scale);
        let report = with_coeffs!(v.effective, |c| check_viscosity(
            grid,
            c,
            &t.curvatures,
            tolerance
        ))
        .map_err(solver)?;
        let worst_sub = report
            .components
            .iter()
            .map(|c| c.worst_sub_residual)
            .fold(0.0_f64, f64::min);
        let worst_super = report
            .components
            .iter()
            .map(|c| c.worst_super_residual)
            .fold(0.0_f64, f64::max);
        criteria.push(CriterionOutcome::new(
            "marched_field_is_subsolution",
            report.all_sub_ok,
            format!(
                "worst above-touching residual {} vs tolerance {}",
                fmt_f64(worst_sub),
                fmt_f64(tolerance)
            ),
        ));
        criteria.push(CriterionOutcome::new(
            "marched_field_is_supersolution",
            report.all_super_ok,
            format!(
                "worst below-touching residual {} vs tolerance {}",
                fmt_f64(worst_super),
                fmt_f64(tolerance)
            ),
        ));
        viscosity_csv_rows(&mut csv, "marched-field", &report);
        reports.insert("marched-field".to_string(), to_value(&report));
    } else {
        for cand in &t.candidates {
            let exprs: Vec<ExprAst> = cand
                .components
                .iter()
                .map(|s| parse_tx(s, "candidate component"))
                .collect::<Result<_, _>>()
                .map_err(solver)?;
            let tab = GridSolution::from_fn(mesh, horizon, n, |i, tt, xx| {
                exprs[i].eval(&[tt, xx]).unwrap_or(f64::NAN)
            })
            .map_err(solver)?;
            let (finite, scale) = scan_grid(&tab);
            if !finite {
                return Err(TaskError(format!(
                    "candidate {:?} evaluates non-finite on the mesh",
                    cand.label
                )));
            }
            let tolerance = t.tolerance_rel * (1.0 + scale);
            let report = with_coeffs!(v.effective, |c| check_viscosity(
                &tab,
                c,
                &t.curvatures,
                tolerance
            ))
            .map_err(solver)?;

            let name = |what: &str| format!("{}: {what}", cand.label);
            let worst_sub = report
                .components
                .iter()
                .map(|c| c.worst_sub_residual)
                .fold(0.0_f64, f64::min);
            let worst_super = report
                .components
                .iter()
                .map(|c| c.worst_super_residual)
                .fold(0.0_f64, f64::max);
            criteria.push(CriterionOutcome::new(
                &name("subsolution_check_as_expected"),
                report.all_sub_ok == cand.expect_sub_ok,
                format!(
                    "sub check {} (expected {}); worst residual {} vs tolerance {}",
                    if report.all_sub_ok { "passed" } else { "failed" },
                    if cand.expect_sub_ok { "pass" } else { "fail" },
                    fmt_f64(worst_sub),
                    fmt_f64(tolerance)
                ),
            ));
            criteria.push(CriterionOutcome::new(
                &name("supersolution_check_as_expected"),
                report.all_super_ok == cand.expect_super_ok,
                format!(
                    "super check {} (expected {}); worst residual {} vs tolerance {}",
                    if report.all_super_ok { "passed" } else { "failed" },
                    if cand.expect_super_ok { "pass" } else { "fail" },
                    fmt_f64(worst_super),
                    fmt_f64(tolerance)
                ),
            ));
            if let Some(want) = cand.expect_worst_abs {
                // The failing side's residual magnitude must land where the
                // detuning predicts.
                let got = if !cand.expect_sub_ok {
                    worst_sub.abs()
                } else {
                    worst_super.abs()
                };
                criteria.push(CriterionOutcome::new(
                    &name("failure_depth_matches_prediction"),
                    (got - want).abs() <= cand.worst_rel_tol * want,
                    format!(
                        "failing-side residual magnitude {} vs predicted {} (+/- {} relative)",
                        fmt_f64(got),
                        fmt_f64(want),
                        fmt_f64(cand.worst_rel_tol)
                    ),
                ));
            }
            viscosity_csv_rows(&mut csv, &cand.label, &report);
            reports.insert(cand.label.clone(), to_value(&report));
        }
    }

    write_file(&settings.out_dir, "viscosity.csv", csv.as_bytes())?;
    let metrics = json!({
        "curvatures": t.curvatures,
        "tolerance_rel": t.tolerance_rel,
        "reports": serde_json::Value::Object(reports),
    });
    Ok((criteria, metrics, vec!["viscosity.csv".to_string()]))
}

fn run_regularity(
    t: &RegularityTask,
    task_seed: u64,
    settings: &RunSettings,
    artifacts: &mut Artifacts,
) -> Result<TaskOutput, TaskError> {
    let grid = artifacts.grid.as_ref().expect("plan validated: solve_fd precedes");
    let n = grid.component_count();
    let report = regularity_audit(
        n,
        |i, tt, xx| grid.evaluate(i, tt, xx).map_err(|e| e.to_string()),
        t.box_t,
        t.box_x,
        t.n_pairs,
        &t.deltas,
        task_seed,
    )
    .map_err(solver)?;

    let mut criteria = Vec::new();
    let finite = report.x_lipschitz_estimate.is_finite()
        && report.linear_growth_ratio.is_finite()
        && report
            .holder_increments
            .iter()
            .all(|h| h.max_increment.is_finite());
    criteria.push(CriterionOutcome::new(
        "estimates_finite",
        finite,
        format!(
            "spatial Lipschitz {}, growth ratio {}",
            fmt_f64(report.x_lipschitz_estimate),
            fmt_f64(report.linear_growth_ratio)
        ),
    ));

    if t.expect_time_constant {
        criteria.push(CriterionOutcome::new(
            "time_constant_flagged",
            report.time_independent,
            if report.time_independent {
                "all sampled time increments vanish".to_string()
            } else {
                format!(
                    "expected a time-constant field, but increments reach {}",
                    fmt_f64(
                        report
                            .holder_increments
                            .iter()
                            .map(|h| h.max_increment)
                            .fold(0.0_f64, f64::max)
                    )
                )
            },
        ));
    } else if let Some(min_holder) = t.min_holder {
        let (passed, detail) = if report.time_independent {
            (
                true,
                "field is time-constant; exponent requirement is waived".to_string(),
            )
        } else {
            match &report.t_holder {
                Some(fit) => (
                    fit.slope >= min_holder,
                    format!(
                        "fitted time exponent {} (r2 {}) vs required {}",
                        fmt_f64(fit.slope),
                        fmt_f64(fit.r2),
                        fmt_f64(min_holder)
                    ),
                ),
                None => (
                    false,
                    "no exponent fit (an increment was exactly zero)".to_string(),
                ),
            }
        };
        criteria.push(CriterionOutcome::new(
            "time_modulus_meets_bound",
            passed,
            detail,
        ));
    }

    let mut predicted_value = serde_json::Value::Null;
    if let Some(factor) = t.max_lipschitz_factor {
        let predicted = artifacts
            .audit_primary
            .as_ref()
            .expect("plan validated: audit precedes")
            .predicted_x_lipschitz();
        let bound = factor * predicted + 1e-9 * (1.0 + predicted);
        criteria.push(CriterionOutcome::new(
            "spatial_lipschitz_within_prediction",
            report.x_lipschitz_estimate <= bound,
            format!(
                "sampled spatial Lipschitz {} vs {} x predicted {} = {}",
                fmt_f64(report.x_lipschitz_estimate),
                fmt_f64(factor),
                fmt_f64(predicted),
                fmt_f64(bound)
            ),
        ));
        predicted_value = json!(predicted);
    }

    let mut csv = String::from("delta,max_increment\n");
    for h in &report.holder_increments {
        csv.push_str(&format!("{},{}\n", fmt_f64(h.delta), fmt_f64(h.max_increment)));
    }
    write_file(&settings.out_dir, "holder.csv", csv.as_bytes())?;

    let metrics = json!({
        "seed": task_seed,
        "box_t": t.box_t,
        "box_x": t.box_x,
        "n_pairs": t.n_pairs,
        "predicted_x_lipschitz": predicted_value,
        "report": to_value(&report),
    });
    Ok((criteria, metrics, vec!["holder.csv".to_string()]))
}
