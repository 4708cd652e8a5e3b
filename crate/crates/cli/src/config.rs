//! Scenario configuration: the JSON schema, strict parsing, and pre-flight
//! validation.
//!
//! A scenario is a single JSON document — line-diffable and hand-editable —
//! with one `problem` section, an optional smoothing width, an optional
//! second problem section for ordering certificates, and an ordered `plan`
//! of tasks. Every task that consumes an artifact (a path ensemble, a
//! regression solution, a grid solution, an assumption audit) must be
//! preceded in the plan by the task that produces it; this is checked before
//! anything runs, so a bad plan is a configuration error, never a mid-run
//! crash.
//!
//! Parsing is strict: unknown top-level keys, unknown task names, and
//! unknown fields inside a task object are all rejected with a message
//! naming the offender. Scenario files are test fixtures; silently ignoring
//! a typo like `"epsilon"` for `"epsilons"` would let a misconfigured check
//! pass vacuously.

use serde::{Deserialize, Deserializer, Serialize};

use fbsde_core::problem::driver_vars;
use fbsde_core::{Coefficients, ExprAst, MollifiedProblem, ProblemSpec};

/// Everything that can go wrong before a single solver runs. The command
/// line maps any of these to exit code 2.
#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {detail}")]
    Io { path: String, detail: String },
    #[error("config {path} is not a valid scenario document: {detail}")]
    Parse { path: String, detail: String },
    #[error("invalid config: {detail}")]
    Invalid { detail: String },
}

fn invalid(detail: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        detail: detail.into(),
    }
}

/// One coefficient-system section: everything needed to build a
/// [`ProblemSpec`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    pub label: String,
    pub horizon: f64,
    pub drift: String,
    pub diffusion: String,
    pub drivers: Vec<String>,
    pub terminals: Vec<String>,
}

impl ProblemSection {
    pub fn build(&self) -> Result<ProblemSpec, ConfigError> {
        let drivers: Vec<&str> = self.drivers.iter().map(String::as_str).collect();
        let terminals: Vec<&str> = self.terminals.iter().map(String::as_str).collect();
        ProblemSpec::new(
            &self.label,
            self.horizon,
            &self.drift,
            &self.diffusion,
            &drivers,
            &terminals,
        )
        .map_err(|e| invalid(format!("problem section {:?}: {e}", self.label)))
    }
}

/// A full scenario document.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub label: String,
    #[serde(default)]
    pub description: String,
    pub seed: u64,
    /// Default output directory; `--out-dir` overrides it, and when both are
    /// absent reports land in `out/<label>`.
    #[serde(default)]
    pub output_dir: Option<String>,
    pub problem: ProblemSection,
    /// When present, every solver task runs on the Gaussian-smoothed system
    /// at this width; the assumption audit still inspects the raw
    /// coefficients (smoothing never enlarges the audited constants).
    #[serde(default)]
    pub mollify_epsilon: Option<f64>,
    /// Second system for `compare` tasks. The primary problem is the upper
    /// system, this one the lower; both must share the forward dynamics.
    #[serde(default)]
    pub compare_problem: Option<ProblemSection>,
    pub plan: Vec<TaskSpec>,
}

// ---------------------------------------------------------------------------
// Task parameter structs
// ---------------------------------------------------------------------------

fn d_true() -> bool {
    true
}
fn d_degree() -> usize {
    3
}
fn d_box_radius() -> f64 {
    5.0
}
fn d_audit_samples() -> usize {
    100_000
}
fn d_y0_tolerance() -> f64 {
    5e-2
}
fn d_max_sweeps() -> usize {
    10
}
fn d_picard_tol() -> f64 {
    1e-10
}
fn d_gap_tolerance() -> f64 {
    2e-3
}
fn d_probe_lo() -> f64 {
    -3.0
}
fn d_probe_hi() -> f64 {
    3.0
}
fn d_probe_count() -> usize {
    1201
}
fn d_ratio_rel_tol() -> f64 {
    0.05
}
fn d_time_step() -> f64 {
    1e-3
}
fn d_ode_substeps() -> usize {
    1000
}
fn d_curvatures() -> Vec<f64> {
    vec![0.5]
}
fn d_tolerance_rel() -> f64 {
    1e-3
}
fn d_worst_rel_tol() -> f64 {
    0.2
}
fn d_n_pairs() -> usize {
    4000
}

/// Sample coefficient Lipschitz/monotonicity constants of the raw problem.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditTask {
    #[serde(default = "d_box_radius")]
    pub box_radius: f64,
    #[serde(default = "d_audit_samples")]
    pub samples: usize,
}

/// Produce the forward path ensemble later solves regress on.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateTask {
    pub x0: f64,
    pub paths: usize,
    pub steps: usize,
    /// Also write the full ensemble as CSV (large; off by default).
    #[serde(default)]
    pub save_csv: bool,
}

/// Single-sweep regression solve on the simulated ensemble.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveLsmcTask {
    #[serde(default = "d_degree")]
    pub degree: usize,
    /// Expected start values per component; checked within `y0_tolerance`.
    #[serde(default)]
    pub expect_y0: Option<Vec<f64>>,
    #[serde(default = "d_y0_tolerance")]
    pub y0_tolerance: f64,
}

/// Iterated fixed-point solve on the simulated ensemble.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolvePicardTask {
    #[serde(default = "d_degree")]
    pub degree: usize,
    #[serde(default = "d_max_sweeps")]
    pub max_sweeps: usize,
    #[serde(default = "d_picard_tol")]
    pub tol: f64,
    /// Require every successive residual ratio to be below one.
    #[serde(default)]
    pub expect_contraction: bool,
    /// Require the log-residual linear fit to reach this R².
    #[serde(default)]
    pub min_fit_r2: Option<f64>,
    #[serde(default)]
    pub expect_y0: Option<Vec<f64>>,
    #[serde(default = "d_y0_tolerance")]
    pub y0_tolerance: f64,
    /// Require start values to agree with the earlier regression solve
    /// within this bound (needs a `solve_lsmc` task earlier in the plan).
    #[serde(default)]
    pub agree_with_lsmc: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeChoice {
    SemiImplicit,
    Explicit,
}

impl Default for SchemeChoice {
    fn default() -> Self {
        SchemeChoice::SemiImplicit
    }
}

/// March the coupled system on a space-time grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveFdTask {
    pub x_lo: f64,
    pub x_hi: f64,
    pub interior_columns: usize,
    pub time_steps: usize,
    #[serde(default)]
    pub scheme: SchemeChoice,
    /// Also write one CSV per component (large; off by default). The binary
    /// grid cache is always written.
    #[serde(default)]
    pub save_csv: bool,
}

/// Independent Monte Carlo re-solve at probe points, compared to the grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrossValidateTask {
    /// `(t, x)` probe points, all strictly before the horizon.
    pub probes: Vec<(f64, f64)>,
    pub paths: usize,
    pub steps: usize,
    #[serde(default = "d_degree")]
    pub degree: usize,
    /// Pass criterion: largest grid-vs-Monte-Carlo discrepancy allowed.
    pub max_gap: f64,
}

/// Solve the primary (upper) and secondary (lower) systems on one ensemble
/// and certify node-wise ordering of the solutions.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareTask {
    pub x0: f64,
    pub paths: usize,
    pub steps: usize,
    #[serde(default = "d_degree")]
    pub degree: usize,
    /// Pointwise ordering slack at every retained node.
    pub tolerance: f64,
    /// Pass criterion: sampled `|a| + |b|` linearization quotients must stay
    /// below this multiple of the audited driver constant (needs an `audit`
    /// task earlier in the plan).
    #[serde(default)]
    pub max_quotient_factor: Option<f64>,
    /// Expected mean gap law `rate * (horizon - t)`; checked per retained
    /// time step within `expected_gap_tolerance`.
    #[serde(default)]
    pub expected_gap_rate: Option<f64>,
    #[serde(default = "d_gap_tolerance")]
    pub expected_gap_tolerance: f64,
}

/// One coefficient's expectations in a smoothing-error sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepCheck {
    /// Single-argument expression in `x`.
    pub coefficient: String,
    /// Require sup errors to decrease strictly as the width shrinks.
    #[serde(default)]
    pub expect_decreasing: bool,
    /// Require max/min of `sup_error / epsilon` across widths to stay below
    /// this factor.
    #[serde(default)]
    pub max_ratio_spread: Option<f64>,
    /// Require every `sup_error / epsilon` to equal this value within
    /// `ratio_rel_tol` relative.
    #[serde(default)]
    pub expect_ratio: Option<f64>,
    #[serde(default = "d_ratio_rel_tol")]
    pub ratio_rel_tol: f64,
    /// Require every `sup_error / epsilon` to stay at or below this bound.
    #[serde(default)]
    pub max_ratio: Option<f64>,
    /// Require every sup error to stay at or below this bound.
    #[serde(default)]
    pub max_sup_error: Option<f64>,
}

/// Measure `sup |g_eps - g|` over a probe grid for each width and check the
/// per-coefficient expectations.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MollifySweepTask {
    pub epsilons: Vec<f64>,
    #[serde(default = "d_probe_lo")]
    pub probe_lo: f64,
    #[serde(default = "d_probe_hi")]
    pub probe_hi: f64,
    #[serde(default = "d_probe_count")]
    pub probe_count: usize,
    pub checks: Vec<SweepCheck>,
}

/// Short-horizon window solves against smooth test functions: fits the decay
/// rate of the gap to the frozen-coefficient expansion.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalExpansionTask {
    /// One expression in `(t, x)` per component.
    pub test_functions: Vec<String>,
    pub t: f64,
    pub x: f64,
    /// Window widths, strictly decreasing.
    pub deltas: Vec<f64>,
    pub paths: usize,
    #[serde(default = "d_time_step")]
    pub time_step: f64,
    #[serde(default = "d_degree")]
    pub degree: usize,
    #[serde(default = "d_ode_substeps")]
    pub ode_substeps: usize,
    /// Pass criterion: fitted gap exponent per component must reach this.
    #[serde(default)]
    pub min_rate: Option<f64>,
    /// Pass criterion: worst relative residual of the pathwise subtraction
    /// identity.
    #[serde(default)]
    pub max_identity_residual: Option<f64>,
}

/// A closed-form candidate to tabulate on the grid mesh and run through the
/// one-sided checks.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateSpec {
    pub label: String,
    /// One expression in `(t, x)` per component.
    pub components: Vec<String>,
    #[serde(default = "d_true")]
    pub expect_sub_ok: bool,
    #[serde(default = "d_true")]
    pub expect_super_ok: bool,
    /// When one check is expected to fail: the failing check's worst
    /// residual magnitude, verified within `worst_rel_tol` relative.
    #[serde(default)]
    pub expect_worst_abs: Option<f64>,
    #[serde(default = "d_worst_rel_tol")]
    pub worst_rel_tol: f64,
}

/// Run the one-sided generator checks, either on the grid solution itself
/// (no candidates listed) or on tabulated closed-form candidates.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckViscosityTask {
    #[serde(default = "d_curvatures")]
    pub curvatures: Vec<f64>,
    /// Absolute tolerance is `tolerance_rel * (1 + scale)` with `scale` the
    /// checked field's sup norm.
    #[serde(default = "d_tolerance_rel")]
    pub tolerance_rel: f64,
    #[serde(default)]
    pub candidates: Vec<CandidateSpec>,
}

/// Sample Lipschitz, growth, and time-modulus estimates of the grid field.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularityTask {
    #[serde(default = "d_n_pairs")]
    pub n_pairs: usize,
    /// Time-increment widths, in the order the report lists them.
    pub deltas: Vec<f64>,
    pub box_t: (f64, f64),
    pub box_x: (f64, f64),
    /// Pass criterion: fitted time exponent must reach this (waived when
    /// the field is flagged time-constant).
    #[serde(default)]
    pub min_holder: Option<f64>,
    /// Pass criterion: sampled spatial Lipschitz estimate must stay below
    /// this multiple of the audit's predicted constant (needs an `audit`
    /// task earlier in the plan).
    #[serde(default)]
    pub max_lipschitz_factor: Option<f64>,
    /// Require the field to be flagged time-constant.
    #[serde(default)]
    pub expect_time_constant: bool,
}

// ---------------------------------------------------------------------------
// The tagged task enum
// ---------------------------------------------------------------------------

/// One plan entry. In JSON: an object with a `"task"` tag naming the kind
/// and the kind's own fields alongside it.
#[derive(Debug, Clone)]
pub enum TaskSpec {
    Audit(AuditTask),
    Simulate(SimulateTask),
    SolveLsmc(SolveLsmcTask),
    SolvePicard(SolvePicardTask),
    SolveFd(SolveFdTask),
    CrossValidate(CrossValidateTask),
    Compare(CompareTask),
    MollifySweep(MollifySweepTask),
    LocalExpansion(LocalExpansionTask),
    CheckViscosity(CheckViscosityTask),
    Regularity(RegularityTask),
}

pub const TASK_NAMES: &[&str] = &[
    "audit",
    "simulate",
    "solve_lsmc",
    "solve_picard",
    "solve_fd",
    "cross_validate",
    "compare",
    "mollify_sweep",
    "local_expansion",
    "check_viscosity",
    "regularity",
];

impl TaskSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            TaskSpec::Audit(_) => "audit",
            TaskSpec::Simulate(_) => "simulate",
            TaskSpec::SolveLsmc(_) => "solve_lsmc",
            TaskSpec::SolvePicard(_) => "solve_picard",
            TaskSpec::SolveFd(_) => "solve_fd",
            TaskSpec::CrossValidate(_) => "cross_validate",
            TaskSpec::Compare(_) => "compare",
            TaskSpec::MollifySweep(_) => "mollify_sweep",
            TaskSpec::LocalExpansion(_) => "local_expansion",
            TaskSpec::CheckViscosity(_) => "check_viscosity",
            TaskSpec::Regularity(_) => "regularity",
        }
    }
}

// Manual dispatch instead of serde's internally-tagged derive: the derive
// cannot combine an inner tag with `deny_unknown_fields`, and unknown fields
// inside a task object must be hard errors (see module docs).
impl<'de> Deserialize<'de> for TaskSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let mut obj = serde_json::Map::<String, serde_json::Value>::deserialize(d)?;
        let tag = match obj.remove("task") {
            Some(serde_json::Value::String(s)) => s,
            Some(other) => {
                return Err(D::Error::custom(format!(
                    "the \"task\" tag must be a string, got {other}"
                )))
            }
            None => {
                return Err(D::Error::custom(
                    "plan entry is missing its \"task\" tag".to_string(),
                ))
            }
        };
        let rest = serde_json::Value::Object(obj);
        fn fields<T: serde::de::DeserializeOwned, E: serde::de::Error>(
            tag: &str,
            rest: serde_json::Value,
        ) -> Result<T, E> {
            serde_json::from_value(rest).map_err(|e| E::custom(format!("in {tag} task: {e}")))
        }
        Ok(match tag.as_str() {
            "audit" => TaskSpec::Audit(fields::<_, D::Error>(&tag, rest)?),
            "simulate" => TaskSpec::Simulate(fields::<_, D::Error>(&tag, rest)?),
            "solve_lsmc" => TaskSpec::SolveLsmc(fields::<_, D::Error>(&tag, rest)?),
            "solve_picard" => TaskSpec::SolvePicard(fields::<_, D::Error>(&tag, rest)?),
            "solve_fd" => TaskSpec::SolveFd(fields::<_, D::Error>(&tag, rest)?),
            "cross_validate" => TaskSpec::CrossValidate(fields::<_, D::Error>(&tag, rest)?),
            "compare" => TaskSpec::Compare(fields::<_, D::Error>(&tag, rest)?),
            "mollify_sweep" => TaskSpec::MollifySweep(fields::<_, D::Error>(&tag, rest)?),
            "local_expansion" => TaskSpec::LocalExpansion(fields::<_, D::Error>(&tag, rest)?),
            "check_viscosity" => TaskSpec::CheckViscosity(fields::<_, D::Error>(&tag, rest)?),
            "regularity" => TaskSpec::Regularity(fields::<_, D::Error>(&tag, rest)?),
            other => {
                return Err(D::Error::custom(format!(
                    "unknown task {other:?}; expected one of {}",
                    TASK_NAMES.join(", ")
                )))
            }
        })
    }
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

/// The coefficient system tasks actually run on: the raw problem, or its
/// Gaussian smoothing when the scenario sets a width.
#[derive(Debug)]
pub enum Effective {
    Raw(ProblemSpec),
    Smoothed(MollifiedProblem),
}

impl Effective {
    pub fn component_count(&self) -> usize {
        match self {
            Effective::Raw(p) => p.component_count(),
            Effective::Smoothed(m) => m.component_count(),
        }
    }

    pub fn horizon(&self) -> f64 {
        match self {
            Effective::Raw(p) => p.horizon(),
            Effective::Smoothed(m) => m.horizon(),
        }
    }
}

/// Run `body` with the effective system bound as a concrete
/// [`fbsde_core::Coefficients`] implementor (the solver entry points are
/// generic, not object-safe-by-reference).
#[macro_export]
macro_rules! with_coeffs {
    ($eff:expr, |$c:ident| $body:expr) => {
        match &$eff {
            $crate::config::Effective::Raw($c) => $body,
            $crate::config::Effective::Smoothed($c) => $body,
        }
    };
}

/// Outcome of pre-flight validation: built systems plus the original config.
#[derive(Debug)]
pub struct ValidatedScenario {
    /// Raw primary problem (what the audit inspects).
    pub raw_primary: ProblemSpec,
    /// System all solver tasks run on.
    pub effective: Effective,
    /// Lower system for `compare` tasks, smoothed under the same width.
    pub effective_compare: Option<Effective>,
    /// Raw lower problem (audited alongside the primary when present).
    pub raw_compare: Option<ProblemSpec>,
}

fn build_effective(
    section: &ProblemSection,
    eps: Option<f64>,
) -> Result<Effective, ConfigError> {
    let spec = section.build()?;
    match eps {
        None => Ok(Effective::Raw(spec)),
        Some(e) => MollifiedProblem::new(spec, e)
            .map(Effective::Smoothed)
            .map_err(|err| invalid(format!("cannot smooth problem {:?}: {err}", section.label))),
    }
}

/// Parse an expression in `(t, x)` — the form grid candidates and expansion
/// test functions take.
pub fn parse_tx(src: &str, context: &str) -> Result<ExprAst, ConfigError> {
    ExprAst::parse(src, &["t", "x"])
        .map_err(|e| invalid(format!("{context}: cannot parse {src:?} in (t, x): {e}")))
}

/// Parse a single-argument expression in `x` (sweep coefficients).
pub fn parse_x(src: &str, context: &str) -> Result<ExprAst, ConfigError> {
    ExprAst::parse(src, &["x"])
        .map_err(|e| invalid(format!("{context}: cannot parse {src:?} in (x): {e}")))
}

/// Check the whole document: problems build, expressions parse, counts
/// match, numeric parameters are sane, and every task's inputs are produced
/// earlier in the plan.
pub fn validate(cfg: &ScenarioConfig) -> Result<ValidatedScenario, ConfigError> {
    if cfg.label.is_empty() {
        return Err(invalid("scenario label must not be empty"));
    }
    if cfg.plan.is_empty() {
        return Err(invalid("plan must contain at least one task"));
    }
    if let Some(eps) = cfg.mollify_epsilon {
        if !(eps.is_finite() && eps > 0.0) {
            return Err(invalid(format!(
                "mollify_epsilon must be finite and positive, got {eps}"
            )));
        }
    }

    let raw_primary = cfg.problem.build()?;
    let effective = build_effective(&cfg.problem, cfg.mollify_epsilon)?;
    let n = raw_primary.component_count();
    let horizon = raw_primary.horizon();

    let (raw_compare, effective_compare) = match &cfg.compare_problem {
        None => (None, None),
        Some(section) => {
            let raw = section.build()?;
            if raw.component_count() != n {
                return Err(invalid(format!(
                    "compare_problem has {} components, the primary problem {n}",
                    raw.component_count()
                )));
            }
            if (raw.horizon() - horizon).abs() > 1e-12 * (1.0 + horizon.abs()) {
                return Err(invalid(format!(
                    "compare_problem horizon {} differs from the primary horizon {horizon}",
                    raw.horizon()
                )));
            }
            if section.drift != cfg.problem.drift || section.diffusion != cfg.problem.diffusion {
                return Err(invalid(
                    "compare_problem must share the primary problem's drift and diffusion \
                     (one forward ensemble drives both backward solves)",
                ));
            }
            let eff = build_effective(section, cfg.mollify_epsilon)?;
            (Some(raw), Some(eff))
        }
    };

    let mut has_paths = false;
    let mut has_lsmc = false;
    let mut has_audit = false;
    // Bounds of the most recent grid, for domain checks on its consumers.
    let mut mesh_bounds: Option<(f64, f64)> = None;

    for (idx, task) in cfg.plan.iter().enumerate() {
        let at = |what: &str| format!("plan[{idx}] ({}): {what}", task.kind());
        let need = |ok: bool, what: &str| -> Result<(), ConfigError> {
            if ok {
                Ok(())
            } else {
                Err(invalid(at(what)))
            }
        };
        match task {
            TaskSpec::Audit(t) => {
                need(
                    t.box_radius.is_finite() && t.box_radius > 0.0,
                    "box_radius must be finite and positive",
                )?;
                need(t.samples > 0, "samples must be positive")?;
                has_audit = true;
            }
            TaskSpec::Simulate(t) => {
                need(t.paths >= 2, "need at least two paths")?;
                need(t.steps > 0, "need at least one step")?;
                need(t.x0.is_finite(), "x0 must be finite")?;
                has_paths = true;
            }
            TaskSpec::SolveLsmc(t) => {
                need(
                    has_paths,
                    "needs a simulate task earlier in the plan to provide the path ensemble",
                )?;
                if let Some(want) = &t.expect_y0 {
                    need(
                        want.len() == n,
                        "expect_y0 must list one value per component",
                    )?;
                }
                has_lsmc = true;
            }
            TaskSpec::SolvePicard(t) => {
                need(
                    has_paths,
                    "needs a simulate task earlier in the plan to provide the path ensemble",
                )?;
                need(t.max_sweeps > 0, "max_sweeps must be positive")?;
                if let Some(want) = &t.expect_y0 {
                    need(
                        want.len() == n,
                        "expect_y0 must list one value per component",
                    )?;
                }
                if t.agree_with_lsmc.is_some() {
                    need(
                        has_lsmc,
                        "agree_with_lsmc needs a solve_lsmc task earlier in the plan",
                    )?;
                }
            }
            TaskSpec::SolveFd(t) => {
                fbsde_core::SpaceTimeMesh::new(t.x_lo, t.x_hi, t.interior_columns, t.time_steps)
                    .map_err(|e| invalid(at(&format!("bad mesh: {e}"))))?;
                mesh_bounds = Some((t.x_lo, t.x_hi));
            }
            TaskSpec::CrossValidate(t) => {
                let (x_lo, x_hi) = mesh_bounds.ok_or_else(|| {
                    invalid(at(
                        "needs a solve_fd task earlier in the plan to provide the grid solution",
                    ))
                })?;
                need(!t.probes.is_empty(), "needs at least one probe point")?;
                for &(pt, px) in &t.probes {
                    need(
                        pt.is_finite() && px.is_finite() && pt >= 0.0 && pt < horizon,
                        "every probe needs finite x and 0 <= t < horizon",
                    )?;
                    need(
                        px >= x_lo && px <= x_hi,
                        "every probe x must lie inside the grid's space interval",
                    )?;
                }
                need(t.paths >= 2 && t.steps > 0, "paths/steps must be positive")?;
                need(
                    t.max_gap.is_finite() && t.max_gap > 0.0,
                    "max_gap must be finite and positive",
                )?;
            }
            TaskSpec::Compare(t) => {
                need(
                    cfg.compare_problem.is_some(),
                    "needs a compare_problem section in the config",
                )?;
                need(t.paths >= 2 && t.steps > 0, "paths/steps must be positive")?;
                need(
                    t.tolerance.is_finite() && t.tolerance >= 0.0,
                    "tolerance must be finite and non-negative",
                )?;
                if t.max_quotient_factor.is_some() {
                    need(
                        has_audit,
                        "max_quotient_factor needs an audit task earlier in the plan",
                    )?;
                }
                if let Some(rate) = t.expected_gap_rate {
                    need(rate.is_finite(), "expected_gap_rate must be finite")?;
                }
            }
            TaskSpec::MollifySweep(t) => {
                need(!t.epsilons.is_empty(), "needs at least one width")?;
                need(
                    t.epsilons.iter().all(|e| e.is_finite() && *e > 0.0),
                    "every width must be finite and positive",
                )?;
                need(!t.checks.is_empty(), "needs at least one coefficient check")?;
                need(
                    t.probe_count >= 2 && t.probe_hi > t.probe_lo,
                    "probe grid needs probe_hi > probe_lo and at least two points",
                )?;
                for check in &t.checks {
                    parse_x(&check.coefficient, &at("sweep coefficient"))?;
                }
            }
            TaskSpec::LocalExpansion(t) => {
                need(
                    t.test_functions.len() == n,
                    "needs one test function per component",
                )?;
                for src in &t.test_functions {
                    parse_tx(src, &at("test function"))?;
                }
                need(
                    !t.deltas.is_empty() && t.deltas.windows(2).all(|w| w[1] < w[0]),
                    "widths must be strictly decreasing",
                )?;
                need(
                    t.t.is_finite() && t.t >= 0.0 && t.t + t.deltas[0] <= horizon,
                    "the largest window must fit between t and the horizon",
                )?;
                need(t.x.is_finite(), "x must be finite")?;
                need(t.paths >= 2, "need at least two paths")?;
            }
            TaskSpec::CheckViscosity(t) => {
                need(
                    mesh_bounds.is_some(),
                    "needs a solve_fd task earlier in the plan to provide the grid (and mesh)",
                )?;
                need(
                    !t.curvatures.is_empty()
                        && t.curvatures.iter().all(|c| c.is_finite() && *c > 0.0),
                    "curvatures must be non-empty, finite, and positive",
                )?;
                need(
                    t.tolerance_rel.is_finite() && t.tolerance_rel >= 0.0,
                    "tolerance_rel must be finite and non-negative",
                )?;
                for cand in &t.candidates {
                    need(
                        cand.components.len() == n,
                        "every candidate needs one expression per component",
                    )?;
                    for src in &cand.components {
                        parse_tx(src, &at("candidate component"))?;
                    }
                    if cand.expect_worst_abs.is_some() {
                        need(
                            !(cand.expect_sub_ok && cand.expect_super_ok),
                            "expect_worst_abs needs one check expected to fail",
                        )?;
                    }
                }
            }
            TaskSpec::Regularity(t) => {
                let (x_lo, x_hi) = mesh_bounds.ok_or_else(|| {
                    invalid(at(
                        "needs a solve_fd task earlier in the plan to provide the grid solution",
                    ))
                })?;
                need(t.n_pairs > 0, "n_pairs must be positive")?;
                need(
                    !t.deltas.is_empty() && t.deltas.iter().all(|d| d.is_finite() && *d > 0.0),
                    "deltas must be non-empty, finite, and positive",
                )?;
                need(
                    t.box_t.0 < t.box_t.1 && t.box_x.0 < t.box_x.1,
                    "boxes must have positive extent",
                )?;
                need(
                    t.box_t.0 >= 0.0 && t.box_t.1 <= horizon + 1e-12 * (1.0 + horizon),
                    "box_t must lie inside [0, horizon]",
                )?;
                need(
                    t.box_x.0 >= x_lo && t.box_x.1 <= x_hi,
                    "box_x must lie inside the grid's space interval",
                )?;
                need(
                    t.deltas.iter().all(|d| *d < t.box_t.1 - t.box_t.0),
                    "every delta must be smaller than the box_t extent",
                )?;
                if t.max_lipschitz_factor.is_some() {
                    need(
                        has_audit,
                        "max_lipschitz_factor needs an audit task earlier in the plan",
                    )?;
                }
            }
        }
    }

    // Driver expressions were already validated against the full variable
    // list by the problem constructor; sanity-check that the slot layout the
    // runner assumes matches the core's.
    debug_assert_eq!(driver_vars(n).len(), n + 3);

    Ok(ValidatedScenario {
        raw_primary,
        effective,
        effective_compare,
        raw_compare,
    })
}

/// Parse a scenario document from JSON text. `origin` names the source in
/// diagnostics (a file path or a shipped scenario name).
pub fn parse_config(text: &str, origin: &str) -> Result<ScenarioConfig, ConfigError> {
    serde_json::from_str(text).map_err(|e| ConfigError::Parse {
        path: origin.to_string(),
        detail: e.to_string(),
    })
}

/// Load a scenario document from a file.
pub fn load_config(path: &std::path::Path) -> Result<ScenarioConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    parse_config(&text, &path.display().to_string())
}
