//! Run reports: one JSON document per scenario run.
//!
//! The document splits into a deterministic part and a timing part. For a
//! fixed seed, everything under `"results"` — statuses, criteria, metrics,
//! file listings — is bit-identical across runs and thread counts; wall
//! times live only under `"timing"`. Consumers that diff reports should
//! ignore the timing subtree and nothing else.
//!
//! Serialization notes: maps are `BTreeMap`s (serde_json sorts string keys
//! the same way), so key order is stable; metric floats are finite by
//! construction — non-finite solver outputs are reported as failed criteria,
//! not smuggled into JSON as `null`.

use serde::Serialize;

/// Identifies the producing binary in the report header.
#[derive(Debug, Clone, Serialize)]
pub struct ToolStamp {
    pub name: &'static str,
    pub version: &'static str,
}

impl Default for ToolStamp {
    fn default() -> Self {
        ToolStamp {
            name: "fbsde",
            version: env!("CARGO_PKG_VERSION"),
        }
    }
}

/// One named pass/fail check inside a task.
#[derive(Debug, Clone, Serialize)]
pub struct CriterionOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CriterionOutcome {
    pub fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        CriterionOutcome {
            name: name.to_string(),
            passed,
            detail: detail.into(),
        }
    }
}

/// Per-task outcome.
#[derive(Debug, Clone, Serialize)]
pub struct TaskResult {
    /// Position in the plan (zero-based).
    pub index: usize,
    /// Task kind, e.g. `"solve_fd"`.
    pub task: String,
    /// `"passed"`, `"failed"` (criteria), `"error"` (solver), or
    /// `"skipped"` (an earlier task errored).
    pub status: String,
    pub criteria: Vec<CriterionOutcome>,
    /// Task-specific key figures, shaped per task kind.
    pub metrics: serde_json::Value,
    /// Artifact files written by this task, as names relative to the output
    /// directory.
    pub files: Vec<String>,
}

/// Deterministic payload of the run.
#[derive(Debug, Clone, Serialize)]
pub struct Results {
    /// True iff every task passed every criterion (and none errored).
    pub passed: bool,
    /// First solver failure, when one occurred.
    pub solver_error: Option<String>,
    pub tasks: Vec<TaskResult>,
}

/// Wall-clock section; the only part of the report allowed to vary run to
/// run.
#[derive(Debug, Clone, Serialize)]
pub struct Timing {
    pub total_seconds: f64,
    /// Seconds per task, aligned with `results.tasks` by index.
    pub tasks: Vec<f64>,
}

/// The full run report.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub tool: ToolStamp,
    pub scenario: String,
    pub seed: u64,
    pub strict: bool,
    pub results: Results,
    pub timing: Timing,
}

impl RunReport {
    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }
}

/// Render a float for CSV/detail output: `Display` on `f64` is the shortest
/// round-trip form, which is deterministic and parses back exactly.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_serializes_with_results_before_timing_and_stable_keys() {
        let report = RunReport {
            tool: ToolStamp::default(),
            scenario: "unit".into(),
            seed: 7,
            strict: false,
            results: Results {
                passed: true,
                solver_error: None,
                tasks: vec![TaskResult {
                    index: 0,
                    task: "audit".into(),
                    status: "passed".into(),
                    criteria: vec![CriterionOutcome::new("finite", true, "ok")],
                    metrics: serde_json::json!({"drift_lipschitz_x": 0.0}),
                    files: vec!["audit.json".into()],
                }],
            },
            timing: Timing {
                total_seconds: 0.25,
                tasks: vec![0.25],
            },
        };
        let text = report.to_json_pretty();
        let results_at = text.find("\"results\"").unwrap();
        let timing_at = text.find("\"timing\"").unwrap();
        assert!(results_at < timing_at);
        let parsed: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(parsed["results"]["tasks"][0]["status"], "passed");
        assert_eq!(parsed["tool"]["name"], "fbsde");
    }
}
