//! Problem specification for coupled semi-linear systems.
//!
//! A [`ProblemSpec`] describes one forward diffusion in one space dimension,
//!
//! ```text
//! dX_s = b(s, X_s) ds + sigma(s, X_s) dW_s,
//! ```
//!
//! coupled to `n` backward components, one per driver,
//!
//! ```text
//! -dY^i_s = f_i(s, X_s, Y^1_s, .., Y^n_s, Z^i_s) ds - Z^i_s dW_s,
//! Y^i_T = Phi_i(X_T),
//! ```
//!
//! and, equivalently on the PDE side, the semi-linear parabolic system
//! `d_t u_i + 1/2 sigma^2 d_xx u_i + b d_x u_i + f_i(t, x, u, sigma d_x u_i) = 0`
//! with terminal data `u_i(T, .) = Phi_i`.
//!
//! Coefficients are expression strings parsed against slot-scoped variable
//! lists: `b, sigma` over `(t, x)`, each driver over `(t, x, y1..yn, z)`, each
//! terminal over `x` alone. Scope violations (a terminal referencing `y1`,
//! say) are rejected at load time with the offending slot named.
//!
//! Solvers do not consume `ProblemSpec` directly; they are generic over the
//! [`Coefficients`] trait so that smoothed problems, shifted systems for
//! local expansions, and other derived coefficient sets plug into the same
//! machinery.

use serde::Serialize;
use thiserror::Error;

use crate::expr::{EvalError, ExprAst, ParseError};

/// Construction-time failures for a problem specification.
#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("a system needs at least one component (no drivers given)")]
    NoComponents,
    #[error("component mismatch: {drivers} driver(s) but {terminals} terminal condition(s)")]
    ComponentMismatch { drivers: usize, terminals: usize },
    #[error("time horizon must be positive and finite, got {0}")]
    BadHorizon(f64),
    #[error("invalid coefficient in slot `{slot}`: {source}")]
    Slot {
        slot: String,
        #[source]
        source: ParseError,
    },
}

/// Variable list for drift and diffusion coefficients.
pub fn coefficient_vars() -> Vec<String> {
    vec!["t".into(), "x".into()]
}

/// Variable list for the `i`-th driver of an `n`-component system:
/// `t, x, y1, .., yn, z`.
pub fn driver_vars(n: usize) -> Vec<String> {
    let mut v = Vec::with_capacity(n + 3);
    v.push("t".into());
    v.push("x".into());
    for j in 1..=n {
        v.push(format!("y{j}"));
    }
    v.push("z".into());
    v
}

/// Variable list for terminal conditions.
pub fn terminal_vars() -> Vec<String> {
    vec!["x".into()]
}

fn parse_slot(slot: String, source: &str, vars: &[String]) -> Result<ExprAst, ProblemError> {
    let refs: Vec<&str> = vars.iter().map(|s| s.as_str()).collect();
    ExprAst::parse(source, &refs).map_err(|e| ProblemError::Slot { slot, source: e })
}

/// A validated coupled system specification.
#[derive(Debug, Clone, Serialize)]
pub struct ProblemSpec {
    label: String,
    horizon: f64,
    drift: ExprAst,
    diffusion: ExprAst,
    drivers: Vec<ExprAst>,
    terminals: Vec<ExprAst>,
}

impl ProblemSpec {
    /// Parse and validate a specification. The component count is the number
    /// of drivers; terminals must match it.
    pub fn new(
        label: &str,
        horizon: f64,
        drift: &str,
        diffusion: &str,
        drivers: &[&str],
        terminals: &[&str],
    ) -> Result<Self, ProblemError> {
        if drivers.is_empty() {
            return Err(ProblemError::NoComponents);
        }
        if drivers.len() != terminals.len() {
            return Err(ProblemError::ComponentMismatch {
                drivers: drivers.len(),
                terminals: terminals.len(),
            });
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(ProblemError::BadHorizon(horizon));
        }
        let n = drivers.len();
        let cvars = coefficient_vars();
        let dvars = driver_vars(n);
        let tvars = terminal_vars();
        let drift = parse_slot("drift b".into(), drift, &cvars)?;
        let diffusion = parse_slot("diffusion sigma".into(), diffusion, &cvars)?;
        let drivers = drivers
            .iter()
            .enumerate()
            .map(|(i, src)| parse_slot(format!("driver f{}", i + 1), src, &dvars))
            .collect::<Result<Vec<_>, _>>()?;
        let terminals = terminals
            .iter()
            .enumerate()
            .map(|(i, src)| parse_slot(format!("terminal Phi{}", i + 1), src, &tvars))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ProblemSpec {
            label: label.to_string(),
            horizon,
            drift,
            diffusion,
            drivers,
            terminals,
        })
    }

    pub fn label_str(&self) -> &str {
        &self.label
    }

    pub fn component_count_n(&self) -> usize {
        self.drivers.len()
    }

    pub fn horizon_t(&self) -> f64 {
        self.horizon
    }

    pub fn drift_expr(&self) -> &ExprAst {
        &self.drift
    }

    pub fn diffusion_expr(&self) -> &ExprAst {
        &self.diffusion
    }

    pub fn driver_expr(&self, i: usize) -> &ExprAst {
        &self.drivers[i]
    }

    pub fn terminal_expr(&self, i: usize) -> &ExprAst {
        &self.terminals[i]
    }

    /// Replace the horizon (used by sub-interval solves that re-anchor `T`).
    pub fn with_horizon(&self, horizon: f64) -> Result<Self, ProblemError> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(ProblemError::BadHorizon(horizon));
        }
        let mut out = self.clone();
        out.horizon = horizon;
        Ok(out)
    }
}

/// Scratch-free binding assembly for driver evaluation. Systems with up to
/// 13 components evaluate on a stack buffer; larger ones fall back to a heap
/// allocation per call.
#[inline]
pub(crate) fn eval_driver(
    expr: &ExprAst,
    n: usize,
    t: f64,
    x: f64,
    y: &[f64],
    z: f64,
) -> Result<f64, EvalError> {
    debug_assert_eq!(y.len(), n);
    let needed = n + 3;
    if needed <= 16 {
        let mut buf = [0.0f64; 16];
        buf[0] = t;
        buf[1] = x;
        buf[2..2 + n].copy_from_slice(y);
        buf[2 + n] = z;
        expr.eval(&buf[..needed])
    } else {
        let mut buf = Vec::with_capacity(needed);
        buf.push(t);
        buf.push(x);
        buf.extend_from_slice(y);
        buf.push(z);
        expr.eval(&buf)
    }
}

/// The coefficient surface shared by every solver in this crate.
///
/// Implementations: [`ProblemSpec`] (raw expressions), smoothed problems
/// (Gaussian-mollified coefficients), and shifted systems used by the
/// small-time expansion probes. All methods must be deterministic pure
/// functions of their arguments.
pub trait Coefficients: Sync {
    /// Human-readable identifier carried into reports.
    fn label(&self) -> &str;

    /// Number of backward components `n`.
    fn component_count(&self) -> usize;

    /// Terminal time `T`.
    fn horizon(&self) -> f64;

    /// Drift `b(t, x)` of the forward diffusion.
    fn drift(&self, t: f64, x: f64) -> Result<f64, EvalError>;

    /// Diffusion `sigma(t, x)` of the forward diffusion.
    fn diffusion(&self, t: f64, x: f64) -> Result<f64, EvalError>;

    /// Driver `f_i(t, x, y1..yn, z)`; `i` is zero-based, `y.len() == n`.
    fn driver(&self, i: usize, t: f64, x: f64, y: &[f64], z: f64) -> Result<f64, EvalError>;

    /// Terminal condition `Phi_i(x)`; `i` is zero-based.
    fn terminal(&self, i: usize, x: f64) -> Result<f64, EvalError>;

    /// Whether `drift(t, x)` ignores `t`, enabling grid solvers to cache
    /// stencils across time levels. `false` is always safe.
    fn drift_is_time_invariant(&self) -> bool {
        false
    }

    /// Whether `diffusion(t, x)` ignores `t`. `false` is always safe.
    fn diffusion_is_time_invariant(&self) -> bool {
        false
    }
}

impl Coefficients for ProblemSpec {
    fn label(&self) -> &str {
        &self.label
    }

    fn component_count(&self) -> usize {
        self.drivers.len()
    }

    fn horizon(&self) -> f64 {
        self.horizon
    }

    #[inline]
    fn drift(&self, t: f64, x: f64) -> Result<f64, EvalError> {
        self.drift.eval(&[t, x])
    }

    #[inline]
    fn diffusion(&self, t: f64, x: f64) -> Result<f64, EvalError> {
        self.diffusion.eval(&[t, x])
    }

    #[inline]
    fn driver(&self, i: usize, t: f64, x: f64, y: &[f64], z: f64) -> Result<f64, EvalError> {
        eval_driver(&self.drivers[i], self.drivers.len(), t, x, y, z)
    }

    #[inline]
    fn terminal(&self, i: usize, x: f64) -> Result<f64, EvalError> {
        self.terminals[i].eval(&[x])
    }

    fn drift_is_time_invariant(&self) -> bool {
        !self.drift.uses_var(0)
    }

    fn diffusion_is_time_invariant(&self) -> bool {
        !self.diffusion.uses_var(0)
    }
}

impl<C: Coefficients + ?Sized> Coefficients for &C {
    fn label(&self) -> &str {
        (**self).label()
    }
    fn component_count(&self) -> usize {
        (**self).component_count()
    }
    fn horizon(&self) -> f64 {
        (**self).horizon()
    }
    fn drift(&self, t: f64, x: f64) -> Result<f64, EvalError> {
        (**self).drift(t, x)
    }
    fn diffusion(&self, t: f64, x: f64) -> Result<f64, EvalError> {
        (**self).diffusion(t, x)
    }
    fn driver(&self, i: usize, t: f64, x: f64, y: &[f64], z: f64) -> Result<f64, EvalError> {
        (**self).driver(i, t, x, y, z)
    }
    fn terminal(&self, i: usize, x: f64) -> Result<f64, EvalError> {
        (**self).terminal(i, x)
    }
    fn drift_is_time_invariant(&self) -> bool {
        (**self).drift_is_time_invariant()
    }
    fn diffusion_is_time_invariant(&self) -> bool {
        (**self).diffusion_is_time_invariant()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_component() -> ProblemSpec {
        ProblemSpec::new(
            "coupled",
            1.0,
            "0",
            "1",
            &["y2", "y1"],
            &["1", "1"],
        )
        .expect("valid spec")
    }

    #[test]
    fn builds_and_reports_shape() {
        let p = two_component();
        assert_eq!(p.component_count(), 2);
        assert_eq!(p.horizon(), 1.0);
        assert_eq!(p.label(), "coupled");
    }

    #[test]
    fn driver_receives_full_argument_vector() {
        let p = ProblemSpec::new(
            "args",
            2.0,
            "0",
            "1",
            &["t + 10*x + 100*y1 + 1000*y2 + 10000*z"],
            &["0"],
        );
        // One driver means n = 1, so y2 is out of scope; rebuild with n = 2.
        assert!(p.is_err());
        let p = ProblemSpec::new(
            "args",
            2.0,
            "0",
            "1",
            &["t + 10*x + 100*y1 + 1000*y2 + 10000*z", "0"],
            &["0", "0"],
        )
        .unwrap();
        let v = p.driver(0, 1.0, 2.0, &[3.0, 4.0], 5.0).unwrap();
        assert_eq!(v, 1.0 + 20.0 + 300.0 + 4000.0 + 50000.0);
    }

    #[test]
    fn terminal_scope_rejects_backward_variables() {
        let err = ProblemSpec::new("bad", 1.0, "0", "1", &["0", "0"], &["y1", "0"]).unwrap_err();
        match err {
            ProblemError::Slot { slot, source } => {
                assert_eq!(slot, "terminal Phi1");
                assert!(matches!(source, ParseError::UnknownVariable { ref name, .. } if name == "y1"));
            }
            other => panic!("expected slot error, got {other:?}"),
        }
    }

    #[test]
    fn drift_scope_rejects_driver_variables() {
        let err = ProblemSpec::new("bad", 1.0, "y1", "1", &["0"], &["0"]).unwrap_err();
        assert!(matches!(err, ProblemError::Slot { ref slot, .. } if slot == "drift b"));
    }

    #[test]
    fn component_counts_must_match() {
        let err = ProblemSpec::new("bad", 1.0, "0", "1", &["0", "0"], &["0"]).unwrap_err();
        assert!(matches!(
            err,
            ProblemError::ComponentMismatch {
                drivers: 2,
                terminals: 1
            }
        ));
    }

    #[test]
    fn horizon_must_be_positive() {
        assert!(matches!(
            ProblemSpec::new("bad", 0.0, "0", "1", &["0"], &["0"]).unwrap_err(),
            ProblemError::BadHorizon(_)
        ));
        assert!(matches!(
            ProblemSpec::new("bad", -1.0, "0", "1", &["0"], &["0"]).unwrap_err(),
            ProblemError::BadHorizon(_)
        ));
    }

    #[test]
    fn at_least_one_component_required() {
        assert!(matches!(
            ProblemSpec::new("bad", 1.0, "0", "1", &[], &[]).unwrap_err(),
            ProblemError::NoComponents
        ));
    }

    #[test]
    fn time_dependent_coefficients_evaluate() {
        let p = ProblemSpec::new("timedep", 1.0, "t*x", "1+t", &["0"], &["x"]).unwrap();
        assert_eq!(p.drift(0.5, 2.0).unwrap(), 1.0);
        assert_eq!(p.diffusion(0.25, 0.0).unwrap(), 1.25);
    }
}
