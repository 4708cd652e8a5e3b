//! Short-horizon expansion probes.
//!
//! Around a base point `(t, x)` and a vector of smooth test functions
//! `G_i(s, x)` (one per backward component), the solution of the system
//! with terminal data `G_i(t + delta, .)` on the short window
//! `[t, t + delta]` admits two descriptions whose difference shrinks
//! superlinearly in `delta`:
//!
//! 1. **Shifted system.** Subtracting `G_i(s, X_s)` pathwise from the
//!    solution of the original system with terminal `G_i(t + delta, .)`
//!    yields the solution of a zero-terminal system whose driver is the
//!    *shifted rate field* `F_i(s, x, y) = dG_i/ds + (1/2) sigma^2
//!    d2G_i/dx2 + b dG_i/dx + f_i(s, x, y + G(s, x), sigma dG_i/dx)`.
//!    The subtraction is performed along simulated paths, and the
//!    bookkeeping identity (shifted value plus `G` equals the original
//!    value at every path and step) is re-verified and reported.
//! 2. **Frozen state.** Freezing `x` in the shifted system removes the
//!    diffusion entirely, leaving the deterministic ODE system
//!    `dy_i/ds = -F_i(s, x, y)` with `y(t + delta) = 0`, integrated here
//!    by the classical fourth-order one-step method.
//!
//! The probe solves both descriptions for each width in a decreasing
//! list, records the per-component start-value gaps, and fits the
//! exponent `rho` in `gap ~ C * delta^rho` by log-log regression. Test
//! function derivatives are taken by high-accuracy central differences,
//! so any twice-differentiable expression works unmodified.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::backward::{solve_lsmc, SolveError};
use crate::expr::{EvalError, ExprAst};
use crate::forward::{simulate, PathEnsemble, SimulationError, TimeGrid};
use crate::problem::Coefficients;
use crate::stats::{log_log_exponent, LineFit};

const CHUNK: usize = 8192;
/// Relative step for the central-difference jets of the test functions.
const JET_STEP: f64 = 1e-5;
/// Floor on the number of one-step-method substeps for the frozen ODE.
const MIN_ODE_SUBSTEPS: usize = 1000;

#[derive(Debug, Error)]
pub enum ExpansionError {
    #[error("invalid probe: {detail}")]
    BadProbe { detail: String },
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Simulation(#[from] SimulationError),
    #[error(transparent)]
    Solve(#[from] SolveError),
}

/// Settings for [`local_expansion_probe`].
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ExpansionOptions {
    /// Paths per window solve.
    pub n_paths: usize,
    /// Target time-step width; every window uses `round(delta / time_step)`
    /// steps (at least 4), so the discretization bias is uniform across
    /// widths instead of scaling with them.
    pub time_step: f64,
    /// Regression basis degree for the window solves.
    pub basis_degree: usize,
    /// Requested substeps for the frozen ODE; values below 1000 are
    /// raised to 1000.
    pub ode_substeps: usize,
    pub seed: u64,
}

impl ExpansionOptions {
    pub fn new(seed: u64) -> Self {
        ExpansionOptions {
            n_paths: 20_000,
            time_step: 1e-3,
            basis_degree: 3,
            ode_substeps: MIN_ODE_SUBSTEPS,
            seed,
        }
    }
}

/// One probe width.
#[derive(Debug, Clone, Serialize)]
pub struct ExpansionPoint {
    pub delta: f64,
    pub time_steps: usize,
    /// Start value of the shifted (zero-terminal) system, per component.
    pub shifted_start: Vec<f64>,
    /// Start value of the frozen-state ODE, per component.
    pub frozen_start: Vec<f64>,
    /// `|shifted_start - frozen_start|` per component.
    pub gap: Vec<f64>,
    /// Worst relative residual of the pathwise subtraction identity,
    /// including exactness of the terminal slice.
    pub identity_residual: f64,
}

/// Full probe result.
#[derive(Debug, Clone, Serialize)]
pub struct ExpansionProbe {
    pub t: f64,
    pub x: f64,
    pub deltas: Vec<f64>,
    pub points: Vec<ExpansionPoint>,
    /// Log-log fit of gap against width, per component; `None` when a gap
    /// is exactly zero or non-finite (no power law to fit).
    pub rate_fits: Vec<Option<LineFit>>,
    pub max_identity_residual: f64,
}

/// Value and first derivatives of one test function at `(s, x)`.
struct Jet {
    value: f64,
    dt: f64,
    dx: f64,
    dxx: f64,
}

fn jet(gamma: &ExprAst, s: f64, x: f64) -> Result<Jet, EvalError> {
    let ht = JET_STEP * (1.0 + s.abs());
    let hx = JET_STEP * (1.0 + x.abs());
    let t_up = gamma.eval(&[s + ht, x])?;
    let t_dn = gamma.eval(&[s - ht, x])?;
    let x_up = gamma.eval(&[s, x + hx])?;
    let x_dn = gamma.eval(&[s, x - hx])?;
    let value = gamma.eval(&[s, x])?;
    Ok(Jet {
        value,
        dt: (t_up - t_dn) / (2.0 * ht),
        dx: (x_up - x_dn) / (2.0 * hx),
        dxx: (x_up - 2.0 * value + x_dn) / (hx * hx),
    })
}

/// The shifted rate field `F_i(s, x, y)` for all components at once.
fn shifted_rate_field<C: Coefficients>(
    coeffs: &C,
    gamma: &[ExprAst],
    s: f64,
    x: f64,
    y: &[f64],
    out: &mut [f64],
) -> Result<(), EvalError> {
    let n = y.len();
    let b = coeffs.drift(s, x)?;
    let sig = coeffs.diffusion(s, x)?;
    let mut jets = Vec::with_capacity(n);
    for g in gamma {
        jets.push(jet(g, s, x)?);
    }
    let mut shifted = vec![0.0; n];
    for i in 0..n {
        shifted[i] = y[i] + jets[i].value;
    }
    for i in 0..n {
        out[i] = jets[i].dt
            + 0.5 * sig * sig * jets[i].dxx
            + b * jets[i].dx
            + coeffs.driver(i, s, x, &shifted, sig * jets[i].dx)?;
    }
    Ok(())
}

/// Integrate the frozen-state ODE `dy/ds = -F(s, x, y)` backward from
/// `y(t + delta) = 0` to `s = t` with the classical fourth-order method.
fn frozen_ode<C: Coefficients>(
    coeffs: &C,
    gamma: &[ExprAst],
    t: f64,
    x: f64,
    delta: f64,
    substeps: usize,
) -> Result<Vec<f64>, EvalError> {
    let n = gamma.len();
    let m = substeps.max(MIN_ODE_SUBSTEPS);
    let h = delta / m as f64;
    let mut y = vec![0.0; n];
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    // Substitute tau = t + delta - s so the integration runs forward in
    // tau with right-hand side +F.
    for step in 0..m {
        let s0 = t + delta - step as f64 * h;
        shifted_rate_field(coeffs, gamma, s0, x, &y, &mut k1)?;
        for i in 0..n {
            tmp[i] = y[i] + 0.5 * h * k1[i];
        }
        shifted_rate_field(coeffs, gamma, s0 - 0.5 * h, x, &tmp, &mut k2)?;
        for i in 0..n {
            tmp[i] = y[i] + 0.5 * h * k2[i];
        }
        shifted_rate_field(coeffs, gamma, s0 - 0.5 * h, x, &tmp, &mut k3)?;
        for i in 0..n {
            tmp[i] = y[i] + h * k3[i];
        }
        shifted_rate_field(coeffs, gamma, s0 - h, x, &tmp, &mut k4)?;
        for i in 0..n {
            y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    Ok(y)
}

/// Terminal adapter: the base coefficients with terminal condition
/// `G_i(end_time, .)`.
struct WindowSystem<'a, C: Coefficients> {
    base: &'a C,
    gamma: &'a [ExprAst],
    end_time: f64,
    label: String,
}

impl<C: Coefficients> Coefficients for WindowSystem<'_, C> {
    fn label(&self) -> &str {
        &self.label
    }
    fn component_count(&self) -> usize {
        self.base.component_count()
    }
    fn horizon(&self) -> f64 {
        self.end_time
    }
    fn drift(&self, t: f64, x: f64) -> Result<f64, EvalError> {
        self.base.drift(t, x)
    }
    fn diffusion(&self, t: f64, x: f64) -> Result<f64, EvalError> {
        self.base.diffusion(t, x)
    }
    fn driver(&self, i: usize, t: f64, x: f64, y: &[f64], z: f64) -> Result<f64, EvalError> {
        self.base.driver(i, t, x, y, z)
    }
    fn terminal(&self, i: usize, x: f64) -> Result<f64, EvalError> {
        self.gamma[i].eval(&[self.end_time, x])
    }
    fn drift_is_time_invariant(&self) -> bool {
        self.base.drift_is_time_invariant()
    }
    fn diffusion_is_time_invariant(&self) -> bool {
        self.base.diffusion_is_time_invariant()
    }
}

/// Worst relative residual of the subtraction identity over every
/// component, path, and step. The terminal slice doubles as an exactness
/// check of the window solve's terminal data.
fn identity_residual(
    sol: &crate::backward::BackwardSolution,
    ens: &PathEnsemble,
    gamma: &[ExprAst],
) -> Result<f64, EvalError> {
    let steps = sol.steps();
    let m = sol.n_paths();
    let chunk_count = m.div_ceil(CHUNK);
    let mut worst: f64 = 0.0;
    for (i, g) in gamma.iter().enumerate() {
        for k in 0..=steps {
            let tk = ens.grid().time(k);
            let ys = sol.y_slice(i, k);
            let chunk_results: Vec<Result<f64, EvalError>> = (0..chunk_count)
                .into_par_iter()
                .map(|chunk| {
                    let mut local: f64 = 0.0;
                    for p in chunk * CHUNK..((chunk + 1) * CHUNK).min(m) {
                        let gv = g.eval(&[tk, ens.state(p, k)])?;
                        let base = ys[p];
                        let shifted = base - gv;
                        let scale = 1.0 + base.abs();
                        // Re-adding the test function must recover the
                        // original field ...
                        local = local.max(((shifted + gv) - base).abs() / scale);
                        if k == steps {
                            // ... and the terminal slice must be the test
                            // function itself, exactly as evaluated.
                            local = local.max(shifted.abs() / scale);
                        }
                    }
                    Ok(local)
                })
                .collect();
            for r in chunk_results {
                worst = worst.max(r?);
            }
        }
    }
    Ok(worst)
}

/// Run the probe at `(t, x)` over a decreasing list of window widths.
pub fn local_expansion_probe<C: Coefficients>(
    coeffs: &C,
    gamma: &[ExprAst],
    t: f64,
    x: f64,
    deltas: &[f64],
    options: &ExpansionOptions,
) -> Result<ExpansionProbe, ExpansionError> {
    let n = coeffs.component_count();
    if gamma.len() != n {
        return Err(ExpansionError::BadProbe {
            detail: format!("{} test functions for {n} components", gamma.len()),
        });
    }
    if deltas.is_empty() || deltas.windows(2).any(|w| w[1] >= w[0]) {
        return Err(ExpansionError::BadProbe {
            detail: "widths must be strictly decreasing".into(),
        });
    }
    if deltas.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
        return Err(ExpansionError::BadProbe {
            detail: "widths must be positive and finite".into(),
        });
    }
    if t < 0.0 || t + deltas[0] > coeffs.horizon() * (1.0 + 1e-12) {
        return Err(ExpansionError::BadProbe {
            detail: format!(
                "window [{t}, {}] leaves the problem horizon [0, {}]",
                t + deltas[0],
                coeffs.horizon()
            ),
        });
    }
    if !(options.time_step.is_finite() && options.time_step > 0.0) {
        return Err(ExpansionError::BadProbe {
            detail: "time_step must be positive".into(),
        });
    }

    let mut points = Vec::with_capacity(deltas.len());
    for (j, &delta) in deltas.iter().enumerate() {
        let steps = ((delta / options.time_step).round() as usize).max(4);
        let grid = TimeGrid::new(t, t + delta, steps)?;
        let window = WindowSystem {
            base: coeffs,
            gamma,
            end_time: t + delta,
            label: format!("{} (window {t}..{})", coeffs.label(), t + delta),
        };
        let seed = crate::rng::subseed(options.seed, j as u64);
        let ens = simulate(&window, grid, x, options.n_paths, seed)?;
        let sol = solve_lsmc(&window, &ens, options.basis_degree)?;
        let residual = identity_residual(&sol, &ens, gamma)?;
        let frozen_start = frozen_ode(coeffs, gamma, t, x, delta, options.ode_substeps)?;
        let mut shifted_start = Vec::with_capacity(n);
        let mut gap = Vec::with_capacity(n);
        for i in 0..n {
            let (window_value, _) = sol.y_start(i);
            let shifted = window_value - gamma[i].eval(&[t, x])?;
            shifted_start.push(shifted);
            gap.push((shifted - frozen_start[i]).abs());
        }
        points.push(ExpansionPoint {
            delta,
            time_steps: steps,
            shifted_start,
            frozen_start,
            gap,
            identity_residual: residual,
        });
    }

    let rate_fits = (0..n)
        .map(|i| {
            let gaps: Vec<f64> = points.iter().map(|p| p.gap[i]).collect();
            log_log_exponent(deltas, &gaps)
        })
        .collect();
    let max_identity_residual = points
        .iter()
        .map(|p| p.identity_residual)
        .fold(0.0, f64::max);
    Ok(ExpansionProbe {
        t,
        x,
        deltas: deltas.to_vec(),
        points,
        rate_fits,
        max_identity_residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::ProblemSpec;

    fn gamma_pair(first: &str, second: &str) -> Vec<ExprAst> {
        [first, second]
            .iter()
            .map(|src| ExprAst::parse(src, &["t", "x"]).unwrap())
            .collect()
    }

    #[test]
    fn constant_test_function_and_zero_driver_vanish() {
        let spec = ProblemSpec::new("flat", 1.0, "0", "1", &["0", "0"], &["x", "x"]).unwrap();
        let gamma = gamma_pair("1", "2");
        let probe = local_expansion_probe(
            &spec,
            &gamma,
            0.0,
            0.4,
            &[0.1, 0.05],
            &ExpansionOptions {
                n_paths: 2_000,
                time_step: 1e-3,
                basis_degree: 3,
                ode_substeps: 1000,
                seed: 5,
            },
        )
        .unwrap();
        // The window solution is the constant itself; subtracting the test
        // function leaves only the ridge regularization bias, which
        // compounds over the steps but stays far below any real signal.
        for point in &probe.points {
            for i in 0..2 {
                assert_eq!(point.frozen_start[i], 0.0);
                assert!(point.gap[i] < 1e-7, "gap {}", point.gap[i]);
            }
            assert!(point.identity_residual < 1e-12);
        }
    }

    #[test]
    fn frozen_state_coincides_with_the_window_solve_when_diffusion_vanishes() {
        // b = sigma = 0 freezes the simulated state at x, so the window
        // solve and the ODE integrate the same system; the gap is pure
        // time-discretization error of the explicit window recursion.
        let spec =
            ProblemSpec::new("still", 1.0, "0", "0", &["y2", "y1"], &["x", "x"]).unwrap();
        let gamma = gamma_pair("x^2 + 0.5*t", "x^2 - 0.25*t");
        let probe = local_expansion_probe(
            &spec,
            &gamma,
            0.2,
            1.3,
            &[0.1, 0.05],
            &ExpansionOptions {
                n_paths: 200,
                time_step: 1e-3,
                basis_degree: 2,
                ode_substeps: 1000,
                seed: 7,
            },
        )
        .unwrap();
        for point in &probe.points {
            for i in 0..2 {
                assert!(
                    point.gap[i] < 2e-4,
                    "width {}: gap {}",
                    point.delta,
                    point.gap[i]
                );
            }
            assert!(point.identity_residual < 1e-12);
        }
    }

    #[test]
    fn smooth_coupled_problem_fits_a_superlinear_rate() {
        // Diffusion with strong curvature at the probe point makes the
        // frozen-state error clearly quadratic in the width, while the
        // flat slope of the test functions at x = 0 keeps Monte Carlo
        // noise far below the signal.
        let spec = ProblemSpec::new(
            "curved",
            1.0,
            "0",
            "1/(1 + 2*x^2)",
            &["y2", "y1"],
            &["x", "x"],
        )
        .unwrap();
        let gamma = gamma_pair("x^2 + 0.5*t", "x^2 - 0.25*t");
        let probe = local_expansion_probe(
            &spec,
            &gamma,
            0.3,
            0.0,
            &[0.2, 0.1, 0.05, 0.025],
            &ExpansionOptions {
                n_paths: 20_000,
                time_step: 1e-3,
                basis_degree: 3,
                ode_substeps: 1000,
                seed: 11,
            },
        )
        .unwrap();
        assert!(probe.max_identity_residual < 1e-10);
        for (i, fit) in probe.rate_fits.iter().enumerate() {
            let fit = fit.as_ref().unwrap_or_else(|| {
                panic!(
                    "component {i}: gaps {:?} admit no power-law fit",
                    probe.points.iter().map(|p| p.gap[i]).collect::<Vec<_>>()
                )
            });
            assert!(
                fit.slope > 1.4 && fit.slope < 2.8,
                "component {i}: rate {} (gaps {:?})",
                fit.slope,
                probe.points.iter().map(|p| p.gap[i]).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn probe_validation_rejects_malformed_requests() {
        let spec = ProblemSpec::new("v", 1.0, "0", "1", &["0"], &["x"]).unwrap();
        let one = gamma_pair("x^2 + 0.5*t", "x^2")[..1].to_vec();
        let opts = ExpansionOptions::new(1);

        // Wrong test-function count.
        let two = gamma_pair("x", "x");
        assert!(matches!(
            local_expansion_probe(&spec, &two, 0.0, 0.0, &[0.1], &opts),
            Err(ExpansionError::BadProbe { .. })
        ));
        // Widths not decreasing.
        assert!(matches!(
            local_expansion_probe(&spec, &one, 0.0, 0.0, &[0.05, 0.1], &opts),
            Err(ExpansionError::BadProbe { .. })
        ));
        // Nonpositive width.
        assert!(matches!(
            local_expansion_probe(&spec, &one, 0.0, 0.0, &[0.1, 0.0], &opts),
            Err(ExpansionError::BadProbe { .. })
        ));
        // Window leaves the horizon.
        assert!(matches!(
            local_expansion_probe(&spec, &one, 0.95, 0.0, &[0.1], &opts),
            Err(ExpansionError::BadProbe { .. })
        ));
    }

    #[test]
    fn ode_substep_floor_is_enforced() {
        // Requesting one substep must not degrade the integrator: the
        // frozen solution of y' = -(y + 1), y(T) = 0 over a width of 0.5
        // is e^0.5 - 1 to near machine accuracy only with many substeps.
        let spec = ProblemSpec::new("floor", 1.0, "0", "0", &["y1 + 1"], &["0"]).unwrap();
        let gamma = vec![ExprAst::parse("0", &["t", "x"]).unwrap()];
        let y = frozen_ode(&spec, &gamma, 0.0, 0.0, 0.5, 1).unwrap();
        let exact = 0.5f64.exp() - 1.0;
        assert!((y[0] - exact).abs() < 1e-12, "{} vs {exact}", y[0]);
    }
}
