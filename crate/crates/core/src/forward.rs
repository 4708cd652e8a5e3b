//! Forward diffusion simulation: Euler–Maruyama path ensembles.
//!
//! Paths are generated against a counter-based normal source keyed by
//! `(seed, path, step)`, so a given `(seed, grid, x0)` always produces the
//! same ensemble regardless of how the path loop is partitioned across
//! threads. Increments are retained alongside states because the backward
//! solvers regress against them.

use std::io::{self, Write};

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::expr::EvalError;
use crate::problem::Coefficients;
use crate::rng::path_step_normal;

/// Simulation failures.
#[derive(Debug, Error)]
pub enum SimulationError {
    #[error("invalid time grid: {detail}")]
    InvalidGrid { detail: String },
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("state became non-finite on path {path} after step {step} (x = {value})")]
    NonFiniteState { path: usize, step: usize, value: f64 },
    #[error("increment buffer holds {got} values, expected {expected}")]
    IncrementLength { expected: usize, got: usize },
}

/// Uniform grid of `steps + 1` time points on `[t0, t1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimeGrid {
    t0: f64,
    t1: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t1: f64, steps: usize) -> Result<Self, SimulationError> {
        if !(t0.is_finite() && t1.is_finite() && t1 > t0) {
            return Err(SimulationError::InvalidGrid {
                detail: format!("need finite t1 > t0, got [{t0}, {t1}]"),
            });
        }
        if steps == 0 {
            return Err(SimulationError::InvalidGrid {
                detail: "need at least one step".into(),
            });
        }
        Ok(TimeGrid { t0, t1, steps })
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn t1(&self) -> f64 {
        self.t1
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        (self.t1 - self.t0) / self.steps as f64
    }

    /// `k`-th grid time; exact at both endpoints.
    pub fn time(&self, k: usize) -> f64 {
        debug_assert!(k <= self.steps);
        self.t0 + (self.t1 - self.t0) * (k as f64 / self.steps as f64)
    }
}

/// An ensemble of forward paths on a shared time grid.
///
/// Storage is row-major per path: state `k` of path `p` lives at
/// `p * (steps + 1) + k`, increment `k` at `p * steps + k`.
#[derive(Debug, Clone)]
pub struct PathEnsemble {
    grid: TimeGrid,
    x0: f64,
    n_paths: usize,
    states: Vec<f64>,
    increments: Vec<f64>,
    seed: u64,
}

impl PathEnsemble {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn x0(&self) -> f64 {
        self.x0
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// State of path `p` at time index `k` (`0..=steps`).
    #[inline]
    pub fn state(&self, p: usize, k: usize) -> f64 {
        self.states[p * (self.grid.steps + 1) + k]
    }

    /// Brownian increment of path `p` over `[t_k, t_{k+1})`.
    #[inline]
    pub fn increment(&self, p: usize, k: usize) -> f64 {
        self.increments[p * self.grid.steps + k]
    }

    /// All states of one path, length `steps + 1`.
    pub fn path_states(&self, p: usize) -> &[f64] {
        let w = self.grid.steps + 1;
        &self.states[p * w..(p + 1) * w]
    }

    /// Cross-section at time index `k`: states of every path, in path order.
    pub fn states_at(&self, k: usize) -> Vec<f64> {
        (0..self.n_paths).map(|p| self.state(p, k)).collect()
    }

    /// Dump as CSV (`path,step,t,x,dw`; the final step row has `dw` empty).
    pub fn write_csv(&self, out: &mut impl Write) -> io::Result<()> {
        writeln!(out, "path,step,t,x,dw")?;
        for p in 0..self.n_paths {
            for k in 0..=self.grid.steps {
                if k < self.grid.steps {
                    writeln!(
                        out,
                        "{p},{k},{},{},{}",
                        self.grid.time(k),
                        self.state(p, k),
                        self.increment(p, k)
                    )?;
                } else {
                    writeln!(out, "{p},{k},{},{},", self.grid.time(k), self.state(p, k))?;
                }
            }
        }
        Ok(())
    }
}

/// Euler–Maruyama march of one path; `wrow` already holds its increments.
fn march_path<C: Coefficients>(
    coeffs: &C,
    grid: &TimeGrid,
    x0: f64,
    p: usize,
    xrow: &mut [f64],
    wrow: &[f64],
) -> Result<(), SimulationError> {
    let dt = grid.dt();
    xrow[0] = x0;
    let mut x = x0;
    for k in 0..grid.steps {
        let t = grid.time(k);
        let b = coeffs.drift(t, x)?;
        let s = coeffs.diffusion(t, x)?;
        x = x + b * dt + s * wrow[k];
        if !x.is_finite() {
            return Err(SimulationError::NonFiniteState {
                path: p,
                step: k,
                value: x,
            });
        }
        xrow[k + 1] = x;
    }
    Ok(())
}

/// Simulate `n_paths` forward paths from `x0` with canonical increments
/// `dW(p, k) = sqrt(dt) * N(seed, p, k)`.
pub fn simulate<C: Coefficients>(
    coeffs: &C,
    grid: TimeGrid,
    x0: f64,
    n_paths: usize,
    seed: u64,
) -> Result<PathEnsemble, SimulationError> {
    let sqrt_dt = grid.dt().sqrt();
    let mut increments = vec![0.0; n_paths * grid.steps];
    increments
        .par_chunks_mut(grid.steps)
        .enumerate()
        .for_each(|(p, wrow)| {
            for (k, w) in wrow.iter_mut().enumerate() {
                *w = sqrt_dt * path_step_normal(seed, p as u64, k as u64);
            }
        });
    simulate_with_increments(coeffs, grid, x0, n_paths, increments, seed)
}

/// Simulate with caller-supplied Brownian increments (length
/// `n_paths * steps`, path-major). Used to drive coarse and fine grids with
/// the same underlying noise, e.g. for strong-convergence measurements.
pub fn simulate_with_increments<C: Coefficients>(
    coeffs: &C,
    grid: TimeGrid,
    x0: f64,
    n_paths: usize,
    increments: Vec<f64>,
    seed: u64,
) -> Result<PathEnsemble, SimulationError> {
    if increments.len() != n_paths * grid.steps {
        return Err(SimulationError::IncrementLength {
            expected: n_paths * grid.steps,
            got: increments.len(),
        });
    }
    let width = grid.steps + 1;
    let mut states = vec![0.0; n_paths * width];
    let outcomes: Vec<Result<(), SimulationError>> = states
        .par_chunks_mut(width)
        .zip(increments.par_chunks(grid.steps))
        .enumerate()
        .map(|(p, (xrow, wrow))| march_path(coeffs, &grid, x0, p, xrow, wrow))
        .collect();
    // Ordered scan so the reported error is the lowest-index failure no
    // matter how the parallel partitioning went.
    for outcome in outcomes {
        outcome?;
    }
    Ok(PathEnsemble {
        grid,
        x0,
        n_paths,
        states,
        increments,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::ProblemSpec;
    use crate::stats::mean;

    fn spec(drift: &str, diffusion: &str) -> ProblemSpec {
        ProblemSpec::new("fwd-test", 1.0, drift, diffusion, &["0"], &["x"]).unwrap()
    }

    #[test]
    fn grid_validation_and_exact_endpoints() {
        assert!(TimeGrid::new(0.0, 0.0, 4).is_err());
        assert!(TimeGrid::new(0.0, 1.0, 0).is_err());
        assert!(TimeGrid::new(f64::NAN, 1.0, 4).is_err());
        let g = TimeGrid::new(0.25, 1.75, 7).unwrap();
        assert_eq!(g.time(0), 0.25);
        assert_eq!(g.time(7), 1.75);
        assert!((g.dt() - 1.5 / 7.0).abs() < 1e-16);
    }

    #[test]
    fn frozen_coefficients_keep_state_constant() {
        let p = spec("0", "0");
        let grid = TimeGrid::new(0.0, 1.0, 16).unwrap();
        let ens = simulate(&p, grid, 1.5, 8, 42).unwrap();
        for pth in 0..8 {
            for k in 0..=16 {
                assert_eq!(ens.state(pth, k), 1.5);
            }
        }
    }

    #[test]
    fn deterministic_drift_matches_left_riemann_sum() {
        // dX = 2t dt from 0: Euler gives sum(2 t_k dt) = (N-1)/N on [0,1].
        let p = spec("2*t", "0");
        let n = 64usize;
        let grid = TimeGrid::new(0.0, 1.0, n).unwrap();
        let ens = simulate(&p, grid, 0.0, 3, 1).unwrap();
        let expected = (n as f64 - 1.0) / n as f64;
        for pth in 0..3 {
            assert!((ens.state(pth, n) - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn brownian_moments_match_theory() {
        let p = spec("0", "1");
        let grid = TimeGrid::new(0.0, 1.0, 32).unwrap();
        let m = 50_000;
        let ens = simulate(&p, grid, 0.0, m, 2024).unwrap();
        let finals = ens.states_at(32);
        let mu = mean(&finals);
        let var = finals.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / (m as f64 - 1.0);
        // Endpoint of a standard Brownian motion: mean 0, variance T = 1.
        assert!(mu.abs() < 0.02, "mean {mu}");
        assert!((var - 1.0).abs() < 0.03, "variance {var}");
        // Single increments: mean 0, variance dt.
        let dws: Vec<f64> = (0..m).map(|pth| ens.increment(pth, 7)).collect();
        let dmu = mean(&dws);
        let dvar = dws.iter().map(|w| (w - dmu) * (w - dmu)).sum::<f64>() / (m as f64 - 1.0);
        assert!(dmu.abs() < 0.005, "increment mean {dmu}");
        assert!((dvar - grid.dt()).abs() < 0.002, "increment variance {dvar}");
    }

    #[test]
    fn shared_noise_additive_paths_agree_across_refinement() {
        // With b = 0 and constant sigma the Euler endpoint is x0 + sigma*W(T)
        // on any grid, so a fine path and a coarse path driven by the summed
        // fine increments agree to rounding.
        let p = spec("0", "1");
        let fine_steps = 256;
        let coarse_steps = 32;
        let ratio = fine_steps / coarse_steps;
        let n_paths = 64;
        let fine_grid = TimeGrid::new(0.0, 1.0, fine_steps).unwrap();
        let coarse_grid = TimeGrid::new(0.0, 1.0, coarse_steps).unwrap();
        let fine = simulate(&p, fine_grid, 0.0, n_paths, 9).unwrap();
        let mut coarse_dw = vec![0.0; n_paths * coarse_steps];
        for pth in 0..n_paths {
            for k in 0..coarse_steps {
                coarse_dw[pth * coarse_steps + k] =
                    (0..ratio).map(|j| fine.increment(pth, k * ratio + j)).sum();
            }
        }
        let coarse =
            simulate_with_increments(&p, coarse_grid, 0.0, n_paths, coarse_dw, 9).unwrap();
        for pth in 0..n_paths {
            let gap = (fine.state(pth, fine_steps) - coarse.state(pth, coarse_steps)).abs();
            assert!(gap < 1e-12, "path {pth} gap {gap}");
        }
    }

    #[test]
    fn multiplicative_noise_strong_error_shrinks_with_refinement() {
        // dX = 0.4 X dW: Euler has strong order 1/2, so quadrupling the step
        // count should roughly halve the RMS endpoint gap to a shared
        // reference path.
        let p = spec("0", "0.4*x");
        let n_paths = 4_000;
        let fine_steps = 1024;
        let fine_grid = TimeGrid::new(0.0, 1.0, fine_steps).unwrap();
        let fine = simulate(&p, fine_grid, 1.0, n_paths, 77).unwrap();

        let rms_gap = |coarse_steps: usize| -> f64 {
            let ratio = fine_steps / coarse_steps;
            let grid = TimeGrid::new(0.0, 1.0, coarse_steps).unwrap();
            let mut dw = vec![0.0; n_paths * coarse_steps];
            for pth in 0..n_paths {
                for k in 0..coarse_steps {
                    dw[pth * coarse_steps + k] =
                        (0..ratio).map(|j| fine.increment(pth, k * ratio + j)).sum();
                }
            }
            let coarse = simulate_with_increments(&p, grid, 1.0, n_paths, dw, 77).unwrap();
            let mse = (0..n_paths)
                .map(|pth| {
                    let d = fine.state(pth, fine_steps) - coarse.state(pth, coarse_steps);
                    d * d
                })
                .sum::<f64>()
                / n_paths as f64;
            mse.sqrt()
        };

        let e32 = rms_gap(32);
        let e128 = rms_gap(128);
        let observed_ratio = e32 / e128;
        assert!(
            (1.5..=3.2).contains(&observed_ratio),
            "strong-order ratio {observed_ratio} (errors {e32}, {e128})"
        );
    }

    #[test]
    fn blowing_up_state_is_reported_with_path_and_step() {
        struct Explosive;
        impl Coefficients for Explosive {
            fn label(&self) -> &str {
                "explosive"
            }
            fn component_count(&self) -> usize {
                1
            }
            fn horizon(&self) -> f64 {
                1.0
            }
            fn drift(&self, _t: f64, x: f64) -> Result<f64, EvalError> {
                // Grows the state super-exponentially; the trait contract
                // does not require implementors to return finite values, so
                // the march must catch the resulting non-finite state.
                Ok(x.abs().max(1.0) * 1.0e200)
            }
            fn diffusion(&self, _t: f64, _x: f64) -> Result<f64, EvalError> {
                Ok(0.0)
            }
            fn driver(
                &self,
                _i: usize,
                _t: f64,
                _x: f64,
                _y: &[f64],
                _z: f64,
            ) -> Result<f64, EvalError> {
                Ok(0.0)
            }
            fn terminal(&self, _i: usize, x: f64) -> Result<f64, EvalError> {
                Ok(x)
            }
        }
        let grid = TimeGrid::new(0.0, 1.0, 4).unwrap();
        let err = simulate(&Explosive, grid, 0.0, 2, 5).unwrap_err();
        match err {
            SimulationError::NonFiniteState { path, step, .. } => {
                assert_eq!(path, 0);
                assert!(step <= 1);
            }
            other => panic!("expected NonFiniteState, got {other}"),
        }
    }

    #[test]
    fn increment_length_is_checked() {
        let p = spec("0", "1");
        let grid = TimeGrid::new(0.0, 1.0, 4).unwrap();
        let err = simulate_with_increments(&p, grid, 0.0, 3, vec![0.0; 11], 1).unwrap_err();
        assert!(matches!(
            err,
            SimulationError::IncrementLength {
                expected: 12,
                got: 11
            }
        ));
    }

    #[test]
    fn same_seed_reproduces_identical_ensembles() {
        let p = spec("sin(x)", "0.5+0.1*x");
        let grid = TimeGrid::new(0.0, 1.0, 16).unwrap();
        let a = simulate(&p, grid, 0.3, 32, 1234).unwrap();
        let b = simulate(&p, grid, 0.3, 32, 1234).unwrap();
        assert_eq!(a.states, b.states);
        assert_eq!(a.increments, b.increments);
        let c = simulate(&p, grid, 0.3, 32, 1235).unwrap();
        assert_ne!(a.states, c.states);
    }

    #[test]
    fn csv_dump_has_header_and_full_row_count() {
        let p = spec("0", "1");
        let grid = TimeGrid::new(0.0, 0.5, 3).unwrap();
        let ens = simulate(&p, grid, 0.0, 2, 8).unwrap();
        let mut buf = Vec::new();
        ens.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "path,step,t,x,dw");
        assert_eq!(lines.len(), 1 + 2 * 4);
    }
}
