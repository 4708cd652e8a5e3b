//! Backward solvers: regression Monte Carlo for the coupled value
//! components riding on a simulated forward ensemble.
//!
//! Two entry points share one backward-marching engine:
//!
//! * [`solve_lsmc`] — single backward sweep. At each time step the slope
//!   component is regressed from next-step values times the Brownian
//!   increment, then the value component from next-step values plus a
//!   driver increment evaluated *explicitly*: every `y` argument comes from
//!   the already-computed next time slice, the `z` argument from the
//!   just-fitted slope. No within-step fixed point is needed.
//! * [`solve_picard`] — iterated sweeps. The first pass solves the
//!   driver-free problem (so driver-free systems converge immediately);
//!   each subsequent sweep re-solves the recursion with the driver frozen
//!   at the previous iterate's values. The fixed point of these sweeps
//!   satisfies exactly the [`solve_lsmc`] recursion, so the two solvers
//!   agree up to the iteration tolerance.
//!
//! Regressions use a polynomial basis in the state with columns scaled by
//! their sample standard deviation and a tiny scale-free ridge, so a
//! degenerate design (deterministic state) collapses gracefully to the
//! sample mean. All parallel reductions run over fixed-size chunks
//! combined in order, making results independent of the worker-thread
//! count.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::expr::EvalError;
use crate::forward::PathEnsemble;
use crate::problem::Coefficients;
use crate::stats::mean_and_stderr;

/// Fixed work-chunk length for order-stable parallel reductions.
const CHUNK: usize = 8192;

/// Relative ridge added to the normal equations (times the mean diagonal).
const RIDGE_REL: f64 = 1e-10;

/// Largest supported regression basis (degree 7).
const MAX_BASIS: usize = 8;

/// Stack capacity for per-sample component gathers.
const MAX_COMPONENTS: usize = 61;

#[derive(Debug, Error)]
pub enum SolveError {
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("regression produced a non-finite fit at step {step}, component {component}")]
    NonFiniteFit { step: usize, component: usize },
    #[error("basis degree {0} exceeds the supported maximum of {max}", max = MAX_BASIS - 1)]
    DegreeTooLarge(usize),
    #[error("ensemble needs at least two paths for regression, got {0}")]
    TooFewPaths(usize),
    #[error("system has {components} components, supported maximum is {MAX_COMPONENTS}")]
    TooManyComponents { components: usize },
}

/// Which solver produced a [`BackwardSolution`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SolveMethod {
    Lsmc,
    Picard,
}

/// Value and slope fields along the ensemble, all components, all steps.
#[derive(Debug, Clone)]
pub struct BackwardSolution {
    n: usize,
    steps: usize,
    n_paths: usize,
    /// `[component][time 0..=steps][path]`, flattened.
    y: Vec<f64>,
    /// `[component][step 0..steps][path]`, flattened.
    z: Vec<f64>,
    method: SolveMethod,
    basis_degree: usize,
    /// Sweeps performed (`None` for the single-pass solver).
    picard_iterations: Option<usize>,
    /// Sup-norm change of the value field per sweep (empty for one-pass).
    residual_history: Vec<f64>,
}

impl BackwardSolution {
    pub fn component_count(&self) -> usize {
        self.n
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn method(&self) -> SolveMethod {
        self.method
    }

    pub fn basis_degree(&self) -> usize {
        self.basis_degree
    }

    pub fn picard_iterations(&self) -> Option<usize> {
        self.picard_iterations
    }

    pub fn residual_history(&self) -> &[f64] {
        &self.residual_history
    }

    /// Value samples of component `i` at time index `k` (`0..=steps`).
    pub fn y_slice(&self, i: usize, k: usize) -> &[f64] {
        let base = (i * (self.steps + 1) + k) * self.n_paths;
        &self.y[base..base + self.n_paths]
    }

    /// Slope samples of component `i` over `[t_k, t_{k+1})`.
    pub fn z_slice(&self, i: usize, k: usize) -> &[f64] {
        let base = (i * self.steps + k) * self.n_paths;
        &self.z[base..base + self.n_paths]
    }

    /// Initial value of component `i` with its Monte Carlo standard error.
    /// The ensemble starts from a single state, so the time-zero slice is a
    /// (near-)constant fitted value; the spread reported here reflects the
    /// degenerate-regression residual, not sampling noise of the estimate.
    pub fn y_start(&self, i: usize) -> (f64, f64) {
        mean_and_stderr(self.y_slice(i, 0))
    }
}

/// Basis columns: scaled monomials `x^j / s_j`, `j = 0..=degree`.
#[derive(Clone)]
struct Basis {
    degree: usize,
    scales: [f64; MAX_BASIS],
}

impl Basis {
    /// Column scales from the sample: standard deviation of each monomial
    /// column, with zero-spread columns left unscaled.
    fn fit(xs: &[f64], degree: usize) -> Basis {
        let m = xs.len() as f64;
        // First and second moments of each column, chunk-reduced in order.
        let partials: Vec<[f64; 2 * MAX_BASIS]> = xs
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut acc = [0.0; 2 * MAX_BASIS];
                for &x in chunk {
                    let mut p = 1.0;
                    for j in 0..=degree {
                        acc[2 * j] += p;
                        acc[2 * j + 1] += p * p;
                        p *= x;
                    }
                }
                acc
            })
            .collect();
        let mut sums = [0.0; 2 * MAX_BASIS];
        for part in &partials {
            for (s, p) in sums.iter_mut().zip(part.iter()) {
                *s += p;
            }
        }
        let mut scales = [1.0; MAX_BASIS];
        for j in 0..=degree {
            let mu = sums[2 * j] / m;
            let var = (sums[2 * j + 1] / m - mu * mu).max(0.0);
            let sd = var.sqrt();
            if sd > 0.0 {
                scales[j] = sd;
            }
        }
        Basis { degree, scales }
    }

    #[inline]
    fn row(&self, x: f64, out: &mut [f64; MAX_BASIS]) {
        let mut p = 1.0;
        for j in 0..=self.degree {
            out[j] = p / self.scales[j];
            p *= x;
        }
    }

    fn width(&self) -> usize {
        self.degree + 1
    }
}

/// In-place Cholesky factorization of a row-major `w x w` symmetric
/// positive-definite matrix (lower triangle). Returns `None` if a pivot
/// degenerates — impossible once the ridge is added, kept as a guard.
fn cholesky_factor(a: &mut [f64], w: usize) -> Option<()> {
    for j in 0..w {
        let mut d = a[j * w + j];
        for k in 0..j {
            d -= a[j * w + k] * a[j * w + k];
        }
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        let lj = d.sqrt();
        a[j * w + j] = lj;
        for i in (j + 1)..w {
            let mut v = a[i * w + j];
            for k in 0..j {
                v -= a[i * w + k] * a[j * w + k];
            }
            a[i * w + j] = v / lj;
        }
    }
    Some(())
}

/// Solve `L L^T c = rhs` in place given the factor from
/// [`cholesky_factor`].
fn cholesky_substitute(l: &[f64], rhs: &mut [f64], w: usize) {
    for i in 0..w {
        let mut v = rhs[i];
        for k in 0..i {
            v -= l[i * w + k] * rhs[k];
        }
        rhs[i] = v / l[i * w + i];
    }
    for i in (0..w).rev() {
        let mut v = rhs[i];
        for k in (i + 1)..w {
            v -= l[k * w + i] * rhs[k];
        }
        rhs[i] = v / l[i * w + i];
    }
}

/// Per-step regression context: Gram matrix factored once, reused for every
/// right-hand side at that step.
struct StepRegression {
    basis: Basis,
    /// Cholesky factor (lower triangle) of the ridged Gram matrix.
    factor: Vec<f64>,
}

impl StepRegression {
    fn build(xs: &[f64], degree: usize) -> Option<StepRegression> {
        let basis = Basis::fit(xs, degree);
        let w = basis.width();
        let partials: Vec<Vec<f64>> = xs
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut g = vec![0.0; w * w];
                let mut row = [0.0; MAX_BASIS];
                for &x in chunk {
                    basis.row(x, &mut row);
                    for a in 0..w {
                        for b in 0..=a {
                            g[a * w + b] += row[a] * row[b];
                        }
                    }
                }
                g
            })
            .collect();
        let mut gram = vec![0.0; w * w];
        for part in &partials {
            for (g, p) in gram.iter_mut().zip(part.iter()) {
                *g += p;
            }
        }
        // Mirror and add the scale-free ridge.
        let mut trace = 0.0;
        for a in 0..w {
            trace += gram[a * w + a];
        }
        let ridge = RIDGE_REL * trace / w as f64;
        for a in 0..w {
            for b in (a + 1)..w {
                gram[a * w + b] = gram[b * w + a];
            }
            gram[a * w + a] += ridge;
        }
        cholesky_factor(&mut gram, w)?;
        Some(StepRegression { basis, factor: gram })
    }

    /// Fitted values of the least-squares projection of `targets` onto the
    /// basis, evaluated at the same sample points.
    fn fitted(&self, xs: &[f64], targets: &[f64], out: &mut [f64]) -> Option<()> {
        let w = self.basis.width();
        let partials: Vec<Vec<f64>> = xs
            .par_chunks(CHUNK)
            .zip(targets.par_chunks(CHUNK))
            .map(|(xc, tc)| {
                let mut rhs = vec![0.0; w];
                let mut row = [0.0; MAX_BASIS];
                for (&x, &t) in xc.iter().zip(tc.iter()) {
                    self.basis.row(x, &mut row);
                    for (r, &b) in rhs.iter_mut().zip(row.iter()) {
                        *r += b * t;
                    }
                }
                rhs
            })
            .collect();
        let mut rhs = vec![0.0; w];
        for part in &partials {
            for (r, p) in rhs.iter_mut().zip(part.iter()) {
                *r += p;
            }
        }
        cholesky_substitute(&self.factor, &mut rhs, w);
        if rhs.iter().any(|c| !c.is_finite()) {
            return None;
        }
        out.par_chunks_mut(CHUNK)
            .zip(xs.par_chunks(CHUNK))
            .for_each(|(oc, xc)| {
                let mut row = [0.0; MAX_BASIS];
                for (o, &x) in oc.iter_mut().zip(xc.iter()) {
                    self.basis.row(x, &mut row);
                    let mut v = 0.0;
                    for (c, &b) in rhs.iter().zip(row.iter()) {
                        v += c * b;
                    }
                    *o = v;
                }
            });
        Some(())
    }
}

/// Driver-argument source for one backward pass.
#[derive(Clone, Copy)]
enum PassMode<'a> {
    /// Driver off: solve the conditional-expectation recursion only.
    DriverFree,
    /// Self-consistent explicit step: `y` arguments from the current pass's
    /// next time slice, `z` from the current pass's fresh fit.
    SelfConsistent,
    /// Driver frozen at a previous iterate's fields.
    Frozen { prev_y: &'a [f64], prev_z: &'a [f64] },
}

struct Fields {
    n: usize,
    steps: usize,
    n_paths: usize,
    y: Vec<f64>,
    z: Vec<f64>,
}

impl Fields {
    fn new(n: usize, steps: usize, n_paths: usize) -> Fields {
        Fields {
            n,
            steps,
            n_paths,
            y: vec![0.0; n * (steps + 1) * n_paths],
            z: vec![0.0; n * steps * n_paths],
        }
    }

    #[inline]
    fn y_base(&self, i: usize, k: usize) -> usize {
        (i * (self.steps + 1) + k) * self.n_paths
    }

    #[inline]
    fn z_base(&self, i: usize, k: usize) -> usize {
        (i * self.steps + k) * self.n_paths
    }
}

/// One full backward pass over the ensemble.
fn backward_pass<C: Coefficients>(
    coeffs: &C,
    ens: &PathEnsemble,
    degree: usize,
    mode: PassMode<'_>,
) -> Result<Fields, SolveError> {
    let n = coeffs.component_count();
    let steps = ens.grid().steps();
    let m = ens.n_paths();
    let dt = ens.grid().dt();
    let mut fields = Fields::new(n, steps, m);

    // Terminal slice: exact coefficient values, not fitted.
    for i in 0..n {
        let base = fields.y_base(i, steps);
        let y_term = &mut fields.y[base..base + m];
        let outcomes: Vec<Result<(), EvalError>> = y_term
            .par_chunks_mut(CHUNK)
            .enumerate()
            .map(|(c, out)| {
                for (off, slot) in out.iter_mut().enumerate() {
                    let p = c * CHUNK + off;
                    *slot = coeffs.terminal(i, ens.state(p, steps))?;
                }
                Ok(())
            })
            .collect();
        for o in outcomes {
            o?;
        }
    }

    let mut targets = vec![0.0; m];
    let mut y_next_t = vec![0.0; m * n]; // per-path gather of the next slice
    for k in (0..steps).rev() {
        let xs = ens.states_at(k);
        let reg = StepRegression::build(&xs, degree)
            .ok_or(SolveError::NonFiniteFit { step: k, component: 0 })?;
        let t_k = ens.grid().time(k);

        // Gather the (k+1)-slice of every component, path-major, for driver
        // argument vectors: entries `y_next_t[p*n..(p+1)*n]`.
        let source_y: &[f64] = match mode {
            PassMode::Frozen { prev_y, .. } => prev_y,
            _ => &fields.y,
        };
        for i in 0..n {
            let base = (i * (steps + 1) + (k + 1)) * m;
            let col = &source_y[base..base + m];
            y_next_t
                .par_chunks_mut(CHUNK * n)
                .zip(col.par_chunks(CHUNK))
                .for_each(|(dst, src)| {
                    for (off, &v) in src.iter().enumerate() {
                        dst[off * n + i] = v;
                    }
                });
        }

        for i in 0..n {
            // Slope fit: next value times increment over the step length.
            let y_next_base = fields.y_base(i, k + 1);
            {
                let y_next = &fields.y[y_next_base..y_next_base + m];
                targets
                    .par_chunks_mut(CHUNK)
                    .zip(y_next.par_chunks(CHUNK))
                    .enumerate()
                    .for_each(|(c, (tc, yc))| {
                        for (off, t) in tc.iter_mut().enumerate() {
                            let p = c * CHUNK + off;
                            *t = yc[off] * ens.increment(p, k) / dt;
                        }
                    });
            }
            let z_base = fields.z_base(i, k);
            {
                let (z_head, _) = fields.z.split_at_mut(z_base + m);
                let z_out = &mut z_head[z_base..];
                reg.fitted(&xs, &targets, z_out)
                    .ok_or(SolveError::NonFiniteFit { step: k, component: i })?;
            }

            // Value fit: next value plus the explicit driver increment.
            match mode {
                PassMode::DriverFree => {
                    let y_next = &fields.y[y_next_base..y_next_base + m];
                    targets
                        .par_chunks_mut(CHUNK)
                        .zip(y_next.par_chunks(CHUNK))
                        .for_each(|(tc, yc)| tc.copy_from_slice(yc));
                }
                PassMode::SelfConsistent | PassMode::Frozen { .. } => {
                    let z_arg: &[f64] = match mode {
                        PassMode::Frozen { prev_z, .. } => {
                            let base = (i * steps + k) * m;
                            &prev_z[base..base + m]
                        }
                        _ => &fields.z[z_base..z_base + m],
                    };
                    let y_next = &fields.y[y_next_base..y_next_base + m];
                    let outcomes: Vec<Result<(), EvalError>> = targets
                        .par_chunks_mut(CHUNK)
                        .zip(y_next.par_chunks(CHUNK))
                        .zip(z_arg.par_chunks(CHUNK))
                        .enumerate()
                        .map(|(c, ((tc, yc), zc))| {
                            for (off, t) in tc.iter_mut().enumerate() {
                                let p = c * CHUNK + off;
                                let yargs = &y_next_t[p * n..(p + 1) * n];
                                let f = coeffs.driver(i, t_k, xs[p], yargs, zc[off])?;
                                *t = yc[off] + dt * f;
                            }
                            Ok(())
                        })
                        .collect();
                    for o in outcomes {
                        o?;
                    }
                }
            }
            let y_base = fields.y_base(i, k);
            let (y_head, _) = fields.y.split_at_mut(y_base + m);
            let y_out = &mut y_head[y_base..];
            reg.fitted(&xs, &targets, y_out)
                .ok_or(SolveError::NonFiniteFit { step: k, component: i })?;
        }
    }
    Ok(fields)
}

fn validate<C: Coefficients>(
    coeffs: &C,
    ens: &PathEnsemble,
    degree: usize,
) -> Result<(), SolveError> {
    if degree + 1 > MAX_BASIS {
        return Err(SolveError::DegreeTooLarge(degree));
    }
    if ens.n_paths() < 2 {
        return Err(SolveError::TooFewPaths(ens.n_paths()));
    }
    if coeffs.component_count() > MAX_COMPONENTS {
        return Err(SolveError::TooManyComponents {
            components: coeffs.component_count(),
        });
    }
    Ok(())
}

/// Single-sweep regression solve of the backward system on `ens`.
pub fn solve_lsmc<C: Coefficients>(
    coeffs: &C,
    ens: &PathEnsemble,
    degree: usize,
) -> Result<BackwardSolution, SolveError> {
    validate(coeffs, ens, degree)?;
    let fields = backward_pass(coeffs, ens, degree, PassMode::SelfConsistent)?;
    Ok(BackwardSolution {
        n: fields.n,
        steps: fields.steps,
        n_paths: fields.n_paths,
        y: fields.y,
        z: fields.z,
        method: SolveMethod::Lsmc,
        basis_degree: degree,
        picard_iterations: None,
        residual_history: Vec::new(),
    })
}

/// Iterated solve: a driver-free warm start, then sweeps with the driver
/// frozen at the previous iterate, until the sup-norm change of the value
/// field drops below `tol` or `max_sweeps` is reached.
pub fn solve_picard<C: Coefficients>(
    coeffs: &C,
    ens: &PathEnsemble,
    degree: usize,
    max_sweeps: usize,
    tol: f64,
) -> Result<BackwardSolution, SolveError> {
    validate(coeffs, ens, degree)?;
    let mut current = backward_pass(coeffs, ens, degree, PassMode::DriverFree)?;
    let mut residual_history = Vec::new();
    let mut sweeps = 0;
    for _ in 0..max_sweeps {
        let next = backward_pass(
            coeffs,
            ens,
            degree,
            PassMode::Frozen {
                prev_y: &current.y,
                prev_z: &current.z,
            },
        )?;
        sweeps += 1;
        // Exact (associative) max-reduction of the value-field change.
        let residual = next
            .y
            .par_chunks(CHUNK)
            .zip(current.y.par_chunks(CHUNK))
            .map(|(a, b)| {
                a.iter()
                    .zip(b.iter())
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0, f64::max)
            })
            .reduce(|| 0.0, f64::max);
        residual_history.push(residual);
        current = next;
        if residual <= tol {
            break;
        }
    }
    Ok(BackwardSolution {
        n: current.n,
        steps: current.steps,
        n_paths: current.n_paths,
        y: current.y,
        z: current.z,
        method: SolveMethod::Picard,
        basis_degree: degree,
        picard_iterations: Some(sweeps),
        residual_history,
    })
}
