//! Finite-difference solver on a space-time grid — the deterministic
//! counterpart to the regression Monte Carlo solver, used to cross-check
//! it and to feed the pointwise residual tests.
//!
//! The system is marched backward from the terminal slice on a uniform
//! grid. Diffusion is discretized centrally, advection upwind by the sign
//! of the drift, and the driver always receives the *central* gradient
//! times the diffusion coefficient as its slope argument. Two schemes:
//!
//! * `SemiImplicit` (default): the linear generator is taken implicitly at
//!   the new time level (a strictly diagonally dominant tridiagonal system,
//!   solved by the Thomas algorithm), the driver explicitly at the old
//!   level. Unconditionally stable in the linear part.
//! * `Explicit`: everything at the old level. Setup rejects meshes
//!   violating the usual parabolic step bound
//!   `dt <= dx^2 / (sup sigma^2 + dx sup |b|)` (sampled over the grid).
//!
//! The two outermost columns are ghost columns updated by linear
//! extrapolation (zero second derivative), folded into the boundary rows
//! of the implicit system. The terminal slice — ghosts included — samples
//! the terminal condition exactly.
//!
//! Solutions can be persisted in a small binary format (magic `FBGD`,
//! version, dimensions, little-endian doubles) and evaluated anywhere in
//! the domain by bilinear interpolation.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::backward::{solve_lsmc, SolveError};
use crate::expr::EvalError;
use crate::forward::{simulate, SimulationError, TimeGrid};
use crate::problem::Coefficients;

const MAGIC: &[u8; 4] = b"FBGD";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("invalid mesh: {detail}")]
    BadMesh { detail: String },
    #[error(
        "explicit scheme is unstable on this mesh: dt = {dt:.3e} exceeds the \
         parabolic bound {dt_max:.3e}; refine time or coarsen space"
    )]
    ExplicitUnstable { dt: f64, dt_max: f64 },
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("solution became non-finite at time level {level}, column {column}")]
    NonFinite { level: usize, column: usize },
    #[error("tridiagonal pivot vanished at column {column}")]
    SingularSystem { column: usize },
    #[error("point (t = {t}, x = {x}) lies outside the solved domain")]
    OutOfDomain { t: f64, x: f64 },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("cache file is not valid: {0}")]
    Format(String),
    #[error(transparent)]
    Simulation(#[from] SimulationError),
    #[error(transparent)]
    Solve(#[from] SolveError),
}

/// Time stepping scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Scheme {
    Explicit,
    SemiImplicit,
}

/// Uniform mesh geometry: `interior_columns` nodes strictly inside
/// `[x_lo, x_hi]`, plus one ghost column on each side sitting exactly on
/// the endpoints; `time_steps` uniform steps across the problem horizon.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SpaceTimeMesh {
    x_lo: f64,
    x_hi: f64,
    interior_columns: usize,
    time_steps: usize,
}

impl SpaceTimeMesh {
    pub fn new(
        x_lo: f64,
        x_hi: f64,
        interior_columns: usize,
        time_steps: usize,
    ) -> Result<Self, GridError> {
        if !(x_lo.is_finite() && x_hi.is_finite() && x_hi > x_lo) {
            return Err(GridError::BadMesh {
                detail: format!("need finite x_hi > x_lo, got [{x_lo}, {x_hi}]"),
            });
        }
        if interior_columns < 3 {
            return Err(GridError::BadMesh {
                detail: "need at least 3 interior columns".into(),
            });
        }
        if time_steps == 0 {
            return Err(GridError::BadMesh {
                detail: "need at least one time step".into(),
            });
        }
        Ok(SpaceTimeMesh {
            x_lo,
            x_hi,
            interior_columns,
            time_steps,
        })
    }

    pub fn x_lo(&self) -> f64 {
        self.x_lo
    }

    pub fn x_hi(&self) -> f64 {
        self.x_hi
    }

    pub fn interior_columns(&self) -> usize {
        self.interior_columns
    }

    pub fn time_steps(&self) -> usize {
        self.time_steps
    }

    /// Column spacing; ghost columns sit on the domain endpoints.
    pub fn dx(&self) -> f64 {
        (self.x_hi - self.x_lo) / (self.interior_columns + 1) as f64
    }

    /// Coordinate of column `c` (`0..=interior_columns + 1`).
    pub fn x_at(&self, c: usize) -> f64 {
        self.x_lo + (self.x_hi - self.x_lo) * (c as f64 / (self.interior_columns + 1) as f64)
    }

    /// Total columns including ghosts.
    pub fn columns(&self) -> usize {
        self.interior_columns + 2
    }
}

/// The computed space-time field of every component.
#[derive(Debug, Clone)]
pub struct GridSolution {
    mesh: SpaceTimeMesh,
    horizon: f64,
    n: usize,
    scheme: Scheme,
    /// `[component][time level 0..=nt][column]`, flattened.
    values: Vec<f64>,
}

impl GridSolution {
    /// Tabulate closed-form fields onto a mesh. `value(i, t, x)` fills
    /// component `i` at every node, ghost columns included. The result
    /// carries the [`Scheme::SemiImplicit`] tag purely as serialization
    /// metadata — nothing was marched.
    pub fn from_fn(
        mesh: SpaceTimeMesh,
        horizon: f64,
        components: usize,
        value: impl Fn(usize, f64, f64) -> f64,
    ) -> Result<Self, GridError> {
        if components == 0 || !(horizon.is_finite() && horizon > 0.0) {
            return Err(GridError::BadMesh {
                detail: format!("cannot tabulate {components} components on horizon {horizon}"),
            });
        }
        let cols = mesh.columns();
        let nt = mesh.time_steps;
        let mut values = vec![0.0; components * (nt + 1) * cols];
        let mut pos = 0;
        for i in 0..components {
            for j in 0..=nt {
                let t = horizon * (j as f64 / nt as f64);
                for c in 0..cols {
                    values[pos] = value(i, t, mesh.x_at(c));
                    pos += 1;
                }
            }
        }
        Ok(GridSolution {
            mesh,
            horizon,
            n: components,
            scheme: Scheme::SemiImplicit,
            values,
        })
    }

    pub fn mesh(&self) -> &SpaceTimeMesh {
        &self.mesh
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn component_count(&self) -> usize {
        self.n
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.mesh.time_steps as f64
    }

    /// Time of level `j` (`0..=time_steps`).
    pub fn t_at(&self, j: usize) -> f64 {
        self.horizon * (j as f64 / self.mesh.time_steps as f64)
    }

    #[inline]
    fn idx(&self, i: usize, j: usize, c: usize) -> usize {
        (i * (self.mesh.time_steps + 1) + j) * self.mesh.columns() + c
    }

    /// Node value of component `i` at time level `j`, column `c`.
    #[inline]
    pub fn value(&self, i: usize, j: usize, c: usize) -> f64 {
        self.values[self.idx(i, j, c)]
    }

    /// Bilinear interpolation of component `i` at an arbitrary point of the
    /// solved domain.
    pub fn evaluate(&self, i: usize, t: f64, x: f64) -> Result<f64, GridError> {
        let nt = self.mesh.time_steps;
        let cols = self.mesh.columns();
        let slack_t = 1e-12 * (1.0 + self.horizon.abs());
        let slack_x = 1e-12 * (1.0 + self.mesh.x_hi.abs().max(self.mesh.x_lo.abs()));
        if !(t >= -slack_t && t <= self.horizon + slack_t)
            || !(x >= self.mesh.x_lo - slack_x && x <= self.mesh.x_hi + slack_x)
        {
            return Err(GridError::OutOfDomain { t, x });
        }
        let ft = ((t / self.horizon) * nt as f64).clamp(0.0, nt as f64);
        let fx = ((x - self.mesh.x_lo) / self.mesh.dx()).clamp(0.0, (cols - 1) as f64);
        let j0 = (ft.floor() as usize).min(nt - 1);
        let c0 = (fx.floor() as usize).min(cols - 2);
        let wt = ft - j0 as f64;
        let wx = fx - c0 as f64;
        let v00 = self.value(i, j0, c0);
        let v01 = self.value(i, j0, c0 + 1);
        let v10 = self.value(i, j0 + 1, c0);
        let v11 = self.value(i, j0 + 1, c0 + 1);
        Ok((1.0 - wt) * ((1.0 - wx) * v00 + wx * v01) + wt * ((1.0 - wx) * v10 + wx * v11))
    }

    /// Write the solution in the `FBGD` binary format.
    pub fn save(&self, path: &Path) -> Result<(), GridError> {
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(MAGIC)?;
        out.write_all(&FORMAT_VERSION.to_le_bytes())?;
        out.write_all(&(self.n as u32).to_le_bytes())?;
        out.write_all(&(self.mesh.time_steps as u32).to_le_bytes())?;
        out.write_all(&(self.mesh.interior_columns as u32).to_le_bytes())?;
        let scheme_tag: u32 = match self.scheme {
            Scheme::Explicit => 0,
            Scheme::SemiImplicit => 1,
        };
        out.write_all(&scheme_tag.to_le_bytes())?;
        for v in [self.mesh.x_lo, self.mesh.x_hi, self.horizon] {
            out.write_all(&v.to_le_bytes())?;
        }
        for v in &self.values {
            out.write_all(&v.to_le_bytes())?;
        }
        out.flush()?;
        Ok(())
    }

    /// Read a solution written by [`GridSolution::save`].
    pub fn load(path: &Path) -> Result<GridSolution, GridError> {
        let mut input = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(GridError::Format("bad magic bytes".into()));
        }
        fn read_u32(input: &mut impl Read) -> Result<u32, GridError> {
            let mut buf = [0u8; 4];
            input.read_exact(&mut buf)?;
            Ok(u32::from_le_bytes(buf))
        }
        fn read_f64(input: &mut impl Read) -> Result<f64, GridError> {
            let mut buf = [0u8; 8];
            input.read_exact(&mut buf)?;
            Ok(f64::from_le_bytes(buf))
        }
        let version = read_u32(&mut input)?;
        if version != FORMAT_VERSION {
            return Err(GridError::Format(format!(
                "unsupported version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let n = read_u32(&mut input)? as usize;
        let nt = read_u32(&mut input)? as usize;
        let nx = read_u32(&mut input)? as usize;
        let scheme = match read_u32(&mut input)? {
            0 => Scheme::Explicit,
            1 => Scheme::SemiImplicit,
            other => return Err(GridError::Format(format!("unknown scheme tag {other}"))),
        };
        let x_lo = read_f64(&mut input)?;
        let x_hi = read_f64(&mut input)?;
        let horizon = read_f64(&mut input)?;
        if n == 0 || n > 1024 || nt == 0 || nt > 50_000_000 || nx < 3 || nx > 50_000_000 {
            return Err(GridError::Format("implausible dimensions".into()));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(GridError::Format("bad horizon".into()));
        }
        let mesh = SpaceTimeMesh::new(x_lo, x_hi, nx, nt)
            .map_err(|e| GridError::Format(e.to_string()))?;
        let count = n
            .checked_mul(nt + 1)
            .and_then(|v| v.checked_mul(nx + 2))
            .ok_or_else(|| GridError::Format("dimension overflow".into()))?;
        let mut bytes = vec![0u8; count * 8];
        input.read_exact(&mut bytes)?;
        let mut trailing = [0u8; 1];
        if input.read(&mut trailing)? != 0 {
            return Err(GridError::Format("trailing bytes after payload".into()));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|chunk| f64::from_le_bytes(chunk.try_into().unwrap()))
            .collect();
        Ok(GridSolution {
            mesh,
            horizon,
            n,
            scheme,
            values,
        })
    }

    /// Dump one component as CSV (`t,x,u`).
    pub fn write_csv(&self, i: usize, out: &mut impl Write) -> io::Result<()> {
        writeln!(out, "t,x,u")?;
        for j in 0..=self.mesh.time_steps {
            for c in 0..self.mesh.columns() {
                writeln!(
                    out,
                    "{},{},{}",
                    self.t_at(j),
                    self.mesh.x_at(c),
                    self.value(i, j, c)
                )?;
            }
        }
        Ok(())
    }
}

/// Stencil pieces at one time level, indexed by column.
struct LevelCoefficients {
    /// Weight of `u[c-1]`: diffusion + negative-drift upwind part.
    alpha: Vec<f64>,
    /// Weight of `u[c+1]`: diffusion + positive-drift upwind part.
    gamma: Vec<f64>,
    /// Raw diffusion coefficient (for the driver's slope argument).
    sigma: Vec<f64>,
}

fn level_coefficients<C: Coefficients>(
    coeffs: &C,
    mesh: &SpaceTimeMesh,
    t: f64,
) -> Result<LevelCoefficients, EvalError> {
    let dx = mesh.dx();
    let rows: Vec<Result<(f64, f64, f64), EvalError>> = (0..mesh.columns())
        .into_par_iter()
        .map(|c| {
            let x = mesh.x_at(c);
            let b = coeffs.drift(t, x)?;
            let s = coeffs.diffusion(t, x)?;
            let diff = 0.5 * s * s / (dx * dx);
            Ok((diff + (-b).max(0.0) / dx, diff + b.max(0.0) / dx, s))
        })
        .collect();
    let mut alpha = Vec::with_capacity(rows.len());
    let mut gamma = Vec::with_capacity(rows.len());
    let mut sigma = Vec::with_capacity(rows.len());
    for row in rows {
        let (a, g, s) = row?;
        alpha.push(a);
        gamma.push(g);
        sigma.push(s);
    }
    Ok(LevelCoefficients { alpha, gamma, sigma })
}

/// Driver values at the old level for one component, interior columns
/// `1..=nx` (index 0 of the result is column 1).
fn driver_terms<C: Coefficients>(
    coeffs: &C,
    mesh: &SpaceTimeMesh,
    values: &[f64],
    level_stride: usize,
    nt: usize,
    i: usize,
    j_old: usize,
    t_old: f64,
    sigma_old: &[f64],
) -> Result<Vec<f64>, EvalError> {
    let n = coeffs.component_count();
    let nx = mesh.interior_columns();
    let dx = mesh.dx();
    let old_base = (i * (nt + 1) + j_old) * level_stride;
    let results: Vec<Result<f64, EvalError>> = (1..=nx)
        .into_par_iter()
        .map(|c| {
            let mut yargs = vec![0.0; n];
            for (ii, y) in yargs.iter_mut().enumerate() {
                *y = values[(ii * (nt + 1) + j_old) * level_stride + c];
            }
            let grad = (values[old_base + c + 1] - values[old_base + c - 1]) / (2.0 * dx);
            coeffs.driver(i, t_old, mesh.x_at(c), &yargs, sigma_old[c] * grad)
        })
        .collect();
    let mut out = Vec::with_capacity(nx);
    for r in results {
        out.push(r?);
    }
    Ok(out)
}

/// Thomas solve of a tridiagonal system over interior columns `1..=nx`;
/// bands and `rhs` are indexed by column (entry 0 unused). Overwrites
/// `rhs` with the solution.
fn thomas(
    lower: &[f64],
    diag: &[f64],
    upper: &[f64],
    rhs: &mut [f64],
    nx: usize,
) -> Result<(), GridError> {
    let mut c_prime = vec![0.0; nx + 1];
    let mut denom = diag[1];
    if denom.abs() < 1e-300 {
        return Err(GridError::SingularSystem { column: 1 });
    }
    c_prime[1] = upper[1] / denom;
    rhs[1] /= denom;
    for c in 2..=nx {
        denom = diag[c] - lower[c] * c_prime[c - 1];
        if denom.abs() < 1e-300 {
            return Err(GridError::SingularSystem { column: c });
        }
        c_prime[c] = upper[c] / denom;
        rhs[c] = (rhs[c] - lower[c] * rhs[c - 1]) / denom;
    }
    for c in (1..nx).rev() {
        rhs[c] -= c_prime[c] * rhs[c + 1];
    }
    Ok(())
}

/// March the coupled system backward on the mesh.
pub fn solve_fd<C: Coefficients>(
    coeffs: &C,
    mesh: &SpaceTimeMesh,
    scheme: Scheme,
) -> Result<GridSolution, GridError> {
    let n = coeffs.component_count();
    let nt = mesh.time_steps;
    let nx = mesh.interior_columns;
    let cols = mesh.columns();
    let horizon = coeffs.horizon();
    let dt = horizon / nt as f64;
    let dx = mesh.dx();

    // Explicit stability bound, sampled at five times and every column.
    if scheme == Scheme::Explicit {
        let mut sup_sig2: f64 = 0.0;
        let mut sup_b: f64 = 0.0;
        for jt in 0..5 {
            let t = horizon * jt as f64 / 4.0;
            for c in 0..cols {
                let x = mesh.x_at(c);
                sup_sig2 = sup_sig2.max(coeffs.diffusion(t, x)?.powi(2));
                sup_b = sup_b.max(coeffs.drift(t, x)?.abs());
            }
        }
        let denom = sup_sig2 + dx * sup_b;
        if denom > 0.0 {
            let dt_max = dx * dx / denom;
            if dt > dt_max {
                return Err(GridError::ExplicitUnstable { dt, dt_max });
            }
        }
    }

    let mut sol = GridSolution {
        mesh: *mesh,
        horizon,
        n,
        scheme,
        values: vec![0.0; n * (nt + 1) * cols],
    };

    // Terminal slice: sample the terminal condition on every column.
    for i in 0..n {
        let rows: Vec<Result<f64, EvalError>> = (0..cols)
            .into_par_iter()
            .map(|c| coeffs.terminal(i, mesh.x_at(c)))
            .collect();
        let base = sol.idx(i, nt, 0);
        for (c, r) in rows.into_iter().enumerate() {
            sol.values[base + c] = r?;
        }
    }

    // Cache stencils once when the linear coefficients ignore time.
    let invariant = coeffs.drift_is_time_invariant() && coeffs.diffusion_is_time_invariant();
    let cached = if invariant {
        Some(level_coefficients(coeffs, mesh, 0.0)?)
    } else {
        None
    };

    let mut lower = vec![0.0; nx + 1];
    let mut diag = vec![0.0; nx + 1];
    let mut upper = vec![0.0; nx + 1];
    let mut rhs = vec![0.0; nx + 1];

    for j in (0..nt).rev() {
        let t_old = horizon * ((j + 1) as f64 / nt as f64);
        let t_new = horizon * (j as f64 / nt as f64);

        // Stencils at the level where the generator acts.
        let lv_owned;
        let lv: &LevelCoefficients = if let Some(c) = &cached {
            c
        } else {
            let t_gen = match scheme {
                Scheme::SemiImplicit => t_new,
                Scheme::Explicit => t_old,
            };
            lv_owned = level_coefficients(coeffs, mesh, t_gen)?;
            &lv_owned
        };
        // Diffusion coefficient at the old level for the slope argument.
        let sig_owned;
        let sigma_old: &[f64] = if let Some(c) = &cached {
            &c.sigma
        } else if scheme == Scheme::Explicit {
            // Explicit stencils are already evaluated at the old level.
            &lv.sigma
        } else {
            sig_owned = level_coefficients(coeffs, mesh, t_old)?.sigma;
            &sig_owned
        };

        for i in 0..n {
            let f_terms = driver_terms(
                coeffs, mesh, &sol.values, cols, nt, i, j + 1, t_old, sigma_old,
            )?;
            let old_base = sol.idx(i, j + 1, 0);
            let new_base = sol.idx(i, j, 0);

            match scheme {
                Scheme::SemiImplicit => {
                    for c in 1..=nx {
                        rhs[c] = sol.values[old_base + c] + dt * f_terms[c - 1];
                        lower[c] = -dt * lv.alpha[c];
                        diag[c] = 1.0 + dt * (lv.alpha[c] + lv.gamma[c]);
                        upper[c] = -dt * lv.gamma[c];
                    }
                    // Fold the ghost extrapolation u[0] = 2u[1] - u[2] into
                    // row 1, and symmetrically at the right edge.
                    diag[1] = 1.0 + dt * (lv.gamma[1] - lv.alpha[1]);
                    upper[1] = dt * (lv.alpha[1] - lv.gamma[1]);
                    diag[nx] = 1.0 + dt * (lv.alpha[nx] - lv.gamma[nx]);
                    lower[nx] = dt * (lv.gamma[nx] - lv.alpha[nx]);
                    thomas(&lower, &diag, &upper, &mut rhs, nx)?;
                    for c in 1..=nx {
                        sol.values[new_base + c] = rhs[c];
                    }
                }
                Scheme::Explicit => {
                    for c in 1..=nx {
                        let u_m = sol.values[old_base + c - 1];
                        let u_0 = sol.values[old_base + c];
                        let u_p = sol.values[old_base + c + 1];
                        let generator =
                            lv.alpha[c] * u_m - (lv.alpha[c] + lv.gamma[c]) * u_0 + lv.gamma[c] * u_p;
                        rhs[c] = u_0 + dt * (generator + f_terms[c - 1]);
                    }
                    for c in 1..=nx {
                        sol.values[new_base + c] = rhs[c];
                    }
                }
            }
            // Ghost columns by linear extrapolation.
            sol.values[new_base] = 2.0 * sol.values[new_base + 1] - sol.values[new_base + 2];
            sol.values[new_base + cols - 1] =
                2.0 * sol.values[new_base + cols - 2] - sol.values[new_base + cols - 3];

            for c in 0..cols {
                if !sol.values[new_base + c].is_finite() {
                    return Err(GridError::NonFinite { level: j, column: c });
                }
            }
        }
    }
    Ok(sol)
}

/// One probe comparison between the grid field and a fresh Monte Carlo
/// solve started at the probe point.
#[derive(Debug, Clone, Serialize)]
pub struct ProbeComparison {
    pub t: f64,
    pub x: f64,
    pub component: usize,
    pub grid_value: f64,
    pub mc_value: f64,
    pub gap: f64,
}

/// Cross-validation summary.
#[derive(Debug, Clone, Serialize)]
pub struct CrossValidation {
    pub probes: Vec<ProbeComparison>,
    pub max_gap: f64,
}

/// Monte Carlo parameters for [`cross_validate`].
#[derive(Debug, Clone, Copy, Serialize)]
pub struct CrossValidateOptions {
    pub n_paths: usize,
    pub time_steps: usize,
    pub basis_degree: usize,
    pub seed: u64,
}

/// Compare the grid solution against independent regression Monte Carlo
/// solves at the given `(t, x)` probe points, all components.
pub fn cross_validate<C: Coefficients>(
    coeffs: &C,
    grid: &GridSolution,
    probe_points: &[(f64, f64)],
    options: &CrossValidateOptions,
) -> Result<CrossValidation, GridError> {
    let n = coeffs.component_count();
    let mut probes = Vec::with_capacity(probe_points.len() * n);
    let mut max_gap: f64 = 0.0;
    for (pi, &(t, x)) in probe_points.iter().enumerate() {
        if t >= coeffs.horizon() {
            return Err(GridError::OutOfDomain { t, x });
        }
        let sub_grid = TimeGrid::new(t, coeffs.horizon(), options.time_steps)
            .map_err(GridError::Simulation)?;
        let seed = crate::rng::subseed(options.seed, pi as u64);
        let ens = simulate(coeffs, sub_grid, x, options.n_paths, seed)?;
        let sol = solve_lsmc(coeffs, &ens, options.basis_degree)?;
        for i in 0..n {
            let (mc_value, _) = sol.y_start(i);
            let grid_value = grid.evaluate(i, t, x)?;
            let gap = (mc_value - grid_value).abs();
            max_gap = max_gap.max(gap);
            probes.push(ProbeComparison {
                t,
                x,
                component: i + 1,
                grid_value,
                mc_value,
                gap,
            });
        }
    }
    Ok(CrossValidation { probes, max_gap })
}
