//! Pointwise sub/supersolution checks on grid candidates, plus a sampled
//! audit of the regularity a value function is expected to carry.
//!
//! **Sub/supersolution checks.** At every interior grid node, each
//! component's discrete derivatives define a quadratic jet — the standard
//! numerical proxy for a smooth test function touching the candidate at
//! that node. Perturbing the jet's curvature by `+c` keeps it touching
//! from above; by `-c`, from below. Evaluating the parabolic operator plus
//! driver on the test function at the touch point yields a residual that
//! is affine in the added curvature (`residual(c) = residual(0) +
//! sigma^2 c`), so upward perturbations can only relax the subsolution
//! inequality and downward ones the supersolution inequality. The checker
//! scans every interior node, every component, and every requested
//! curvature; the subsolution verdict requires residuals `>= -tolerance`
//! for all above-touching tests, the supersolution verdict `<= +tolerance`
//! for all below-touching ones. Each component is checked at its own worst
//! node — touch points are allowed to differ between components — while
//! the driver's off-component arguments are read from the touching test
//! functions, which at the touch point equal the candidate's own values.
//! Boundary bands (two cells in space, one level in time) are excluded
//! from the verdict and recorded in the report.
//!
//! **Regularity audit.** Given any pointwise evaluator of a candidate
//! value function, the audit estimates its spatial Lipschitz constant from
//! random pairs, fits the time-increment growth `max_x |u(t+d, x) -
//! u(t, x)| ~ C d^rho` over a list of widths by log-log regression, and
//! bounds the linear-growth ratio `|u| / (1 + |x|)`. Time-independent
//! candidates are flagged instead of fitted.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::expr::EvalError;
use crate::pdegrid::GridSolution;
use crate::problem::Coefficients;
use crate::rng::CounterRng;
use crate::stats::{log_log_exponent, LineFit};

/// Cells excluded on each side of the spatial interior.
const SPACE_MARGIN_CELLS: usize = 2;
/// Time levels excluded at each end (central time differences need both
/// neighbors).
const TIME_MARGIN_LEVELS: usize = 1;

/// Random streams for the regularity sampling.
const REG_PAIR_STREAM: u64 = 5000;
const REG_HOLDER_STREAM: u64 = 5100;

#[derive(Debug, Error)]
pub enum ViscosityError {
    #[error("candidate does not fit the check: {detail}")]
    BadCandidate { detail: String },
    #[error("invalid check request: {detail}")]
    BadRequest { detail: String },
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Where a worst residual was observed.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct TouchPoint {
    pub t: f64,
    pub x: f64,
    /// Time level and column on the candidate's mesh.
    pub level: usize,
    pub column: usize,
    /// Signed curvature added to the jet (positive: touching from above).
    pub curvature: f64,
}

/// Verdicts and worst residuals for one component.
#[derive(Debug, Clone, Serialize)]
pub struct ComponentViscosity {
    /// One-based component index.
    pub component: usize,
    pub sub_ok: bool,
    pub super_ok: bool,
    /// Most negative residual over all above-touching tests.
    pub worst_sub_residual: f64,
    pub worst_sub_location: TouchPoint,
    /// Most positive residual over all below-touching tests.
    pub worst_super_residual: f64,
    pub worst_super_location: TouchPoint,
}

#[derive(Debug, Clone, Serialize)]
pub struct ViscosityReport {
    pub tolerance: f64,
    /// Curvature magnitudes tested in addition to the plain jet.
    pub curvatures: Vec<f64>,
    pub space_margin_cells: usize,
    pub time_margin_levels: usize,
    pub components: Vec<ComponentViscosity>,
    pub all_sub_ok: bool,
    pub all_super_ok: bool,
}

/// Operator-plus-driver residual of the candidate's quadratic jet at one
/// node, with `signed_curvature` added to the jet's second derivative.
/// The value the checker records at a [`TouchPoint`] reproduces exactly
/// through this function.
pub fn residual_at<C: Coefficients>(
    candidate: &GridSolution,
    coeffs: &C,
    component: usize,
    level: usize,
    column: usize,
    signed_curvature: f64,
) -> Result<f64, ViscosityError> {
    let mesh = candidate.mesh();
    let nt = mesh.time_steps();
    let nx = mesh.interior_columns();
    if level == 0 || level >= nt || column < 1 || column > nx {
        return Err(ViscosityError::BadRequest {
            detail: format!("node (level {level}, column {column}) has no centered jet"),
        });
    }
    let n = candidate.component_count();
    let dt = candidate.dt();
    let dx = mesh.dx();
    let t = candidate.t_at(level);
    let x = mesh.x_at(column);
    let b = coeffs.drift(t, x)?;
    let sig = coeffs.diffusion(t, x)?;
    let mut u = vec![0.0; n];
    for (ii, slot) in u.iter_mut().enumerate() {
        *slot = candidate.value(ii, level, column);
    }
    let p = (candidate.value(component, level + 1, column)
        - candidate.value(component, level - 1, column))
        / (2.0 * dt);
    let q = (candidate.value(component, level, column + 1)
        - candidate.value(component, level, column - 1))
        / (2.0 * dx);
    let r = (candidate.value(component, level, column + 1)
        - 2.0 * candidate.value(component, level, column)
        + candidate.value(component, level, column - 1))
        / (dx * dx);
    let base = p + 0.5 * sig * sig * r + b * q + coeffs.driver(component, t, x, &u, sig * q)?;
    Ok(base + sig * sig * signed_curvature)
}

/// Running worst-residual tracker with first-occurrence tie-breaking.
#[derive(Clone, Copy)]
struct Worst {
    residual: f64,
    location: TouchPoint,
}

/// Check the sub/supersolution inequalities of `candidate` against the
/// system `coeffs` at every interior node.
pub fn check_viscosity<C: Coefficients>(
    candidate: &GridSolution,
    coeffs: &C,
    curvatures: &[f64],
    tolerance: f64,
) -> Result<ViscosityReport, ViscosityError> {
    let n = candidate.component_count();
    if coeffs.component_count() != n {
        return Err(ViscosityError::BadCandidate {
            detail: format!(
                "candidate has {n} components, the system {}",
                coeffs.component_count()
            ),
        });
    }
    let horizon = candidate.horizon();
    if (coeffs.horizon() - horizon).abs() > 1e-12 * (1.0 + horizon.abs()) {
        return Err(ViscosityError::BadCandidate {
            detail: format!(
                "candidate horizon {horizon} differs from the system's {}",
                coeffs.horizon()
            ),
        });
    }
    let mesh = candidate.mesh();
    let nt = mesh.time_steps();
    let nx = mesh.interior_columns();
    // Central time jets need both neighbors; the verdict additionally
    // skips SPACE_MARGIN_CELLS at each spatial edge.
    let c_lo = 1 + SPACE_MARGIN_CELLS;
    let c_hi = nx.checked_sub(SPACE_MARGIN_CELLS).unwrap_or(0);
    if nt < 2 * TIME_MARGIN_LEVELS + 1 || c_hi < c_lo {
        return Err(ViscosityError::BadCandidate {
            detail: format!(
                "mesh {nx} x {nt} leaves no interior after the margins \
                 ({SPACE_MARGIN_CELLS} cells, {TIME_MARGIN_LEVELS} levels)"
            ),
        });
    }
    if curvatures.is_empty() || curvatures.iter().any(|c| !(c.is_finite() && *c > 0.0)) {
        return Err(ViscosityError::BadRequest {
            detail: "curvature list must be nonempty and positive".into(),
        });
    }
    if !(tolerance.is_finite() && tolerance >= 0.0) {
        return Err(ViscosityError::BadRequest {
            detail: "tolerance must be finite and nonnegative".into(),
        });
    }

    // The plain jet participates alongside each perturbed curvature.
    let mut family = Vec::with_capacity(curvatures.len() + 1);
    family.push(0.0);
    family.extend_from_slice(curvatures);

    // Per level: (min above-touch, max below-touch) per component, scanned
    // in column order; levels are combined in order afterwards.
    let levels: Vec<Result<Vec<(Worst, Worst)>, ViscosityError>> = (TIME_MARGIN_LEVELS
        ..=nt - 1 - (TIME_MARGIN_LEVELS - 1))
        .into_par_iter()
        .map(|j| {
            let mut per_component: Vec<Option<(Worst, Worst)>> = vec![None; n];
            for c in c_lo..=c_hi {
                for i in 0..n {
                    let base = residual_at(candidate, coeffs, i, j, c, 0.0)?;
                    let t = candidate.t_at(j);
                    let x = mesh.x_at(c);
                    let sig2 = {
                        let s = coeffs.diffusion(t, x)?;
                        s * s
                    };
                    for &curv in &family {
                        let above = base + sig2 * curv;
                        let below = base - sig2 * curv;
                        let entry = per_component[i].get_or_insert((
                            Worst {
                                residual: above,
                                location: TouchPoint { t, x, level: j, column: c, curvature: curv },
                            },
                            Worst {
                                residual: below,
                                location: TouchPoint {
                                    t,
                                    x,
                                    level: j,
                                    column: c,
                                    curvature: -curv,
                                },
                            },
                        ));
                        if above < entry.0.residual {
                            entry.0 = Worst {
                                residual: above,
                                location: TouchPoint { t, x, level: j, column: c, curvature: curv },
                            };
                        }
                        if below > entry.1.residual {
                            entry.1 = Worst {
                                residual: below,
                                location: TouchPoint {
                                    t,
                                    x,
                                    level: j,
                                    column: c,
                                    curvature: -curv,
                                },
                            };
                        }
                    }
                }
            }
            Ok(per_component
                .into_iter()
                .map(|w| w.expect("interior range is nonempty"))
                .collect())
        })
        .collect();

    let mut overall: Vec<Option<(Worst, Worst)>> = vec![None; n];
    for level in levels {
        let level = level?;
        for (i, (sub, sup)) in level.into_iter().enumerate() {
            match &mut overall[i] {
                None => overall[i] = Some((sub, sup)),
                Some(entry) => {
                    if sub.residual < entry.0.residual {
                        entry.0 = sub;
                    }
                    if sup.residual > entry.1.residual {
                        entry.1 = sup;
                    }
                }
            }
        }
    }

    let components: Vec<ComponentViscosity> = overall
        .into_iter()
        .enumerate()
        .map(|(i, w)| {
            let (sub, sup) = w.expect("level range is nonempty");
            ComponentViscosity {
                component: i + 1,
                sub_ok: sub.residual >= -tolerance,
                super_ok: sup.residual <= tolerance,
                worst_sub_residual: sub.residual,
                worst_sub_location: sub.location,
                worst_super_residual: sup.residual,
                worst_super_location: sup.location,
            }
        })
        .collect();
    Ok(ViscosityReport {
        tolerance,
        curvatures: curvatures.to_vec(),
        space_margin_cells: SPACE_MARGIN_CELLS,
        time_margin_levels: TIME_MARGIN_LEVELS,
        all_sub_ok: components.iter().all(|c| c.sub_ok),
        all_super_ok: components.iter().all(|c| c.super_ok),
        components,
    })
}

#[derive(Debug, Error)]
pub enum RegularityError {
    #[error("invalid audit request: {detail}")]
    BadRequest { detail: String },
    #[error("candidate evaluation failed: {detail}")]
    EvaluatorFailed { detail: String },
}

/// One width of the time-increment sweep.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct HolderIncrement {
    pub delta: f64,
    /// Largest sampled `|u(t + delta, x) - u(t, x)|` over all components.
    pub max_increment: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RegularityReport {
    /// Largest sampled difference quotient in space.
    pub x_lipschitz_estimate: f64,
    /// Largest sampled `|u| / (1 + |x|)`.
    pub linear_growth_ratio: f64,
    /// All time increments vanished; no exponent can or should be fitted.
    pub time_independent: bool,
    /// Log-log fit of the increment sweep (`None` when time-independent
    /// or when an increment is exactly zero).
    pub t_holder: Option<LineFit>,
    pub holder_increments: Vec<HolderIncrement>,
    pub n_pairs: usize,
    pub seed: u64,
}

impl RegularityReport {
    /// Multiplicative constant of the fitted increment law.
    pub fn holder_constant(&self) -> Option<f64> {
        self.t_holder.as_ref().map(|fit| fit.intercept.exp())
    }
}

/// Estimate regularity of a candidate value function on the box
/// `box_t x box_x` from `n_pairs` random samples per estimate and the
/// time-increment widths `deltas`.
///
/// `value_at(component, t, x)` may be backed by anything — a grid
/// solution, a closed form, or a solver wrapper; failures are reported
/// with their message.
pub fn regularity_audit<F>(
    components: usize,
    value_at: F,
    box_t: (f64, f64),
    box_x: (f64, f64),
    n_pairs: usize,
    deltas: &[f64],
    seed: u64,
) -> Result<RegularityReport, RegularityError>
where
    F: Fn(usize, f64, f64) -> Result<f64, String>,
{
    if components == 0 {
        return Err(RegularityError::BadRequest {
            detail: "need at least one component".into(),
        });
    }
    let (t_lo, t_hi) = box_t;
    let (x_lo, x_hi) = box_x;
    if !(t_lo.is_finite() && t_hi.is_finite() && t_hi > t_lo)
        || !(x_lo.is_finite() && x_hi.is_finite() && x_hi > x_lo)
    {
        return Err(RegularityError::BadRequest {
            detail: format!("degenerate box t in [{t_lo}, {t_hi}], x in [{x_lo}, {x_hi}]"),
        });
    }
    if n_pairs < 2 {
        return Err(RegularityError::BadRequest {
            detail: "need at least two sample pairs".into(),
        });
    }
    if deltas.is_empty() || deltas.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
        return Err(RegularityError::BadRequest {
            detail: "time widths must be positive and finite".into(),
        });
    }
    if deltas.iter().any(|d| *d >= t_hi - t_lo) {
        return Err(RegularityError::BadRequest {
            detail: "every time width must fit inside the box".into(),
        });
    }
    let eval = |i: usize, t: f64, x: f64| -> Result<f64, RegularityError> {
        value_at(i, t, x).map_err(|detail| RegularityError::EvaluatorFailed { detail })
    };

    let mut x_lipschitz: f64 = 0.0;
    let mut growth: f64 = 0.0;
    let mut value_scale: f64 = 0.0;
    for s in 0..n_pairs {
        let mut rng = CounterRng::new(seed, REG_PAIR_STREAM, s as u64);
        let t = rng.uniform_in(t_lo, t_hi);
        let x1 = rng.uniform_in(x_lo, x_hi);
        let mut x2 = rng.uniform_in(x_lo, x_hi);
        let mut tries = 0;
        while (x1 - x2).abs() < 1e-9 * (x_hi - x_lo) && tries < 16 {
            x2 = rng.uniform_in(x_lo, x_hi);
            tries += 1;
        }
        let gap = (x1 - x2).abs();
        for i in 0..components {
            let u1 = eval(i, t, x1)?;
            let u2 = eval(i, t, x2)?;
            if gap > 0.0 {
                x_lipschitz = x_lipschitz.max((u1 - u2).abs() / gap);
            }
            growth = growth.max(u1.abs() / (1.0 + x1.abs()));
            growth = growth.max(u2.abs() / (1.0 + x2.abs()));
            value_scale = value_scale.max(u1.abs()).max(u2.abs());
        }
    }

    let mut holder_increments = Vec::with_capacity(deltas.len());
    for (di, &delta) in deltas.iter().enumerate() {
        let mut numerator: f64 = 0.0;
        for s in 0..n_pairs {
            let mut rng =
                CounterRng::new(seed, REG_HOLDER_STREAM + di as u64, s as u64);
            let t = rng.uniform_in(t_lo, t_hi - delta);
            let x = rng.uniform_in(x_lo, x_hi);
            for i in 0..components {
                let near = eval(i, t, x)?;
                let far = eval(i, t + delta, x)?;
                numerator = numerator.max((far - near).abs());
                value_scale = value_scale.max(near.abs()).max(far.abs());
            }
        }
        holder_increments.push(HolderIncrement {
            delta,
            max_increment: numerator,
        });
    }

    let time_independent = holder_increments
        .iter()
        .all(|h| h.max_increment <= 1e-12 * (1.0 + value_scale));
    let t_holder = if time_independent {
        None
    } else {
        let widths: Vec<f64> = holder_increments.iter().map(|h| h.delta).collect();
        let increments: Vec<f64> = holder_increments.iter().map(|h| h.max_increment).collect();
        log_log_exponent(&widths, &increments)
    };

    Ok(RegularityReport {
        x_lipschitz_estimate: x_lipschitz,
        linear_growth_ratio: growth,
        time_independent,
        t_holder,
        holder_increments,
        n_pairs,
        seed,
    })
}
