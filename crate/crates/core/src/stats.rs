//! Small numeric helpers shared across modules: means, standard errors, and
//! least-squares line fits (used for convergence-rate and exponent
//! estimation on log-log data).

/// Sample mean.
pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample mean and standard error of the mean (unbiased variance).
pub fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let m = mean(xs);
    if n == 1 {
        return (m, 0.0);
    }
    let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    let var = ss / (n - 1) as f64;
    (m, (var / n as f64).sqrt())
}

/// Sample standard deviation (population form, used for design-matrix
/// column scaling where a zero spread must map to a unit scale).
pub fn population_std(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n == 0 {
        return 0.0;
    }
    let m = mean(xs);
    let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    (ss / n as f64).sqrt()
}

/// Ordinary least-squares line `y ≈ slope·x + intercept` with the
/// coefficient of determination R².
///
/// Degenerate inputs (fewer than two points, or zero spread in `x`) return a
/// zero slope with R² = 0 rather than NaN.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> LineFit {
    assert_eq!(xs.len(), ys.len(), "linear_fit needs paired samples");
    let n = xs.len();
    if n < 2 {
        return LineFit {
            slope: 0.0,
            intercept: ys.first().copied().unwrap_or(0.0),
            r2: 0.0,
        };
    }
    let mx = mean(xs);
    let my = mean(ys);
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for i in 0..n {
        let dx = xs[i] - mx;
        let dy = ys[i] - my;
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return LineFit {
            slope: 0.0,
            intercept: my,
            r2: 0.0,
        };
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 {
        // A perfectly flat target is fit exactly by the flat line.
        1.0
    } else {
        (sxy * sxy) / (sxx * syy)
    };
    LineFit {
        slope,
        intercept,
        r2,
    }
}

/// Result of [`linear_fit`].
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Fit an exponent `rho` in `value ≈ C · scale^rho` from positive samples by
/// regressing `ln value` on `ln scale`. Returns `None` if any value is
/// non-positive (the power law is then meaningless — e.g. exact-zero errors).
pub fn log_log_exponent(scales: &[f64], values: &[f64]) -> Option<LineFit> {
    assert_eq!(scales.len(), values.len());
    if scales
        .iter()
        .chain(values.iter())
        .any(|&v| !(v > 0.0) || !v.is_finite())
    {
        return None;
    }
    let xs: Vec<f64> = scales.iter().map(|s| s.ln()).collect();
    let ys: Vec<f64> = values.iter().map(|v| v.ln()).collect();
    Some(linear_fit(&xs, &ys))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_and_stderr_of_constants() {
        let (m, se) = mean_and_stderr(&[2.0, 2.0, 2.0, 2.0]);
        assert_eq!(m, 2.0);
        assert_eq!(se, 0.0);
    }

    #[test]
    fn linear_fit_recovers_exact_line() {
        let xs = [0.0, 1.0, 2.0, 3.0];
        let ys = [1.0, 3.0, 5.0, 7.0];
        let fit = linear_fit(&xs, &ys);
        assert!((fit.slope - 2.0).abs() < 1e-12);
        assert!((fit.intercept - 1.0).abs() < 1e-12);
        assert!((fit.r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_log_exponent_recovers_power_law() {
        let scales = [0.1, 0.05, 0.025, 0.0125];
        let values: Vec<f64> = scales.iter().map(|d: &f64| 3.0 * d.powf(1.5)).collect();
        let fit = log_log_exponent(&scales, &values).expect("positive data");
        assert!((fit.slope - 1.5).abs() < 1e-10, "slope {}", fit.slope);
        assert!(fit.r2 > 0.999999);
    }

    #[test]
    fn log_log_exponent_rejects_zeros() {
        assert!(log_log_exponent(&[0.1, 0.05], &[1e-3, 0.0]).is_none());
    }

    #[test]
    fn flat_data_has_unit_r2_and_zero_slope() {
        let fit = linear_fit(&[1.0, 2.0, 3.0], &[4.0, 4.0, 4.0]);
        assert_eq!(fit.slope, 0.0);
        assert_eq!(fit.r2, 1.0);
    }
}
