use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates with `|analytic| + |numeric|` below this are not compared.
    pub exempt_below: f64,
    /// Coordinates are also exempt below `roundoff_factor · ε·|f(x)| / (step · tolerance)`:
    /// cancellation in `f(x+h) − f(x−h)` costs about `ε·|f(x)|/step` per ulp of
    /// evaluation error, which must stay within `tolerance` of the gradient
    /// being checked. Losses summed over many terms carry several ulps, hence
    /// the default of 10.
    pub roundoff_factor: f64,
    /// Check at most this many coordinates, sampled without replacement.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            exempt_below: 1e-8,
            roundoff_factor: 10.0,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoordError {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub exempt: usize,
    pub max_relative_error: f64,
    /// Worst coordinates first, at most five.
    pub worst: Vec<CoordError>,
    pub passed: bool,
}

impl GradCheckReport {
    /// Combines reports from several instances of the same check.
    pub fn merge(reports: impl IntoIterator<Item = GradCheckReport>) -> GradCheckReport {
        let mut out = GradCheckReport {
            checked: 0,
            exempt: 0,
            max_relative_error: 0.0,
            worst: Vec::new(),
            passed: true,
        };
        for r in reports {
            out.checked += r.checked;
            out.exempt += r.exempt;
            out.max_relative_error = out.max_relative_error.max(r.max_relative_error);
            out.passed &= r.passed;
            out.worst.extend(r.worst);
        }
        sort_worst(&mut out.worst);
        out
    }
}

fn sort_worst(worst: &mut Vec<CoordError>) {
    worst.sort_by(|a, b| b.relative_error.total_cmp(&a.relative_error));
    worst.truncate(5);
}

/// Compares `analytic` against central finite differences of `loss` at `point`.
///
/// Never fails: disagreement is reported through [`GradCheckReport::passed`].
pub fn grad_check<F>(
    mut loss: F,
    point: &[f64],
    analytic: &[f64],
    config: &GradCheckConfig,
) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(
        point.len(),
        analytic.len(),
        "analytic gradient must match the parameter vector"
    );
    let n = point.len();
    let indices: Vec<usize> = match config.max_coords {
        Some(k) if k < n => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            let mut idx = sample(&mut rng, n, k).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..n).collect(),
    };

    let mut x = point.to_vec();
    let base = loss(&x).abs();
    let floor = config
        .exempt_below
        .max(config.roundoff_factor * f64::EPSILON * base / (config.step * config.tolerance));
    let mut checked = 0;
    let mut exempt = 0;
    let mut max_rel: f64 = 0.0;
    let mut worst = Vec::new();
    let mut passed = true;
    for i in indices {
        let orig = x[i];
        x[i] = orig + config.step;
        let plus = loss(&x);
        x[i] = orig - config.step;
        let minus = loss(&x);
        x[i] = orig;
        let numeric = (plus - minus) / (2.0 * config.step);
        let a = analytic[i];
        let scale = a.abs() + numeric.abs();
        if scale < floor {
            exempt += 1;
            continue;
        }
        checked += 1;
        let rel = if numeric.is_finite() && a.is_finite() {
            (a - numeric).abs() / a.abs().max(numeric.abs())
        } else {
            f64::INFINITY
        };
        if !(rel <= config.tolerance) {
            passed = false;
        }
        max_rel = max_rel.max(rel);
        worst.push(CoordError {
            index: i,
            analytic: a,
            numeric,
            relative_error: rel,
        });
        if worst.len() > 64 {
            sort_worst(&mut worst);
        }
    }
    sort_worst(&mut worst);
    GradCheckReport {
        checked,
        exempt,
        max_relative_error: max_rel,
        worst,
        passed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn half_square(p: &[f64]) -> f64 {
        0.5 * p.iter().map(|v| v * v).sum::<f64>()
    }

    #[test]
    fn quadratic_exact() {
        let p = vec![0.3, -1.2, 2.5, 0.0, 4.0];
        let r = grad_check(half_square, &p, &p, &GradCheckConfig::default());
        assert!(r.passed);
        assert!(r.max_relative_error < 1e-9, "{}", r.max_relative_error);
        assert_eq!(r.exempt, 1);
    }

    #[test]
    fn doubled_gradient_fails() {
        let p = vec![0.3, -1.2, 2.5];
        let wrong: Vec<f64> = p.iter().map(|v| 2.0 * v).collect();
        let r = grad_check(half_square, &p, &wrong, &GradCheckConfig::default());
        assert!(!r.passed);
        assert!((r.max_relative_error - 0.5).abs() < 1e-6);
        assert_eq!(r.worst.len(), 3);
    }

    #[test]
    fn sampling_limits_coordinates() {
        let p: Vec<f64> = (0..100).map(|i| i as f64 + 1.0).collect();
        let cfg = GradCheckConfig {
            max_coords: Some(10),
            ..Default::default()
        };
        let r = grad_check(half_square, &p, &p, &cfg);
        assert_eq!(r.checked + r.exempt, 10);
    }

    #[test]
    fn roundoff_floor_scales_with_loss() {
        // f = 1e6 + 1e-7·x: the tiny slope is lost to cancellation
        let f = |p: &[f64]| 1e6 + 1e-7 * p[0];
        let r = grad_check(f, &[0.0], &[1e-7], &GradCheckConfig::default());
        assert_eq!((r.checked, r.exempt), (0, 1));
        let strict = GradCheckConfig {
            roundoff_factor: 0.0,
            ..Default::default()
        };
        assert!(!grad_check(f, &[0.0], &[1e-7], &strict).passed);
    }
}
