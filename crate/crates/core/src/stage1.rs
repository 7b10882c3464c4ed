//! Stage one: a rough power curve from limiting MLE draws, calibration of the target
//! length, and the limiting SSSD.

use serde::{Deserialize, Serialize};

use crate::asymptotics::{
    limiting_from, theta_asymptotics, theta_variance_at, ProbitModel, SssdEstimate, ThetaAsymptotics,
};
use crate::error::{Result, SssdError, Warning, WarningKind};
use crate::model::{Comparison, DesignSpec};
use crate::qmc::{normal_scores, MleLimitSampler, SobolStream};
use crate::special::{norm_cdf, z_two_sided};

pub const N_MIN: f64 = 2.0;
pub const N_MAX: f64 = (1u64 << 26) as f64;
/// Width of the final bracket around each root.
pub const ROOT_TOLERANCE: f64 = 0.01;
pub const DEFAULT_N_SOB: usize = 1024;

/// How the target length and HDI coverage are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TestMode {
    /// `l` from the `target_power` quantile of the power curve, `alpha = 1 - gamma`.
    Calibrated,
    Explicit {
        l: f64,
        alpha: f64,
    },
}

/// Interval hypothesis and success criterion. Infinite endpoints serialize as `null`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestSpec {
    #[serde(with = "crate::serde_ext::neg_inf_as_null")]
    pub delta1: f64,
    #[serde(with = "crate::serde_ext::pos_inf_as_null")]
    pub delta2: f64,
    /// Conviction threshold.
    pub gamma: f64,
    /// Target power.
    pub target_power: f64,
    pub mode: TestMode,
}

impl TestSpec {
    /// Checks that do not depend on the design.
    pub fn validate_shape(&self, comparison: Comparison) -> Result<()> {
        if self.delta1.is_nan() || self.delta2.is_nan() {
            return Err(SssdError::config("test.delta1/test.delta2", "endpoints must be numbers"));
        }
        if !(self.delta1 < self.delta2) {
            return Err(SssdError::config(
                "test.delta1/test.delta2",
                format!("need delta1 < delta2, got ({}, {})", self.delta1, self.delta2),
            ));
        }
        if self.delta1.is_infinite() && self.delta2.is_infinite() {
            return Err(SssdError::config("test.delta1/test.delta2", "at most one endpoint may be infinite"));
        }
        if comparison == Comparison::Ratio {
            for (name, d) in [("test.delta1", self.delta1), ("test.delta2", self.delta2)] {
                if d.is_finite() && d < 0.0 {
                    return Err(SssdError::config(name, "ratio comparisons need nonnegative endpoints"));
                }
            }
        }
        if !(self.gamma >= 0.5 && self.gamma < 1.0) {
            return Err(SssdError::config("test.gamma", "must lie in [0.5, 1)"));
        }
        if !(self.target_power > 0.0 && self.target_power < 1.0) {
            return Err(SssdError::config("test.target_power", "must lie in (0, 1)"));
        }
        if let TestMode::Explicit { l, alpha } = self.mode {
            if !(l > 0.0 && l.is_finite()) {
                return Err(SssdError::config("test.mode.l", "target length must be positive"));
            }
            if !(alpha > 0.0 && alpha < 1.0) {
                return Err(SssdError::config("test.mode.alpha", "must lie in (0, 1)"));
            }
            if self.width().is_finite() && l >= self.width() {
                return Err(SssdError::config(
                    "test.mode.l",
                    format!("target length {l} must be below delta2 - delta1 = {}", self.width()),
                ));
            }
        }
        Ok(())
    }

    /// Full validation against a design: `theta0` must lie inside the interval.
    pub fn validate(&self, design: &DesignSpec) -> Result<()> {
        self.validate_shape(design.comparison)?;
        let theta0 = design.theta0();
        if !(theta0 > self.delta1 && theta0 < self.delta2) {
            return Err(SssdError::Unattainable(format!(
                "design value theta0 = {theta0} lies outside ({}, {}); power cannot reach {}",
                self.delta1, self.delta2, self.target_power
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.delta2 - self.delta1
    }

    pub fn contains(&self, theta: f64) -> bool {
        theta > self.delta1 && theta < self.delta2
    }
}

/// Normal mass of `N(mean, sd^2)` inside `(delta1, delta2)`.
pub fn coverage_in_interval(mean: f64, sd: f64, delta1: f64, delta2: f64) -> Result<f64> {
    if !(sd > 0.0) {
        return Err(SssdError::Domain(format!("standard deviation {sd} must be positive")));
    }
    Ok(normal_interval_mass(mean, sd, delta1, delta2))
}

pub(crate) fn normal_interval_mass(mean: f64, sd: f64, delta1: f64, delta2: f64) -> f64 {
    let lo = (delta1 - mean) / sd;
    let hi = (delta2 - mean) / sd;
    // subtract in whichever tail keeps relative accuracy
    let m = if lo > 0.0 { norm_cdf(-lo) - norm_cdf(-hi) } else { norm_cdf(hi) - norm_cdf(lo) };
    m.max(0.0)
}

/// Bracketing root search for a function that is negative at `lo` and nonnegative at `hi`.
///
/// Returns the endpoint of the final bracket at which `f >= 0`; the bracket is narrower
/// than `tol`.
pub fn brent_bracketed<F>(f: F, lo: f64, f_lo: f64, hi: f64, f_hi: f64, tol: f64) -> f64
where
    F: Fn(f64) -> f64,
{
    let (mut a, mut b, mut fa, mut fb) = (lo, hi, f_lo, f_hi);
    let (mut c, mut fc) = (a, fa);
    let mut d = b - a;
    let mut e = d;
    for _ in 0..200 {
        if (fb >= 0.0) == (fc >= 0.0) {
            c = a;
            fc = fa;
            d = b - a;
            e = d;
        }
        if fc.abs() < fb.abs() {
            a = b;
            b = c;
            c = a;
            fa = fb;
            fb = fc;
            fc = fa;
        }
        let tol1 = 2.0 * f64::EPSILON * b.abs() + 0.25 * tol;
        let xm = 0.5 * (c - b);
        if xm.abs() <= tol1 || fb == 0.0 {
            break;
        }
        if e.abs() >= tol1 && fa.abs() > fb.abs() {
            let s = fb / fa;
            let (mut p, mut q);
            if a == c {
                p = 2.0 * xm * s;
                q = 1.0 - s;
            } else {
                let qq = fa / fc;
                let r = fb / fc;
                p = s * (2.0 * xm * qq * (qq - r) - (b - a) * (r - 1.0));
                q = (qq - 1.0) * (r - 1.0) * (s - 1.0);
            }
            if p > 0.0 {
                q = -q;
            }
            p = p.abs();
            let min1 = 3.0 * xm * q - (tol1 * q).abs();
            let min2 = (e * q).abs();
            if 2.0 * p < min1.min(min2) {
                e = d;
                d = p / q;
            } else {
                d = xm;
                e = d;
            }
        } else {
            d = xm;
            e = d;
        }
        a = b;
        fa = fb;
        b += if d.abs() > tol1 { d } else { tol1.copysign(xm) };
        fb = f(b);
    }
    if fb >= 0.0 {
        b
    } else {
        c
    }
}

/// Limiting posterior of `theta` implied by a draw at sample size `n`, treated as design values.
fn draw_coverage(sampler: &MleLimitSampler, test: &TestSpec, z: &[f64], n: f64) -> f64 {
    let design = sampler.design();
    let draw = sampler.from_scores(n, z, 0);
    let theta = design.theta(&draw.eta1_hat, &draw.eta2_hat);
    match theta_variance_at(design, &draw.eta1_hat, &draw.eta2_hat) {
        Ok(v) if v > 0.0 && theta.is_finite() => normal_interval_mass(theta, (v / n).sqrt(), test.delta1, test.delta2),
        _ => f64::NAN,
    }
}

/// Smallest continuous `n` in `[2, 2^26]` at which the draw's limiting posterior puts mass
/// at least `gamma` inside the interval. `None` when censored.
pub fn min_sample_from_scores(sampler: &MleLimitSampler, test: &TestSpec, z: &[f64]) -> Option<f64> {
    let g = |n: f64| {
        let c = draw_coverage(sampler, test, z, n);
        if c.is_nan() {
            -test.gamma
        } else {
            c - test.gamma
        }
    };
    let mut lo = N_MIN;
    let mut g_lo = g(lo);
    if g_lo >= 0.0 {
        return Some(lo);
    }
    loop {
        let hi = 2.0 * lo;
        if hi > N_MAX {
            return None;
        }
        let g_hi = g(hi);
        if g_hi >= 0.0 {
            return Some(brent_bracketed(g, lo, g_lo, hi, g_hi, ROOT_TOLERANCE));
        }
        lo = hi;
        g_lo = g_hi;
    }
}

pub fn min_sample_for_coverage(design: &DesignSpec, test: &TestSpec, u: &[f64]) -> Result<Option<f64>> {
    let sampler = MleLimitSampler::new(design)?;
    if u.len() != 2 * design.dim() {
        return Err(SssdError::Domain(format!("point must have dimension {}", 2 * design.dim())));
    }
    Ok(min_sample_from_scores(&sampler, test, &normal_scores(u)))
}

/// Empirical CDF over sorted per-draw sample sizes with linear interpolation between the
/// knots `(x_(i), i / N)`. Censored draws are `+inf` and sort last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerCurve {
    #[serde(with = "crate::serde_ext::vec_inf_as_null")]
    pub samp_sobol: Vec<f64>,
}

impl PowerCurve {
    pub fn from_draws(draws: Vec<Option<f64>>) -> Self {
        let mut samp_sobol: Vec<f64> = draws.into_iter().map(|d| d.unwrap_or(f64::INFINITY)).collect();
        samp_sobol.sort_by(f64::total_cmp);
        PowerCurve { samp_sobol }
    }

    pub fn len(&self) -> usize {
        self.samp_sobol.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samp_sobol.is_empty()
    }

    pub fn censored(&self) -> usize {
        self.samp_sobol.iter().filter(|x| x.is_infinite()).count()
    }

    pub fn finite(&self) -> &[f64] {
        &self.samp_sobol[..self.len() - self.censored()]
    }

    /// `F*(n)`: 0 below the first knot, flat after the last finite knot.
    pub fn cdf(&self, n: f64) -> f64 {
        let xs = self.finite();
        let total = self.len() as f64;
        if xs.is_empty() || n < xs[0] {
            return 0.0;
        }
        // index of the last knot <= n
        let i = xs.partition_point(|&x| x <= n);
        if i == xs.len() {
            return i as f64 / total;
        }
        let (x0, x1) = (xs[i - 1], xs[i]);
        let p0 = i as f64 / total;
        if x1 == x0 {
            return p0;
        }
        p0 + (n - x0) / (x1 - x0) / total
    }

    /// `F_*(p)`, the inverse of [`Self::cdf`]; `+inf` when `p` exceeds the uncensored mass.
    pub fn quantile(&self, p: f64) -> f64 {
        let xs = &self.samp_sobol;
        let total = xs.len() as f64;
        let pos = p * total;
        if pos <= 1.0 {
            return xs[0];
        }
        if pos >= total {
            return xs[xs.len() - 1];
        }
        let k = pos.floor();
        let i = k as usize; // knot i/N sits at xs[i - 1]
        let frac = pos - k;
        let (x0, x1) = (xs[i - 1], xs[i]);
        if frac == 0.0 {
            return x0;
        }
        if x1.is_infinite() {
            return f64::INFINITY;
        }
        x0 + frac * (x1 - x0)
    }

    /// Knots `(n, p)` over the uncensored draws.
    pub fn knots(&self) -> Vec<(f64, f64)> {
        let total = self.len() as f64;
        self.finite().iter().enumerate().map(|(i, &x)| (x, (i + 1) as f64 / total)).collect()
    }
}

pub(crate) fn map_indexed<T, F>(count: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..count).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..count).map(f).collect()
    }
}

/// Per-draw minimal sample sizes over `n_sob` Sobol points, sorted.
pub fn approximate_power_curve(design: &DesignSpec, test: &TestSpec, n_sob: usize, seed: u64) -> Result<PowerCurve> {
    if n_sob < 2 {
        return Err(SssdError::config("n_sob", "need at least 2 Sobol points"));
    }
    let sampler = MleLimitSampler::new(design)?;
    let stream = SobolStream::new(2 * design.dim(), seed)?;
    let draws = map_indexed(n_sob, |i| {
        let z = normal_scores(&stream.point(i as u32));
        min_sample_from_scores(&sampler, test, &z)
    });
    let curve = PowerCurve::from_draws(draws);
    let censored = curve.censored();
    if censored as f64 >= (1.0 - test.target_power) * n_sob as f64 {
        return Err(SssdError::Unattainable(format!(
            "{censored} of {n_sob} draws never reach conviction {} inside ({}, {}) by n = {N_MAX}; \
             target power {} is out of reach",
            test.gamma, test.delta1, test.delta2, test.target_power
        )));
    }
    Ok(curve)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageOneResult {
    pub estimate: SssdEstimate,
    pub asymptotics: ThetaAsymptotics,
    pub probit: ProbitModel,
    pub curve: PowerCurve,
    pub n_sob: usize,
    pub seed: u64,
    pub warnings: Vec<Warning>,
}

pub fn stage_one(design: &DesignSpec, test: &TestSpec, n_sob: usize, seed: u64) -> Result<StageOneResult> {
    design.validate()?;
    test.validate(design)?;
    let asym = theta_asymptotics(design)?;
    let curve = approximate_power_curve(design, test, n_sob, seed)?;
    let mut warnings = Vec::new();
    let censored = curve.censored();
    if censored > 0 {
        warnings.push(Warning::new(
            WarningKind::Censoring,
            format!("{censored} of {n_sob} power-curve draws were censored at n = {N_MAX}"),
        ));
    }
    let (l, alpha) = match test.mode {
        TestMode::Calibrated => {
            let mu = curve.quantile(test.target_power);
            let alpha = 1.0 - test.gamma;
            let z = z_two_sided(alpha);
            (2.0 * z * asym.inv_fisher_theta.sqrt() / mu.sqrt(), alpha)
        }
        TestMode::Explicit { l, alpha } => (l, alpha),
    };
    let mut estimate = limiting_from(&asym, l, alpha);
    if let TestMode::Calibrated = test.mode {
        // keep the quantile itself rather than the round trip through l
        estimate.mu_l = curve.quantile(test.target_power);
    }
    if asym.is_degenerate() {
        warnings.push(Warning::new(
            WarningKind::Degeneracy,
            "A^2 = 0: the limiting SSSD is degenerate (sigma_l = 0)".to_string(),
        ));
    }
    if test.width().is_finite() && l >= test.width() {
        warnings.push(Warning::new(
            WarningKind::LengthExceedsInterval,
            format!("target length {l} is not below delta2 - delta1 = {}", test.width()),
        ));
    }
    let (lower, _) = estimate.probable_domain();
    if lower < 0.0 {
        warnings.push(Warning::new(
            WarningKind::SmallSample,
            format!("limiting probable domain starts below zero ({lower})"),
        ));
    }
    Ok(StageOneResult {
        probit: ProbitModel::limiting(&asym, estimate.mu_l, alpha),
        estimate,
        asymptotics: asym,
        curve,
        n_sob,
        seed,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Characteristic, ModelFamily};

    fn bern(p1: f64, p2: f64) -> DesignSpec {
        DesignSpec {
            family: ModelFamily::Bernoulli,
            eta1: vec![p1],
            eta2: vec![p2],
            characteristic: Characteristic::Mean,
            comparison: Comparison::Difference,
            q: 1.0,
        }
    }

    fn test_spec(d1: f64, d2: f64, gamma: f64) -> TestSpec {
        TestSpec { delta1: d1, delta2: d2, gamma, target_power: 0.7, mode: TestMode::Calibrated }
    }

    #[test]
    fn coverage_examples() {
        let c = coverage_in_interval(0.0, 1.0, -1.959964, 1.959964).unwrap();
        assert!((c - 0.95).abs() < 1e-6);
        assert_eq!(coverage_in_interval(0.0, 1.0, 0.0, f64::INFINITY).unwrap(), 0.5);
        let c = coverage_in_interval(1.0, 2.0, -1.0, 3.0).unwrap();
        assert!((c - 0.6827).abs() < 1e-4);
        assert!(coverage_in_interval(0.0, 0.0, -1.0, 1.0).is_err());
    }

    #[test]
    fn center_draw_matches_bisection() {
        let d = bern(0.3, 0.3);
        let t = test_spec(-0.2, 0.2, 0.8);
        let n = min_sample_for_coverage(&d, &t, &[0.5, 0.5]).unwrap().unwrap();
        let cov = |n: f64| coverage_in_interval(0.0, (0.42 / n).sqrt(), -0.2, 0.2).unwrap();
        let (mut lo, mut hi) = (2.0, 1e4);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if cov(mid) >= 0.8 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        assert!((n - hi).abs() < 0.01);
        let c = cov(n);
        assert!((0.8..=0.8 + 1e-4).contains(&c), "{c}");
    }

    #[test]
    fn outside_interval_is_censored() {
        let d = bern(0.3, 0.5);
        let t = test_spec(-0.1, 0.1, 0.8);
        assert_eq!(min_sample_for_coverage(&d, &t, &[0.5, 0.5]).unwrap(), None);
    }

    #[test]
    fn brent_finds_bracketed_root() {
        let f = |x: f64| x * x - 2.0;
        let r = brent_bracketed(f, 0.0, -2.0, 2.0, 2.0, 1e-9);
        assert!(f(r) >= 0.0);
        assert!((r - 2f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn curve_interpolation() {
        let c = PowerCurve::from_draws(vec![Some(30.0), None, Some(10.0), Some(20.0)]);
        assert_eq!(c.samp_sobol[3], f64::INFINITY);
        assert_eq!(c.cdf(10.0), 0.25);
        assert_eq!(c.cdf(15.0), 0.375);
        assert_eq!(c.cdf(5.0), 0.0);
        assert_eq!(c.cdf(1e9), 0.75);
        assert_eq!(c.quantile(0.375), 15.0);
        assert_eq!(c.quantile(0.1), 10.0);
        assert_eq!(c.quantile(0.8), f64::INFINITY);
        for (x, p) in c.knots() {
            assert_eq!(c.cdf(x), p);
            assert_eq!(c.quantile(p), x);
        }
    }

    #[test]
    fn validation_errors() {
        let d = bern(0.3, 0.3);
        assert!(matches!(test_spec(0.2, -0.2, 0.8).validate(&d), Err(SssdError::Config { .. })));
        assert!(matches!(test_spec(0.1, 0.2, 0.8).validate(&d), Err(SssdError::Unattainable(_))));
        assert!(test_spec(f64::NEG_INFINITY, f64::INFINITY, 0.8).validate(&d).is_err());
        assert!(test_spec(-0.2, 0.2, 0.4).validate(&d).is_err());
    }

    #[test]
    fn explicit_mode_equals_limiting() {
        let d = bern(0.3, 0.35);
        let mut t = test_spec(-0.3, 0.3, 0.8);
        t.mode = TestMode::Explicit { l: 0.1, alpha: 0.05 };
        let r = stage_one(&d, &t, 64, 3).unwrap();
        let lim = crate::asymptotics::limiting_sssd(&d, 0.1, 0.05).unwrap();
        assert_eq!(r.estimate, lim);
    }
}
