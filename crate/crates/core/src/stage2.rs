//! Stage two: prior-adjusted SSSD from representative samples and Laplace posteriors, and
//! the proportional recalibration of the stage-one power curve.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::asymptotics::{probable_domain, SssdClass};
use crate::error::{Result, SssdError, Warning, WarningKind};
use crate::laplace::{laplace_from_stats, PosteriorApprox};
use crate::model::{DesignSpec, ModelFamily, SampleStats};
use crate::numdiff;
use crate::oracle::hdi_empirical;
use crate::prior::PriorSpec;
use crate::qmc::{normal_scores, MleLimitSampler, SobolStream};
use crate::special::{inv_reg_lower_gamma_from, ln_gamma, norm_cdf, norm_quantile, z_two_sided};
use crate::stage1::{map_indexed, normal_interval_mass, stage_one, PowerCurve, StageOneResult, TestSpec};

pub const DEFAULT_N_VAR: usize = 256;
/// Largest tolerated fraction of failed Laplace fits among the `n_var` draws.
pub const MAX_FAILURE_FRACTION: f64 = 0.05;
/// Lower extreme of the probable domain below which the SSSD is flagged as ill-defined.
pub const SMALL_DOMAIN_LOWER: f64 = 30.0;
pub const PRIOR_HDI_DRAWS: usize = 10_000;
const PROBIT_LEVELS: [f64; 3] = [0.45, 0.50, 0.55];
/// Smallest gap between neighbouring probit design points. `L-bar` is constant between
/// integers, so closer points cannot resolve a slope.
pub const MIN_PROBIT_SPACING: f64 = 1.0;

/// Sub-seeds for the independent random streams of one design run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSeeds {
    pub stage1: u64,
    pub stage2: u64,
    pub prior_hdi: u64,
}

impl StageSeeds {
    pub fn derive(seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        StageSeeds { stage1: rng.next_u64(), stage2: rng.next_u64(), prior_hdi: rng.next_u64() }
    }
}

/// `F^-1((k - 0.5) / ceil(n))` for `k = 1..ceil(n)`.
pub fn representative_sample(family: ModelFamily, eta: &[f64], n: f64) -> Result<Vec<f64>> {
    family.check_params(eta)?;
    let size = sample_size(n)?;
    Ok(representative_iter(family, eta, size).collect())
}

fn sample_size(n: f64) -> Result<usize> {
    if !(n > 0.0 && n.is_finite()) {
        return Err(SssdError::Domain(format!("sample size {n} must be positive")));
    }
    Ok(n.ceil() as usize)
}

fn representative_iter(family: ModelFamily, eta: &[f64], size: usize) -> impl Iterator<Item = f64> + '_ {
    let lga = if family == ModelFamily::Gamma { ln_gamma(eta[0]) } else { 0.0 };
    let mut prev: Option<f64> = None;
    (1..=size).map(move |k| {
        let u = (k as f64 - 0.5) / size as f64;
        match family {
            ModelFamily::Gamma => {
                // neighbouring quantiles make good Newton starts
                let x = inv_reg_lower_gamma_from(eta[0], u, lga, prev);
                prev = Some(x);
                x / eta[1]
            }
            ModelFamily::Bernoulli => {
                if u <= 1.0 - eta[0] {
                    0.0
                } else {
                    1.0
                }
            }
        }
    })
}

fn representative_stats(family: ModelFamily, eta: &[f64], size: usize) -> SampleStats {
    let mut stats = SampleStats { n: size as f64, sum: 0.0, sum_log: 0.0 };
    for y in representative_iter(family, eta, size) {
        stats.sum += y;
        if family == ModelFamily::Gamma {
            stats.sum_log += y.ln();
        }
    }
    stats
}

/// `(ceil(n), round(q ceil(n)))` with half-away-from-zero rounding.
pub fn group_sizes(n: f64, q: f64) -> Result<(usize, usize)> {
    let n1 = sample_size(n)?;
    let n2 = (q * n1 as f64).round();
    if !(n2 >= 1.0) {
        return Err(SssdError::config("q", format!("group 2 would be empty at n = {n} with q = {q}")));
    }
    Ok((n1, n2 as usize))
}

/// Normal posterior of `theta` by the delta method over two group approximations.
pub fn theta_posterior(design: &DesignSpec, post1: &PosteriorApprox, post2: &PosteriorApprox) -> (f64, f64) {
    let fam = design.family;
    let d = design.dim();
    let joint: Vec<f64> = post1.mode.iter().chain(&post2.mode).copied().collect();
    let theta_t = |t: &[f64]| design.theta(&fam.from_unconstrained(&t[..d]), &fam.from_unconstrained(&t[d..]));
    let mean = theta_t(&joint);
    let g = numdiff::gradient(theta_t, &joint);
    let mut var = 0.0;
    for r in 0..d {
        for c in 0..d {
            var += g[r] * post1.covariance[r][c] * g[c];
            var += g[d + r] * post2.covariance[r][c] * g[d + c];
        }
    }
    (mean, var.max(0.0).sqrt())
}

/// Laplace posteriors for representative samples of sizes `(n1, n2)` from `(eta1, eta2)`.
fn representative_posteriors(
    design: &DesignSpec,
    priors: &PriorSpec,
    eta1: &[f64],
    eta2: &[f64],
    n1: usize,
    n2: usize,
) -> Result<(f64, f64)> {
    let fam = design.family;
    let s1 = representative_stats(fam, eta1, n1);
    let s2 = representative_stats(fam, eta2, n2);
    let t1 = fam.to_unconstrained(eta1);
    let t2 = fam.to_unconstrained(eta2);
    let p1 = laplace_from_stats(fam, &priors.group1, s1, Some(&t1))?;
    let p2 = laplace_from_stats(fam, &priors.group2, s2, Some(&t2))?;
    let (m, s) = theta_posterior(design, &p1, &p2);
    if !(m.is_finite() && s > 0.0 && s.is_finite()) {
        return Err(SssdError::Curvature(format!("posterior of theta has mean {m} and sd {s}")));
    }
    Ok((m, s))
}

/// `L-bar(n)`: the normal-approximation HDI length for representative samples at `n`.
pub fn hdi_length_bar(design: &DesignSpec, priors: &PriorSpec, alpha: f64, n: f64) -> Result<f64> {
    let (n1, n2) = group_sizes(n, design.q)?;
    let (_, sd) = representative_posteriors(design, priors, &design.eta1, &design.eta2, n1, n2)?;
    Ok(2.0 * z_two_sided(alpha) * sd)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanAdjustment {
    pub mu_dot: f64,
    pub mu_tilde: f64,
    /// Slope of the secant through the two evaluated points.
    pub secant_slope: f64,
}

/// Two-step secant toward the root of `l - L-bar(n)`, starting from the limiting `mu_l`.
pub fn adjust_mean(stage1: &StageOneResult, design: &DesignSpec, priors: &PriorSpec) -> Result<MeanAdjustment> {
    let est = &stage1.estimate;
    let beta1 = stage1.probit.beta1;
    if !(beta1 > 0.0) {
        return Err(SssdError::Monotonicity(format!("limiting slope {beta1}")));
    }
    let gap = |n: f64| -> Result<f64> { Ok(est.l - hdi_length_bar(design, priors, est.alpha, n)?) };
    let y0 = gap(est.mu_l)?;
    if y0 == 0.0 {
        return Ok(MeanAdjustment { mu_dot: est.mu_l, mu_tilde: est.mu_l, secant_slope: beta1 });
    }
    let mu_dot = est.mu_l - y0 / beta1;
    if !(mu_dot > 0.0) {
        return Err(SssdError::SmallSample(format!(
            "first mean update is {mu_dot}; use a simulation-based design instead"
        )));
    }
    let y1 = gap(mu_dot)?;
    let slope = (y1 - y0) / (mu_dot - est.mu_l);
    if slope == 0.0 || !slope.is_finite() {
        return Err(SssdError::FlatLength(format!(
            "L-bar is {} at both n = {} and n = {mu_dot}",
            est.l - y0,
            est.mu_l
        )));
    }
    let mu_tilde = est.mu_l - y0 / slope;
    if !(mu_tilde > 0.0) {
        return Err(SssdError::SmallSample(format!(
            "prior-adjusted mean is {mu_tilde}; use a simulation-based design instead"
        )));
    }
    Ok(MeanAdjustment { mu_dot, mu_tilde, secant_slope: slope })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpreadAndPower {
    pub sigma_eps_hat: f64,
    pub gamma_tilde: f64,
    pub failures: usize,
}

/// Sd of HDI lengths and rough power over `n_var` limiting-MLE draws at `ceil(mu_tilde)`.
pub fn estimate_sigma_eps_and_power(
    design: &DesignSpec,
    priors: &PriorSpec,
    test: &TestSpec,
    alpha: f64,
    mu_tilde: f64,
    n_var: usize,
    seed: u64,
) -> Result<SpreadAndPower> {
    if n_var < 2 {
        return Err(SssdError::config("n_var", "need at least 2 draws"));
    }
    let (n1, n2) = group_sizes(mu_tilde, design.q)?;
    let sampler = MleLimitSampler::new(design)?;
    let stream = SobolStream::new(2 * design.dim(), seed)?;
    let z_alpha = z_two_sided(alpha);
    let results = map_indexed(n_var, |i| {
        let z = normal_scores(&stream.point(i as u32));
        let draw = sampler.from_scores_sizes(n1 as f64, n2 as f64, &z, i as u32);
        representative_posteriors(design, priors, &draw.eta1_hat, &draw.eta2_hat, n1, n2)
            .map(|(m, s)| (2.0 * z_alpha * s, normal_interval_mass(m, s, test.delta1, test.delta2) >= test.gamma))
    });
    let ok: Vec<(f64, bool)> = results.iter().filter_map(|r| r.as_ref().ok().copied()).collect();
    let failures = n_var - ok.len();
    if failures as f64 > MAX_FAILURE_FRACTION * n_var as f64 || ok.len() < 2 {
        let first = results.into_iter().find_map(|r| r.err()).map(|e| e.to_string()).unwrap_or_default();
        return Err(SssdError::Instability(format!(
            "{failures} of {n_var} posterior approximations failed (first: {first})"
        )));
    }
    let m = ok.len() as f64;
    let mean = ok.iter().map(|(l, _)| l).sum::<f64>() / m;
    let var = ok.iter().map(|(l, _)| (l - mean).powi(2)).sum::<f64>() / (m - 1.0);
    let hits = ok.iter().filter(|(_, hit)| *hit).count();
    Ok(SpreadAndPower { sigma_eps_hat: var.sqrt(), gamma_tilde: hits as f64 / m, failures })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbitFit {
    pub beta0_hat: f64,
    pub beta1_hat: f64,
    /// `(n, l - L-bar(n))` at the three evaluated sample sizes.
    pub points: [(f64, f64); 3],
}

/// Ordinary least squares through three points.
pub fn least_squares_line(points: &[(f64, f64); 3]) -> (f64, f64) {
    let xm = points.iter().map(|p| p.0).sum::<f64>() / 3.0;
    let ym = points.iter().map(|p| p.1).sum::<f64>() / 3.0;
    let sxy: f64 = points.iter().map(|p| (p.0 - xm) * (p.1 - ym)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - xm).powi(2)).sum();
    let b1 = sxy / sxx;
    (ym - b1 * xm, b1)
}

/// Line through `l - L-bar(n)` at the 45th, 50th and 55th percentiles of `N(mu, sigma^2)`,
/// with `sigma` widened when needed to keep the points `MIN_PROBIT_SPACING` apart.
pub fn fit_probit_line(
    design: &DesignSpec,
    priors: &PriorSpec,
    l: f64,
    alpha: f64,
    mu_ddot: f64,
    sigma_ddot: f64,
) -> Result<ProbitFit> {
    if !(sigma_ddot > 0.0 && sigma_ddot.is_finite()) {
        return Err(SssdError::Degenerate(format!("penultimate SSSD standard deviation is {sigma_ddot}")));
    }
    let spread = sigma_ddot.max(MIN_PROBIT_SPACING / norm_quantile(PROBIT_LEVELS[2]));
    let mut points = [(0.0, 0.0); 3];
    for (slot, p) in points.iter_mut().zip(PROBIT_LEVELS) {
        let n = mu_ddot + spread * norm_quantile(p);
        if !(n > 0.0) {
            return Err(SssdError::SmallSample(format!("probit design point n = {n} is not positive")));
        }
        *slot = (n, l - hdi_length_bar(design, priors, alpha, n)?);
    }
    let (beta0_hat, beta1_hat) = least_squares_line(&points);
    if !(beta1_hat > 0.0) {
        return Err(SssdError::Monotonicity(format!("slope {beta1_hat} through {points:?}")));
    }
    Ok(ProbitFit { beta0_hat, beta1_hat, points })
}

/// Horizontally rescaled power curve: `F~^-1(p) = scale * F_*(p)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdjustedCurve {
    pub scale: f64,
    pub anchor_n: f64,
    pub anchor_power: f64,
}

impl AdjustedCurve {
    pub fn inverse(&self, curve: &PowerCurve, p: f64) -> f64 {
        self.scale * curve.quantile(p)
    }

    pub fn cdf(&self, curve: &PowerCurve, n: f64) -> f64 {
        curve.cdf(n / self.scale)
    }

    pub fn knots(&self, curve: &PowerCurve) -> Vec<(f64, f64)> {
        curve.knots().into_iter().map(|(n, p)| (self.scale * n, p)).collect()
    }
}

/// Rescale `F*` so that it passes through `(mu_tilde, gamma_tilde)`. Levels outside the
/// range of `F*` are clamped to the nearest order statistic.
pub fn recalibrate_power_curve(
    curve: &PowerCurve,
    mu_tilde: f64,
    gamma_tilde: f64,
) -> Result<(AdjustedCurve, Option<Warning>)> {
    let total = curve.len() as f64;
    let lo = 1.0 / total;
    let hi = curve.finite().len() as f64 / total;
    let level = gamma_tilde.clamp(lo, hi);
    let warning = (level != gamma_tilde).then(|| {
        Warning::new(
            WarningKind::Extrapolation,
            format!("rough power {gamma_tilde} lies outside the stage-one curve; anchored at {level}"),
        )
    });
    let base = curve.quantile(level);
    if !(base > 0.0 && base.is_finite()) {
        return Err(SssdError::Unattainable(format!("stage-one curve has no finite positive quantile at {level}")));
    }
    Ok((AdjustedCurve { scale: mu_tilde / base, anchor_n: mu_tilde, anchor_power: level }, warning))
}

/// Length of the `100(1-alpha)%` HDI of `theta` under the priors, by Monte Carlo.
pub fn prior_hdi_length(design: &DesignSpec, priors: &PriorSpec, alpha: f64, m: usize, seed: u64) -> f64 {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut theta: Vec<f64> = (0..m)
        .map(|_| {
            let e1 = priors.sample(0, &mut rng);
            let e2 = priors.sample(1, &mut rng);
            design.theta(&e1, &e2)
        })
        .filter(|t| !t.is_nan())
        .collect();
    if theta.len() < 2 {
        return f64::INFINITY;
    }
    theta.sort_by(f64::total_cmp);
    hdi_empirical(&theta, 1.0 - alpha).length()
}

/// Appendix-style SSSD class from the diagnostics of a run.
pub fn classify_sssd(
    a_squared_zero: bool,
    prior_hdi_length: f64,
    l: f64,
    slope_ok: bool,
    mu_hat: f64,
    sigma_hat: f64,
) -> SssdClass {
    let prior_satisfied = prior_hdi_length <= l;
    if a_squared_zero {
        SssdClass::Class1b
    } else if prior_satisfied {
        if slope_ok {
            SssdClass::Class1a
        } else {
            SssdClass::Class2a
        }
    } else if !slope_ok || probable_domain(mu_hat, sigma_hat).0 < SMALL_DOMAIN_LOWER {
        SssdClass::Class2b
    } else {
        SssdClass::Class3
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTwoResult {
    pub mu_dot: f64,
    pub mu_tilde: f64,
    pub secant_slope: f64,
    pub mu_ddot: f64,
    pub sigma_ddot: f64,
    pub sigma_eps_hat: f64,
    pub gamma_tilde: f64,
    pub laplace_failures: usize,
    pub beta0_hat: f64,
    pub beta1_hat: f64,
    pub probit_points: [(f64, f64); 3],
    pub mu_hat: f64,
    pub sigma_hat: f64,
    pub adjusted_curve: AdjustedCurve,
    /// `F~^-1(target_power)` before rounding.
    pub n_target: f64,
    pub p_tilde: f64,
    pub n_recommended: u64,
    #[serde(with = "crate::serde_ext::pos_inf_as_null")]
    pub prior_hdi_length: f64,
    pub classification: SssdClass,
    pub n_var: usize,
    pub seed: u64,
    pub warnings: Vec<Warning>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageParams {
    pub n_sob: usize,
    pub n_var: usize,
    pub seeds: StageSeeds,
}

impl StageParams {
    pub fn with_seed(seed: u64) -> Self {
        StageParams { n_sob: crate::stage1::DEFAULT_N_SOB, n_var: DEFAULT_N_VAR, seeds: StageSeeds::derive(seed) }
    }
}

/// Both stages of one design run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SssdDesign {
    pub stage_one: StageOneResult,
    pub stage_two: StageTwoResult,
}

/// Adds the algorithm line to an error.
trait AtLine<T> {
    fn line(self, line: u8) -> Result<T>;
}

impl<T> AtLine<T> for Result<T> {
    fn line(self, line: u8) -> Result<T> {
        self.map_err(|e| e.at_line(line))
    }
}

/// Stage two after a completed stage one.
pub fn stage_two_from(
    stage1: &StageOneResult,
    design: &DesignSpec,
    priors: &PriorSpec,
    test: &TestSpec,
    n_var: usize,
    seeds: StageSeeds,
) -> Result<StageTwoResult> {
    let est = &stage1.estimate;
    let adj = adjust_mean(stage1, design, priors).line(3)?;
    let spread =
        estimate_sigma_eps_and_power(design, priors, test, est.alpha, adj.mu_tilde, n_var, seeds.stage2).line(10)?;
    let mu_ddot = adj.mu_tilde;
    let sigma_ddot = spread.sigma_eps_hat / adj.secant_slope;
    let fit = fit_probit_line(design, priors, est.l, est.alpha, mu_ddot, sigma_ddot).line(13)?;
    let mu_hat = -fit.beta0_hat / fit.beta1_hat;
    let sigma_hat = spread.sigma_eps_hat / fit.beta1_hat;
    let (adjusted_curve, extrapolated) =
        recalibrate_power_curve(&stage1.curve, adj.mu_tilde, spread.gamma_tilde).line(15)?;
    let n_target = adjusted_curve.inverse(&stage1.curve, test.target_power);
    if !n_target.is_finite() {
        return Err(
            SssdError::Unattainable(format!("adjusted power curve never reaches {}", test.target_power)).at_line(16)
        );
    }
    let p_tilde = if sigma_hat > 0.0 {
        norm_cdf((n_target - mu_hat) / sigma_hat)
    } else if n_target >= mu_hat {
        1.0
    } else {
        0.0
    };

    let mut warnings: Vec<Warning> = extrapolated.into_iter().collect();
    if spread.failures > 0 {
        warnings.push(Warning::new(
            WarningKind::Degeneracy,
            format!("{} of {n_var} posterior approximations failed and were skipped", spread.failures),
        ));
    }
    if !(0.05..=0.95).contains(&p_tilde) {
        warnings.push(Warning::new(
            WarningKind::ExtremeCalibration,
            format!(
                "the recommended n sits at SSSD quantile {p_tilde:.4}; the length and power criteria are poorly aligned"
            ),
        ));
    }
    let lower = probable_domain(mu_hat, sigma_hat).0;
    if lower < 0.0 {
        warnings.push(Warning::new(WarningKind::SmallSample, format!("probable domain starts below zero ({lower})")));
    }
    let prior_len = prior_hdi_length(design, priors, est.alpha, PRIOR_HDI_DRAWS, seeds.prior_hdi);
    let classification = classify_sssd(stage1.asymptotics.is_degenerate(), prior_len, est.l, true, mu_hat, sigma_hat);
    if matches!(classification, SssdClass::Class2a | SssdClass::Class2b) {
        warnings.push(Warning::new(
            WarningKind::IllDefined,
            format!("SSSD may be ill-defined ({classification:?}); probable domain lower extreme {lower:.2}"),
        ));
    }
    Ok(StageTwoResult {
        mu_dot: adj.mu_dot,
        mu_tilde: adj.mu_tilde,
        secant_slope: adj.secant_slope,
        mu_ddot,
        sigma_ddot,
        sigma_eps_hat: spread.sigma_eps_hat,
        gamma_tilde: spread.gamma_tilde,
        laplace_failures: spread.failures,
        beta0_hat: fit.beta0_hat,
        beta1_hat: fit.beta1_hat,
        probit_points: fit.points,
        mu_hat,
        sigma_hat,
        adjusted_curve,
        n_target,
        p_tilde,
        n_recommended: n_target.ceil() as u64,
        prior_hdi_length: prior_len,
        classification,
        n_var,
        seed: seeds.stage2,
        warnings,
    })
}

/// Full two-stage design.
pub fn stage_two(design: &DesignSpec, priors: &PriorSpec, test: &TestSpec, params: &StageParams) -> Result<SssdDesign> {
    design.validate()?;
    test.validate(design)?;
    priors.validate(design.family, &design.eta1, &design.eta2)?;
    let stage1 = stage_one(design, test, params.n_sob, params.seeds.stage1).line(2)?;
    let stage2 = stage_two_from(&stage1, design, priors, test, params.n_var, params.seeds)?;
    Ok(SssdDesign { stage_one: stage1, stage_two: stage2 })
}
