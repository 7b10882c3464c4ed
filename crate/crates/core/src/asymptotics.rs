//! Delta-method constants of the limiting HDI length and the limiting SSSD.
//!
//! With `V = I(theta0)^-1` and `A^2` the asymptotic variance of `sqrt(V)` evaluated at the
//! MLEs, the length of the `100(1-alpha)%` HDI at sample size `n` is asymptotically normal
//! with mean `2 z sqrt(V / n)` and sd `2 z A / n`. Solving for `n` at target length `l` gives
//! `mu_l = 4 z^2 V / l^2` and `sigma_l = 4 z A / l`.
//!
//! Regularity notes for the shipped families: gamma and Bernoulli are regular exponential
//! families with smooth, identifiable parameterizations on open parameter spaces, so the
//! usual MLE regularity and Bernstein-von Mises conditions hold at interior design values
//! under priors that are continuous and positive there. Nothing here verifies them.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SssdError};
use crate::model::DesignSpec;
use crate::numdiff;
use crate::special::z_two_sided;

/// Relative threshold below which `A^2` is treated as exactly zero.
pub const A2_ZERO_RELATIVE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThetaAsymptotics {
    pub theta0: f64,
    pub inv_fisher_theta: f64,
    pub a_squared: f64,
}

impl ThetaAsymptotics {
    pub fn is_degenerate(&self) -> bool {
        self.a_squared == 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Limiting,
    PriorAdjusted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SssdClass {
    Class1a,
    Class1b,
    Class2a,
    Class2b,
    Class3,
    Unclassified,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SssdEstimate {
    pub mu_l: f64,
    pub sigma_l: f64,
    pub l: f64,
    pub alpha: f64,
    pub stage: Stage,
    pub classification: SssdClass,
}

impl SssdEstimate {
    pub fn probable_domain(&self) -> (f64, f64) {
        probable_domain(self.mu_l, self.sigma_l)
    }
}

/// `(mu - 3 sigma, mu + 3 sigma)`.
pub fn probable_domain(mu: f64, sigma: f64) -> (f64, f64) {
    (mu - 3.0 * sigma, mu + 3.0 * sigma)
}

/// Posterior-length probit model of the limiting SSSD.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbitModel {
    pub beta0: f64,
    pub beta1: f64,
    pub sigma_eps: f64,
}

impl ProbitModel {
    /// Linearization of `l - E L(n)` at `mu_l`.
    pub fn limiting(asym: &ThetaAsymptotics, mu_l: f64, alpha: f64) -> Self {
        let z = z_two_sided(alpha);
        let s = asym.inv_fisher_theta.sqrt();
        ProbitModel {
            beta0: -z * s / mu_l.sqrt(),
            beta1: z * s / mu_l.powf(1.5),
            sigma_eps: 2.0 * z * asym.a_squared.sqrt() / mu_l,
        }
    }

    pub fn implied_mean(&self) -> f64 {
        -self.beta0 / self.beta1
    }

    pub fn implied_sd(&self) -> f64 {
        self.sigma_eps / self.beta1
    }
}

/// `V(eta1, eta2) = grad' blockdiag(I1^-1, I2^-1 / q) grad`, the delta-method variance of
/// `theta_hat` scaled by `n`.
pub fn theta_variance_at(design: &DesignSpec, eta1: &[f64], eta2: &[f64]) -> Result<f64> {
    let fam = design.family;
    let d = design.dim();
    let i1 = fam.inverse_fisher_information(eta1)?;
    let i2 = fam.inverse_fisher_information(eta2)?;
    let grad = design.theta_gradient(eta1, eta2);
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(SssdError::Characteristic(format!("gradient {grad:?} at {eta1:?}, {eta2:?}")));
    }
    let mut v = 0.0;
    for r in 0..d {
        for c in 0..d {
            v += grad[r] * i1[(r, c)] * grad[c];
            v += grad[d + r] * i2[(r, c)] * grad[d + c] / design.q;
        }
    }
    Ok(v)
}

/// NaN-returning variant for use inside numeric differentiation.
fn theta_sd_or_nan(design: &DesignSpec, eta1: &[f64], eta2: &[f64]) -> f64 {
    theta_variance_at(design, eta1, eta2).map(f64::sqrt).unwrap_or(f64::NAN)
}

pub fn inv_fisher_theta(design: &DesignSpec) -> Result<f64> {
    theta_variance_at(design, &design.eta1, &design.eta2)
}

/// Delta-method variance of `sqrt(V(eta1_hat, eta2_hat))`, with the same block covariance.
pub fn a_squared(design: &DesignSpec) -> Result<f64> {
    let v = inv_fisher_theta(design)?;
    let fam = design.family;
    let d = design.dim();
    let joint: Vec<f64> = design.eta1.iter().chain(&design.eta2).copied().collect();
    let grad = numdiff::gradient(|x| theta_sd_or_nan(design, &x[..d], &x[d..]), &joint);
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(SssdError::Characteristic(format!("gradient of the limiting information {grad:?}")));
    }
    let i1 = fam.inverse_fisher_information(&design.eta1)?;
    let i2 = fam.inverse_fisher_information(&design.eta2)?;
    let mut a2 = 0.0;
    for r in 0..d {
        for c in 0..d {
            a2 += grad[r] * i1[(r, c)] * grad[c];
            a2 += grad[d + r] * i2[(r, c)] * grad[d + c] / design.q;
        }
    }
    if a2 < A2_ZERO_RELATIVE * v * v {
        a2 = 0.0;
    }
    Ok(a2)
}

pub fn theta_asymptotics(design: &DesignSpec) -> Result<ThetaAsymptotics> {
    let inv = inv_fisher_theta(design)?;
    if !(inv > 0.0) {
        return Err(SssdError::Degenerate(format!("limiting posterior variance of theta is {inv}")));
    }
    Ok(ThetaAsymptotics { theta0: design.theta0(), inv_fisher_theta: inv, a_squared: a_squared(design)? })
}

/// Closed-form limiting SSSD at target length `l` and coverage `1 - alpha`.
pub fn limiting_from(asym: &ThetaAsymptotics, l: f64, alpha: f64) -> SssdEstimate {
    let z = z_two_sided(alpha);
    SssdEstimate {
        mu_l: 4.0 * z * z * asym.inv_fisher_theta / (l * l),
        sigma_l: 4.0 * z * asym.a_squared.sqrt() / l,
        l,
        alpha,
        stage: Stage::Limiting,
        classification: if asym.is_degenerate() { SssdClass::Class1b } else { SssdClass::Unclassified },
    }
}

pub fn limiting_sssd(design: &DesignSpec, l: f64, alpha: f64) -> Result<SssdEstimate> {
    if !(l > 0.0 && l.is_finite()) {
        return Err(SssdError::config("test.l", "target length must be positive"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(SssdError::config("test.alpha", "must lie in (0, 1)"));
    }
    Ok(limiting_from(&theta_asymptotics(design)?, l, alpha))
}

/// Ratio of `l sigma` at `mu_l + a` to the same quantity at `mu_l`, in closed form.
pub fn heteroscedasticity_ratio(mu_l: f64, a: f64) -> f64 {
    if a == 0.0 {
        return 2.0;
    }
    let r = a / mu_l;
    // (1 - 1/(1+r)) / (1 - 1/sqrt(1+r)) = 1 + 1/sqrt(1+r), free of cancellation
    1.0 + 1.0 / (1.0 + r).sqrt()
}
