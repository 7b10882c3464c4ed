//! Model families, characteristics and the comparison map.
//!
//! A design is two groups drawn from the same family with fixed parameter vectors
//! `eta1`, `eta2`. Each group is summarized by a scalar characteristic `g(eta)` and the two
//! characteristics are compared through `h(g(eta1), g(eta2))`.
//!
//! Parameters for [`ModelFamily::Gamma`] are `(shape, rate)`; for
//! [`ModelFamily::Bernoulli`] the single success probability.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SssdError};
use crate::numdiff;
use crate::special::{digamma, inc_gamma_pq_with, inv_reg_lower_gamma, ln_gamma, trigamma};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelFamily {
    Gamma,
    Bernoulli,
}

/// Sufficient statistics of an i.i.d. sample. `sum_log` is unused for Bernoulli.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleStats {
    pub n: f64,
    pub sum: f64,
    pub sum_log: f64,
}

impl SampleStats {
    pub fn from_sample(family: ModelFamily, sample: &[f64]) -> Result<Self> {
        if sample.is_empty() {
            return Err(SssdError::Domain("empty sample".into()));
        }
        match family {
            ModelFamily::Gamma => {
                if let Some(bad) = sample.iter().find(|y| !(**y > 0.0) || !y.is_finite()) {
                    return Err(SssdError::Domain(format!(
                        "gamma observations must be positive and finite, got {bad}"
                    )));
                }
            }
            ModelFamily::Bernoulli => {
                if let Some(bad) = sample.iter().find(|y| **y != 0.0 && **y != 1.0) {
                    return Err(SssdError::Domain(format!("Bernoulli observations must be 0 or 1, got {bad}")));
                }
            }
        }
        let sum = sample.iter().sum();
        let sum_log = match family {
            ModelFamily::Gamma => sample.iter().map(|y| y.ln()).sum(),
            ModelFamily::Bernoulli => 0.0,
        };
        Ok(SampleStats { n: sample.len() as f64, sum, sum_log })
    }
}

impl ModelFamily {
    pub fn param_count(self) -> usize {
        match self {
            ModelFamily::Gamma => 2,
            ModelFamily::Bernoulli => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelFamily::Gamma => "gamma",
            ModelFamily::Bernoulli => "bernoulli",
        }
    }

    fn in_space(self, eta: &[f64]) -> bool {
        if eta.len() != self.param_count() || eta.iter().any(|v| !v.is_finite()) {
            return false;
        }
        match self {
            ModelFamily::Gamma => eta[0] > 0.0 && eta[1] > 0.0,
            ModelFamily::Bernoulli => eta[0] > 0.0 && eta[0] < 1.0,
        }
    }

    pub fn check_params(self, eta: &[f64]) -> Result<()> {
        if self.in_space(eta) {
            Ok(())
        } else {
            Err(SssdError::Domain(format!("{eta:?} is outside the {} parameter space", self.name())))
        }
    }

    pub fn log_density(self, eta: &[f64], y: f64) -> f64 {
        match self {
            ModelFamily::Gamma => {
                let (a, b) = (eta[0], eta[1]);
                if y <= 0.0 {
                    return f64::NEG_INFINITY;
                }
                a * b.ln() - ln_gamma(a) + (a - 1.0) * y.ln() - b * y
            }
            ModelFamily::Bernoulli => {
                let t = eta[0];
                if y == 1.0 {
                    t.ln()
                } else if y == 0.0 {
                    (1.0 - t).ln()
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }

    /// Log-likelihood from sufficient statistics.
    pub fn log_likelihood(self, eta: &[f64], stats: &SampleStats) -> f64 {
        match self {
            ModelFamily::Gamma => {
                let (a, b) = (eta[0], eta[1]);
                stats.n * (a * b.ln() - ln_gamma(a)) + (a - 1.0) * stats.sum_log - b * stats.sum
            }
            ModelFamily::Bernoulli => {
                let t = eta[0];
                stats.sum * t.ln() + (stats.n - stats.sum) * (1.0 - t).ln()
            }
        }
    }

    pub fn cdf(self, eta: &[f64], y: f64) -> f64 {
        match self {
            ModelFamily::Gamma => {
                if y <= 0.0 {
                    0.0
                } else {
                    inc_gamma_pq_with(eta[0], eta[1] * y, ln_gamma(eta[0])).0
                }
            }
            ModelFamily::Bernoulli => {
                if y < 0.0 {
                    0.0
                } else if y < 1.0 {
                    1.0 - eta[0]
                } else {
                    1.0
                }
            }
        }
    }

    /// `P(Y > y)`.
    pub fn survival(self, eta: &[f64], y: f64) -> f64 {
        match self {
            ModelFamily::Gamma => {
                if y <= 0.0 {
                    1.0
                } else {
                    inc_gamma_pq_with(eta[0], eta[1] * y, ln_gamma(eta[0])).1
                }
            }
            ModelFamily::Bernoulli => 1.0 - self.cdf(eta, y),
        }
    }

    /// Generalized inverse CDF, `inf { y : F(y) >= u }`.
    pub fn inverse_cdf(self, eta: &[f64], u: f64) -> Result<f64> {
        if !(u > 0.0 && u < 1.0) {
            return Err(SssdError::Domain(format!("quantile level {u} not in (0, 1)")));
        }
        self.check_params(eta)?;
        Ok(match self {
            ModelFamily::Gamma => inv_reg_lower_gamma(eta[0], u, ln_gamma(eta[0])) / eta[1],
            ModelFamily::Bernoulli => {
                if u <= 1.0 - eta[0] {
                    0.0
                } else {
                    1.0
                }
            }
        })
    }

    /// Per-observation Fisher information on the natural parameter scale.
    pub fn fisher_information(self, eta: &[f64]) -> Result<DMatrix<f64>> {
        self.check_params(eta)?;
        Ok(match self {
            ModelFamily::Gamma => {
                let (a, b) = (eta[0], eta[1]);
                DMatrix::from_row_slice(2, 2, &[trigamma(a), -1.0 / b, -1.0 / b, a / (b * b)])
            }
            ModelFamily::Bernoulli => {
                let t = eta[0];
                DMatrix::from_element(1, 1, 1.0 / (t * (1.0 - t)))
            }
        })
    }

    /// Closed-form inverse of [`Self::fisher_information`].
    pub fn inverse_fisher_information(self, eta: &[f64]) -> Result<DMatrix<f64>> {
        self.check_params(eta)?;
        match self {
            ModelFamily::Gamma => {
                let (a, b) = (eta[0], eta[1]);
                let psi1 = trigamma(a);
                // a * psi1(a) > 1 for every a > 0; det * b^2 = a psi1 - 1
                let k = a * psi1 - 1.0;
                if !(k > 0.0) || !k.is_finite() {
                    return Err(SssdError::Degenerate(format!("singular gamma Fisher information at {eta:?}")));
                }
                Ok(DMatrix::from_row_slice(2, 2, &[a / k, b / k, b / k, psi1 * b * b / k]))
            }
            ModelFamily::Bernoulli => {
                let t = eta[0];
                Ok(DMatrix::from_element(1, 1, t * (1.0 - t)))
            }
        }
    }

    pub fn mle(self, sample: &[f64]) -> Result<Vec<f64>> {
        let stats = SampleStats::from_sample(self, sample)?;
        self.mle_from_stats(&stats)
    }

    pub fn mle_from_stats(self, stats: &SampleStats) -> Result<Vec<f64>> {
        match self {
            ModelFamily::Bernoulli => {
                let p = stats.sum / stats.n;
                if p <= 0.0 || p >= 1.0 {
                    Err(SssdError::BoundaryMle(format!("sample proportion is {p}")))
                } else {
                    Ok(vec![p])
                }
            }
            ModelFamily::Gamma => gamma_mle(stats, None),
        }
    }

    /// Unconstrained transform: elementwise log for gamma, logit for Bernoulli.
    pub fn to_unconstrained(self, eta: &[f64]) -> Vec<f64> {
        match self {
            ModelFamily::Gamma => eta.iter().map(|v| v.ln()).collect(),
            ModelFamily::Bernoulli => eta.iter().map(|p| (p / (1.0 - p)).ln()).collect(),
        }
    }

    pub fn from_unconstrained(self, t: &[f64]) -> Vec<f64> {
        match self {
            ModelFamily::Gamma => t.iter().map(|v| v.exp()).collect(),
            ModelFamily::Bernoulli => t.iter().map(|v| logistic(*v)).collect(),
        }
    }

    /// Diagonal of `dT/d eta`.
    pub fn transform_derivative(self, eta: &[f64]) -> Vec<f64> {
        match self {
            ModelFamily::Gamma => eta.iter().map(|v| 1.0 / v).collect(),
            ModelFamily::Bernoulli => eta.iter().map(|p| 1.0 / (p * (1.0 - p))).collect(),
        }
    }

    /// `log |d eta / d t|` at `t`.
    pub fn log_jacobian(self, t: &[f64]) -> f64 {
        match self {
            ModelFamily::Gamma => t.iter().sum(),
            ModelFamily::Bernoulli => t
                .iter()
                .map(|v| {
                    let p = logistic(*v);
                    (p * (1.0 - p)).ln()
                })
                .sum(),
        }
    }
}

pub(crate) fn logistic(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Gamma MLE: Newton on log-shape for the profile score, rate profiled out as `shape / mean`.
pub(crate) fn gamma_mle(stats: &SampleStats, start_shape: Option<f64>) -> Result<Vec<f64>> {
    let mean = stats.sum / stats.n;
    let mean_log = stats.sum_log / stats.n;
    // s = log(mean) - mean(log y) >= 0, zero only for constant samples
    let s = mean.ln() - mean_log;
    if !(s > 1e-14) || !s.is_finite() {
        return Err(SssdError::DegenerateSample("gamma sample has zero variance".into()));
    }
    let profile_score = |a: f64| a.ln() - digamma(a) - s;
    let mut a = match start_shape {
        Some(v) if v > 0.0 => v,
        // method of moments through s: var/mean^2 ~ 2s for small dispersion
        _ => {
            let mom = (3.0 - s + ((s - 3.0).powi(2) + 24.0 * s).sqrt()) / (12.0 * s);
            if mom.is_finite() && mom > 0.0 {
                mom
            } else {
                1.0
            }
        }
    };
    let mut f = profile_score(a);
    for _ in 0..100 {
        if f.abs() < 1e-10 {
            return Ok(vec![a, a / mean]);
        }
        let deriv = 1.0 - a * trigamma(a); // d f / d log a
        let mut step = -f / deriv;
        let mut accepted = false;
        for _ in 0..60 {
            let cand = a * step.exp();
            let fc = profile_score(cand);
            if fc.is_finite() && fc.abs() < f.abs() {
                a = cand;
                f = fc;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if f.abs() < 1e-8 {
        Ok(vec![a, a / mean])
    } else {
        Err(SssdError::Optimization(format!("gamma MLE Newton stalled with profile score {f:e}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Characteristic {
    /// `P(Y > threshold)`.
    TailProbability {
        threshold: f64,
    },
    Mean,
    RawParameter {
        index: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparison {
    Difference,
    Ratio,
    LogRatio,
}

impl Comparison {
    pub fn apply(self, theta1: f64, theta2: f64) -> f64 {
        match self {
            Comparison::Difference => theta1 - theta2,
            Comparison::Ratio => theta1 / theta2,
            Comparison::LogRatio => theta1.ln() - theta2.ln(),
        }
    }

    pub fn needs_positive(self) -> bool {
        !matches!(self, Comparison::Difference)
    }
}

/// `theta_j = g(eta_j)`.
pub fn characteristic_value(family: ModelFamily, eta: &[f64], ch: &Characteristic) -> Result<f64> {
    family.check_params(eta)?;
    characteristic_support(family, ch)?;
    Ok(characteristic_unchecked(family, eta, ch))
}

pub(crate) fn characteristic_unchecked(family: ModelFamily, eta: &[f64], ch: &Characteristic) -> f64 {
    match *ch {
        Characteristic::TailProbability { threshold } => family.survival(eta, threshold),
        Characteristic::Mean => match family {
            ModelFamily::Gamma => eta[0] / eta[1],
            ModelFamily::Bernoulli => eta[0],
        },
        Characteristic::RawParameter { index } => eta[index],
    }
}

fn characteristic_support(family: ModelFamily, ch: &Characteristic) -> Result<()> {
    match *ch {
        Characteristic::TailProbability { threshold } => {
            let ok = match family {
                ModelFamily::Gamma => threshold.is_finite() && threshold >= 0.0,
                ModelFamily::Bernoulli => (0.0..1.0).contains(&threshold),
            };
            if ok {
                Ok(())
            } else {
                Err(SssdError::config(
                    "design.characteristic.threshold",
                    format!("{threshold} is not in the {} support", family.name()),
                ))
            }
        }
        Characteristic::RawParameter { index } if index >= family.param_count() => Err(SssdError::config(
            "design.characteristic.index",
            format!("{} has only {} parameters", family.name(), family.param_count()),
        )),
        _ => Ok(()),
    }
}

fn default_q() -> f64 {
    1.0
}

/// Fixed-parameter data-generating configuration for both groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignSpec {
    pub family: ModelFamily,
    pub eta1: Vec<f64>,
    pub eta2: Vec<f64>,
    pub characteristic: Characteristic,
    pub comparison: Comparison,
    /// Allocation ratio, `n2 = q * n1`.
    #[serde(default = "default_q")]
    pub q: f64,
}

impl DesignSpec {
    pub fn validate(&self) -> Result<()> {
        let d = self.family.param_count();
        for (field, eta) in [("design.eta1", &self.eta1), ("design.eta2", &self.eta2)] {
            if eta.len() != d {
                return Err(SssdError::config(
                    field,
                    format!("{} takes {d} parameters, got {}", self.family.name(), eta.len()),
                ));
            }
            self.family.check_params(eta).map_err(|e| SssdError::config(field, e.to_string()))?;
        }
        if !(self.q > 0.0 && self.q.is_finite()) {
            return Err(SssdError::config("q", "allocation ratio must be positive"));
        }
        characteristic_support(self.family, &self.characteristic)?;
        let (t1, t2) = self.design_characteristics();
        for (field, t) in [("design.eta1", t1), ("design.eta2", t2)] {
            if !t.is_finite() {
                return Err(SssdError::config(field, "characteristic is not finite"));
            }
            if self.comparison.needs_positive() && !(t > 0.0) {
                return Err(SssdError::config(
                    field,
                    format!("ratio comparisons need a positive characteristic, got {t}"),
                ));
            }
        }
        let grad = self.theta_gradient(&self.eta1, &self.eta2);
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(SssdError::Characteristic(format!("gradient {grad:?} at the design values")));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.family.param_count()
    }

    pub fn design_characteristics(&self) -> (f64, f64) {
        (
            characteristic_unchecked(self.family, &self.eta1, &self.characteristic),
            characteristic_unchecked(self.family, &self.eta2, &self.characteristic),
        )
    }

    /// `theta = h(g(eta1), g(eta2))`; NaN outside the parameter space.
    pub fn theta(&self, eta1: &[f64], eta2: &[f64]) -> f64 {
        if !self.family.in_space(eta1) || !self.family.in_space(eta2) {
            return f64::NAN;
        }
        let ch = &self.characteristic;
        self.comparison
            .apply(characteristic_unchecked(self.family, eta1, ch), characteristic_unchecked(self.family, eta2, ch))
    }

    pub fn theta0(&self) -> f64 {
        self.theta(&self.eta1, &self.eta2)
    }

    /// Numeric gradient of `theta` with respect to `(eta1, eta2)` concatenated.
    pub fn theta_gradient(&self, eta1: &[f64], eta2: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let joint: Vec<f64> = eta1.iter().chain(eta2).copied().collect();
        numdiff::gradient(|x| self.theta(&x[..d], &x[d..]), &joint)
    }
}
