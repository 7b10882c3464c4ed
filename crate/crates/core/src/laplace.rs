//! Laplace approximation of a single group's posterior on the unconstrained scale.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SssdError};
use crate::model::{ModelFamily, SampleStats};
use crate::numdiff;
use crate::prior::ComponentPrior;
use crate::special::digamma;

pub const MAX_ITERATIONS: usize = 500;

/// Log posterior of `t = T(eta)`, including the log-Jacobian of `T^-1`.
#[derive(Debug, Clone, Copy)]
pub struct LogPosterior<'a> {
    pub family: ModelFamily,
    pub prior: &'a [ComponentPrior],
    pub stats: SampleStats,
}

impl LogPosterior<'_> {
    pub fn value(&self, t: &[f64]) -> f64 {
        if t.iter().any(|v| !v.is_finite()) {
            return f64::NAN;
        }
        let eta = self.family.from_unconstrained(t);
        let prior: f64 = self.prior.iter().zip(&eta).map(|(c, x)| c.log_density(*x)).sum();
        self.family.log_likelihood(&eta, &self.stats) + prior + self.family.log_jacobian(t)
    }

    pub fn gradient(&self, t: &[f64]) -> Vec<f64> {
        let eta = self.family.from_unconstrained(t);
        let s = &self.stats;
        match self.family {
            ModelFamily::Gamma => {
                let (a, b) = (eta[0], eta[1]);
                // d/d log a and d/d log b; the +1 from each log-Jacobian term is folded in
                let dl_da = s.n * (b.ln() - digamma(a)) + s.sum_log;
                let dl_db = s.n * a / b - s.sum;
                vec![
                    a * (dl_da + self.prior[0].dlog_density(a)) + 1.0,
                    b * (dl_db + self.prior[1].dlog_density(b)) + 1.0,
                ]
            }
            ModelFamily::Bernoulli => {
                let p = eta[0];
                let n1 = s.sum;
                let n0 = s.n - s.sum;
                let lik = n1 * (1.0 - p) - n0 * p;
                let prior = match self.prior[0] {
                    ComponentPrior::Beta { a, b } => (a - 1.0) * (1.0 - p) - (b - 1.0) * p,
                    c => c.dlog_density(p) * p * (1.0 - p),
                };
                vec![lik + prior + 1.0 - 2.0 * p]
            }
        }
    }
}

/// Normal approximation `N(mode, covariance)` on the scale of `T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorApprox {
    pub family: ModelFamily,
    pub mode: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
}

impl PosteriorApprox {
    pub fn covariance_matrix(&self) -> DMatrix<f64> {
        let d = self.mode.len();
        DMatrix::from_fn(d, d, |r, c| self.covariance[r][c])
    }

    pub fn mode_natural(&self) -> Vec<f64> {
        self.family.from_unconstrained(&self.mode)
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Posterior mode by BFGS ascent, seeded with the inverse numeric Hessian at `start`.
pub fn posterior_mode(post: &LogPosterior<'_>, start: &[f64]) -> Result<Vec<f64>> {
    let d = start.len();
    let f = |t: &[f64]| {
        let v = -post.value(t);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    let grad = |t: &[f64]| -> DVector<f64> { DVector::from_iterator(d, post.gradient(t).into_iter().map(|g| -g)) };

    let mut x = DVector::from_column_slice(start);
    let mut fx = f(x.as_slice());
    if !fx.is_finite() {
        return Err(SssdError::Optimization(format!("log posterior is not finite at the start {start:?}")));
    }
    let mut g = grad(x.as_slice());
    let scale = 1.0 + post.stats.n;
    let gtol = 1e-9 * scale;

    let initial_inverse = |x: &DVector<f64>| -> DMatrix<f64> {
        let h = numdiff::hessian_from_gradient(|t| grad(t).as_slice().to_vec(), x.as_slice());
        let hm = DMatrix::from_fn(d, d, |r, c| h[r][c]);
        match hm.cholesky() {
            Some(ch) => ch.inverse(),
            None => DMatrix::identity(d, d) / scale,
        }
    };
    let mut h_inv = initial_inverse(&x);

    for _ in 0..MAX_ITERATIONS {
        if inf_norm(g.as_slice()) <= gtol {
            return Ok(x.as_slice().to_vec());
        }
        let mut p = -(&h_inv * &g);
        let mut slope = g.dot(&p);
        if !(slope < 0.0) {
            h_inv = DMatrix::identity(d, d) / scale;
            p = -(&h_inv * &g);
            slope = g.dot(&p);
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let cand = &x + &p * step;
            let fc = f(cand.as_slice());
            if fc <= fx + 1e-4 * step * slope {
                accepted = Some((cand, fc));
                break;
            }
            step *= 0.5;
        }
        let Some((x_new, f_new)) = accepted else {
            // no decrease possible: accept if already at numerical precision
            if inf_norm(g.as_slice()) <= 1e3 * gtol {
                return Ok(x.as_slice().to_vec());
            }
            return Err(SssdError::Optimization(format!(
                "line search failed with gradient norm {:e}",
                inf_norm(g.as_slice())
            )));
        };
        let g_new = grad(x_new.as_slice());
        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-14 * s.norm() * y.norm() {
            let rho = 1.0 / sy;
            let i = DMatrix::<f64>::identity(d, d);
            let left = &i - &s * y.transpose() * rho;
            let right = &i - &y * s.transpose() * rho;
            h_inv = &left * &h_inv * &right + &s * s.transpose() * rho;
        }
        let small_step = inf_norm(s.as_slice()) <= 1e-13 * (1.0 + inf_norm(x.as_slice()));
        let df = (fx - f_new).abs();
        x = x_new;
        fx = f_new;
        g = g_new;
        if small_step && df <= 4.0 * f64::EPSILON * (1.0 + fx.abs()) {
            return Ok(x.as_slice().to_vec());
        }
    }
    if inf_norm(g.as_slice()) <= 1e3 * gtol {
        return Ok(x.as_slice().to_vec());
    }
    Err(SssdError::Optimization(format!(
        "no convergence after {MAX_ITERATIONS} iterations (gradient norm {:e})",
        inf_norm(g.as_slice())
    )))
}

/// Covariance as the inverse numeric negative Hessian at `mode`.
pub fn curvature_covariance(post: &LogPosterior<'_>, mode: &[f64]) -> Result<DMatrix<f64>> {
    let d = mode.len();
    let h = numdiff::hessian_from_gradient(|t| post.gradient(t).into_iter().map(|g| -g).collect(), mode);
    let neg_hess = DMatrix::from_fn(d, d, |r, c| h[r][c]);
    let chol = neg_hess.clone().cholesky().ok_or_else(|| SssdError::Curvature(format!("{neg_hess}")))?;
    Ok(chol.inverse())
}

fn default_start(family: ModelFamily, stats: &SampleStats) -> Vec<f64> {
    match family.mle_from_stats(stats) {
        Ok(eta) => family.to_unconstrained(&eta),
        Err(_) => match family {
            ModelFamily::Bernoulli => {
                let p = (stats.sum + 0.5) / (stats.n + 1.0);
                family.to_unconstrained(&[p])
            }
            ModelFamily::Gamma => {
                let mean = stats.sum / stats.n;
                family.to_unconstrained(&[1.0, 1.0 / mean])
            }
        },
    }
}

/// Laplace approximation from sufficient statistics, optionally seeded near the mode.
pub fn laplace_from_stats(
    family: ModelFamily,
    prior: &[ComponentPrior],
    stats: SampleStats,
    start: Option<&[f64]>,
) -> Result<PosteriorApprox> {
    let post = LogPosterior { family, prior, stats };
    let start = match start {
        Some(s) => s.to_vec(),
        None => default_start(family, &stats),
    };
    let mode = posterior_mode(&post, &start)?;
    let cov = curvature_covariance(&post, &mode)?;
    let d = mode.len();
    Ok(PosteriorApprox { family, mode, covariance: (0..d).map(|r| (0..d).map(|c| cov[(r, c)]).collect()).collect() })
}

pub fn laplace_posterior(family: ModelFamily, prior: &[ComponentPrior], sample: &[f64]) -> Result<PosteriorApprox> {
    if prior.len() != family.param_count() {
        return Err(SssdError::config("priors", "one component prior per parameter"));
    }
    let stats = SampleStats::from_sample(family, sample)?;
    laplace_from_stats(family, prior, stats, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_matches_numeric() {
        let gp = [ComponentPrior::Gamma { shape: 2.0, rate: 0.1 }, ComponentPrior::Gamma { shape: 26.96, rate: 37.92 }];
        let post = LogPosterior {
            family: ModelFamily::Gamma,
            prior: &gp,
            stats: SampleStats { n: 40.0, sum: 120.0, sum_log: 38.0 },
        };
        let t = [0.7, -0.4];
        let fd = numdiff::gradient(|x| post.value(x), &t);
        let an = post.gradient(&t);
        for i in 0..2 {
            assert!((fd[i] - an[i]).abs() < 1e-6 * (1.0 + an[i].abs()), "{fd:?} {an:?}");
        }
        let bp = [ComponentPrior::Gamma { shape: 1.5, rate: 2.0 }];
        let post = LogPosterior {
            family: ModelFamily::Bernoulli,
            prior: &bp,
            stats: SampleStats { n: 30.0, sum: 9.0, sum_log: 0.0 },
        };
        let fd = numdiff::gradient(|x| post.value(x), &[-0.3]);
        assert!((fd[0] - post.gradient(&[-0.3])[0]).abs() < 1e-7);
    }

    #[test]
    fn beta_logit_mode_is_closed_form() {
        let prior = [ComponentPrior::Beta { a: 3.0, b: 4.0 }];
        let sample: Vec<f64> = (0..50).map(|i| if i % 5 < 2 { 1.0 } else { 0.0 }).collect();
        let post = laplace_posterior(ModelFamily::Bernoulli, &prior, &sample).unwrap();
        // the Jacobian adds one to each Beta exponent: mode at (s + a) / (n + a + b)
        let p = (20.0 + 3.0) / (50.0 + 7.0);
        let want = (p / (1.0 - p) as f64).ln();
        assert!((post.mode[0] - want).abs() < 1e-6);
        // curvature of (s+a) log p + (n-s+b) log(1-p) in logit is (n+a+b) p (1-p)
        let var = 1.0 / (57.0 * p * (1.0 - p));
        assert!((post.covariance[0][0] - var).abs() < 1e-6 * var);
    }

    #[test]
    fn handles_all_zero_bernoulli_sample() {
        let prior = [ComponentPrior::Beta { a: 1.0, b: 1.0 }];
        let post = laplace_posterior(ModelFamily::Bernoulli, &prior, &[0.0; 10]).unwrap();
        let p = 1.0 / 12.0;
        assert!((post.mode[0] - (p / (1.0 - p) as f64).ln()).abs() < 1e-6);
    }
}
