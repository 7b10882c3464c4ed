//! Independent component priors on the natural parameter scale.

use rand::Rng;
use rand_distr::{Beta, Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SssdError};
use crate::model::ModelFamily;
use crate::special::ln_gamma;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "snake_case", deny_unknown_fields)]
pub enum ComponentPrior {
    Gamma {
        shape: f64,
        rate: f64,
    },
    /// Only for parameters in `(0, 1)`.
    Beta {
        a: f64,
        b: f64,
    },
}

impl ComponentPrior {
    pub fn log_density(&self, x: f64) -> f64 {
        match *self {
            ComponentPrior::Gamma { shape, rate } => {
                if x <= 0.0 {
                    return f64::NEG_INFINITY;
                }
                shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x
            }
            ComponentPrior::Beta { a, b } => {
                if x <= 0.0 || x >= 1.0 {
                    return f64::NEG_INFINITY;
                }
                ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + (a - 1.0) * x.ln() + (b - 1.0) * (1.0 - x).ln()
            }
        }
    }

    /// `d/dx log p(x)`.
    pub fn dlog_density(&self, x: f64) -> f64 {
        match *self {
            ComponentPrior::Gamma { shape, rate } => (shape - 1.0) / x - rate,
            ComponentPrior::Beta { a, b } => (a - 1.0) / x - (b - 1.0) / (1.0 - x),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            ComponentPrior::Gamma { shape, rate } => {
                Gamma::new(shape, 1.0 / rate).expect("validated hyperparameters").sample(rng)
            }
            ComponentPrior::Beta { a, b } => Beta::new(a, b).expect("validated hyperparameters").sample(rng),
        }
    }

    fn hyperparameters(&self) -> [f64; 2] {
        match *self {
            ComponentPrior::Gamma { shape, rate } => [shape, rate],
            ComponentPrior::Beta { a, b } => [a, b],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSpec {
    pub group1: Vec<ComponentPrior>,
    pub group2: Vec<ComponentPrior>,
}

impl PriorSpec {
    /// `GAMMA(2, 0.1)` on every gamma parameter, uniform on a Bernoulli probability.
    pub fn vague(family: ModelFamily) -> Self {
        let c = match family {
            ModelFamily::Gamma => ComponentPrior::Gamma { shape: 2.0, rate: 0.1 },
            ModelFamily::Bernoulli => ComponentPrior::Beta { a: 1.0, b: 1.0 },
        };
        let v = vec![c; family.param_count()];
        PriorSpec { group1: v.clone(), group2: v }
    }

    pub fn group(&self, j: usize) -> &[ComponentPrior] {
        if j == 0 {
            &self.group1
        } else {
            &self.group2
        }
    }

    pub fn validate(&self, family: ModelFamily, eta1: &[f64], eta2: &[f64]) -> Result<()> {
        let d = family.param_count();
        for (j, (name, eta)) in [("priors.group1", eta1), ("priors.group2", eta2)].into_iter().enumerate() {
            let comps = self.group(j);
            if comps.len() != d {
                return Err(SssdError::config(
                    name,
                    format!("{} needs {d} component priors, got {}", family.name(), comps.len()),
                ));
            }
            for (k, c) in comps.iter().enumerate() {
                let field = format!("{name}[{k}]");
                if c.hyperparameters().iter().any(|h| !(*h > 0.0 && h.is_finite())) {
                    return Err(SssdError::config(field, "hyperparameters must be positive"));
                }
                if matches!(c, ComponentPrior::Beta { .. }) && family != ModelFamily::Bernoulli {
                    return Err(SssdError::config(field, "beta priors need a parameter confined to (0, 1)"));
                }
                let lp = c.log_density(eta[k]);
                if !lp.is_finite() {
                    return Err(SssdError::config(
                        field,
                        format!("prior density is not positive at the design value {}", eta[k]),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn log_density(&self, group: usize, eta: &[f64]) -> f64 {
        self.group(group).iter().zip(eta).map(|(c, x)| c.log_density(*x)).sum()
    }

    pub fn sample<R: Rng + ?Sized>(&self, group: usize, rng: &mut R) -> Vec<f64> {
        self.group(group).iter().map(|c| c.sample(rng)).collect()
    }
}
