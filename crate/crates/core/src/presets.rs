//! Reference gamma tail-probability design used by the numerical study and the tests.

use crate::model::{Characteristic, Comparison, DesignSpec, ModelFamily};
use crate::prior::{ComponentPrior, PriorSpec};
use crate::stage1::{TestMode, TestSpec};

pub const KAPPA: f64 = 4.29;

/// Groups `Gamma(2.11, 0.69)` and `Gamma(2.43, 0.79)`, comparing `P(Y > 4.29)` on the log-ratio scale.
pub fn gamma_tail_design(q: f64) -> DesignSpec {
    DesignSpec {
        family: ModelFamily::Gamma,
        eta1: vec![2.11, 0.69],
        eta2: vec![2.43, 0.79],
        characteristic: Characteristic::TailProbability { threshold: KAPPA },
        comparison: Comparison::LogRatio,
        q,
    }
}

pub fn uninformative_priors() -> PriorSpec {
    PriorSpec::vague(ModelFamily::Gamma)
}

pub fn informative_priors() -> PriorSpec {
    let g = |shape, rate| ComponentPrior::Gamma { shape, rate };
    PriorSpec { group1: vec![g(33.79, 15.66), g(26.96, 37.92)], group2: vec![g(105.53, 42.97), g(85.43, 106.31)] }
}

/// Test settings `a`, `b`, `c`: `(gamma, target power, delta*)`.
pub const SETTINGS: [(char, f64, f64, f64); 3] = [('a', 0.5, 0.6, 0.25), ('b', 0.9, 0.7, 0.3), ('c', 0.8, 0.8, 0.15)];

/// Equivalence test on `(-ln(1 + delta*), ln(1 + delta*))` with calibrated length.
pub fn equivalence_test(gamma: f64, target_power: f64, delta_star: f64) -> TestSpec {
    let d = (1.0 + delta_star).ln();
    TestSpec { delta1: -d, delta2: d, gamma, target_power, mode: TestMode::Calibrated }
}

pub fn setting(name: char) -> Option<TestSpec> {
    SETTINGS.iter().find(|s| s.0 == name).map(|&(_, g, p, d)| equivalence_test(g, p, d))
}
