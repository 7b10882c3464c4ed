//! Browser bindings. Every function takes a run configuration as JSON text and returns
//! JSON text, so the page needs no schema of its own.

use serde::Serialize;
use sssd_core::asymptotics::{limiting_from, probable_domain, theta_asymptotics};
use sssd_core::report::RunConfig;
use sssd_core::stage1::{approximate_power_curve, TestMode};
use sssd_core::stage2::StageSeeds;
use sssd_core::SssdError;
use wasm_bindgen::prelude::*;

fn js_error(e: SssdError) -> JsError {
    JsError::new(&format!("{}: {e}", e.code().as_str()))
}

/// Full two-stage design report.
#[wasm_bindgen]
pub fn design(config: &str) -> Result<String, JsError> {
    design_json(config).map_err(js_error)
}

/// Closed-form limiting SSSD for an explicit target length and coverage.
#[wasm_bindgen]
pub fn limiting_sssd(config: &str, l: f64, alpha: f64) -> Result<String, JsError> {
    limiting_json(config, l, alpha).map_err(js_error)
}

/// Stage-one power-curve knots `[[n, p], ...]` with the calibrated target length.
#[wasm_bindgen]
pub fn power_curve(config: &str) -> Result<String, JsError> {
    power_curve_json(config).map_err(js_error)
}

pub fn design_json(config: &str) -> Result<String, SssdError> {
    Ok(sssd_core::report::run_design(&RunConfig::from_json(config)?)?.to_text())
}

#[derive(Serialize)]
struct Limiting {
    mu_l: f64,
    sigma_l: f64,
    probable_domain: (f64, f64),
    theta0: f64,
}

pub fn limiting_json(config: &str, l: f64, alpha: f64) -> Result<String, SssdError> {
    let cfg = RunConfig::from_json(config)?.resolve()?;
    if !(l > 0.0 && l.is_finite()) {
        return Err(SssdError::config("l", "target length must be positive"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(SssdError::config("alpha", "must lie in (0, 1)"));
    }
    let asym = theta_asymptotics(&cfg.design)?;
    let est = limiting_from(&asym, l, alpha);
    let out = Limiting {
        mu_l: est.mu_l,
        sigma_l: est.sigma_l,
        probable_domain: probable_domain(est.mu_l, est.sigma_l),
        theta0: asym.theta0,
    };
    Ok(serde_json::to_string(&out).expect("serializable"))
}

#[derive(Serialize)]
struct Curve {
    knots: Vec<(f64, f64)>,
    mu_l: f64,
    l: Option<f64>,
    censored: usize,
}

pub fn power_curve_json(config: &str) -> Result<String, SssdError> {
    let cfg = RunConfig::from_json(config)?.resolve()?;
    cfg.test.validate(&cfg.design)?;
    let seeds = StageSeeds::derive(cfg.seed);
    let curve = approximate_power_curve(&cfg.design, &cfg.test, cfg.n_sob, seeds.stage1)?;
    let mu_l = curve.quantile(cfg.test.target_power);
    let l = match cfg.test.mode {
        TestMode::Calibrated => {
            let asym = theta_asymptotics(&cfg.design)?;
            let z = sssd_core::special::z_two_sided(1.0 - cfg.test.gamma);
            Some(2.0 * z * asym.inv_fisher_theta.sqrt() / mu_l.sqrt())
        }
        TestMode::Explicit { l, .. } => Some(l),
    };
    let out = Curve { knots: curve.knots(), mu_l, l, censored: curve.censored() };
    Ok(serde_json::to_string(&out).expect("serializable"))
}
