//! Run configuration, design reports and oracle validation tables.

use serde::{Deserialize, Deserializer, Serialize};

use crate::asymptotics::{probable_domain, ProbitModel, SssdClass};
use crate::error::{Result, SssdError, Warning};
use crate::model::{Comparison, DesignSpec};
use crate::oracle::{simulate_length_criterion, simulate_power, OracleOptions, Proportion, DEFAULT_M, DEFAULT_REPS};
use crate::prior::PriorSpec;
use crate::special::norm_quantile;
use crate::stage1::{stage_one, TestMode, TestSpec, DEFAULT_N_SOB};
use crate::stage2::{group_sizes, stage_two_from, StageSeeds, StageTwoResult, DEFAULT_N_VAR};

pub const DEFAULT_SEED: u64 = 1;
pub const MIN_VALIDATION_REPS: usize = 100;

pub fn engine_version() -> String {
    format!("sssd-core {}", env!("CARGO_PKG_VERSION"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RopeKind {
    Equivalence,
    Noninferiority,
}

/// Interval given by a relative margin `delta_star` on the comparison's own scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rope {
    pub kind: RopeKind,
    pub delta_star: f64,
}

impl Rope {
    pub fn interval(&self, comparison: Comparison) -> Result<(f64, f64)> {
        let d = self.delta_star;
        if !(d > 0.0 && d.is_finite()) {
            return Err(SssdError::config("test.rope.delta_star", "must be positive"));
        }
        let (lo, hi) = match comparison {
            Comparison::Difference => (-d, d),
            Comparison::Ratio => (1.0 / (1.0 + d), 1.0 + d),
            Comparison::LogRatio => (-(1.0 + d).ln(), (1.0 + d).ln()),
        };
        Ok(match self.kind {
            RopeKind::Equivalence => (lo, hi),
            RopeKind::Noninferiority => (lo, f64::INFINITY),
        })
    }
}

/// Present-but-null stays distinguishable from absent.
fn nullable<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<Option<f64>>, D::Error> {
    Option::<f64>::deserialize(d).map(Some)
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestConfig {
    /// `null` is `-inf`.
    #[serde(default, deserialize_with = "nullable")]
    pub delta1: Option<Option<f64>>,
    /// `null` is `+inf`.
    #[serde(default, deserialize_with = "nullable")]
    pub delta2: Option<Option<f64>>,
    #[serde(default)]
    pub rope: Option<Rope>,
    pub gamma: f64,
    pub target_power: f64,
    #[serde(default)]
    pub mode: Option<TestMode>,
}

impl TestConfig {
    pub fn resolve(&self, comparison: Comparison) -> Result<TestSpec> {
        let (delta1, delta2) = match (self.rope, self.delta1, self.delta2) {
            (Some(rope), None, None) => rope.interval(comparison)?,
            (None, Some(d1), Some(d2)) => (d1.unwrap_or(f64::NEG_INFINITY), d2.unwrap_or(f64::INFINITY)),
            (Some(_), _, _) => {
                return Err(SssdError::config("test.rope", "give either rope or delta1/delta2, not both"))
            }
            (None, _, _) => {
                return Err(SssdError::config(
                    "test.delta1/test.delta2",
                    "both endpoints are required (null for an infinite one) unless rope is given",
                ))
            }
        };
        let spec = TestSpec {
            delta1,
            delta2,
            gamma: self.gamma,
            target_power: self.target_power,
            mode: self.mode.unwrap_or(TestMode::Calibrated),
        };
        spec.validate_shape(comparison)?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    pub reps: Option<usize>,
    pub m: Option<usize>,
}

/// User-facing configuration. Omitted fields take documented defaults, all of which are
/// recorded in the report.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub design: DesignSpec,
    #[serde(default)]
    pub priors: Option<PriorSpec>,
    pub test: TestConfig,
    #[serde(default)]
    pub n_sob: Option<usize>,
    #[serde(default)]
    pub n_var: Option<usize>,
    /// Overrides `design.q`.
    #[serde(default)]
    pub q: Option<f64>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub oracle: OracleConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleDefaults {
    pub reps: usize,
    pub m: usize,
}

/// Fully explicit configuration. Its JSON form is itself a valid [`RunConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolvedConfig {
    pub design: DesignSpec,
    pub priors: PriorSpec,
    pub test: TestSpec,
    pub n_sob: usize,
    pub n_var: usize,
    pub seed: u64,
    pub oracle: OracleDefaults,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| SssdError::config(json_path(&e), e.to_string()))
    }

    pub fn resolve(&self) -> Result<ResolvedConfig> {
        let mut design = self.design.clone();
        if let Some(q) = self.q {
            if q != design.q && design.q != 1.0 {
                return Err(SssdError::config("q", "conflicts with design.q"));
            }
            design.q = q;
        }
        design.validate()?;
        let test = self.test.resolve(design.comparison)?;
        let priors = self.priors.clone().unwrap_or_else(|| PriorSpec::vague(design.family));
        priors.validate(design.family, &design.eta1, &design.eta2)?;
        let resolved = ResolvedConfig {
            design,
            priors,
            test,
            n_sob: self.n_sob.unwrap_or(DEFAULT_N_SOB),
            n_var: self.n_var.unwrap_or(DEFAULT_N_VAR),
            seed: self.seed.unwrap_or(DEFAULT_SEED),
            oracle: OracleDefaults {
                reps: self.oracle.reps.unwrap_or(DEFAULT_REPS),
                m: self.oracle.m.unwrap_or(DEFAULT_M),
            },
        };
        if resolved.n_sob < 2 {
            return Err(SssdError::config("n_sob", "need at least 2 Sobol points"));
        }
        if resolved.n_var < 2 {
            return Err(SssdError::config("n_var", "need at least 2 draws"));
        }
        Ok(resolved)
    }
}

fn json_path(e: &serde_json::Error) -> String {
    format!("line {} column {}", e.line(), e.column())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageOneSummary {
    pub mu_l: f64,
    pub sigma_l: f64,
    pub l: f64,
    pub alpha: f64,
    pub classification: SssdClass,
    pub theta0: f64,
    pub inv_fisher_theta: f64,
    pub a_squared: f64,
    pub probit: ProbitModel,
    pub n_sob: usize,
    pub censored: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub n_recommended: u64,
    pub p_tilde: f64,
    pub mu_hat: f64,
    pub sigma_hat: f64,
    pub probable_domain: (f64, f64),
    pub classification: SssdClass,
}

/// Power-curve knots `(n, p)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curves {
    pub limiting: Vec<(f64, f64)>,
    pub adjusted: Vec<(f64, f64)>,
}

/// Fixed numerical conventions, stated so a report can be read without the source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conventions {
    pub power_curve: String,
    pub recommendation: String,
    pub seeds: String,
}

impl Default for Conventions {
    fn default() -> Self {
        Conventions {
            power_curve: "knots (x_(i), i/N) over sorted per-draw sample sizes, censored draws sort last; \
                          linear interpolation; quantile(p) = x_(1) for p*N <= 1"
                .into(),
            recommendation: "ceil(adjusted quantile at target_power); group 2 size round(q * n1)".into(),
            seeds: "stage seeds are the first three ChaCha20 outputs of the run seed".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub stage_one_ms: f64,
    pub stage_two_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignReport {
    pub engine: String,
    pub config: ResolvedConfig,
    pub seeds: StageSeeds,
    pub stage_one: StageOneSummary,
    pub stage_two: StageTwoResult,
    pub recommendation: Recommendation,
    pub curves: Curves,
    pub warnings: Vec<Warning>,
    pub conventions: Conventions,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings: Option<Timings>,
}

impl DesignReport {
    /// Pretty JSON with a trailing newline. Floats use the shortest round-trip decimal form.
    pub fn to_text(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report is serializable");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| SssdError::config(format!("report {}", json_path(&e)), e.to_string()))
    }
}

/// Both stages for a resolved configuration. Timings are measured only on request, so
/// reports without them are reproducible byte for byte.
pub fn design_report(cfg: &ResolvedConfig, with_timings: bool) -> Result<DesignReport> {
    // the clock is not touched otherwise, which also keeps this usable where there is none
    let now = || with_timings.then(std::time::Instant::now);
    let seeds = StageSeeds::derive(cfg.seed);
    let t0 = now();
    cfg.test.validate(&cfg.design)?;
    let s1 = stage_one(&cfg.design, &cfg.test, cfg.n_sob, seeds.stage1).map_err(|e| e.at_line(2))?;
    let t1 = now();
    let s2 = stage_two_from(&s1, &cfg.design, &cfg.priors, &cfg.test, cfg.n_var, seeds)?;
    let t2 = now();

    let mut warnings = s1.warnings.clone();
    warnings.extend(s2.warnings.iter().cloned());
    let est = &s1.estimate;
    Ok(DesignReport {
        engine: engine_version(),
        config: cfg.clone(),
        seeds,
        stage_one: StageOneSummary {
            mu_l: est.mu_l,
            sigma_l: est.sigma_l,
            l: est.l,
            alpha: est.alpha,
            classification: est.classification,
            theta0: s1.asymptotics.theta0,
            inv_fisher_theta: s1.asymptotics.inv_fisher_theta,
            a_squared: s1.asymptotics.a_squared,
            probit: s1.probit,
            n_sob: s1.n_sob,
            censored: s1.curve.censored(),
        },
        recommendation: Recommendation {
            n_recommended: s2.n_recommended,
            p_tilde: s2.p_tilde,
            mu_hat: s2.mu_hat,
            sigma_hat: s2.sigma_hat,
            probable_domain: probable_domain(s2.mu_hat, s2.sigma_hat),
            classification: s2.classification,
        },
        curves: Curves { limiting: s1.curve.knots(), adjusted: s2.adjusted_curve.knots(&s1.curve) },
        stage_two: s2,
        warnings,
        conventions: Conventions::default(),
        timings: match (t0, t1, t2) {
            (Some(t0), Some(t1), Some(t2)) => Some(Timings {
                stage_one_ms: (t1 - t0).as_secs_f64() * 1e3,
                stage_two_ms: (t2 - t1).as_secs_f64() * 1e3,
            }),
            _ => None,
        },
    })
}

pub fn run_design(cfg: &RunConfig) -> Result<DesignReport> {
    design_report(&cfg.resolve()?, false)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRow {
    pub percentile: f64,
    /// `mu_hat + sigma_hat * z_p`.
    pub n: f64,
    pub group_sizes: (usize, usize),
    pub length_criterion: Proportion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerCheck {
    pub n: u64,
    pub target_power: f64,
    pub power: Proportion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub engine: String,
    pub oracle: OracleOptions,
    pub l: f64,
    pub alpha: f64,
    pub rows: Vec<ValidationRow>,
    pub power: PowerCheck,
}

impl ValidationReport {
    /// Plain-text table: percentile, n, proportion satisfying the length criterion, SE.
    pub fn table(&self) -> String {
        let mut out = format!("{:>10} {:>10} {:>10} {:>8}\n", "percentile", "n", "length", "se");
        for r in &self.rows {
            out += &format!(
                "{:>10.2} {:>10.2} {:>10.4} {:>8.4}\n",
                r.percentile, r.n, r.length_criterion.estimate, r.length_criterion.se
            );
        }
        out += &format!(
            "power at n = {}: {:.4} (se {:.4}, target {})\n",
            self.power.n, self.power.power.estimate, self.power.power.se, self.power.target_power
        );
        out
    }
}

/// Oracle check of a design report at the given SSSD percentiles and at `n_recommended`.
pub fn validate_report(
    report: &DesignReport,
    percentiles: &[f64],
    reps: usize,
    m: usize,
    seed: u64,
) -> Result<ValidationReport> {
    if reps < MIN_VALIDATION_REPS {
        return Err(SssdError::config("reps", format!("need at least {MIN_VALIDATION_REPS} replications")));
    }
    if let Some(p) = percentiles.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
        return Err(SssdError::config("percentiles", format!("{p} is not in (0, 1)")));
    }
    let cfg = &report.config;
    let opts = OracleOptions::new(reps, m, seed);
    let rec = &report.recommendation;
    let (l, alpha) = (report.stage_one.l, report.stage_one.alpha);
    let mut rows = Vec::with_capacity(percentiles.len());
    for (k, &p) in percentiles.iter().enumerate() {
        let n = rec.mu_hat + rec.sigma_hat * norm_quantile(p);
        let sizes = group_sizes(n, cfg.design.q)?;
        let row_opts = OracleOptions { seed: seed.wrapping_add(k as u64 + 1), ..opts };
        rows.push(ValidationRow {
            percentile: p,
            n,
            group_sizes: sizes,
            length_criterion: simulate_length_criterion(&cfg.design, &cfg.priors, n, l, alpha, &row_opts)?,
        });
    }
    let power = simulate_power(&cfg.design, &cfg.priors, &cfg.test, rec.n_recommended as f64, &opts)?;
    Ok(ValidationReport {
        engine: engine_version(),
        oracle: opts,
        l,
        alpha,
        rows,
        power: PowerCheck { n: rec.n_recommended, target_power: cfg.test.target_power, power },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "design": {"family": "gamma", "eta1": [2.11, 0.69], "eta2": [2.43, 0.79],
                   "characteristic": {"kind": "tail_probability", "threshold": 4.29},
                   "comparison": "log_ratio"},
        "test": {"rope": {"kind": "equivalence", "delta_star": 0.3}, "gamma": 0.9, "target_power": 0.7}
    }"#;

    #[test]
    fn defaults_are_filled_in() {
        let r = RunConfig::from_json(MINIMAL).unwrap().resolve().unwrap();
        assert_eq!(r.n_sob, 1024);
        assert_eq!(r.n_var, 256);
        assert_eq!(r.seed, DEFAULT_SEED);
        assert_eq!(r.design.q, 1.0);
        assert_eq!(r.test.mode, TestMode::Calibrated);
        assert!((r.test.delta2 - 1.3f64.ln()).abs() < 1e-16);
        assert_eq!(r.priors, PriorSpec::vague(r.design.family));
    }

    #[test]
    fn resolved_config_parses_as_run_config() {
        let r = RunConfig::from_json(MINIMAL).unwrap().resolve().unwrap();
        let text = serde_json::to_string(&r).unwrap();
        let again = RunConfig::from_json(&text).unwrap().resolve().unwrap();
        assert_eq!(r, again);
    }

    #[test]
    fn noninferiority_rope_is_half_open() {
        let rope = Rope { kind: RopeKind::Noninferiority, delta_star: 0.3 };
        let (lo, hi) = rope.interval(Comparison::Ratio).unwrap();
        assert_eq!(lo, 1.0 / 1.3);
        assert_eq!(hi, f64::INFINITY);
    }

    #[test]
    fn unknown_keys_and_missing_endpoints_are_rejected() {
        let bad = MINIMAL.replace("\"gamma\": 0.9", "\"gamma\": 0.9, \"gama\": 1");
        assert!(RunConfig::from_json(&bad).is_err());
        let cfg = RunConfig::from_json(
            &MINIMAL.replace(r#""rope": {"kind": "equivalence", "delta_star": 0.3}"#, r#""delta1": -0.2"#),
        )
        .unwrap();
        let err = cfg.resolve().unwrap_err();
        assert!(err.to_string().contains("delta2"), "{err}");
        let cfg = RunConfig::from_json(
            &MINIMAL
                .replace(r#""rope": {"kind": "equivalence", "delta_star": 0.3}"#, r#""delta1": null, "delta2": 0.2"#),
        )
        .unwrap()
        .resolve()
        .unwrap();
        assert_eq!(cfg.test.delta1, f64::NEG_INFINITY);
    }
}
