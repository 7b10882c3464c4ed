use sssd_core::asymptotics::SssdClass;
use sssd_core::model::Comparison;
use sssd_core::oracle::{simulate_length_criterion, simulate_length_moments, simulate_power, OracleOptions};
use sssd_core::presets::{gamma_tail_design, informative_priors, setting, uninformative_priors};
use sssd_core::stage1::{stage_one, TestMode, DEFAULT_N_SOB};
use sssd_core::stage2::{
    adjust_mean, estimate_sigma_eps_and_power, group_sizes, hdi_length_bar, recalibrate_power_curve, stage_two,
    StageParams, StageSeeds, DEFAULT_N_VAR,
};

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

#[test]
fn stage_one_quantile_and_length_match_the_uninformative_runs() {
    let d = gamma_tail_design(1.0);
    let b = stage_one(&d, &setting('b').unwrap(), DEFAULT_N_SOB, 1).unwrap();
    assert!(rel(b.curve.quantile(0.7), 360.89) < 0.05, "{}", b.curve.quantile(0.7));
    let c = stage_one(&d, &setting('c').unwrap(), DEFAULT_N_SOB, 1).unwrap();
    assert!(rel(c.estimate.l, 0.165) < 0.03, "l = {}", c.estimate.l);
    assert!(rel(c.estimate.mu_l, 1089.42) < 0.05, "mu_l = {}", c.estimate.mu_l);
}

#[test]
fn calibrated_length_round_trips_through_explicit_mode() {
    let d = gamma_tail_design(1.0);
    let cal = stage_one(&d, &setting('b').unwrap(), DEFAULT_N_SOB, 4).unwrap();
    let mut test = setting('b').unwrap();
    test.mode = TestMode::Explicit { l: cal.estimate.l, alpha: cal.estimate.alpha };
    let exp = stage_one(&d, &test, DEFAULT_N_SOB, 4).unwrap();
    assert!(rel(exp.estimate.mu_l, cal.estimate.mu_l) < 1e-13);
}

#[test]
fn representative_lengths_shrink_with_n_and_with_prior_information() {
    let d = gamma_tail_design(1.0);
    let (vague, inf) = (uninformative_priors(), informative_priors());
    for n in [20.0, 80.0, 400.0] {
        let here = hdi_length_bar(&d, &vague, 0.1, n).unwrap();
        assert!(here > hdi_length_bar(&d, &vague, 0.1, 4.0 * n).unwrap());
        assert!(hdi_length_bar(&d, &inf, 0.1, n).unwrap() < here);
    }
}

#[test]
fn representative_length_at_mu_l_is_close_to_l_and_to_the_oracle() {
    let d = gamma_tail_design(1.0);
    let pr = uninformative_priors();
    let s1 = stage_one(&d, &setting('c').unwrap(), DEFAULT_N_SOB, 1).unwrap();
    let e = &s1.estimate;
    let lbar = hdi_length_bar(&d, &pr, e.alpha, e.mu_l).unwrap();
    assert!(rel(lbar, e.l) < 0.05, "{lbar} vs {}", e.l);
    let (n1, n2) = group_sizes(e.mu_l, d.q).unwrap();
    let mc = simulate_length_moments(&d, &pr, n1, n2, e.alpha, &OracleOptions::new(200, 10_000, 8)).unwrap();
    assert!(rel(lbar, mc.mean) < 0.05, "{lbar} vs oracle {}", mc.mean);
}

#[test]
fn prior_adjustment_of_the_mean() {
    let d = gamma_tail_design(1.0);
    let c = stage_one(&d, &setting('c').unwrap(), DEFAULT_N_SOB, 1).unwrap();
    let adj = adjust_mean(&c, &d, &uninformative_priors()).unwrap();
    assert!(rel(adj.mu_tilde, c.estimate.mu_l) < 0.05, "{adj:?}");
    let a = stage_one(&d, &setting('a').unwrap(), DEFAULT_N_SOB, 1).unwrap();
    let adj = adjust_mean(&a, &d, &informative_priors()).unwrap();
    assert!(adj.mu_tilde < a.estimate.mu_l, "{adj:?} vs {}", a.estimate.mu_l);
}

#[test]
fn rough_power_is_a_probability_near_the_target() {
    let d = gamma_tail_design(1.0);
    let test = setting('b').unwrap();
    let s1 = stage_one(&d, &test, DEFAULT_N_SOB, 1).unwrap();
    let pr = uninformative_priors();
    let adj = adjust_mean(&s1, &d, &pr).unwrap();
    let seeds = StageSeeds::derive(1);
    let sp = estimate_sigma_eps_and_power(&d, &pr, &test, s1.estimate.alpha, adj.mu_tilde, DEFAULT_N_VAR, seeds.stage2)
        .unwrap();
    assert!((0.6..=0.8).contains(&sp.gamma_tilde), "{sp:?}");
    assert!(sp.sigma_eps_hat > 0.0);

    let mut open = test;
    open.delta1 = f64::NEG_INFINITY;
    open.delta2 = f64::INFINITY;
    let sp = estimate_sigma_eps_and_power(&d, &pr, &open, s1.estimate.alpha, adj.mu_tilde, 64, 3).unwrap();
    assert_eq!(sp.gamma_tilde, 1.0);
}

#[test]
fn recalibrated_curve_is_anchored() {
    let d = gamma_tail_design(1.0);
    let s1 = stage_one(&d, &setting('b').unwrap(), DEFAULT_N_SOB, 1).unwrap();
    let (curve, warning) = recalibrate_power_curve(&s1.curve, 340.0, 0.65).unwrap();
    assert!(warning.is_none());
    assert!(rel(curve.inverse(&s1.curve, 0.65), 340.0) < 1e-14);

    let base = s1.curve.quantile(0.65);
    let (same, _) = recalibrate_power_curve(&s1.curve, base, 0.65).unwrap();
    assert_eq!(same.scale, 1.0);
    assert_eq!(same.knots(&s1.curve), s1.curve.knots());

    let two_a = stage_two(&d, &informative_priors(), &setting('a').unwrap(), &StageParams::with_seed(1)).unwrap();
    assert!(two_a.stage_two.adjusted_curve.scale < 1.0);
}

#[test]
fn single_runs_land_near_the_published_estimates() {
    let d = gamma_tail_design(1.0);
    let run = |pr, name| stage_two(&d, &pr, &setting(name).unwrap(), &StageParams::with_seed(1)).unwrap().stage_two;
    let b1 = run(uninformative_priors(), 'b');
    assert!(rel(b1.mu_hat, 360.89) < 0.05 && rel(b1.sigma_hat, 27.29) < 0.2, "{} {}", b1.mu_hat, b1.sigma_hat);
    let b2 = run(informative_priors(), 'b');
    assert!(rel(b2.sigma_hat, 23.32) < 0.2, "{}", b2.sigma_hat);
    let c1 = run(uninformative_priors(), 'c');
    assert!(rel(c1.mu_hat, 1089.42) < 0.05, "{}", c1.mu_hat);
    assert_eq!(c1.classification, SssdClass::Class3);
    let c2 = run(informative_priors(), 'c');
    assert!(rel(c2.mu_hat, 1044.96) < 0.05, "{}", c2.mu_hat);

    let mut ni = setting('b').unwrap();
    ni.delta1 = -(1.3f64).ln();
    ni.delta2 = f64::INFINITY;
    let ni = stage_two(&d, &uninformative_priors(), &ni, &StageParams::with_seed(1)).unwrap().stage_two;
    assert!(rel(ni.mu_hat, 192.56) < 0.05, "{}", ni.mu_hat);
}

#[test]
fn ratio_comparison_of_setting_a_is_flagged_as_ill_defined() {
    let mut d = gamma_tail_design(1.0);
    d.comparison = Comparison::Ratio;
    let mut test = setting('a').unwrap();
    test.delta1 = 1.0 / 1.25;
    test.delta2 = 1.25;
    let r = stage_two(&d, &uninformative_priors(), &test, &StageParams::with_seed(1)).unwrap();
    assert_eq!(r.stage_two.classification, SssdClass::Class2b);
}

#[test]
fn oracle_boundary_behaviour() {
    let d = gamma_tail_design(1.0);
    let pr = uninformative_priors();
    let opts = OracleOptions::new(100, 2000, 4);
    let l = stage_one(&d, &setting('b').unwrap(), DEFAULT_N_SOB, 1).unwrap().estimate.l;
    let far = simulate_length_criterion(&d, &pr, 2000.0, l, 0.1, &opts).unwrap();
    assert!(far.estimate >= 0.99, "{far:?}");

    let mut open = setting('b').unwrap();
    open.delta1 = f64::NEG_INFINITY;
    open.delta2 = f64::INFINITY;
    assert_eq!(simulate_power(&d, &pr, &open, 50.0, &opts).unwrap().estimate, 1.0);

    let mut outside = setting('b').unwrap();
    outside.delta1 = 0.05;
    outside.delta2 = 0.5;
    let p = simulate_power(&d, &pr, &outside, 20_000.0, &opts).unwrap();
    assert!(p.estimate <= 0.02, "{p:?}");
}

#[test]
fn length_criterion_is_monotone_on_a_well_defined_design() {
    let d = gamma_tail_design(1.0);
    let pr = uninformative_priors();
    let s1 = stage_one(&d, &setting('b').unwrap(), DEFAULT_N_SOB, 1).unwrap();
    let e = &s1.estimate;
    let grid = [300.0, 340.0, 380.0, 420.0];
    let props: Vec<_> = grid
        .iter()
        .enumerate()
        .map(|(k, &n)| {
            simulate_length_criterion(&d, &pr, n, e.l, e.alpha, &OracleOptions::new(300, 5000, 30 + k as u64))
        })
        .collect::<Result<_, _>>()
        .unwrap();
    for w in props.windows(2) {
        let se = (w[0].se.powi(2) + w[1].se.powi(2)).sqrt();
        assert!(w[1].estimate >= w[0].estimate - 2.0 * se, "{props:?}");
    }
}
