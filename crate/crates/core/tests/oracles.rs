//! Engine values checked against reference numbers computed outside the engine: 40-digit
//! quadrature and bisection, exact delta-method algebra, grid searches and plain simulation.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use sssd_core::asymptotics::{a_squared, inv_fisher_theta, theta_variance_at};
use sssd_core::laplace::laplace_from_stats;
use sssd_core::model::{characteristic_value, ModelFamily, SampleStats};
use sssd_core::oracle::{hdi_empirical, simulate_stats, sir_from_stats, OracleOptions, ProposalStream};
use sssd_core::presets::gamma_tail_design;
use sssd_core::prior::{ComponentPrior, PriorSpec};
use sssd_core::stage2::representative_sample;

// P(Y > 4.29) for Gamma(2.11, rate 0.69) and Gamma(2.43, rate 0.79), by adaptive quadrature
const TAIL_1: f64 = 0.227_805_129_979_041_59;
const TAIL_2: f64 = 0.224_071_473_578_134_41;
const THETA_0: f64 = 0.016_525_490_987_540_807;
// median of Gamma(2.11, rate 0.69), bisection on the regularized incomplete gamma function
const MEDIAN_1: f64 = 2.590_800_341_265_734_8;
// delta-method constants from the closed-form gamma Fisher information and symbolic-precision
// derivatives of the tail probabilities
const V_Q1: f64 = 4.505_880_917_933_99;
const V_Q2: f64 = 3.366_173_810_118_12;
const A2_Q1: f64 = 2.289_574_194_101_46;
const A2_Q2: f64 = 1.691_623_813_368_26;

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

#[test]
fn tail_probabilities_match_quadrature() {
    let d = gamma_tail_design(1.0);
    let t1 = characteristic_value(d.family, &d.eta1, &d.characteristic).unwrap();
    let t2 = characteristic_value(d.family, &d.eta2, &d.characteristic).unwrap();
    assert!(rel(t1, TAIL_1) < 1e-12, "{t1}");
    assert!(rel(t2, TAIL_2) < 1e-12, "{t2}");
    assert!(rel(d.theta0(), THETA_0) < 1e-10, "{}", d.theta0());
}

#[test]
fn gamma_median_matches_bisection() {
    let med = ModelFamily::Gamma.inverse_cdf(&[2.11, 0.69], 0.5).unwrap();
    assert!((med - MEDIAN_1).abs() < 1e-12, "{med}");
    assert!((ModelFamily::Gamma.cdf(&[2.11, 0.69], MEDIAN_1) - 0.5).abs() < 1e-10);
}

#[test]
fn delta_method_constants_match_reference() {
    for (q, v, a2) in [(1.0, V_Q1, A2_Q1), (2.0, V_Q2, A2_Q2)] {
        let d = gamma_tail_design(q);
        let got_v = inv_fisher_theta(&d).unwrap();
        let got_a2 = a_squared(&d).unwrap();
        assert!(rel(got_v, v) < 1e-7, "q = {q}: V {got_v} vs {v}");
        assert!(rel(got_a2, a2) < 1e-3, "q = {q}: A^2 {got_a2} vs {a2}");
    }
}

/// Sampling variances of `sqrt(n) (theta_hat - theta0)` and `sqrt(n) (V(eta_hat)^(1/2) - V^(1/2))`
/// from simulated maximum likelihood estimates.
#[test]
fn delta_method_constants_match_simulated_estimates() {
    let d = gamma_tail_design(1.0);
    let (n, reps) = (100_000usize, 10_000usize);
    let v0 = inv_fisher_theta(&d).unwrap();
    let mut thetas = Vec::with_capacity(reps);
    let mut sds = Vec::with_capacity(reps);
    let mut rng = ChaCha20Rng::seed_from_u64(2024);
    for _ in 0..reps {
        let e1 = d.family.mle_from_stats(&simulate_stats(d.family, &d.eta1, n, &mut rng)).unwrap();
        let e2 = d.family.mle_from_stats(&simulate_stats(d.family, &d.eta2, n, &mut rng)).unwrap();
        thetas.push(d.theta(&e1, &e2));
        sds.push(theta_variance_at(&d, &e1, &e2).unwrap().sqrt());
    }
    let var = |xs: &[f64]| {
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
    };
    let v_mc = n as f64 * var(&thetas);
    let a2_mc = n as f64 * var(&sds);
    assert!(rel(v_mc, v0) < 0.03, "V {v_mc} vs {v0}");
    let a2 = a_squared(&d).unwrap();
    assert!(rel(a2_mc, a2) < 0.05, "A^2 {a2_mc} vs {a2}");
}

fn gamma_loglik(shape: f64, rate: f64, n: f64, sum: f64, sum_log: f64) -> f64 {
    n * (shape * rate.ln() - statrs::function::gamma::ln_gamma(shape)) + (shape - 1.0) * sum_log - rate * sum
}

#[test]
fn gamma_mle_matches_grid_search() {
    let mut rng = ChaCha20Rng::seed_from_u64(77);
    let g = Gamma::new(2.43, 1.0 / 0.79).unwrap();
    let sample: Vec<f64> = (0..10_000).map(|_| g.sample(&mut rng)).collect();
    let n = sample.len() as f64;
    let sum: f64 = sample.iter().sum();
    let sum_log: f64 = sample.iter().map(|y| y.ln()).sum();
    let (shapes, rates) = ((2.0, 3.0), (0.6, 1.0));
    let step = |(lo, hi): (f64, f64)| (hi - lo) / 199.0;
    let mut best = (f64::NEG_INFINITY, 0.0, 0.0);
    for i in 0..200 {
        for j in 0..200 {
            let a = shapes.0 + i as f64 * step(shapes);
            let b = rates.0 + j as f64 * step(rates);
            let ll = gamma_loglik(a, b, n, sum, sum_log);
            if ll > best.0 {
                best = (ll, a, b);
            }
        }
    }
    let eta = ModelFamily::Gamma.mle(&sample).unwrap();
    assert!((eta[0] - best.1).abs() <= step(shapes), "{eta:?} vs grid {best:?}");
    assert!((eta[1] - best.2).abs() <= step(rates), "{eta:?} vs grid {best:?}");
}

#[test]
fn gamma_fisher_information_matches_score_outer_products() {
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let g = Gamma::new(1.0, 1.0).unwrap();
    let m = 1_000_000;
    let mut acc = [0.0f64; 3];
    for _ in 0..m {
        let y: f64 = g.sample(&mut rng);
        // scores of log f = a log b - ln Gamma(a) + (a - 1) log y - b y at a = b = 1
        let s_a = y.ln() + 0.577_215_664_901_532_9;
        let s_b = 1.0 - y;
        acc[0] += s_a * s_a;
        acc[1] += s_a * s_b;
        acc[2] += s_b * s_b;
    }
    let mc = acc.map(|x| x / m as f64);
    let info = ModelFamily::Gamma.fisher_information(&[1.0, 1.0]).unwrap();
    for (k, (r, c)) in [(0, 0), (0, 1), (1, 1)].into_iter().enumerate() {
        assert!(rel(info[(r, c)], mc[k]) < 5e-3, "[{r},{c}] {} vs {}", info[(r, c)], mc[k]);
    }
}

#[test]
fn hdi_of_normal_draws_is_the_central_interval() {
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let mut xs: Vec<f64> = (0..1_000_000).map(|_| StandardNormal.sample(&mut rng)).collect();
    xs.sort_by(f64::total_cmp);
    let h = hdi_empirical(&xs, 0.5);
    assert!(rel(h.length(), 2.0 * 0.674_489_750_196_081_7) < 0.01, "{h:?}");
    let h = hdi_empirical(&xs, 0.9);
    for (x, want) in [(h.lower, -1.644_853_626_951_472_2), (h.upper, 1.644_853_626_951_472_2)] {
        assert!(rel(x, want) < 0.02, "{h:?}");
    }
}

fn stats_of(family: ModelFamily, sample: &[f64]) -> SampleStats {
    SampleStats::from_sample(family, sample).unwrap()
}

#[test]
fn laplace_covariance_shrinks_like_one_over_n() {
    let prior = [ComponentPrior::Gamma { shape: 2.0, rate: 0.1 }; 2];
    let trace = |n: f64| {
        let s = stats_of(ModelFamily::Gamma, &representative_sample(ModelFamily::Gamma, &[2.11, 0.69], n).unwrap());
        let p = laplace_from_stats(ModelFamily::Gamma, &prior, s, None).unwrap();
        p.covariance[0][0] + p.covariance[1][1]
    };
    let ratio = trace(4000.0) / trace(1000.0);
    assert!((0.24..=0.26).contains(&ratio), "{ratio}");
}

#[test]
fn flat_prior_mode_and_resampled_mean_sit_at_the_mle() {
    let fam = ModelFamily::Gamma;
    let prior = [ComponentPrior::Gamma { shape: 2.0, rate: 0.1 }; 2];
    let mut rng = ChaCha20Rng::seed_from_u64(11);
    let g = Gamma::new(2.11, 1.0 / 0.69).unwrap();
    let sample: Vec<f64> = (0..10_000).map(|_| g.sample(&mut rng)).collect();
    let stats = stats_of(fam, &sample);
    let t_mle = fam.to_unconstrained(&fam.mle(&sample).unwrap());
    let lap = laplace_from_stats(fam, &prior, stats, None).unwrap();
    let se: Vec<f64> = (0..2).map(|i| lap.covariance[i][i].sqrt()).collect();
    for i in 0..2 {
        assert!((lap.mode[i] - t_mle[i]).abs() < 3.0 * se[i], "mode {:?} vs {t_mle:?}", lap.mode);
    }
    let stream = ProposalStream::new(2, 10_000, &mut ChaCha20Rng::seed_from_u64(12));
    let post = sir_from_stats(fam, &prior, stats, &stream).unwrap();
    for i in 0..2 {
        let mean = (0..post.len()).map(|k| fam.to_unconstrained(post.draw(k))[i]).sum::<f64>() / post.len() as f64;
        assert!((mean - t_mle[i]).abs() < 3.0 * se[i], "posterior mean {mean} vs {}", t_mle[i]);
    }
}

#[test]
fn oracle_options_reject_too_few_draws() {
    let d = gamma_tail_design(1.0);
    let opts = OracleOptions::new(10, 10, 1);
    let err = sssd_core::oracle::simulate_reps(&d, &PriorSpec::vague(d.family), 50.0, 0.1, (-1.0, 1.0), &opts);
    assert!(err.is_err());
}
