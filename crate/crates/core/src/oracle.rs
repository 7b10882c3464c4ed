//! Brute-force validation by simulated data, sampling-resampling posteriors and empirical
//! HDIs.
//!
//! Every replication draws from ChaCha20 streams addressed by `(seed, rep, purpose)`, so a
//! replication's outcome does not depend on how replications are scheduled.

use nalgebra::DMatrix;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{ChiSquared, Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SssdError};
use crate::laplace::{laplace_from_stats, LogPosterior, PosteriorApprox};
use crate::model::{DesignSpec, ModelFamily, SampleStats};
use crate::prior::{ComponentPrior, PriorSpec};
use crate::stage1::{map_indexed, TestSpec};
use crate::stage2::group_sizes;

pub const MIN_DRAWS: usize = 1000;
pub const DEFAULT_M: usize = 10_000;
pub const DEFAULT_REPS: usize = 500;
pub const PROPOSAL_DF: f64 = 5.0;
/// Proposal scale multipliers of the Laplace covariance, tried in order.
pub const PROPOSAL_SCALES: [f64; 2] = [1.5, 3.0];
pub const MIN_ESS_FRACTION: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HdiInterval {
    pub lower: f64,
    pub upper: f64,
    pub coverage: f64,
}

impl HdiInterval {
    pub fn length(&self) -> f64 {
        self.upper - self.lower
    }
}

/// Shortest window of `ceil(coverage m)` consecutive sorted draws; ties go to the first.
pub fn hdi_empirical(sorted: &[f64], coverage: f64) -> HdiInterval {
    let m = sorted.len();
    debug_assert!(m >= 2 && coverage > 0.0 && coverage < 1.0);
    let w = ((coverage * m as f64).ceil() as usize).clamp(1, m);
    let mut best = 0;
    let mut width = f64::INFINITY;
    for i in 0..=(m - w) {
        let wi = sorted[i + w - 1] - sorted[i];
        if wi < width {
            width = wi;
            best = i;
        }
    }
    HdiInterval { lower: sorted[best], upper: sorted[best + w - 1], coverage }
}

/// Shortest interval `[x_i, x_j]` of `(x, w)` pairs sorted by `x` whose weight reaches
/// `coverage` times the total.
pub fn hdi_weighted(sorted: &[(f64, f64)], coverage: f64) -> HdiInterval {
    let total: f64 = sorted.iter().map(|p| p.1).sum();
    let need = coverage * total;
    let (mut best, mut width) = ((0, sorted.len() - 1), f64::INFINITY);
    let mut j = 0;
    let mut mass = 0.0;
    for i in 0..sorted.len() {
        while j < sorted.len() && mass < need {
            mass += sorted[j].1;
            j += 1;
        }
        if mass < need {
            break;
        }
        let wi = sorted[j - 1].0 - sorted[i].0;
        if wi < width {
            width = wi;
            best = (i, j - 1);
        }
        mass -= sorted[i].1;
    }
    HdiInterval { lower: sorted[best.0].0, upper: sorted[best.1].0, coverage }
}

/// Fraction of draws strictly inside `(delta1, delta2)`.
pub fn cpm(theta: &[f64], delta1: f64, delta2: f64) -> f64 {
    let inside = theta.iter().filter(|t| **t > delta1 && **t < delta2).count();
    inside as f64 / theta.len() as f64
}

/// Standardized Student-t proposal draws and a resampling offset. Shared by several
/// posteriors it gives common random numbers.
#[derive(Debug, Clone)]
pub struct ProposalStream {
    dim: usize,
    t: Vec<f64>,
    log_kernel: Vec<f64>,
    offset: f64,
}

impl ProposalStream {
    pub fn new(dim: usize, m: usize, rng: &mut ChaCha20Rng) -> Self {
        let chi = ChiSquared::new(PROPOSAL_DF).expect("positive degrees of freedom");
        let mut t = Vec::with_capacity(m * dim);
        let mut log_kernel = Vec::with_capacity(m);
        for _ in 0..m {
            let w: f64 = chi.sample(rng);
            let s = (w / PROPOSAL_DF).sqrt().recip();
            let mut r2 = 0.0;
            for _ in 0..dim {
                let z: f64 = StandardNormal.sample(rng);
                t.push(z * s);
                r2 += (z * s).powi(2);
            }
            log_kernel.push(-0.5 * (PROPOSAL_DF + dim as f64) * (r2 / PROPOSAL_DF).ln_1p());
        }
        ProposalStream { dim, t, log_kernel, offset: rng.random::<f64>() }
    }

    pub fn len(&self) -> usize {
        self.log_kernel.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_kernel.is_empty()
    }
}

/// Resampled posterior draws for one group, on the natural parameter scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDraws {
    pub family: ModelFamily,
    /// Row-major `m x d`.
    pub draws: Vec<f64>,
    pub dim: usize,
    pub ess: f64,
    pub proposal_scale: f64,
}

impl PosteriorDraws {
    pub fn len(&self) -> usize {
        self.draws.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn draw(&self, k: usize) -> &[f64] {
        &self.draws[k * self.dim..(k + 1) * self.dim]
    }
}

/// Proposal draws on the natural scale with importance weights summing to one.
#[derive(Debug, Clone)]
struct Weighted {
    points: Vec<f64>,
    w: Vec<f64>,
    ess: f64,
    scale: f64,
}

fn importance_weights(
    post: &LogPosterior<'_>,
    center: &[f64],
    cov: &DMatrix<f64>,
    scale: f64,
    stream: &ProposalStream,
) -> Result<Weighted> {
    let d = center.len();
    if stream.dim != d {
        return Err(SssdError::Domain(format!("proposal dimension {} for a {d}-parameter model", stream.dim)));
    }
    let chol = (cov * scale)
        .cholesky()
        .ok_or_else(|| SssdError::Curvature("proposal covariance is not positive definite".into()))?
        .l();
    let m = stream.len();
    let mut points = Vec::with_capacity(m * d);
    let mut logw = Vec::with_capacity(m);
    let mut x = vec![0.0; d];
    for k in 0..m {
        let t = &stream.t[k * d..(k + 1) * d];
        for r in 0..d {
            x[r] = center[r] + (0..=r).map(|c| chol[(r, c)] * t[c]).sum::<f64>();
        }
        let lp = post.value(&x);
        logw.push(if lp.is_nan() { f64::NEG_INFINITY } else { lp - stream.log_kernel[k] });
        points.extend(post.family.from_unconstrained(&x));
    }
    let top = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        return Err(SssdError::ProposalMismatch("no proposal draw has finite weight".into()));
    }
    let mut w: Vec<f64> = logw.iter().map(|l| (l - top).exp()).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
    let ess = 1.0 / w.iter().map(|x| x * x).sum::<f64>();
    Ok(Weighted { points, w, ess, scale })
}

/// Systematic resampling of `m` draws at the stream's offset.
fn resample(family: ModelFamily, dim: usize, weighted: &Weighted, offset: f64) -> PosteriorDraws {
    let m = weighted.w.len();
    let mut draws = Vec::with_capacity(m * dim);
    let mut cum = 0.0;
    let mut k = 0;
    for i in 0..m {
        let target = (offset + i as f64) / m as f64;
        while k + 1 < m && cum + weighted.w[k] <= target {
            cum += weighted.w[k];
            k += 1;
        }
        draws.extend_from_slice(&weighted.points[k * dim..(k + 1) * dim]);
    }
    PosteriorDraws { family, draws, dim, ess: weighted.ess, proposal_scale: weighted.scale }
}

/// One importance-resampling pass with a t proposal at `center` and scale `scale * cov`.
pub fn importance_resample(
    post: &LogPosterior<'_>,
    center: &[f64],
    cov: &DMatrix<f64>,
    scale: f64,
    stream: &ProposalStream,
) -> Result<PosteriorDraws> {
    let weighted = importance_weights(post, center, cov, scale, stream)?;
    Ok(resample(post.family, center.len(), &weighted, stream.offset))
}

/// Sampling-resampling posterior from the Laplace approximation, retrying with a wider
/// proposal when the effective sample size falls below `MIN_ESS_FRACTION * m`.
pub fn sir_from_stats(
    family: ModelFamily,
    prior: &[ComponentPrior],
    stats: SampleStats,
    stream: &ProposalStream,
) -> Result<PosteriorDraws> {
    let laplace = laplace_from_stats(family, prior, stats, None)?;
    sir_at(family, prior, stats, &laplace, stream)
}

fn sir_at(
    family: ModelFamily,
    prior: &[ComponentPrior],
    stats: SampleStats,
    laplace: &PosteriorApprox,
    stream: &ProposalStream,
) -> Result<PosteriorDraws> {
    let weighted = weighted_at(family, prior, stats, laplace, stream)?;
    Ok(resample(family, stream.dim, &weighted, stream.offset))
}

fn weighted_at(
    family: ModelFamily,
    prior: &[ComponentPrior],
    stats: SampleStats,
    laplace: &PosteriorApprox,
    stream: &ProposalStream,
) -> Result<Weighted> {
    let post = LogPosterior { family, prior, stats };
    let cov = laplace.covariance_matrix();
    let mut last = 0.0;
    for scale in PROPOSAL_SCALES {
        let out = importance_weights(&post, &laplace.mode, &cov, scale, stream)?;
        if out.ess >= MIN_ESS_FRACTION * stream.len() as f64 {
            return Ok(out);
        }
        last = out.ess;
    }
    Err(SssdError::ProposalMismatch(format!(
        "effective sample size {last:.1} of {} at proposal scale {}",
        stream.len(),
        PROPOSAL_SCALES[PROPOSAL_SCALES.len() - 1]
    )))
}

pub fn sir_posterior(
    family: ModelFamily,
    prior: &[ComponentPrior],
    sample: &[f64],
    m: usize,
    seed: u64,
) -> Result<PosteriorDraws> {
    if m < MIN_DRAWS {
        return Err(SssdError::config("m", format!("need at least {MIN_DRAWS} draws")));
    }
    if prior.len() != family.param_count() {
        return Err(SssdError::config("priors", "one component prior per parameter"));
    }
    let stats = SampleStats::from_sample(family, sample)?;
    let stream = ProposalStream::new(family.param_count(), m, &mut ChaCha20Rng::seed_from_u64(seed));
    sir_from_stats(family, prior, stats, &stream)
}

/// `theta` at paired draws of the two groups.
pub fn theta_draws(design: &DesignSpec, g1: &PosteriorDraws, g2: &PosteriorDraws) -> Vec<f64> {
    (0..g1.len().min(g2.len())).map(|k| design.theta(g1.draw(k), g2.draw(k))).filter(|t| !t.is_nan()).collect()
}

/// Sufficient statistics of `n` random observations from `eta`.
pub fn simulate_stats(family: ModelFamily, eta: &[f64], n: usize, rng: &mut ChaCha20Rng) -> SampleStats {
    let mut s = SampleStats { n: n as f64, sum: 0.0, sum_log: 0.0 };
    match family {
        ModelFamily::Gamma => {
            let g = Gamma::new(eta[0], 1.0 / eta[1]).expect("validated design");
            for _ in 0..n {
                let y: f64 = g.sample(rng);
                s.sum += y;
                s.sum_log += y.ln();
            }
        }
        ModelFamily::Bernoulli => {
            for _ in 0..n {
                if rng.random::<f64>() < eta[0] {
                    s.sum += 1.0;
                }
            }
        }
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleOptions {
    pub reps: usize,
    pub m: usize,
    pub seed: u64,
    /// Share one proposal stream across replications.
    #[serde(default)]
    pub common_proposal: bool,
}

impl OracleOptions {
    pub fn new(reps: usize, m: usize, seed: u64) -> Self {
        OracleOptions { reps, m, seed, common_proposal: false }
    }

    fn check(&self) -> Result<()> {
        if self.reps < 1 {
            return Err(SssdError::config("reps", "need at least one replication"));
        }
        if self.m < MIN_DRAWS {
            return Err(SssdError::config("m", format!("need at least {MIN_DRAWS} draws")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RepOutcome {
    pub hdi: HdiInterval,
    pub cpm: f64,
    pub ess: [f64; 2],
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn rep_stats(design: &DesignSpec, sizes: [usize; 2], seed: u64, rep: usize) -> [SampleStats; 2] {
    let eta = [&design.eta1, &design.eta2];
    [0, 1].map(|j| simulate_stats(design.family, eta[j], sizes[j], &mut stream_rng(seed, 4 * rep as u64 + j as u64)))
}

fn rep_streams(dim: usize, m: usize, seed: u64, rep: usize) -> [ProposalStream; 2] {
    [0u64, 1].map(|j| ProposalStream::new(dim, m, &mut stream_rng(seed, 4 * rep as u64 + 2 + j)))
}

fn shared_streams(dim: usize, m: usize, seed: u64) -> [ProposalStream; 2] {
    [0u64, 1].map(|j| ProposalStream::new(dim, m, &mut stream_rng(seed, u64::MAX - j)))
}

fn rep_outcome(
    design: &DesignSpec,
    priors: &PriorSpec,
    stats: &[SampleStats; 2],
    streams: [&ProposalStream; 2],
    alpha: f64,
    interval: (f64, f64),
) -> Result<RepOutcome> {
    let g1 = sir_from_stats(design.family, &priors.group1, stats[0], streams[0])?;
    let g2 = sir_from_stats(design.family, &priors.group2, stats[1], streams[1])?;
    let mut theta = theta_draws(design, &g1, &g2);
    if theta.len() < MIN_DRAWS {
        return Err(SssdError::Characteristic(format!(
            "only {} of {} posterior draws give a defined theta",
            theta.len(),
            g1.len()
        )));
    }
    theta.sort_by(f64::total_cmp);
    Ok(RepOutcome {
        hdi: hdi_empirical(&theta, 1.0 - alpha),
        cpm: cpm(&theta, interval.0, interval.1),
        ess: [g1.ess, g2.ess],
    })
}

/// HDI length of `theta` straight from the paired importance weights, with no resampling.
/// Under a shared stream it varies smoothly with the data.
fn weighted_length(
    design: &DesignSpec,
    priors: &PriorSpec,
    stats: &[SampleStats; 2],
    streams: [&ProposalStream; 2],
    alpha: f64,
) -> Result<f64> {
    let family = design.family;
    let w1 = weighted_at(
        family,
        &priors.group1,
        stats[0],
        &laplace_from_stats(family, &priors.group1, stats[0], None)?,
        streams[0],
    )?;
    let w2 = weighted_at(
        family,
        &priors.group2,
        stats[1],
        &laplace_from_stats(family, &priors.group2, stats[1], None)?,
        streams[1],
    )?;
    let d = design.dim();
    let mut pairs: Vec<(f64, f64)> = (0..w1.w.len().min(w2.w.len()))
        .map(|k| (design.theta(&w1.points[k * d..(k + 1) * d], &w2.points[k * d..(k + 1) * d]), w1.w[k] * w2.w[k]))
        .filter(|p| !p.0.is_nan())
        .collect();
    if pairs.len() < MIN_DRAWS {
        return Err(SssdError::Characteristic(format!("only {} weighted draws give a defined theta", pairs.len())));
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(hdi_weighted(&pairs, 1.0 - alpha).length())
}

/// One simulated dataset per replication at group sizes `(n1, n2)`, with the posterior of
/// `theta` summarized by its HDI and its mass in `(delta1, delta2)`.
pub fn simulate_reps_sizes(
    design: &DesignSpec,
    priors: &PriorSpec,
    n1: usize,
    n2: usize,
    alpha: f64,
    interval: (f64, f64),
    opts: &OracleOptions,
) -> Result<Vec<RepOutcome>> {
    opts.check()?;
    let d = design.dim();
    let shared = opts.common_proposal.then(|| shared_streams(d, opts.m, opts.seed));
    let outcomes = map_indexed(opts.reps, |r| {
        let stats = rep_stats(design, [n1, n2], opts.seed, r);
        match &shared {
            Some(s) => rep_outcome(design, priors, &stats, [&s[0], &s[1]], alpha, interval),
            None => {
                let own = rep_streams(d, opts.m, opts.seed, r);
                rep_outcome(design, priors, &stats, [&own[0], &own[1]], alpha, interval)
            }
        }
    });
    outcomes.into_iter().collect()
}

/// Mean and standard deviation of the HDI length over replications.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthMoments {
    pub mean: f64,
    /// From differences within pairs of datasets that share a proposal stream.
    pub sd: f64,
    pub reps: usize,
}

/// HDI length moments at group sizes `(n1, n2)`, with lengths taken from the importance
/// weights directly. Replications `2k` and `2k + 1` share a proposal stream, so the
/// Monte Carlo error largely cancels in their difference, while fresh streams per pair keep
/// the error of any single stream from biasing the spread.
pub fn simulate_length_moments(
    design: &DesignSpec,
    priors: &PriorSpec,
    n1: usize,
    n2: usize,
    alpha: f64,
    opts: &OracleOptions,
) -> Result<LengthMoments> {
    opts.check()?;
    if opts.reps < 2 {
        return Err(SssdError::config("reps", "need at least two replications"));
    }
    let d = design.dim();
    let pairs = map_indexed(opts.reps / 2, |k| -> Result<[f64; 2]> {
        let streams = rep_streams(d, opts.m, opts.seed, 2 * k);
        let mut out = [0.0; 2];
        for (i, slot) in out.iter_mut().enumerate() {
            let stats = rep_stats(design, [n1, n2], opts.seed, 2 * k + i);
            *slot = weighted_length(design, priors, &stats, [&streams[0], &streams[1]], alpha)?;
        }
        Ok(out)
    });
    let pairs: Vec<[f64; 2]> = pairs.into_iter().collect::<Result<_>>()?;
    let k = pairs.len() as f64;
    let mean = pairs.iter().map(|p| p[0] + p[1]).sum::<f64>() / (2.0 * k);
    let var = pairs.iter().map(|p| (p[0] - p[1]).powi(2)).sum::<f64>() / (2.0 * k);
    Ok(LengthMoments { mean, sd: var.sqrt(), reps: 2 * pairs.len() })
}

pub fn simulate_reps(
    design: &DesignSpec,
    priors: &PriorSpec,
    n: f64,
    alpha: f64,
    interval: (f64, f64),
    opts: &OracleOptions,
) -> Result<Vec<RepOutcome>> {
    let (n1, n2) = group_sizes(n, design.q)?;
    simulate_reps_sizes(design, priors, n1, n2, alpha, interval, opts)
}

/// A Monte Carlo proportion with its binomial standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proportion {
    pub estimate: f64,
    pub se: f64,
    pub reps: usize,
    pub min_ess: f64,
}

impl Proportion {
    fn from_hits(hits: usize, outcomes: &[RepOutcome]) -> Self {
        let reps = outcomes.len();
        let p = hits as f64 / reps as f64;
        Proportion {
            estimate: p,
            se: (p * (1.0 - p) / reps as f64).sqrt(),
            reps,
            min_ess: outcomes.iter().flat_map(|o| o.ess).fold(f64::INFINITY, f64::min),
        }
    }

    /// `|estimate - target|` in units of the binomial SE at `target`.
    pub fn z_distance(&self, target: f64) -> f64 {
        let se = (target * (1.0 - target) / self.reps as f64).sqrt();
        (self.estimate - target).abs() / se
    }
}

/// Proportion of replications whose `100(1-alpha)%` HDI has length at most `l`.
pub fn simulate_length_criterion(
    design: &DesignSpec,
    priors: &PriorSpec,
    n: f64,
    l: f64,
    alpha: f64,
    opts: &OracleOptions,
) -> Result<Proportion> {
    let out = simulate_reps(design, priors, n, alpha, (f64::NEG_INFINITY, f64::INFINITY), opts)?;
    let hits = out.iter().filter(|o| o.hdi.length() <= l).count();
    Ok(Proportion::from_hits(hits, &out))
}

/// Proportion of replications with posterior mass at least `gamma` inside the interval.
pub fn simulate_power(
    design: &DesignSpec,
    priors: &PriorSpec,
    test: &TestSpec,
    n: f64,
    opts: &OracleOptions,
) -> Result<Proportion> {
    let out = simulate_reps(design, priors, n, 1.0 - test.gamma, (test.delta1, test.delta2), opts)?;
    let hits = out.iter().filter(|o| o.cpm >= test.gamma).count();
    Ok(Proportion::from_hits(hits, &out))
}
