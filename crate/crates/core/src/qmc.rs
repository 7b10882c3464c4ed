//! Digitally shifted Sobol' points and quasi-Monte Carlo draws of limiting MLEs.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SssdError};
use crate::model::DesignSpec;
use crate::special::norm_quantile;

const BITS: usize = 32;

/// Coordinates are clamped to `[EDGE, 1 - EDGE]` before the normal quantile.
pub const EDGE: f64 = 1.0 / (1u64 << 43) as f64;

/// Joe-Kuo primitive polynomials and initial direction numbers for dimensions 2..=10:
/// `(degree s, coefficient bits a, m_1..m_s)`. Dimension 1 is van der Corput.
const JOE_KUO: [(u32, u32, &[u32]); 9] = [
    (1, 0, &[1]),
    (2, 1, &[1, 3]),
    (3, 1, &[1, 3, 1]),
    (3, 2, &[1, 1, 1]),
    (4, 1, &[1, 1, 3, 3]),
    (4, 4, &[1, 3, 5, 13]),
    (5, 2, &[1, 1, 5, 5, 17]),
    (5, 4, &[1, 1, 5, 5, 5]),
    (5, 7, &[1, 1, 7, 11, 19]),
];

pub const MAX_DIMENSION: usize = JOE_KUO.len() + 1;

fn direction_numbers(dim: usize) -> [u32; BITS] {
    let mut v = [0u32; BITS];
    if dim == 0 {
        for (k, vk) in v.iter_mut().enumerate() {
            *vk = 1u32 << (BITS - 1 - k);
        }
        return v;
    }
    let (s, a, m) = JOE_KUO[dim - 1];
    let s = s as usize;
    for k in 0..s.min(BITS) {
        v[k] = m[k] << (BITS - 1 - k);
    }
    for k in s..BITS {
        let mut x = v[k - s] ^ (v[k - s] >> s);
        for i in 1..s {
            if (a >> (s - 1 - i)) & 1 == 1 {
                x ^= v[k - i];
            }
        }
        v[k] = x;
    }
    v
}

/// A randomized Sobol' sequence. Points are a pure function of `(dimension, seed, index)`.
#[derive(Debug, Clone)]
pub struct SobolStream {
    directions: Vec<[u32; BITS]>,
    shift: Vec<u32>,
}

impl SobolStream {
    /// Digitally shifted stream; the XOR masks come from ChaCha20 seeded with `seed`.
    pub fn new(dimension: usize, seed: u64) -> Result<Self> {
        let mut s = Self::unshifted(dimension)?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        for m in s.shift.iter_mut() {
            *m = rng.next_u32();
        }
        Ok(s)
    }

    pub fn unshifted(dimension: usize) -> Result<Self> {
        if dimension == 0 {
            return Err(SssdError::config("dimension", "must be at least 1"));
        }
        if dimension > MAX_DIMENSION {
            return Err(SssdError::Capability(format!(
                "Sobol dimension {dimension} exceeds the direction-number table ({MAX_DIMENSION})"
            )));
        }
        Ok(SobolStream { directions: (0..dimension).map(direction_numbers).collect(), shift: vec![0; dimension] })
    }

    pub fn dimension(&self) -> usize {
        self.directions.len()
    }

    /// Point `index` (0-based, natural order) in `[0, 1)^dimension`.
    pub fn point(&self, index: u32) -> Vec<f64> {
        self.directions
            .iter()
            .zip(&self.shift)
            .map(|(v, &mask)| {
                let mut x = 0u32;
                let mut i = index;
                let mut k = 0;
                while i != 0 {
                    if i & 1 == 1 {
                        x ^= v[k];
                    }
                    i >>= 1;
                    k += 1;
                }
                (x ^ mask) as f64 / 4294967296.0
            })
            .collect()
    }

    pub fn points(&self, count: usize) -> Vec<Vec<f64>> {
        (0..count as u32).map(|i| self.point(i)).collect()
    }
}

/// The first `count` points of the digitally shifted stream seeded by `seed`.
pub fn sobol_points(dimension: usize, count: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if count == 0 {
        return Err(SssdError::config("count", "must be at least 1"));
    }
    Ok(SobolStream::new(dimension, seed)?.points(count))
}

/// Standard normal scores of a unit-cube point, clamped away from 0 and 1.
pub fn normal_scores(u: &[f64]) -> Vec<f64> {
    u.iter().map(|&x| norm_quantile(x.clamp(EDGE, 1.0 - EDGE))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MleLimitDraw {
    pub eta1_hat: Vec<f64>,
    pub eta2_hat: Vec<f64>,
    pub source_point: u32,
}

/// Draws from the joint limiting distribution of the two MLEs on the unconstrained scale.
///
/// Group `j` is `T(eta_j0) + L_j z_j / sqrt(n_j)` where `L_j L_j' = J_T I(eta_j0)^-1 J_T'`
/// and `n_2 = q n`.
#[derive(Debug, Clone)]
pub struct MleLimitSampler {
    design: DesignSpec,
    t0: [Vec<f64>; 2],
    chol: [DMatrix<f64>; 2],
}

impl MleLimitSampler {
    pub fn new(design: &DesignSpec) -> Result<Self> {
        let fam = design.family;
        let mut chol = Vec::with_capacity(2);
        for eta in [&design.eta1, &design.eta2] {
            let inv = fam.inverse_fisher_information(eta)?;
            let jac = fam.transform_derivative(eta);
            let d = jac.len();
            let cov = DMatrix::from_fn(d, d, |r, c| jac[r] * inv[(r, c)] * jac[c]);
            let l = cov
                .cholesky()
                .ok_or_else(|| SssdError::Degenerate(format!("transformed MLE covariance at {eta:?} is singular")))?
                .l();
            chol.push(l);
        }
        let c2 = chol.pop().expect("two groups");
        let c1 = chol.pop().expect("two groups");
        Ok(MleLimitSampler {
            t0: [fam.to_unconstrained(&design.eta1), fam.to_unconstrained(&design.eta2)],
            chol: [c1, c2],
            design: design.clone(),
        })
    }

    pub fn design(&self) -> &DesignSpec {
        &self.design
    }

    /// Transformed-scale draw for group `j` (0 or 1) at its own sample size `nj`.
    pub fn transformed(&self, group: usize, nj: f64, z: &[f64]) -> Vec<f64> {
        let scale = nj.sqrt().recip();
        let l = &self.chol[group];
        let t0 = &self.t0[group];
        (0..t0.len()).map(|r| t0[r] + scale * (0..=r).map(|c| l[(r, c)] * z[c]).sum::<f64>()).collect()
    }

    /// Draw from normal scores `z` of length `2d` with group sizes `n` and `q n`.
    pub fn from_scores(&self, n: f64, z: &[f64], source_point: u32) -> MleLimitDraw {
        self.from_scores_sizes(n, self.design.q * n, z, source_point)
    }

    /// As [`Self::from_scores`] with explicit group sizes.
    pub fn from_scores_sizes(&self, n1: f64, n2: f64, z: &[f64], source_point: u32) -> MleLimitDraw {
        let d = self.design.dim();
        let fam = self.design.family;
        MleLimitDraw {
            eta1_hat: fam.from_unconstrained(&self.transformed(0, n1, &z[..d])),
            eta2_hat: fam.from_unconstrained(&self.transformed(1, n2, &z[d..2 * d])),
            source_point,
        }
    }

    pub fn draw(&self, n: f64, u: &[f64], source_point: u32) -> Result<MleLimitDraw> {
        check_draw_inputs(self.design.dim(), n, u)?;
        Ok(self.from_scores(n, &normal_scores(u), source_point))
    }
}

fn check_draw_inputs(d: usize, n: f64, u: &[f64]) -> Result<()> {
    if !(n > 0.0) {
        return Err(SssdError::Domain(format!("sample size {n} must be positive")));
    }
    if u.len() != 2 * d {
        return Err(SssdError::Domain(format!("point has dimension {}, expected {}", u.len(), 2 * d)));
    }
    Ok(())
}

/// One draw of `(eta1_hat, eta2_hat)` at sample size `n` from unit-cube point `u`.
pub fn mle_limit_draw(design: &DesignSpec, n: f64, u: &[f64]) -> Result<MleLimitDraw> {
    MleLimitSampler::new(design)?.draw(n, u, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Characteristic, Comparison, ModelFamily};

    fn gamma_design() -> DesignSpec {
        DesignSpec {
            family: ModelFamily::Gamma,
            eta1: vec![2.11, 0.69],
            eta2: vec![2.43, 0.79],
            characteristic: Characteristic::TailProbability { threshold: 4.29 },
            comparison: Comparison::LogRatio,
            q: 1.0,
        }
    }

    #[test]
    fn van_der_corput_prefix() {
        let s = SobolStream::unshifted(1).unwrap();
        let mut xs: Vec<f64> = s.points(4).into_iter().map(|p| p[0]).collect();
        xs.sort_by(f64::total_cmp);
        assert_eq!(xs, vec![0.0, 0.25, 0.5, 0.75]);
    }

    #[test]
    fn every_coordinate_is_stratified() {
        let s = SobolStream::unshifted(MAX_DIMENSION).unwrap();
        let pts = s.points(1 << 10);
        for d in 0..MAX_DIMENSION {
            let mut hit = vec![false; 1 << 10];
            for p in &pts {
                let cell = (p[d] * 1024.0) as usize;
                assert!(!hit[cell], "dimension {d} cell {cell} hit twice");
                hit[cell] = true;
            }
        }
    }

    #[test]
    fn shifted_points_in_range_and_centered() {
        for seed in [0u64, 7, 12345] {
            let pts = sobol_points(2, 1024, seed).unwrap();
            assert!(pts.iter().flatten().all(|x| (0.0..1.0).contains(x)));
            let m = sobol_points(1, 1024, seed).unwrap().iter().map(|p| p[0]).sum::<f64>() / 1024.0;
            assert!((m - 0.5).abs() < 0.01);
        }
    }

    #[test]
    fn dimension_limits() {
        assert!(matches!(SobolStream::new(MAX_DIMENSION + 1, 1), Err(SssdError::Capability(_))));
        assert!(SobolStream::new(0, 1).is_err());
    }

    #[test]
    fn center_point_returns_design_values() {
        let d = gamma_design();
        let draw = mle_limit_draw(&d, 37.0, &[0.5; 4]).unwrap();
        for (a, b) in draw.eta1_hat.iter().zip(&d.eta1) {
            assert!((a - b).abs() < 1e-15);
        }
        for (a, b) in draw.eta2_hat.iter().zip(&d.eta2) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn two_sigma_shape_offset() {
        let d = gamma_design();
        let draw = mle_limit_draw(&d, 100.0, &[0.9772498680518208, 0.5, 0.5, 0.5]).unwrap();
        // Sigma_1[0,0] = inv(I)[0,0] / a^2 = 1 / (a (a psi1(a) - 1)), computed independently
        let a = 2.11f64;
        let psi1: f64 = (0..200_000).map(|k| 1.0 / (a + k as f64).powi(2)).sum::<f64>() + 1.0 / (a + 200_000.0);
        let s11 = 1.0 / (a * (a * psi1 - 1.0));
        let want = a.ln() + 2.0 * (s11 / 100.0).sqrt();
        assert!((draw.eta1_hat[0].ln() - want).abs() < 1e-6);
    }
}
