//! Self-normalized importance weights and moment-matched Gaussian proposals.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::autodiff::{log_sum_exp, Tensor};
use crate::error::{Error, Result};
use crate::gaussian::FullGaussian;

/// Log importance weights `log p(x, z_k) - log q(z_k)` for one datapoint and
/// their self-normalized form.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightSet {
    log_w: Vec<f64>,
    normalized: Vec<f64>,
    log_norm: f64,
    ess: f64,
}

impl WeightSet {
    /// Weights from per-particle log-joint and log-proposal values.
    ///
    /// `-inf` log-joints are allowed (zero weight). Fails when there are no
    /// particles, when every weight is zero, or on NaN / `+inf`.
    pub fn compute(log_joint: &[f64], log_proposal: &[f64]) -> Result<Self> {
        if log_joint.len() != log_proposal.len() {
            return Err(Error::shape(
                "WeightSet::compute",
                &[&[log_joint.len()], &[log_proposal.len()]],
            ));
        }
        let log_w: Vec<f64> = log_joint
            .iter()
            .zip(log_proposal)
            .map(|(a, b)| a - b)
            .collect();
        Self::from_log_weights(log_w)
    }

    pub fn from_log_weights(log_w: Vec<f64>) -> Result<Self> {
        if log_w.is_empty() {
            return Err(Error::DegenerateWeights("no particles".into()));
        }
        if log_w.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::DegenerateWeights("NaN or +inf log-weight".into()));
        }
        let log_norm = log_sum_exp(&log_w);
        if log_norm == f64::NEG_INFINITY {
            return Err(Error::DegenerateWeights("all log-weights are -inf".into()));
        }
        let normalized: Vec<f64> = log_w.iter().map(|v| (v - log_norm).exp()).collect();
        let ess = 1.0 / normalized.iter().map(|w| w * w).sum::<f64>();
        Ok(WeightSet {
            log_w,
            normalized,
            log_norm,
            ess,
        })
    }

    pub fn len(&self) -> usize {
        self.log_w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_w.is_empty()
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_w
    }

    pub fn normalized(&self) -> &[f64] {
        &self.normalized
    }

    /// `1 / sum(w_k^2)` over normalized weights; in `[1, K]`.
    pub fn ess(&self) -> f64 {
        self.ess
    }

    /// `log((1/K) sum_k w_k)`: the K-particle importance-weighted bound.
    pub fn log_mean_weight(&self) -> f64 {
        self.log_norm - (self.log_w.len() as f64).ln()
    }
}

/// Full-covariance Gaussian fitted to weighted particles (weighted mean and
/// weighted second central moment, plus `epsilon` on the diagonal).
#[derive(Clone, Debug, PartialEq)]
pub struct MomentProposal {
    gaussian: FullGaussian,
    epsilon: f64,
}

/// How often the diagonal jitter is multiplied by 10 before giving up.
const MAX_JITTER_ESCALATIONS: usize = 3;

impl MomentProposal {
    /// Fits to `particles` (K, L) with self-normalized `weights`.
    pub fn fit(particles: &Tensor, weights: &WeightSet, epsilon: f64) -> Result<Self> {
        let (k, l) = (particles.rows(), particles.cols());
        if k < 2 {
            return Err(Error::Config(format!("moment matching needs K >= 2 particles, got {k}")));
        }
        if weights.len() != k || particles.rank() != 2 {
            return Err(Error::shape(
                "MomentProposal::fit",
                &[particles.shape(), &[weights.len()]],
            ));
        }
        let alpha = weights.normalized();
        let mut mean = DVector::<f64>::zeros(l);
        for (i, a) in alpha.iter().enumerate() {
            for (j, z) in particles.row(i).iter().enumerate() {
                mean[j] += a * z;
            }
        }
        let mut cov = DMatrix::<f64>::zeros(l, l);
        for (i, a) in alpha.iter().enumerate() {
            let z = particles.row(i);
            for r in 0..l {
                let dr = z[r] - mean[r];
                for c in 0..=r {
                    cov[(r, c)] += a * dr * (z[c] - mean[c]);
                }
            }
        }
        for r in 0..l {
            for c in 0..r {
                cov[(c, r)] = cov[(r, c)];
            }
        }

        let mut eps = epsilon;
        for attempt in 0..=MAX_JITTER_ESCALATIONS {
            let jittered = &cov + DMatrix::identity(l, l) * eps;
            match FullGaussian::from_cov(mean.clone(), jittered) {
                Ok(gaussian) => return Ok(MomentProposal { gaussian, epsilon: eps }),
                Err(_) if attempt < MAX_JITTER_ESCALATIONS => eps *= 10.0,
                Err(e) => return Err(e),
            }
        }
        unreachable!("loop returns on the last attempt")
    }

    /// A proposal that is exactly `gaussian` (no fitting, no jitter).
    pub fn from_gaussian(gaussian: FullGaussian) -> Self {
        MomentProposal { gaussian, epsilon: 0.0 }
    }

    pub fn mean(&self) -> &DVector<f64> {
        self.gaussian.mean()
    }

    /// Lower Cholesky factor of `Sigma + epsilon I`.
    pub fn cholesky(&self) -> &DMatrix<f64> {
        self.gaussian.cholesky()
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        self.gaussian.covariance()
    }

    /// Jitter actually used (after any escalation).
    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn log_pdf(&self, z: &[f64]) -> f64 {
        self.gaussian.log_pdf(z)
    }

    /// `k` draws (K, L) and their log-densities.
    pub fn sample(&self, k: usize, rng: &mut impl Rng) -> (Tensor, Vec<f64>) {
        self.gaussian.sample(k, rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_particle() {
        let w = WeightSet::compute(&[-3.0], &[1.5]).unwrap();
        assert_eq!(w.normalized(), &[1.0]);
        assert_eq!(w.ess(), 1.0);
    }

    #[test]
    fn uniform_weights() {
        let w = WeightSet::from_log_weights(vec![0.0; 4]).unwrap();
        assert_eq!(w.normalized(), &[0.25; 4]);
        assert!((w.ess() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn huge_spread_no_overflow() {
        let w = WeightSet::from_log_weights(vec![1000.0, 0.0]).unwrap();
        assert_eq!(w.normalized()[0], 1.0);
        // exp(-1000) underflows to exactly 0 in f64
        assert_eq!(w.normalized()[1], 0.0);
        assert!(w.log_mean_weight().is_finite());
    }

    #[test]
    fn degenerate_inputs() {
        assert!(matches!(
            WeightSet::from_log_weights(vec![]),
            Err(Error::DegenerateWeights(_))
        ));
        assert!(matches!(
            WeightSet::compute(&[f64::NEG_INFINITY; 3], &[0.0; 3]),
            Err(Error::DegenerateWeights(_))
        ));
        let w = WeightSet::compute(&[f64::NEG_INFINITY, 0.0], &[0.0, 0.0]).unwrap();
        assert_eq!(w.normalized(), &[0.0, 1.0]);
    }

    #[test]
    fn one_hot_ess() {
        let w = WeightSet::from_log_weights(vec![0.0, f64::NEG_INFINITY, f64::NEG_INFINITY]).unwrap();
        assert_eq!(w.ess(), 1.0);
    }

    #[test]
    fn identical_particles_give_jitter_covariance() {
        let z = Tensor::matrix(3, 2, vec![0.5, -1.0, 0.5, -1.0, 0.5, -1.0]).unwrap();
        let w = WeightSet::from_log_weights(vec![0.0, -1.0, 2.0]).unwrap();
        let p = MomentProposal::fit(&z, &w, 1e-6).unwrap();
        assert!((p.mean()[0] - 0.5).abs() < 1e-15 && (p.mean()[1] + 1.0).abs() < 1e-15);
        let cov = p.covariance();
        assert!((cov[(0, 0)] - 1e-6).abs() < 1e-18);
        assert!((cov[(1, 1)] - 1e-6).abs() < 1e-18);
        assert!(cov[(0, 1)].abs() < 1e-18);
    }

    #[test]
    fn two_point_variance() {
        let z = Tensor::matrix(2, 1, vec![1.0, -1.0]).unwrap();
        let w = WeightSet::from_log_weights(vec![0.0, 0.0]).unwrap();
        let p = MomentProposal::fit(&z, &w, 0.0).unwrap();
        assert_eq!(p.mean()[0], 0.0);
        assert!((p.covariance()[(0, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rank_deficient_cloud_escalates_jitter() {
        // two particles in 2-D span a line: singular covariance
        let z = Tensor::matrix(2, 2, vec![1.0, 1.0, -1.0, -1.0]).unwrap();
        let w = WeightSet::from_log_weights(vec![0.0, 0.0]).unwrap();
        let p = MomentProposal::fit(&z, &w, 0.0);
        assert!(matches!(p, Err(Error::NotPositiveDefinite(_))));
        let p = MomentProposal::fit(&z, &w, 1e-9).unwrap();
        assert!(p.epsilon() >= 1e-9);
        assert!(p.cholesky().diagonal().iter().all(|d| *d > 0.0));
    }

    #[test]
    fn needs_two_particles() {
        let z = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        let w = WeightSet::from_log_weights(vec![0.0]).unwrap();
        assert!(MomentProposal::fit(&z, &w, 1e-6).is_err());
    }

    #[test]
    fn sampling_is_reproducible() {
        let z = Tensor::matrix(3, 2, vec![0.0, 1.0, 1.0, 0.0, 2.0, 2.0]).unwrap();
        let w = WeightSet::from_log_weights(vec![0.0, 0.5, -0.5]).unwrap();
        let p = MomentProposal::fit(&z, &w, 1e-6).unwrap();
        let a = p.sample(10, &mut ChaCha8Rng::seed_from_u64(1));
        let b = p.sample(10, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
    }
}
