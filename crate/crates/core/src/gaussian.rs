//! Gaussian log-densities: diagonal (differentiable, on the graph) and
//! full-covariance (plain values, via a Cholesky factor).

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::standard_normals;

pub const LOG_2PI: f64 = 1.837_877_066_409_345_3;

/// Row-wise `log N(z; 0, I)`: (n, l) -> (n).
pub fn std_normal_log_pdf_rows(z: Var<'_>) -> Result<Var<'_>> {
    let l = z.shape()[1] as f64;
    Ok(z.square().sum_axis(1)?.scale(-0.5).offset(-0.5 * l * LOG_2PI))
}

/// Row-wise `log N(z; mean, diag(exp(logvar)))`, all inputs (n, l) -> (n).
pub fn diag_normal_log_pdf_rows<'g>(mean: Var<'g>, logvar: Var<'g>, z: Var<'g>) -> Result<Var<'g>> {
    let l = z.shape()[1] as f64;
    let sq = z.sub(mean)?.square();
    let scaled = sq.mul(logvar.neg().exp())?;
    Ok(scaled
        .add(logvar)?
        .sum_axis(1)?
        .scale(-0.5)
        .offset(-0.5 * l * LOG_2PI))
}

pub fn diag_normal_log_pdf(mean: &[f64], logvar: &[f64], z: &[f64]) -> f64 {
    let quad: f64 = mean
        .iter()
        .zip(logvar)
        .zip(z)
        .map(|((m, lv), zi)| (zi - m).powi(2) * (-lv).exp() + lv)
        .sum();
    -0.5 * (quad + mean.len() as f64 * LOG_2PI)
}

pub fn std_normal_log_pdf(z: &[f64]) -> f64 {
    -0.5 * (z.iter().map(|v| v * v).sum::<f64>() + z.len() as f64 * LOG_2PI)
}

/// `KL(N(mean, diag(exp(logvar))) || N(0, I))` in closed form.
pub fn kl_diag_to_std_normal(mean: &[f64], logvar: &[f64]) -> f64 {
    0.5 * mean
        .iter()
        .zip(logvar)
        .map(|(m, lv)| m * m + lv.exp() - lv - 1.0)
        .sum::<f64>()
}

/// Full-covariance Gaussian held as mean and lower Cholesky factor.
#[derive(Clone, Debug, PartialEq)]
pub struct FullGaussian {
    mean: DVector<f64>,
    chol: DMatrix<f64>,
}

impl FullGaussian {
    pub fn from_cov(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::shape(
                "FullGaussian::from_cov",
                &[&[mean.len()], &[cov.nrows(), cov.ncols()]],
            ));
        }
        let chol = cov
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite(format!("{}x{} covariance", mean.len(), mean.len())))?
            .l();
        Ok(FullGaussian { mean, chol })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cholesky(&self) -> &DMatrix<f64> {
        &self.chol
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        &self.chol * self.chol.transpose()
    }

    pub fn log_pdf(&self, z: &[f64]) -> f64 {
        let diff = DVector::from_column_slice(z) - &self.mean;
        let solved = self
            .chol
            .solve_lower_triangular(&diff)
            .expect("Cholesky factor has positive diagonal");
        let log_det: f64 = self.chol.diagonal().iter().map(|d| d.ln()).sum();
        -0.5 * (solved.norm_squared() + self.dim() as f64 * LOG_2PI) - log_det
    }

    /// `n` draws `mean + chol * xi`, row-major (n, dim), with their log-densities.
    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> (Tensor, Vec<f64>) {
        let d = self.dim();
        let mut z = Vec::with_capacity(n * d);
        let mut log_pdf = Vec::with_capacity(n);
        let log_det: f64 = self.chol.diagonal().iter().map(|v| v.ln()).sum();
        for _ in 0..n {
            let xi = standard_normals(rng, d);
            for r in 0..d {
                let mut v = self.mean[r];
                for (c, x) in xi.iter().enumerate().take(r + 1) {
                    v += self.chol[(r, c)] * x;
                }
                z.push(v);
            }
            let sq: f64 = xi.iter().map(|x| x * x).sum();
            log_pdf.push(-0.5 * (sq + d as f64 * LOG_2PI) - log_det);
        }
        (Tensor::matrix(n, d, z).expect("sample shape"), log_pdf)
    }
}

/// Direct `-0.5 (d log 2pi + log det S + r^T S^-1 r)` with an explicit inverse.
/// Slow; kept for cross-checking [`FullGaussian::log_pdf`].
pub fn dense_log_pdf(mean: &[f64], cov: &DMatrix<f64>, z: &[f64]) -> Option<f64> {
    let r = DVector::from_column_slice(z) - DVector::from_column_slice(mean);
    let inv = cov.clone().try_inverse()?;
    let det = cov.determinant();
    if det <= 0.0 {
        return None;
    }
    let quad = (r.transpose() * inv * &r)[(0, 0)];
    Some(-0.5 * (mean.len() as f64 * (2.0 * PI).ln() + det.ln() + quad))
}
