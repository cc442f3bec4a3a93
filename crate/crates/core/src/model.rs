//! Generative model p(z) p_theta(x|z), recognition network r_eta(z|x), and
//! the linear-Gaussian model used as an analytic oracle.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::autodiff::{Gradients, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::gaussian::{self, LOG_2PI};
use crate::rng::standard_normals;

/// Named parameter tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    /// Name of the first tensor holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.iter().find(|(_, t)| !t.all_finite()).map(|(k, _)| k)
    }

    /// Registers every tensor as a graph leaf.
    pub fn attach<'g>(&self, graph: &'g Graph, trainable: bool) -> ParamVars<'g> {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    graph.param(v.clone())
                } else {
                    graph.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        ParamVars { vars }
    }
}

/// A [`ParamSet`] living on a graph.
pub struct ParamVars<'g> {
    vars: BTreeMap<String, Var<'g>>,
}

impl<'g> ParamVars<'g> {
    pub fn get(&self, name: &str) -> Result<Var<'g>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    /// Gradient for each parameter (zeros where nothing flowed).
    pub fn gradients(&self, grads: &mut Gradients) -> ParamSet {
        let mut out = ParamSet::new();
        for (k, v) in &self.vars {
            out.insert(k.clone(), grads.take(*v));
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderKind {
    /// Two tanh layers, sigmoid-Bernoulli output.
    Bernoulli,
    /// x = A z + noise, noise ~ N(0, sigma^2 I).
    LinearGaussian,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderKind {
    /// Two tanh layers, linear mean and log-variance heads.
    Mlp,
    /// mean = x W + b, input-independent log-variance.
    Linear,
}

impl fmt::Display for DecoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecoderKind::Bernoulli => "bernoulli",
            DecoderKind::LinearGaussian => "linear-gaussian",
        })
    }
}

impl FromStr for DecoderKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bernoulli" => Ok(DecoderKind::Bernoulli),
            "linear-gaussian" => Ok(DecoderKind::LinearGaussian),
            _ => Err(Error::Config(format!("unknown decoder kind {s:?}"))),
        }
    }
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncoderKind::Mlp => "mlp",
            EncoderKind::Linear => "linear",
        })
    }
}

impl FromStr for EncoderKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(EncoderKind::Mlp),
            "linear" => Ok(EncoderKind::Linear),
            _ => Err(Error::Config(format!("unknown encoder kind {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub data_dim: usize,
    pub latent_dim: usize,
    pub hidden: usize,
    pub decoder: DecoderKind,
    pub encoder: EncoderKind,
}

fn uniform_weight(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Tensor::matrix(fan_in, fan_out, data).expect("weight shape")
}

fn check_finite(var: Var<'_>, what: &str) -> Result<()> {
    if var.with_value(Tensor::all_finite) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

impl Architecture {
    /// Fresh parameters: weights uniform in +-1/sqrt(fan_in), biases zero.
    pub fn init(&self, rng: &mut impl Rng) -> (ParamSet, ParamSet) {
        let (d, l, h) = (self.data_dim, self.latent_dim, self.hidden);
        let mut theta = ParamSet::new();
        match self.decoder {
            DecoderKind::Bernoulli => {
                theta.insert("decoder.W1", uniform_weight(rng, l, h));
                theta.insert("decoder.b1", Tensor::zeros(&[h]));
                theta.insert("decoder.W2", uniform_weight(rng, h, h));
                theta.insert("decoder.b2", Tensor::zeros(&[h]));
                theta.insert("decoder.Wout", uniform_weight(rng, h, d));
                theta.insert("decoder.bout", Tensor::zeros(&[d]));
            }
            DecoderKind::LinearGaussian => {
                theta.insert("decoder.loading", uniform_weight(rng, l, d));
                theta.insert("decoder.log_noise_var", Tensor::zeros(&[1]));
            }
        }
        let mut eta = ParamSet::new();
        match self.encoder {
            EncoderKind::Mlp => {
                eta.insert("encoder.W1", uniform_weight(rng, d, h));
                eta.insert("encoder.b1", Tensor::zeros(&[h]));
                eta.insert("encoder.W2", uniform_weight(rng, h, h));
                eta.insert("encoder.b2", Tensor::zeros(&[h]));
                eta.insert("encoder.Wmu", uniform_weight(rng, h, l));
                eta.insert("encoder.bmu", Tensor::zeros(&[l]));
                eta.insert("encoder.Wlv", uniform_weight(rng, h, l));
                eta.insert("encoder.blv", Tensor::zeros(&[l]));
            }
            EncoderKind::Linear => {
                eta.insert("encoder.Wmu", uniform_weight(rng, d, l));
                eta.insert("encoder.bmu", Tensor::zeros(&[l]));
                eta.insert("encoder.blv", Tensor::zeros(&[l]));
            }
        }
        (theta, eta)
    }

    /// Row-wise `log p_theta(x | z)`: x (n, D) held constant, z (n, L) -> (n).
    pub fn decoder_log_lik<'g>(&self, theta: &ParamVars<'g>, x: &Tensor, z: Var<'g>) -> Result<Var<'g>> {
        match self.decoder {
            DecoderKind::Bernoulli => {
                let h1 = z.affine(theta.get("decoder.W1")?, theta.get("decoder.b1")?)?.tanh();
                check_finite(h1, "decoder layer 1")?;
                let h2 = h1.affine(theta.get("decoder.W2")?, theta.get("decoder.b2")?)?.tanh();
                check_finite(h2, "decoder layer 2")?;
                let logits = h2.affine(theta.get("decoder.Wout")?, theta.get("decoder.bout")?)?;
                check_finite(logits, "decoder output logits")?;
                logits.bernoulli_log_lik(x.clone())
            }
            DecoderKind::LinearGaussian => {
                let n = z.shape()[0];
                let d = self.data_dim as f64;
                let mean = z.matmul(theta.get("decoder.loading")?)?;
                let resid = z.graph().constant(x.clone()).sub(mean)?;
                let sq = resid.square().sum_axis(1)?;
                let log_var = theta.get("decoder.log_noise_var")?.broadcast(&[n])?;
                let out = sq
                    .mul(log_var.neg().exp())?
                    .add(log_var.scale(d))?
                    .scale(-0.5)
                    .offset(-0.5 * d * LOG_2PI);
                check_finite(out, "linear-gaussian log-likelihood")?;
                Ok(out)
            }
        }
    }

    /// Row-wise `log p(z) + log p_theta(x | z)`.
    pub fn log_joint<'g>(&self, theta: &ParamVars<'g>, x: &Tensor, z: Var<'g>) -> Result<Var<'g>> {
        let prior = gaussian::std_normal_log_pdf_rows(z)?;
        prior.add(self.decoder_log_lik(theta, x, z)?)
    }

    /// Mean and log-variance of r_eta(z | x), each (n, L).
    pub fn encode<'g>(&self, eta: &ParamVars<'g>, x: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
        let (mean, logvar) = match self.encoder {
            EncoderKind::Mlp => {
                let h1 = x.affine(eta.get("encoder.W1")?, eta.get("encoder.b1")?)?.tanh();
                let h2 = h1.affine(eta.get("encoder.W2")?, eta.get("encoder.b2")?)?.tanh();
                let mean = h2.affine(eta.get("encoder.Wmu")?, eta.get("encoder.bmu")?)?;
                let logvar = h2.affine(eta.get("encoder.Wlv")?, eta.get("encoder.blv")?)?;
                (mean, logvar)
            }
            EncoderKind::Linear => {
                let n = x.shape()[0];
                let mean = x.affine(eta.get("encoder.Wmu")?, eta.get("encoder.bmu")?)?;
                let logvar = eta.get("encoder.blv")?.broadcast(&[n, self.latent_dim])?;
                (mean, logvar)
            }
        };
        check_finite(mean, "encoder mean")?;
        check_finite(logvar, "encoder log-variance")?;
        Ok((mean, logvar))
    }

    /// Row-wise `log r_eta(z | x)` where row `i` of `z` belongs to datapoint `i / k`.
    pub fn recognition_log_pdf<'g>(
        &self,
        eta: &ParamVars<'g>,
        x: &Tensor,
        z: Var<'g>,
        k: usize,
    ) -> Result<Var<'g>> {
        let (mean, logvar) = self.encode(eta, z.graph().constant(x.clone()))?;
        let (mean, logvar) = (repeat_rows(mean, k)?, repeat_rows(logvar, k)?);
        gaussian::diag_normal_log_pdf_rows(mean, logvar, z)
    }
}

/// (n, c) -> (n * k, c), each row repeated `k` times consecutively.
pub fn repeat_rows(v: Var<'_>, k: usize) -> Result<Var<'_>> {
    let s = v.shape();
    let (n, c) = (s[0], s[1]);
    v.reshape(&[n, 1, c])?.broadcast(&[n, k, c])?.reshape(&[n * k, c])
}

/// Generative and recognition parameters plus the architecture they fit.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelPair {
    pub arch: Architecture,
    pub theta: ParamSet,
    pub eta: ParamSet,
}

impl ModelPair {
    pub fn init(arch: Architecture, rng: &mut impl Rng) -> Self {
        let (theta, eta) = arch.init(rng);
        ModelPair { arch, theta, eta }
    }

    /// Encoder outputs as plain values, (n, L) each.
    pub fn encode_values(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let g = Graph::new();
        let eta = self.eta.attach(&g, false);
        let (m, lv) = self.arch.encode(&eta, g.constant(x.clone()))?;
        Ok((m.value(), lv.value()))
    }

    /// `log p(z) + log p_theta(x | z)` per row, as plain values.
    pub fn log_joint_values(&self, x: &Tensor, z: &Tensor) -> Result<Vec<f64>> {
        let g = Graph::new();
        let theta = self.theta.attach(&g, false);
        Ok(self
            .arch
            .log_joint(&theta, x, g.constant(z.clone()))?
            .value()
            .into_data())
    }

    pub fn decoder_log_lik_values(&self, x: &Tensor, z: &Tensor) -> Result<Vec<f64>> {
        let g = Graph::new();
        let theta = self.theta.attach(&g, false);
        Ok(self
            .arch
            .decoder_log_lik(&theta, x, g.constant(z.clone()))?
            .value()
            .into_data())
    }
}

/// x = A z + e with z ~ N(0, I_L), e ~ N(0, sigma^2 I_D). Everything in closed form.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearGaussianModel {
    /// A, shape (D, L).
    pub loading: DMatrix<f64>,
    pub noise_var: f64,
}

impl LinearGaussianModel {
    pub fn new(loading: DMatrix<f64>, noise_var: f64) -> Result<Self> {
        if !(noise_var > 0.0 && noise_var.is_finite()) {
            return Err(Error::Config(format!("noise variance must be positive, got {noise_var}")));
        }
        Ok(LinearGaussianModel { loading, noise_var })
    }

    pub fn random(data_dim: usize, latent_dim: usize, noise_var: f64, rng: &mut impl Rng) -> Result<Self> {
        let a = DMatrix::from_fn(data_dim, latent_dim, |_, _| rng.random_range(-1.0..1.0));
        Self::new(a, noise_var)
    }

    pub fn data_dim(&self) -> usize {
        self.loading.nrows()
    }

    pub fn latent_dim(&self) -> usize {
        self.loading.ncols()
    }

    /// Posterior covariance M = (I + A^T A / sigma^2)^-1, shared by every x.
    pub fn posterior_cov(&self) -> DMatrix<f64> {
        let l = self.latent_dim();
        let precision =
            DMatrix::identity(l, l) + self.loading.transpose() * &self.loading / self.noise_var;
        precision
            .cholesky()
            .expect("I + A^T A / sigma^2 must be positive definite for sigma^2 > 0")
            .inverse()
    }

    /// Exact p(z | x) = N(M A^T x / sigma^2, M).
    pub fn posterior(&self, x: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        let m = self.posterior_cov();
        let mean = &m * self.loading.transpose() * DVector::from_column_slice(x) / self.noise_var;
        (mean, m)
    }

    /// log p(x) with x ~ N(0, A A^T + sigma^2 I).
    pub fn log_marginal(&self, x: &[f64]) -> f64 {
        let d = self.data_dim();
        let cov = &self.loading * self.loading.transpose() + DMatrix::identity(d, d) * self.noise_var;
        let g = gaussian::FullGaussian::from_cov(DVector::zeros(d), cov)
            .expect("A A^T + sigma^2 I is positive definite");
        g.log_pdf(x)
    }

    /// Sum of log p(x_i) over the rows of `data`.
    pub fn log_marginal_total(&self, data: &Tensor) -> f64 {
        (0..data.rows()).map(|i| self.log_marginal(data.row(i))).sum()
    }

    pub fn log_joint(&self, x: &[f64], z: &[f64]) -> f64 {
        let d = self.data_dim() as f64;
        let mean = &self.loading * DVector::from_column_slice(z);
        let sq: f64 = x.iter().zip(mean.iter()).map(|(a, b)| (a - b).powi(2)).sum();
        gaussian::std_normal_log_pdf(z) - 0.5 * (sq / self.noise_var + d * (LOG_2PI + self.noise_var.ln()))
    }

    /// `n` iid draws, (n, D).
    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Tensor {
        let (d, l) = (self.data_dim(), self.latent_dim());
        let sd = self.noise_var.sqrt();
        let mut out = Vec::with_capacity(n * d);
        for _ in 0..n {
            let z = DVector::from_vec(standard_normals(rng, l));
            let e = standard_normals(rng, d);
            let x = &self.loading * z;
            out.extend(x.iter().zip(e).map(|(m, e)| m + sd * e));
        }
        Tensor::matrix(n, d, out).expect("sample shape")
    }

    /// One exact EM iteration on `data` (n, D): exact posterior E-step,
    /// closed-form maximization of the expected complete-data log-likelihood.
    pub fn em_step(&self, data: &Tensor) -> Result<Self> {
        let (n, d, l) = (data.rows(), self.data_dim(), self.latent_dim());
        let m = self.posterior_cov();
        let proj = &m * self.loading.transpose() / self.noise_var;
        let mut cross = DMatrix::<f64>::zeros(d, l);
        let mut second = &m * n as f64;
        let mut sq_norm = 0.0;
        for i in 0..n {
            let x = DVector::from_column_slice(data.row(i));
            let mu = &proj * &x;
            cross += &x * mu.transpose();
            second += &mu * mu.transpose();
            sq_norm += x.norm_squared();
        }
        let second_inv = second
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite("EM second-moment matrix".into()))?
            .inverse();
        let loading = &cross * second_inv;
        let fit = (loading.transpose() * &cross).trace();
        let noise_var = (sq_norm - fit) / (n * d) as f64;
        Self::new(loading, noise_var)
    }

    /// Generative parameters in the layout used by [`DecoderKind::LinearGaussian`].
    pub fn to_theta(&self) -> ParamSet {
        let (d, l) = (self.data_dim(), self.latent_dim());
        let at = self.loading.transpose();
        // nalgebra is column-major; (L, D) row-major data = columns of A^T's transpose.
        let data: Vec<f64> = (0..l).flat_map(|r| (0..d).map(move |c| (r, c))).map(|(r, c)| at[(r, c)]).collect();
        let mut theta = ParamSet::new();
        theta.insert("decoder.loading", Tensor::matrix(l, d, data).expect("shape"));
        theta.insert("decoder.log_noise_var", Tensor::vector(vec![self.noise_var.ln()]));
        theta
    }

    pub fn from_theta(theta: &ParamSet) -> Result<Self> {
        let w = theta
            .get("decoder.loading")
            .ok_or_else(|| Error::Config("missing decoder.loading".into()))?;
        let lv = theta
            .get("decoder.log_noise_var")
            .and_then(Tensor::item)
            .ok_or_else(|| Error::Config("missing decoder.log_noise_var".into()))?;
        let (l, d) = (w.shape()[0], w.shape()[1]);
        let loading = DMatrix::from_fn(d, l, |r, c| w.data()[c * d + r]);
        Self::new(loading, lv.exp())
    }

    /// Linear-encoder parameters whose r(z|x) has the exact posterior mean
    /// and the exact posterior marginal variances.
    pub fn posterior_encoder(&self) -> ParamSet {
        let (d, l) = (self.data_dim(), self.latent_dim());
        let m = self.posterior_cov();
        let proj = &m * self.loading.transpose() / self.noise_var; // (L, D)
        let w: Vec<f64> = (0..d).flat_map(|r| (0..l).map(move |c| (r, c))).map(|(r, c)| proj[(c, r)]).collect();
        let mut eta = ParamSet::new();
        eta.insert("encoder.Wmu", Tensor::matrix(d, l, w).expect("shape"));
        eta.insert("encoder.bmu", Tensor::zeros(&[l]));
        eta.insert("encoder.blv", Tensor::vector((0..l).map(|i| m[(i, i)].ln()).collect()));
        eta
    }

    /// Architecture matching [`Self::to_theta`] with a linear encoder.
    pub fn architecture(&self) -> Architecture {
        Architecture {
            data_dim: self.data_dim(),
            latent_dim: self.latent_dim(),
            hidden: 0,
            decoder: DecoderKind::LinearGaussian,
            encoder: EncoderKind::Linear,
        }
    }
}

/// A generating model and train/test draws from it.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthData {
    pub model: LinearGaussianModel,
    pub train: Tensor,
    pub test: Tensor,
}

/// Random linear-Gaussian model (loading entries uniform in +-`loading_scale`)
/// and `n_train` + `n_test` samples, all from named streams of `seed`.
pub fn synthesize(
    data_dim: usize,
    latent_dim: usize,
    noise_var: f64,
    loading_scale: f64,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<SynthData> {
    use crate::rng::{stream_rng, Stream};
    let base = LinearGaussianModel::random(data_dim, latent_dim, noise_var, &mut stream_rng(seed, Stream::Synth, 0))?;
    let model = LinearGaussianModel::new(base.loading * loading_scale, noise_var)?;
    let train = model.sample(n_train, &mut stream_rng(seed, Stream::Synth, 1));
    let test = model.sample(n_test, &mut stream_rng(seed, Stream::Synth, 2));
    Ok(SynthData { model, train, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_arch() -> Architecture {
        Architecture {
            data_dim: 4,
            latent_dim: 2,
            hidden: 3,
            decoder: DecoderKind::Bernoulli,
            encoder: EncoderKind::Mlp,
        }
    }

    fn zeroed(p: &ParamSet) -> ParamSet {
        p.zeros_like()
    }

    #[test]
    fn zero_logits_give_uniform_bernoulli() {
        let arch = Architecture { data_dim: 7, ..tiny_arch() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = ModelPair::init(arch, &mut rng);
        m.theta = zeroed(&m.theta);
        let x = Tensor::matrix(2, 7, vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let z = Tensor::matrix(2, 2, vec![0.3, -1.0, 2.0, 0.1]).unwrap();
        for v in m.decoder_log_lik_values(&x, &z).unwrap() {
            assert!((v - 7.0 * 0.5f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn saturated_logits_approach_zero() {
        let arch = Architecture { data_dim: 3, ..tiny_arch() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = ModelPair::init(arch, &mut rng);
        m.theta = zeroed(&m.theta);
        m.theta.insert("decoder.bout", Tensor::vector(vec![60.0; 3]));
        let x = Tensor::matrix(1, 3, vec![1.0; 3]).unwrap();
        let z = Tensor::matrix(1, 2, vec![0.0; 2]).unwrap();
        let v = m.decoder_log_lik_values(&x, &z).unwrap()[0];
        assert!(v <= 0.0 && v > -1e-20);
    }

    #[test]
    fn decoder_matches_scalar_reimplementation() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let m = ModelPair::init(tiny_arch(), &mut rng);
        let x = Tensor::matrix(1, 4, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let z = [0.7, -0.4];
        let got = m.decoder_log_lik_values(&x, &Tensor::matrix(1, 2, z.to_vec()).unwrap()).unwrap()[0];

        let layer = |input: &[f64], w: &Tensor, b: &Tensor, act: bool| -> Vec<f64> {
            let (fi, fo) = (w.shape()[0], w.shape()[1]);
            (0..fo)
                .map(|j| {
                    let s: f64 = (0..fi).map(|i| input[i] * w.data()[i * fo + j]).sum::<f64>() + b.data()[j];
                    if act { s.tanh() } else { s }
                })
                .collect()
        };
        let t = &m.theta;
        let h1 = layer(&z, t.get("decoder.W1").unwrap(), t.get("decoder.b1").unwrap(), true);
        let h2 = layer(&h1, t.get("decoder.W2").unwrap(), t.get("decoder.b2").unwrap(), true);
        let logits = layer(&h2, t.get("decoder.Wout").unwrap(), t.get("decoder.bout").unwrap(), false);
        let want: f64 = logits
            .iter()
            .zip(x.data())
            .map(|(l, xi)| {
                let p = 1.0 / (1.0 + (-l).exp());
                xi * p.ln() + (1.0 - xi) * (1.0 - p).ln()
            })
            .sum();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn non_finite_logits_name_the_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = ModelPair::init(tiny_arch(), &mut rng);
        m.theta.insert("decoder.bout", Tensor::vector(vec![f64::NAN; 4]));
        let x = Tensor::matrix(1, 4, vec![0.0; 4]).unwrap();
        let z = Tensor::matrix(1, 2, vec![0.0; 2]).unwrap();
        let err = m.decoder_log_lik_values(&x, &z).unwrap_err();
        assert!(err.to_string().contains("decoder output logits"), "{err}");
    }

    #[test]
    fn zero_encoder_outputs_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = ModelPair::init(tiny_arch(), &mut rng);
        m.eta = zeroed(&m.eta);
        let x = Tensor::matrix(2, 4, vec![1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let (mean, lv) = m.encode_values(&x).unwrap();
        assert!(mean.data().iter().chain(lv.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn encoder_deterministic_and_finite_difference_slope() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = ModelPair::init(tiny_arch(), &mut rng);
        let x = Tensor::matrix(1, 4, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(m.encode_values(&x).unwrap(), m.encode_values(&x).unwrap());

        // d mean[0] / d W1[0] by finite differences vs backward.
        let g = Graph::new();
        let eta = m.eta.attach(&g, true);
        let (mean, _) = m.arch.encode(&eta, g.constant(x.clone())).unwrap();
        let target = mean.slice(1, 0, 1).unwrap().sum();
        let mut grads = g.backward(target).unwrap();
        let analytic = eta.gradients(&mut grads).get("encoder.W1").unwrap().data()[0];
        let h = 1e-6;
        let eval = |delta: f64| {
            let mut p = m.clone();
            p.eta.get_mut("encoder.W1").unwrap().data_mut()[0] += delta;
            p.encode_values(&x).unwrap().0.data()[0]
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        assert!((analytic - numeric).abs() < 1e-8, "{analytic} vs {numeric}");
    }

    #[test]
    fn oracle_uninformative_loading() {
        let model = LinearGaussianModel::new(DMatrix::zeros(3, 2), 0.7).unwrap();
        let (mean, cov) = model.posterior(&[1.0, -2.0, 0.5]);
        assert!(mean.iter().all(|v| v.abs() < 1e-15));
        assert!((cov - DMatrix::<f64>::identity(2, 2)).abs().max() < 1e-15);
    }

    #[test]
    fn oracle_scalar_conjugacy() {
        let model = LinearGaussianModel::new(DMatrix::from_element(1, 1, 1.0), 1.0).unwrap();
        let (mean, cov) = model.posterior(&[2.0]);
        assert!((mean[0] - 1.0).abs() < 1e-15);
        assert!((cov[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn theta_round_trip_and_graph_log_joint() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = LinearGaussianModel::random(5, 3, 0.4, &mut rng).unwrap();
        let back = LinearGaussianModel::from_theta(&model.to_theta()).unwrap();
        assert!((back.loading.clone() - &model.loading).abs().max() < 1e-15);
        assert!((back.noise_var - model.noise_var).abs() < 1e-15);

        let pair = ModelPair {
            arch: model.architecture(),
            theta: model.to_theta(),
            eta: model.posterior_encoder(),
        };
        let x = model.sample(3, &mut rng);
        let z = Tensor::matrix(3, 3, standard_normals(&mut rng, 9)).unwrap();
        let got = pair.log_joint_values(&x, &z).unwrap();
        for i in 0..3 {
            assert!((got[i] - model.log_joint(x.row(i), z.row(i))).abs() < 1e-10);
        }
    }

    #[test]
    fn posterior_encoder_reproduces_posterior_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = LinearGaussianModel::random(5, 3, 0.5, &mut rng).unwrap();
        let pair = ModelPair {
            arch: model.architecture(),
            theta: model.to_theta(),
            eta: model.posterior_encoder(),
        };
        let x = model.sample(2, &mut rng);
        let (mean, lv) = pair.encode_values(&x).unwrap();
        for i in 0..2 {
            let (pm, pc) = model.posterior(x.row(i));
            for j in 0..3 {
                assert!((mean.row(i)[j] - pm[j]).abs() < 1e-12);
                assert!((lv.row(i)[j].exp() - pc[(j, j)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn em_step_does_not_decrease_likelihood() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let truth = LinearGaussianModel::random(4, 2, 0.3, &mut rng).unwrap();
        let data = truth.sample(200, &mut rng);
        let mut model = LinearGaussianModel::random(4, 2, 1.0, &mut rng).unwrap();
        let mut prev = model.log_marginal_total(&data);
        for _ in 0..10 {
            model = model.em_step(&data).unwrap();
            let cur = model.log_marginal_total(&data);
            assert!(cur >= prev - 1e-10);
            prev = cur;
        }
    }

    #[test]
    fn rejects_non_positive_noise() {
        assert!(LinearGaussianModel::new(DMatrix::zeros(2, 1), 0.0).is_err());
    }
}
