//! Training objectives and their gradients.
//!
//! Every stochastic objective splits into a sampling half (particles and
//! weights, using the current parameters as fixed values) and a
//! differentiable half that takes those particles and weights as constants.
//! The differentiable halves are what finite-difference checks probe.
//!
//! Sign conventions: `elbo`, `iwae`, `rem_theta` and `rem_v2_theta` are
//! maximized; `rem_eta` is minimized.

use log::warn;
use rand::Rng;

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::gaussian;
use crate::importance::{MomentProposal, WeightSet};
use crate::model::{repeat_rows, ModelPair, ParamSet};
use crate::rng::standard_normals;

#[derive(Clone, Debug)]
pub struct ObjectiveValue {
    /// Mean over the datapoints that were not skipped.
    pub value: f64,
    /// One entry per datapoint; `NaN` where the datapoint was skipped.
    pub per_point: Vec<f64>,
    pub theta_grad: Option<ParamSet>,
    pub eta_grad: Option<ParamSet>,
    /// Effective sample size of each datapoint's normalized weights; `NaN` where skipped.
    pub ess: Vec<f64>,
    /// Datapoints dropped because their weights were degenerate.
    pub skipped: usize,
}

/// K latent draws per datapoint, row `i * k + j` is draw `j` for datapoint `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct Particles {
    pub z: Tensor,
    pub k: usize,
    /// Log-density of each row under the distribution it was drawn from.
    pub log_proposal: Vec<f64>,
}

impl Particles {
    pub fn batch(&self) -> usize {
        self.z.rows() / self.k
    }

    /// Rows belonging to datapoint `i`, (K, L).
    pub fn for_point(&self, i: usize) -> Tensor {
        let idx: Vec<usize> = (i * self.k..(i + 1) * self.k).collect();
        self.z.gather_rows(&idx)
    }
}

/// Draws K particles per row of `x` from the recognition network.
pub fn sample_recognition(model: &ModelPair, x: &Tensor, k: usize, rng: &mut impl Rng) -> Result<Particles> {
    let (mean, logvar) = model.encode_values(x)?;
    let l = model.arch.latent_dim;
    let b = x.rows();
    let xi = standard_normals(rng, b * k * l);
    let mut z = Vec::with_capacity(b * k * l);
    let mut log_q = Vec::with_capacity(b * k);
    for i in 0..b {
        let (m, lv) = (mean.row(i), logvar.row(i));
        for j in 0..k {
            let noise = &xi[(i * k + j) * l..(i * k + j + 1) * l];
            let row: Vec<f64> = (0..l).map(|d| m[d] + (0.5 * lv[d]).exp() * noise[d]).collect();
            log_q.push(gaussian::diag_normal_log_pdf(m, lv, &row));
            z.extend(row);
        }
    }
    Ok(Particles {
        z: Tensor::matrix(b * k, l, z)?,
        k,
        log_proposal: log_q,
    })
}

/// Self-normalized weights per datapoint; `None` where they are degenerate.
pub fn importance_weights(model: &ModelPair, x: &Tensor, particles: &Particles) -> Result<Vec<Option<WeightSet>>> {
    let log_joint = model.log_joint_values(&x.repeat_rows(particles.k), &particles.z)?;
    Ok(weights_from_log_joint(&log_joint, particles))
}

pub fn weights_from_log_joint(log_joint: &[f64], particles: &Particles) -> Vec<Option<WeightSet>> {
    let k = particles.k;
    (0..particles.batch())
        .map(|i| {
            let range = i * k..(i + 1) * k;
            WeightSet::compute(&log_joint[range.clone()], &particles.log_proposal[range]).ok()
        })
        .collect()
}

/// Flattened (B*K) weight vector scaled by 1 / (number of usable datapoints).
fn flat_weights(weights: &[Option<WeightSet>], k: usize) -> Result<(Tensor, usize)> {
    let valid = weights.iter().filter(|w| w.is_some()).count();
    if valid == 0 {
        return Err(Error::DegenerateWeights("every datapoint in the batch".into()));
    }
    let scale = 1.0 / valid as f64;
    let mut flat = Vec::with_capacity(weights.len() * k);
    for w in weights {
        match w {
            Some(w) => flat.extend(w.normalized().iter().map(|a| a * scale)),
            None => flat.extend(std::iter::repeat_n(0.0, k)),
        }
    }
    Ok((Tensor::vector(flat), weights.len() - valid))
}

fn ess_of(weights: &[Option<WeightSet>]) -> Vec<f64> {
    weights
        .iter()
        .map(|w| w.as_ref().map_or(f64::NAN, WeightSet::ess))
        .collect()
}

fn per_point_weighted(values: &Tensor, weights: &[Option<WeightSet>], k: usize) -> Vec<f64> {
    weights
        .iter()
        .enumerate()
        .map(|(i, w)| match w {
            Some(w) => w
                .normalized()
                .iter()
                .zip(&values.data()[i * k..(i + 1) * k])
                .map(|(a, v)| a * v)
                .sum(),
            None => f64::NAN,
        })
        .collect()
}

/// `mean_i sum_k w_ik log p_theta(x_i, z_ik)` with the weights held fixed;
/// gradient with respect to theta only.
pub fn weighted_log_joint(
    model: &ModelPair,
    x: &Tensor,
    particles: &Particles,
    weights: &[Option<WeightSet>],
) -> Result<ObjectiveValue> {
    let k = particles.k;
    let (flat, skipped) = flat_weights(weights, k)?;
    let g = Graph::new();
    let theta = model.theta.attach(&g, true);
    let log_joint = model
        .arch
        .log_joint(&theta, &x.repeat_rows(k), g.constant(particles.z.clone()))?;
    let objective = log_joint.weighted_sum(&flat)?;
    let mut grads = g.backward(objective)?;
    let per_point = per_point_weighted(&log_joint.value(), weights, k);
    Ok(ObjectiveValue {
        value: objective.item().expect("scalar"),
        per_point,
        theta_grad: Some(theta.gradients(&mut grads)),
        eta_grad: None,
        ess: ess_of(weights),
        skipped,
    })
}

/// [`weighted_log_joint`] with the weights computed from the same forward
/// pass (`p(x, z) / proposal`). Returns the weights alongside.
pub fn self_weighted_log_joint(
    model: &ModelPair,
    x: &Tensor,
    particles: &Particles,
) -> Result<(ObjectiveValue, Vec<Option<WeightSet>>)> {
    let k = particles.k;
    let g = Graph::new();
    let theta = model.theta.attach(&g, true);
    let log_joint = model
        .arch
        .log_joint(&theta, &x.repeat_rows(k), g.constant(particles.z.clone()))?;
    let values = log_joint.value();
    let weights = weights_from_log_joint(values.data(), particles);
    let (flat, skipped) = flat_weights(&weights, k)?;
    let objective = log_joint.weighted_sum(&flat)?;
    let mut grads = g.backward(objective)?;
    let value = ObjectiveValue {
        value: objective.item().expect("scalar"),
        per_point: per_point_weighted(&values, &weights, k),
        theta_grad: Some(theta.gradients(&mut grads)),
        eta_grad: None,
        ess: ess_of(&weights),
        skipped,
    };
    Ok((value, weights))
}

/// `-mean_i sum_k w_ik log r_eta(z_ik | x_i)` with the weights held fixed;
/// gradient with respect to eta only.
pub fn weighted_log_recognition(
    model: &ModelPair,
    x: &Tensor,
    particles: &Particles,
    weights: &[Option<WeightSet>],
) -> Result<ObjectiveValue> {
    let k = particles.k;
    let (flat, skipped) = flat_weights(weights, k)?;
    let g = Graph::new();
    let eta = model.eta.attach(&g, true);
    let log_r = model
        .arch
        .recognition_log_pdf(&eta, x, g.constant(particles.z.clone()), k)?;
    let objective = log_r.weighted_sum(&flat)?.neg();
    let mut grads = g.backward(objective)?;
    let per_point = per_point_weighted(&log_r.value(), weights, k)
        .into_iter()
        .map(|v| -v)
        .collect();
    Ok(ObjectiveValue {
        value: objective.item().expect("scalar"),
        per_point,
        theta_grad: None,
        eta_grad: Some(eta.gradients(&mut grads)),
        ess: ess_of(weights),
        skipped,
    })
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Bound {
    Elbo,
    Iwae,
}

/// Reparameterized bound with explicit standard-normal noise `xi` (B*K, L).
fn reparameterized_bound(model: &ModelPair, x: &Tensor, xi: &Tensor, k: usize, bound: Bound) -> Result<ObjectiveValue> {
    let b = x.rows();
    if xi.rows() != b * k || xi.cols() != model.arch.latent_dim {
        return Err(Error::shape("reparameterized noise", &[xi.shape(), &[b * k, model.arch.latent_dim]]));
    }
    let g = Graph::new();
    let theta = model.theta.attach(&g, true);
    let eta = model.eta.attach(&g, true);
    let (mean, logvar) = model.arch.encode(&eta, g.constant(x.clone()))?;
    let (mean, logvar) = (repeat_rows(mean, k)?, repeat_rows(logvar, k)?);
    let z = mean.add(logvar.scale(0.5).exp().mul(g.constant(xi.clone()))?)?;
    let log_q = gaussian::diag_normal_log_pdf_rows(mean, logvar, z)?;
    let log_w = model
        .arch
        .log_joint(&theta, &x.repeat_rows(k), z)?
        .sub(log_q)?
        .reshape(&[b, k])?;
    let ess = log_w
        .value()
        .data()
        .chunks(k)
        .map(|row| WeightSet::from_log_weights(row.to_vec()).map_or(f64::NAN, |w| w.ess()))
        .collect();
    let per_point = match bound {
        Bound::Elbo => log_w.sum_axis(1)?.scale(1.0 / k as f64),
        Bound::Iwae => log_w.log_sum_exp(1)?.offset(-(k as f64).ln()),
    };
    let values = per_point.value().into_data();
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("bound estimate for datapoint {i}")));
    }
    let objective = per_point.mean();
    let mut grads = g.backward(objective)?;
    Ok(ObjectiveValue {
        value: objective.item().expect("scalar"),
        per_point: values,
        theta_grad: Some(theta.gradients(&mut grads)),
        eta_grad: Some(eta.gradients(&mut grads)),
        ess,
        skipped: 0,
    })
}

/// K-sample mean ELBO with reparameterization noise `xi`.
pub fn elbo_with_noise(model: &ModelPair, x: &Tensor, xi: &Tensor, k: usize) -> Result<ObjectiveValue> {
    reparameterized_bound(model, x, xi, k, Bound::Elbo)
}

/// K-particle importance-weighted bound with reparameterization noise `xi`.
pub fn iwae_with_noise(model: &ModelPair, x: &Tensor, xi: &Tensor, k: usize) -> Result<ObjectiveValue> {
    reparameterized_bound(model, x, xi, k, Bound::Iwae)
}

fn draw_noise(model: &ModelPair, b: usize, k: usize, rng: &mut impl Rng) -> Result<Tensor> {
    let l = model.arch.latent_dim;
    Tensor::matrix(b * k, l, standard_normals(rng, b * k * l))
}

/// Reparameterized ELBO, averaged over K samples and the batch. Gradients for theta and eta.
pub fn elbo(model: &ModelPair, x: &Tensor, k: usize, rng: &mut impl Rng) -> Result<ObjectiveValue> {
    let xi = draw_noise(model, x.rows(), k, rng)?;
    elbo_with_noise(model, x, &xi, k)
}

/// `log((1/K) sum_k p(x, z_k) / r(z_k | x))`, z_k reparameterized draws from r.
/// Gradients for theta and eta.
pub fn iwae(model: &ModelPair, x: &Tensor, k: usize, rng: &mut impl Rng) -> Result<ObjectiveValue> {
    let xi = draw_noise(model, x.rows(), k, rng)?;
    iwae_with_noise(model, x, &xi, k)
}

fn warn_skipped(what: &str, v: &ObjectiveValue) {
    if v.skipped > 0 {
        warn!("{what}: skipped {} datapoints with degenerate weights", v.skipped);
    }
}

/// Theta objective with particles from r and self-normalized weights
/// `p(x, z) / r(z | x)` held fixed. Gradient for theta only.
pub fn rem_theta(model: &ModelPair, x: &Tensor, k: usize, rng: &mut impl Rng) -> Result<ObjectiveValue> {
    let particles = sample_recognition(model, x, k, rng)?;
    let (v, _) = self_weighted_log_joint(model, x, &particles)?;
    warn_skipped("rem_theta", &v);
    Ok(v)
}

/// Moment-matched proposal per datapoint from K particles drawn from r.
pub fn fit_proposals(
    model: &ModelPair,
    x: &Tensor,
    k: usize,
    epsilon: f64,
    rng: &mut impl Rng,
) -> Result<Vec<Option<MomentProposal>>> {
    let particles = sample_recognition(model, x, k, rng)?;
    let weights = importance_weights(model, x, &particles)?;
    proposals_from_weights(&particles, &weights, epsilon)
}

pub fn proposals_from_weights(
    particles: &Particles,
    weights: &[Option<WeightSet>],
    epsilon: f64,
) -> Result<Vec<Option<MomentProposal>>> {
    weights
        .iter()
        .enumerate()
        .map(|(i, w)| match w {
            Some(w) => match MomentProposal::fit(&particles.for_point(i), w, epsilon) {
                Ok(p) => Ok(Some(p)),
                Err(Error::NotPositiveDefinite(msg)) => {
                    warn!("datapoint {i}: moment-matched covariance not positive definite ({msg})");
                    Ok(None)
                }
                Err(e) => Err(e),
            },
            None => Ok(None),
        })
        .collect()
}

/// K fresh particles per datapoint from its proposal. Datapoints without a
/// proposal get placeholder zeros with `NaN` log-density, which any weight
/// computation then treats as degenerate.
pub fn sample_proposals(proposals: &[Option<MomentProposal>], latent_dim: usize, k: usize, rng: &mut impl Rng) -> Result<Particles> {
    let l = latent_dim;
    let mut z = Vec::with_capacity(proposals.len() * k * l);
    let mut log_s = Vec::with_capacity(proposals.len() * k);
    for p in proposals {
        match p {
            Some(p) => {
                let (draws, lp) = p.sample(k, rng);
                z.extend_from_slice(draws.data());
                log_s.extend(lp);
            }
            None => {
                z.extend(std::iter::repeat_n(0.0, k * l));
                log_s.extend(std::iter::repeat_n(f64::NAN, k));
            }
        }
    }
    Ok(Particles {
        z: Tensor::matrix(proposals.len() * k, l, z)?,
        k,
        log_proposal: log_s,
    })
}

/// Fresh particles from s with weights `p(x, z) / s(z)`.
pub fn moment_particles(
    model: &ModelPair,
    x: &Tensor,
    proposals: &[Option<MomentProposal>],
    k: usize,
    rng: &mut impl Rng,
) -> Result<(Particles, Vec<Option<WeightSet>>)> {
    let particles = sample_proposals(proposals, model.arch.latent_dim, k, rng)?;
    let weights = importance_weights(model, x, &particles)?;
    Ok((particles, weights))
}

/// Inclusive-KL recognition objective: `-sum_k beta_k log r_eta(z_k | x)` with
/// z_k ~ s and beta the self-normalized `p(x, z) / s(z)`. Minimized; gradient for eta only.
pub fn rem_eta(
    model: &ModelPair,
    proposals: &[Option<MomentProposal>],
    x: &Tensor,
    k: usize,
    rng: &mut impl Rng,
) -> Result<ObjectiveValue> {
    let (particles, weights) = moment_particles(model, x, proposals, k, rng)?;
    let v = weighted_log_recognition(model, x, &particles, &weights)?;
    warn_skipped("rem_eta", &v);
    Ok(v)
}

/// Theta objective with particles from the moment-matched s and weights
/// `p(x, z) / s(z)`. Gradient for theta only.
pub fn rem_v2_theta(
    model: &ModelPair,
    proposals: &[Option<MomentProposal>],
    x: &Tensor,
    k: usize,
    rng: &mut impl Rng,
) -> Result<ObjectiveValue> {
    let particles = sample_proposals(proposals, model.arch.latent_dim, k, rng)?;
    let (v, _) = self_weighted_log_joint(model, x, &particles)?;
    warn_skipped("rem_v2_theta", &v);
    Ok(v)
}

/// Mean over rows of `KL(r_eta(z | x) || N(0, I))`, closed form.
pub fn kl_to_prior(model: &ModelPair, x: &Tensor) -> Result<f64> {
    if x.rows() == 0 {
        return Ok(0.0);
    }
    let (mean, logvar) = model.encode_values(x)?;
    let total: f64 = (0..x.rows())
        .map(|i| gaussian::kl_diag_to_std_normal(mean.row(i), logvar.row(i)))
        .sum();
    Ok(total / x.rows() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Architecture, DecoderKind, EncoderKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelPair {
        let arch = Architecture {
            data_dim: 5,
            latent_dim: 2,
            hidden: 4,
            decoder: DecoderKind::Bernoulli,
            encoder: EncoderKind::Mlp,
        };
        ModelPair::init(arch, &mut ChaCha8Rng::seed_from_u64(0))
    }

    fn batch() -> Tensor {
        Tensor::matrix(2, 5, vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0]).unwrap()
    }

    #[test]
    fn collapsed_elbo_is_uniform_bernoulli() {
        let mut m = tiny();
        m.theta = m.theta.zeros_like();
        m.eta = m.eta.zeros_like();
        // encoder = prior, decoder logits = 0: log p(x|z) = D log 1/2 and log p(z) = log q(z)
        let v = elbo(&m, &batch(), 3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!((v.value - 5.0 * 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn iwae_k1_equals_elbo_k1() {
        let m = tiny();
        let a = elbo(&m, &batch(), 1, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = iwae(&m, &batch(), 1, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a.value, b.value);
    }

    #[test]
    fn rem_theta_k1_is_log_joint() {
        let m = tiny();
        let x = batch();
        let v = rem_theta(&m, &x, 1, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let p = sample_recognition(&m, &x, 1, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let lj = m.log_joint_values(&x, &p.z).unwrap();
        for i in 0..2 {
            assert!((v.per_point[i] - lj[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn rem_eta_k1_is_negative_log_recognition() {
        let m = tiny();
        let x = batch();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let proposals = fit_proposals(&m, &x, 8, 1e-6, &mut rng).unwrap();
        let v = rem_eta(&m, &proposals, &x, 1, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let (p, _) = moment_particles(&m, &x, &proposals, 1, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let (mean, lv) = m.encode_values(&x).unwrap();
        for i in 0..2 {
            let want = -gaussian::diag_normal_log_pdf(mean.row(i), lv.row(i), p.z.row(i));
            assert!((v.per_point[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn rem_v2_k1_is_log_joint() {
        let m = tiny();
        let x = batch();
        let proposals = fit_proposals(&m, &x, 8, 1e-6, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let v = rem_v2_theta(&m, &proposals, &x, 1, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let (p, _) = moment_particles(&m, &x, &proposals, 1, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let lj = m.log_joint_values(&x, &p.z).unwrap();
        for i in 0..2 {
            assert!((v.per_point[i] - lj[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_of_zero_encoder_is_zero() {
        let mut m = tiny();
        m.eta = m.eta.zeros_like();
        assert_eq!(kl_to_prior(&m, &batch()).unwrap(), 0.0);
    }

    #[test]
    fn all_degenerate_batch_is_an_error() {
        let m = tiny();
        let x = batch();
        let p = sample_recognition(&m, &x, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let none = vec![None, None];
        assert!(matches!(
            weighted_log_joint(&m, &x, &p, &none),
            Err(Error::DegenerateWeights(_))
        ));
    }

    #[test]
    fn partially_degenerate_batch_skips() {
        let m = tiny();
        let x = batch();
        let p = sample_recognition(&m, &x, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut w = importance_weights(&m, &x, &p).unwrap();
        w[1] = None;
        let v = weighted_log_joint(&m, &x, &p, &w).unwrap();
        assert_eq!(v.skipped, 1);
        assert!(v.per_point[1].is_nan());
        assert!((v.value - v.per_point[0]).abs() < 1e-12);
    }
}
