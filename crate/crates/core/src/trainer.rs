//! Minibatch training loop for vae, iwae, rem1 and rem2.

use std::time::Instant;

use log::warn;
use rand::Rng;

use crate::autodiff::Tensor;
use crate::checkpoint::Checkpoint;
use crate::config::{Method, RunConfig};
use crate::data::{stochastic_binarize, BatchIterator, DataMode, Dataset};
use crate::error::{Error, Result};
use crate::evaluation::{collapse_diagnostic, estimate_log_likelihood, LikelihoodEstimate};
use crate::model::{Architecture, ModelPair};
use crate::objectives::{
    self, importance_weights, proposals_from_weights, sample_proposals, sample_recognition,
    self_weighted_log_joint, weighted_log_recognition, ObjectiveValue,
};
use crate::optim::{lr_at_epoch, negate, AdamState};
use crate::rng::{stream_rng, Stream};

pub const METRICS_HEADER: &str =
    "epoch,method,dataset,K,lr,train_obj,test_ll,kl_to_prior,ess_mean,degenerate_rate,wall_s";

/// Fraction of batches with a skipped datapoint above which an epoch is flagged.
pub const DEGENERATE_WARN_RATE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    /// Mean minibatch bound: ELBO for vae, the K-particle bound otherwise.
    pub train_obj: f64,
    pub test_ll: Option<f64>,
    pub kl_to_prior: Option<f64>,
    pub ess_mean: f64,
    pub degenerate_rate: f64,
    /// Seconds spent on this epoch, including its evaluation.
    pub wall_s: f64,
}

fn cell(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

impl EpochMetrics {
    pub fn csv_row(&self, config: &RunConfig) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{:.3}",
            self.epoch,
            config.method,
            config.dataset,
            config.k,
            self.lr,
            self.train_obj,
            cell(self.test_ll),
            cell(self.kl_to_prior),
            self.ess_mean,
            self.degenerate_rate,
            self.wall_s
        )
    }
}

/// Totals for one minibatch step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepStats {
    pub objective: f64,
    pub ess_mean: f64,
    /// Datapoints skipped in either update.
    pub skipped: usize,
}

fn mean_finite(v: &[f64]) -> f64 {
    let finite: Vec<f64> = v.iter().copied().filter(|x| x.is_finite()).collect();
    if finite.is_empty() {
        f64::NAN
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    pub config: RunConfig,
    pub model: ModelPair,
    pub adam_theta: AdamState,
    pub adam_eta: AdamState,
    pub epochs_completed: usize,
}

impl Trainer {
    pub fn new(config: RunConfig, arch: Architecture) -> Result<Self> {
        config.validate()?;
        if arch.latent_dim != config.latent_dim {
            return Err(Error::Config(format!(
                "architecture latent dim {} differs from config {}",
                arch.latent_dim, config.latent_dim
            )));
        }
        let model = ModelPair::init(arch, &mut stream_rng(config.seed, Stream::Init, 0));
        Ok(Self::from_model(config, model))
    }

    pub fn from_model(config: RunConfig, model: ModelPair) -> Self {
        Trainer {
            adam_theta: AdamState::new(&model.theta),
            adam_eta: AdamState::new(&model.eta),
            config,
            model,
            epochs_completed: 0,
        }
    }

    pub fn from_checkpoint(c: Checkpoint) -> Self {
        Trainer {
            config: c.config,
            model: c.model,
            adam_theta: c.adam_theta,
            adam_eta: c.adam_eta,
            epochs_completed: c.epochs_completed,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            model: self.model.clone(),
            adam_theta: self.adam_theta.clone(),
            adam_eta: self.adam_eta.clone(),
            epochs_completed: self.epochs_completed,
        }
    }

    fn apply(&mut self, theta_grad: Option<&ObjectiveValue>, eta_grad: Option<&ObjectiveValue>, lr: f64, eta_minimized: bool) -> Result<()> {
        // eta first, then theta; both gradients were taken at the same parameters
        if let Some(g) = eta_grad.and_then(|v| v.eta_grad.as_ref()) {
            let descent = if eta_minimized { g.clone() } else { negate(g) };
            self.adam_eta.step(&mut self.model.eta, &descent, lr)?;
        }
        if let Some(g) = theta_grad.and_then(|v| v.theta_grad.as_ref()) {
            self.adam_theta.step(&mut self.model.theta, &negate(g), lr)?;
        }
        Ok(())
    }

    /// One update on minibatch `x` (already binary).
    pub fn step(&mut self, x: &Tensor, lr: f64, rng: &mut impl Rng) -> Result<StepStats> {
        let k = self.config.k;
        match self.config.method {
            Method::Vae | Method::Iwae => {
                let v = if self.config.method == Method::Vae {
                    objectives::elbo(&self.model, x, k, rng)?
                } else {
                    objectives::iwae(&self.model, x, k, rng)?
                };
                self.apply(Some(&v), Some(&v), lr, false)?;
                Ok(StepStats {
                    objective: v.value,
                    ess_mean: mean_finite(&v.ess),
                    skipped: 0,
                })
            }
            Method::Rem1 | Method::Rem2 => {
                let model = &self.model;
                let r_particles = sample_recognition(model, x, k, rng)?;
                let (theta_v1, alpha) = if self.config.method == Method::Rem1 {
                    let (v, w) = self_weighted_log_joint(model, x, &r_particles)?;
                    (Some(v), w)
                } else {
                    (None, importance_weights(model, x, &r_particles)?)
                };
                let proposals = proposals_from_weights(&r_particles, &alpha, self.config.epsilon)?;
                let s_particles = sample_proposals(&proposals, model.arch.latent_dim, k, rng)?;
                let (theta_v, beta) = match theta_v1 {
                    Some(v) => (v, importance_weights(model, x, &s_particles)?),
                    None => self_weighted_log_joint(model, x, &s_particles)?,
                };
                let eta_v = weighted_log_recognition(model, x, &s_particles, &beta)?;

                let bounds: Vec<f64> = alpha.iter().flatten().map(|w| w.log_mean_weight()).collect();
                let ess: Vec<f64> = alpha.iter().flatten().map(|w| w.ess()).collect();
                let skipped = alpha
                    .iter()
                    .zip(&beta)
                    .filter(|(a, b)| a.is_none() || b.is_none())
                    .count();
                self.apply(Some(&theta_v), Some(&eta_v), lr, true)?;
                Ok(StepStats {
                    objective: mean_finite(&bounds),
                    ess_mean: mean_finite(&ess),
                    skipped,
                })
            }
        }
    }

    /// Runs the next epoch over `train`; evaluation columns are left empty.
    pub fn train_epoch(&mut self, train: &Dataset) -> Result<EpochMetrics> {
        let start = Instant::now();
        let epoch = self.epochs_completed;
        let lr = lr_at_epoch(self.config.lr, epoch);
        let seed = self.config.seed;
        let mut particle_rng = stream_rng(seed, Stream::Particles, epoch as u64);
        let mut binarize_rng = stream_rng(seed, Stream::Binarize, epoch as u64);
        let (mut obj_sum, mut ess_sum, mut batches, mut bad_batches) = (0.0, 0.0, 0usize, 0usize);
        let mut ess_batches = 0usize;
        for (b, idx) in BatchIterator::new(train.len(), self.config.batch, seed, epoch as u64).enumerate() {
            let mut x = train.rows(&idx);
            if train.mode() == DataMode::Gray {
                x = stochastic_binarize(&x, &mut binarize_rng);
            }
            let abort = |msg: String| Error::TrainingAborted {
                epoch: epoch + 1,
                batch: b + 1,
                msg,
            };
            let stats = self.step(&x, lr, &mut particle_rng).map_err(|e| abort(e.to_string()))?;
            for (set, which) in [(&self.model.theta, "theta"), (&self.model.eta, "eta")] {
                if let Some(name) = set.first_non_finite() {
                    return Err(abort(format!("non-finite {which} parameter {name} after update")));
                }
            }
            obj_sum += stats.objective;
            if stats.ess_mean.is_finite() {
                ess_sum += stats.ess_mean;
                ess_batches += 1;
            }
            if stats.skipped > 0 {
                bad_batches += 1;
            }
            batches += 1;
        }
        self.epochs_completed += 1;
        let degenerate_rate = if batches == 0 { 0.0 } else { bad_batches as f64 / batches as f64 };
        if degenerate_rate > DEGENERATE_WARN_RATE {
            warn!(
                "epoch {}: {:.1}% of batches had degenerate importance weights",
                epoch + 1,
                100.0 * degenerate_rate
            );
        }
        Ok(EpochMetrics {
            epoch: epoch + 1,
            lr,
            train_obj: if batches == 0 { f64::NAN } else { obj_sum / batches as f64 },
            test_ll: None,
            kl_to_prior: None,
            ess_mean: if ess_batches == 0 { f64::NAN } else { ess_sum / ess_batches as f64 },
            degenerate_rate,
            wall_s: start.elapsed().as_secs_f64(),
        })
    }

    /// Held-out bounds at `eval_k` and the mean KL to the prior.
    pub fn evaluate(&self, test: &Tensor) -> Result<(LikelihoodEstimate, f64)> {
        let est = estimate_log_likelihood(&self.model, test, self.config.eval_k, self.config.seed, self.config.workers)?;
        Ok((est, collapse_diagnostic(&self.model, test)?))
    }

    /// Trains until `config.epochs` epochs are complete, evaluating on `test`
    /// every `eval_every` epochs and after the last one. `on_epoch` sees each
    /// finished epoch and, when one ran, its evaluation.
    pub fn run(
        &mut self,
        train: &Dataset,
        test: Option<&Tensor>,
        mut on_epoch: impl FnMut(&Trainer, &EpochMetrics, Option<&LikelihoodEstimate>) -> Result<()>,
    ) -> Result<Vec<EpochMetrics>> {
        let mut out = Vec::new();
        while self.epochs_completed < self.config.epochs {
            let start = Instant::now();
            let mut m = self.train_epoch(train)?;
            let mut estimate = None;
            if let Some(test) = test {
                if m.epoch % self.config.eval_every == 0 || m.epoch == self.config.epochs {
                    let (est, kl) = self.evaluate(test)?;
                    m.test_ll = Some(est.mean());
                    m.kl_to_prior = Some(kl);
                    estimate = Some(est);
                }
            }
            m.wall_s = start.elapsed().as_secs_f64();
            on_epoch(self, &m, estimate.as_ref())?;
            out.push(m);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DecoderKind, EncoderKind};

    fn tiny_config(method: Method) -> RunConfig {
        RunConfig {
            method,
            dataset: "toy".into(),
            k: 4,
            latent_dim: 2,
            hidden: 4,
            epochs: 2,
            batch: 3,
            eval_k: 5,
            seed: 11,
            ..RunConfig::default()
        }
    }

    fn toy_data() -> Dataset {
        let x: Vec<f64> = (0..8 * 6).map(|i| ((i * 7 + i / 5) % 3 == 0) as u8 as f64).collect();
        Dataset::new(Tensor::matrix(8, 6, x).unwrap(), DataMode::Binary, "toy").unwrap()
    }

    fn arch() -> Architecture {
        Architecture {
            data_dim: 6,
            latent_dim: 2,
            hidden: 4,
            decoder: DecoderKind::Bernoulli,
            encoder: EncoderKind::Mlp,
        }
    }

    #[test]
    fn every_method_runs_and_is_deterministic() {
        for method in Method::ALL {
            let run = || {
                let mut t = Trainer::new(tiny_config(method), arch()).unwrap();
                let m = t.run(&toy_data(), Some(toy_data().data()), |_, _, _| Ok(())).unwrap();
                (t.checkpoint().to_bytes(), m)
            };
            let (a, ma) = run();
            let (b, mb) = run();
            assert_eq!(a, b, "{method}");
            assert_eq!(ma.len(), 2);
            assert_eq!(ma[0].train_obj, mb[0].train_obj);
            assert!(ma[1].test_ll.unwrap().is_finite());
        }
    }

    #[test]
    fn zero_epochs_keeps_initialization() {
        let mut cfg = tiny_config(Method::Rem1);
        cfg.epochs = 0;
        let mut t = Trainer::new(cfg, arch()).unwrap();
        let init = t.model.clone();
        assert!(t.run(&toy_data(), None, |_, _, _| Ok(())).unwrap().is_empty());
        assert_eq!(t.model, init);
    }

    #[test]
    fn csv_row_has_every_column() {
        let m = EpochMetrics {
            epoch: 1,
            lr: 1e-3,
            train_obj: -3.5,
            test_ll: None,
            kl_to_prior: Some(0.25),
            ess_mean: 2.0,
            degenerate_rate: 0.0,
            wall_s: 1.0,
        };
        let row = m.csv_row(&tiny_config(Method::Vae));
        assert_eq!(row.split(',').count(), METRICS_HEADER.split(',').count());
        assert!(row.contains(",,0.25,"));
    }
}
