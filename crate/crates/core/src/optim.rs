//! Adam and the stepwise learning-rate decay.

use crate::error::{Error, Result};
use crate::model::ParamSet;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Learning rate for a 0-based epoch: `base * 10^(-i/7)` where `i` is the
/// largest integer with `sum_{j<i} 3^j <= epoch`, capped at 7.
pub fn lr_at_epoch(base: f64, epoch: usize) -> f64 {
    let mut i = 0;
    let mut passed = 0usize;
    while i < 7 {
        passed += 3usize.pow(i as u32);
        if passed > epoch {
            break;
        }
        i += 1;
    }
    base * 10f64.powf(-(i as f64) / 7.0)
}

/// Moment estimates for one parameter set. Maximization callers negate their
/// gradient before `step`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ParamSet,
    pub v: ParamSet,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    /// One descent step on `params` along `grad`.
    pub fn step(&mut self, params: &mut ParamSet, grad: &ParamSet, lr: f64) -> Result<()> {
        if let Some(name) = grad.first_non_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        for (name, p) in params.iter_mut() {
            let g = grad
                .get(name)
                .ok_or_else(|| Error::Config(format!("no gradient for parameter {name}")))?;
            let m = self.m.get_mut(name).expect("moments mirror params");
            let v = self.v.get_mut(name).expect("moments mirror params");
            if g.shape() != p.shape() {
                return Err(Error::shape("AdamState::step", &[p.shape(), g.shape()]));
            }
            for (((p, g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

/// Negated copy, for turning a maximized objective's gradient into a descent direction.
pub fn negate(grad: &ParamSet) -> ParamSet {
    let mut out = grad.clone();
    for (_, t) in out.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = -*v);
    }
    out
}
