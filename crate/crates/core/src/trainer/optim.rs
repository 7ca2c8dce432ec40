//! Warmup-cosine schedule and decoupled-weight-decay Adam.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use super::TrainConfig;
use crate::tape::Mat;

/// Linear ramp from 0 to `lr` over `warmup_steps`, then cosine decay to
/// zero at `total`. The base group scales this by `coefficient_lr`.
pub fn lr_at(step: u64, cfg: &TrainConfig, total: u64) -> f64 {
    let w = cfg.warmup_steps;
    if step < w {
        return cfg.lr * step as f64 / w as f64;
    }
    let span = total.saturating_sub(w);
    if span == 0 {
        return cfg.lr;
    }
    let progress = ((step - w) as f64 / span as f64).min(1.0);
    0.5 * (1.0 + (PI * progress).cos()) * cfg.lr
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Updates applied so far; drives bias correction.
    pub t: u64,
    /// Length of the full run, for the schedule.
    pub total_steps: u64,
    /// First and second moments keyed by qualified parameter name.
    pub moments: BTreeMap<String, (Mat, Mat)>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            beta1: cfg.betas[0],
            beta2: cfg.betas[1],
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            t: 0,
            total_steps: 0,
            moments: BTreeMap::new(),
        }
    }

    /// One update of `value` given its gradient. Callers bump `t` once per
    /// step before the first call. Decay scales the weight before the
    /// Adam step and never touches the moments.
    pub fn update(&mut self, key: &str, value: &mut Mat, grad: &Mat, lr: f64, decay: bool) {
        assert!(self.t > 0, "bump t before updating");
        assert_eq!(value.dim(), grad.dim(), "gradient shape for {key}");
        let (m, v) = self
            .moments
            .entry(key.to_string())
            .or_insert_with(|| (Mat::zeros(grad.dim()), Mat::zeros(grad.dim())));
        let (b1, b2) = (self.beta1, self.beta2);
        m.zip_mut_with(grad, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
        v.zip_mut_with(grad, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
        if decay && self.weight_decay > 0.0 {
            value.mapv_inplace(|p| p * (1.0 - lr * self.weight_decay));
        }
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let eps = self.eps;
        ndarray::Zip::from(value).and(&*m).and(&*v).for_each(|p, &m, &v| {
            *p -= lr * (m / c1) / ((v / c2).sqrt() + eps);
        });
    }
}
