//! Symmetric contrastive loss between modality and text embeddings.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::Mat;

pub const INIT_TAU: f64 = 0.07;
pub const TAU_MIN: f64 = 0.005;
pub const TAU_MAX: f64 = 0.5;
const NORM_TOL: f64 = 1e-6;

/// Row `i` of `modality` and row `i` of `text` form a positive pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    modality: Mat,
    text: Mat,
}

impl ContrastiveBatch {
    pub fn new(modality: Mat, text: Mat) -> Result<Self> {
        let b = Self::new_unchecked(modality, text)?;
        for (side, m) in [("modality", &b.modality), ("text", &b.text)] {
            for (i, r) in m.rows().into_iter().enumerate() {
                let n = r.dot(&r).sqrt();
                if (n - 1.0).abs() > NORM_TOL {
                    return Err(Error::invalid(format!("{side} row {i} has norm {n}")));
                }
            }
        }
        Ok(b)
    }

    /// Shape and finiteness checks only, for probing the loss off the
    /// unit sphere.
    pub fn new_unchecked(modality: Mat, text: Mat) -> Result<Self> {
        if modality.nrows() == 0 {
            return Err(Error::invalid("contrastive batch is empty"));
        }
        if modality.dim() != text.dim() {
            return Err(Error::shape(format!(
                "modality {:?} vs text {:?}",
                modality.dim(),
                text.dim()
            )));
        }
        if modality.iter().chain(text.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite embedding".into()));
        }
        Ok(Self { modality, text })
    }

    pub fn len(&self) -> usize {
        self.modality.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.modality.nrows() == 0
    }

    pub fn modality(&self) -> &Mat {
        &self.modality
    }

    pub fn text(&self) -> &Mat {
        &self.text
    }
}

/// `τ = exp(−log_inv_temp)`, kept within `[TAU_MIN, TAU_MAX]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureParam {
    pub log_inv_temp: f64,
    pub learnable: bool,
}

impl Default for TemperatureParam {
    fn default() -> Self {
        Self::learnable(INIT_TAU)
    }
}

impl TemperatureParam {
    pub fn learnable(tau: f64) -> Self {
        Self {
            log_inv_temp: -tau.ln(),
            learnable: true,
        }
        .clamped()
    }

    pub fn fixed(tau: f64) -> Self {
        Self {
            learnable: false,
            ..Self::learnable(tau)
        }
    }

    pub fn tau(&self) -> f64 {
        (-self.log_inv_temp).exp()
    }

    fn clamped(mut self) -> Self {
        let (lo, hi) = (-TAU_MAX.ln(), -TAU_MIN.ln());
        self.log_inv_temp = self.log_inv_temp.clamp(lo, hi);
        self
    }
}

/// Adds an optimizer step to a learnable temperature and re-clamps it.
pub fn update_temperature(temp: TemperatureParam, step: f64) -> TemperatureParam {
    if !temp.learnable {
        return temp;
    }
    TemperatureParam {
        log_inv_temp: temp.log_inv_temp + step,
        ..temp
    }
    .clamped()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub l_m2t: f64,
    pub l_t2m: f64,
    pub total: f64,
    /// `∂total/∂modality`
    pub grad_modality: Mat,
    /// `∂total/∂text`
    pub grad_text: Mat,
    /// `∂total/∂log_inv_temp`; zero for a fixed temperature.
    pub grad_log_inv_temp: f64,
}

/// Row-wise softmax and log-sum-exp with the row maximum subtracted.
fn softmax_rows(s: &Mat) -> (Mat, Vec<f64>) {
    let mut p = s.clone();
    let mut lse = Vec::with_capacity(s.nrows());
    for mut row in p.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
        lse.push(m + z.ln());
    }
    (p, lse)
}

/// `total = (L_M2T + L_T2M) / 2` with analytic gradients.
pub fn contrastive_loss(batch: &ContrastiveBatch, temp: &TemperatureParam) -> Result<LossOutput> {
    let k = batch.len();
    let inv_tau = temp.log_inv_temp.exp();
    let logits = batch.modality.dot(&batch.text.t()) * inv_tau;
    let (p_rows, lse_rows) = softmax_rows(&logits);
    let (p_cols_t, lse_cols) = softmax_rows(&logits.t().to_owned());
    let kf = k as f64;
    let diag: Vec<f64> = (0..k).map(|i| logits[[i, i]]).collect();
    let l_m2t = lse_rows.iter().zip(&diag).map(|(l, d)| l - d).sum::<f64>() / kf;
    let l_t2m = lse_cols.iter().zip(&diag).map(|(l, d)| l - d).sum::<f64>() / kf;
    let total = 0.5 * (l_m2t + l_t2m);
    if !total.is_finite() {
        return Err(Error::Numeric(format!("loss is {total}")));
    }

    // ∂total/∂logits = (P_row + P_colᵀ − 2I) / 2K
    let mut g: Array2<f64> = &p_rows + &p_cols_t.t();
    g.diag_mut().mapv_inplace(|v| v - 2.0);
    g.mapv_inplace(|v| v / (2.0 * kf));
    let grad_modality = g.dot(&batch.text) * inv_tau;
    let grad_text = g.t().dot(&batch.modality) * inv_tau;
    let grad_log_inv_temp = if temp.learnable {
        (&g * &logits).sum()
    } else {
        0.0
    };
    debug_assert_eq!(g.len_of(Axis(0)), k);
    Ok(LossOutput {
        l_m2t,
        l_t2m,
        total,
        grad_modality,
        grad_text,
        grad_log_inv_temp,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::normal;
    use crate::seed::rng_from;
    use ndarray::array;
    use proptest::prelude::*;

    fn unit_rows(k: usize, d: usize, seed: u64) -> Mat {
        let mut m = normal(&mut rng_from(seed), k, d, 1.0);
        for mut r in m.rows_mut() {
            let n = r.dot(&r).sqrt();
            r.mapv_inplace(|v| v / n);
        }
        m
    }

    #[test]
    fn single_pair_is_zero() {
        let x = unit_rows(1, 5, 1);
        let y = unit_rows(1, 5, 2);
        let out = contrastive_loss(&ContrastiveBatch::new(x, y).unwrap(), &TemperatureParam::default()).unwrap();
        assert_eq!(out.l_m2t, 0.0);
        assert_eq!(out.l_t2m, 0.0);
    }

    #[test]
    fn identical_embeddings_give_ln_k() {
        for k in [2usize, 5, 16] {
            let row = unit_rows(1, 4, 3);
            let x = Mat::from_shape_fn((k, 4), |(_, j)| row[[0, j]]);
            let out = contrastive_loss(&ContrastiveBatch::new(x.clone(), x).unwrap(), &TemperatureParam::default()).unwrap();
            assert!((out.total - (k as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn orthogonal_pair_hand_value() {
        let x = array![[1.0, 0.0], [0.0, 1.0]];
        let out = contrastive_loss(&ContrastiveBatch::new(x.clone(), x).unwrap(), &TemperatureParam::fixed(0.07)).unwrap();
        // Direct summation, no log-sum-exp shortcut.
        let a = (1.0f64 / 0.07).exp();
        let expect = -(a / (a + 1.0)).ln();
        assert!((out.l_m2t - expect).abs() < 1e-15);
        // ln(1 + e^{-1/0.07}) evaluated with log1p.
        assert!((out.l_m2t - 6.248_747_557_120_388e-7).abs() < 1e-15);
        assert_eq!(out.grad_log_inv_temp, 0.0);
    }

    #[test]
    fn temperature_contract() {
        let t = TemperatureParam::default();
        assert!((t.tau() - 0.07).abs() < 1e-16, "{}", t.tau());
        assert!(t.learnable);
        let low = update_temperature(t, 100.0);
        assert!((low.tau() - TAU_MIN).abs() < 1e-15);
        let high = update_temperature(t, -100.0);
        assert!((high.tau() - TAU_MAX).abs() < 1e-15);
        for tau in [0.05, 0.1] {
            let f = TemperatureParam::fixed(tau);
            assert_eq!(update_temperature(f, 1.0), f);
            let out = contrastive_loss(
                &ContrastiveBatch::new(unit_rows(3, 4, 1), unit_rows(3, 4, 2)).unwrap(),
                &f,
            )
            .unwrap();
            assert_eq!(out.grad_log_inv_temp, 0.0);
        }
    }

    #[test]
    fn validation() {
        assert!(ContrastiveBatch::new(Mat::zeros((0, 3)), Mat::zeros((0, 3))).is_err());
        assert!(ContrastiveBatch::new(unit_rows(2, 3, 1), unit_rows(3, 3, 1)).is_err());
        assert!(ContrastiveBatch::new(unit_rows(2, 3, 1) * 2.0, unit_rows(2, 3, 1)).is_err());
        let mut bad = unit_rows(2, 3, 1);
        bad[[0, 0]] = f64::NAN;
        assert!(matches!(ContrastiveBatch::new_unchecked(bad, unit_rows(2, 3, 1)), Err(Error::Numeric(_))));
    }

    #[test]
    fn gradients_match_central_differences() {
        let (k, d) = (4, 8);
        let x = unit_rows(k, d, 10);
        let y = unit_rows(k, d, 11);
        let temp = TemperatureParam::learnable(0.2);
        let out = contrastive_loss(&ContrastiveBatch::new(x.clone(), y.clone()).unwrap(), &temp).unwrap();
        let h = 1e-6;
        let f = |x: &Mat, y: &Mat, t: &TemperatureParam| {
            contrastive_loss(&ContrastiveBatch::new_unchecked(x.clone(), y.clone()).unwrap(), t)
                .unwrap()
                .total
        };
        let rel = |fd: f64, an: f64| (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
        for i in 0..k {
            for j in 0..d {
                let mut xp = x.clone();
                xp[[i, j]] += h;
                let mut xm = x.clone();
                xm[[i, j]] -= h;
                let fd = (f(&xp, &y, &temp) - f(&xm, &y, &temp)) / (2.0 * h);
                assert!(rel(fd, out.grad_modality[[i, j]]) < 1e-4);
                let mut yp = y.clone();
                yp[[i, j]] += h;
                let mut ym = y.clone();
                ym[[i, j]] -= h;
                let fd = (f(&x, &yp, &temp) - f(&x, &ym, &temp)) / (2.0 * h);
                assert!(rel(fd, out.grad_text[[i, j]]) < 1e-4);
            }
        }
        let tp = TemperatureParam { log_inv_temp: temp.log_inv_temp + h, ..temp };
        let tm = TemperatureParam { log_inv_temp: temp.log_inv_temp - h, ..temp };
        let fd = (f(&x, &y, &tp) - f(&x, &y, &tm)) / (2.0 * h);
        assert!(rel(fd, out.grad_log_inv_temp) < 1e-4);
    }

    proptest! {
        #[test]
        fn swap_symmetry(seed in any::<u64>(), k in 1usize..8) {
            let x = unit_rows(k, 6, seed);
            let y = unit_rows(k, 6, seed ^ 0xff);
            let t = TemperatureParam::default();
            let xy = contrastive_loss(&ContrastiveBatch::new(x.clone(), y.clone()).unwrap(), &t).unwrap();
            let yx = contrastive_loss(&ContrastiveBatch::new(y, x).unwrap(), &t).unwrap();
            prop_assert_eq!(xy.l_m2t, yx.l_t2m);
            prop_assert_eq!(xy.l_t2m, yx.l_m2t);
            prop_assert!(xy.total >= 0.0);
        }

        #[test]
        fn permutation_equivariance(seed in any::<u64>(), k in 2usize..8) {
            use rand::seq::SliceRandom;
            let x = unit_rows(k, 6, seed);
            let y = unit_rows(k, 6, seed.wrapping_add(1));
            let mut perm: Vec<usize> = (0..k).collect();
            perm.shuffle(&mut rng_from(seed));
            let t = TemperatureParam::default();
            let a = contrastive_loss(&ContrastiveBatch::new(x.clone(), y.clone()).unwrap(), &t).unwrap();
            let b = contrastive_loss(
                &ContrastiveBatch::new(x.select(Axis(0), &perm), y.select(Axis(0), &perm)).unwrap(),
                &t,
            )
            .unwrap();
            prop_assert!((a.total - b.total).abs() < 1e-12);
        }
    }
}
