//! Learning-rate schedules and the focal loss shared by the training loops.

use serde::{Deserialize, Serialize};

pub const FOCAL_EPS: f64 = 1e-7;

/// Reduce-on-plateau schedule. The reference metric is seeded with the
/// pre-training validation score, so an epoch only counts as progress when it
/// beats everything seen so far including that baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub current_lr: f64,
    pub best_metric: f64,
    pub epochs_since_improvement: usize,
    pub factor: f64,
    pub patience: usize,
}

impl PlateauScheduler {
    pub fn new(lr0: f64, factor: f64, patience: usize, baseline: f64) -> Self {
        assert!(lr0 > 0.0 && factor > 1.0 && patience >= 1, "invalid plateau schedule");
        Self { current_lr: lr0, best_metric: baseline, epochs_since_improvement: 0, factor, patience }
    }

    /// Records one epoch's metric and returns the learning rate for the next.
    pub fn step(&mut self, metric: f64) -> f64 {
        if metric > self.best_metric {
            self.best_metric = metric;
            self.epochs_since_improvement = 0;
        } else {
            self.epochs_since_improvement += 1;
            if self.epochs_since_improvement >= self.patience {
                self.current_lr /= self.factor;
                self.epochs_since_improvement = 0;
            }
        }
        self.current_lr
    }
}

/// Linear ramp over the first epoch: `lr0 (step + 1) / steps`, then `lr0`.
pub fn warmup_lr(step: usize, steps_in_first_epoch: usize, lr0: f64) -> f64 {
    if steps_in_first_epoch == 0 || step + 1 >= steps_in_first_epoch {
        lr0
    } else {
        lr0 * (step + 1) as f64 / steps_in_first_epoch as f64
    }
}

/// `lr0 (1 + cos(pi epoch / total)) / 2`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, lr0: f64) -> f64 {
    if total_epochs == 0 {
        return lr0;
    }
    let e = epoch.min(total_epochs) as f64;
    lr0 * (1.0 + (std::f64::consts::PI * e / total_epochs as f64).cos()) / 2.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FocalParams {
    pub gamma: f64,
    pub alpha: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self { gamma: 2.0, alpha: 0.75 }
    }
}

fn p_t(p: f64, y: u8) -> f64 {
    let p = p.clamp(FOCAL_EPS, 1.0 - FOCAL_EPS);
    if y == 1 {
        p
    } else {
        1.0 - p
    }
}

/// `-alpha (1 - p_t)^gamma ln p_t` with `p_t = p` for `y = 1`, else `1 - p`.
pub fn focal_loss(p: f64, y: u8, gamma: f64, alpha: f64) -> f64 {
    let pt = p_t(p, y);
    -alpha * (1.0 - pt).powf(gamma) * pt.ln()
}

/// Focal loss of `sigmoid(z)` and its derivative with respect to `z`.
pub fn focal_loss_logit(z: f64, y: u8, params: FocalParams) -> (f64, f64) {
    let FocalParams { gamma, alpha } = params;
    let p = sigmoid(z);
    let pt = p_t(p, y);
    let loss = -alpha * (1.0 - pt).powf(gamma) * pt.ln();
    let clamped = !(FOCAL_EPS..=1.0 - FOCAL_EPS).contains(&p);
    if clamped {
        return (loss, 0.0);
    }
    let q = 1.0 - pt;
    let dl_dpt = -alpha * (q.powf(gamma) / pt - gamma * q.powf(gamma - 1.0) * pt.ln());
    let dpt_dz = if y == 1 { p * (1.0 - p) } else { -p * (1.0 - p) };
    (loss, dl_dpt * dpt_dz)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plateau_trace_under_constant_metric() {
        let mut s = PlateauScheduler::new(0.002, 2.0, 5, 0.4);
        let lrs: Vec<f64> = (0..11).map(|_| s.step(0.4)).collect();
        assert_eq!(lrs[3], 0.002);
        assert_eq!(lrs[4], 0.001);
        assert_eq!(lrs[9], 0.0005);
        assert_eq!(lrs[10], 0.0005);
    }

    #[test]
    fn plateau_keeps_lr_while_improving() {
        let mut s = PlateauScheduler::new(0.002, 2.0, 5, 0.0);
        for e in 1..100 {
            assert_eq!(s.step(e as f64 / 100.0), 0.002);
        }
    }

    #[test]
    fn warmup_ramp() {
        assert_eq!(warmup_lr(9, 10, 0.002), 0.002);
        assert!((warmup_lr(0, 10, 0.002) - 0.0002).abs() < 1e-18);
        assert!((warmup_lr(4, 10, 0.002) - 0.002 * 5.0 / 10.0).abs() < 1e-18);
        assert_eq!(warmup_lr(50, 10, 0.002), 0.002);
    }

    #[test]
    fn cosine_points_and_symmetry() {
        assert!((cosine_lr(0, 100, 2e-5) - 2e-5).abs() < 1e-12);
        assert!((cosine_lr(50, 100, 2e-5) - 1e-5).abs() < 1e-12);
        assert!(cosine_lr(100, 100, 2e-5).abs() < 1e-12);
        for e in 0..=100 {
            assert!((cosine_lr(e, 100, 2e-5) + cosine_lr(100 - e, 100, 2e-5) - 2e-5).abs() < 1e-18);
        }
    }

    #[test]
    fn focal_reference_values() {
        assert!((focal_loss(0.5, 1, 0.0, 1.0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((focal_loss(0.9, 1, 2.0, 1.0) - 0.01 * -(0.9f64).ln()).abs() < 1e-15);
        assert!(focal_loss(1.0, 1, 2.0, 1.0) < 1e-12);
        assert!(focal_loss(0.0, 1, 0.0, 1.0).is_finite());
    }

    #[test]
    fn focal_logit_gradient() {
        let params = FocalParams::default();
        for &z in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            for y in [0u8, 1] {
                let (_, g) = focal_loss_logit(z, y, params);
                let h = 1e-6;
                let num = (focal_loss_logit(z + h, y, params).0 - focal_loss_logit(z - h, y, params).0) / (2.0 * h);
                assert!((g - num).abs() < 1e-6, "z={z} y={y}: {g} vs {num}");
            }
        }
    }
}
