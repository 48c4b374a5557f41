//! Adam and the warmup-then-cosine learning-rate schedule.

use ndarray::{Array, ArrayD, Dimension};
use serde::{Deserialize, Serialize};

/// Adam with bias correction. Moment buffers are allocated lazily per slot, and
/// a slot is the position of a tensor in a fixed visiting order.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl Adam {
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Advances the step counter; call once before the `update`s of a step.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn update<D: Dimension>(&mut self, slot: usize, value: &mut Array<f64, D>, grad: &Array<f64, D>, lr: f64) {
        assert!(self.t > 0, "begin_step must precede update");
        while self.m.len() <= slot {
            self.m.push(ArrayD::zeros(ndarray::IxDyn(&[0])));
            self.v.push(ArrayD::zeros(ndarray::IxDyn(&[0])));
        }
        if self.m[slot].shape() != value.shape() {
            self.m[slot] = ArrayD::zeros(value.shape());
            self.v[slot] = ArrayD::zeros(value.shape());
        }
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let eps = self.eps;
        let m = self.m[slot].view_mut().into_dimensionality::<D>().expect("same rank");
        let v = self.v[slot].view_mut().into_dimensionality::<D>().expect("same rank");
        ndarray::Zip::from(value)
            .and(m)
            .and(v)
            .and(grad)
            .for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
    }
}

/// Linear warmup measured in steps over the first `warmup_epochs`, then cosine
/// decay measured in epochs, reaching zero at the final epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
}

impl LrSchedule {
    pub fn at(&self, epoch: usize, step_in_epoch: usize) -> f64 {
        let spe = self.steps_per_epoch.max(1);
        if epoch < self.warmup_epochs {
            let g = (epoch * spe + step_in_epoch) as f64;
            return self.base * g / (self.warmup_epochs * spe) as f64;
        }
        let span = self.epochs.saturating_sub(1).saturating_sub(self.warmup_epochs);
        let progress = if span == 0 {
            0.0
        } else {
            ((epoch - self.warmup_epochs) as f64 / span as f64).min(1.0)
        };
        self.base * (1.0 + (std::f64::consts::PI * progress).cos()) / 2.0
    }

    /// Rate at the first step of `epoch`.
    pub fn epoch_start(&self, epoch: usize) -> f64 {
        self.at(epoch, 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    fn schedule() -> LrSchedule {
        LrSchedule {
            base: 1e-3,
            warmup_epochs: 10,
            epochs: 250,
            steps_per_epoch: 4,
        }
    }

    #[test]
    fn warmup_is_linear() {
        let s = schedule();
        assert!((s.epoch_start(5) - 0.5e-3).abs() < 1e-15);
        assert!((s.at(2, 2) - 1e-3 * 10.0 / 40.0).abs() < 1e-15);
        assert_eq!(s.epoch_start(0), 0.0);
    }

    #[test]
    fn cosine_reaches_zero_at_final_epoch() {
        let s = schedule();
        assert!((s.epoch_start(10) - 1e-3).abs() < 1e-15);
        assert!(s.epoch_start(249).abs() < 1e-18);
        let mid = s.epoch_start(10 + 239 / 2);
        assert!(mid > 0.4e-3 && mid < 0.6e-3);
    }

    #[test]
    fn single_decay_epoch_keeps_base_rate() {
        let s = LrSchedule {
            base: 1.0,
            warmup_epochs: 0,
            epochs: 1,
            steps_per_epoch: 3,
        };
        assert_eq!(s.epoch_start(0), 1.0);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut opt = Adam::default();
        let mut p = arr1(&[1.0, -2.0]).into_dyn();
        let g = arr1(&[0.3, -5.0]).into_dyn();
        opt.begin_step();
        opt.update(0, &mut p, &g, 0.1);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut opt = Adam::default();
        let mut p = arr1(&[3.0, -4.0]).into_dyn();
        for _ in 0..2000 {
            let g = p.mapv(|x| 2.0 * x);
            opt.begin_step();
            opt.update(0, &mut p, &g, 0.05);
        }
        assert!(p.iter().all(|x| x.abs() < 1e-3), "{p}");
    }
}
