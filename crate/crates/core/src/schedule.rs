//! Optimization schedules: linear-warmup step-decay for detector
//! training and the two-optimizer plan for architecture search.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub warmup_start_lr: f64,
    pub peak_lr: f64,
    pub warmup_iters: usize,
    /// Epochs at which the lr is divided by 10, strictly increasing.
    pub decay_epochs: Vec<usize>,
    pub total_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

// Vec field blocks derive(Copy); keep Clone semantics explicit.
impl TrainSchedule {
    pub fn paper() -> Self {
        Self {
            warmup_start_lr: 1e-6,
            peak_lr: 0.015,
            warmup_iters: 500,
            decay_epochs: vec![25, 40],
            total_epochs: 50,
            momentum: 0.9,
            weight_decay: 0.0005,
            batch_size: 48,
        }
    }

    /// Same shape at a size that finishes on one workstation: shorter
    /// warmup, decays at the same 50%/80% marks of a 10-epoch run.
    pub fn desk() -> Self {
        Self {
            warmup_start_lr: 1e-6,
            peak_lr: 0.015,
            warmup_iters: 50,
            decay_epochs: vec![5, 8],
            total_epochs: 10,
            momentum: 0.9,
            weight_decay: 0.0005,
            batch_size: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_start_lr > 0.0 && self.peak_lr >= self.warmup_start_lr) {
            return Err(Error::config("need 0 < warmup_start_lr <= peak_lr"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !self.decay_epochs.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::config("decay_epochs must be strictly increasing"));
        }
        if self.decay_epochs.last().is_some_and(|&e| e >= self.total_epochs) {
            return Err(Error::config("decay epochs must precede total_epochs"));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::config("bad momentum or weight_decay"));
        }
        Ok(())
    }
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule::paper()
    }
}

/// Learning rate at a global iteration index: linear ramp from
/// `warmup_start_lr` to `peak_lr` over `warmup_iters` steps, then flat
/// with a /10 drop at the first iteration of each decay epoch.
pub fn lr_at(iter: usize, iters_per_epoch: usize, sched: &TrainSchedule) -> f64 {
    if iter < sched.warmup_iters {
        let t = iter as f64 / sched.warmup_iters as f64;
        return sched.warmup_start_lr + t * (sched.peak_lr - sched.warmup_start_lr);
    }
    let epoch = if iters_per_epoch == 0 { 0 } else { iter / iters_per_epoch };
    let drops = sched.decay_epochs.iter().filter(|&&e| epoch >= e).count();
    sched.peak_lr / 10f64.powi(drops as i32)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchSchedule {
    pub total_epochs: usize,
    /// Arch params stay bitwise frozen for epochs < this (0-based).
    pub arch_update_start_epoch: usize,
    pub arch_lr: f64,
    pub arch_weight_decay: f64,
    pub weight_lr: f64,
    pub weight_momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl SearchSchedule {
    pub fn paper() -> Self {
        Self {
            total_epochs: 50,
            arch_update_start_epoch: 20,
            arch_lr: 0.01,
            arch_weight_decay: 0.0005,
            weight_lr: 0.015,
            weight_momentum: 0.9,
            weight_decay: 0.0005,
            batch_size: 48,
        }
    }

    pub fn desk() -> Self {
        Self {
            total_epochs: 10,
            arch_update_start_epoch: 4,
            batch_size: 8,
            ..SearchSchedule::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        if self.arch_update_start_epoch >= self.total_epochs {
            return Err(Error::config(
                "arch updates must start before the last epoch",
            ));
        }
        if self.arch_lr <= 0.0 || self.weight_lr <= 0.0 {
            return Err(Error::config("learning rates must be positive"));
        }
        Ok(())
    }
}

impl Default for SearchSchedule {
    fn default() -> Self {
        SearchSchedule::paper()
    }
}

/// Abort threshold shared by search and training loops.
pub const DIVERGENCE_LOSS_LIMIT: f64 = 1e4;

pub fn diverged(loss: f64) -> bool {
    !loss.is_finite() || loss > DIVERGENCE_LOSS_LIMIT
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent oracle written directly off the schedule prose.
    fn lr_oracle(iter: usize, iters_per_epoch: usize) -> f64 {
        if iter < 500 {
            return 1e-6 + (0.015 - 1e-6) * (iter as f64 / 500.0);
        }
        let epoch = iter / iters_per_epoch;
        if epoch >= 40 {
            0.00015
        } else if epoch >= 25 {
            0.0015
        } else {
            0.015
        }
    }

    #[test]
    fn lr_matches_oracle_every_iteration() {
        let sched = TrainSchedule::paper();
        let iters_per_epoch = 120;
        for iter in 0..50 * iters_per_epoch {
            assert_eq!(
                lr_at(iter, iters_per_epoch, &sched),
                lr_oracle(iter, iters_per_epoch),
                "iter {iter}"
            );
        }
    }

    #[test]
    fn lr_named_points() {
        let s = TrainSchedule::paper();
        assert_eq!(lr_at(0, 120, &s), 1e-6);
        assert_eq!(lr_at(500, 120, &s), 0.015);
        assert_eq!(lr_at(25 * 120, 120, &s), 0.0015);
        assert_eq!(lr_at(40 * 120, 120, &s), 0.00015);
    }

    #[test]
    fn warmup_continuous_at_boundary() {
        let s = TrainSchedule::paper();
        let before = lr_at(499, 1000, &s);
        let at = lr_at(500, 1000, &s);
        assert!(at - before < (0.015 - 1e-6) / 500.0 + 1e-15);
        assert_eq!(at, 0.015);
    }

    #[test]
    fn ramp_is_monotone() {
        let s = TrainSchedule::desk();
        let mut prev = 0.0;
        for iter in 0..s.warmup_iters + 1 {
            let lr = lr_at(iter, 100, &s);
            assert!(lr > prev);
            prev = lr;
        }
    }

    #[test]
    fn presets_validate() {
        TrainSchedule::paper().validate().unwrap();
        TrainSchedule::desk().validate().unwrap();
        SearchSchedule::paper().validate().unwrap();
        SearchSchedule::desk().validate().unwrap();
    }

    #[test]
    fn bad_configs_rejected() {
        let mut s = TrainSchedule::paper();
        s.decay_epochs = vec![40, 25];
        assert!(s.validate().is_err());
        let mut s = TrainSchedule::paper();
        s.decay_epochs = vec![25, 55];
        assert!(s.validate().is_err());
        let mut q = SearchSchedule::desk();
        q.arch_update_start_epoch = 10;
        assert!(q.validate().is_err());
    }

    #[test]
    fn divergence_guard() {
        assert!(diverged(f64::NAN));
        assert!(diverged(f64::INFINITY));
        assert!(diverged(1e5));
        assert!(!diverged(9999.0));
    }
}
