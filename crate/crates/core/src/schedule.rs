//! Learning-rate, weight-decay and EMA-momentum schedules.
//!
//! Each schedule is a closed-form function of a real-valued step; the
//! integer-step accessors evaluate it and reject steps outside the run.

use std::f64::consts::PI;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    /// Zero means "derive from the manifest size and batch size".
    pub steps_per_epoch: usize,
    pub final_lr: f64,
    pub wd_start: f64,
    pub wd_end: f64,
    pub ema_start: f64,
    pub ema_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            base_lr: 5e-4,
            warmup_epochs: 5,
            total_epochs: 30,
            steps_per_epoch: 0,
            final_lr: 1e-6,
            wd_start: 0.04,
            wd_end: 0.1,
            ema_start: 0.996,
            ema_end: 1.0,
        }
    }
}

fn cosine(start: f64, end: f64, progress: f64) -> f64 {
    end + (start - end) * 0.5 * (1.0 + (PI * progress).cos())
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.total_epochs >= 1,
            Validation,
            "total_epochs must be at least 1"
        );
        ensure!(
            self.warmup_epochs <= self.total_epochs,
            Validation,
            "warmup_epochs {} exceeds total_epochs {}",
            self.warmup_epochs,
            self.total_epochs
        );
        ensure!(
            self.base_lr >= 0.0 && self.final_lr >= 0.0 && self.wd_start >= 0.0,
            Validation,
            "rates must be non-negative"
        );
        ensure!(
            self.wd_start <= self.wd_end,
            Validation,
            "wd_start must not exceed wd_end"
        );
        ensure!(
            0.0 <= self.ema_start && self.ema_start <= self.ema_end && self.ema_end <= 1.0,
            Validation,
            "EMA endpoints must satisfy 0 <= ema_start <= ema_end <= 1"
        );
        Ok(())
    }

    pub fn total_steps(&self) -> u64 {
        (self.total_epochs * self.steps_per_epoch) as u64
    }

    pub fn warmup_steps(&self) -> u64 {
        (self.warmup_epochs * self.steps_per_epoch) as u64
    }

    fn check(&self, step: u64) -> Result<()> {
        ensure!(
            self.steps_per_epoch >= 1,
            Precondition,
            "steps_per_epoch has not been resolved"
        );
        ensure!(
            step < self.total_steps(),
            Precondition,
            "step {step} outside [0, {})",
            self.total_steps()
        );
        Ok(())
    }

    /// Linear warmup to `base_lr`, then cosine decay reaching `final_lr` at
    /// the last step.
    pub fn lr_at_time(&self, t: f64) -> f64 {
        let w = self.warmup_steps() as f64;
        if t < w {
            return self.base_lr * t / w;
        }
        let span = self.total_steps() as f64 - 1.0 - w;
        let progress = if span > 0.0 {
            ((t - w) / span).min(1.0)
        } else {
            0.0
        };
        cosine(self.base_lr, self.final_lr, progress)
    }

    pub fn wd_at_time(&self, t: f64) -> f64 {
        cosine(self.wd_start, self.wd_end, self.ramp_progress(t))
    }

    pub fn ema_at_time(&self, t: f64) -> f64 {
        cosine(self.ema_start, self.ema_end, self.ramp_progress(t))
    }

    fn ramp_progress(&self, t: f64) -> f64 {
        let last = self.total_steps() as f64 - 1.0;
        if last > 0.0 {
            (t / last).clamp(0.0, 1.0)
        } else {
            0.0
        }
    }

    pub fn lr_at(&self, step: u64) -> Result<f64> {
        self.check(step)?;
        Ok(self.lr_at_time(step as f64))
    }

    pub fn wd_at(&self, step: u64) -> Result<f64> {
        self.check(step)?;
        Ok(self.wd_at_time(step as f64))
    }

    pub fn ema_momentum_at(&self, step: u64) -> Result<f64> {
        self.check(step)?;
        Ok(self.ema_at_time(step as f64))
    }

    /// `step,lr,wd,ema` with one row per step.
    pub fn to_csv(&self) -> Result<String> {
        ensure!(
            self.steps_per_epoch >= 1,
            Precondition,
            "steps_per_epoch has not been resolved"
        );
        let mut out = String::from("step,lr,wd,ema\n");
        for s in 0..self.total_steps() {
            let t = s as f64;
            writeln!(
                out,
                "{s},{},{},{}",
                self.lr_at_time(t),
                self.wd_at_time(t),
                self.ema_at_time(t)
            )
            .expect("writing to a String cannot fail");
        }
        Ok(out)
    }
}
