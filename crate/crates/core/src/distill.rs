//! Teacher/student self-distillation: sharpened softmax targets, the
//! temporal (global→local temporal) and spatial (global→local spatial)
//! cross-entropy terms, EMA teacher updates and output centering.

use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::backbone::EncoderParams;
use crate::error::{ensure, Error, Result};

/// Lower clamp applied inside every logarithm.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub student_temp: f64,
    pub teacher_temp: f64,
    pub centering: bool,
    pub center_momentum: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            student_temp: 0.1,
            teacher_temp: 0.04,
            centering: true,
            center_momentum: 0.9,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.teacher_temp > 0.0 && self.teacher_temp <= self.student_temp,
            Validation,
            "temperatures must satisfy 0 < teacher_temp ({}) <= student_temp ({})",
            self.teacher_temp,
            self.student_temp
        );
        ensure!(
            (0.0..=1.0).contains(&self.center_momentum),
            Validation,
            "center_momentum must lie in [0, 1]"
        );
        Ok(())
    }
}

/// Temperature-scaled softmax of `z - center`.
pub fn sharpen(z: &[f64], tau: f64, center: Option<&[f64]>) -> Result<Vec<f64>> {
    ensure!(
        tau > 0.0,
        Precondition,
        "temperature must be positive, got {tau}"
    );
    if let Some(c) = center {
        ensure!(
            c.len() == z.len(),
            Shape,
            "center has length {}, logits {}",
            c.len(),
            z.len()
        );
    }
    let shifted: Vec<f64> = match center {
        Some(c) => z.iter().zip(c).map(|(a, b)| (a - b) / tau).collect(),
        None => z.iter().map(|a| a / tau).collect(),
    };
    let max = shifted.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = shifted.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Shannon entropy in nats.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|v| v * v.ln())
        .sum::<f64>()
}

/// `H(target, pred) = -sum target_i log max(pred_i, eps)`.
pub fn cross_entropy(target: &[f64], pred: &[f64]) -> Result<f64> {
    ensure!(
        target.len() == pred.len(),
        Shape,
        "distribution sizes differ: {} vs {}",
        target.len(),
        pred.len()
    );
    Ok(-target
        .iter()
        .zip(pred)
        .map(|(t, p)| t * p.max(LOG_EPS).ln())
        .sum::<f64>())
}

/// Cross-entropy against a fixed target and its gradient with respect to
/// the student logits `z` (student distribution is `sharpen(z, tau)`).
pub fn cross_entropy_with_grad(target: &[f64], z: &[f64], tau: f64) -> Result<(f64, Vec<f64>)> {
    let p = sharpen(z, tau, None)?;
    let loss = cross_entropy(target, &p)?;
    // Clamped entries contribute a constant, hence no gradient.
    let live: Vec<bool> = p.iter().map(|&v| v > LOG_EPS).collect();
    let mass: f64 = target
        .iter()
        .zip(&live)
        .filter(|(_, &l)| l)
        .map(|(t, _)| t)
        .sum();
    let grad = p
        .iter()
        .zip(target)
        .zip(&live)
        .map(|((&pj, &tj), &l)| (mass * pj - if l { tj } else { 0.0 }) / tau)
        .collect();
    Ok((loss, grad))
}

/// Mean cross-entropy over every (teacher global, student local-temporal) pair.
pub fn tcl_loss(teacher_global: &[Vec<f64>], student_local_temporal: &[Vec<f64>]) -> Result<f64> {
    ensure!(
        !teacher_global.is_empty() && !student_local_temporal.is_empty(),
        Precondition,
        "temporal loss needs at least one teacher and one student view"
    );
    let mut sum = 0.0;
    for t in teacher_global {
        for s in student_local_temporal {
            sum += cross_entropy(t, s)?;
        }
    }
    Ok(sum / (teacher_global.len() * student_local_temporal.len()) as f64)
}

/// Sum over the local spatial views of the mean cross-entropy against the
/// teacher globals.
pub fn scl_loss(teacher_global: &[Vec<f64>], student_local_spatial: &[Vec<f64>]) -> Result<f64> {
    ensure!(
        !teacher_global.is_empty() && !student_local_spatial.is_empty(),
        Precondition,
        "spatial loss needs at least one teacher and one student view"
    );
    let mut sum = 0.0;
    for s in student_local_spatial {
        let mut per_view = 0.0;
        for t in teacher_global {
            per_view += cross_entropy(t, s)?;
        }
        sum += per_view / teacher_global.len() as f64;
    }
    Ok(sum)
}

pub fn total_loss(tcl: f64, scl: f64) -> f64 {
    tcl + scl
}

/// Teacher parameters. Only [`ema_update`] (and checkpoint loading) can
/// change them: there is deliberately no mutable access.
#[derive(Debug, Clone, PartialEq)]
pub struct Teacher(EncoderParams);

impl Teacher {
    pub fn from_student(student: &Student) -> Self {
        Teacher(student.0.clone())
    }

    pub(crate) fn from_params(params: EncoderParams) -> Self {
        Teacher(params)
    }

    pub fn params(&self) -> &EncoderParams {
        &self.0
    }

    pub fn into_params(self) -> EncoderParams {
        self.0
    }
}

impl Deref for Teacher {
    type Target = EncoderParams;
    fn deref(&self) -> &EncoderParams {
        &self.0
    }
}

/// Student parameters, the only ones the optimizer updates.
#[derive(Debug, Clone, PartialEq)]
pub struct Student(pub EncoderParams);

impl Deref for Student {
    type Target = EncoderParams;
    fn deref(&self) -> &EncoderParams {
        &self.0
    }
}

impl DerefMut for Student {
    fn deref_mut(&mut self) -> &mut EncoderParams {
        &mut self.0
    }
}

/// `teacher <- lambda * teacher + (1 - lambda) * student`, elementwise.
pub fn ema_update(teacher: &mut Teacher, student: &Student, lambda: f64) -> Result<()> {
    ensure!(
        (0.0..=1.0).contains(&lambda),
        Precondition,
        "EMA momentum {lambda} outside [0, 1]"
    );
    if teacher.0.config != student.0.config || teacher.0.len() != student.0.len() {
        return Err(Error::Shape("teacher and student shapes differ".into()));
    }
    if lambda == 1.0 {
        return Ok(());
    }
    for (t, s) in teacher.0.values.iter_mut().zip(&student.0.values) {
        *t = lambda * *t + (1.0 - lambda) * s;
    }
    Ok(())
}

/// `c <- rho * c + (1 - rho) * mean(batch)`.
pub fn update_center(
    center: &mut [f64],
    batch_teacher_logits: &[Vec<f64>],
    rho: f64,
) -> Result<()> {
    ensure!(
        (0.0..=1.0).contains(&rho),
        Precondition,
        "center momentum {rho} outside [0, 1]"
    );
    if batch_teacher_logits.is_empty() || rho == 1.0 {
        return Ok(());
    }
    ensure!(
        batch_teacher_logits.iter().all(|z| z.len() == center.len()),
        Shape,
        "teacher logits must have length {}",
        center.len()
    );
    let k = batch_teacher_logits.len() as f64;
    for (i, c) in center.iter_mut().enumerate() {
        let mean = batch_teacher_logits.iter().map(|z| z[i]).sum::<f64>() / k;
        *c = rho * *c + (1.0 - rho) * mean;
    }
    Ok(())
}

/// Teacher, student, output center and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillState {
    pub teacher: Teacher,
    pub student: Student,
    pub center: Vec<f64>,
    pub step: u64,
}

impl DistillState {
    /// Student initialized from `params`; the teacher starts as its copy.
    pub fn new(params: EncoderParams) -> Self {
        let n = params.config.proj_output_dim;
        let student = Student(params);
        Self {
            teacher: Teacher::from_student(&student),
            student,
            center: vec![0.0; n],
            step: 0,
        }
    }
}
