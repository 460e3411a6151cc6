//! Adam with decoupled weight decay, restricted to student parameters.

use crate::backbone::EncoderParams;
use crate::distill::Student;

pub const BETAS: (f64, f64) = (0.9, 0.999);
pub const EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Number of updates applied so far (for bias correction).
    pub t: u64,
}

impl AdamW {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn from_moments(m: Vec<f64>, v: Vec<f64>, t: u64) -> Self {
        assert_eq!(m.len(), v.len());
        Self { m, v, t }
    }

    /// One update. Weight decay skips vectors (biases, norm parameters,
    /// tokens). Taking [`Student`] makes teacher updates unrepresentable.
    pub fn step(&mut self, student: &mut Student, grads: &EncoderParams, lr: f64, wd: f64) {
        assert_eq!(
            grads.len(),
            self.m.len(),
            "gradient/optimizer size mismatch"
        );
        assert_eq!(
            student.len(),
            self.m.len(),
            "parameter/optimizer size mismatch"
        );
        self.t += 1;
        let (b1, b2) = BETAS;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let layout = grads.layout();
        for (_, slot) in layout.entries() {
            let decay = if slot.is_vector() { 0.0 } else { wd };
            for i in slot.range() {
                let g = grads.values[i];
                self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
                self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
                let update = (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + EPS);
                let p = &mut student.values[i];
                *p -= lr * (update + decay * *p);
            }
        }
    }
}
