//! Epoch-dependent balance between distillation and classification terms.
//!
//! `lambda(e) = clamp(k*e + b, lo, hi)` weights the classification loss; the
//! distillation side receives `1 - lambda`. Clamping keeps that complement
//! non-negative.

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleParams {
    /// Increment per epoch.
    pub k: f64,
    /// Value at epoch 0 (before clamping).
    pub b: f64,
    pub clamp_lo: f64,
    pub clamp_hi: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self { k: 0.0, b: 0.0, clamp_lo: 0.0, clamp_hi: 1.0 }
    }
}

impl ScheduleParams {
    pub fn new(k: f64, b: f64) -> Self {
        Self { k, b, ..Self::default() }
    }

    pub fn with_clamp(k: f64, b: f64, clamp_lo: f64, clamp_hi: f64) -> Result<Self> {
        let p = Self { k, b, clamp_lo, clamp_hi };
        p.validate()?;
        Ok(p)
    }

    /// Linear ramp from 0 to 1 over `total_epochs`.
    pub fn ramp(total_epochs: usize) -> Self {
        Self::new(1.0 / total_epochs.max(1) as f64, 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.k.is_finite() && self.b.is_finite();
        if !finite || !(self.clamp_lo <= self.clamp_hi) {
            return Err(Error::Config(alloc::format!(
                "invalid schedule k={} b={} clamp=[{}, {}]",
                self.k,
                self.b,
                self.clamp_lo,
                self.clamp_hi
            )));
        }
        Ok(())
    }

    /// Weight on the classification term at `epoch`.
    pub fn lambda_at(&self, epoch: usize) -> f64 {
        let raw = self.k * epoch as f64 + self.b;
        raw.max(self.clamp_lo).min(self.clamp_hi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_weight_when_k_is_zero() {
        let p = ScheduleParams::new(0.0, 0.3);
        for e in [0, 1, 17, 1000] {
            assert_eq!(p.lambda_at(e), 0.3);
        }
    }

    #[test]
    fn starts_at_zero_and_clamps_at_one() {
        let p = ScheduleParams::new(0.01, 0.0);
        assert_eq!(p.lambda_at(0), 0.0);
        assert_eq!(p.lambda_at(150), 1.0);
    }

    #[test]
    fn direct_evaluation() {
        let p = ScheduleParams::new(0.005, 0.1);
        assert!((p.lambda_at(20) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn ramp_reaches_one_at_final_epoch() {
        let p = ScheduleParams::ramp(30);
        assert_eq!(p.lambda_at(0), 0.0);
        assert!((p.lambda_at(30) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_inverted_clamp() {
        assert!(ScheduleParams::with_clamp(0.1, 0.0, 0.8, 0.2).is_err());
    }
}
