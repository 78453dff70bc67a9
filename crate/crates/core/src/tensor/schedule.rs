use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

/// Linear warmup to `peak`, then a single cosine half-period down to `final_lr`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub warmup_epochs: f64,
    pub peak: f64,
    pub final_lr: f64,
    pub total_epochs: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            warmup_epochs: 10.0,
            peak: 1e-4,
            final_lr: 1e-6,
            total_epochs: 1500.0,
        }
    }
}

impl LrSchedule {
    /// Rate at a (possibly fractional) epoch; clamped to `[0, total]`.
    pub fn lr_at(&self, epoch: f64) -> f64 {
        let e = epoch.clamp(0.0, self.total_epochs);
        if e < self.warmup_epochs {
            return self.peak * e / self.warmup_epochs;
        }
        let span = self.total_epochs - self.warmup_epochs;
        if span <= 0.0 {
            return self.final_lr;
        }
        let progress = (e - self.warmup_epochs) / span;
        self.final_lr + (self.peak - self.final_lr) * 0.5 * (1.0 + (PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anchor_points() {
        let s = LrSchedule {
            total_epochs: 300.0,
            ..Default::default()
        };
        assert_eq!(s.lr_at(0.0), 0.0);
        assert!((s.lr_at(10.0) - 1e-4).abs() < 1e-18);
        assert!((s.lr_at(5.0) - 5e-5).abs() < 1e-18);
        assert!((s.lr_at(300.0) - 1e-6).abs() < 1e-18);
    }

    #[test]
    fn continuous_and_monotone_after_warmup() {
        let s = LrSchedule {
            total_epochs: 100.0,
            ..Default::default()
        };
        let mut prev = s.lr_at(10.0);
        assert!((s.lr_at(10.0 - 1e-9) - prev).abs() < 1e-12);
        for i in 1..=900 {
            let e = 10.0 + i as f64 * 0.1;
            let lr = s.lr_at(e);
            assert!(lr <= prev + 1e-18);
            assert!((lr - prev).abs() < 1e-6);
            prev = lr;
        }
    }
}
