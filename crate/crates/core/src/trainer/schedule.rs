use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Linear warmup to `max_lr`, then half-cosine decay to `min_lr` at
/// `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub warmup_steps: u64,
    pub max_lr: f64,
    pub min_lr: f64,
    pub total_steps: u64,
}

impl ScheduleConfig {
    pub fn new(max_lr: f64, total_steps: u64) -> Self {
        Self {
            warmup_steps: 500,
            max_lr,
            min_lr: 0.0,
            total_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps == 0 || self.warmup_steps >= self.total_steps {
            return Err(Error::config(format!(
                "warmup_steps must be in (0, total_steps = {}), got {}",
                self.total_steps, self.warmup_steps
            )));
        }
        if !(self.min_lr >= 0.0 && self.min_lr <= self.max_lr && self.max_lr.is_finite()) {
            return Err(Error::config(format!(
                "need 0 <= min_lr <= max_lr, got min_lr {} and max_lr {}",
                self.min_lr, self.max_lr
            )));
        }
        Ok(())
    }
}

/// Learning rate for the optimizer update numbered `step` (1-based).
/// Steps past `total_steps` get `min_lr`.
pub fn lr_at(step: u64, s: &ScheduleConfig) -> f64 {
    if step > s.total_steps {
        return s.min_lr;
    }
    if step <= s.warmup_steps {
        return s.max_lr * step as f64 / s.warmup_steps as f64;
    }
    let progress = (step - s.warmup_steps) as f64 / (s.total_steps - s.warmup_steps) as f64;
    s.min_lr + 0.5 * (s.max_lr - s.min_lr) * (1.0 + (PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_and_endpoints() {
        let s = ScheduleConfig::new(6e-3, 10_000);
        assert_eq!(lr_at(0, &s), 0.0);
        assert_eq!(lr_at(250, &s), 3e-3);
        assert_eq!(lr_at(500, &s), 6e-3);
        assert_eq!(lr_at(10_000, &s), 0.0);
        assert_eq!(lr_at(20_000, &s), 0.0);
    }

    #[test]
    fn continuous_and_monotone_after_warmup() {
        let s = ScheduleConfig {
            min_lr: 1e-5,
            ..ScheduleConfig::new(1e-4, 3_000)
        };
        assert!((lr_at(501, &s) - lr_at(500, &s)).abs() < 1e-9);
        for t in 500..3_000 {
            assert!(lr_at(t + 1, &s) <= lr_at(t, &s));
        }
        assert_eq!(lr_at(3_000, &s), 1e-5);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(ScheduleConfig::new(1e-3, 500).validate().is_err());
        let s = ScheduleConfig {
            min_lr: 1.0,
            ..ScheduleConfig::new(1e-3, 1000)
        };
        assert!(s.validate().is_err());
    }
}
