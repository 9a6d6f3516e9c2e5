//! Gumbel temperature and learning-rate schedules.

use crate::config::{DvaeConfig, TauCurve, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemperatureSchedule {
    pub start: f64,
    pub end: f64,
    pub decay_steps: usize,
    pub curve: TauCurve,
}

impl TemperatureSchedule {
    pub fn from_config(cfg: &DvaeConfig) -> Self {
        Self {
            start: cfg.tau_start,
            end: cfg.tau_end,
            decay_steps: cfg.tau_decay_steps,
            curve: cfg.tau_curve,
        }
    }

    pub fn scaled(mut self, factor: f64) -> Self {
        self.decay_steps = ((self.decay_steps as f64 * factor).round() as usize).max(1);
        self
    }

    pub fn at(&self, step: usize) -> f64 {
        if self.decay_steps == 0 || step >= self.decay_steps {
            return self.end;
        }
        let frac = step as f64 / self.decay_steps as f64;
        let w = match self.curve {
            TauCurve::Linear => frac,
            TauCurve::Cosine => 0.5 * (1.0 - (std::f64::consts::PI * frac).cos()),
        };
        self.start + (self.end - self.start) * w
    }
}

/// Linear warmup from 0, then exponential decay with a fixed half-life.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub warmup_steps: usize,
    pub halflife: usize,
}

impl LrSchedule {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            warmup_steps: cfg.warmup_steps,
            halflife: cfg.decay_halflife,
        }
    }

    pub fn scaled(self, factor: f64) -> Self {
        let s = |v: usize| ((v as f64 * factor).round() as usize).max(1);
        Self {
            warmup_steps: s(self.warmup_steps),
            halflife: s(self.halflife),
        }
    }

    pub fn at(&self, step: usize, peak: f64) -> f64 {
        if step < self.warmup_steps {
            peak * step as f64 / self.warmup_steps as f64
        } else {
            let after = (step - self.warmup_steps) as f64;
            peak * (-after / self.halflife as f64).exp2()
        }
    }
}

/// Stretch factor applied to all step-based schedules for short runs.
pub fn schedule_scale(cfg: &TrainConfig) -> f64 {
    if cfg.scale_schedules && cfg.steps < cfg.schedule_reference_steps {
        cfg.steps as f64 / cfg.schedule_reference_steps as f64
    } else {
        1.0
    }
}
