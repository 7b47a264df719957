//! Cosine schedules with linear warmup, shared by the learning rate, weight
//! decay and teacher momentum trajectories.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleSpec {
    /// Value reached at the end of warmup and start of the cosine segment.
    pub start: f64,
    /// Value at the final step.
    pub end: f64,
    pub total_steps: u64,
    pub warmup_steps: u64,
}

impl ScheduleSpec {
    pub fn new(start: f64, end: f64, total_steps: u64, warmup_steps: u64) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::Parameter("schedule needs at least one step".into()));
        }
        if warmup_steps > total_steps {
            return Err(Error::Parameter(format!(
                "warmup ({warmup_steps}) exceeds total steps ({total_steps})"
            )));
        }
        Ok(ScheduleSpec { start, end, total_steps, warmup_steps })
    }

    pub fn constant(value: f64) -> Self {
        ScheduleSpec { start: value, end: value, total_steps: 1, warmup_steps: 0 }
    }
}

/// Linear ramp 0 -> start over the warmup steps, then half-cosine start -> end.
/// Steps past the end clamp to the end value.
pub fn cosine_schedule(spec: &ScheduleSpec, step: u64) -> f64 {
    if step >= spec.total_steps {
        return spec.end;
    }
    if step < spec.warmup_steps {
        return spec.start * step as f64 / spec.warmup_steps as f64;
    }
    if step == spec.warmup_steps {
        return spec.start;
    }
    let span = (spec.total_steps - spec.warmup_steps) as f64;
    let t = (step - spec.warmup_steps) as f64 / span;
    spec.end + 0.5 * (spec.start - spec.end) * (1.0 + (std::f64::consts::PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_boundary_hits_start_exactly() {
        let spec = ScheduleSpec::new(0.1, 0.001, 100, 10).unwrap();
        assert_eq!(cosine_schedule(&spec, 10), 0.1);
        assert_eq!(cosine_schedule(&spec, 0), 0.0);
    }

    #[test]
    fn final_step_hits_end_exactly() {
        let spec = ScheduleSpec::new(2.5e-4, 5e-7, 1000, 100).unwrap();
        assert_eq!(cosine_schedule(&spec, 1000), 5e-7);
        assert_eq!(cosine_schedule(&spec, 5000), 5e-7); // clamp past the end
    }

    #[test]
    fn cosine_midpoint_is_arithmetic_mean() {
        let spec = ScheduleSpec::new(1.0, 0.2, 90, 10).unwrap();
        let mid = cosine_schedule(&spec, 10 + 40);
        assert!((mid - 0.6).abs() < 1e-9);
    }

    #[test]
    fn no_warmup_starts_at_start() {
        let spec = ScheduleSpec::new(0.996, 1.0, 50, 0).unwrap();
        assert_eq!(cosine_schedule(&spec, 0), 0.996);
        assert_eq!(cosine_schedule(&spec, 50), 1.0);
    }

    #[test]
    fn warmup_longer_than_total_rejected() {
        assert!(ScheduleSpec::new(1.0, 0.0, 5, 6).is_err());
    }
}
