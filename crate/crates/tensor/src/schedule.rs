//! Step-indexed value schedules (learning rate, weight decay, EMA momentum).

use std::f64::consts::PI;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    /// Linear ramp `start -> peak` over the warmup, then cosine `peak -> end`.
    WarmupCosine,
    /// Cosine `peak -> end` from step 0; `start` and `warmup` are ignored.
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub warmup_steps: u64,
    pub total_steps: u64,
    /// The cosine phase spans `stretch * total_steps`, so training ends
    /// before the schedule does.
    pub stretch: f64,
    pub start: f64,
    pub peak: f64,
    pub end: f64,
}

impl ScheduleSpec {
    pub fn constant(value: f64) -> Self {
        ScheduleSpec {
            kind: ScheduleKind::Cosine,
            warmup_steps: 0,
            total_steps: 1,
            stretch: 1.0,
            start: value,
            peak: value,
            end: value,
        }
    }

    pub fn horizon(&self) -> f64 {
        self.stretch * self.total_steps as f64
    }

    pub fn value(&self, step: u64) -> f64 {
        schedule_value(self, step)
    }
}

pub fn schedule_value(spec: &ScheduleSpec, step: u64) -> f64 {
    let warmup = match spec.kind {
        ScheduleKind::WarmupCosine => spec.warmup_steps as f64,
        ScheduleKind::Cosine => 0.0,
    };
    let s = step as f64;
    if s < warmup {
        return spec.start + (spec.peak - spec.start) * s / warmup;
    }
    let span = spec.horizon() - warmup;
    if span <= 0.0 {
        return spec.end;
    }
    let progress = ((s - warmup) / span).min(1.0);
    let w = 0.5 * (1.0 + (PI * progress).cos());
    spec.peak * w + spec.end * (1.0 - w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lr() -> ScheduleSpec {
        ScheduleSpec {
            kind: ScheduleKind::WarmupCosine,
            warmup_steps: 10,
            total_steps: 80,
            stretch: 1.25,
            start: 0.0,
            peak: 1e-3,
            end: 1e-6,
        }
    }

    #[test]
    fn warmup_endpoints() {
        assert_eq!(lr().value(0), 0.0);
        assert_eq!(lr().value(10), 1e-3);
    }

    #[test]
    fn cosine_midpoint() {
        let s = lr();
        // horizon 100, cosine phase 90 steps, midpoint at 10 + 45
        let mid = s.value(55);
        assert!((mid - (s.end + (s.peak - s.end) / 2.0)).abs() < 1e-15);
    }

    #[test]
    fn clamps_past_horizon() {
        assert_eq!(lr().value(10_000), 1e-6);
    }

    #[test]
    fn monotone_after_peak() {
        let s = lr();
        let mut prev = s.value(10);
        for t in 11..200 {
            let v = s.value(t);
            assert!(v <= prev);
            prev = v;
        }
    }

    #[test]
    fn weight_decay_rises() {
        let s = ScheduleSpec {
            kind: ScheduleKind::Cosine,
            warmup_steps: 0,
            total_steps: 100,
            stretch: 1.25,
            start: 0.0,
            peak: 0.04,
            end: 0.4,
        };
        assert_eq!(s.value(0), 0.04);
        assert!(s.value(100) < 0.4 && s.value(100) > 0.3);
    }
}
