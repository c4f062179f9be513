//! Linear exploration-rate schedule.

use crate::{Error, Result};

/// Piecewise-linear interpolation from `start` to `end` over `decay_steps`,
/// clamped at `end` afterwards.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpsilonSchedule {
    start: f64,
    end: f64,
    decay_steps: u64,
}

impl EpsilonSchedule {
    pub fn new(start: f64, end: f64, decay_steps: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&start) || !(0.0..=1.0).contains(&end) {
            return Err(Error::Config(format!(
                "epsilon endpoints must lie in [0,1], got {start} and {end}"
            )));
        }
        if decay_steps == 0 {
            return Err(Error::Config("decay_steps must be positive".into()));
        }
        Ok(Self { start, end, decay_steps })
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn end(&self) -> f64 {
        self.end
    }

    pub fn decay_steps(&self) -> u64 {
        self.decay_steps
    }

    pub fn value(&self, step: u64) -> f64 {
        if step >= self.decay_steps {
            self.end
        } else {
            let frac = step as f64 / self.decay_steps as f64;
            self.start + (self.end - self.start) * frac
        }
    }
}
