//! Learning-rate schedules: linear warmup then linear decay or cosine
//! annealing to zero.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SpectraError};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    LinearDecay,
    Cosine,
}

/// Number of warmup updates for `total` updates.
pub fn warmup_steps(total: usize, warmup_frac: f64) -> usize {
    ((total as f64) * warmup_frac).ceil() as usize
}

/// Learning rate at `step` of `total`: rises linearly from 0 to `peak` over
/// the warmup, then decays to 0 at `total`.
pub fn lr_schedule(step: usize, total: usize, warmup_frac: f64, peak: f64, schedule: Schedule) -> Result<f64> {
    if step > total {
        return Err(SpectraError::Config(format!("step {step} is past the schedule end {total}")));
    }
    if !(0.0..=1.0).contains(&warmup_frac) {
        return Err(SpectraError::Config(format!("warmup fraction {warmup_frac} outside [0, 1]")));
    }
    let warm = warmup_steps(total, warmup_frac);
    if step < warm {
        return Ok(peak * step as f64 / warm as f64);
    }
    if total == warm {
        return Ok(peak);
    }
    let progress = (step - warm) as f64 / (total - warm) as f64;
    Ok(match schedule {
        Schedule::LinearDecay => peak * (1.0 - progress),
        Schedule::Cosine => peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()),
    })
}
