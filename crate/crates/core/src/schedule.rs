//! Learning-rate schedules.

use crate::error::{Error, Result};

/// Cosine annealing from `lr_max` at `t = 0` to `lr_min` at `t = total`.
pub fn cosine_lr(t: usize, total: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::invalid("cosine schedule needs at least one step"));
    }
    if t > total {
        return Err(Error::invalid(format!("cosine schedule step {t} beyond horizon {total}")));
    }
    let phase = std::f64::consts::PI * t as f64 / total as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + phase.cos()))
}

/// Piecewise-constant decay: `lr_init · factor^k` where `k` counts the
/// milestones `≤ iteration`.
pub fn step_lr(iteration: usize, lr_init: f64, milestones: &[usize], factor: f64) -> f64 {
    let passed = milestones.iter().filter(|&&m| iteration >= m).count();
    lr_init * factor.powi(passed as i32)
}

/// Reference milestone positions of a 295k-iteration run, in thousands.
pub const REFERENCE_MILESTONES: [usize; 4] = [80, 140, 210, 280];
pub const REFERENCE_ITERATIONS: usize = 295;

/// Places the reference milestones at the same fractions of `total`.
pub fn scaled_milestones(total: usize) -> Vec<usize> {
    let mut out: Vec<usize> = REFERENCE_MILESTONES
        .iter()
        .map(|&m| m * total / REFERENCE_ITERATIONS)
        .collect();
    out.dedup();
    out.retain(|&m| m < total);
    out
}
