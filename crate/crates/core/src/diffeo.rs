//! Scaling-and-squaring integration of a stationary velocity field, and the
//! per-level step-count schedule.

use crate::error::{Error, Result};
use crate::field::{compose, DisplacementField};

/// Per-level squaring counts: `t_at(level) = max(t0 - level, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegrationSchedule {
    pub t0: u32,
}

impl IntegrationSchedule {
    pub fn new(t0: u32) -> Result<Self> {
        if t0 < 1 {
            return Err(Error::InvalidConfig("t0 must be at least 1".into()));
        }
        Ok(Self { t0 })
    }

    pub fn t_at(&self, level: u32) -> u32 {
        t_schedule(level, self.t0)
    }
}

/// Squaring count for a pyramid level, decreasing with level and floored at 1.
pub fn t_schedule(level: u32, t0: u32) -> u32 {
    t0.saturating_sub(level).max(1)
}

/// Result of integrating a stationary velocity field to time 1.
#[derive(Debug, Clone)]
pub struct Integration {
    /// Displacement of the time-1 flow.
    pub v0: DisplacementField,
    /// Displacement part of φ₁ = id + v₀; identical array to `v0`.
    pub phi1: DisplacementField,
}

/// Integrate by `t` self-compositions: `u ← u + u∘(id + u)`, starting from
/// the input velocity. Each squaring doubles the represented time step.
pub fn integrate_svf(velocity: &DisplacementField, t: u32) -> Result<Integration> {
    let [nx, ny, nz] = velocity.dims;
    let diag = (((nx * nx + ny * ny + nz * nz) as f64).sqrt()) as f32;
    let mut u = velocity.clone();
    for _ in 0..t {
        u = compose(&u, &u)?;
        if !u.is_finite() || u.max_magnitude() > diag {
            return Err(Error::Divergence("scaling-and-squaring integration".into()));
        }
    }
    Ok(Integration { phi1: u.clone(), v0: u })
}
