//! Course-progress rewards.
//!
//! Racing: `progress - c_w * rho_w * |v|^2`.
//!
//! Overtaking adds a car-collision penalty `c_c * rho_c * |v|^2` and, for every
//! opponent whose progress gap to the ego is inside the detection range `c_d`,
//! `c_r` times the reduction of that gap over the step. The gap is
//! `cp(opponent) - cp(ego)` taken as the shortest signed loop difference, so the
//! term rewards closing in from behind and pulling away after a pass alike.

use serde::{Deserialize, Serialize};

use crate::track::TrackGeometry;
use crate::{Result, SimError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardWeights {
    /// Wall-collision weight.
    pub c_w: f64,
    /// Car-collision weight.
    pub c_c: f64,
    /// Relative-progress weight.
    pub c_r: f64,
    /// Detection range in meters of course progress.
    pub c_d: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            c_w: 0.005,
            c_c: 0.005,
            c_r: 1.0,
            c_d: 30.0,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [self.c_w, self.c_c, self.c_r];
        if nonneg.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || !(self.c_d.is_finite() && self.c_d > 0.0) {
            return Err(SimError::config(format!("invalid reward weights {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardKind {
    Racing,
    Overtaking,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RewardInputs {
    pub ego_cp_prev: f64,
    pub ego_cp: f64,
    /// Body-frame velocity of the ego.
    pub ego_velocity: [f64; 3],
    pub wall_contact: bool,
    pub car_contact: bool,
    /// (cp at t-1, cp at t) for every live opponent.
    pub opponents: Vec<(f64, f64)>,
}

impl RewardInputs {
    fn speed_sq(&self) -> f64 {
        self.ego_velocity.iter().map(|v| v * v).sum()
    }
}

/// Detection gate: true iff `|delta_cp| < c_d` (strict).
pub fn gate(delta_cp: f64, c_d: f64) -> bool {
    delta_cp.abs() < c_d
}

pub fn racing_reward(inputs: &RewardInputs, w: &RewardWeights, track: &TrackGeometry) -> f64 {
    let progress = track.wrap_delta(inputs.ego_cp - inputs.ego_cp_prev);
    let wall = if inputs.wall_contact { w.c_w * inputs.speed_sq() } else { 0.0 };
    progress - wall
}

/// The gated relative-progress sum alone.
pub fn relative_progress_term(inputs: &RewardInputs, w: &RewardWeights, track: &TrackGeometry) -> f64 {
    inputs
        .opponents
        .iter()
        .map(|&(prev, curr)| {
            let gap_prev = track.wrap_delta(prev - inputs.ego_cp_prev);
            let gap = track.wrap_delta(curr - inputs.ego_cp);
            if gate(gap, w.c_d) {
                w.c_r * (gap_prev - gap)
            } else {
                0.0
            }
        })
        .sum()
}

pub fn overtaking_reward(inputs: &RewardInputs, w: &RewardWeights, track: &TrackGeometry) -> f64 {
    let car = if inputs.car_contact { w.c_c * inputs.speed_sq() } else { 0.0 };
    racing_reward(inputs, w, track) - car + relative_progress_term(inputs, w, track)
}

pub fn reward(kind: RewardKind, inputs: &RewardInputs, w: &RewardWeights, track: &TrackGeometry) -> f64 {
    match kind {
        RewardKind::Racing => racing_reward(inputs, w, track),
        RewardKind::Overtaking => overtaking_reward(inputs, w, track),
    }
}
