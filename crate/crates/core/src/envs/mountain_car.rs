//! Continuous Mountain-Car discretized onto a position × velocity grid,
//! with a risky action penalty.
//!
//! Dynamics follow the classic continuous variant (power 0.0015,
//! gravity term 0.0025·cos(3p)); the per-step reward is −0.1·a² plus
//! +100 on reaching the goal, augmented with a stochastic penalty of
//! −c·(2−|a|) that fires with probability 1/(4−3|a|): small actions are
//! cheap in expectation but carry a larger, likelier penalty.

use crate::dist::ReturnDistribution;
use crate::envs::{EnvError, TabularMdp};

const POS_MIN: f64 = -1.2;
const POS_MAX: f64 = 0.6;
const VEL_MAX: f64 = 0.07;
const GOAL_POS: f64 = 0.45;
const POWER: f64 = 0.0015;
const GRAVITY: f64 = 0.0025;

/// The stochastic penalty distribution for scale `c` and action `a`:
/// `−c(2−|a|)` with probability `1/(4−3|a|)`, else 0.
pub fn risky_penalty(c: f64, action: f64) -> Result<ReturnDistribution, EnvError> {
    if !(0.0..=1.0).contains(&c) {
        return Err(EnvError::BadParam(format!("penalty scale c must lie in [0,1], got {c}")));
    }
    let a = action.abs();
    let p = 1.0 / (4.0 - 3.0 * a);
    Ok(ReturnDistribution::from_atoms([(-c * (2.0 - a), p), (0.0, 1.0 - p)])?)
}

/// Discretized risky Mountain-Car. Transitions evaluate the continuous
/// dynamics at bin centers and re-bin to the nearest center; the start is
/// the bin nearest (−0.5, 0).
pub fn risky_mountain_car(
    c: f64,
    position_bins: usize,
    velocity_bins: usize,
    action_values: &[f64],
    gamma: f64,
    horizon: usize,
) -> Result<TabularMdp, EnvError> {
    if !(0.0..=1.0).contains(&c) {
        return Err(EnvError::BadParam(format!("penalty scale c must lie in [0,1], got {c}")));
    }
    if position_bins < 2 || velocity_bins < 2 {
        return Err(EnvError::BadParam("need at least 2 bins per dimension".into()));
    }
    if action_values.is_empty() {
        return Err(EnvError::BadParam("need at least one action".into()));
    }
    if action_values.iter().any(|a| !(-1.0..=1.0).contains(a)) {
        return Err(EnvError::BadParam("action values must lie in [-1,1]".into()));
    }

    let pos_center = |i: usize| POS_MIN + (i as f64 + 0.5) * (POS_MAX - POS_MIN) / position_bins as f64;
    let vel_center = |j: usize| -VEL_MAX + (j as f64 + 0.5) * (2.0 * VEL_MAX) / velocity_bins as f64;
    let pos_bin = |p: f64| {
        let raw = (p - POS_MIN) / (POS_MAX - POS_MIN) * position_bins as f64;
        (raw as usize).min(position_bins - 1)
    };
    let vel_bin = |v: f64| {
        let raw = (v + VEL_MAX) / (2.0 * VEL_MAX) * velocity_bins as f64;
        (raw as usize).min(velocity_bins - 1)
    };

    let n_actions = action_values.len();
    let n_grid = position_bins * velocity_bins;
    let n_states = n_grid + 1; // plus one absorbing goal state
    let done = n_grid;

    let zero = ReturnDistribution::dirac(0.0).expect("finite");
    let mut transition = vec![done; n_states * n_actions];
    let mut reward = vec![zero; n_states * n_actions];
    let mut terminal = vec![false; n_states];
    terminal[done] = true;

    for i in 0..position_bins {
        for j in 0..velocity_bins {
            let state = i * velocity_bins + j;
            let (p, v) = (pos_center(i), vel_center(j));
            for (a_idx, &a) in action_values.iter().enumerate() {
                let mut v2 = v + a * POWER - GRAVITY * (3.0 * p).cos();
                v2 = v2.clamp(-VEL_MAX, VEL_MAX);
                let mut p2 = p + v2;
                if p2 < POS_MIN {
                    p2 = POS_MIN;
                    v2 = 0.0;
                }
                p2 = p2.min(POS_MAX);

                let reached = p2 >= GOAL_POS;
                let base = -0.1 * a * a + if reached { 100.0 } else { 0.0 };
                let next = if reached { done } else { pos_bin(p2) * velocity_bins + vel_bin(v2) };

                let pr = 1.0 / (4.0 - 3.0 * a.abs());
                let idx = state * n_actions + a_idx;
                transition[idx] = next;
                reward[idx] = ReturnDistribution::from_atoms([
                    (base - c * (2.0 - a.abs()), pr),
                    (base, 1.0 - pr),
                ])?;
            }
        }
    }

    let start = pos_bin(-0.5) * velocity_bins + vel_bin(0.0);
    let labels = action_values.iter().map(|a| format!("{a}")).collect();
    TabularMdp::new(
        n_states,
        n_actions,
        transition,
        reward,
        terminal,
        gamma,
        horizon,
        vec![(start, 1.0)],
    )
    .map(|mdp| mdp.with_action_labels(labels))
}
