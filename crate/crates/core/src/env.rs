//! Toy continuous-control environments and their scripted experts.
//!
//! Both environments are pure functions of `(state, action, t)`; episode
//! boundaries come from the fixed horizon only.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EnvKind {
    #[serde(rename = "point-mass")]
    PointMass,
    #[serde(rename = "pendulum")]
    Pendulum,
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnvKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "point-mass" | "pointmass" | "point_mass" => Ok(EnvKind::PointMass),
            "pendulum" => Ok(EnvKind::Pendulum),
            other => Err(Error::InvalidConfig(format!("unknown env '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvSpec {
    pub kind: EnvKind,
    pub state_dim: usize,
    pub action_dim: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub horizon: usize,
}

impl EnvSpec {
    /// Half-width of the (symmetric) action box, per dimension.
    pub fn max_action(&self) -> Vec<f64> {
        self.action_high
            .iter()
            .zip(&self.action_low)
            .map(|(h, l)| 0.5 * (h - l))
            .collect()
    }

    pub fn clip_action(&self, a: &[f64]) -> Vec<f64> {
        a.iter()
            .zip(self.action_low.iter().zip(&self.action_high))
            .map(|(&v, (&lo, &hi))| v.clamp(lo, hi))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

pub const POINT_MASS_DT: f64 = 0.05;
pub const POINT_MASS_DAMPING: f64 = 0.99;
pub const PENDULUM_DT: f64 = 0.05;
const PENDULUM_G: f64 = 10.0;
const PENDULUM_M: f64 = 1.0;
const PENDULUM_L: f64 = 1.0;
const PENDULUM_MAX_SPEED: f64 = 8.0;

impl EnvKind {
    pub fn name(self) -> &'static str {
        match self {
            EnvKind::PointMass => "point-mass",
            EnvKind::Pendulum => "pendulum",
        }
    }

    pub fn spec(self) -> EnvSpec {
        match self {
            EnvKind::PointMass => EnvSpec {
                kind: self,
                state_dim: 6,
                action_dim: 2,
                action_low: vec![-1.0; 2],
                action_high: vec![1.0; 2],
                horizon: 100,
            },
            EnvKind::Pendulum => EnvSpec {
                kind: self,
                state_dim: 3,
                action_dim: 1,
                action_low: vec![-2.0],
                action_high: vec![2.0],
                horizon: 200,
            },
        }
    }

    pub fn reset(self, rng: &mut impl Rng) -> Vec<f64> {
        match self {
            EnvKind::PointMass => {
                let mut u = || rng.random_range(-1.0..1.0);
                let (x, y, gx, gy) = (u(), u(), u(), u());
                vec![x, y, 0.0, 0.0, gx, gy]
            }
            EnvKind::Pendulum => {
                let th: f64 = rng.random_range(-PI..PI);
                let thdot: f64 = rng.random_range(-1.0..1.0);
                vec![th.cos(), th.sin(), thdot]
            }
        }
    }

    /// Advances one step; `t` is the index of this step within the episode.
    pub fn step(self, state: &[f64], action: &[f64], t: usize) -> StepOutcome {
        let spec = self.spec();
        let (next_state, reward) = match self {
            EnvKind::PointMass => point_mass_step(state, action),
            EnvKind::Pendulum => pendulum_step(state, action),
        };
        StepOutcome {
            next_state,
            reward,
            done: t + 1 >= spec.horizon,
        }
    }

    pub fn expert_action(self, state: &[f64]) -> Vec<f64> {
        match self {
            EnvKind::PointMass => point_mass_expert(state),
            EnvKind::Pendulum => pendulum_expert(state),
        }
    }
}

/// State `[x, y, vx, vy, gx, gy]`, action acceleration in `[-1, 1]²`.
///
/// Explicit Euler: position advances with the current velocity, then the
/// velocity takes the acceleration and is damped. The reward is charged on
/// the pre-step position.
pub fn point_mass_step(state: &[f64], action: &[f64]) -> (Vec<f64>, f64) {
    let a = [action[0].clamp(-1.0, 1.0), action[1].clamp(-1.0, 1.0)];
    let (x, y, vx, vy, gx, gy) = (state[0], state[1], state[2], state[3], state[4], state[5]);
    let dist_sq = (x - gx).powi(2) + (y - gy).powi(2);
    let reward = -dist_sq - 0.01 * (a[0] * a[0] + a[1] * a[1]);
    let nx = x + vx * POINT_MASS_DT;
    let ny = y + vy * POINT_MASS_DT;
    let nvx = POINT_MASS_DAMPING * (vx + a[0] * POINT_MASS_DT);
    let nvy = POINT_MASS_DAMPING * (vy + a[1] * POINT_MASS_DT);
    (vec![nx, ny, nvx, nvy, gx, gy], reward)
}

fn angle_normalize(th: f64) -> f64 {
    (th + PI).rem_euclid(2.0 * PI) - PI
}

/// Classic swing-up pendulum, state `[cos θ, sin θ, θ̇]` with θ = 0 upright.
pub fn pendulum_step(state: &[f64], action: &[f64]) -> (Vec<f64>, f64) {
    let th = state[1].atan2(state[0]);
    let thdot = state[2];
    let u = action[0].clamp(-2.0, 2.0);
    let err = angle_normalize(th);
    let reward = -(err * err + 0.1 * thdot * thdot + 0.001 * u * u);
    let acc = 3.0 * PENDULUM_G / (2.0 * PENDULUM_L) * th.sin() + 3.0 / (PENDULUM_M * PENDULUM_L * PENDULUM_L) * u;
    let new_thdot = (thdot + acc * PENDULUM_DT).clamp(-PENDULUM_MAX_SPEED, PENDULUM_MAX_SPEED);
    let new_th = th + new_thdot * PENDULUM_DT;
    (vec![new_th.cos(), new_th.sin(), new_thdot], reward)
}

/// PD law `clip(2·(goal − pos) − vel)`.
pub fn point_mass_expert(state: &[f64]) -> Vec<f64> {
    const KP: f64 = 2.0;
    const KD: f64 = 1.0;
    (0..2)
        .map(|i| (KP * (state[4 + i] - state[i]) - KD * state[2 + i]).clamp(-1.0, 1.0))
        .collect()
}

/// Energy pumping far from upright, PD stabilization near it.
pub fn pendulum_expert(state: &[f64]) -> Vec<f64> {
    let th = state[1].atan2(state[0]);
    let thdot = state[2];
    if state[0] > 0.85 {
        let u = -10.0 * th - 2.0 * thdot;
        return vec![u.clamp(-2.0, 2.0)];
    }
    // Rod energy with I = ml²/3, zero potential at the pivot.
    let energy = thdot * thdot / 6.0 + 0.5 * PENDULUM_G * th.cos();
    let target = 0.5 * PENDULUM_G;
    let u = 2.0 * (target - energy) * thdot;
    vec![u.clamp(-2.0, 2.0)]
}

/// Rolls out `policy` for one episode from `start`; returns the return.
pub fn rollout(env: EnvKind, start: Vec<f64>, mut policy: impl FnMut(&[f64]) -> Result<Vec<f64>>) -> Result<f64> {
    let spec = env.spec();
    let mut s = start;
    let mut ret = 0.0;
    for t in 0..spec.horizon {
        let a = spec.clip_action(&policy(&s)?);
        let out = env.step(&s, &a, t);
        ret += out.reward;
        s = out.next_state;
        if out.done {
            break;
        }
    }
    Ok(ret)
}
