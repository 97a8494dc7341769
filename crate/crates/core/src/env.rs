//! A 2-D point mass pushed toward a fixed goal, with scripted behavior
//! policies of three quality tiers.
//!
//! State is `[px, py, vx, vy]`, actions are 2-D forces in `[-1, 1]²`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Environment constants. None of these come from the algorithm being
/// reproduced; they only need to stay fixed so downstream numbers are stable.
pub mod consts {
    pub const FRICTION: f64 = 0.9;
    pub const GAIN: f64 = 0.1;
    pub const DT: f64 = 0.1;
    pub const NOISE_STD: f64 = 0.01;
    pub const GOAL: [f64; 2] = [0.8, 0.8];
    pub const GOAL_RADIUS: f64 = 0.1;
    pub const HORIZON: usize = 100;
    pub const RESET_LO: f64 = -0.9;
    pub const RESET_HI: f64 = -0.7;
    pub const BOUND: f64 = 1.0;
    pub const MAX_ACTION: f64 = 1.0;
    pub const STATE_DIM: usize = 4;
    pub const ACTION_DIM: usize = 2;
    /// Expert controller gains: `a = KP·(g − p) − KD·v`.
    pub const KP: f64 = 2.0;
    pub const KD: f64 = 1.0;
    pub const MEDIUM_NOISE_STD: f64 = 0.3;
    pub const REPLAY_RANDOM_PROB: f64 = 0.3;
    pub const INITIAL_POOL: usize = 10_000;
}

use consts::*;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointMassState {
    pub position: [f64; 2],
    pub velocity: [f64; 2],
}

impl PointMassState {
    pub fn to_vec(&self) -> Vec<f64> {
        vec![self.position[0], self.position[1], self.velocity[0], self.velocity[1]]
    }

    pub fn from_slice(s: &[f64]) -> Result<Self> {
        if s.len() != STATE_DIM {
            return Err(Error::DimensionMismatch {
                what: "point-mass state",
                expected: STATE_DIM,
                got: s.len(),
            });
        }
        if s.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("state", "non-finite component"));
        }
        Ok(Self {
            position: [s[0], s[1]],
            velocity: [s[2], s[3]],
        })
    }

    pub fn goal_distance(&self) -> f64 {
        goal_distance(self.position)
    }
}

pub fn goal_distance(p: [f64; 2]) -> f64 {
    ((p[0] - GOAL[0]).powi(2) + (p[1] - GOAL[1]).powi(2)).sqrt()
}

/// The goal-entry terminal rule, also used by the learned model.
pub fn is_terminal(s_next: &[f64]) -> bool {
    goal_distance([s_next[0], s_next[1]]) < GOAL_RADIUS
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub next: PointMassState,
    pub reward: f64,
    pub done: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct PointMass {
    /// Test hook: `false` removes the velocity noise.
    pub noise: bool,
}

impl Default for PointMass {
    fn default() -> Self {
        Self { noise: true }
    }
}

impl PointMass {
    pub fn noiseless() -> Self {
        Self { noise: false }
    }

    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> PointMassState {
        PointMassState {
            position: [rng.gen_range(RESET_LO..=RESET_HI), rng.gen_range(RESET_LO..=RESET_HI)],
            velocity: [0.0, 0.0],
        }
    }

    pub fn step<R: Rng + ?Sized>(&self, state: &PointMassState, action: &[f64], rng: &mut R) -> Result<StepOutcome> {
        if action.len() != ACTION_DIM {
            return Err(Error::DimensionMismatch {
                what: "point-mass action",
                expected: ACTION_DIM,
                got: action.len(),
            });
        }
        if action.iter().any(|x| !x.is_finite()) || state.to_vec().iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("step input", "non-finite state or action"));
        }
        let mut next = *state;
        for i in 0..2 {
            let a = action[i].clamp(-MAX_ACTION, MAX_ACTION);
            let xi = if self.noise {
                let n: f64 = StandardNormal.sample(rng);
                NOISE_STD * n
            } else {
                0.0
            };
            let v = (FRICTION * state.velocity[i] + GAIN * a + xi).clamp(-BOUND, BOUND);
            next.velocity[i] = v;
            next.position[i] = (state.position[i] + DT * v).clamp(-BOUND, BOUND);
        }
        let dist = next.goal_distance();
        Ok(StepOutcome {
            next,
            reward: -dist,
            done: dist < GOAL_RADIUS,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Quality {
    Medium,
    MediumReplay,
    Expert,
}

impl std::str::FromStr for Quality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "medium" => Ok(Quality::Medium),
            "medium-replay" => Ok(Quality::MediumReplay),
            "expert" => Ok(Quality::Expert),
            other => Err(Error::invalid("quality", format!("unknown tier {other:?}"))),
        }
    }
}

impl std::fmt::Display for Quality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Quality::Medium => "medium",
            Quality::MediumReplay => "medium-replay",
            Quality::Expert => "expert",
        })
    }
}

pub fn expert_action(state: &PointMassState) -> [f64; 2] {
    let mut a = [0.0; 2];
    for i in 0..2 {
        a[i] = (KP * (GOAL[i] - state.position[i]) - KD * state.velocity[i]).clamp(-MAX_ACTION, MAX_ACTION);
    }
    a
}

/// Scripted behavior. `noise = false` suppresses the Gaussian perturbation of
/// the medium tier (the replay tier's random-action branch is untouched).
pub fn behavior_action<R: Rng + ?Sized>(state: &PointMassState, quality: Quality, noise: bool, rng: &mut R) -> [f64; 2] {
    let medium = |rng: &mut R| {
        let mut a = expert_action(state);
        if noise {
            for x in a.iter_mut() {
                let n: f64 = StandardNormal.sample(rng);
                *x = (*x + MEDIUM_NOISE_STD * n).clamp(-MAX_ACTION, MAX_ACTION);
            }
        }
        a
    };
    match quality {
        Quality::Expert => expert_action(state),
        Quality::Medium => medium(rng),
        Quality::MediumReplay => {
            if rng.gen::<f64>() < REPLAY_RANDOM_PROB {
                [rng.gen_range(-MAX_ACTION..=MAX_ACTION), rng.gen_range(-MAX_ACTION..=MAX_ACTION)]
            } else {
                medium(rng)
            }
        }
    }
}

pub fn uniform_action<R: Rng + ?Sized>(rng: &mut R) -> [f64; 2] {
    [rng.gen_range(-MAX_ACTION..=MAX_ACTION), rng.gen_range(-MAX_ACTION..=MAX_ACTION)]
}

/// One recorded episode, stopped at goal entry or the horizon.
pub struct Episode {
    pub states: Vec<PointMassState>,
    pub actions: Vec<[f64; 2]>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
}

impl Episode {
    pub fn ret(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

/// Runs `policy` for at most the horizon from a fresh reset.
pub fn run_episode<R, P>(env: &PointMass, mut policy: P, rng: &mut R) -> Result<Episode>
where
    R: Rng + ?Sized,
    P: FnMut(&PointMassState, &mut R) -> [f64; 2],
{
    let mut s = env.reset(rng);
    let mut ep = Episode {
        states: vec![s],
        actions: Vec::new(),
        rewards: Vec::new(),
        dones: Vec::new(),
    };
    for _ in 0..HORIZON {
        let a = policy(&s, rng);
        let out = env.step(&s, &a, rng)?;
        ep.actions.push(a);
        ep.rewards.push(out.reward);
        ep.dones.push(out.done);
        ep.states.push(out.next);
        s = out.next;
        if out.done {
            break;
        }
    }
    Ok(ep)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub mean_return: f64,
    pub std_return: f64,
}

/// Undiscounted returns over `n_episodes`, each on its own stream of `seed`.
pub fn evaluate_policy<P>(env: &PointMass, mut policy: P, n_episodes: usize, seed: u64) -> Result<EvalSummary>
where
    P: FnMut(&[f64], &mut crate::rng::Rng) -> Vec<f64>,
{
    if n_episodes == 0 {
        return Err(Error::Empty("evaluation episodes"));
    }
    let mut returns = Vec::with_capacity(n_episodes);
    for ep in 0..n_episodes {
        let mut rng = crate::rng::stream(seed, crate::rng::tags::EVAL + 1000 * (ep as u64 + 1));
        let episode = run_episode(
            env,
            |s, rng| {
                let a = policy(&s.to_vec(), rng);
                [a[0], a[1]]
            },
            &mut rng,
        )?;
        returns.push(episode.ret());
    }
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    Ok(EvalSummary {
        mean_return: mean,
        std_return: var.sqrt(),
    })
}
