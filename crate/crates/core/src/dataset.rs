//! Offline transition datasets: collection, statistics and the on-disk format
//! (JSON Lines of transitions plus a metadata document).

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::env::{self, consts, PointMass, Quality};
use crate::error::{Error, Result};
use crate::rng::{self, tags};

pub const STD_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub r: f64,
    pub s_next: Vec<f64>,
    pub done: bool,
}

/// Wire form: `done` is written as 0/1.
#[derive(Serialize, Deserialize)]
struct TransitionLine {
    s: Vec<f64>,
    a: Vec<f64>,
    r: f64,
    s_next: Vec<f64>,
    done: u8,
}

impl From<&Transition> for TransitionLine {
    fn from(t: &Transition) -> Self {
        Self {
            s: t.s.clone(),
            a: t.a.clone(),
            r: t.r,
            s_next: t.s_next.clone(),
            done: t.done as u8,
        }
    }
}

impl TryFrom<TransitionLine> for Transition {
    type Error = Error;
    fn try_from(l: TransitionLine) -> Result<Self> {
        if l.done > 1 {
            return Err(Error::invalid("transition", format!("done must be 0 or 1, got {}", l.done)));
        }
        Ok(Self {
            s: l.s,
            a: l.a,
            r: l.r,
            s_next: l.s_next,
            done: l.done == 1,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardStats {
    pub r_min: f64,
    pub r_max: f64,
    pub sigma_r: f64,
}

/// Per-coordinate mean and (floored) std.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit<'a>(rows: impl Iterator<Item = Vec<f64>> + Clone, dim: usize) -> Result<Self> {
        let mut n = 0usize;
        let mut mean = vec![0.0; dim];
        for row in rows.clone() {
            n += 1;
            for (m, x) in mean.iter_mut().zip(&row) {
                *m += x;
            }
        }
        if n == 0 {
            return Err(Error::Empty("dataset"));
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; dim];
        for row in rows {
            for ((v, x), m) in var.iter_mut().zip(&row).zip(&mean) {
                *v += (x - m).powi(2);
            }
        }
        let std = var.into_iter().map(|v| (v / n as f64).sqrt().max(STD_FLOOR)).collect();
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        for i in 0..x.len() {
            out[i] = (x[i] - self.mean[i]) / self.std[i];
        }
    }

    pub fn invert(&self, z: &[f64], out: &mut [f64]) {
        for i in 0..z.len() {
            out[i] = z[i] * self.std[i] + self.mean[i];
        }
    }
}

/// Statistics of model inputs `(s, a)` and targets `(r, s' − s)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub input: Standardizer,
    pub target: Standardizer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OfflineDataset {
    pub transitions: Vec<Transition>,
    pub initial_states: Vec<Vec<f64>>,
    pub state_dim: usize,
    pub action_dim: usize,
    pub reward_stats: RewardStats,
    pub normalization: NormalizationStats,
    pub meta: DatasetMeta,
}

/// Provenance and bookkeeping stored beside the transitions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub quality: Option<Quality>,
    pub seed: Option<u64>,
    /// Undiscounted raw-reward return of each collected episode.
    pub episode_returns: Vec<f64>,
    /// Set once rewards are normalized; normalizing twice is refused.
    pub rewards_normalized: bool,
}

impl DatasetMeta {
    pub fn mean_episode_return(&self) -> Option<f64> {
        if self.episode_returns.is_empty() {
            None
        } else {
            Some(self.episode_returns.iter().sum::<f64>() / self.episode_returns.len() as f64)
        }
    }
}

#[derive(Serialize, Deserialize)]
struct MetadataDoc {
    state_dim: usize,
    action_dim: usize,
    n_transitions: usize,
    reward_stats: RewardStats,
    normalization: NormalizationStats,
    initial_states_file: String,
    #[serde(flatten)]
    meta: DatasetMeta,
}

pub const TRANSITIONS_FILE: &str = "transitions.jsonl";
pub const METADATA_FILE: &str = "metadata.json";
pub const INITIAL_STATES_FILE: &str = "initial_states.json";

pub fn reward_stats(transitions: &[Transition]) -> Result<RewardStats> {
    if transitions.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let n = transitions.len() as f64;
    let (mut lo, mut hi, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
    for t in transitions {
        lo = lo.min(t.r);
        hi = hi.max(t.r);
        sum += t.r;
    }
    let mean = sum / n;
    let var = transitions.iter().map(|t| (t.r - mean).powi(2)).sum::<f64>() / n;
    Ok(RewardStats {
        r_min: lo,
        r_max: hi,
        sigma_r: var.sqrt(),
    })
}

pub fn model_input(t: &Transition) -> Vec<f64> {
    t.s.iter().chain(&t.a).copied().collect()
}

pub fn model_target(t: &Transition) -> Vec<f64> {
    std::iter::once(t.r).chain(t.s_next.iter().zip(&t.s).map(|(n, s)| n - s)).collect()
}

pub fn normalization_stats(transitions: &[Transition]) -> Result<NormalizationStats> {
    let first = transitions.first().ok_or(Error::Empty("dataset"))?;
    let (ds, da) = (first.s.len(), first.a.len());
    Ok(NormalizationStats {
        input: Standardizer::fit(transitions.iter().map(model_input), ds + da)?,
        target: Standardizer::fit(transitions.iter().map(model_target), 1 + ds)?,
    })
}

impl OfflineDataset {
    pub fn new(transitions: Vec<Transition>, initial_states: Vec<Vec<f64>>, meta: DatasetMeta) -> Result<Self> {
        let first = transitions.first().ok_or(Error::Empty("dataset"))?;
        let (state_dim, action_dim) = (first.s.len(), first.a.len());
        for t in &transitions {
            if t.s.len() != state_dim || t.s_next.len() != state_dim {
                return Err(Error::DimensionMismatch {
                    what: "transition state",
                    expected: state_dim,
                    got: t.s.len().max(t.s_next.len()),
                });
            }
            if t.a.len() != action_dim {
                return Err(Error::DimensionMismatch {
                    what: "transition action",
                    expected: action_dim,
                    got: t.a.len(),
                });
            }
            if !t.r.is_finite() || t.s.iter().chain(&t.a).chain(&t.s_next).any(|x| !x.is_finite()) {
                return Err(Error::invalid("transition", "non-finite entry"));
            }
        }
        if initial_states.is_empty() {
            return Err(Error::Empty("initial state pool"));
        }
        if let Some(bad) = initial_states.iter().find(|s| s.len() != state_dim) {
            return Err(Error::DimensionMismatch {
                what: "initial state",
                expected: state_dim,
                got: bad.len(),
            });
        }
        Ok(Self {
            reward_stats: reward_stats(&transitions)?,
            normalization: normalization_stats(&transitions)?,
            transitions,
            initial_states,
            state_dim,
            action_dim,
            meta,
        })
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Recomputes both statistics blocks from the transitions.
    pub fn refresh_stats(&mut self) -> Result<()> {
        self.reward_stats = reward_stats(&self.transitions)?;
        self.normalization = normalization_stats(&self.transitions)?;
        Ok(())
    }

    /// `r ← (r − r_min + 0.001) / (r_max − r_min)`, then refreshes stats.
    /// Not idempotent, so a second call is an error.
    pub fn normalize_rewards(&mut self) -> Result<()> {
        if self.meta.rewards_normalized {
            return Err(Error::invalid("dataset", "rewards are already normalized"));
        }
        let RewardStats { r_min, r_max, .. } = self.reward_stats;
        if r_max <= r_min {
            return Err(Error::ConstantReward(r_min));
        }
        for t in &mut self.transitions {
            t.r = normalized_reward(t.r, r_min, r_max);
        }
        self.meta.rewards_normalized = true;
        self.refresh_stats()
    }

    /// Coordinatewise `max |x|` over every stored `s` and `s'`.
    pub fn state_abs_max(&self) -> Vec<f64> {
        let mut m = vec![0.0_f64; self.state_dim];
        for t in &self.transitions {
            for (i, (a, b)) in t.s.iter().zip(&t.s_next).enumerate() {
                m[i] = m[i].max(a.abs()).max(b.abs());
            }
        }
        m
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(TRANSITIONS_FILE);
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        for t in &self.transitions {
            serde_json::to_writer(&mut w, &TransitionLine::from(t))?;
            w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;

        write_json(&dir.join(INITIAL_STATES_FILE), &self.initial_states)?;
        let doc = MetadataDoc {
            state_dim: self.state_dim,
            action_dim: self.action_dim,
            n_transitions: self.transitions.len(),
            reward_stats: self.reward_stats,
            normalization: self.normalization.clone(),
            initial_states_file: INITIAL_STATES_FILE.to_string(),
            meta: self.meta.clone(),
        };
        write_json(&dir.join(METADATA_FILE), &doc)
    }

    /// Loads and checks that the stored statistics match the transitions.
    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(METADATA_FILE);
        let doc: MetadataDoc = read_json(&meta_path)?;
        let path = dir.join(TRANSITIONS_FILE);
        let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut transitions = Vec::with_capacity(doc.n_transitions);
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let wire: TransitionLine = serde_json::from_str(&line)?;
            transitions.push(Transition::try_from(wire)?);
        }
        let init_path = dir.join(&doc.initial_states_file);
        let initial_states: Vec<Vec<f64>> = read_json(&init_path)?;
        let ds = Self::new(transitions, initial_states, doc.meta)?;
        if ds.state_dim != doc.state_dim || ds.action_dim != doc.action_dim || ds.len() != doc.n_transitions {
            return Err(Error::invalid("dataset", "metadata dimensions disagree with the transitions"));
        }
        check_close("reward stats", &stats_vec(&ds.reward_stats), &stats_vec(&doc.reward_stats))?;
        check_close("input mean", &ds.normalization.input.mean, &doc.normalization.input.mean)?;
        check_close("input std", &ds.normalization.input.std, &doc.normalization.input.std)?;
        check_close("target mean", &ds.normalization.target.mean, &doc.normalization.target.mean)?;
        check_close("target std", &ds.normalization.target.std, &doc.normalization.target.std)?;
        Ok(ds)
    }
}

pub fn normalized_reward(r: f64, r_min: f64, r_max: f64) -> f64 {
    (r - r_min + 0.001) / (r_max - r_min)
}

fn stats_vec(s: &RewardStats) -> Vec<f64> {
    vec![s.r_min, s.r_max, s.sigma_r]
}

fn check_close(what: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| (x - y).abs() > 1e-9) {
        return Err(Error::invalid(what, "stored statistics do not match the transitions"));
    }
    Ok(())
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Rolls out the scripted behavior for `n_episodes` and samples the μ₀ pool.
///
/// Goal entry is stored as `done = true`; the horizon cut is not a terminal.
pub fn collect_dataset(quality: Quality, n_episodes: usize, seed: u64) -> Result<OfflineDataset> {
    if n_episodes == 0 {
        return Err(Error::invalid("n_episodes", "must be at least 1"));
    }
    let env = PointMass::default();
    let mut rng = rng::stream(seed, tags::DATASET);
    let mut transitions = Vec::new();
    let mut returns = Vec::with_capacity(n_episodes);
    for _ in 0..n_episodes {
        let ep = env::run_episode(&env, |s, rng| env::behavior_action(s, quality, true, rng), &mut rng)?;
        returns.push(ep.ret());
        for t in 0..ep.actions.len() {
            transitions.push(Transition {
                s: ep.states[t].to_vec(),
                a: ep.actions[t].to_vec(),
                r: ep.rewards[t],
                s_next: ep.states[t + 1].to_vec(),
                done: ep.dones[t],
            });
        }
    }
    let mut pool_rng = rng::stream(seed, tags::INITIAL_POOL);
    let initial_states = (0..consts::INITIAL_POOL).map(|_| env.reset(&mut pool_rng).to_vec()).collect();
    OfflineDataset::new(
        transitions,
        initial_states,
        DatasetMeta {
            quality: Some(quality),
            seed: Some(seed),
            episode_returns: returns,
            rewards_normalized: false,
        },
    )
}

pub fn dataset_files(dir: &Path) -> [PathBuf; 3] {
    [dir.join(TRANSITIONS_FILE), dir.join(METADATA_FILE), dir.join(INITIAL_STATES_FILE)]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(rewards: &[f64]) -> OfflineDataset {
        let transitions = rewards
            .iter()
            .enumerate()
            .map(|(i, &r)| Transition {
                s: vec![i as f64, 1.0],
                a: vec![0.5],
                r,
                s_next: vec![i as f64 + 1.0, 1.0],
                done: false,
            })
            .collect();
        OfflineDataset::new(
            transitions,
            vec![vec![0.0, 1.0]],
            DatasetMeta {
                quality: None,
                seed: None,
                episode_returns: vec![],
                rewards_normalized: false,
            },
        )
        .unwrap()
    }

    #[test]
    fn reward_normalization_formula() {
        let mut ds = toy(&[0.0, 5.0, 10.0]);
        ds.normalize_rewards().unwrap();
        let r: Vec<f64> = ds.transitions.iter().map(|t| t.r).collect();
        for (got, want) in r.iter().zip([0.0001, 0.5001, 1.0001]) {
            assert!((got - want).abs() < 1e-12);
        }
        assert!((ds.reward_stats.r_min - 0.001 / 10.0).abs() < 1e-15);
        assert!(ds.normalize_rewards().is_err());
    }

    #[test]
    fn constant_rewards_refused() {
        let mut ds = toy(&[2.0, 2.0]);
        assert!(matches!(ds.normalize_rewards(), Err(Error::ConstantReward(_))));
    }

    #[test]
    fn constant_column_std_is_floored() {
        let ds = toy(&[1.0, 2.0, 3.0]);
        assert_eq!(ds.normalization.input.std[1], STD_FLOOR);
        assert_eq!(ds.normalization.input.std[2], STD_FLOOR);
    }

    #[test]
    fn single_episode_respects_horizon() {
        let ds = collect_dataset(Quality::Medium, 1, 0).unwrap();
        assert!(ds.len() <= consts::HORIZON);
        assert_eq!(ds.initial_states.len(), consts::INITIAL_POOL);
    }
}
