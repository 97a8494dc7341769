//! Run configuration with full-scale and desk-scale presets.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::agent::{AgentConfig, PolicyHead};
use crate::dynamics::DynamicsConfig;
use crate::error::{Error, Result};
use crate::miw::{MiwConfig, TestFunctionMode};

/// Which ablation path a run takes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Full method.
    #[default]
    Main,
    /// No weighting: the model is fit once by MLE and never retrained.
    Nw,
    /// Generator term weighted by the normalized importance weights.
    Wpr,
    /// Importance weights tested against the learned reward instead of the critic.
    RewTest,
    /// Model retrained with the value-discriminated loss.
    ValueDisc,
    /// Gaussian policy head instead of the implicit one.
    Gaussian,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Main,
        Variant::Nw,
        Variant::Wpr,
        Variant::RewTest,
        Variant::ValueDisc,
        Variant::Gaussian,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Main => "main",
            Variant::Nw => "nw",
            Variant::Wpr => "wpr",
            Variant::RewTest => "rew_test",
            Variant::ValueDisc => "value_disc",
            Variant::Gaussian => "gaussian",
        }
    }

    pub fn retrains_model(self) -> bool {
        self != Variant::Nw
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s || v.name().replace('_', "-") == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::invalid("variant", format!("{s:?} is not one of {}", names.join(", ")))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub epochs: usize,
    /// Training iterations per epoch; also the model-epoch length in steps at full scale.
    pub iterations_per_epoch: usize,
    pub batch_size: usize,
    pub gamma: f64,
    /// Rollouts are generated at the start of every block of this many iterations.
    pub rollout_freq: usize,
    pub rollout_samples: usize,
    pub retain_epochs: usize,
    pub horizon: usize,
    /// Probability that a batch row comes from the dataset rather than the model buffer.
    pub env_fraction: f64,
    pub warm_epochs: usize,
    /// MLE epochs for the initial model fit.
    pub model_init_epochs: usize,
    /// Retrain ω and the model every this many epochs.
    pub model_retrain_period: usize,
    /// Model epochs per retrain event.
    pub model_retrain_epochs: usize,
    pub eval_episodes: usize,
    pub seed: u64,
    /// Seeds swept by ablations.
    pub seeds: Vec<u64>,
    pub variant: Variant,
    pub desk_scale: bool,
    pub agent: AgentConfig,
    pub dynamics: DynamicsConfig,
    pub miw: MiwConfig,
}

impl RunConfig {
    pub fn full() -> Self {
        Self {
            epochs: 1000,
            iterations_per_epoch: 1000,
            batch_size: 512,
            gamma: 0.99,
            rollout_freq: 250,
            rollout_samples: 128,
            retain_epochs: 5,
            horizon: 5,
            env_fraction: 0.5,
            warm_epochs: 40,
            model_init_epochs: 50,
            model_retrain_period: 100,
            model_retrain_epochs: 1,
            eval_episodes: 10,
            seed: 0,
            seeds: vec![0, 1, 2, 3, 4],
            variant: Variant::Main,
            desk_scale: false,
            agent: AgentConfig::full(),
            dynamics: DynamicsConfig::full(),
            miw: MiwConfig::full(),
        }
    }

    pub fn desk() -> Self {
        Self {
            epochs: 30,
            batch_size: 128,
            warm_epochs: 5,
            model_init_epochs: 10,
            model_retrain_period: 10,
            desk_scale: true,
            agent: AgentConfig::desk(),
            dynamics: DynamicsConfig::desk(),
            miw: MiwConfig::desk(),
            ..Self::full()
        }
    }

    pub fn preset(desk_scale: bool) -> Self {
        if desk_scale {
            Self::desk()
        } else {
            Self::full()
        }
    }

    /// Applies the variant's switches to the nested configs.
    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self.agent.policy_head = match variant {
            Variant::Gaussian => PolicyHead::Gaussian,
            _ => PolicyHead::Implicit,
        };
        self.miw.test_function = match variant {
            Variant::RewTest => TestFunctionMode::Reward,
            _ => TestFunctionMode::Critic,
        };
        self
    }

    pub fn total_iterations(&self) -> usize {
        self.epochs * self.iterations_per_epoch
    }

    pub fn retrain_every(&self) -> usize {
        self.model_retrain_period * self.iterations_per_epoch
    }

    /// `retain_epochs × rollout blocks per epoch × starts × horizon`.
    pub fn model_buffer_capacity(&self) -> usize {
        self.retain_epochs * (self.iterations_per_epoch / self.rollout_freq) * self.rollout_samples * self.horizon
    }

    /// Every violation, one line each.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let mut need = |ok: bool, msg: &str| {
            if !ok {
                v.push(msg.to_string());
            }
        };
        need(self.epochs > 0, "epochs: must be positive");
        need(self.iterations_per_epoch > 0, "iterations_per_epoch: must be positive");
        need(self.batch_size > 0, "batch_size: must be positive");
        need(self.gamma > 0.0 && self.gamma < 1.0, "gamma: must lie in (0, 1)");
        need(self.rollout_freq > 0, "rollout_freq: must be positive");
        need(self.rollout_samples > 0, "rollout_samples: must be positive");
        need(self.retain_epochs > 0, "retain_epochs: must be positive");
        need(self.horizon >= 1, "horizon: must be at least 1");
        need((0.0..=1.0).contains(&self.env_fraction), "env_fraction: must lie in [0, 1]");
        need(self.model_retrain_period > 0, "model_retrain_period: must be positive");
        need(self.eval_episodes > 0, "eval_episodes: must be positive");
        need(
            self.iterations_per_epoch >= self.rollout_freq,
            "rollout_freq: must not exceed iterations_per_epoch",
        );
        need(
            (self.agent.policy_head == PolicyHead::Gaussian) == (self.variant == Variant::Gaussian),
            "agent.policy_head: must be gaussian exactly for the gaussian variant",
        );
        need(
            (self.miw.test_function == TestFunctionMode::Reward) == (self.variant == Variant::RewTest),
            "miw.test_function: must be reward exactly for the rew_test variant",
        );
        for (name, res) in [
            ("agent", self.agent.validate()),
            ("dynamics", self.dynamics.validate()),
            ("miw", self.miw.validate()),
        ] {
            if let Err(e) = res {
                v.push(format!("{name}: {e}"));
            }
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::invalid("run config", v.join("; ")))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: Self = serde_json::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn capacity_formula() {
        let mut c = RunConfig::full();
        for h in [1, 3, 5] {
            c.horizon = h;
            assert_eq!(c.model_buffer_capacity(), 5 * 4 * 128 * h);
        }
    }

    #[test]
    fn presets_validate() {
        for v in Variant::ALL {
            RunConfig::full().with_variant(v).validate().unwrap();
            RunConfig::desk().with_variant(v).validate().unwrap();
        }
    }

    #[test]
    fn all_violations_are_listed() {
        let mut c = RunConfig::desk();
        c.env_fraction = 1.5;
        c.horizon = 0;
        c.batch_size = 0;
        assert_eq!(c.violations().len(), 3);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert_eq!("value-disc".parse::<Variant>().unwrap(), Variant::ValueDisc);
        assert!("bogus".parse::<Variant>().is_err());
    }

    #[test]
    fn json_round_trip_and_unknown_fields() {
        let c = RunConfig::desk().with_variant(Variant::Wpr);
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), c);
        let bad = text.replacen("\"epochs\"", "\"epochz\"", 1);
        assert!(serde_json::from_str::<RunConfig>(&bad).is_err());
    }
}
