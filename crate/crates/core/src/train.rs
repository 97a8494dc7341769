//! The training loop: model fit, warm start, and the alternating
//! model/policy iterations with rollouts, retrains and per-epoch evaluation.

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{Agent, CriticValue};
use crate::buffer::{mixed_sample, Batch, ReplayBuffer};
use crate::config::{RunConfig, Variant};
use crate::dataset::{OfflineDataset, Transition};
use crate::dynamics::{DynamicsEnsemble, TerminationRule, TrainingData};
use crate::env::{self, consts, PointMass};
use crate::error::{Error, Result};
use crate::miw::{CriticTest, MiwEstimator, RewardTest, TestFunctionMode};
use crate::rng::{self, stream, tags};

/// Update and event counts over a run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleCounts {
    pub critic_steps: u64,
    pub discriminator_steps: u64,
    pub actor_steps: u64,
    pub rollout_generations: u64,
    pub retrains: u64,
    pub warm_discriminator_steps: u64,
    pub warm_actor_steps: u64,
}

impl ScheduleCounts {
    /// Counts implied by the configuration alone.
    pub fn expected(config: &RunConfig) -> Self {
        let total = config.total_iterations() as u64;
        let warm = (config.warm_epochs * config.iterations_per_epoch) as u64;
        let k = config.agent.policy_freq as u64;
        Self {
            critic_steps: total,
            discriminator_steps: total,
            actor_steps: total / k,
            rollout_generations: total.div_ceil(config.rollout_freq as u64),
            retrains: if config.variant.retrains_model() {
                total / config.retrain_every() as u64
            } else {
                0
            },
            warm_discriminator_steps: warm,
            warm_actor_steps: warm / k,
        }
    }
}

/// One row of the metrics table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub seed: u64,
    pub mean_return: f64,
    pub std_return: f64,
    pub critic_loss: f64,
    pub disc_loss: f64,
    pub actor_loss: f64,
    pub model_holdout_nll: f64,
    pub miw_mean_raw: f64,
    pub miw_std_raw: f64,
    pub n_penalized_rollouts: u64,
}

pub fn write_metrics_csv(path: &Path, rows: &[EpochMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<EpochMetrics>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

/// Rolls the policy through the model for at most `horizon` steps from
/// `n_samples` dataset states, stopping each branch at a predicted `done`.
/// Returns the transitions and how many were penalized.
pub fn generate_rollouts<R: Rng + ?Sized>(
    agent: &Agent,
    model: &DynamicsEnsemble,
    dataset: &OfflineDataset,
    horizon: usize,
    n_samples: usize,
    rng: &mut R,
) -> (Vec<Transition>, u64) {
    let sd = dataset.state_dim;
    let mut states = Array2::zeros((n_samples, sd));
    for mut row in states.rows_mut() {
        let t = &dataset.transitions[rng.gen_range(0..dataset.len())];
        row.iter_mut().zip(&t.s).for_each(|(d, v)| *d = *v);
    }
    let mut out = Vec::with_capacity(n_samples * horizon);
    let mut penalized = 0;
    for _ in 0..horizon {
        if states.nrows() == 0 {
            break;
        }
        let a = agent.act(states.view(), rng);
        let pred = model.predict(states.view(), a.view(), rng);
        let mut alive = Vec::new();
        for i in 0..states.nrows() {
            penalized += pred.penalized[i] as u64;
            out.push(Transition {
                s: states.row(i).to_vec(),
                a: a.row(i).to_vec(),
                r: pred.reward[i],
                s_next: pred.s_next.row(i).to_vec(),
                done: pred.done[i],
            });
            if !pred.done[i] {
                alive.push(i);
            }
        }
        states = pred.s_next.select(ndarray::Axis(0), &alive);
    }
    (out, penalized)
}

/// Losses from one iteration's updates; `actor_loss` is `None` on
/// iterations without an actor step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterationStats {
    pub critic_loss: f64,
    pub disc_loss: f64,
    pub actor_loss: Option<f64>,
}

#[derive(Clone, Debug, Default)]
struct EpochAccumulator {
    critic: f64,
    disc: f64,
    actor: f64,
    n: usize,
    n_actor: usize,
    penalized: u64,
}

impl EpochAccumulator {
    fn add(&mut self, s: &IterationStats) {
        self.critic += s.critic_loss;
        self.disc += s.disc_loss;
        self.n += 1;
        if let Some(a) = s.actor_loss {
            self.actor += a;
            self.n_actor += 1;
        }
    }

    fn mean(sum: f64, n: usize) -> f64 {
        if n == 0 {
            f64::NAN
        } else {
            sum / n as f64
        }
    }
}

/// Every piece of mutable run state. Each phase draws from its own rng
/// stream so that variants differing in one phase leave the others intact.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: RunConfig,
    /// Dataset with normalized rewards.
    pub dataset: OfflineDataset,
    pub data: TrainingData,
    pub model: DynamicsEnsemble,
    pub agent: Agent,
    pub miw: Option<MiwEstimator>,
    pub model_buffer: ReplayBuffer,
    pub counts: ScheduleCounts,
    pub iteration: usize,
    /// Dataset mean of raw ω, refreshed after each ω fit.
    pub miw_dataset_mean: f64,
    pub miw_stats: Option<(f64, f64)>,
    train_rng: rng::Rng,
    rollout_rng: rng::Rng,
    miw_rng: rng::Rng,
    acc: EpochAccumulator,
}

impl Trainer {
    /// Normalizes rewards and fits the initial model by MLE.
    pub fn new(config: RunConfig, dataset: &OfflineDataset) -> Result<Self> {
        config.validate()?;
        if dataset.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        let seed = config.seed;
        let mut dataset = dataset.clone();
        dataset.normalize_rewards()?;
        let mut model = DynamicsEnsemble::new(config.dynamics.clone(), &dataset, TerminationRule::PointMassGoal, seed)?;
        let data = model.training_data(&dataset, seed);
        model.train_mle(&data, config.model_init_epochs, stream(seed, tags::MODEL).gen())?;
        let agent = Agent::new(
            config.agent.clone(),
            dataset.state_dim,
            dataset.action_dim,
            consts::MAX_ACTION,
            &mut stream(seed, tags::INIT),
        )?;
        let miw = if config.variant.retrains_model() {
            let dim = dataset.state_dim + dataset.action_dim;
            let est = MiwEstimator::new(
                config.miw.clone(),
                dim,
                Some(dataset.normalization.input.clone()),
                &mut stream(seed, tags::INIT + 100),
            )?;
            Some(est)
        } else {
            None
        };
        let miw_dataset_mean = miw.as_ref().map_or(1.0, |m| m.raw_weights(&dataset).mean().unwrap_or(1.0));
        let model_buffer = ReplayBuffer::new(config.model_buffer_capacity())?;
        Ok(Self {
            train_rng: stream(seed, tags::TRAIN),
            rollout_rng: stream(seed, tags::ROLLOUT),
            miw_rng: stream(seed, tags::MIW),
            config,
            dataset,
            data,
            model,
            agent,
            miw,
            model_buffer,
            counts: ScheduleCounts::default(),
            iteration: 0,
            miw_dataset_mean,
            miw_stats: None,
            acc: EpochAccumulator::default(),
        })
    }

    /// Generator-only policy training against the discriminator, then the
    /// initial `q_avg`.
    pub fn warm_start(&mut self) -> Result<()> {
        let iterations = self.config.warm_epochs * self.config.iterations_per_epoch;
        let mut rng = stream(self.config.seed, tags::WARM);
        let before = self.agent.counters;
        self.agent
            .warm_start(&self.dataset, &self.model, iterations, self.config.batch_size, &mut rng)?;
        self.counts.warm_discriminator_steps += self.agent.counters.warm_discriminator - before.warm_discriminator;
        self.counts.warm_actor_steps += self.agent.counters.warm_actor - before.warm_actor;
        let states = Batch::sample(
            &self.dataset.transitions,
            self.config.batch_size,
            self.dataset.state_dim,
            self.dataset.action_dim,
            &mut rng,
        )
        .s;
        self.agent.init_q_avg(states.view(), &mut rng);
        Ok(())
    }

    /// Fits ω against the test function, then retrains the model with the
    /// normalized weights. The critic is snapshotted on entry.
    pub fn retrain(&mut self) -> Result<()> {
        let Some(miw) = self.miw.as_mut() else {
            return Ok(());
        };
        let gamma = self.config.gamma;
        let steps = self.config.miw.steps;
        let stats = match self.config.miw.test_function {
            TestFunctionMode::Critic => {
                let mut test = CriticTest {
                    spec: self.agent.critic_spec.clone(),
                    live: self.agent.critics[0].clone(),
                    target: self.agent.critic_targets[0].clone(),
                };
                miw.train(&self.dataset, &mut test, &self.agent, gamma, steps, &mut self.miw_rng)?
            }
            TestFunctionMode::Reward => {
                let mut test = RewardTest { model: &self.model };
                miw.train(&self.dataset, &mut test, &self.agent, gamma, steps, &mut self.miw_rng)?
            }
        };
        self.miw_dataset_mean = stats.raw_mean;
        self.miw_stats = Some((stats.raw_mean, stats.raw_std));
        let weights = miw.raw_weights(&self.dataset).to_vec();
        let seed = self.miw_rng.gen();
        let epochs = self.config.model_retrain_epochs;
        if self.config.variant == Variant::ValueDisc {
            let value = CriticValue { agent: &self.agent };
            self.model
                .train_value_discriminated(&self.dataset, &self.data, &weights, &value, epochs, seed)?;
        } else {
            self.model.train_weighted_mle(&self.data, &weights, epochs, seed)?;
        }
        self.counts.retrains += 1;
        Ok(())
    }

    /// Branch rollouts into the model buffer; returns the penalized count.
    pub fn rollout(&mut self) -> u64 {
        let (ts, penalized) = generate_rollouts(
            &self.agent,
            &self.model,
            &self.dataset,
            self.config.horizon,
            self.config.rollout_samples,
            &mut self.rollout_rng,
        );
        self.model_buffer.extend(ts);
        self.counts.rollout_generations += 1;
        penalized
    }

    /// Normalized ω for each batch row, used by the weighted generator term.
    fn row_weights(&self, batch: &Batch) -> Option<Vec<f64>> {
        if self.config.variant != Variant::Wpr {
            return None;
        }
        let miw = self.miw.as_ref()?;
        let raw = miw.forward(batch.s.view(), batch.a.view());
        Some(raw.iter().map(|w| w / self.miw_dataset_mean).collect())
    }

    /// Mixed batch, then critic, discriminator, actor (every k) and the soft updates.
    pub fn update(&mut self, iteration: usize) -> Result<IterationStats> {
        let (sd, ad) = (self.dataset.state_dim, self.dataset.action_dim);
        let cfg = &self.config;
        let rng = &mut self.train_rng;
        let batch = mixed_sample(
            &self.dataset.transitions,
            &self.model_buffer,
            cfg.env_fraction,
            cfg.batch_size,
            sd,
            ad,
            rng,
        )?;
        let critic_loss = self.agent.critic_update(&batch, cfg.gamma, rng)?;
        let real = Batch::sample(&self.dataset.transitions, cfg.batch_size, sd, ad, rng);
        let fake = self.agent.build_fake_batch(batch.s.view(), &self.model, rng);
        let disc_loss = self.agent.discriminator_update(real.s.view(), real.a.view(), &fake, rng)?;
        self.counts.critic_steps += 1;
        self.counts.discriminator_steps += 1;
        let actor_loss = if iteration % cfg.agent.policy_freq == 0 {
            let weights = self.row_weights(&batch);
            let rng = &mut self.train_rng;
            let loss = self
                .agent
                .actor_update(batch.s.view(), &self.model, weights.as_deref(), true, rng)?;
            self.counts.actor_steps += 1;
            Some(loss)
        } else {
            None
        };
        self.agent.post_step_updates(batch.s.view(), &mut self.train_rng)?;
        Ok(IterationStats {
            critic_loss,
            disc_loss,
            actor_loss,
        })
    }

    /// Iteration `self.iteration + 1` of the schedule.
    pub fn step(&mut self) -> Result<IterationStats> {
        let it = self.iteration + 1;
        let wrap = |source: Error| Error::Aborted {
            iteration: it,
            source: Box::new(source),
        };
        if self.config.variant.retrains_model() && it % self.config.retrain_every() == 0 {
            self.retrain().map_err(wrap)?;
        }
        if (it - 1) % self.config.rollout_freq == 0 {
            self.acc.penalized += self.rollout();
        }
        let stats = self.update(it).map_err(wrap)?;
        self.acc.add(&stats);
        self.iteration = it;
        Ok(stats)
    }

    /// Evaluates the live policy on the real environment with its noise on.
    pub fn evaluate(&self, epoch: usize) -> Result<env::EvalSummary> {
        let seed = self.config.seed.wrapping_mul(1_000_003).wrapping_add(epoch as u64);
        evaluate_agent(&self.agent, self.config.eval_episodes, seed)
    }

    /// Runs one epoch of iterations and returns its metrics row.
    pub fn run_epoch(&mut self, epoch: usize) -> Result<EpochMetrics> {
        self.acc = EpochAccumulator::default();
        for _ in 0..self.config.iterations_per_epoch {
            self.step()?;
        }
        let eval = self.evaluate(epoch)?;
        let (miw_mean_raw, miw_std_raw) = self.miw_stats.unwrap_or((f64::NAN, f64::NAN));
        let acc = &self.acc;
        Ok(EpochMetrics {
            epoch,
            seed: self.config.seed,
            mean_return: eval.mean_return,
            std_return: eval.std_return,
            critic_loss: EpochAccumulator::mean(acc.critic, acc.n),
            disc_loss: EpochAccumulator::mean(acc.disc, acc.n),
            actor_loss: EpochAccumulator::mean(acc.actor, acc.n_actor),
            model_holdout_nll: self.model.mean_elite_holdout_nll(),
            miw_mean_raw,
            miw_std_raw,
            n_penalized_rollouts: acc.penalized,
        })
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        self.agent.save(&dir.join("agent"))?;
        self.model.save(&dir.join("model"))?;
        if let Some(miw) = &self.miw {
            miw.save(&dir.join("miw"))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub trainer: Trainer,
    pub metrics: Vec<EpochMetrics>,
}

impl RunOutput {
    pub fn final_return(&self) -> f64 {
        self.metrics.last().map_or(f64::NAN, |m| m.mean_return)
    }

    /// Writes the checkpoint directory and `metrics.csv` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.trainer.save_checkpoint(&dir.join("checkpoint"))?;
        write_metrics_csv(&dir.join(METRICS_FILE), &self.metrics)
    }
}

pub const METRICS_FILE: &str = "metrics.csv";

/// Point-mass returns of `agent` with its policy noise active.
pub fn evaluate_agent(agent: &Agent, episodes: usize, seed: u64) -> Result<env::EvalSummary> {
    let sd = agent.state_dim();
    env::evaluate_policy(
        &PointMass::default(),
        |s, rng| {
            let row = ArrayView2::from_shape((1, sd), s).expect("state row");
            agent.act(row, rng).row(0).to_vec()
        },
        episodes,
        seed,
    )
}

/// The full schedule: model fit, warm start, then `epochs` epochs with an
/// evaluation after each. `on_epoch` sees every metrics row as it is produced.
pub fn run_ampl_with(config: RunConfig, dataset: &OfflineDataset, mut on_epoch: impl FnMut(&EpochMetrics)) -> Result<RunOutput> {
    let mut trainer = Trainer::new(config, dataset)?;
    trainer.warm_start()?;
    let mut metrics = Vec::with_capacity(trainer.config.epochs);
    for epoch in 1..=trainer.config.epochs {
        let row = trainer.run_epoch(epoch)?;
        log::info!(
            "seed {} {} epoch {epoch}: return {:.3} ± {:.3}, critic {:.4}, disc {:.4}, actor {:.4}",
            row.seed,
            trainer.config.variant,
            row.mean_return,
            row.std_return,
            row.critic_loss,
            row.disc_loss,
            row.actor_loss
        );
        on_epoch(&row);
        metrics.push(row);
    }
    Ok(RunOutput { trainer, metrics })
}

pub fn run_ampl(config: RunConfig, dataset: &OfflineDataset) -> Result<RunOutput> {
    run_ampl_with(config, dataset, |_| {})
}
