//! Implicit policy, twin critics with a conservative target, and the
//! state-action discriminator, with every loss exposed as an [`Objective`].

use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::buffer::Batch;
use crate::dataset::{read_json, write_json, OfflineDataset};
use crate::dynamics::{DynamicsEnsemble, ValueFunction};
use crate::error::{Error, Result};
use crate::miw::{concat_columns, ActionSampler};
use crate::nn::{
    self, clamp_log_std, clip_grad_norm, huber, huber_grad, soft_update, AdamState, ForwardCache, MlpSpec, Objective,
    OutputTransform, ParamVector,
};
use crate::rng::seeded;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorLoss {
    /// `−mean log D(fake)`.
    #[default]
    NonSaturating,
    /// `mean log(1 − D(fake))`.
    Saturating,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyHead {
    /// `max_action·tanh(MLP([s; z]))` with `z ~ N(0, σ²I)`.
    #[default]
    Implicit,
    /// `max_action·tanh(μ(s) + σ(s)·ε)`.
    Gaussian,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub hidden: Vec<usize>,
    pub critic_lr: f64,
    pub actor_lr: f64,
    pub disc_lr: f64,
    /// Adam β₁ for the actor and discriminator.
    pub gan_beta1: f64,
    pub target_rate: f64,
    pub c_mix: f64,
    pub lambda_prime: f64,
    pub policy_freq: usize,
    pub sigma_noise: f64,
    /// Defaults to `min(10, state_dim / 2)`.
    pub noise_dim: Option<usize>,
    pub huber_delta: f64,
    pub critic_grad_clip: f64,
    pub bootstrap_limit: f64,
    pub disc_clamp: f64,
    pub true_label_low: f64,
    pub generator_loss: GeneratorLoss,
    pub policy_head: PolicyHead,
    /// Let actor gradients flow through the model's next-state sample.
    pub model_gradient: bool,
}

impl AgentConfig {
    pub fn full() -> Self {
        Self {
            hidden: vec![400, 300],
            critic_lr: 3e-4,
            actor_lr: 2e-4,
            disc_lr: 2e-4,
            gan_beta1: 0.4,
            target_rate: 0.005,
            c_mix: 0.75,
            lambda_prime: 10.0,
            policy_freq: 2,
            sigma_noise: 1.0,
            noise_dim: None,
            huber_delta: 500.0,
            critic_grad_clip: 0.1,
            bootstrap_limit: 2000.0,
            disc_clamp: 1e-6,
            true_label_low: 0.8,
            generator_loss: GeneratorLoss::NonSaturating,
            policy_head: PolicyHead::Implicit,
            model_gradient: true,
        }
    }

    pub fn desk() -> Self {
        Self {
            hidden: vec![64, 64],
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| Err(Error::invalid("agent config", reason));
        if self.hidden.is_empty() {
            return bad("hidden must list at least one layer");
        }
        if !(0.0..=1.0).contains(&self.c_mix) {
            return bad("c_mix must lie in [0, 1]");
        }
        if self.policy_freq == 0 {
            return bad("policy_freq must be positive");
        }
        if !(self.target_rate > 0.0 && self.target_rate <= 1.0) {
            return bad("target_rate must lie in (0, 1]");
        }
        if self.sigma_noise < 0.0 {
            return bad("sigma_noise must be non-negative");
        }
        if !(0.0..1.0).contains(&self.true_label_low) {
            return bad("true_label_low must lie in [0, 1)");
        }
        Ok(())
    }
}

pub fn default_noise_dim(state_dim: usize) -> usize {
    (state_dim / 2).min(10)
}

/// The policy network together with how noise enters it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PolicyNet {
    pub head: PolicyHead,
    pub spec: MlpSpec,
    pub state_dim: usize,
    pub action_dim: usize,
    pub noise_dim: usize,
    pub max_action: f64,
}

/// Intermediates of one policy forward pass.
pub struct PolicyPass {
    pub actions: Array2<f64>,
    cache: ForwardCache,
    noise: Array2<f64>,
    /// Pre-squash values for the Gaussian head.
    pre: Option<Array2<f64>>,
}

impl PolicyNet {
    pub fn new(head: PolicyHead, state_dim: usize, action_dim: usize, noise_dim: usize, hidden: &[usize], max_action: f64) -> Self {
        let spec = match head {
            PolicyHead::Implicit => MlpSpec::new(state_dim + noise_dim, hidden, action_dim)
                .with_output(OutputTransform::TanhScaled { max: max_action }),
            PolicyHead::Gaussian => MlpSpec::new(state_dim, hidden, 2 * action_dim),
        };
        Self {
            head,
            spec,
            state_dim,
            action_dim,
            noise_dim,
            max_action,
        }
    }

    /// Noise rows: `z ~ N(0, σ²)` for the implicit head, standard `ε` for the
    /// Gaussian head (scaled by σ too, so σ = 0 gives the mean action).
    pub fn noise<R: Rng + ?Sized>(&self, n: usize, sigma: f64, rng: &mut R) -> Array2<f64> {
        let width = match self.head {
            PolicyHead::Implicit => self.noise_dim,
            PolicyHead::Gaussian => self.action_dim,
        };
        Array2::from_shape_simple_fn((n, width), || {
            let e: f64 = StandardNormal.sample(rng);
            sigma * e
        })
    }

    pub fn forward(&self, params: &[f64], s: ArrayView2<f64>, noise: ArrayView2<f64>) -> PolicyPass {
        match self.head {
            PolicyHead::Implicit => {
                let x = concat_columns(s, noise);
                let cache = self.spec.forward_cached(params, x.view());
                PolicyPass {
                    actions: cache.output().clone(),
                    cache,
                    noise: noise.to_owned(),
                    pre: None,
                }
            }
            PolicyHead::Gaussian => {
                let cache = self.spec.forward_cached(params, s);
                let out = cache.output();
                let ad = self.action_dim;
                let pre = Array2::from_shape_fn((s.nrows(), ad), |(i, j)| {
                    out[(i, j)] + clamp_log_std(out[(i, ad + j)]).exp() * noise[(i, j)]
                });
                PolicyPass {
                    actions: pre.mapv(|u| self.max_action * u.tanh()),
                    cache,
                    noise: noise.to_owned(),
                    pre: Some(pre),
                }
            }
        }
    }

    /// Backpropagates `d_actions`; returns the gradient with respect to the
    /// state rows and adds parameter gradients into `grads`.
    pub fn backward(&self, params: &[f64], pass: &PolicyPass, d_actions: ArrayView2<f64>, grads: Option<&mut [f64]>) -> Array2<f64> {
        match self.head {
            PolicyHead::Implicit => {
                let dx = self.spec.backward(params, &pass.cache, d_actions, grads);
                dx.slice(s![.., ..self.state_dim]).to_owned()
            }
            PolicyHead::Gaussian => {
                let ad = self.action_dim;
                let out = pass.cache.output();
                let pre = pass.pre.as_ref().expect("gaussian pass keeps pre-squash values");
                let mut d_out = Array2::zeros(out.raw_dim());
                for i in 0..out.nrows() {
                    for j in 0..ad {
                        let t = pre[(i, j)].tanh();
                        let du = d_actions[(i, j)] * self.max_action * (1.0 - t * t);
                        d_out[(i, j)] = du;
                        let ls = out[(i, ad + j)];
                        if (nn::LOG_STD_MIN..=nn::LOG_STD_MAX).contains(&ls) {
                            d_out[(i, ad + j)] = du * ls.exp() * pass.noise[(i, j)];
                        }
                    }
                }
                self.spec.backward(params, &pass.cache, d_out.view(), grads)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateCounters {
    pub critic: u64,
    pub discriminator: u64,
    pub actor: u64,
    pub warm_actor: u64,
    pub warm_discriminator: u64,
}

#[derive(Clone, Debug)]
struct Optimizers {
    policy: AdamState,
    critics: [AdamState; 2],
    discriminator: AdamState,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Agent {
    pub config: AgentConfig,
    pub policy_net: PolicyNet,
    pub critic_spec: MlpSpec,
    pub disc_spec: MlpSpec,
    pub policy: ParamVector,
    pub policy_target: ParamVector,
    pub critics: [ParamVector; 2],
    pub critic_targets: [ParamVector; 2],
    pub discriminator: ParamVector,
    /// Running average of `|min_j Q_j(s, π(s))|`; zero until initialized.
    pub q_avg: f64,
    pub counters: UpdateCounters,
    #[serde(skip)]
    optims: Option<Optimizers>,
}

/// Generated `(s, a)` rows with the index of the batch state each came from.
#[derive(Clone, Debug)]
pub struct FakeBatch {
    pub s: Array2<f64>,
    pub a: Array2<f64>,
    pub source: Vec<usize>,
}

impl FakeBatch {
    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }
}

impl Agent {
    pub fn new<R: Rng + ?Sized>(config: AgentConfig, state_dim: usize, action_dim: usize, max_action: f64, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let noise_dim = config.noise_dim.unwrap_or_else(|| default_noise_dim(state_dim));
        let policy_net = PolicyNet::new(config.policy_head, state_dim, action_dim, noise_dim, &config.hidden, max_action);
        let critic_spec = MlpSpec::new(state_dim + action_dim, &config.hidden, 1);
        let disc_spec = MlpSpec::new(state_dim + action_dim, &config.hidden, 1).with_output(OutputTransform::Sigmoid);
        for spec in [&policy_net.spec, &critic_spec, &disc_spec] {
            spec.validate()?;
        }
        let seeds: [u64; 4] = rng.gen();
        let policy = policy_net.spec.init(&mut seeded(seeds[0]));
        let critics = [critic_spec.init(&mut seeded(seeds[1])), critic_spec.init(&mut seeded(seeds[2]))];
        let discriminator = disc_spec.init(&mut seeded(seeds[3]));
        let mut agent = Self {
            policy_target: policy.clone(),
            critic_targets: critics.clone(),
            config,
            policy_net,
            critic_spec,
            disc_spec,
            policy,
            critics,
            discriminator,
            q_avg: 0.0,
            counters: UpdateCounters::default(),
            optims: None,
        };
        agent.ensure_optims();
        Ok(agent)
    }

    fn ensure_optims(&mut self) {
        let c = &self.config;
        let (np, nc, nd) = (self.policy.len(), self.critics[0].len(), self.discriminator.len());
        self.optims.get_or_insert_with(|| Optimizers {
            policy: AdamState::with_beta1(np, c.actor_lr, c.gan_beta1),
            critics: [AdamState::new(nc, c.critic_lr), AdamState::new(nc, c.critic_lr)],
            discriminator: AdamState::with_beta1(nd, c.disc_lr, c.gan_beta1),
        });
    }

    pub fn state_dim(&self) -> usize {
        self.policy_net.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.policy_net.action_dim
    }

    pub fn noise_dim(&self) -> usize {
        self.policy_net.noise_dim
    }

    pub fn lambda(&self) -> f64 {
        self.config.lambda_prime / self.q_avg
    }

    pub fn policy_noise<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Array2<f64> {
        self.policy_net.noise(n, self.config.sigma_noise, rng)
    }

    /// Actions from the live policy with fresh noise.
    pub fn act<R: Rng + ?Sized>(&self, s: ArrayView2<f64>, rng: &mut R) -> Array2<f64> {
        let z = self.policy_noise(s.nrows(), rng);
        self.policy_net.forward(self.policy.as_slice(), s, z.view()).actions
    }

    pub fn act_target<R: Rng + ?Sized>(&self, s: ArrayView2<f64>, rng: &mut R) -> Array2<f64> {
        let z = self.policy_noise(s.nrows(), rng);
        self.policy_net.forward(self.policy_target.as_slice(), s, z.view()).actions
    }

    pub fn q(&self, j: usize, s: ArrayView2<f64>, a: ArrayView2<f64>) -> Array1<f64> {
        let x = concat_columns(s, a);
        self.critic_spec.forward(self.critics[j].as_slice(), x.view()).column(0).to_owned()
    }

    pub fn q_target(&self, j: usize, s: ArrayView2<f64>, a: ArrayView2<f64>) -> Array1<f64> {
        let x = concat_columns(s, a);
        self.critic_spec.forward(self.critic_targets[j].as_slice(), x.view()).column(0).to_owned()
    }

    pub fn q_min(&self, s: ArrayView2<f64>, a: ArrayView2<f64>) -> Array1<f64> {
        let (q1, q2) = (self.q(0, s, a), self.q(1, s, a));
        q1.iter().zip(&q2).map(|(a, b)| a.min(*b)).collect()
    }

    pub fn discriminate(&self, s: ArrayView2<f64>, a: ArrayView2<f64>) -> Array1<f64> {
        let x = concat_columns(s, a);
        self.disc_spec.forward(self.discriminator.as_slice(), x.view()).column(0).to_owned()
    }

    /// `r + γ·Q̃(s', a')·1[|Q̃| < limit]` with `Q̃ = c·min + (1 − c)·max` over the
    /// target critics and `a'` from the target policy; terminal rows give `r`.
    pub fn conservative_target<R: Rng + ?Sized>(&self, batch: &Batch, gamma: f64, rng: &mut R) -> Vec<f64> {
        let a_next = self.act_target(batch.s_next.view(), rng);
        let q1 = self.q_target(0, batch.s_next.view(), a_next.view());
        let q2 = self.q_target(1, batch.s_next.view(), a_next.view());
        (0..batch.len())
            .map(|i| {
                if batch.done[i] {
                    return batch.r[i];
                }
                let q_mix = mix_min_max(q1[i], q2[i], self.config.c_mix);
                let keep = if q_mix.abs() < self.config.bootstrap_limit { 1.0 } else { 0.0 };
                batch.r[i] + gamma * q_mix * keep
            })
            .collect()
    }

    /// One clipped Adam step per critic on the Huber loss; returns the mean
    /// of the two losses.
    pub fn critic_update<R: Rng + ?Sized>(&mut self, batch: &Batch, gamma: f64, rng: &mut R) -> Result<f64> {
        let targets = Array1::from(self.conservative_target(batch, gamma, rng));
        let x = concat_columns(batch.s.view(), batch.a.view());
        let step = self.counters.critic;
        let clip = self.config.critic_grad_clip;
        let delta = self.config.huber_delta;
        let mut total = 0.0;
        for j in 0..2 {
            let obj = CriticObjective {
                spec: &self.critic_spec,
                inputs: x.view(),
                targets: targets.view(),
                delta,
            };
            let (loss, mut grads) = obj.value_and_grad(self.critics[j].as_slice());
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    what: "critic loss",
                    step: step as usize,
                    detail: format!("critic {j}"),
                });
            }
            clip_grad_norm(&mut grads, clip);
            self.ensure_optims();
            let opts = self.optims.as_mut().expect("optimizers initialized");
            opts.critics[j].step(self.critics[j].as_mut_slice(), &grads);
            total += loss;
        }
        self.counters.critic += 1;
        Ok(total / 2.0)
    }

    /// `(s, a)` with `a ~ π(s)`, plus `(s', a')` whenever the model's `s'` is
    /// not terminal. No gradient is kept.
    pub fn build_fake_batch<R: Rng + ?Sized>(&self, states: ArrayView2<f64>, model: &DynamicsEnsemble, rng: &mut R) -> FakeBatch {
        let a = self.act(states, rng);
        let pred = model.predict(states, a.view(), rng);
        let keep: Vec<usize> = (0..states.nrows()).filter(|&i| !pred.done[i]).collect();
        let s2 = pred.s_next.select(Axis(0), &keep);
        let a2 = self.act(s2.view(), rng);
        let s_all = ndarray::concatenate(Axis(0), &[states.view(), s2.view()]).expect("same width");
        let a_all = ndarray::concatenate(Axis(0), &[a.view(), a2.view()]).expect("same width");
        FakeBatch {
            s: s_all,
            a: a_all,
            source: (0..states.nrows()).chain(keep).collect(),
        }
    }

    /// One Adam step on the clamped binary cross-entropy with soft true labels
    /// drawn from `[true_label_low, 1)` and fake labels 0.
    pub fn discriminator_update<R: Rng + ?Sized>(
        &mut self,
        true_s: ArrayView2<f64>,
        true_a: ArrayView2<f64>,
        fake: &FakeBatch,
        rng: &mut R,
    ) -> Result<f64> {
        if true_s.nrows() == 0 || fake.is_empty() {
            return Err(Error::Empty("discriminator batch"));
        }
        let lo = self.config.true_label_low;
        let mut labels: Vec<f64> = (0..true_s.nrows()).map(|_| rng.gen_range(lo..1.0)).collect();
        labels.extend(std::iter::repeat(0.0).take(fake.len()));
        let loss = self.discriminator_step(true_s, true_a, fake, &labels)?;
        self.counters.discriminator += 1;
        Ok(loss)
    }

    /// Discriminator step with caller-supplied labels (true rows first).
    pub fn discriminator_step(&mut self, true_s: ArrayView2<f64>, true_a: ArrayView2<f64>, fake: &FakeBatch, labels: &[f64]) -> Result<f64> {
        let s_all = ndarray::concatenate(Axis(0), &[true_s.view(), fake.s.view()]).expect("same width");
        let a_all = ndarray::concatenate(Axis(0), &[true_a.view(), fake.a.view()]).expect("same width");
        let x = concat_columns(s_all.view(), a_all.view());
        let obj = DiscriminatorObjective {
            spec: &self.disc_spec,
            inputs: x.view(),
            labels,
            clamp: self.config.disc_clamp,
        };
        let (loss, grads) = obj.value_and_grad(self.discriminator.as_slice());
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                what: "discriminator loss",
                step: self.counters.discriminator as usize,
                detail: String::new(),
            });
        }
        self.ensure_optims();
        let opts = self.optims.as_mut().expect("optimizers initialized");
        opts.discriminator.step(self.discriminator.as_mut_slice(), &grads);
        Ok(loss)
    }

    /// Builds the actor loss for `states` with fresh noise. `row_weights`
    /// (one per state, frozen) scale the generator term; `with_q = false`
    /// drops the critic term (warm start).
    pub fn actor_objective<'a, R: Rng + ?Sized>(
        &'a self,
        states: ArrayView2<'a, f64>,
        model: &'a DynamicsEnsemble,
        row_weights: Option<&'a [f64]>,
        with_q: bool,
        rng: &mut R,
    ) -> Result<ActorObjective<'a>> {
        if with_q && self.q_avg <= 0.0 {
            return Err(Error::invalid("actor update", format!("q_avg must be positive, got {}", self.q_avg)));
        }
        let n = states.nrows();
        Ok(ActorObjective {
            agent: self,
            model,
            states,
            z: self.policy_noise(n, rng),
            z_next: self.policy_noise(n, rng),
            model_seed: rng.gen(),
            row_weights,
            lambda: if with_q { self.lambda() } else { 0.0 },
            with_q,
        })
    }

    /// One Adam step on the actor loss.
    pub fn actor_update<R: Rng + ?Sized>(
        &mut self,
        states: ArrayView2<f64>,
        model: &DynamicsEnsemble,
        row_weights: Option<&[f64]>,
        with_q: bool,
        rng: &mut R,
    ) -> Result<f64> {
        let (loss, grads) = {
            let obj = self.actor_objective(states.view(), model, row_weights, with_q, rng)?;
            obj.value_and_grad(self.policy.as_slice())
        };
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                what: "actor loss",
                step: self.counters.actor as usize,
                detail: format!("q_avg = {}", self.q_avg),
            });
        }
        self.ensure_optims();
        let opts = self.optims.as_mut().expect("optimizers initialized");
        opts.policy.step(self.policy.as_mut_slice(), &grads);
        if with_q {
            self.counters.actor += 1;
        } else {
            self.counters.warm_actor += 1;
        }
        Ok(loss)
    }

    /// `mean |min_j Q_j(s, π(s))|` on fresh noise.
    pub fn mean_abs_q<R: Rng + ?Sized>(&self, states: ArrayView2<f64>, rng: &mut R) -> f64 {
        let a = self.act(states, rng);
        self.q_min(states, a.view()).mapv(f64::abs).mean().unwrap_or(0.0)
    }

    pub fn init_q_avg<R: Rng + ?Sized>(&mut self, states: ArrayView2<f64>, rng: &mut R) {
        self.q_avg = self.mean_abs_q(states, rng);
    }

    /// Target-network soft updates and the `q_avg` refresh.
    pub fn post_step_updates<R: Rng + ?Sized>(&mut self, states: ArrayView2<f64>, rng: &mut R) -> Result<()> {
        let beta = self.config.target_rate;
        soft_update(self.policy_target.as_mut_slice(), self.policy.as_slice(), beta)?;
        for j in 0..2 {
            soft_update(self.critic_targets[j].as_mut_slice(), self.critics[j].as_slice(), beta)?;
        }
        let fresh = self.mean_abs_q(states, rng);
        self.q_avg = beta * fresh + (1.0 - beta) * self.q_avg;
        Ok(())
    }

    /// Discriminator and generator-only actor updates on dataset states;
    /// critics are not touched. The policy target is synced afterwards.
    pub fn warm_start<R: Rng + ?Sized>(
        &mut self,
        dataset: &OfflineDataset,
        model: &DynamicsEnsemble,
        iterations: usize,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<()> {
        if iterations == 0 {
            return Ok(());
        }
        let (sd, ad) = (dataset.state_dim, dataset.action_dim);
        for it in 1..=iterations {
            let real = Batch::sample(&dataset.transitions, batch_size, sd, ad, rng);
            let states = Batch::sample(&dataset.transitions, batch_size, sd, ad, rng).s;
            let fake = self.build_fake_batch(states.view(), model, rng);
            self.discriminator_update(real.s.view(), real.a.view(), &fake, rng)?;
            self.counters.discriminator -= 1;
            self.counters.warm_discriminator += 1;
            if it % self.config.policy_freq == 0 {
                self.actor_update(states.view(), model, None, false, rng)?;
            }
        }
        self.policy_target = self.policy.clone();
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        nn::checkpoint::save(&self.policy, dir, "policy")?;
        nn::checkpoint::save(&self.policy_target, dir, "policy_target")?;
        for j in 0..2 {
            nn::checkpoint::save(&self.critics[j], dir, &format!("critic{}", j + 1))?;
            nn::checkpoint::save(&self.critic_targets[j], dir, &format!("critic{}_target", j + 1))?;
        }
        nn::checkpoint::save(&self.discriminator, dir, "discriminator")?;
        let mut manifest = self.clone();
        let empty = ParamVector::zeros(&[]);
        manifest.policy = empty.clone();
        manifest.policy_target = empty.clone();
        manifest.critics = [empty.clone(), empty.clone()];
        manifest.critic_targets = [empty.clone(), empty.clone()];
        manifest.discriminator = empty;
        write_json(&dir.join("agent.json"), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mut agent: Self = read_json(&dir.join("agent.json"))?;
        agent.policy = nn::checkpoint::load(dir, "policy")?;
        agent.policy_target = nn::checkpoint::load(dir, "policy_target")?;
        for j in 0..2 {
            agent.critics[j] = nn::checkpoint::load(dir, &format!("critic{}", j + 1))?;
            agent.critic_targets[j] = nn::checkpoint::load(dir, &format!("critic{}_target", j + 1))?;
        }
        agent.discriminator = nn::checkpoint::load(dir, "discriminator")?;
        let ok = agent.policy.len() == agent.policy_net.spec.num_params()
            && agent.critics.iter().all(|c| c.len() == agent.critic_spec.num_params())
            && agent.discriminator.len() == agent.disc_spec.num_params();
        if !ok {
            return Err(Error::invalid("agent checkpoint", "parameter counts disagree with the specs"));
        }
        agent.ensure_optims();
        Ok(agent)
    }
}

impl ActionSampler for Agent {
    fn sample_actions(&self, s: ArrayView2<f64>, rng: &mut crate::rng::Rng) -> Array2<f64> {
        self.act(s, rng)
    }
}

pub fn mix_min_max(q1: f64, q2: f64, c: f64) -> f64 {
    c * q1.min(q2) + (1.0 - c) * q1.max(q2)
}

/// `mean_i Huber(Q(x_i), y_i; δ)`.
pub struct CriticObjective<'a> {
    pub spec: &'a MlpSpec,
    pub inputs: ArrayView2<'a, f64>,
    pub targets: ndarray::ArrayView1<'a, f64>,
    pub delta: f64,
}

impl Objective for CriticObjective<'_> {
    fn value(&self, params: &[f64]) -> f64 {
        let q = self.spec.forward(params, self.inputs);
        let n = q.nrows() as f64;
        q.column(0).iter().zip(self.targets).map(|(p, y)| huber(*p, *y, self.delta)).sum::<f64>() / n
    }

    fn value_and_grad(&self, params: &[f64]) -> (f64, Vec<f64>) {
        let cache = self.spec.forward_cached(params, self.inputs);
        let q = cache.output();
        let n = q.nrows() as f64;
        let mut loss = 0.0;
        let mut d_out = Array2::zeros(q.raw_dim());
        for i in 0..q.nrows() {
            loss += huber(q[(i, 0)], self.targets[i], self.delta);
            d_out[(i, 0)] = huber_grad(q[(i, 0)], self.targets[i], self.delta) / n;
        }
        let mut grads = vec![0.0; params.len()];
        self.spec.backward(params, &cache, d_out.view(), Some(&mut grads));
        (loss / n, grads)
    }
}

/// `−mean_i [l_i log D_i + (1 − l_i) log(1 − D_i)]` with `D` clamped to
/// `[clamp, 1 − clamp]`.
pub struct DiscriminatorObjective<'a> {
    pub spec: &'a MlpSpec,
    pub inputs: ArrayView2<'a, f64>,
    pub labels: &'a [f64],
    pub clamp: f64,
}

impl Objective for DiscriminatorObjective<'_> {
    fn value(&self, params: &[f64]) -> f64 {
        let d = self.spec.forward(params, self.inputs);
        let n = d.nrows() as f64;
        d.column(0)
            .iter()
            .zip(self.labels)
            .map(|(d, l)| {
                let d = d.clamp(self.clamp, 1.0 - self.clamp);
                -(l * d.ln() + (1.0 - l) * (1.0 - d).ln())
            })
            .sum::<f64>()
            / n
    }

    fn value_and_grad(&self, params: &[f64]) -> (f64, Vec<f64>) {
        let cache = self.spec.forward_cached(params, self.inputs);
        let out = cache.output();
        let n = out.nrows() as f64;
        let mut loss = 0.0;
        let mut d_out = Array2::zeros(out.raw_dim());
        for i in 0..out.nrows() {
            let raw = out[(i, 0)];
            let l = self.labels[i];
            let d = raw.clamp(self.clamp, 1.0 - self.clamp);
            loss -= l * d.ln() + (1.0 - l) * (1.0 - d).ln();
            if raw > self.clamp && raw < 1.0 - self.clamp {
                d_out[(i, 0)] = (-l / d + (1.0 - l) / (1.0 - d)) / n;
            }
        }
        let mut grads = vec![0.0; params.len()];
        self.spec.backward(params, &cache, d_out.view(), Some(&mut grads));
        (loss / n, grads)
    }
}

/// `−λ·mean_s min_j Q_j(s, π(s, z)) + L_g` as a function of the policy
/// parameters, with every noise draw fixed at construction.
///
/// The generator term covers the fake rows `(s, a)` and, where the model's
/// reparameterized `s'` is not terminal, `(s', π(s', z'))`.
pub struct ActorObjective<'a> {
    pub agent: &'a Agent,
    pub model: &'a DynamicsEnsemble,
    pub states: ArrayView2<'a, f64>,
    pub z: Array2<f64>,
    pub z_next: Array2<f64>,
    pub model_seed: u64,
    pub row_weights: Option<&'a [f64]>,
    pub lambda: f64,
    pub with_q: bool,
}

impl ActorObjective<'_> {
    fn evaluate(&self, params: &[f64], want_grad: bool) -> (f64, Vec<f64>) {
        let ag = self.agent;
        let pol = &ag.policy_net;
        let (sd, n) = (pol.state_dim, self.states.nrows());
        let pass = pol.forward(params, self.states, self.z.view());
        let a = &pass.actions;
        let mut d_a = Array2::<f64>::zeros(a.raw_dim());
        let mut loss = 0.0;

        if self.with_q {
            let x = concat_columns(self.states, a.view());
            let c1 = ag.critic_spec.forward_cached(ag.critics[0].as_slice(), x.view());
            let c2 = ag.critic_spec.forward_cached(ag.critics[1].as_slice(), x.view());
            let (q1, q2) = (c1.output().column(0).to_owned(), c2.output().column(0).to_owned());
            let mut d1 = Array2::zeros((n, 1));
            let mut d2 = Array2::zeros((n, 1));
            for i in 0..n {
                loss -= self.lambda * q1[i].min(q2[i]) / n as f64;
                if q1[i] <= q2[i] {
                    d1[(i, 0)] = -self.lambda / n as f64;
                } else {
                    d2[(i, 0)] = -self.lambda / n as f64;
                }
            }
            if want_grad {
                let dx1 = ag.critic_spec.backward(ag.critics[0].as_slice(), &c1, d1.view(), None);
                let dx2 = ag.critic_spec.backward(ag.critics[1].as_slice(), &c2, d2.view(), None);
                d_a += &dx1.slice(s![.., sd..]);
                d_a += &dx2.slice(s![.., sd..]);
            }
        }

        let sample = self.model.sample_differentiable(self.states, a.view(), &mut seeded(self.model_seed));
        let keep: Vec<usize> = (0..n).filter(|&i| !sample.done[i]).collect();
        let s2 = sample.s_next.select(Axis(0), &keep);
        let z2 = self.z_next.select(Axis(0), &keep);
        let pass2 = pol.forward(params, s2.view(), z2.view());
        let s_all = ndarray::concatenate(Axis(0), &[self.states.view(), s2.view()]).expect("same width");
        let a_all = ndarray::concatenate(Axis(0), &[a.view(), pass2.actions.view()]).expect("same width");
        let x = concat_columns(s_all.view(), a_all.view());
        let dc = ag.disc_spec.forward_cached(ag.discriminator.as_slice(), x.view());
        let dvals = dc.output();
        let m = x.nrows() as f64;
        let eps = ag.config.disc_clamp;
        let mut d_out = Array2::zeros((x.nrows(), 1));
        for r in 0..x.nrows() {
            let src = if r < n { r } else { keep[r - n] };
            let w = self.row_weights.map_or(1.0, |w| w[src]);
            let raw = dvals[(r, 0)];
            let d = raw.clamp(eps, 1.0 - eps);
            let inside = raw > eps && raw < 1.0 - eps;
            let (term, grad) = match ag.config.generator_loss {
                GeneratorLoss::NonSaturating => (-d.ln(), -1.0 / d),
                GeneratorLoss::Saturating => ((1.0 - d).ln(), -1.0 / (1.0 - d)),
            };
            loss += w * term / m;
            if inside {
                d_out[(r, 0)] = w * grad / m;
            }
        }
        if !want_grad {
            return (loss, Vec::new());
        }

        let dx = ag.disc_spec.backward(ag.discriminator.as_slice(), &dc, d_out.view(), None);
        d_a += &dx.slice(s![..n, sd..]);
        let d_a2 = dx.slice(s![n.., sd..]).to_owned();
        let mut d_s2 = dx.slice(s![n.., ..sd]).to_owned();
        let mut grads = vec![0.0; params.len()];
        d_s2 += &pol.backward(params, &pass2, d_a2.view(), Some(&mut grads));
        if ag.config.model_gradient && !keep.is_empty() {
            let mut d_next = Array2::zeros((n, sd));
            for (r, &i) in keep.iter().enumerate() {
                d_next.row_mut(i).assign(&d_s2.row(r));
            }
            let (_, d_a_model) = self.model.backward_sample(&sample, d_next.view());
            d_a += &d_a_model;
        }
        pol.backward(params, &pass, d_a.view(), Some(&mut grads));
        (loss, grads)
    }
}

impl Objective for ActorObjective<'_> {
    fn value(&self, params: &[f64]) -> f64 {
        self.evaluate(params, false).0
    }

    fn value_and_grad(&self, params: &[f64]) -> (f64, Vec<f64>) {
        self.evaluate(params, true)
    }
}

/// `V(s) = Q_θ₁(s, π_φ(s, 0))`, differentiable in `s` through both networks.
pub struct CriticValue<'a> {
    pub agent: &'a Agent,
}

impl ValueFunction for CriticValue<'_> {
    fn values(&self, states: ArrayView2<f64>) -> Array1<f64> {
        let ag = self.agent;
        let z = ag.policy_net.noise(states.nrows(), 0.0, &mut seeded(0));
        let a = ag.policy_net.forward(ag.policy.as_slice(), states, z.view()).actions;
        ag.q(0, states, a.view())
    }

    fn values_and_grad(&self, states: ArrayView2<f64>) -> (Array1<f64>, Array2<f64>) {
        let ag = self.agent;
        let sd = ag.state_dim();
        let z = ag.policy_net.noise(states.nrows(), 0.0, &mut seeded(0));
        let pass = ag.policy_net.forward(ag.policy.as_slice(), states, z.view());
        let x = concat_columns(states, pass.actions.view());
        let cache = ag.critic_spec.forward_cached(ag.critics[0].as_slice(), x.view());
        let v = cache.output().column(0).to_owned();
        let ones = Array2::from_elem((states.nrows(), 1), 1.0);
        let dx = ag.critic_spec.backward(ag.critics[0].as_slice(), &cache, ones.view(), None);
        let mut ds = dx.slice(s![.., ..sd]).to_owned();
        let da = dx.slice(s![.., sd..]).to_owned();
        ds += &ag.policy_net.backward(ag.policy.as_slice(), &pass, da.view(), None);
        (v, ds)
    }
}

/// Discriminator fit on two separated 1-D Gaussians against the analytic
/// optimum `p/(p + q)`.
pub mod probe {
    use ndarray::Array2;
    use rand_distr::{Distribution, Normal};

    use super::DiscriminatorObjective;
    use crate::nn::{AdamState, MlpSpec, Objective, OutputTransform};
    use crate::rng::{stream, tags};

    pub const TRUE_MEAN: f64 = -1.0;
    pub const FAKE_MEAN: f64 = 1.0;
    pub const GRID_POINTS: usize = 201;
    pub const GRID_HALF_WIDTH: f64 = 4.0;

    #[derive(Clone, Debug)]
    pub struct DensityRatioFit {
        pub grid: Vec<f64>,
        pub fitted: Vec<f64>,
        pub analytic: Vec<f64>,
        pub mae: f64,
    }

    pub fn analytic_ratio(x: f64) -> f64 {
        let p = (-0.5 * (x - TRUE_MEAN).powi(2)).exp();
        let q = (-0.5 * (x - FAKE_MEAN).powi(2)).exp();
        p / (p + q)
    }

    pub fn grid() -> Vec<f64> {
        let step = 2.0 * GRID_HALF_WIDTH / (GRID_POINTS - 1) as f64;
        (0..GRID_POINTS).map(|i| -GRID_HALF_WIDTH + step * i as f64).collect()
    }

    /// Trains with hard labels, the adversarial learning rate and β₁, and
    /// equal true/fake batch sizes.
    pub fn fit(seed: u64, steps: usize, batch: usize) -> DensityRatioFit {
        let spec = MlpSpec::new(1, &[32, 32], 1).with_output(OutputTransform::Sigmoid);
        let mut init_rng = stream(seed, tags::INIT);
        let mut params = spec.init(&mut init_rng);
        let mut adam = AdamState::with_beta1(params.len(), 1e-3, 0.4);
        let mut rng = stream(seed, tags::DISC);
        let p = Normal::new(TRUE_MEAN, 1.0).expect("unit variance");
        let q = Normal::new(FAKE_MEAN, 1.0).expect("unit variance");
        let mut labels = vec![1.0; batch];
        labels.extend(std::iter::repeat(0.0).take(batch));
        for _ in 0..steps {
            let x = Array2::from_shape_fn((2 * batch, 1), |(i, _)| {
                if i < batch {
                    p.sample(&mut rng)
                } else {
                    q.sample(&mut rng)
                }
            });
            let obj = DiscriminatorObjective {
                spec: &spec,
                inputs: x.view(),
                labels: &labels,
                clamp: 1e-6,
            };
            let (_, grads) = obj.value_and_grad(params.as_slice());
            adam.step(params.as_mut_slice(), &grads);
        }
        let grid = grid();
        let xs = Array2::from_shape_vec((grid.len(), 1), grid.clone()).expect("column");
        let fitted = spec.forward(params.as_slice(), xs.view()).column(0).to_vec();
        let analytic: Vec<f64> = grid.iter().map(|&x| analytic_ratio(x)).collect();
        let mae = fitted.iter().zip(&analytic).map(|(a, b)| (a - b).abs()).sum::<f64>() / grid.len() as f64;
        DensityRatioFit {
            grid,
            fitted,
            analytic,
            mae,
        }
    }
}
