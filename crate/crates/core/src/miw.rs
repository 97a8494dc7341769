//! Fixed-point estimator of the marginal importance weight
//! `ω(s, a) ≈ d_π(s, a) / d_{π_b}(s, a)`.
//!
//! Each step matches `mean_B[ω·Q]` against the one-step backup
//! `γ·mean_B[ω'·Q'(s', a')] + (1 − γ)·mean_{B_init}[Q'(s₀, a₀)]` built from
//! slowly moving target copies, with a hinge penalty on `mean_B[ω]`.

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{OfflineDataset, Standardizer};
use crate::error::{Error, Result};
use crate::nn::{self, clip_grad_norm, soft_update, AdamState, MlpSpec, Objective, OutputTransform, ParamVector};

pub const LAST_LAYER_INIT: f64 = 0.003;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestFunctionMode {
    /// Frozen critic snapshot and its target.
    #[default]
    Critic,
    /// The learned reward head.
    Reward,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiwConfig {
    pub hidden: Vec<usize>,
    pub alpha: f64,
    pub g_constraint: f64,
    pub penalty_kappa: f64,
    pub ema_rate: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub init_batch_size: usize,
    pub steps: usize,
    pub grad_clip: f64,
    pub test_function: TestFunctionMode,
}

impl MiwConfig {
    pub fn full() -> Self {
        Self {
            hidden: vec![400, 300],
            alpha: 0.5,
            g_constraint: 10.0,
            penalty_kappa: 100.0,
            ema_rate: 0.01,
            lr: 1e-6,
            batch_size: 1024,
            init_batch_size: 2048,
            steps: 100_000,
            grad_clip: 1.0,
            test_function: TestFunctionMode::Critic,
        }
    }

    pub fn desk() -> Self {
        Self {
            hidden: vec![64, 64],
            lr: 1e-4,
            batch_size: 256,
            init_batch_size: 256,
            steps: 5_000,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::invalid("miw config", "alpha must be in (0, 1]"));
        }
        if !(self.ema_rate > 0.0 && self.ema_rate <= 1.0) {
            return Err(Error::invalid("miw config", "ema_rate must be in (0, 1]"));
        }
        if self.batch_size == 0 || self.init_batch_size == 0 {
            return Err(Error::invalid("miw config", "batch sizes must be positive"));
        }
        Ok(())
    }
}

/// The function `Q` (and its slowly tracking copy `Q'`) that the fixed-point
/// identity is tested against.
pub trait TestFunction {
    fn eval(&self, s: ArrayView2<f64>, a: ArrayView2<f64>) -> Array1<f64>;
    fn eval_target(&self, s: ArrayView2<f64>, a: ArrayView2<f64>) -> Array1<f64>;
    /// Moves the target copy toward the live one.
    fn track(&mut self, rate: f64);
}

/// Draws actions from the target policy for a batch of states.
pub trait ActionSampler {
    fn sample_actions(&self, s: ArrayView2<f64>, rng: &mut crate::rng::Rng) -> Array2<f64>;
}

pub fn concat_columns(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    assert_eq!(a.nrows(), b.nrows(), "row counts must match");
    let mut out = Array2::zeros((a.nrows(), a.ncols() + b.ncols()));
    out.slice_mut(ndarray::s![.., ..a.ncols()]).assign(&a);
    out.slice_mut(ndarray::s![.., a.ncols()..]).assign(&b);
    out
}

/// A frozen critic copy over `[s, a]` with its own drifting target.
#[derive(Clone, Debug)]
pub struct CriticTest {
    pub spec: MlpSpec,
    pub live: ParamVector,
    pub target: ParamVector,
}

impl TestFunction for CriticTest {
    fn eval(&self, s: ArrayView2<f64>, a: ArrayView2<f64>) -> Array1<f64> {
        let x = concat_columns(s, a);
        self.spec.forward(self.live.as_slice(), x.view()).column(0).to_owned()
    }

    fn eval_target(&self, s: ArrayView2<f64>, a: ArrayView2<f64>) -> Array1<f64> {
        let x = concat_columns(s, a);
        self.spec.forward(self.target.as_slice(), x.view()).column(0).to_owned()
    }

    fn track(&mut self, rate: f64) {
        soft_update(self.target.as_mut_slice(), self.live.as_slice(), rate).expect("same layout");
    }
}

/// Learned reward mean as the test function; it has no separate target.
pub struct RewardTest<'a> {
    pub model: &'a crate::dynamics::DynamicsEnsemble,
}

impl TestFunction for RewardTest<'_> {
    fn eval(&self, s: ArrayView2<f64>, a: ArrayView2<f64>) -> Array1<f64> {
        self.model.reward_mean(s, a)
    }

    fn eval_target(&self, s: ArrayView2<f64>, a: ArrayView2<f64>) -> Array1<f64> {
        self.model.reward_mean(s, a)
    }

    fn track(&mut self, _rate: f64) {}
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MiwEstimator {
    pub config: MiwConfig,
    pub spec: MlpSpec,
    pub omega: ParamVector,
    pub omega_target: ParamVector,
    /// Standardization of `(s, a)` inputs; `None` feeds them raw.
    pub input_stats: Option<Standardizer>,
    #[serde(skip)]
    optim: Option<AdamState>,
    pub steps_done: usize,
}

impl MiwEstimator {
    pub fn new<R: Rng + ?Sized>(
        config: MiwConfig,
        input_dim: usize,
        input_stats: Option<Standardizer>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let spec = MlpSpec::new(input_dim, &config.hidden, 1)
            .with_output(OutputTransform::SoftplusPower { alpha: config.alpha })
            .with_last_layer_init(LAST_LAYER_INIT);
        spec.validate()?;
        let omega = spec.init(rng);
        Ok(Self {
            omega_target: omega.clone(),
            optim: Some(AdamState::new(omega.len(), config.lr)),
            config,
            spec,
            omega,
            input_stats,
            steps_done: 0,
        })
    }

    /// Test hook: zeroes the last layer's weights and sets its bias so that
    /// ω (and ω′) output `value` everywhere.
    pub fn set_constant_output(&mut self, value: f64) {
        assert!(value > 0.0);
        let alpha = self.config.alpha;
        let x = ((value.powf(1.0 / alpha) - nn::SOFTPLUS_EPS).exp() - 1.0).ln() + nn::SOFTPLUS_EPS;
        let (i, o) = *self.spec.layer_dims().last().unwrap();
        let n = self.omega.len();
        let data = self.omega.as_mut_slice();
        data[n - o - i * o..n - o].iter_mut().for_each(|w| *w = 0.0);
        data[n - o..].iter_mut().for_each(|b| *b = x);
        self.omega_target = self.omega.clone();
    }

    /// Standardized network input for `(s, a)` rows.
    pub fn encode(&self, s: ArrayView2<f64>, a: ArrayView2<f64>) -> Array2<f64> {
        let mut x = concat_columns(s, a);
        if let Some(st) = &self.input_stats {
            for mut row in x.rows_mut() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = (*v - st.mean[j]) / st.std[j];
                }
            }
        }
        x
    }

    pub fn forward(&self, s: ArrayView2<f64>, a: ArrayView2<f64>) -> Array1<f64> {
        let x = self.encode(s, a);
        self.spec.forward(self.omega.as_slice(), x.view()).column(0).to_owned()
    }

    pub fn forward_target(&self, s: ArrayView2<f64>, a: ArrayView2<f64>) -> Array1<f64> {
        let x = self.encode(s, a);
        self.spec.forward(self.omega_target.as_slice(), x.view()).column(0).to_owned()
    }

    /// Raw ω on every dataset transition.
    pub fn raw_weights(&self, dataset: &OfflineDataset) -> Array1<f64> {
        let (s, a) = state_action_matrices(dataset);
        self.forward(s.view(), a.view())
    }

    /// ω on every transition divided by its dataset mean.
    pub fn normalized_weights(&self, dataset: &OfflineDataset) -> Vec<f64> {
        normalize_to_mean_one(self.raw_weights(dataset).as_slice().unwrap())
    }

    /// Runs `n_steps` updates, warm-starting from the current parameters.
    pub fn train<T: TestFunction + ?Sized, P: ActionSampler + ?Sized>(
        &mut self,
        dataset: &OfflineDataset,
        test: &mut T,
        policy: &P,
        gamma: f64,
        n_steps: usize,
        rng: &mut crate::rng::Rng,
    ) -> Result<MiwTrainStats> {
        let mut last = MiwStepStats::default();
        for _ in 0..n_steps {
            let batch = MiwBatch::sample(dataset, self.config.batch_size, self.config.init_batch_size, rng);
            last = self.step(&batch, test, policy, gamma, rng)?;
        }
        let raw = self.raw_weights(dataset);
        let mean = raw.mean().unwrap_or(f64::NAN);
        Ok(MiwTrainStats {
            last_loss: last.loss,
            raw_mean: mean,
            raw_std: raw.std(0.0),
        })
    }

    /// One Adam update on a sampled batch followed by the target drift.
    pub fn step<T: TestFunction + ?Sized, P: ActionSampler + ?Sized>(
        &mut self,
        batch: &MiwBatch,
        test: &mut T,
        policy: &P,
        gamma: f64,
        rng: &mut crate::rng::Rng,
    ) -> Result<MiwStepStats> {
        let (loss, mut grads, y) = {
            let obj = self.objective(batch, test, policy, gamma, rng);
            let (loss, grads) = obj.value_and_grad(self.omega.as_slice());
            (loss, grads, obj.y)
        };
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                what: "MIW loss",
                step: self.steps_done,
                detail: format!("y = {y}"),
            });
        }
        clip_grad_norm(&mut grads, self.config.grad_clip);
        let lr = self.config.lr;
        let n = self.omega.len();
        let opt = self.optim.get_or_insert_with(|| AdamState::new(n, lr));
        opt.step(self.omega.as_mut_slice(), &grads);
        soft_update(self.omega_target.as_mut_slice(), self.omega.as_slice(), self.config.ema_rate)?;
        test.track(self.config.ema_rate);
        self.steps_done += 1;
        Ok(MiwStepStats { loss, y })
    }

    /// Builds the loss for one batch: samples `a' ~ π(s')`, `a₀ ~ π(s₀)` and
    /// freezes the backup `y`.
    pub fn objective<T: TestFunction + ?Sized, P: ActionSampler + ?Sized>(
        &self,
        batch: &MiwBatch,
        test: &T,
        policy: &P,
        gamma: f64,
        rng: &mut crate::rng::Rng,
    ) -> MiwObjective<'_> {
        let a_next = policy.sample_actions(batch.s_next.view(), rng);
        let a0 = policy.sample_actions(batch.s0.view(), rng);
        let q = test.eval(batch.s.view(), batch.a.view());
        let q_next = test.eval_target(batch.s_next.view(), a_next.view());
        let q0 = test.eval_target(batch.s0.view(), a0.view());
        let w_target = self.forward_target(batch.s.view(), batch.a.view());
        let bootstrap = w_target
            .iter()
            .zip(&q_next)
            .zip(&batch.not_done)
            .map(|((w, q), m)| w * q * m)
            .sum::<f64>()
            / w_target.len() as f64;
        let y = gamma * bootstrap + (1.0 - gamma) * q0.mean().unwrap_or(0.0);
        MiwObjective {
            spec: &self.spec,
            inputs: self.encode(batch.s.view(), batch.a.view()),
            q,
            y,
            g_constraint: self.config.g_constraint,
            kappa: self.config.penalty_kappa,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        nn::checkpoint::save(&self.omega, dir, "omega")?;
        nn::checkpoint::save(&self.omega_target, dir, "omega_target")?;
        let mut manifest = self.clone();
        manifest.omega = ParamVector::zeros(&[]);
        manifest.omega_target = ParamVector::zeros(&[]);
        crate::dataset::write_json(&dir.join("miw.json"), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mut est: Self = crate::dataset::read_json(&dir.join("miw.json"))?;
        est.omega = nn::checkpoint::load(dir, "omega")?;
        est.omega_target = nn::checkpoint::load(dir, "omega_target")?;
        if est.omega.len() != est.spec.num_params() || est.omega_target.len() != est.spec.num_params() {
            return Err(Error::invalid("miw checkpoint", "parameter count disagrees with the spec"));
        }
        Ok(est)
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct MiwStepStats {
    pub loss: f64,
    pub y: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct MiwTrainStats {
    pub last_loss: f64,
    pub raw_mean: f64,
    pub raw_std: f64,
}

/// Transitions from the dataset and states from the μ₀ pool.
#[derive(Clone, Debug)]
pub struct MiwBatch {
    pub s: Array2<f64>,
    pub a: Array2<f64>,
    pub s_next: Array2<f64>,
    /// 0 where `s'` is terminal, 1 otherwise.
    pub not_done: Vec<f64>,
    pub s0: Array2<f64>,
}

impl MiwBatch {
    pub fn sample<R: Rng + ?Sized>(dataset: &OfflineDataset, batch: usize, init_batch: usize, rng: &mut R) -> Self {
        let (ds, da) = (dataset.state_dim, dataset.action_dim);
        let mut s = Array2::zeros((batch, ds));
        let mut a = Array2::zeros((batch, da));
        let mut s_next = Array2::zeros((batch, ds));
        let mut not_done = Vec::with_capacity(batch);
        for k in 0..batch {
            let t = &dataset.transitions[rng.gen_range(0..dataset.len())];
            s.row_mut(k).iter_mut().zip(&t.s).for_each(|(d, v)| *d = *v);
            a.row_mut(k).iter_mut().zip(&t.a).for_each(|(d, v)| *d = *v);
            s_next.row_mut(k).iter_mut().zip(&t.s_next).for_each(|(d, v)| *d = *v);
            not_done.push(if t.done { 0.0 } else { 1.0 });
        }
        let mut s0 = Array2::zeros((init_batch, ds));
        for k in 0..init_batch {
            let st = &dataset.initial_states[rng.gen_range(0..dataset.initial_states.len())];
            s0.row_mut(k).iter_mut().zip(st).for_each(|(d, v)| *d = *v);
        }
        Self {
            s,
            a,
            s_next,
            not_done,
            s0,
        }
    }

    /// Uses every transition and every initial state exactly once.
    pub fn full(dataset: &OfflineDataset) -> Self {
        let (s, a) = state_action_matrices(dataset);
        let ds = dataset.state_dim;
        let mut s_next = Array2::zeros((dataset.len(), ds));
        for (k, t) in dataset.transitions.iter().enumerate() {
            s_next.row_mut(k).iter_mut().zip(&t.s_next).for_each(|(d, v)| *d = *v);
        }
        let mut s0 = Array2::zeros((dataset.initial_states.len(), ds));
        for (k, st) in dataset.initial_states.iter().enumerate() {
            s0.row_mut(k).iter_mut().zip(st).for_each(|(d, v)| *d = *v);
        }
        Self {
            s,
            a,
            s_next,
            not_done: dataset.transitions.iter().map(|t| if t.done { 0.0 } else { 1.0 }).collect(),
            s0,
        }
    }
}

/// `(mean_B[ω·q] − y)² + κ·max(0, mean_B[ω] − g)²` as a function of the ω
/// parameters, with `q` and `y` held fixed.
pub struct MiwObjective<'a> {
    pub spec: &'a MlpSpec,
    pub inputs: Array2<f64>,
    pub q: Array1<f64>,
    pub y: f64,
    pub g_constraint: f64,
    pub kappa: f64,
}

impl MiwObjective<'_> {
    fn parts(&self, w: &Array1<f64>) -> (f64, f64, f64) {
        let n = w.len() as f64;
        let l1 = w.iter().zip(&self.q).map(|(w, q)| w * q).sum::<f64>() / n;
        let excess = (w.sum() / n - self.g_constraint).max(0.0);
        (l1, excess, n)
    }

    pub fn penalty(&self, params: &[f64]) -> f64 {
        let w = self.spec.forward(params, self.inputs.view()).column(0).to_owned();
        let (_, excess, _) = self.parts(&w);
        self.kappa * excess * excess
    }
}

impl Objective for MiwObjective<'_> {
    fn value(&self, params: &[f64]) -> f64 {
        let w = self.spec.forward(params, self.inputs.view()).column(0).to_owned();
        let (l1, excess, _) = self.parts(&w);
        (l1 - self.y).powi(2) + self.kappa * excess * excess
    }

    fn value_and_grad(&self, params: &[f64]) -> (f64, Vec<f64>) {
        let cache = self.spec.forward_cached(params, self.inputs.view());
        let w = cache.output().column(0).to_owned();
        let (l1, excess, n) = self.parts(&w);
        let resid = l1 - self.y;
        let d_out = Array2::from_shape_fn((w.len(), 1), |(i, _)| {
            (2.0 * resid * self.q[i] + 2.0 * self.kappa * excess) / n
        });
        let mut grads = vec![0.0; params.len()];
        self.spec.backward(params, &cache, d_out.view(), Some(&mut grads));
        (resid * resid + self.kappa * excess * excess, grads)
    }
}

pub fn state_action_matrices(dataset: &OfflineDataset) -> (Array2<f64>, Array2<f64>) {
    let n = dataset.len();
    let mut s = Array2::zeros((n, dataset.state_dim));
    let mut a = Array2::zeros((n, dataset.action_dim));
    for (k, t) in dataset.transitions.iter().enumerate() {
        s.row_mut(k).iter_mut().zip(&t.s).for_each(|(d, v)| *d = *v);
        a.row_mut(k).iter_mut().zip(&t.a).for_each(|(d, v)| *d = *v);
    }
    (s, a)
}

/// Divides by the running mean (so a constant input maps to exactly 1).
pub fn normalize_to_mean_one(raw: &[f64]) -> Vec<f64> {
    let mut mean = 0.0;
    for (k, w) in raw.iter().enumerate() {
        mean += (w - mean) / (k + 1) as f64;
    }
    raw.iter().map(|w| w / mean).collect()
}

/// Writes `index,raw,normalized,log_normalized` for every transition.
pub fn write_weight_csv(path: &Path, raw: &[f64]) -> Result<()> {
    let norm = normalize_to_mean_one(raw);
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "index,raw,normalized,log_normalized").map_err(io)?;
    for (i, (r, n)) in raw.iter().zip(&norm).enumerate() {
        writeln!(w, "{i},{r},{n},{}", n.ln()).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// A small tabular MDP seen through one-hot `(s, a)` features, so the neural
/// estimator can be compared against the exact weights.
pub mod embed {
    use ndarray::{Array1, Array2, ArrayView2};
    use rand::distributions::Distribution;
    use rand_distr::WeightedIndex;

    use super::{ActionSampler, MiwBatch, MiwConfig, MiwEstimator, TestFunction};
    use crate::error::{Error, Result};
    use crate::tabular::{exact_q, stationary_distribution, SaTable, TabularMdp, TabularPolicy};

    pub struct TabularEmbedding {
        pub mdp: TabularMdp,
        pub pi: TabularPolicy,
        pub d_b: SaTable,
        pair_sampler: WeightedIndex<f64>,
        mu0_sampler: WeightedIndex<f64>,
        next_samplers: Vec<WeightedIndex<f64>>,
        pi_samplers: Vec<WeightedIndex<f64>>,
    }

    fn weighted(w: &[f64]) -> Result<WeightedIndex<f64>> {
        WeightedIndex::new(w).map_err(|e| Error::invalid("sampling weights", e.to_string()))
    }

    pub fn one_hot(indices: &[usize], width: usize) -> Array2<f64> {
        let mut m = Array2::zeros((indices.len(), width));
        for (r, &i) in indices.iter().enumerate() {
            m[[r, i]] = 1.0;
        }
        m
    }

    /// Index of the largest entry of each row.
    pub fn decode(rows: ArrayView2<f64>) -> Vec<usize> {
        rows.rows()
            .into_iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
                    .0
            })
            .collect()
    }

    impl TabularEmbedding {
        pub fn new(mdp: TabularMdp, pi: TabularPolicy, pi_b: &TabularPolicy) -> Result<Self> {
            let d_b = stationary_distribution(&mdp, pi_b)?;
            let (ns, na) = (mdp.n_states(), mdp.n_actions());
            let next_samplers = (0..ns * na)
                .map(|i| weighted(mdp.transition_row(i / na, i % na)))
                .collect::<Result<_>>()?;
            let pi_samplers = (0..ns).map(|s| weighted(pi.row(s))).collect::<Result<_>>()?;
            Ok(Self {
                pair_sampler: weighted(&d_b.values)?,
                mu0_sampler: weighted(mdp.mu0())?,
                next_samplers,
                pi_samplers,
                mdp,
                pi,
                d_b,
            })
        }

        pub fn state_dim(&self) -> usize {
            self.mdp.n_states()
        }

        pub fn action_dim(&self) -> usize {
            self.mdp.n_actions()
        }

        /// `(s, a) ~ d_{π_b}`, `s' ~ P(·|s, a)`, `s₀ ~ μ₀`. No state is terminal.
        pub fn sample_batch(&self, batch: usize, init_batch: usize, rng: &mut crate::rng::Rng) -> MiwBatch {
            let na = self.action_dim();
            let mut s = Vec::with_capacity(batch);
            let mut a = Vec::with_capacity(batch);
            let mut s2 = Vec::with_capacity(batch);
            for _ in 0..batch {
                let i = self.pair_sampler.sample(rng);
                s.push(i / na);
                a.push(i % na);
                s2.push(self.next_samplers[i].sample(rng));
            }
            let s0: Vec<usize> = (0..init_batch).map(|_| self.mu0_sampler.sample(rng)).collect();
            MiwBatch {
                s: one_hot(&s, self.state_dim()),
                a: one_hot(&a, na),
                s_next: one_hot(&s2, self.state_dim()),
                not_done: vec![1.0; batch],
                s0: one_hot(&s0, self.state_dim()),
            }
        }

        /// The estimator evaluated on every `(s, a)` pair.
        pub fn learned_table(&self, est: &MiwEstimator) -> SaTable {
            let (ns, na) = (self.state_dim(), self.action_dim());
            let pairs: Vec<usize> = (0..ns * na).collect();
            let s = one_hot(&pairs.iter().map(|i| i / na).collect::<Vec<_>>(), ns);
            let a = one_hot(&pairs.iter().map(|i| i % na).collect::<Vec<_>>(), na);
            let w = est.forward(s.view(), a.view());
            SaTable::from_fn(ns, na, |si, ai| w[si * na + ai])
        }

        pub fn exact_q_test(&self) -> Result<TableTest> {
            Ok(TableTest::new(exact_q(&self.mdp, &self.pi)?))
        }
    }

    impl ActionSampler for TabularEmbedding {
        fn sample_actions(&self, s: ArrayView2<f64>, rng: &mut crate::rng::Rng) -> Array2<f64> {
            let actions: Vec<usize> = decode(s).into_iter().map(|si| self.pi_samplers[si].sample(rng)).collect();
            one_hot(&actions, self.action_dim())
        }
    }

    /// Settings for the one-hot recovery run: an 8-state, 2-action random
    /// MDP, uniform behavior, and a target policy within 5% total variation.
    pub const RECOVERY_STATES: usize = 8;
    pub const RECOVERY_ACTIONS: usize = 2;
    pub const RECOVERY_GAMMA: f64 = 0.95;
    pub const RECOVERY_TV: f64 = 0.05;
    pub const RECOVERY_STEPS: usize = 20_000;

    pub fn recovery_config() -> MiwConfig {
        MiwConfig {
            hidden: vec![32, 32],
            lr: 2e-5,
            batch_size: 256,
            init_batch_size: 256,
            steps: RECOVERY_STEPS,
            ..MiwConfig::desk()
        }
    }

    pub struct RecoveryInstance {
        pub embedding: TabularEmbedding,
        pub omega_star: SaTable,
    }

    pub fn recovery_instance(seed: u64) -> Result<RecoveryInstance> {
        let mut rng = crate::rng::seeded(seed);
        let mdp = TabularMdp::random(RECOVERY_STATES, RECOVERY_ACTIONS, RECOVERY_GAMMA, &mut rng);
        let pi_b = TabularPolicy::uniform(RECOVERY_STATES, RECOVERY_ACTIONS);
        let pi = pi_b.perturbed(RECOVERY_TV, &mut rng);
        let omega_star = crate::tabular::true_miw(&mdp, &pi, &pi_b)?;
        Ok(RecoveryInstance {
            embedding: TabularEmbedding::new(mdp, pi, &pi_b)?,
            omega_star,
        })
    }

    pub struct RecoveryOutcome {
        pub max_error: f64,
        pub learned: SaTable,
        pub estimator: MiwEstimator,
    }

    /// Trains a fresh estimator against the exact Q of the target policy and
    /// reports the sup-norm error to the true weights.
    pub fn run_recovery(seed: u64, config: MiwConfig) -> Result<RecoveryOutcome> {
        let inst = recovery_instance(seed)?;
        let emb = &inst.embedding;
        let mut test = emb.exact_q_test()?;
        let dim = emb.state_dim() + emb.action_dim();
        let mut est = MiwEstimator::new(config, dim, None, &mut crate::rng::stream(seed, crate::rng::tags::INIT))?;
        let mut rng = crate::rng::stream(seed, crate::rng::tags::MIW);
        let gamma = emb.mdp.gamma();
        for _ in 0..est.config.steps {
            let batch = emb.sample_batch(est.config.batch_size, est.config.init_batch_size, &mut rng);
            est.step(&batch, &mut test, emb, gamma, &mut rng)?;
        }
        let learned = emb.learned_table(&est);
        Ok(RecoveryOutcome {
            max_error: learned.max_abs_diff(&inst.omega_star),
            learned,
            estimator: est,
        })
    }

    /// A fixed table used as both `Q` and `Q'`.
    #[derive(Clone, Debug)]
    pub struct TableTest {
        pub table: SaTable,
    }

    impl TableTest {
        pub fn new(table: SaTable) -> Self {
            Self { table }
        }
    }

    impl TestFunction for TableTest {
        fn eval(&self, s: ArrayView2<f64>, a: ArrayView2<f64>) -> Array1<f64> {
            decode(s).into_iter().zip(decode(a)).map(|(si, ai)| self.table.get(si, ai)).collect()
        }

        fn eval_target(&self, s: ArrayView2<f64>, a: ArrayView2<f64>) -> Array1<f64> {
            self.eval(s, a)
        }

        fn track(&mut self, _rate: f64) {}
    }
}
