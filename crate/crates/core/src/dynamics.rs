//! Ensemble of Gaussian networks over `(r, Δs)` given `(s, a)`.
//!
//! Inputs and targets are standardized with dataset statistics; each member
//! outputs a mean and a log-std (clamped to `[-10, 2]`) per target
//! coordinate. Rollouts sample from a uniformly chosen elite.

use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{read_json, write_json, NormalizationStats, OfflineDataset};
use crate::error::{Error, Result};
use crate::nn::{self, clamp_log_std, gaussian_nll_1d, gaussian_nll_1d_grad, AdamState, MlpSpec, Objective};
use crate::rng::{self, tags};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicsConfig {
    pub n_members: usize,
    pub n_elites: usize,
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub batch_size: usize,
    /// Minibatch steps in one model epoch.
    pub steps_per_epoch: usize,
    pub holdout_fraction: f64,
}

impl DynamicsConfig {
    pub fn full() -> Self {
        Self {
            n_members: 7,
            n_elites: 5,
            hidden: vec![400, 300],
            lr: 1e-3,
            batch_size: 256,
            steps_per_epoch: 1000,
            holdout_fraction: 0.1,
        }
    }

    pub fn desk() -> Self {
        Self {
            n_members: 3,
            n_elites: 2,
            hidden: vec![64, 64],
            steps_per_epoch: 200,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_members == 0 || self.n_elites == 0 || self.n_elites > self.n_members {
            return Err(Error::invalid("dynamics config", "need 1 ≤ n_elites ≤ n_members"));
        }
        if self.batch_size == 0 || self.steps_per_epoch == 0 {
            return Err(Error::invalid("dynamics config", "batch size and steps per epoch must be positive"));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::invalid("dynamics config", "holdout fraction must be in [0, 1)"));
        }
        Ok(())
    }
}

/// Environment termination applied to in-range model predictions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationRule {
    None,
    PointMassGoal,
}

impl TerminationRule {
    pub fn is_terminal(self, s_next: &[f64]) -> bool {
        match self {
            TerminationRule::None => false,
            TerminationRule::PointMassGoal => crate::env::is_terminal(s_next),
        }
    }
}

/// `max(|r_min − 10σ|, |r_max + 10σ|)`.
pub fn reward_range(r_min: f64, r_max: f64, sigma_r: f64) -> f64 {
    (r_min - 10.0 * sigma_r).abs().max((r_max + 10.0 * sigma_r).abs())
}

/// Scales weights to mean 1. The mean is accumulated as a running mean so a
/// constant vector maps to exactly 1.0 everywhere.
pub fn normalize_weights(weights: &[f64]) -> Result<Vec<f64>> {
    if weights.is_empty() {
        return Err(Error::Empty("weights"));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::invalid("weights", "must be finite and nonnegative"));
    }
    let mut mean = 0.0;
    for (k, w) in weights.iter().enumerate() {
        mean += (w - mean) / (k + 1) as f64;
    }
    if mean <= 0.0 {
        return Err(Error::invalid("weights", "all weights are zero"));
    }
    Ok(weights.iter().map(|w| w / mean).collect())
}

/// Statistics the ensemble needs from its training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedStats {
    pub normalization: NormalizationStats,
    pub r_range: f64,
    pub state_abs_max: Vec<f64>,
}

pub fn fit_stats(dataset: &OfflineDataset) -> Result<FittedStats> {
    if dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let rs = dataset.reward_stats;
    Ok(FittedStats {
        normalization: dataset.normalization.clone(),
        r_range: reward_range(rs.r_min, rs.r_max, rs.sigma_r),
        state_abs_max: dataset.state_abs_max(),
    })
}

/// Standardized `(s, a)` rows and `(r, Δs)` rows of a dataset.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub inputs: Array2<f64>,
    pub targets: Array2<f64>,
    pub train_idx: Vec<usize>,
    pub holdout_idx: Vec<usize>,
}

impl TrainingData {
    /// Standardizes with `stats` and fixes a holdout split from `split_seed`.
    pub fn new(dataset: &OfflineDataset, stats: &NormalizationStats, holdout_fraction: f64, split_seed: u64) -> Self {
        let n = dataset.len();
        let (di, dt) = (stats.input.dim(), stats.target.dim());
        let mut inputs = Array2::zeros((n, di));
        let mut targets = Array2::zeros((n, dt));
        for (i, t) in dataset.transitions.iter().enumerate() {
            stats.input.apply(&crate::dataset::model_input(t), inputs.row_mut(i).as_slice_mut().unwrap());
            stats.target.apply(&crate::dataset::model_target(t), targets.row_mut(i).as_slice_mut().unwrap());
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(split_seed, tags::SPLIT));
        let n_hold = if n >= 2 { ((n as f64 * holdout_fraction).round() as usize).clamp(1, n - 1) } else { 0 };
        let holdout_idx = order[..n_hold].to_vec();
        let train_idx = order[n_hold..].to_vec();
        Self {
            inputs,
            targets,
            train_idx,
            holdout_idx,
        }
    }

    fn rows(&self, idx: &[usize]) -> (Array2<f64>, Array2<f64>) {
        (self.inputs.select(Axis(0), idx), self.targets.select(Axis(0), idx))
    }
}

/// Mean (optionally weighted) Gaussian NLL of one member on a minibatch, in
/// standardized units.
pub struct NllObjective<'a> {
    pub spec: &'a MlpSpec,
    pub inputs: ArrayView2<'a, f64>,
    pub targets: ArrayView2<'a, f64>,
    pub weights: Option<&'a [f64]>,
    /// When set, only the first `n` target coordinates contribute.
    pub only_first: Option<usize>,
}

impl NllObjective<'_> {
    fn dims(&self) -> (usize, usize) {
        let k = self.targets.ncols();
        (k, self.only_first.unwrap_or(k))
    }
}

impl Objective for NllObjective<'_> {
    fn value(&self, params: &[f64]) -> f64 {
        let out = self.spec.forward(params, self.inputs);
        let (k, used) = self.dims();
        let n = out.nrows() as f64;
        let mut total = 0.0;
        for i in 0..out.nrows() {
            let mut row = 0.0;
            for d in 0..used {
                row += gaussian_nll_1d(out[(i, d)], out[(i, k + d)], self.targets[(i, d)]);
            }
            total += match self.weights {
                Some(w) => w[i] * row,
                None => row,
            };
        }
        total / n
    }

    fn value_and_grad(&self, params: &[f64]) -> (f64, Vec<f64>) {
        let cache = self.spec.forward_cached(params, self.inputs);
        let out = cache.output();
        let (k, used) = self.dims();
        let n = out.nrows() as f64;
        let mut d_out = Array2::zeros(out.raw_dim());
        let mut total = 0.0;
        for i in 0..out.nrows() {
            let w = self.weights.map(|w| w[i]);
            let mut row = 0.0;
            for d in 0..used {
                let (m, ls, y) = (out[(i, d)], out[(i, k + d)], self.targets[(i, d)]);
                row += gaussian_nll_1d(m, ls, y);
                let (gm, gl) = gaussian_nll_1d_grad(m, ls, y);
                let scale = match w {
                    Some(w) => w / n,
                    None => 1.0 / n,
                };
                d_out[(i, d)] = scale * gm;
                d_out[(i, k + d)] = scale * gl;
            }
            total += match w {
                Some(w) => w * row,
                None => row,
            };
        }
        let mut grads = vec![0.0; params.len()];
        self.spec.backward(params, &cache, d_out.view(), Some(&mut grads));
        (total / n, grads)
    }
}

/// A differentiable state-value estimate used by the value-discriminated loss.
pub trait ValueFunction: Sync {
    fn values(&self, states: ArrayView2<f64>) -> Array1<f64>;
    /// Values and `dV/ds` per row.
    fn values_and_grad(&self, states: ArrayView2<f64>) -> (Array1<f64>, Array2<f64>);
}

/// `mean_i ŵ_i·|V(s'_i) − V(s_i + Δŝ_i)|` with the reparameterized sample
/// `Δŝ = denorm(μ + σ·ε)`, plus the weighted NLL of the reward coordinate.
pub struct ValueDiscObjective<'a, V: ValueFunction + ?Sized> {
    pub spec: &'a MlpSpec,
    pub stats: &'a NormalizationStats,
    pub inputs: ArrayView2<'a, f64>,
    pub targets: ArrayView2<'a, f64>,
    /// Raw states and observed next states of the rows.
    pub states: ArrayView2<'a, f64>,
    pub next_states: ArrayView2<'a, f64>,
    pub eps: ArrayView2<'a, f64>,
    pub weights: &'a [f64],
    pub value_fn: &'a V,
}

impl<'a, V: ValueFunction + ?Sized> ValueDiscObjective<'a, V> {
    fn reward_nll(&self) -> NllObjective<'a> {
        NllObjective {
            spec: self.spec,
            inputs: self.inputs,
            targets: self.targets,
            weights: Some(self.weights),
            only_first: Some(1),
        }
    }

    /// Model next states from the network output.
    fn sampled_next(&self, out: &Array2<f64>) -> Array2<f64> {
        let k = self.targets.ncols();
        let ds = k - 1;
        let mut s_hat = self.states.to_owned();
        for i in 0..out.nrows() {
            for j in 0..ds {
                let d = 1 + j;
                let z = out[(i, d)] + clamp_log_std(out[(i, k + d)]).exp() * self.eps[(i, j)];
                s_hat[(i, j)] += z * self.stats.target.std[d] + self.stats.target.mean[d];
            }
        }
        s_hat
    }
}

impl<V: ValueFunction + ?Sized> Objective for ValueDiscObjective<'_, V> {
    fn value(&self, params: &[f64]) -> f64 {
        let out = self.spec.forward(params, self.inputs);
        let v_true = self.value_fn.values(self.next_states);
        let v_model = self.value_fn.values(self.sampled_next(&out).view());
        let n = out.nrows() as f64;
        let value_term: f64 = (0..out.nrows())
            .map(|i| self.weights[i] * (v_true[i] - v_model[i]).abs())
            .sum::<f64>()
            / n;
        value_term + self.reward_nll().value(params)
    }

    fn value_and_grad(&self, params: &[f64]) -> (f64, Vec<f64>) {
        let (nll, mut grads) = self.reward_nll().value_and_grad(params);
        let cache = self.spec.forward_cached(params, self.inputs);
        let out = cache.output();
        let k = self.targets.ncols();
        let ds = k - 1;
        let v_true = self.value_fn.values(self.next_states);
        let s_hat = self.sampled_next(out);
        let (v_model, dv_ds) = self.value_fn.values_and_grad(s_hat.view());
        let n = out.nrows() as f64;
        let mut value_term = 0.0;
        let mut d_out = Array2::zeros(out.raw_dim());
        for i in 0..out.nrows() {
            let diff = v_true[i] - v_model[i];
            value_term += self.weights[i] * diff.abs();
            // d|v_true − v_model|/dv_model = −sign(diff)
            let coef = -diff.signum() * self.weights[i] / n;
            for j in 0..ds {
                let d = 1 + j;
                let ds_dz = self.stats.target.std[d];
                let g = coef * dv_ds[(i, j)] * ds_dz;
                d_out[(i, d)] += g;
                let ls = out[(i, k + d)];
                if (nn::LOG_STD_MIN..=nn::LOG_STD_MAX).contains(&ls) {
                    d_out[(i, k + d)] += g * ls.exp() * self.eps[(i, j)];
                }
            }
        }
        self.spec.backward(params, &cache, d_out.view(), Some(&mut grads));
        (value_term / n + nll, grads)
    }
}

/// One batch of model predictions.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub s_next: Array2<f64>,
    pub reward: Vec<f64>,
    pub done: Vec<bool>,
    pub penalized: Vec<bool>,
}

/// Reparameterized next-state samples that can be differentiated with
/// respect to the `(s, a)` inputs.
pub struct DifferentiableSample {
    pub s_next: Array2<f64>,
    pub done: Vec<bool>,
    groups: Vec<(usize, Vec<usize>, nn::ForwardCache)>,
    eps: Array2<f64>,
    state_dim: usize,
    action_dim: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DynamicsEnsemble {
    pub config: DynamicsConfig,
    pub spec: MlpSpec,
    pub members: Vec<nn::ParamVector>,
    #[serde(skip)]
    optims: Vec<AdamState>,
    pub elites: Vec<usize>,
    pub stats: FittedStats,
    pub state_dim: usize,
    pub action_dim: usize,
    pub termination: TerminationRule,
    /// Test hook: replaces every predicted log-std.
    #[serde(skip)]
    pub log_std_override: Option<f64>,
    /// Mean holdout NLL of each member after the latest (re)train.
    pub holdout_nll: Vec<f64>,
}

impl DynamicsEnsemble {
    pub fn new(
        config: DynamicsConfig,
        dataset: &OfflineDataset,
        termination: TerminationRule,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let stats = fit_stats(dataset)?;
        let (ds, da) = (dataset.state_dim, dataset.action_dim);
        let spec = MlpSpec::new(ds + da, &config.hidden, 2 * (1 + ds));
        spec.validate()?;
        let mut rng = rng::stream(seed, tags::MODEL);
        let members: Vec<_> = (0..config.n_members).map(|_| spec.init(&mut rng)).collect();
        let optims = members.iter().map(|p| AdamState::new(p.len(), config.lr)).collect();
        Ok(Self {
            elites: (0..config.n_elites).collect(),
            holdout_nll: vec![f64::NAN; config.n_members],
            config,
            spec,
            members,
            optims,
            stats,
            state_dim: ds,
            action_dim: da,
            termination,
            log_std_override: None,
        })
    }

    pub fn training_data(&self, dataset: &OfflineDataset, split_seed: u64) -> TrainingData {
        TrainingData::new(dataset, &self.stats.normalization, self.config.holdout_fraction, split_seed)
    }

    fn ensure_optims(&mut self) {
        if self.optims.len() != self.members.len() {
            self.optims = self.members.iter().map(|p| AdamState::new(p.len(), self.config.lr)).collect();
        }
    }

    /// Unweighted MLE for `epochs` model epochs, then elite selection.
    pub fn train_mle(&mut self, data: &TrainingData, epochs: usize, seed: u64) -> Result<()> {
        self.train_inner(data, None, epochs, seed)
    }

    /// MLE weighted by `weights` (one per dataset row, normalized here to mean
    /// 1). Continues from the current parameters.
    pub fn train_weighted_mle(&mut self, data: &TrainingData, weights: &[f64], epochs: usize, seed: u64) -> Result<()> {
        if weights.len() != data.inputs.nrows() {
            return Err(Error::DimensionMismatch {
                what: "model weights",
                expected: data.inputs.nrows(),
                got: weights.len(),
            });
        }
        let w = normalize_weights(weights)?;
        self.train_inner(data, Some(&w), epochs, seed)
    }

    fn train_inner(&mut self, data: &TrainingData, weights: Option<&[f64]>, epochs: usize, seed: u64) -> Result<()> {
        self.ensure_optims();
        let steps = epochs * self.config.steps_per_epoch;
        let batch = self.config.batch_size;
        let spec = &self.spec;
        let n_members = self.members.len();
        let results: Vec<Result<()>> = self
            .members
            .par_iter_mut()
            .zip(self.optims.par_iter_mut())
            .enumerate()
            .map(|(m, (params, opt))| {
                let mut rng = rng::stream(seed, 1000 + m as u64);
                let mut idx = vec![0usize; batch];
                let mut wb = vec![0.0; batch];
                for step in 0..steps {
                    for (k, slot) in idx.iter_mut().enumerate() {
                        *slot = data.train_idx[rng.gen_range(0..data.train_idx.len())];
                        if let Some(w) = weights {
                            wb[k] = w[*slot];
                        }
                    }
                    let (x, y) = data.rows(&idx);
                    let obj = NllObjective {
                        spec,
                        inputs: x.view(),
                        targets: y.view(),
                        weights: weights.map(|_| wb.as_slice()),
                        only_first: None,
                    };
                    let (loss, grads) = obj.value_and_grad(params.as_slice());
                    if !loss.is_finite() {
                        return Err(Error::NonFinite {
                            what: "model NLL",
                            step,
                            detail: format!("member {m} of {n_members}"),
                        });
                    }
                    opt.step(params.as_mut_slice(), &grads);
                }
                Ok(())
            })
            .collect();
        results.into_iter().collect::<Result<()>>()?;
        self.select_elites(data);
        Ok(())
    }

    /// Value-discriminated retrain (the alternative model loss). The reward
    /// coordinate keeps its weighted NLL; the state coordinates are fitted
    /// through the value gap only.
    pub fn train_value_discriminated<V: ValueFunction + ?Sized>(
        &mut self,
        dataset: &OfflineDataset,
        data: &TrainingData,
        weights: &[f64],
        value_fn: &V,
        epochs: usize,
        seed: u64,
    ) -> Result<()> {
        let w = normalize_weights(weights)?;
        self.ensure_optims();
        let steps = epochs * self.config.steps_per_epoch;
        let batch = self.config.batch_size;
        let ds = self.state_dim;
        for (m, (params, opt)) in self.members.iter_mut().zip(self.optims.iter_mut()).enumerate() {
            let mut rng = rng::stream(seed, 2000 + m as u64);
            for step in 0..steps {
                let idx: Vec<usize> = (0..batch)
                    .map(|_| data.train_idx[rng.gen_range(0..data.train_idx.len())])
                    .collect();
                let (x, y) = data.rows(&idx);
                let mut states = Array2::zeros((batch, ds));
                let mut next = Array2::zeros((batch, ds));
                for (k, &i) in idx.iter().enumerate() {
                    let t = &dataset.transitions[i];
                    states.row_mut(k).assign(&Array1::from(t.s.clone()));
                    next.row_mut(k).assign(&Array1::from(t.s_next.clone()));
                }
                let eps = Array2::from_shape_fn((batch, ds), |_| StandardNormal.sample(&mut rng));
                let wb: Vec<f64> = idx.iter().map(|&i| w[i]).collect();
                let obj = ValueDiscObjective {
                    spec: &self.spec,
                    stats: &self.stats.normalization,
                    inputs: x.view(),
                    targets: y.view(),
                    states: states.view(),
                    next_states: next.view(),
                    eps: eps.view(),
                    weights: &wb,
                    value_fn,
                };
                let (loss, grads) = obj.value_and_grad(params.as_slice());
                if !loss.is_finite() {
                    return Err(Error::NonFinite {
                        what: "value-discriminated model loss",
                        step,
                        detail: format!("member {m}"),
                    });
                }
                opt.step(params.as_mut_slice(), &grads);
            }
        }
        self.select_elites(data);
        Ok(())
    }

    pub fn member_holdout_nll(&self, member: usize, data: &TrainingData) -> f64 {
        if data.holdout_idx.is_empty() {
            return f64::NAN;
        }
        let (x, y) = data.rows(&data.holdout_idx);
        NllObjective {
            spec: &self.spec,
            inputs: x.view(),
            targets: y.view(),
            weights: None,
            only_first: None,
        }
        .value(self.members[member].as_slice())
    }

    /// Lowest holdout NLL wins; ties go to the lower index.
    pub fn select_elites(&mut self, data: &TrainingData) {
        self.holdout_nll = (0..self.members.len()).map(|m| self.member_holdout_nll(m, data)).collect();
        self.elites = elite_order(&self.holdout_nll, self.config.n_elites);
    }

    pub fn mean_elite_holdout_nll(&self) -> f64 {
        self.elites.iter().map(|&e| self.holdout_nll[e]).sum::<f64>() / self.elites.len() as f64
    }

    fn member_outputs(&self, member: usize, s: ArrayView2<f64>, a: ArrayView2<f64>) -> (Array2<f64>, nn::ForwardCache) {
        let x = self.standardize_inputs(s, a);
        let cache = self.spec.forward_cached(self.members[member].as_slice(), x.view());
        (x, cache)
    }

    fn standardize_inputs(&self, s: ArrayView2<f64>, a: ArrayView2<f64>) -> Array2<f64> {
        let st = &self.stats.normalization.input;
        let (ds, da) = (self.state_dim, self.action_dim);
        let mut x = Array2::zeros((s.nrows(), ds + da));
        for i in 0..s.nrows() {
            for j in 0..ds {
                x[(i, j)] = (s[(i, j)] - st.mean[j]) / st.std[j];
            }
            for j in 0..da {
                x[(i, ds + j)] = (a[(i, j)] - st.mean[ds + j]) / st.std[ds + j];
            }
        }
        x
    }

    fn log_std(&self, raw: f64) -> f64 {
        self.log_std_override.unwrap_or_else(|| clamp_log_std(raw))
    }

    fn group_by_elite<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<(usize, Vec<usize>)> {
        let picks: Vec<usize> = (0..n).map(|_| self.elites[rng.gen_range(0..self.elites.len())]).collect();
        let mut groups: Vec<(usize, Vec<usize>)> = self.elites.iter().map(|&e| (e, Vec::new())).collect();
        for (i, e) in picks.into_iter().enumerate() {
            groups.iter_mut().find(|(g, _)| *g == e).unwrap().1.push(i);
        }
        groups.retain(|(_, rows)| !rows.is_empty());
        groups
    }

    /// Samples `(s', r, done)` for a batch with the penalty rule applied:
    /// an out-of-range state or reward yields `r = −r_range`, `done = true`.
    pub fn predict<R: Rng + ?Sized>(&self, s: ArrayView2<f64>, a: ArrayView2<f64>, rng: &mut R) -> Prediction {
        let n = s.nrows();
        let ds = self.state_dim;
        let k = 1 + ds;
        let tstats = &self.stats.normalization.target;
        let mut s_next = s.to_owned();
        let mut reward = vec![0.0; n];
        for (member, rows) in self.group_by_elite(n, rng) {
            let (_, cache) = self.member_outputs(member, s.select(Axis(0), &rows).view(), a.select(Axis(0), &rows).view());
            let out = cache.output();
            for (r, &i) in rows.iter().enumerate() {
                for d in 0..k {
                    let e: f64 = StandardNormal.sample(rng);
                    let z = out[(r, d)] + self.log_std(out[(r, k + d)]).exp() * e;
                    let v = z * tstats.std[d] + tstats.mean[d];
                    if d == 0 {
                        reward[i] = v;
                    } else {
                        s_next[(i, d - 1)] += v;
                    }
                }
            }
        }
        let mut done = vec![false; n];
        let mut penalized = vec![false; n];
        for i in 0..n {
            let row = s_next.row(i);
            let out_of_range = row
                .iter()
                .zip(&self.stats.state_abs_max)
                .any(|(x, m)| !x.is_finite() || x.abs() > 2.0 * m);
            if out_of_range || !reward[i].is_finite() || reward[i].abs() > self.stats.r_range {
                penalized[i] = true;
                done[i] = true;
                reward[i] = -self.stats.r_range;
                // Keep the stored state finite even when the sample blew up.
                for (x, m) in s_next.row_mut(i).iter_mut().zip(&self.stats.state_abs_max) {
                    if !x.is_finite() {
                        *x = 2.0 * m;
                    }
                }
            } else {
                done[i] = self.termination.is_terminal(row.as_slice().unwrap_or(&row.to_vec()));
            }
        }
        Prediction {
            s_next,
            reward,
            done,
            penalized,
        }
    }

    /// Next-state samples kept differentiable in `(s, a)`. Done flags follow
    /// [`Self::predict`] (penalty or environment rule) but are constants.
    pub fn sample_differentiable<R: Rng + ?Sized>(
        &self,
        s: ArrayView2<f64>,
        a: ArrayView2<f64>,
        rng: &mut R,
    ) -> DifferentiableSample {
        let n = s.nrows();
        let ds = self.state_dim;
        let k = 1 + ds;
        let tstats = &self.stats.normalization.target;
        let mut s_next = s.to_owned();
        let mut reward = vec![0.0; n];
        let mut eps = Array2::zeros((n, k));
        let mut groups = Vec::new();
        for (member, rows) in self.group_by_elite(n, rng) {
            let (_, cache) = self.member_outputs(member, s.select(Axis(0), &rows).view(), a.select(Axis(0), &rows).view());
            let out = cache.output();
            for (r, &i) in rows.iter().enumerate() {
                for d in 0..k {
                    let e: f64 = StandardNormal.sample(rng);
                    eps[(i, d)] = e;
                    let z = out[(r, d)] + self.log_std(out[(r, k + d)]).exp() * e;
                    let v = z * tstats.std[d] + tstats.mean[d];
                    if d == 0 {
                        reward[i] = v;
                    } else {
                        s_next[(i, d - 1)] += v;
                    }
                }
            }
            groups.push((member, rows, cache));
        }
        let done = (0..n)
            .map(|i| {
                let row = s_next.row(i).to_vec();
                let out_of_range = row
                    .iter()
                    .zip(&self.stats.state_abs_max)
                    .any(|(x, m)| !x.is_finite() || x.abs() > 2.0 * m);
                out_of_range
                    || !reward[i].is_finite()
                    || reward[i].abs() > self.stats.r_range
                    || self.termination.is_terminal(&row)
            })
            .collect();
        DifferentiableSample {
            s_next,
            done,
            groups,
            eps,
            state_dim: ds,
            action_dim: self.action_dim,
        }
    }

    /// Pulls `d_s_next` back to `(d_s, d_a)`.
    pub fn backward_sample(&self, sample: &DifferentiableSample, d_s_next: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
        let (ds, da) = (sample.state_dim, sample.action_dim);
        let k = 1 + ds;
        let n = d_s_next.nrows();
        let tstats = &self.stats.normalization.target;
        let istats = &self.stats.normalization.input;
        // s' = s + Δs, so the direct path contributes identity.
        let mut d_s = d_s_next.to_owned();
        let mut d_a = Array2::zeros((n, da));
        for (member, rows, cache) in &sample.groups {
            let out = cache.output();
            let mut d_out = Array2::zeros((rows.len(), 2 * k));
            for (r, &i) in rows.iter().enumerate() {
                for d in 1..k {
                    let g = d_s_next[(i, d - 1)] * tstats.std[d];
                    d_out[(r, d)] = g;
                    let raw = out[(r, k + d)];
                    if self.log_std_override.is_none() && (nn::LOG_STD_MIN..=nn::LOG_STD_MAX).contains(&raw) {
                        d_out[(r, k + d)] = g * raw.exp() * sample.eps[(i, d)];
                    }
                }
            }
            let dx = self.spec.backward(self.members[*member].as_slice(), cache, d_out.view(), None);
            for (r, &i) in rows.iter().enumerate() {
                for j in 0..ds {
                    d_s[(i, j)] += dx[(r, j)] / istats.std[j];
                }
                for j in 0..da {
                    d_a[(i, j)] += dx[(r, ds + j)] / istats.std[ds + j];
                }
            }
        }
        (d_s, d_a)
    }

    /// Per-row reward mean of the first elite; used as the reward test function.
    pub fn reward_mean(&self, s: ArrayView2<f64>, a: ArrayView2<f64>) -> Array1<f64> {
        let (_, cache) = self.member_outputs(self.elites[0], s, a);
        let t = &self.stats.normalization.target;
        cache.output().slice(s![.., 0]).mapv(|z| z * t.std[0] + t.mean[0])
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (m, p) in self.members.iter().enumerate() {
            nn::checkpoint::save(p, dir, &format!("member{m}"))?;
        }
        let mut manifest = self.clone();
        manifest.members.clear();
        write_json(&dir.join("ensemble.json"), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mut ens: Self = read_json(&dir.join("ensemble.json"))?;
        ens.members = (0..ens.config.n_members)
            .map(|m| nn::checkpoint::load(dir, &format!("member{m}")))
            .collect::<Result<_>>()?;
        if ens.members.iter().any(|p| p.len() != ens.spec.num_params()) {
            return Err(Error::invalid("ensemble checkpoint", "member size disagrees with the spec"));
        }
        ens.ensure_optims();
        Ok(ens)
    }
}

/// Indices of the `k` smallest values, ties by index. NaN sorts last.
pub fn elite_order(nll: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..nll.len()).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (nll[a], nll[b]);
        match (x.is_nan(), y.is_nan()) {
            (true, true) => a.cmp(&b),
            (true, false) => std::cmp::Ordering::Greater,
            (false, true) => std::cmp::Ordering::Less,
            _ => x.partial_cmp(&y).unwrap().then(a.cmp(&b)),
        }
    });
    order.truncate(k.min(nll.len()));
    order
}

/// Tabular (categorical) stand-in for the model family: one softmax row per
/// `(s, a)` fitted by gradient descent on the weighted NLL.
pub mod categorical {
    use super::normalize_weights;
    use crate::error::Result;

    /// Fits logits so that `P̂(s'|s,a)` minimizes
    /// `−mean_i ŵ_i log P̂(s'_i | s_i, a_i)`. Rows without data stay uniform.
    pub fn fit_weighted(
        n_states: usize,
        n_actions: usize,
        data: &[(usize, usize, usize)],
        weights: &[f64],
        max_iters: usize,
        tol: f64,
    ) -> Result<Vec<Vec<Vec<f64>>>> {
        let w = normalize_weights(weights)?;
        let n = data.len() as f64;
        // Per-row weighted target mass; the loss decomposes over rows.
        let mut mass = vec![vec![vec![0.0; n_states]; n_actions]; n_states];
        for (&(s, a, s2), wi) in data.iter().zip(&w) {
            mass[s][a][s2] += wi / n;
        }
        let mut out = vec![vec![vec![1.0 / n_states as f64; n_states]; n_actions]; n_states];
        for s in 0..n_states {
            for a in 0..n_actions {
                let m = &mass[s][a];
                let total: f64 = m.iter().sum();
                if total <= 0.0 {
                    continue;
                }
                let mut logits = vec![0.0; n_states];
                let lr = 1.0 / total;
                for _ in 0..max_iters {
                    let p = softmax(&logits);
                    // d/dlogit_j of −Σ m_k log p_k = total·p_j − m_j
                    let mut worst = 0.0_f64;
                    for j in 0..n_states {
                        let g = total * p[j] - m[j];
                        worst = worst.max(g.abs());
                        logits[j] -= lr * g;
                    }
                    if worst < tol {
                        break;
                    }
                }
                out[s][a] = softmax(&logits);
            }
        }
        Ok(out)
    }

    fn softmax(x: &[f64]) -> Vec<f64> {
        let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|v| v / z).collect()
    }
}
