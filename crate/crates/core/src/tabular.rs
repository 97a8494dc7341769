//! Finite MDPs with exact linear-algebra oracles.
//!
//! Everything here is computed by dense solves or exact summation, so the
//! quantities the continuous pipeline can only estimate (stationary
//! distributions, importance weights, the weight operator and its contraction
//! factor, the model-error bound) can be checked to round-off.
//!
//! State-action tables are stored row-major: index `s * n_actions + a`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SUM_TOL: f64 = 1e-12;

/// A real value per state-action pair.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SaTable {
    pub n_states: usize,
    pub n_actions: usize,
    pub values: Vec<f64>,
}

impl SaTable {
    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        Self::filled(n_states, n_actions, 0.0)
    }

    pub fn filled(n_states: usize, n_actions: usize, value: f64) -> Self {
        Self {
            n_states,
            n_actions,
            values: vec![value; n_states * n_actions],
        }
    }

    pub fn from_fn(n_states: usize, n_actions: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(n_states * n_actions);
        for s in 0..n_states {
            for a in 0..n_actions {
                values.push(f(s, a));
            }
        }
        Self {
            n_states,
            n_actions,
            values,
        }
    }

    #[inline]
    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.n_actions + a]
    }

    #[inline]
    pub fn set(&mut self, s: usize, a: usize, v: f64) {
        self.values[s * self.n_actions + a] = v;
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    /// ‖self − other‖∞
    pub fn max_abs_diff(&self, other: &SaTable) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Serialized form; validated on the way in.
#[derive(Serialize, Deserialize)]
struct MdpDoc {
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    mu0: Vec<f64>,
    transition: Vec<Vec<Vec<f64>>>,
    reward: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    r_max: Option<f64>,
}

/// A finite MDP `(S, A, P, r, γ, μ₀)` with reward bound `r_max`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MdpDoc", into = "MdpDoc")]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    /// `transition[s][a][s']`
    transition: Vec<Vec<Vec<f64>>>,
    /// `reward[s][a]`
    reward: Vec<Vec<f64>>,
    r_max: f64,
    gamma: f64,
    mu0: Vec<f64>,
}

impl TryFrom<MdpDoc> for TabularMdp {
    type Error = Error;

    fn try_from(doc: MdpDoc) -> Result<Self> {
        let r_max = doc
            .r_max
            .unwrap_or_else(|| doc.reward.iter().flatten().fold(0.0_f64, |m, r| m.max(r.abs())));
        TabularMdp::new(doc.transition, doc.reward, r_max, doc.gamma, doc.mu0).and_then(|m| {
            if m.n_states != doc.n_states || m.n_actions != doc.n_actions {
                Err(Error::invalid("mdp", "declared sizes disagree with the tables"))
            } else {
                Ok(m)
            }
        })
    }
}

impl From<TabularMdp> for MdpDoc {
    fn from(m: TabularMdp) -> Self {
        MdpDoc {
            n_states: m.n_states,
            n_actions: m.n_actions,
            gamma: m.gamma,
            mu0: m.mu0,
            transition: m.transition,
            reward: m.reward,
            r_max: Some(m.r_max),
        }
    }
}

fn check_distribution(what: &'static str, p: &[f64]) -> Result<()> {
    if p.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(Error::invalid(what, "entries must be finite and nonnegative"));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > SUM_TOL {
        return Err(Error::invalid(what, format!("sums to {sum}, not 1")));
    }
    Ok(())
}

/// A Dirichlet(1, …, 1) draw.
pub fn random_simplex<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / total).collect()
}

fn mix(a: &[f64], b: &[f64], eps: f64) -> Vec<f64> {
    let mut out: Vec<f64> = a.iter().zip(b).map(|(x, y)| (1.0 - eps) * x + eps * y).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= total);
    out
}

impl TabularMdp {
    pub fn new(
        transition: Vec<Vec<Vec<f64>>>,
        reward: Vec<Vec<f64>>,
        r_max: f64,
        gamma: f64,
        mu0: Vec<f64>,
    ) -> Result<Self> {
        let n_states = transition.len();
        if n_states == 0 {
            return Err(Error::invalid("mdp", "no states"));
        }
        let n_actions = transition[0].len();
        if n_actions == 0 {
            return Err(Error::invalid("mdp", "no actions"));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::invalid("mdp", format!("gamma {gamma} outside [0, 1)")));
        }
        if !(r_max > 0.0) {
            return Err(Error::invalid("mdp", "r_max must be positive"));
        }
        if mu0.len() != n_states {
            return Err(Error::DimensionMismatch {
                what: "mu0",
                expected: n_states,
                got: mu0.len(),
            });
        }
        check_distribution("mu0", &mu0)?;
        if reward.len() != n_states {
            return Err(Error::DimensionMismatch {
                what: "reward rows",
                expected: n_states,
                got: reward.len(),
            });
        }
        for s in 0..n_states {
            if transition[s].len() != n_actions || reward[s].len() != n_actions {
                return Err(Error::invalid("mdp", format!("state {s} has the wrong number of actions")));
            }
            for a in 0..n_actions {
                if transition[s][a].len() != n_states {
                    return Err(Error::DimensionMismatch {
                        what: "transition row",
                        expected: n_states,
                        got: transition[s][a].len(),
                    });
                }
                check_distribution("transition row", &transition[s][a])?;
                let r = reward[s][a];
                if !r.is_finite() || r.abs() > r_max {
                    return Err(Error::invalid("reward", format!("|r({s},{a})| = {} exceeds r_max {r_max}", r.abs())));
                }
            }
        }
        Ok(Self {
            n_states,
            n_actions,
            transition,
            reward,
            r_max,
            gamma,
            mu0,
        })
    }

    /// Dirichlet(1) transition rows, rewards uniform in `[-1, 1]`, uniform μ₀, `r_max = 1`.
    pub fn random<R: Rng + ?Sized>(n_states: usize, n_actions: usize, gamma: f64, rng: &mut R) -> Self {
        let transition = (0..n_states)
            .map(|_| (0..n_actions).map(|_| random_simplex(n_states, rng)).collect())
            .collect();
        let reward = (0..n_states)
            .map(|_| (0..n_actions).map(|_| rng.gen_range(-1.0..=1.0)).collect())
            .collect();
        let mu0 = vec![1.0 / n_states as f64; n_states];
        Self::new(transition, reward, 1.0, gamma, mu0).expect("generated MDP is valid")
    }

    /// Same MDP with every transition row mixed with an independent Dirichlet
    /// row at rate `eps`. Rewards, γ and μ₀ are shared.
    pub fn perturbed_model<R: Rng + ?Sized>(&self, eps: f64, rng: &mut R) -> Self {
        let transition = self
            .transition
            .iter()
            .map(|rows| rows.iter().map(|row| mix(row, &random_simplex(self.n_states, rng), eps)).collect())
            .collect();
        Self {
            transition,
            ..self.clone()
        }
    }

    pub fn with_reward(&self, reward: Vec<Vec<f64>>, r_max: f64) -> Result<Self> {
        Self::new(self.transition.clone(), reward, r_max, self.gamma, self.mu0.clone())
    }

    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        Self::new(self.transition.clone(), self.reward.clone(), self.r_max, gamma, self.mu0.clone())
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn r_max(&self) -> f64 {
        self.r_max
    }

    pub fn mu0(&self) -> &[f64] {
        &self.mu0
    }

    #[inline]
    pub fn p(&self, s: usize, a: usize, s_next: usize) -> f64 {
        self.transition[s][a][s_next]
    }

    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        &self.transition[s][a]
    }

    #[inline]
    pub fn r(&self, s: usize, a: usize) -> f64 {
        self.reward[s][a]
    }

    pub fn reward_table(&self) -> SaTable {
        SaTable::from_fn(self.n_states, self.n_actions, |s, a| self.reward[s][a])
    }

    fn check_policy(&self, pi: &TabularPolicy) -> Result<()> {
        if pi.n_states() != self.n_states || pi.n_actions() != self.n_actions {
            return Err(Error::invalid("policy", "shape does not match the MDP"));
        }
        Ok(())
    }

    fn same_shape(&self, other: &TabularMdp) -> bool {
        self.n_states == other.n_states && self.n_actions == other.n_actions
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// `probs[s][a] = π(a | s)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct TabularPolicy {
    probs: Vec<Vec<f64>>,
}

impl TryFrom<Vec<Vec<f64>>> for TabularPolicy {
    type Error = Error;
    fn try_from(probs: Vec<Vec<f64>>) -> Result<Self> {
        TabularPolicy::new(probs)
    }
}

impl From<TabularPolicy> for Vec<Vec<f64>> {
    fn from(p: TabularPolicy) -> Self {
        p.probs
    }
}

impl TabularPolicy {
    pub fn new(probs: Vec<Vec<f64>>) -> Result<Self> {
        if probs.is_empty() || probs[0].is_empty() {
            return Err(Error::invalid("policy", "empty"));
        }
        let n_a = probs[0].len();
        for row in &probs {
            if row.len() != n_a {
                return Err(Error::invalid("policy", "ragged rows"));
            }
            check_distribution("policy row", row)?;
        }
        Ok(Self { probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            probs: vec![vec![1.0 / n_actions as f64; n_actions]; n_states],
        }
    }

    pub fn random<R: Rng + ?Sized>(n_states: usize, n_actions: usize, rng: &mut R) -> Self {
        Self {
            probs: (0..n_states).map(|_| random_simplex(n_actions, rng)).collect(),
        }
    }

    /// Mixes every row with an independent Dirichlet row at rate `eps`; the
    /// total-variation distance per state is at most `eps`.
    pub fn perturbed<R: Rng + ?Sized>(&self, eps: f64, rng: &mut R) -> Self {
        let n_a = self.n_actions();
        Self {
            probs: self.probs.iter().map(|row| mix(row, &random_simplex(n_a, rng), eps)).collect(),
        }
    }

    pub fn n_states(&self) -> usize {
        self.probs.len()
    }

    pub fn n_actions(&self) -> usize {
        self.probs[0].len()
    }

    #[inline]
    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s][a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s]
    }

    /// Largest per-state total-variation distance to `other`.
    pub fn max_tv(&self, other: &TabularPolicy) -> f64 {
        self.probs
            .iter()
            .zip(&other.probs)
            .map(|(p, q)| 0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }
}

fn lu_solve(a: DMatrix<f64>, b: DVector<f64>, what: &'static str) -> Result<DVector<f64>> {
    let x = a.lu().solve(&b).ok_or(Error::Singular(what))?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular(what));
    }
    Ok(x)
}

/// Discounted stationary state-action distribution `d_π`.
///
/// Solves `(I − γ P_πᵀ) d_state = (1 − γ) μ₀` and spreads each state's mass
/// over actions with `π`.
pub fn stationary_distribution(mdp: &TabularMdp, pi: &TabularPolicy) -> Result<SaTable> {
    mdp.check_policy(pi)?;
    let n = mdp.n_states;
    let g = mdp.gamma;
    // a[s'][s] = δ − γ Σ_a π(a|s) P(s'|s,a)
    let mut a = DMatrix::<f64>::identity(n, n);
    for s in 0..n {
        for act in 0..mdp.n_actions {
            let w = pi.prob(s, act);
            if w == 0.0 {
                continue;
            }
            for s2 in 0..n {
                a[(s2, s)] -= g * w * mdp.p(s, act, s2);
            }
        }
    }
    let b = DVector::from_iterator(n, mdp.mu0.iter().map(|m| (1.0 - g) * m));
    let d_state = lu_solve(a, b, "stationary distribution")?;
    Ok(SaTable::from_fn(n, mdp.n_actions, |s, act| d_state[s] * pi.prob(s, act)))
}

/// `Q_π` from the exact solve of `Q = r + γ P Π Q`.
pub fn exact_q(mdp: &TabularMdp, pi: &TabularPolicy) -> Result<SaTable> {
    exact_q_for_reward(mdp, pi, &mdp.reward_table())
}

/// `Q_π` for an arbitrary reward table on `mdp`'s dynamics.
pub fn exact_q_for_reward(mdp: &TabularMdp, pi: &TabularPolicy, reward: &SaTable) -> Result<SaTable> {
    mdp.check_policy(pi)?;
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let n = ns * na;
    let g = mdp.gamma;
    let mut a = DMatrix::<f64>::identity(n, n);
    for s in 0..ns {
        for act in 0..na {
            let row = s * na + act;
            for s2 in 0..ns {
                let p = mdp.p(s, act, s2);
                if p == 0.0 {
                    continue;
                }
                for a2 in 0..na {
                    a[(row, s2 * na + a2)] -= g * p * pi.prob(s2, a2);
                }
            }
        }
    }
    let b = DVector::from_column_slice(&reward.values);
    let q = lu_solve(a, b, "action-value function")?;
    Ok(SaTable {
        n_states: ns,
        n_actions: na,
        values: q.iter().copied().collect(),
    })
}

/// `J(π) = (1 − γ)·E_{s~μ₀, a~π}[Q_π(s, a)]`.
pub fn expected_return(mdp: &TabularMdp, pi: &TabularPolicy) -> Result<f64> {
    let q = exact_q(mdp, pi)?;
    Ok((1.0 - mdp.gamma) * expectation_mu0_pi(mdp, pi, &q))
}

/// The same return computed as `E_{d_π}[r]`.
pub fn expected_return_via_occupancy(mdp: &TabularMdp, pi: &TabularPolicy) -> Result<f64> {
    let d = stationary_distribution(mdp, pi)?;
    Ok(d.values.iter().zip(mdp.reward_table().values).map(|(d, r)| d * r).sum())
}

fn expectation_mu0_pi(mdp: &TabularMdp, pi: &TabularPolicy, q: &SaTable) -> f64 {
    (0..mdp.n_states)
        .map(|s| mdp.mu0[s] * (0..mdp.n_actions).map(|a| pi.prob(s, a) * q.get(s, a)).sum::<f64>())
        .sum()
}

fn check_support(d: &SaTable) -> Result<()> {
    let missing: Vec<(usize, usize)> = (0..d.n_states)
        .flat_map(|s| (0..d.n_actions).map(move |a| (s, a)))
        .filter(|&(s, a)| !(d.get(s, a) > 0.0))
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::ZeroSupport(missing))
    }
}

/// `ω*(s, a) = d_π(s, a) / d_{π_b}(s, a)`.
pub fn true_miw(mdp: &TabularMdp, pi: &TabularPolicy, pi_b: &TabularPolicy) -> Result<SaTable> {
    let d_pi = stationary_distribution(mdp, pi)?;
    let d_b = stationary_distribution(mdp, pi_b)?;
    check_support(&d_b)?;
    Ok(SaTable {
        n_states: d_pi.n_states,
        n_actions: d_pi.n_actions,
        values: d_pi.values.iter().zip(&d_b.values).map(|(p, b)| p / b).collect(),
    })
}

/// One application of the weight operator `𝒯`:
///
/// `𝒯ω(s',a') = [γ Σ π(a'|s') P(s'|s,a) ω(s,a) d_b(s,a) + (1−γ) μ₀(s') π(a'|s')] / d_b(s',a')`.
pub fn apply_bellman_operator(
    mdp: &TabularMdp,
    pi: &TabularPolicy,
    pi_b: &TabularPolicy,
    omega: &SaTable,
) -> Result<SaTable> {
    let d_b = stationary_distribution(mdp, pi_b)?;
    check_support(&d_b)?;
    Ok(apply_operator_with(mdp, pi, &d_b, omega))
}

/// Operator application with a precomputed behavior occupancy.
pub fn apply_operator_with(mdp: &TabularMdp, pi: &TabularPolicy, d_b: &SaTable, omega: &SaTable) -> SaTable {
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let g = mdp.gamma;
    // inflow[s'] = Σ_{s,a} P(s'|s,a) ω(s,a) d_b(s,a)
    let mut inflow = vec![0.0; ns];
    for s in 0..ns {
        for a in 0..na {
            let mass = omega.get(s, a) * d_b.get(s, a);
            for (s2, f) in inflow.iter_mut().enumerate() {
                *f += mdp.p(s, a, s2) * mass;
            }
        }
    }
    SaTable::from_fn(ns, na, |s2, a2| {
        let p = pi.prob(s2, a2);
        (g * p * inflow[s2] + (1.0 - g) * mdp.mu0[s2] * p) / d_b.get(s2, a2)
    })
}

/// Contraction factor of `𝒯` in the sup norm:
/// `c = max_{s',a'} [π(a'|s')/π_b(a'|s')]·c(s')` with
/// `c(s') = 1 − (1−γ)μ₀(s') / (γ Σ P(s'|s,a) d_b(s,a) + (1−γ)μ₀(s'))`.
///
/// Values ≥ 1 are returned as-is; geometric convergence is then not implied.
pub fn contraction_constant(mdp: &TabularMdp, pi: &TabularPolicy, pi_b: &TabularPolicy) -> Result<f64> {
    mdp.check_policy(pi)?;
    let d_b = stationary_distribution(mdp, pi_b)?;
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let g = mdp.gamma;
    let mut c = 0.0_f64;
    for s2 in 0..ns {
        let inflow: f64 = (0..ns)
            .flat_map(|s| (0..na).map(move |a| (s, a)))
            .map(|(s, a)| mdp.p(s, a, s2) * d_b.get(s, a))
            .sum();
        let denom = g * inflow + (1.0 - g) * mdp.mu0[s2];
        if !(denom > 0.0) {
            return Err(Error::ZeroSupport((0..na).map(|a| (s2, a)).collect()));
        }
        let c_state = 1.0 - (1.0 - g) * mdp.mu0[s2] / denom;
        for a2 in 0..na {
            let (p, pb) = (pi.prob(s2, a2), pi_b.prob(s2, a2));
            if p == 0.0 {
                continue;
            }
            if pb == 0.0 {
                return Err(Error::RatioUndefined { state: s2, action: a2 });
            }
            c = c.max(p / pb * c_state);
        }
    }
    Ok(c)
}

/// `ℓ₁(ω) − ℓ₂(ω)` of the fixed-point identity, by exact summation:
/// `ℓ₁ = E_{d_b}[ω q]`, `ℓ₂ = γ E_{d_b, P, π}[ω(s,a) q(s',a')] + (1−γ) E_{μ₀, π}[q]`.
pub fn fixed_point_identity_residual(
    mdp: &TabularMdp,
    pi: &TabularPolicy,
    pi_b: &TabularPolicy,
    omega: &SaTable,
    q: &SaTable,
) -> Result<f64> {
    mdp.check_policy(pi)?;
    let d_b = stationary_distribution(mdp, pi_b)?;
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let g = mdp.gamma;
    // v[s'] = Σ_a' π(a'|s') q(s',a')
    let v: Vec<f64> = (0..ns)
        .map(|s| (0..na).map(|a| pi.prob(s, a) * q.get(s, a)).sum())
        .collect();
    let mut l1 = 0.0;
    let mut next = 0.0;
    for s in 0..ns {
        for a in 0..na {
            let w = d_b.get(s, a) * omega.get(s, a);
            l1 += w * q.get(s, a);
            let ev: f64 = mdp.transition[s][a].iter().zip(&v).map(|(p, v)| p * v).sum();
            next += w * ev;
        }
    }
    let l2 = g * next + (1.0 - g) * expectation_mu0_pi(mdp, pi, q);
    Ok(l1 - l2)
}

/// `KL(p ‖ q)` for discrete distributions.
pub fn kl_discrete(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch {
            what: "kl operands",
            expected: p.len(),
            got: q.len(),
        });
    }
    let mut kl = 0.0;
    for (i, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi > 0.0 {
            if !(qi > 0.0) {
                return Err(Error::InfiniteKl(format!("q[{i}] = 0 where p[{i}] = {pi}")));
            }
            kl += pi * (pi / qi).ln();
        }
    }
    Ok(kl)
}

/// `KL(P*(s'|·) π_b(a'|s') ‖ P̂(s'|·) π(a'|s'))` for one conditioning pair.
///
/// `pi_b` and `pi` are indexed `[s'][a']`.
pub fn joint_kl(p_star: &[f64], p_hat: &[f64], pi_b: &[Vec<f64>], pi: &[Vec<f64>]) -> Result<f64> {
    let mut kl = 0.0;
    for (s2, (&ps, &ph)) in p_star.iter().zip(p_hat).enumerate() {
        for (a2, (&b, &t)) in pi_b[s2].iter().zip(&pi[s2]).enumerate() {
            let num = ps * b;
            if num > 0.0 {
                let den = ph * t;
                if !(den > 0.0) {
                    return Err(Error::InfiniteKl(format!("model joint is 0 at (s'={s2}, a'={a2})")));
                }
                kl += num * (num / den).ln();
            }
        }
    }
    Ok(kl)
}

/// Discrete conditionals for a single `(s, a)`: next-state distributions
/// under the true and model dynamics and the two policies over next actions.
#[derive(Clone, Debug, Serialize)]
pub struct ConditionalJoint {
    pub p_star: Vec<f64>,
    pub p_hat: Vec<f64>,
    pub pi_b: Vec<Vec<f64>>,
    pub pi: Vec<Vec<f64>>,
}

impl ConditionalJoint {
    pub fn random<R: Rng + ?Sized>(n_next: usize, n_actions: usize, rng: &mut R) -> Self {
        Self {
            p_star: random_simplex(n_next, rng),
            p_hat: random_simplex(n_next, rng),
            pi_b: (0..n_next).map(|_| random_simplex(n_actions, rng)).collect(),
            pi: (0..n_next).map(|_| random_simplex(n_actions, rng)).collect(),
        }
    }
}

/// `KL(P*π_b ‖ P̂π) − KL(P* ‖ P̂)`; nonnegative whenever finite.
pub fn conditional_kl_gap(joint: &ConditionalJoint) -> Result<f64> {
    Ok(joint_kl(&joint.p_star, &joint.p_hat, &joint.pi_b, &joint.pi)? - kl_discrete(&joint.p_star, &joint.p_hat)?)
}

fn policy_rows(pi: &TabularPolicy) -> Vec<Vec<f64>> {
    pi.probs.clone()
}

/// The occupancy-weighted KL between the conditional joints versus the KL of
/// the full joints over `(s, a, s', a')` that also includes `d_b(s,a)` against
/// `d_b(s) π(a|s)`. Returns `full − weighted`, which is nonnegative.
pub fn full_joint_kl_gap(
    mdp: &TabularMdp,
    model: &TabularMdp,
    pi: &TabularPolicy,
    pi_b: &TabularPolicy,
) -> Result<f64> {
    if !mdp.same_shape(model) {
        return Err(Error::invalid("model", "shape differs from the MDP"));
    }
    let d_b = stationary_distribution(mdp, pi_b)?;
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let d_state: Vec<f64> = (0..ns).map(|s| (0..na).map(|a| d_b.get(s, a)).sum()).collect();
    let (rows_b, rows_pi) = (policy_rows(pi_b), policy_rows(pi));

    let mut weighted = 0.0;
    for s in 0..ns {
        for a in 0..na {
            let w = d_b.get(s, a);
            if w > 0.0 {
                weighted += w * joint_kl(mdp.transition_row(s, a), model.transition_row(s, a), &rows_b, &rows_pi)?;
            }
        }
    }

    let mut full = 0.0;
    for s in 0..ns {
        for a in 0..na {
            let left_sa = d_b.get(s, a);
            if left_sa <= 0.0 {
                continue;
            }
            let right_sa = d_state[s] * pi.prob(s, a);
            for s2 in 0..ns {
                for a2 in 0..na {
                    let left = left_sa * mdp.p(s, a, s2) * pi_b.prob(s2, a2);
                    if left <= 0.0 {
                        continue;
                    }
                    let right = right_sa * model.p(s, a, s2) * pi.prob(s2, a2);
                    if !(right > 0.0) {
                        return Err(Error::InfiniteKl(format!("full model joint is 0 at ({s},{a},{s2},{a2})")));
                    }
                    full += left * (left / right).ln();
                }
            }
        }
    }
    Ok(full - weighted)
}

/// Both sides of the model-error bound for one instance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReturnGapBound {
    /// `|J(π, P*) − J(π, P̂)|`
    pub lhs: f64,
    /// `γ r_max / (√2 (1 − γ)) · √D_π`
    pub rhs: f64,
    /// `D_π = E_{d_b}[ω*(s,a) KL(P* π_b ‖ P̂ π)]`
    pub weighted_kl: f64,
}

impl ReturnGapBound {
    pub fn prefactor(gamma: f64, r_max: f64) -> f64 {
        gamma * r_max / (std::f64::consts::SQRT_2 * (1.0 - gamma))
    }
}

/// Evaluates the return-gap bound exactly. `model` must share everything with
/// `mdp` except the transition kernel.
pub fn return_gap_bound(
    mdp: &TabularMdp,
    model: &TabularMdp,
    pi: &TabularPolicy,
    pi_b: &TabularPolicy,
) -> Result<ReturnGapBound> {
    if !mdp.same_shape(model) || mdp.gamma != model.gamma || mdp.mu0 != model.mu0 || mdp.reward != model.reward {
        return Err(Error::invalid(
            "model",
            "must share state/action spaces, gamma, mu0 and reward with the true MDP",
        ));
    }
    let lhs = (expected_return(mdp, pi)? - expected_return(model, pi)?).abs();
    let omega = true_miw(mdp, pi, pi_b)?;
    let d_b = stationary_distribution(mdp, pi_b)?;
    let (rows_b, rows_pi) = (policy_rows(pi_b), policy_rows(pi));
    let mut weighted_kl = 0.0;
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            let kl = joint_kl(mdp.transition_row(s, a), model.transition_row(s, a), &rows_b, &rows_pi)?;
            weighted_kl += d_b.get(s, a) * omega.get(s, a) * kl;
        }
    }
    let rhs = ReturnGapBound::prefactor(mdp.gamma, mdp.r_max) * weighted_kl.max(0.0).sqrt();
    Ok(ReturnGapBound { lhs, rhs, weighted_kl })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn single_state_single_action() {
        let mdp = TabularMdp::new(vec![vec![vec![1.0]]], vec![vec![0.5]], 1.0, 0.9, vec![1.0]).unwrap();
        let pi = TabularPolicy::uniform(1, 1);
        let d = stationary_distribution(&mdp, &pi).unwrap();
        assert!((d.get(0, 0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn gamma_zero_occupancy_is_initial_product() {
        let mut r = rng(4);
        let mdp = TabularMdp::random(4, 3, 0.0, &mut r);
        let pi = TabularPolicy::random(4, 3, &mut r);
        let d = stationary_distribution(&mdp, &pi).unwrap();
        for s in 0..4 {
            for a in 0..3 {
                assert!((d.get(s, a) - mdp.mu0()[s] * pi.prob(s, a)).abs() < 1e-15);
            }
        }
        let q = exact_q(&mdp, &pi).unwrap();
        assert!(q.max_abs_diff(&mdp.reward_table()) < 1e-15);
        let j = expected_return(&mdp, &pi).unwrap();
        let direct: f64 = (0..4)
            .map(|s| mdp.mu0()[s] * (0..3).map(|a| pi.prob(s, a) * mdp.r(s, a)).sum::<f64>())
            .sum();
        assert!((j - direct).abs() < 1e-14);
    }

    #[test]
    fn unit_reward_q_is_geometric_series() {
        let mut r = rng(5);
        let mdp = TabularMdp::random(5, 2, 0.95, &mut r);
        let mdp = mdp.with_reward(vec![vec![1.0; 2]; 5], 1.0).unwrap();
        let pi = TabularPolicy::random(5, 2, &mut r);
        let q = exact_q(&mdp, &pi).unwrap();
        for v in q.values {
            assert!((v - 20.0).abs() < 1e-10);
        }
        let c = 0.37;
        let mdp = mdp.with_reward(vec![vec![c; 2]; 5], 1.0).unwrap();
        assert!((expected_return(&mdp, &pi).unwrap() - c).abs() < 1e-12);
        assert!((expected_return_via_occupancy(&mdp, &pi).unwrap() - c).abs() < 1e-12);
    }

    #[test]
    fn identical_policies_give_unit_weights() {
        let mut r = rng(6);
        let mdp = TabularMdp::random(6, 3, 0.95, &mut r);
        let pi = TabularPolicy::random(6, 3, &mut r);
        let w = true_miw(&mdp, &pi, &pi).unwrap();
        assert!(w.values.iter().all(|x| (x - 1.0).abs() < 1e-12));
        let tw = apply_bellman_operator(&mdp, &pi, &pi, &SaTable::filled(6, 3, 1.0)).unwrap();
        assert!(tw.values.iter().all(|x| (x - 1.0).abs() < 1e-12));
    }

    #[test]
    fn weights_integrate_to_one_under_behavior() {
        let mut r = rng(7);
        let mdp = TabularMdp::random(7, 2, 0.95, &mut r);
        let pi = TabularPolicy::random(7, 2, &mut r);
        let pi_b = TabularPolicy::random(7, 2, &mut r);
        let w = true_miw(&mdp, &pi, &pi_b).unwrap();
        let d_b = stationary_distribution(&mdp, &pi_b).unwrap();
        let total: f64 = w.values.iter().zip(&d_b.values).map(|(w, d)| w * d).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn zero_support_is_reported() {
        let mdp = TabularMdp::new(
            vec![vec![vec![1.0, 0.0], vec![1.0, 0.0]], vec![vec![1.0, 0.0], vec![1.0, 0.0]]],
            vec![vec![0.0, 0.0], vec![0.0, 0.0]],
            1.0,
            0.9,
            vec![1.0, 0.0],
        )
        .unwrap();
        let pi = TabularPolicy::uniform(2, 2);
        match true_miw(&mdp, &pi, &pi) {
            Err(Error::ZeroSupport(pairs)) => assert_eq!(pairs, vec![(1, 0), (1, 1)]),
            other => panic!("expected zero support, got {other:?}"),
        }
    }

    #[test]
    fn contraction_constant_cases() {
        let mut r = rng(8);
        let mdp = TabularMdp::random(5, 3, 0.95, &mut r);
        let pi = TabularPolicy::random(5, 3, &mut r);
        let c = contraction_constant(&mdp, &pi, &pi).unwrap();
        assert!(c < 1.0 && c > 0.0);
        let c0 = contraction_constant(&mdp.with_gamma(1e-9).unwrap(), &pi, &pi).unwrap();
        assert!(c0 < 1e-7, "{c0}");

        let zero_b = TabularPolicy::new(vec![vec![1.0, 0.0, 0.0]; 5]).unwrap();
        assert!(matches!(
            contraction_constant(&mdp, &pi, &zero_b),
            Err(Error::RatioUndefined { .. })
        ));
    }

    #[test]
    fn residual_collapses() {
        let mut r = rng(9);
        let mdp = TabularMdp::random(4, 2, 0.95, &mut r);
        let pi = TabularPolicy::random(4, 2, &mut r);
        let pi_b = TabularPolicy::random(4, 2, &mut r);
        let q0 = SaTable::zeros(4, 2);
        let w = SaTable::from_fn(4, 2, |s, a| (s + 2 * a) as f64 * 0.3);
        assert_eq!(fixed_point_identity_residual(&mdp, &pi, &pi_b, &w, &q0).unwrap(), 0.0);

        let m0 = mdp.with_gamma(0.0).unwrap();
        let q = SaTable::from_fn(4, 2, |s, a| (s as f64 - a as f64).sin());
        let ones = SaTable::filled(4, 2, 1.0);
        let d_b = stationary_distribution(&m0, &pi_b).unwrap();
        let e_db: f64 = d_b.values.iter().zip(&q.values).map(|(d, q)| d * q).sum();
        let e_mu: f64 = (0..4)
            .map(|s| m0.mu0()[s] * (0..2).map(|a| pi.prob(s, a) * q.get(s, a)).sum::<f64>())
            .sum();
        let res = fixed_point_identity_residual(&m0, &pi, &pi_b, &ones, &q).unwrap();
        assert!((res - (e_db - e_mu)).abs() < 1e-15);
    }

    #[test]
    fn kl_basics() {
        assert_eq!(kl_discrete(&[0.2, 0.8], &[0.2, 0.8]).unwrap(), 0.0);
        assert!(kl_discrete(&[0.5, 0.5], &[1.0, 0.0]).is_err());
        let mut r = rng(10);
        let mut j = ConditionalJoint::random(4, 3, &mut r);
        j.pi = j.pi_b.clone();
        assert!(conditional_kl_gap(&j).unwrap().abs() < 1e-15);
    }

    #[test]
    fn identical_model_and_policies_give_zero_bound() {
        let mut r = rng(11);
        let mdp = TabularMdp::random(5, 2, 0.95, &mut r);
        let pi = TabularPolicy::random(5, 2, &mut r);
        let b = return_gap_bound(&mdp, &mdp, &pi, &pi).unwrap();
        assert!(b.lhs.abs() < 1e-12);
        assert!(b.rhs.abs() < 1e-12);

        let m0 = mdp.with_gamma(0.0).unwrap();
        let model = m0.perturbed_model(0.3, &mut r);
        let pi_b = TabularPolicy::random(5, 2, &mut r);
        let b = return_gap_bound(&m0, &model, &pi, &pi_b).unwrap();
        assert!(b.lhs.abs() < 1e-15);
        assert_eq!(b.rhs, 0.0);
    }

    #[test]
    fn model_must_share_reward() {
        let mut r = rng(12);
        let mdp = TabularMdp::random(3, 2, 0.9, &mut r);
        let other = TabularMdp::random(3, 2, 0.9, &mut r);
        let pi = TabularPolicy::uniform(3, 2);
        assert!(return_gap_bound(&mdp, &other, &pi, &pi).is_err());
    }

    #[test]
    fn infinite_kl_is_an_error() {
        let mdp = TabularMdp::new(
            vec![vec![vec![0.5, 0.5]], vec![vec![0.5, 0.5]]],
            vec![vec![0.1], vec![0.2]],
            1.0,
            0.9,
            vec![0.5, 0.5],
        )
        .unwrap();
        let model = TabularMdp::new(
            vec![vec![vec![1.0, 0.0]], vec![vec![0.5, 0.5]]],
            vec![vec![0.1], vec![0.2]],
            1.0,
            0.9,
            vec![0.5, 0.5],
        )
        .unwrap();
        let pi = TabularPolicy::uniform(2, 1);
        assert!(matches!(return_gap_bound(&mdp, &model, &pi, &pi), Err(Error::InfiniteKl(_))));
    }

    #[test]
    fn json_round_trip_and_validation() {
        let mut r = rng(13);
        let mdp = TabularMdp::random(3, 2, 0.9, &mut r);
        let text = mdp.to_json().unwrap();
        assert_eq!(TabularMdp::from_json(&text).unwrap(), mdp);

        let bad = r#"{"n_states":1,"n_actions":1,"gamma":0.9,"mu0":[1.0],"transition":[[[0.7]]],"reward":[[0.0]]}"#;
        assert!(TabularMdp::from_json(bad).is_err());
        let ok = r#"{"n_states":1,"n_actions":1,"gamma":0.9,"mu0":[1.0],"transition":[[[1.0]]],"reward":[[-0.4]]}"#;
        assert_eq!(TabularMdp::from_json(ok).unwrap().r_max(), 0.4);
    }
}
