//! Independent reference computations for the tabular module. None of these
//! share code with the linear-solve implementations they check.

#![allow(dead_code)]

use ampl::tabular::{SaTable, TabularMdp, TabularPolicy};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// `d ← γ Σ π(a'|s') P(s'|s,a) d(s,a) + (1−γ) μ₀(s') π(a'|s')`, iterated.
pub fn power_iteration_occupancy(mdp: &TabularMdp, pi: &TabularPolicy, steps: usize) -> Vec<f64> {
    let (ns, na, g) = (mdp.n_states(), mdp.n_actions(), mdp.gamma());
    let start: Vec<f64> = (0..ns * na)
        .map(|i| mdp.mu0()[i / na] * pi.prob(i / na, i % na))
        .collect();
    let mut d = start.clone();
    let mut state_mass = vec![0.0; ns];
    for _ in 0..steps {
        state_mass.iter_mut().for_each(|x| *x = 0.0);
        for s in 0..ns {
            for a in 0..na {
                let m = d[s * na + a];
                for (s2, acc) in state_mass.iter_mut().enumerate() {
                    *acc += mdp.p(s, a, s2) * m;
                }
            }
        }
        for s2 in 0..ns {
            for a2 in 0..na {
                d[s2 * na + a2] = g * pi.prob(s2, a2) * state_mass[s2] + (1.0 - g) * start[s2 * na + a2];
            }
        }
    }
    d
}

/// Policy evaluation by repeated Bellman backups until the sup-norm change
/// drops below `tol`.
pub fn value_iteration_q(mdp: &TabularMdp, pi: &TabularPolicy, tol: f64) -> Vec<f64> {
    let (ns, na, g) = (mdp.n_states(), mdp.n_actions(), mdp.gamma());
    let mut q = vec![0.0; ns * na];
    loop {
        let v: Vec<f64> = (0..ns)
            .map(|s| (0..na).map(|a| pi.prob(s, a) * q[s * na + a]).sum())
            .collect();
        let mut delta = 0.0_f64;
        let mut next = vec![0.0; ns * na];
        for s in 0..ns {
            for a in 0..na {
                let ev: f64 = (0..ns).map(|s2| mdp.p(s, a, s2) * v[s2]).sum();
                next[s * na + a] = mdp.r(s, a) + g * ev;
                delta = delta.max((next[s * na + a] - q[s * na + a]).abs());
            }
        }
        q = next;
        if delta < tol {
            return q;
        }
    }
}

fn sample_index<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Visitation frequencies of `(s_T, a_T)` with `T ~ Geometric(1 − γ)`, which
/// is a draw from the discounted occupancy.
pub fn monte_carlo_occupancy(mdp: &TabularMdp, pi: &TabularPolicy, rollouts: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let na = mdp.n_actions();
    let mut counts = vec![0u64; mdp.n_states() * na];
    for _ in 0..rollouts {
        let mut s = sample_index(mdp.mu0(), &mut rng);
        let mut a = sample_index(pi.row(s), &mut rng);
        while rng.gen::<f64>() < mdp.gamma() {
            s = sample_index(mdp.transition_row(s, a), &mut rng);
            a = sample_index(pi.row(s), &mut rng);
        }
        counts[s * na + a] += 1;
    }
    counts.iter().map(|&c| c as f64 / rollouts as f64).collect()
}

/// Recursion residual `max |d − (γ P_π d + (1−γ) μ₀ π)|` of a candidate occupancy.
pub fn occupancy_residual(mdp: &TabularMdp, pi: &TabularPolicy, d: &SaTable) -> f64 {
    let (ns, na, g) = (mdp.n_states(), mdp.n_actions(), mdp.gamma());
    let mut worst = 0.0_f64;
    for s2 in 0..ns {
        let inflow: f64 = (0..ns)
            .flat_map(|s| (0..na).map(move |a| (s, a)))
            .map(|(s, a)| mdp.p(s, a, s2) * d.get(s, a))
            .sum();
        for a2 in 0..na {
            let rhs = g * pi.prob(s2, a2) * inflow + (1.0 - g) * mdp.mu0()[s2] * pi.prob(s2, a2);
            worst = worst.max((d.get(s2, a2) - rhs).abs());
        }
    }
    worst
}

/// Bellman residual `max |Q − (r + γ P π Q)|`.
pub fn q_residual(mdp: &TabularMdp, pi: &TabularPolicy, q: &SaTable) -> f64 {
    let (ns, na, g) = (mdp.n_states(), mdp.n_actions(), mdp.gamma());
    let mut worst = 0.0_f64;
    for s in 0..ns {
        for a in 0..na {
            let ev: f64 = (0..ns)
                .map(|s2| mdp.p(s, a, s2) * (0..na).map(|a2| pi.prob(s2, a2) * q.get(s2, a2)).sum::<f64>())
                .sum();
            worst = worst.max((q.get(s, a) - mdp.r(s, a) - g * ev).abs());
        }
    }
    worst
}

/// One random bound instance: `(mdp, perturbed model, π, π_b)`.
pub struct BoundInstance {
    pub mdp: TabularMdp,
    pub model: TabularMdp,
    pub pi: TabularPolicy,
    pub pi_b: TabularPolicy,
    pub eps: f64,
}

pub const MODEL_EPS: [f64; 3] = [0.01, 0.1, 0.3];

pub fn bound_instance(seed: u64) -> BoundInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ns = rng.gen_range(2..=16);
    let na = rng.gen_range(2..=4);
    let mdp = TabularMdp::random(ns, na, 0.95, &mut rng);
    let eps = MODEL_EPS[(seed % 3) as usize];
    let model = mdp.perturbed_model(eps, &mut rng);
    let pi = TabularPolicy::random(ns, na, &mut rng);
    let pi_b = TabularPolicy::random(ns, na, &mut rng);
    BoundInstance {
        mdp,
        model,
        pi,
        pi_b,
        eps,
    }
}

/// A random MDP and policy of modest size for the solve-vs-iteration checks.
pub fn random_pair(seed: u64) -> (TabularMdp, TabularPolicy) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ns = rng.gen_range(2..=16);
    let na = rng.gen_range(2..=4);
    let mdp = TabularMdp::random(ns, na, 0.95, &mut rng);
    let pi = TabularPolicy::random(ns, na, &mut rng);
    (mdp, pi)
}

/// Iterates the weight operator from `omega0`, returning every iterate
/// including the start.
pub fn operator_trace(
    mdp: &TabularMdp,
    pi: &TabularPolicy,
    pi_b: &TabularPolicy,
    omega0: SaTable,
    steps: usize,
) -> Vec<SaTable> {
    let d_b = ampl::tabular::stationary_distribution(mdp, pi_b).unwrap();
    let mut out = vec![omega0];
    for _ in 0..steps {
        let next = ampl::tabular::apply_operator_with(mdp, pi, &d_b, out.last().unwrap());
        out.push(next);
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
