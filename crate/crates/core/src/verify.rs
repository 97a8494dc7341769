//! The exact tabular suite: every bound, identity and operator property
//! checked on random finite MDPs, each against an independent route.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::tabular::*;

pub const GAMMA: f64 = 0.95;
pub const MAX_STATES: usize = 16;
pub const MAX_ACTIONS: usize = 4;
/// Model perturbation sizes, cycled by instance seed.
pub const MODEL_EPS: [f64; 3] = [0.01, 0.1, 0.3];
pub const POWER_STEPS: usize = 10_000;
pub const TRACE_STEPS: usize = 200;
/// Random test tables per instance in the identity check, on top of `Q` and `r`.
pub const RANDOM_TABLES: usize = 3;
/// The KL-gap checks run this many instances per requested MDP.
pub const KL_INSTANCES_PER_MDP: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    pub return_gap_bound: f64,
    pub conditional_kl_gap: f64,
    pub full_joint_kl_gap: f64,
    pub occupancy: f64,
    pub q_evaluation: f64,
    pub return_forms: f64,
    pub miw_fixed_point: f64,
    pub contraction_trace: f64,
    pub operator_lipschitz: f64,
    pub identity_residual: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            return_gap_bound: 1e-9,
            conditional_kl_gap: 1e-12,
            full_joint_kl_gap: 1e-12,
            occupancy: 1e-8,
            q_evaluation: 1e-9,
            return_forms: 1e-9,
            miw_fixed_point: 1e-9,
            contraction_trace: 1e-10,
            operator_lipschitz: 1e-12,
            identity_residual: 1e-9,
        }
    }
}

impl Tolerances {
    /// Overrides one tolerance by check name.
    pub fn set(&mut self, name: &str, value: f64) -> Result<()> {
        if !(value >= 0.0 && value.is_finite()) {
            return Err(Error::invalid("tolerance", format!("{name} = {value} must be finite and nonnegative")));
        }
        let slot = match name {
            "return_gap_bound" => &mut self.return_gap_bound,
            "conditional_kl_gap" => &mut self.conditional_kl_gap,
            "full_joint_kl_gap" => &mut self.full_joint_kl_gap,
            "occupancy" => &mut self.occupancy,
            "q_evaluation" => &mut self.q_evaluation,
            "return_forms" => &mut self.return_forms,
            "miw_fixed_point" => &mut self.miw_fixed_point,
            "contraction_trace" => &mut self.contraction_trace,
            "operator_lipschitz" => &mut self.operator_lipschitz,
            "identity_residual" => &mut self.identity_residual,
            _ => return Err(Error::invalid("tolerance", format!("no check named {name:?}"))),
        };
        *slot = value;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct VerifyOptions {
    pub seed: u64,
    pub num_mdps: usize,
    pub tolerances: Tolerances,
    /// Negates the bound's prefactor. Exists so the harness can confirm a
    /// broken bound is caught.
    pub flip_prefactor: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            num_mdps: 100,
            tolerances: Tolerances::default(),
            flip_prefactor: false,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckReport {
    pub name: &'static str,
    pub instances: usize,
    /// Largest violation over all instances, clamped below at 0.
    pub max_violation: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// The first failing instance, serialized for replay.
    pub failure: Option<Value>,
}

/// Outcome of one instance: its violation and, if it failed, what to replay.
struct Outcome {
    violation: f64,
    failed: bool,
    replay: Option<Value>,
}

impl Outcome {
    fn measured(violation: f64, tol: f64, replay: impl FnOnce() -> Value) -> Self {
        let failed = !(violation <= tol);
        Outcome {
            violation,
            failed,
            replay: failed.then(replay),
        }
    }

    fn errored(e: Error, replay: Value) -> Self {
        Outcome {
            violation: f64::INFINITY,
            failed: true,
            replay: Some(json!({ "error": e.to_string(), "instance": replay })),
        }
    }
}

fn run_check(
    name: &'static str,
    tolerance: f64,
    seeds: impl IndexedParallelIterator<Item = u64>,
    instance: impl Fn(u64) -> Outcome + Sync + Send,
) -> CheckReport {
    let outcomes: Vec<(u64, Outcome)> = seeds.map(|seed| (seed, instance(seed))).collect();
    let max_violation = outcomes.iter().map(|(_, o)| o.violation).fold(0.0, f64::max);
    let failure = outcomes
        .iter()
        .find(|(_, o)| o.failed)
        .map(|(seed, o)| json!({ "check": name, "seed": seed, "detail": o.replay }));
    CheckReport {
        name,
        instances: outcomes.len(),
        max_violation,
        tolerance,
        passed: failure.is_none(),
        failure,
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// One random `(mdp, perturbed model, π, π_b)` tuple.
#[derive(Clone, Debug, Serialize)]
pub struct BoundInstance {
    pub mdp: TabularMdp,
    pub model: TabularMdp,
    pub pi: TabularPolicy,
    pub pi_b: TabularPolicy,
    pub eps: f64,
}

pub fn bound_instance(seed: u64) -> BoundInstance {
    let mut r = rng(seed);
    let ns = r.gen_range(2..=MAX_STATES);
    let na = r.gen_range(2..=MAX_ACTIONS);
    let mdp = TabularMdp::random(ns, na, GAMMA, &mut r);
    let eps = MODEL_EPS[(seed % MODEL_EPS.len() as u64) as usize];
    let model = mdp.perturbed_model(eps, &mut r);
    let pi = TabularPolicy::random(ns, na, &mut r);
    let pi_b = TabularPolicy::random(ns, na, &mut r);
    BoundInstance {
        mdp,
        model,
        pi,
        pi_b,
        eps,
    }
}

/// A random MDP with one random policy.
pub fn random_pair(seed: u64) -> (TabularMdp, TabularPolicy) {
    let mut r = rng(seed);
    let ns = r.gen_range(2..=MAX_STATES);
    let na = r.gen_range(2..=MAX_ACTIONS);
    let mdp = TabularMdp::random(ns, na, GAMMA, &mut r);
    let pi = TabularPolicy::random(ns, na, &mut r);
    (mdp, pi)
}

fn pair_replay(mdp: &TabularMdp, pi: &TabularPolicy) -> Value {
    json!({ "mdp": mdp, "pi": pi })
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Discounted occupancy by forward iteration of the stationary recursion.
pub fn occupancy_by_iteration(mdp: &TabularMdp, pi: &TabularPolicy, steps: usize) -> Vec<f64> {
    let (ns, na, g) = (mdp.n_states(), mdp.n_actions(), mdp.gamma());
    let start: Vec<f64> = (0..ns * na).map(|i| mdp.mu0()[i / na] * pi.prob(i / na, i % na)).collect();
    let mut d = start.clone();
    let mut inflow = vec![0.0; ns];
    for _ in 0..steps {
        inflow.iter_mut().for_each(|x| *x = 0.0);
        for s in 0..ns {
            for a in 0..na {
                let m = d[s * na + a];
                for (f, p) in inflow.iter_mut().zip(mdp.transition_row(s, a)) {
                    *f += p * m;
                }
            }
        }
        for s2 in 0..ns {
            for a2 in 0..na {
                d[s2 * na + a2] = g * pi.prob(s2, a2) * inflow[s2] + (1.0 - g) * start[s2 * na + a2];
            }
        }
    }
    d
}

/// Policy evaluation by Bellman backups until the sup-norm change is below `tol`.
pub fn q_by_iteration(mdp: &TabularMdp, pi: &TabularPolicy, tol: f64) -> Vec<f64> {
    let (ns, na, g) = (mdp.n_states(), mdp.n_actions(), mdp.gamma());
    let mut q = vec![0.0; ns * na];
    loop {
        let v: Vec<f64> = (0..ns).map(|s| (0..na).map(|a| pi.prob(s, a) * q[s * na + a]).sum()).collect();
        let mut delta = 0.0_f64;
        for s in 0..ns {
            for a in 0..na {
                let ev: f64 = mdp.transition_row(s, a).iter().zip(&v).map(|(p, v)| p * v).sum();
                let next = mdp.r(s, a) + g * ev;
                delta = delta.max((next - q[s * na + a]).abs());
                q[s * na + a] = next;
            }
        }
        if delta < tol {
            return q;
        }
    }
}

fn return_gap_bound_check(opts: &VerifyOptions) -> CheckReport {
    let tol = opts.tolerances.return_gap_bound;
    let sign = if opts.flip_prefactor { -1.0 } else { 1.0 };
    run_check("return_gap_bound", tol, seeds(opts, opts.num_mdps), |seed| {
        let inst = bound_instance(seed);
        match return_gap_bound(&inst.mdp, &inst.model, &inst.pi, &inst.pi_b) {
            Ok(b) => {
                let rhs = sign * b.rhs;
                Outcome::measured((b.lhs - rhs).max(0.0), tol, || {
                    json!({ "lhs": b.lhs, "rhs": rhs, "instance": inst })
                })
            }
            Err(e) => Outcome::errored(e, json!(inst)),
        }
    })
}

fn conditional_kl_gap_check(opts: &VerifyOptions) -> CheckReport {
    let tol = opts.tolerances.conditional_kl_gap;
    run_check("conditional_kl_gap", tol, seeds(opts, KL_INSTANCES_PER_MDP * opts.num_mdps), |seed| {
        let mut r = rng(seed);
        let (n, m) = (r.gen_range(1..=8), r.gen_range(1..=MAX_ACTIONS));
        let joint = ConditionalJoint::random(n, m, &mut r);
        match conditional_kl_gap(&joint) {
            Ok(gap) => Outcome::measured((-gap).max(0.0), tol, || json!({ "gap": gap, "joint": joint })),
            Err(e) => Outcome::errored(e, json!(joint)),
        }
    })
}

fn full_joint_kl_gap_check(opts: &VerifyOptions) -> CheckReport {
    let tol = opts.tolerances.full_joint_kl_gap;
    run_check("full_joint_kl_gap", tol, seeds(opts, KL_INSTANCES_PER_MDP * opts.num_mdps), |seed| {
        let inst = bound_instance(seed);
        match full_joint_kl_gap(&inst.mdp, &inst.model, &inst.pi, &inst.pi_b) {
            Ok(gap) => Outcome::measured((-gap).max(0.0), tol, || json!({ "gap": gap, "instance": inst })),
            Err(e) => Outcome::errored(e, json!(inst)),
        }
    })
}

fn occupancy_check(opts: &VerifyOptions) -> CheckReport {
    let tol = opts.tolerances.occupancy;
    run_check("occupancy_solve_vs_iteration", tol, seeds(opts, opts.num_mdps), |seed| {
        let (mdp, pi) = random_pair(seed);
        match stationary_distribution(&mdp, &pi) {
            Ok(d) => {
                let err = sup_diff(&d.values, &occupancy_by_iteration(&mdp, &pi, POWER_STEPS));
                Outcome::measured(err, tol, || pair_replay(&mdp, &pi))
            }
            Err(e) => Outcome::errored(e, pair_replay(&mdp, &pi)),
        }
    })
}

fn q_check(opts: &VerifyOptions) -> CheckReport {
    let tol = opts.tolerances.q_evaluation;
    run_check("q_solve_vs_iteration", tol, seeds(opts, opts.num_mdps), |seed| {
        let (mdp, pi) = random_pair(seed);
        match exact_q(&mdp, &pi) {
            Ok(q) => {
                let err = sup_diff(&q.values, &q_by_iteration(&mdp, &pi, 1e-13));
                Outcome::measured(err, tol, || pair_replay(&mdp, &pi))
            }
            Err(e) => Outcome::errored(e, pair_replay(&mdp, &pi)),
        }
    })
}

fn return_forms_check(opts: &VerifyOptions) -> CheckReport {
    let tol = opts.tolerances.return_forms;
    run_check("return_value_vs_occupancy", tol, seeds(opts, opts.num_mdps), |seed| {
        let (mdp, pi) = random_pair(seed);
        match (expected_return(&mdp, &pi), expected_return_via_occupancy(&mdp, &pi)) {
            (Ok(a), Ok(b)) => Outcome::measured((a - b).abs(), tol, || pair_replay(&mdp, &pi)),
            (Err(e), _) | (_, Err(e)) => Outcome::errored(e, pair_replay(&mdp, &pi)),
        }
    })
}

fn miw_fixed_point_check(opts: &VerifyOptions) -> CheckReport {
    let tol = opts.tolerances.miw_fixed_point;
    run_check("miw_operator_fixed_point", tol, seeds(opts, opts.num_mdps), |seed| {
        let inst = bound_instance(seed);
        let res = true_miw(&inst.mdp, &inst.pi, &inst.pi_b)
            .and_then(|w| Ok((apply_bellman_operator(&inst.mdp, &inst.pi, &inst.pi_b, &w)?, w)));
        match res {
            Ok((tw, w)) => Outcome::measured(tw.max_abs_diff(&w), tol, || json!(inst)),
            Err(e) => Outcome::errored(e, json!(inst)),
        }
    })
}

/// With `π = π_b` the fixed point is `ω* ≡ 1`; iterates from a random start
/// must stay inside `c^k‖ω₀ − ω*‖∞`, and `c` itself must be below 1.
fn contraction_check(opts: &VerifyOptions) -> CheckReport {
    let tol = opts.tolerances.contraction_trace;
    run_check("contraction_trace", tol, seeds(opts, opts.num_mdps), |seed| {
        let (mdp, pi) = random_pair(seed);
        let (ns, na) = (mdp.n_states(), mdp.n_actions());
        let mut r = rng(seed ^ 0xc0_47_ac_7);
        let omega0 = SaTable::from_fn(ns, na, |_, _| r.gen_range(0.0..3.0));
        let replay = || json!({ "mdp": mdp, "pi": pi, "omega0": omega0 });
        let (c, d_b) = match contraction_constant(&mdp, &pi, &pi).and_then(|c| Ok((c, stationary_distribution(&mdp, &pi)?))) {
            Ok(v) => v,
            Err(e) => return Outcome::errored(e, replay()),
        };
        let star = SaTable::filled(ns, na, 1.0);
        let e0 = omega0.max_abs_diff(&star);
        let mut w = omega0.clone();
        let mut worst = 0.0_f64;
        for k in 1..=TRACE_STEPS {
            w = apply_operator_with(&mdp, &pi, &d_b, &w);
            worst = worst.max(w.max_abs_diff(&star) - c.powi(k as i32) * e0);
        }
        let mut out = Outcome::measured(worst.max(0.0), tol, || json!({ "c": c, "instance": replay() }));
        if !(c < 1.0) && !out.failed {
            out.failed = true;
            out.replay = Some(json!({ "c": c, "instance": replay() }));
        }
        out
    })
}

fn lipschitz_check(opts: &VerifyOptions) -> CheckReport {
    let tol = opts.tolerances.operator_lipschitz;
    run_check("operator_lipschitz", tol, seeds(opts, opts.num_mdps), |seed| {
        let (mdp, pi) = random_pair(seed);
        let (ns, na) = (mdp.n_states(), mdp.n_actions());
        let mut r = rng(seed ^ 0x5eed);
        let w = SaTable::from_fn(ns, na, |_, _| r.gen_range(-3.0..3.0));
        let u = SaTable::from_fn(ns, na, |_, _| r.gen_range(-3.0..3.0));
        let res = (|| {
            let c = contraction_constant(&mdp, &pi, &pi)?;
            let tw = apply_bellman_operator(&mdp, &pi, &pi, &w)?;
            let tu = apply_bellman_operator(&mdp, &pi, &pi, &u)?;
            Ok(tw.max_abs_diff(&tu) - c * w.max_abs_diff(&u))
        })();
        let replay = || json!({ "mdp": mdp, "pi": pi, "omega": w, "u": u });
        match res {
            Ok(excess) => Outcome::measured(excess.max(0.0), tol, replay),
            Err(e) => Outcome::errored(e, replay()),
        }
    })
}

fn identity_check(opts: &VerifyOptions) -> CheckReport {
    let tol = opts.tolerances.identity_residual;
    run_check("fixed_point_identity", tol, seeds(opts, opts.num_mdps), |seed| {
        let inst = bound_instance(seed);
        let (ns, na) = (inst.mdp.n_states(), inst.mdp.n_actions());
        let mut r = rng(seed.wrapping_add(1000));
        let res = (|| {
            let w = true_miw(&inst.mdp, &inst.pi, &inst.pi_b)?;
            let mut tables = vec![exact_q(&inst.mdp, &inst.pi)?, inst.mdp.reward_table()];
            for _ in 0..RANDOM_TABLES {
                tables.push(SaTable::from_fn(ns, na, |_, _| r.gen_range(-5.0..5.0)));
            }
            let mut worst = 0.0_f64;
            for q in &tables {
                worst = worst.max(fixed_point_identity_residual(&inst.mdp, &inst.pi, &inst.pi_b, &w, q)?.abs());
            }
            Ok(worst)
        })();
        match res {
            Ok(worst) => Outcome::measured(worst, tol, || json!(inst)),
            Err(e) => Outcome::errored(e, json!(inst)),
        }
    })
}

fn seeds(opts: &VerifyOptions, count: usize) -> impl IndexedParallelIterator<Item = u64> {
    let base = opts.seed;
    (0..count).into_par_iter().map(move |i| base.wrapping_add(i as u64))
}

/// Runs every check in a fixed order.
pub fn run_suite(opts: &VerifyOptions) -> Vec<CheckReport> {
    vec![
        return_gap_bound_check(opts),
        conditional_kl_gap_check(opts),
        full_joint_kl_gap_check(opts),
        occupancy_check(opts),
        q_check(opts),
        return_forms_check(opts),
        miw_fixed_point_check(opts),
        contraction_check(opts),
        lipschitz_check(opts),
        identity_check(opts),
    ]
}
