//! End-to-end acceptance run: every criterion is evaluated, reported on one
//! line, and the target fails if any of them does.

use std::path::Path;
use std::time::{Duration, Instant};

use ampl::agent::{probe, Agent, AgentConfig, CriticObjective, CriticValue, DiscriminatorObjective, GeneratorLoss, PolicyHead};
use ampl::buffer::Batch;
use ampl::config::{RunConfig, Variant};
use ampl::dataset::{collect_dataset, OfflineDataset};
use ampl::dynamics::{categorical, DynamicsConfig, DynamicsEnsemble, NllObjective, TerminationRule, ValueDiscObjective};
use ampl::env::{consts, Quality};
use ampl::miw::{concat_columns, embed, CriticTest, MiwBatch, MiwConfig, MiwEstimator};
use ampl::nn::{check_gradient, Activation, ParamVector};
use ampl::rng::{seeded, stream};
use ampl::tabular::{
    apply_bellman_operator, conditional_kl_gap, contraction_constant, exact_q, fixed_point_identity_residual,
    full_joint_kl_gap, return_gap_bound, stationary_distribution, true_miw, ConditionalJoint, SaTable,
};
use ampl::train::{run_ampl, ScheduleCounts, METRICS_FILE};
use ampl::verify::{bound_instance, occupancy_by_iteration, random_pair, POWER_STEPS};
use ampl_cli::commands::cmd_train;
use ampl_cli::TrainArgs;
use ndarray::{Array1, Array2, Axis};
use rand::Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: String) -> Self {
        Self { passed, detail }
    }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed())
}

fn return_gap() -> Outcome {
    let (worst, took) = timed(|| {
        (0..100u64)
            .map(|seed| {
                let inst = bound_instance(seed);
                let b = return_gap_bound(&inst.mdp, &inst.model, &inst.pi, &inst.pi_b).unwrap();
                b.lhs - b.rhs
            })
            .fold(f64::NEG_INFINITY, f64::max)
    });
    Outcome::new(
        worst <= 1e-9 && took < Duration::from_secs(10),
        format!("max lhs - rhs {worst:.3e} over 100 tuples in {took:.2?}"),
    )
}

fn kl_gaps() -> Outcome {
    let (cond, t_cond) = timed(|| {
        (0..1000u64)
            .map(|seed| {
                let mut r = seeded(seed);
                let (n, m) = (r.gen_range(1..=8), r.gen_range(1..=4));
                conditional_kl_gap(&ConditionalJoint::random(n, m, &mut r)).unwrap()
            })
            .fold(f64::INFINITY, f64::min)
    });
    let (joint, t_joint) = timed(|| {
        (0..1000u64)
            .map(|seed| {
                let inst = bound_instance(seed);
                full_joint_kl_gap(&inst.mdp, &inst.model, &inst.pi, &inst.pi_b).unwrap()
            })
            .fold(f64::INFINITY, f64::min)
    });
    let limit = Duration::from_secs(5);
    Outcome::new(
        cond >= -1e-12 && joint >= -1e-12 && t_cond < limit && t_joint < limit,
        format!("min conditional gap {cond:.3e} ({t_cond:.2?}), min full-joint gap {joint:.3e} ({t_joint:.2?})"),
    )
}

fn occupancy() -> Outcome {
    let worst = (0..50u64)
        .map(|seed| {
            let (mdp, pi) = random_pair(seed);
            let solved = stationary_distribution(&mdp, &pi).unwrap();
            let iterated = occupancy_by_iteration(&mdp, &pi, POWER_STEPS);
            solved.values.iter().zip(&iterated).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        })
        .fold(0.0, f64::max);
    Outcome::new(worst <= 1e-8, format!("max |solve - iteration| {worst:.3e} over 50 MDPs"))
}

fn contraction() -> Outcome {
    let (mut worst_c, mut worst_excess) = (0.0_f64, f64::NEG_INFINITY);
    for seed in 0..50u64 {
        let (mdp, pi) = random_pair(seed);
        let (ns, na) = (mdp.n_states(), mdp.n_actions());
        let c = contraction_constant(&mdp, &pi, &pi).unwrap();
        let star = true_miw(&mdp, &pi, &pi).unwrap();
        let mut r = stream(seed, 41);
        let omega0 = SaTable::from_fn(ns, na, |_, _| r.gen_range(0.0..3.0));
        let e0 = omega0.max_abs_diff(&star);
        let mut w = omega0;
        for k in 1..=200 {
            w = apply_bellman_operator(&mdp, &pi, &pi, &w).unwrap();
            worst_excess = worst_excess.max(w.max_abs_diff(&star) - c.powi(k) * e0);
        }
        worst_c = worst_c.max(c);
    }
    Outcome::new(
        worst_c < 1.0 && worst_excess <= 1e-10,
        format!("max c {worst_c:.4}, max excess over c^k bound {worst_excess:.3e}"),
    )
}

fn fixed_point_identity() -> Outcome {
    let mut worst = 0.0_f64;
    for seed in 0..50u64 {
        let inst = bound_instance(seed);
        let (ns, na) = (inst.mdp.n_states(), inst.mdp.n_actions());
        let w = true_miw(&inst.mdp, &inst.pi, &inst.pi_b).unwrap();
        let mut r = stream(seed, 42);
        let mut tables = vec![exact_q(&inst.mdp, &inst.pi).unwrap(), inst.mdp.reward_table()];
        for _ in 0..3 {
            tables.push(SaTable::from_fn(ns, na, |_, _| r.gen_range(-5.0..5.0)));
        }
        for q in &tables {
            let res = fixed_point_identity_residual(&inst.mdp, &inst.pi, &inst.pi_b, &w, q).unwrap();
            worst = worst.max(res.abs());
        }
    }
    Outcome::new(worst <= 1e-9, format!("max residual {worst:.3e} over 50 MDPs x 5 tables"))
}

fn miw_recovery() -> Outcome {
    let (errors, took) = timed(|| {
        (0..5u64)
            .map(|seed| embed::run_recovery(seed, embed::recovery_config()).unwrap().max_error)
            .collect::<Vec<_>>()
    });
    let hits = errors.iter().filter(|e| **e <= 0.1).count();
    Outcome::new(
        hits >= 4 && took < Duration::from_secs(180),
        format!("{hits}/5 seeds within 0.1, sup errors {errors:.4?}, {took:.1?}"),
    )
}

fn bits(p: &ParamVector) -> Vec<u64> {
    p.as_slice().iter().map(|x| x.to_bits()).collect()
}

fn small_dynamics() -> DynamicsConfig {
    DynamicsConfig {
        hidden: vec![16, 16],
        batch_size: 64,
        steps_per_epoch: 40,
        ..DynamicsConfig::desk()
    }
}

fn unit_weights() -> Outcome {
    let ds = collect_dataset(Quality::Medium, 30, 0).unwrap();
    let base = DynamicsEnsemble::new(small_dynamics(), &ds, TerminationRule::PointMassGoal, 3).unwrap();
    let data = base.training_data(&ds, 3);
    let mut plain = base.clone();
    plain.train_mle(&data, 2, 11).unwrap();
    let mut weighted = base;
    weighted.train_weighted_mle(&data, &vec![1.0; ds.len()], 2, 11).unwrap();
    let identical = plain.elites == weighted.elites
        && plain.members.iter().zip(&weighted.members).all(|(a, b)| bits(a) == bits(b));

    let (ns, na) = (4, 2);
    let mut rng = seeded(5);
    let mut rows: Vec<(usize, usize, usize)> = Vec::new();
    for s in 0..ns {
        for a in 0..na {
            rows.extend((0..ns).map(|s2| (s, a, s2)));
        }
    }
    rows.extend((0..400).map(|_| (rng.gen_range(0..ns), rng.gen_range(0..na), rng.gen_range(0..ns))));
    let weights: Vec<f64> = (0..rows.len()).map(|_| rng.gen_range(0.1..3.0)).collect();
    let fitted = categorical::fit_weighted(ns, na, &rows, &weights, 1_000_000, 1e-14).unwrap();
    let mut worst = 0.0_f64;
    for s in 0..ns {
        for a in 0..na {
            let mut counts = vec![0.0; ns];
            for (&(si, ai, s2), w) in rows.iter().zip(&weights) {
                if si == s && ai == a {
                    counts[s2] += w;
                }
            }
            let total: f64 = counts.iter().sum();
            for s2 in 0..ns {
                worst = worst.max((fitted[s][a][s2] - counts[s2] / total).abs());
            }
        }
    }
    Outcome::new(
        identical && worst <= 1e-10,
        format!("unit-weight run bitwise identical: {identical}, categorical max deviation {worst:.3e}"),
    )
}

fn perturb(params: &mut [f64], scale: f64, seed: u64) {
    let mut rng = stream(seed, 99);
    params.iter_mut().for_each(|p| *p += rng.gen_range(-scale..scale));
}

fn smooth_agent(ds: &OfflineDataset, config: AgentConfig, seed: u64) -> Agent {
    let mut agent = Agent::new(config, ds.state_dim, ds.action_dim, consts::MAX_ACTION, &mut seeded(seed)).unwrap();
    agent.policy_net.spec = agent.policy_net.spec.clone().with_activation(Activation::Tanh);
    agent.critic_spec = agent.critic_spec.clone().with_activation(Activation::Tanh);
    agent.disc_spec = agent.disc_spec.clone().with_activation(Activation::Tanh);
    agent
}

fn small_agent_config() -> AgentConfig {
    AgentConfig {
        hidden: vec![8, 8],
        ..AgentConfig::desk()
    }
}

fn smooth_model(ds: &OfflineDataset, rule: TerminationRule, seed: u64) -> DynamicsEnsemble {
    let mut model = DynamicsEnsemble::new(small_dynamics(), ds, rule, seed).unwrap();
    model.spec = model.spec.clone().with_activation(Activation::Tanh);
    model
}

fn gradients() -> Outcome {
    let ds = collect_dataset(Quality::Medium, 20, 0).unwrap();
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut record = |name: &'static str, err: f64| match worst.iter_mut().find(|(n, _)| *n == name) {
        Some(entry) => entry.1 = entry.1.max(err),
        None => worst.push((name, err)),
    };
    for seed in 0..5u64 {
        let model = smooth_model(&ds, TerminationRule::None, seed);
        let data = model.training_data(&ds, seed);
        let idx: Vec<usize> = data.train_idx[..24].to_vec();
        let (x, y) = (data.inputs.select(Axis(0), &idx), data.targets.select(Axis(0), &idx));
        let mut member = model.members[0].as_slice().to_vec();
        perturb(&mut member, 0.2, seed);
        let w: Vec<f64> = (0..24).map(|i| 0.5 + (i as f64 * 0.37).sin().abs()).collect();
        for weights in [None, Some(w.as_slice())] {
            let obj = NllObjective {
                spec: &model.spec,
                inputs: x.view(),
                targets: y.view(),
                weights,
                only_first: None,
            };
            record("weighted nll", check_gradient(&obj, &member).max_rel_error);
        }

        let mut agent = smooth_agent(&ds, small_agent_config(), seed);
        perturb(agent.critics[0].as_mut_slice(), 0.3, seed);
        perturb(agent.policy.as_mut_slice(), 0.3, seed + 20);
        let states = Array2::from_shape_fn((24, ds.state_dim), |(i, j)| ds.transitions[idx[i]].s[j]);
        let next = Array2::from_shape_fn((24, ds.state_dim), |(i, j)| ds.transitions[idx[i]].s_next[j] + 0.3);
        let mut rng = stream(seed, 3);
        let eps = Array2::from_shape_fn((24, ds.state_dim), |(i, j)| ((i * 7 + j) as f64 * 0.61 + rng.gen_range(0.0..1.0)).sin());
        let vd_weights: Vec<f64> = (0..24).map(|_| rng.gen_range(0.2..2.0)).collect();
        let value = CriticValue { agent: &agent };
        let obj = ValueDiscObjective {
            spec: &model.spec,
            stats: &model.stats.normalization,
            inputs: x.view(),
            targets: y.view(),
            states: states.view(),
            next_states: next.view(),
            eps: eps.view(),
            weights: &vd_weights,
            value_fn: &value,
        };
        record("value-discriminated", check_gradient(&obj, &member).max_rel_error);

        for g in [0.05, 10.0] {
            let cfg = MiwConfig {
                hidden: vec![8, 8],
                batch_size: 64,
                init_batch_size: 32,
                g_constraint: g,
                ..MiwConfig::desk()
            };
            let dim = ds.state_dim + ds.action_dim;
            let mut est = MiwEstimator::new(cfg, dim, Some(ds.normalization.input.clone()), &mut seeded(seed)).unwrap();
            est.spec = est.spec.clone().with_activation(Activation::Tanh);
            perturb(est.omega.as_mut_slice(), 0.3, seed + 30);
            let test = CriticTest {
                spec: agent.critic_spec.clone(),
                live: agent.critics[0].clone(),
                target: agent.critic_targets[0].clone(),
            };
            let mut rng = stream(seed, 8);
            let batch = MiwBatch::sample(&ds, 32, 16, &mut rng);
            let obj = est.objective(&batch, &test, &agent, 0.9, &mut rng);
            record("miw loss", check_gradient(&obj, est.omega.as_slice()).max_rel_error);
        }

        let b = Batch::sample(&ds.transitions, 24, ds.state_dim, ds.action_dim, &mut seeded(seed));
        let sa = concat_columns(b.s.view(), b.a.view());
        let targets: Array1<f64> = (0..24).map(|i| (i as f64 * 0.7).sin() * 3.0).collect();
        for delta in [500.0, 0.5] {
            let obj = CriticObjective {
                spec: &agent.critic_spec,
                inputs: sa.view(),
                targets: targets.view(),
                delta,
            };
            record("critic huber", check_gradient(&obj, agent.critics[0].as_slice()).max_rel_error);
        }

        let mut disc = agent.discriminator.clone();
        perturb(disc.as_mut_slice(), 0.3, seed + 10);
        let mut rng = seeded(seed);
        let labels: Vec<f64> = (0..24).map(|i| if i < 12 { rng.gen_range(0.8..1.0) } else { 0.0 }).collect();
        let obj = DiscriminatorObjective {
            spec: &agent.disc_spec,
            inputs: sa.view(),
            labels: &labels,
            clamp: 1e-6,
        };
        record("discriminator", check_gradient(&obj, disc.as_slice()).max_rel_error);

        let actor_model = smooth_model(&ds, TerminationRule::PointMassGoal, seed);
        let actor_states = b.s.slice(ndarray::s![..12, ..]).to_owned();
        let row_w: Vec<f64> = (0..12).map(|i| 0.3 + (i as f64 * 0.9).cos().abs()).collect();
        for (head, gen, wpr) in [
            (PolicyHead::Implicit, GeneratorLoss::NonSaturating, false),
            (PolicyHead::Implicit, GeneratorLoss::Saturating, false),
            (PolicyHead::Implicit, GeneratorLoss::NonSaturating, true),
            (PolicyHead::Gaussian, GeneratorLoss::NonSaturating, false),
        ] {
            let cfg = AgentConfig {
                policy_head: head,
                generator_loss: gen,
                ..small_agent_config()
            };
            let mut actor = smooth_agent(&ds, cfg, seed);
            perturb(actor.policy.as_mut_slice(), 0.3, seed);
            perturb(actor.discriminator.as_mut_slice(), 0.3, seed + 10);
            actor.q_avg = 2.0;
            let weights = wpr.then_some(row_w.as_slice());
            let obj = actor.actor_objective(actor_states.view(), &actor_model, weights, true, &mut seeded(seed)).unwrap();
            record("actor", check_gradient(&obj, actor.policy.as_slice()).max_rel_error);
        }
    }
    let max = worst.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let parts: Vec<String> = worst.iter().map(|(n, e)| format!("{n} {e:.2e}")).collect();
    Outcome::new(max < 1e-4, format!("max relative error per loss over 5 seeds: {}", parts.join(", ")))
}

fn discriminator_ratio() -> Outcome {
    let fit = probe::fit(0, 4000, 256);
    Outcome::new(
        fit.grid.len() == 201 && fit.mae <= 0.05,
        format!("MAE {:.4} on {} grid points", fit.mae, fit.grid.len()),
    )
}

fn desk_run() -> Outcome {
    let ds = collect_dataset(Quality::Medium, 200, 0).unwrap();
    let dataset_mean = ds.meta.mean_episode_return().unwrap();
    let ((main, nw), took) = timed(|| {
        let sweep = |variant: Variant| -> Vec<f64> {
            (0..5u64)
                .map(|seed| {
                    let config = RunConfig {
                        seed,
                        ..RunConfig::desk().with_variant(variant)
                    };
                    run_ampl(config, &ds).unwrap().final_return()
                })
                .collect()
        };
        (sweep(Variant::Main), sweep(Variant::Nw))
    });
    let beat = main.iter().filter(|r| **r > dataset_mean).count();
    let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (main_avg, nw_avg) = (avg(&main), avg(&nw));
    Outcome::new(
        beat >= 4 && main_avg >= nw_avg && took <= Duration::from_secs(15 * 60),
        format!(
            "dataset mean {dataset_mean:.3}; main {main:.3?} (avg {main_avg:.3}, {beat}/5 above); nw {nw:.3?} (avg {nw_avg:.3}); {took:.0?}"
        ),
    )
}

fn schedule_config() -> RunConfig {
    let mut c = RunConfig::desk();
    c.epochs = 3;
    c.batch_size = 32;
    c.warm_epochs = 1;
    c.model_init_epochs = 2;
    c.model_retrain_period = 1;
    c.eval_episodes = 2;
    c.agent.hidden = vec![16, 16];
    c.dynamics.hidden = vec![16, 16];
    c.dynamics.steps_per_epoch = 50;
    c.miw.hidden = vec![16, 16];
    c.miw.batch_size = 64;
    c.miw.init_batch_size = 64;
    c.miw.steps = 50;
    c
}

fn schedule() -> Outcome {
    let ds = collect_dataset(Quality::Medium, 20, 0).unwrap();
    let config = schedule_config();
    let expected = ScheduleCounts::expected(&config);
    let out = run_ampl(config, &ds).unwrap();
    let got = out.trainer.counts;
    let counters = &out.trainer.agent.counters;
    Outcome::new(
        got == expected
            && got.critic_steps == 3000
            && got.actor_steps == 1500
            && got.rollout_generations == 12
            && counters.critic == 3000
            && counters.actor == 1500,
        format!(
            "critic {}, actor {}, rollouts {}, retrains {} (agent counters {}/{})",
            got.critic_steps, got.actor_steps, got.rollout_generations, got.retrains, counters.critic, counters.actor
        ),
    )
}

fn train_twice(dir: &Path) -> Vec<Vec<u8>> {
    let data = dir.join("data");
    collect_dataset(Quality::Medium, 20, 0).unwrap().save(&data).unwrap();
    let mut config = schedule_config();
    config.epochs = 2;
    config.iterations_per_epoch = 250;
    let config_path = dir.join("config.json");
    config.save(&config_path).unwrap();
    (0..2)
        .map(|i| {
            let out = dir.join(format!("run{i}"));
            let args = TrainArgs {
                config: Some(config_path.clone()),
                dataset: data.clone(),
                out: out.clone(),
                variant: None,
                desk_scale: false,
            };
            cmd_train(&args, &[]).unwrap();
            std::fs::read(out.join(METRICS_FILE)).unwrap()
        })
        .collect()
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let runs = train_twice(dir.path());
    let same = runs[0] == runs[1];
    Outcome::new(same && !runs[0].is_empty(), format!("metrics CSVs byte-identical: {same} ({} bytes)", runs[0].len()))
}

#[test]
fn acceptance_criteria() {
    let criteria: [(u32, fn() -> Outcome); 12] = [
        (1, return_gap),
        (2, kl_gaps),
        (3, occupancy),
        (4, contraction),
        (5, fixed_point_identity),
        (6, miw_recovery),
        (7, unit_weights),
        (8, gradients),
        (9, discriminator_ratio),
        (10, desk_run),
        (11, schedule),
        (12, determinism),
    ];
    let mut failed = Vec::new();
    for (n, check) in criteria {
        let outcome = check();
        let verdict = if outcome.passed { "PASS" } else { "FAIL" };
        println!("criterion {n:>2}: {verdict}  {}", outcome.detail);
        if !outcome.passed {
            failed.push(n);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
