use ampl::agent::{probe, Agent, AgentConfig, ActorObjective, CriticObjective, CriticValue, DiscriminatorObjective, GeneratorLoss, PolicyHead};
use ampl::buffer::Batch;
use ampl::dataset::{collect_dataset, OfflineDataset};
use ampl::dynamics::{DynamicsConfig, DynamicsEnsemble, TerminationRule, ValueFunction};
use ampl::env::{consts, Quality};
use ampl::miw::concat_columns;
use ampl::nn::{check_gradient, finite_difference, finite_difference_4th, max_relative_error, Activation, ParamVector};
use ampl::rng::{seeded, stream};
use ndarray::{Array1, Array2};
use rand::Rng;

fn dataset() -> OfflineDataset {
    collect_dataset(Quality::Medium, 20, 0).unwrap()
}

fn small_config() -> AgentConfig {
    AgentConfig {
        hidden: vec![8, 8],
        ..AgentConfig::desk()
    }
}

fn small_agent(ds: &OfflineDataset, config: AgentConfig, seed: u64) -> Agent {
    Agent::new(config, ds.state_dim, ds.action_dim, consts::MAX_ACTION, &mut seeded(seed)).unwrap()
}

fn small_model(ds: &OfflineDataset, seed: u64) -> DynamicsEnsemble {
    let cfg = DynamicsConfig {
        hidden: vec![8, 8],
        ..DynamicsConfig::desk()
    };
    DynamicsEnsemble::new(cfg, ds, TerminationRule::PointMassGoal, seed).unwrap()
}

/// Zeroes the output layer's weights and sets its bias so the network is constant.
fn set_constant_output(params: &mut ParamVector, bias: f64) {
    let segs = params.segments().to_vec();
    let (w, b) = (&segs[segs.len() - 2], &segs[segs.len() - 1]);
    let data = params.as_mut_slice();
    data[w.range()].iter_mut().for_each(|x| *x = 0.0);
    data[b.range()].iter_mut().for_each(|x| *x = bias);
}

fn perturb(params: &mut ParamVector, scale: f64, seed: u64) {
    let mut rng = stream(seed, 99);
    params.as_mut_slice().iter_mut().for_each(|p| *p += rng.gen_range(-scale..scale));
}

/// Same agent with tanh hidden activations everywhere so central differences
/// do not straddle ReLU kinks.
fn smooth(mut agent: Agent) -> Agent {
    agent.policy_net.spec = agent.policy_net.spec.clone().with_activation(Activation::Tanh);
    agent.critic_spec = agent.critic_spec.clone().with_activation(Activation::Tanh);
    agent.disc_spec = agent.disc_spec.clone().with_activation(Activation::Tanh);
    agent
}

fn batch(ds: &OfflineDataset, n: usize, seed: u64) -> Batch {
    Batch::sample(&ds.transitions, n, ds.state_dim, ds.action_dim, &mut seeded(seed))
}

fn constant_target_agent(ds: &OfflineDataset, q1: f64, q2: f64) -> Agent {
    let mut agent = small_agent(ds, small_config(), 0);
    set_constant_output(&mut agent.critic_targets[0], q1);
    set_constant_output(&mut agent.critic_targets[1], q2);
    agent
}

#[test]
fn conservative_target_examples() {
    let ds = dataset();
    let mut b = batch(&ds, 6, 1);
    b.r = vec![0.0, 0.0, 0.5, 0.5, -0.2, 0.0];
    b.done = vec![false, false, true, false, true, false];

    let agent = constant_target_agent(&ds, 1.0, 3.0);
    let y = agent.conservative_target(&b, 0.99, &mut seeded(2));
    assert!((y[0] - 1.485).abs() < 1e-12, "{y:?}");
    assert_eq!(y[2], 0.5);
    assert!((y[3] - (0.5 + 1.485)).abs() < 1e-12);
    assert_eq!(y[4], -0.2);

    // Swapping which critic is larger must not matter.
    let swapped = constant_target_agent(&ds, 3.0, 1.0);
    assert_eq!(swapped.conservative_target(&b, 0.99, &mut seeded(2)), y);

    let big = constant_target_agent(&ds, 2500.0, 2500.0);
    let y = big.conservative_target(&b, 0.99, &mut seeded(2));
    assert_eq!(y, b.r);
    let neg = constant_target_agent(&ds, -2500.0, -1500.0);
    let y = neg.conservative_target(&b, 0.99, &mut seeded(2));
    assert_eq!(y, b.r);
}

#[test]
fn critic_matching_targets_is_left_unchanged() {
    let ds = dataset();
    let mut agent = small_agent(&ds, small_config(), 3);
    let mut b = batch(&ds, 32, 4);
    b.done = vec![true; 32];
    b.r = vec![0.7; 32];
    for j in 0..2 {
        set_constant_output(&mut agent.critics[j], 0.7);
    }
    let before = agent.critics.clone();
    let loss = agent.critic_update(&b, 0.99, &mut seeded(5)).unwrap();
    assert_eq!(loss, 0.0);
    assert_eq!(agent.critics, before);
    assert_eq!(agent.counters.critic, 1);
}

#[test]
fn critic_step_is_norm_clipped() {
    let ds = dataset();
    let mut agent = small_agent(&ds, small_config(), 3);
    let mut b = batch(&ds, 64, 4);
    b.done = vec![true; 64];
    b.r = vec![1e4; 64];
    let x = concat_columns(b.s.view(), b.a.view());
    let y = Array1::from(b.r.clone());
    let obj = CriticObjective {
        spec: &agent.critic_spec,
        inputs: x.view(),
        targets: y.view(),
        delta: 500.0,
    };
    let (_, g) = ampl::nn::Objective::value_and_grad(&obj, agent.critics[0].as_slice());
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(norm > 10.0, "raw gradient norm {norm}");
    let mut clipped = g.clone();
    let pre = ampl::nn::clip_grad_norm(&mut clipped, 0.1);
    assert!((pre - norm).abs() < 1e-9 * norm);
    assert!((clipped.iter().map(|v| v * v).sum::<f64>().sqrt() - 0.1).abs() < 1e-12);
    assert!(agent.critic_update(&b, 0.99, &mut seeded(5)).unwrap() > 1e5);
}

#[test]
fn critic_gradient_matches_finite_differences() {
    let ds = dataset();
    for seed in 0..5 {
        let mut agent = smooth(small_agent(&ds, small_config(), seed));
        perturb(&mut agent.critics[0], 0.3, seed);
        let b = batch(&ds, 24, seed);
        let x = concat_columns(b.s.view(), b.a.view());
        let y: Array1<f64> = (0..24).map(|i| (i as f64 * 0.7).sin() * 3.0).collect();
        for delta in [500.0, 0.5] {
            let obj = CriticObjective {
                spec: &agent.critic_spec,
                inputs: x.view(),
                targets: y.view(),
                delta,
            };
            let report = check_gradient(&obj, agent.critics[0].as_slice());
            assert!(report.max_rel_error < 1e-4, "seed {seed} delta {delta}: {report:?}");
        }
    }
}

#[test]
fn discriminator_gradient_matches_finite_differences() {
    let ds = dataset();
    for seed in 0..5 {
        let mut agent = smooth(small_agent(&ds, small_config(), seed));
        perturb(&mut agent.discriminator, 0.3, seed);
        let b = batch(&ds, 24, seed);
        let x = concat_columns(b.s.view(), b.a.view());
        let mut rng = seeded(seed);
        let labels: Vec<f64> = (0..24).map(|i| if i < 12 { rng.gen_range(0.8..1.0) } else { 0.0 }).collect();
        let obj = DiscriminatorObjective {
            spec: &agent.disc_spec,
            inputs: x.view(),
            labels: &labels,
            clamp: 1e-6,
        };
        let report = check_gradient(&obj, agent.discriminator.as_slice());
        assert!(report.max_rel_error < 1e-4, "seed {seed}: {report:?}");
    }
}

#[test]
fn discriminator_optimum_for_singleton_supports() {
    // One true and one fake point at the same location: with hard labels the
    // optimum sits at n_true / (n_true + n_fake).
    let ds = dataset();
    let cfg = AgentConfig {
        disc_lr: 1e-2,
        ..small_config()
    };
    let mut agent = small_agent(&ds, cfg, 0);
    let s = Array2::from_elem((1, ds.state_dim), 0.3);
    let a = Array2::from_elem((1, ds.action_dim), -0.2);
    for (n_true, n_fake) in [(1usize, 1usize), (3, 1), (1, 4)] {
        let ts = Array2::from_shape_fn((n_true, ds.state_dim), |(_, j)| s[(0, j)]);
        let ta = Array2::from_shape_fn((n_true, ds.action_dim), |(_, j)| a[(0, j)]);
        let fake = ampl::agent::FakeBatch {
            s: Array2::from_shape_fn((n_fake, ds.state_dim), |(_, j)| s[(0, j)]),
            a: Array2::from_shape_fn((n_fake, ds.action_dim), |(_, j)| a[(0, j)]),
            source: vec![0; n_fake],
        };
        let mut labels = vec![1.0; n_true];
        labels.extend(vec![0.0; n_fake]);
        for _ in 0..3000 {
            agent.discriminator_step(ts.view(), ta.view(), &fake, &labels).unwrap();
        }
        let d = agent.discriminate(s.view(), a.view())[0];
        let want = n_true as f64 / (n_true + n_fake) as f64;
        assert!((d - want).abs() < 1e-3, "({n_true}, {n_fake}): {d} vs {want}");
    }
}

#[test]
fn identical_batches_give_half_and_two_log_two() {
    let ds = dataset();
    let agent = small_agent(&ds, small_config(), 0);
    let mut disc = agent.discriminator.clone();
    set_constant_output(&mut disc, 0.0);
    let b = batch(&ds, 16, 1);
    let x = concat_columns(b.s.view(), b.a.view());
    let xx = ndarray::concatenate(ndarray::Axis(0), &[x.view(), x.view()]).unwrap();
    let mut labels = vec![1.0; 16];
    labels.extend(vec![0.0; 16]);
    let obj = DiscriminatorObjective {
        spec: &agent.disc_spec,
        inputs: xx.view(),
        labels: &labels,
        clamp: 1e-6,
    };
    let (loss, g) = ampl::nn::Objective::value_and_grad(&obj, disc.as_slice());
    // Mean over 2n rows of ln 2 equals 2 ln 2 per true/fake pair.
    assert!((2.0 * loss - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    let out_bias = disc.segments().last().unwrap().range();
    assert!(g[out_bias].iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn discriminator_recovers_density_ratio() {
    let fit = probe::fit(0, 4000, 256);
    println!("density-ratio MAE {:.4}", fit.mae);
    assert_eq!(fit.grid.len(), 201);
    assert!(fit.mae <= 0.05);
}

#[test]
fn fake_batch_sizes_follow_terminations() {
    let ds = dataset();
    let agent = small_agent(&ds, small_config(), 0);
    let states = batch(&ds, 40, 2).s;
    let mut model = small_model(&ds, 0);
    model.log_std_override = Some(6.0);
    let fb = agent.build_fake_batch(states.view(), &model, &mut seeded(3));
    assert_eq!(fb.len(), 40);

    model.log_std_override = Some(-20.0);
    let far = Array2::from_shape_fn((40, ds.state_dim), |(i, j)| if j < 2 { 0.5 + 0.01 * i as f64 } else { 0.0 });
    let fb = agent.build_fake_batch(far.view(), &model, &mut seeded(3));
    assert!(fb.len() > 40 && fb.len() <= 80);
    assert!(fb.source[40..].windows(2).all(|w| w[0] < w[1]));
    assert!(fb.a.iter().all(|x| x.abs() <= consts::MAX_ACTION));
    assert!(fb.s.iter().all(|x| x.is_finite()));
    assert_eq!(&fb.source[..40], &(0..40).collect::<Vec<_>>()[..]);
}

fn actor_objective<'a>(agent: &'a Agent, model: &'a DynamicsEnsemble, states: &'a Array2<f64>, weights: Option<&'a [f64]>, with_q: bool, seed: u64) -> ActorObjective<'a> {
    agent.actor_objective(states.view(), model, weights, with_q, &mut seeded(seed)).unwrap()
}

#[test]
fn actor_gradient_matches_finite_differences() {
    let ds = dataset();
    let variants: [(PolicyHead, GeneratorLoss, bool); 4] = [
        (PolicyHead::Implicit, GeneratorLoss::NonSaturating, false),
        (PolicyHead::Implicit, GeneratorLoss::Saturating, false),
        (PolicyHead::Implicit, GeneratorLoss::NonSaturating, true),
        (PolicyHead::Gaussian, GeneratorLoss::NonSaturating, false),
    ];
    for (head, gen, wpr) in variants {
        for seed in 0..5 {
            let cfg = AgentConfig {
                policy_head: head,
                generator_loss: gen,
                ..small_config()
            };
            let mut agent = smooth(small_agent(&ds, cfg, seed));
            perturb(&mut agent.policy, 0.3, seed);
            perturb(&mut agent.discriminator, 0.3, seed + 10);
            agent.q_avg = 2.0;
            let mut model = small_model(&ds, seed);
            model.spec = model.spec.clone().with_activation(Activation::Tanh);
            let states = batch(&ds, 12, seed).s;
            let w: Vec<f64> = (0..12).map(|i| 0.3 + (i as f64 * 0.9).cos().abs()).collect();
            let obj = actor_objective(&agent, &model, &states, wpr.then_some(w.as_slice()), true, seed);
            let report = check_gradient(&obj, agent.policy.as_slice());
            assert!(report.max_rel_error < 1e-4, "{head:?} {gen:?} wpr {wpr} seed {seed}: {report:?}");
        }
    }
}

#[test]
fn stop_gradient_flag_drops_the_model_path() {
    let ds = dataset();
    let mut on = smooth(small_agent(&ds, small_config(), 1));
    on.q_avg = 1.0;
    let mut off = on.clone();
    off.config.model_gradient = false;
    let model = small_model(&ds, 1);
    let states = batch(&ds, 12, 1).s;
    let g_on = ampl::nn::Objective::value_and_grad(&actor_objective(&on, &model, &states, None, true, 4), on.policy.as_slice());
    let g_off = ampl::nn::Objective::value_and_grad(&actor_objective(&off, &model, &states, None, true, 4), off.policy.as_slice());
    assert_eq!(g_on.0, g_off.0);
    assert!(g_on.1.iter().zip(&g_off.1).any(|(a, b)| (a - b).abs() > 1e-12));
}

#[test]
fn half_discriminator_leaves_only_the_critic_gradient() {
    let ds = dataset();
    for seed in 0..3 {
        let mut agent = smooth(small_agent(&ds, small_config(), seed));
        set_constant_output(&mut agent.discriminator, 0.0);
        agent.q_avg = 5.0;
        let model = small_model(&ds, seed);
        let states = batch(&ds, 16, seed).s;
        let obj = actor_objective(&agent, &model, &states, None, true, seed);
        let (loss, grad) = ampl::nn::Objective::value_and_grad(&obj, agent.policy.as_slice());
        assert!((loss - (obj_q_term(&agent, &states, &obj.z, agent.policy.as_slice()) + std::f64::consts::LN_2)).abs() < 1e-12);
        let numeric = finite_difference(|p| obj_q_term(&agent, &states, &obj.z, p), agent.policy.as_slice(), 1e-6);
        assert!(max_relative_error(&grad, &numeric, 1e-6) < 1e-4, "seed {seed}");

        let gen_only = actor_objective(&agent, &model, &states, None, false, seed);
        let (_, g) = ampl::nn::Objective::value_and_grad(&gen_only, agent.policy.as_slice());
        assert!(g.iter().all(|v| *v == 0.0));
    }
}

fn obj_q_term(agent: &Agent, states: &Array2<f64>, z: &Array2<f64>, params: &[f64]) -> f64 {
    let a = agent.policy_net.forward(params, states.view(), z.view()).actions;
    -agent.lambda() * agent.q_min(states.view(), a.view()).mean().unwrap()
}

#[test]
fn actor_rejects_nonpositive_q_avg() {
    let ds = dataset();
    let mut agent = small_agent(&ds, small_config(), 0);
    let model = small_model(&ds, 0);
    let states = batch(&ds, 8, 0).s;
    for q in [0.0, -1.0] {
        agent.q_avg = q;
        assert!(agent.actor_update(states.view(), &model, None, true, &mut seeded(0)).is_err());
    }
    // The generator-only warm-start update does not need q_avg.
    assert!(agent.actor_update(states.view(), &model, None, false, &mut seeded(0)).is_ok());
}

#[test]
fn post_step_soft_updates_and_q_avg_average() {
    let ds = dataset();
    let mut agent = small_agent(&ds, small_config(), 0);
    perturb(&mut agent.policy, 0.1, 1);
    perturb(&mut agent.critics[0], 0.1, 2);
    agent.q_avg = 3.0;
    let states = batch(&ds, 32, 0).s;
    let (p0, t0) = (agent.policy.clone(), agent.policy_target.clone());
    let (c0, ct0) = (agent.critics[0].clone(), agent.critic_targets[0].clone());
    let fresh = agent.mean_abs_q(states.view(), &mut seeded(7));
    agent.post_step_updates(states.view(), &mut seeded(7)).unwrap();
    for i in 0..p0.len() {
        let want = 0.005 * p0.as_slice()[i] + 0.995 * t0.as_slice()[i];
        assert!((agent.policy_target.as_slice()[i] - want).abs() < 1e-15);
    }
    for i in 0..c0.len() {
        let want = 0.005 * c0.as_slice()[i] + 0.995 * ct0.as_slice()[i];
        assert!((agent.critic_targets[0].as_slice()[i] - want).abs() < 1e-15);
    }
    assert!((agent.q_avg - (0.005 * fresh + 0.995 * 3.0)).abs() < 1e-12);
}

#[test]
fn warm_start_separates_real_from_generated() {
    let ds = collect_dataset(Quality::Medium, 40, 0).unwrap();
    let mut agent = small_agent(&ds, AgentConfig { hidden: vec![32, 32], ..AgentConfig::desk() }, 0);
    let mut model = DynamicsEnsemble::new(DynamicsConfig::desk(), &ds, TerminationRule::PointMassGoal, 0).unwrap();
    let data = model.training_data(&ds, 0);
    model.train_mle(&data, 3, 0).unwrap();

    let untouched = agent.clone();
    agent.warm_start(&ds, &model, 0, 64, &mut seeded(1)).unwrap();
    assert_eq!(agent.policy, untouched.policy);
    assert_eq!(agent.discriminator, untouched.discriminator);

    agent.warm_start(&ds, &model, 600, 128, &mut seeded(1)).unwrap();
    assert_eq!(agent.critics, untouched.critics);
    assert_eq!(agent.critic_targets, untouched.critic_targets);
    assert_eq!(agent.counters.critic, 0);
    assert_eq!(agent.counters.actor, 0);
    assert_eq!(agent.counters.warm_actor, 300);
    assert_eq!(agent.policy_target, agent.policy);

    let real = batch(&ds, 512, 9);
    let fake = agent.build_fake_batch(batch(&ds, 512, 10).s.view(), &model, &mut seeded(11));
    let d_real = agent.discriminate(real.s.view(), real.a.view()).mean().unwrap();
    let d_fake = agent.discriminate(fake.s.view(), fake.a.view()).mean().unwrap();
    println!("mean D: dataset {d_real:.3} generated {d_fake:.3}");
    assert!(d_real > d_fake);
}

#[test]
fn critic_value_gradient_matches_finite_differences() {
    let ds = dataset();
    let mut agent = smooth(small_agent(&ds, small_config(), 2));
    perturb(&mut agent.critics[0], 0.3, 5);
    let states = batch(&ds, 5, 3).s;
    let v = CriticValue { agent: &agent };
    let (vals, grad) = v.values_and_grad(states.view());
    assert_eq!(vals, v.values(states.view()));
    for i in 0..states.nrows() {
        let row = states.row(i).to_vec();
        let f = |x: &[f64]| {
            let m = Array2::from_shape_vec((1, x.len()), x.to_vec()).unwrap();
            v.values(m.view())[0]
        };
        let numeric = finite_difference_4th(f, &row, 1e-4);
        assert!(max_relative_error(grad.row(i).as_slice().unwrap(), &numeric, 1e-6) < 1e-4);
    }
}

#[test]
fn checkpoint_round_trip() {
    let ds = dataset();
    let mut agent = small_agent(&ds, small_config(), 4);
    agent.q_avg = 1.25;
    agent.counters.critic = 17;
    agent.counters.actor = 8;
    let dir = tempfile::tempdir().unwrap();
    agent.save(dir.path()).unwrap();
    let back = Agent::load(dir.path()).unwrap();
    assert_eq!(back.policy, agent.policy);
    assert_eq!(back.policy_target, agent.policy_target);
    assert_eq!(back.critics, agent.critics);
    assert_eq!(back.critic_targets, agent.critic_targets);
    assert_eq!(back.discriminator, agent.discriminator);
    assert_eq!(back.q_avg, 1.25);
    assert_eq!(back.counters, agent.counters);
    assert_eq!(back.config, agent.config);
}
