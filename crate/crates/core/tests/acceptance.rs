//! Acceptance suite. Prints one PASS/FAIL line per criterion and fails if any
//! criterion fails. Run with `cargo test -p workbench-core --test acceptance -- --nocapture`.

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use workbench_core::agents::{perturb_action, record_episode, HumanProfile, SimulatedHuman};
use workbench_core::assist::{LatentTracker, SharedPilot, SharedTask};
use workbench_core::encoder::{build_dataset, majority_baseline, train_cvae, CvaeConfig, CvaeModel, HistoryWindow, ZMode};
use workbench_core::eval::{curve_metrics, curve_metrics_by_steps, run_test_suite, trajectory_log_prob, EpisodeStats, SuiteConfig, TestTable};
use workbench_core::learn::{
    greedy_rollout, ppo_loss, ppo_train, Clock, FixedClock, LossCoefficients, PlanningTask, PolicyPilot, PpoSample, SprMeter,
    SystemClock, TrainerConfig, TrainingCurve,
};
use workbench_core::nn::MlpPolicy;
use workbench_core::oracle::{oracle_optimal_return, Oracle, DEFAULT_ORACLE_CAP};
use workbench_core::region::{
    compute_spaces, sample_region, ActionRP, DoneReason, Event, GridConfig, Position, RegionEnv, RegionGrid, RewardTable,
};
use workbench_core::shared::{ArbitrationMode, HumanActionToken, ObsLayout, RewardWeights, SharedEnv};
use workbench_core::{Cvae, Policy};

const PRETRAIN_STEPS: usize = 50_000;
const SHARED_STEPS: usize = 200_000;
const D_Z1: usize = 5;

fn desk_region() -> RegionGrid {
    RegionGrid::empty(6, 2, 4).with_objects(&[((2, 0), 2), ((2, 1), 1), ((4, 0), 3), ((5, 1), 1)])
}

fn desk_grid() -> GridConfig {
    GridConfig {
        n_c: 6,
        n_r: 2,
        ..GridConfig::default()
    }
}

fn robot_layout() -> ObsLayout {
    ObsLayout::new(6, 2, 4, 0)
}

fn shared_layout() -> ObsLayout {
    ObsLayout::new(6, 2, 4, D_Z1)
}

struct Criterion {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn check(name: &'static str, f: impl FnOnce() -> (bool, String)) -> Criterion {
    let t = Instant::now();
    let (pass, detail) = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panicked: {msg}"))
        }
    };
    let line = format!(
        "[{}] {name}: {detail} ({:.1}s)",
        if pass { "PASS" } else { "FAIL" },
        t.elapsed().as_secs_f64()
    );
    println!("{line}");
    Criterion { name, pass, detail }
}

/// Shared state between criteria: Stage I policies by seed and the encoder.
#[derive(Default)]
struct Artifacts {
    pretrained: HashMap<u64, (Policy, TrainingCurve)>,
    cvae: Option<Cvae>,
}

impl Artifacts {
    fn pretrained(&mut self, seed: u64) -> (Policy, TrainingCurve) {
        self.pretrained
            .entry(seed)
            .or_insert_with(|| {
                let mut p = Policy::new(robot_layout().robot_dim(), &[64, 64], &mut ChaCha8Rng::seed_from_u64(seed));
                let tc = TrainerConfig {
                    total_timesteps: PRETRAIN_STEPS,
                    seed,
                    ..TrainerConfig::default()
                };
                let curve = ppo_train(
                    |_| PlanningTask::new(desk_grid(), RewardTable::default(), Some(desk_region()), seed).unwrap(),
                    &mut p,
                    &tc,
                    &mut SprMeter::start(0.0),
                    &SystemClock::new(),
                )
                .unwrap();
                (p, curve)
            })
            .clone()
    }

    fn tracker(&mut self, seed: u64) -> LatentTracker<f32> {
        let (surrogate, _) = self.pretrained(0);
        let model = self.cvae.clone().expect("encoder trained");
        let pilot = PolicyPilot::new(surrogate, robot_layout()).unwrap();
        LatentTracker::new(shared_layout(), model, Box::new(pilot), ZMode::Mean, seed).unwrap()
    }
}

fn oracle_human(profile: HumanProfile) -> SimulatedHuman<Oracle> {
    SimulatedHuman::new(profile, Oracle::new(RewardTable::default(), DEFAULT_ORACLE_CAP))
}

fn train_shared(
    policy: &mut Policy,
    human: &HumanProfile,
    weights: RewardWeights,
    tracker: LatentTracker<f32>,
    seed: u64,
) -> TrainingCurve {
    let tc = TrainerConfig {
        total_timesteps: SHARED_STEPS,
        seed,
        ..TrainerConfig::shared_defaults()
    };
    let mut tracker = Some(tracker);
    ppo_train(
        |_| {
            SharedTask::new(
                desk_grid(),
                RewardTable::default(),
                Some(desk_region()),
                ArbitrationMode::Shaping,
                weights,
                oracle_human(human.with_seed(seed)),
                tracker.take().expect("one environment"),
                seed,
            )
            .unwrap()
        },
        policy,
        &tc,
        &mut SprMeter::start(0.0),
        &SystemClock::new(),
    )
    .unwrap()
}

fn test_suite(policy: &Policy, tracker: LatentTracker<f32>, profile: &HumanProfile, label: &str) -> TestTable {
    let mut pilot = SharedPilot::new(policy.clone(), tracker).unwrap();
    let suite = SuiteConfig {
        n_tests: 10,
        seed: 1000,
        weights: RewardWeights::default(),
        mode: ArbitrationMode::Shaping,
    };
    run_test_suite(&mut pilot, profile, &desk_region(), &desk_grid(), &RewardTable::default(), &suite, label)
        .unwrap()
        .0
}

fn reward_table() -> (bool, String) {
    let r = RewardTable::default();
    let mut got = Vec::new();

    let mut e = RegionEnv::new(RegionGrid::empty(8, 3, 4).with_objects(&[((4, 2), 1)]), r.clone(), 1000);
    got.push(("step", e.step(ActionRP::Right).unwrap().reward, -2.0));

    for n in 1..=4u32 {
        let mut e = RegionEnv::new(RegionGrid::empty(8, 3, 4).with_objects(&[((1, 0), n)]), r.clone(), 1000);
        let out = e.step(ActionRP::Right).unwrap();
        assert_eq!(out.events, vec![Event::Cut(n)]);
        got.push(("cut", out.reward, 20.0 * n as f64));
    }

    let mut e = RegionEnv::new(RegionGrid::empty(4, 1, 4).with_objects(&[((1, 0), 1)]), r.clone(), 1000);
    e.step(ActionRP::Right).unwrap();
    let out = e.step(ActionRP::Left).unwrap();
    assert_eq!(out.done_reason, DoneReason::Goal);
    // store 20 + goal - carry 5
    got.push(("goal", out.reward - 20.0 + 5.0, 400.0));

    let g = RegionGrid::empty(4, 3, 4).with_objects(&[((1, 0), 1), ((1, 1), 1)]);
    let mut e = RegionEnv::with_state(g, r.clone(), 1000, Position::new(0, 1), 0);
    let out = e.step(ActionRP::Right).unwrap();
    assert_eq!(out.events, vec![Event::Collision]);
    got.push(("collision", out.reward + 2.0, -20.0));

    let mut e = RegionEnv::new(RegionGrid::empty(4, 3, 4).with_objects(&[((2, 2), 1)]), r.clone(), 1000);
    let out = e.step(ActionRP::Front).unwrap();
    assert_eq!(out.events, vec![Event::OutOfBounds]);
    got.push(("out_of_bounds", out.reward + 2.0, -20.0));

    for s2 in 1..=4u32 {
        let g = RegionGrid::empty(8, 3, 4).with_objects(&[((5, 0), 1)]);
        let mut e = RegionEnv::with_state(g, r.clone(), 1000, Position::new(2, 0), s2);
        got.push(("carry", e.step(ActionRP::Right).unwrap().reward + 2.0, -5.0 * s2 as f64));
    }

    let g = RegionGrid::empty(3, 3, 4).with_objects(&[((0, 0), 1), ((0, 1), 1), ((1, 0), 1), ((1, 1), 1), ((2, 0), 1), ((2, 1), 1)]);
    let mut e = RegionEnv::with_state(g, r.clone(), 1000, Position::new(1, 2), 0);
    let out = e.step(ActionRP::Back).unwrap();
    assert_eq!(out.done_reason, DoneReason::Trapped);
    got.push(("trapped", out.reward + 2.0 + 20.0, -400.0));

    let mut e = RegionEnv::new(RegionGrid::empty(4, 2, 4).with_objects(&[((2, 1), 1)]), r, 1);
    let out = e.step(ActionRP::Back).unwrap();
    assert_eq!(out.done_reason, DoneReason::StepLimit);
    got.push(("step_limit", out.reward + 2.0, -400.0));

    let bad: Vec<_> = got.iter().filter(|(_, a, b)| a != b).collect();
    (bad.is_empty(), format!("{} scripted transitions, mismatches {:?}", got.len(), bad))
}

fn space_partition() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut violations = 0;
    let n = 10_000;
    for _ in 0..n {
        let cfg = GridConfig {
            n_c: rng.random_range(3..=12),
            n_r: rng.random_range(1..=4),
            occupancy: rng.random_range(0.1..=1.0),
            ..GridConfig::default()
        };
        let g = sample_region(&cfg, &mut rng).unwrap();
        let payload = rng.random_range(0..=g.p_max);
        let s = compute_spaces(&g, payload);
        let objects: std::collections::BTreeSet<usize> = (0..g.cells()).filter(|&c| g.objects[c] > 0).collect();
        let disjoint = s.subgoals.is_disjoint(&s.obstacles);
        let union: std::collections::BTreeSet<usize> = s.subgoals.union(&s.obstacles).copied().collect();
        let mut ok = disjoint && union == objects && s.objects == objects;
        // Subgoal of a column: its innermost object cell.
        for col in 0..g.n_c {
            let first = (0..g.n_r).map(|r| col * g.n_r + r).find(|c| objects.contains(c));
            for row in 0..g.n_r {
                let c = col * g.n_r + row;
                ok &= s.subgoals.contains(&c) == (Some(c) == first);
            }
        }
        let storage: std::collections::BTreeSet<usize> = [g.storage_cell].into();
        let expected = if payload == g.p_max {
            storage
        } else if payload > 0 {
            s.subgoals.union(&storage).copied().collect()
        } else {
            s.subgoals.clone()
        };
        ok &= s.augmented_subgoals == expected;
        violations += usize::from(!ok);
    }
    (violations == 0, format!("{n} grids, {violations} violations"))
}

fn oracle_equivalence() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut replay_ok = 0;
    let mut within = 0;
    for i in 0..20u64 {
        let n_c = rng.random_range(3..=6);
        let n_r = rng.random_range(1..=2);
        let mut g = RegionGrid::empty(n_c, n_r, 4);
        for _ in 0..rng.random_range(1..=4) {
            let c = rng.random_range(1..g.cells());
            g.objects[c] += 1;
        }
        let cfg = GridConfig {
            n_c,
            n_r,
            ..GridConfig::default()
        };
        let (best, plan) = oracle_optimal_return(&g, DEFAULT_ORACLE_CAP).unwrap();
        let mut env = RegionEnv::from_config(g.clone(), &cfg, RewardTable::default());
        let replayed: f64 = plan.iter().map(|&a| env.step(a).unwrap().reward).sum();
        replay_ok += usize::from(replayed == best && env.done_reason() == DoneReason::Goal);

        let layout = ObsLayout::new(n_c, n_r, 4, 0);
        let mut policy = MlpPolicy::<f32>::new(layout.robot_dim(), &[64, 64], &mut ChaCha8Rng::seed_from_u64(i));
        let tc = TrainerConfig {
            total_timesteps: 100_000,
            seed: i,
            ..TrainerConfig::default()
        };
        ppo_train(
            |_| PlanningTask::new(cfg.clone(), RewardTable::default(), Some(g.clone()), 0).unwrap(),
            &mut policy,
            &tc,
            &mut SprMeter::start(0.0),
            &SystemClock::new(),
        )
        .unwrap();
        let mut pilot = PolicyPilot::new(policy, layout).unwrap();
        let (ret, _) = greedy_rollout(&mut pilot, &g, &RewardTable::default(), cfg.step_limit()).unwrap();
        within += usize::from(ret >= 0.9 * best);
    }
    (
        replay_ok == 20 && within >= 16,
        format!("oracle replay exact on {replay_ok}/20, PPO >= 90% of oracle on {within}/20 (need 16)"),
    )
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn gradient_checks() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let h = 1e-5;
    let mut checked = 0;
    let mut failures = 0;
    let mut worst: f64 = 0.0;
    let coefs = LossCoefficients {
        clip_epsilon: 0.2,
        ent_coef: 0.01,
        vf_coef: 0.5,
    };
    for _ in 0..10 {
        let dim = rng.random_range(3..8);
        let mut policy = MlpPolicy::<f64>::new(dim, &[rng.random_range(3..8), rng.random_range(3..8)], &mut rng);
        let batch: Vec<PpoSample<f64>> = (0..6)
            .map(|_| {
                let obs: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                let out = policy.forward(&obs).unwrap();
                let action = rng.random_range(0..4);
                PpoSample {
                    old_log_prob: out.probs[action].ln() + rng.random_range(-0.1..0.1),
                    obs,
                    action,
                    advantage: rng.random_range(-1.0..1.0),
                    ret: rng.random_range(-1.0..1.0),
                }
            })
            .collect();
        let loss = ppo_loss(&policy, &batch, coefs).unwrap();
        for (net, grads) in [(0, loss.actor_grad.clone()), (1, loss.critic_grad.clone())] {
            for (i, &g) in grads.iter().enumerate() {
                let mut at = |delta: f64| {
                    let params = if net == 0 { policy.actor.params_mut() } else { policy.critic.params_mut() };
                    params[i] += delta;
                    let v = ppo_loss(&policy, &batch, coefs).unwrap().total;
                    let params = if net == 0 { policy.actor.params_mut() } else { policy.critic.params_mut() };
                    params[i] -= delta;
                    v
                };
                let num = (at(h) - at(-h)) / (2.0 * h);
                let e = rel_err(g, num);
                worst = worst.max(e);
                checked += 1;
                failures += usize::from(e > 1e-4);
            }
        }
    }
    for _ in 0..10 {
        let n_h = rng.random_range(1..=3);
        let state_dim = rng.random_range(3..7);
        let d_z = rng.random_range(1..=4);
        let mut model = CvaeModel::<f64>::new(n_h, state_dim, rng.random_range(3..8), d_z, &mut rng);
        let window = HistoryWindow {
            states: (0..n_h).map(|_| (0..state_dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect(),
            actions: (0..n_h).map(|_| HumanActionToken::new(rng.random_range(-1..4)).unwrap()).collect(),
            errors: (0..n_h).map(|_| rng.random_range(0..4)).collect(),
        };
        let eps: Vec<f64> = (0..d_z).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = model.loss_with_eps(&window, &eps).unwrap();
        for (net, grads) in [(0, loss.encoder_grad.clone()), (1, loss.decoder_grad.clone())] {
            for (i, &g) in grads.iter().enumerate() {
                let mut at = |delta: f64| {
                    let params = if net == 0 { model.encoder.params_mut() } else { model.decoder.params_mut() };
                    params[i] += delta;
                    let v = model.loss_with_eps(&window, &eps).unwrap().total;
                    let params = if net == 0 { model.encoder.params_mut() } else { model.decoder.params_mut() };
                    params[i] -= delta;
                    v
                };
                let num = (at(h) - at(-h)) / (2.0 * h);
                let e = rel_err(g, num);
                worst = worst.max(e);
                checked += 1;
                failures += usize::from(e > 1e-4);
            }
        }
    }
    (failures == 0, format!("{checked} parameters, {failures} failures, worst relative error {worst:.2e}"))
}

fn perturbation_law() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 10_000;
    let mut counts = [0f64; 4];
    for _ in 0..n {
        counts[perturb_action(ActionRP::Front, &mut rng).index()] += 1.0;
    }
    let expected = n as f64 / 4.0;
    let stat: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new(3.0).unwrap().cdf(stat);

    let region = RegionEnv::from_config(desk_region(), &desk_grid(), RewardTable::default());
    let mut env = SharedEnv::new(region, ArbitrationMode::Override { p_override: 0.8 }, RewardWeights::default(), 11).unwrap();
    let mut human_executed = 0;
    for i in 0..n {
        let a_a = ActionRP::ALL[i % 4];
        let a_h = ActionRP::ALL[(i + 1 + i % 3) % 4];
        human_executed += usize::from(env.arbitrate(a_a, HumanActionToken::from(a_h)) == a_h);
    }
    let freq = human_executed as f64 / n as f64;
    (
        p > 0.01 && (freq - 0.8).abs() <= 0.02,
        format!("perturbation counts {counts:?}, chi-square p = {p:.3}; override frequency {freq:.4}"),
    )
}

fn table_recomputation() -> (bool, String) {
    let cases: [(&[i64], &[i64], (usize, f64, usize)); 3] = [
        (
            &[1, 2, 0, 3, 2, 3, 0, 0, 2, 1, 1, 3, 2, 1, 1, 0, 0, 3, 1, 1, 1, 2, 3, 0, 0, 0],
            &[1, 2, -1, 1, 3, -1, 0, -1, -1, -1, 2, 1, 2, 3, 2, -1, -1, -1, 1, 1, 2, 0, 1, 0, 1, 0],
            (18, 69.2, 8),
        ),
        (
            &[1, 2, 0, 3, 2, 3, 2, 0, 0, 1, 1, 3, 1, 1, 2, 0, 0, 3, 1, 1, 1, 2, 3, 0, 0, 0],
            &[2, 2, -1, 3, 3, -1, 2, 2, 0, 1, 1, 3, 1, 1, 2, -1, -1, -1, 1, 3, 3, 3, 3, 0, 0, 2],
            (21, 80.8, 14),
        ),
        (
            &[1, 2, 0, 3, 2, 3, 2, 0, 0, 1, 1, 3, 1, 1, 2, 0, 0, 3, 0, 0, 0, 2, 0, 0, 0, 3],
            &[2, 2, -1, 3, 2, -1, 2, 0, 0, 1, 1, 3, 1, 1, 2, -1, -1, -1, 0, 0, 0, 2, 0, 0, 0, 3],
            (21, 80.8, 20),
        ),
    ];
    let got: Vec<(usize, f64, usize)> = cases
        .iter()
        .map(|(aa, ha, _)| {
            let s = EpisodeStats::from_sequences(aa, ha, 0.0, true).unwrap();
            (s.ha_interaction, s.ha_percent, s.aa_followed_ha)
        })
        .collect();
    let want: Vec<_> = cases.iter().map(|c| c.2).collect();
    (got == want, format!("got {got:?}"))
}

fn hypothesis_one(art: &mut Artifacts) -> (bool, String) {
    let layout = shared_layout();
    let mut policy = Policy::new(layout.shared_dim(), &[64, 64], &mut ChaCha8Rng::seed_from_u64(0));
    let expert = HumanProfile::expert(0);
    let curve = train_shared(&mut policy, &expert, RewardWeights::default(), LatentTracker::zero(layout), 0);
    let m = curve_metrics_by_steps(&curve, 0.1).unwrap();
    let by_episode = curve_metrics(&curve, 0.1).unwrap().improvement_fraction();
    let table = test_suite(&policy, LatentTracker::zero(layout), &expert, "expert");
    let goals = table.rows.iter().filter(|r| r.success == 1).count();
    art.pretrained(0);
    (
        m.improvement >= 0.5 * m.range && goals >= 9,
        format!(
            "improvement over first/last 10% of steps {:.1} = {:.2} of range {:.1} (need 0.50; {by_episode:.2} over first/last 10% of episodes), goals {goals}/10 (need 9), {} SPR readings",
            m.improvement,
            m.improvement_fraction(),
            m.range,
            curve.spr.len()
        ),
    )
}

fn hypothesis_four(art: &mut Artifacts) -> (bool, String) {
    let layout = shared_layout();
    let noisy = HumanProfile::noisy(0.5, 0);
    let mut lower = 0;
    let mut detail = Vec::new();
    for seed in 0..3u64 {
        let (pre, _) = art.pretrained(seed);
        let mut sd = [0.0; 2];
        for (k, c2) in [5.0, 10.0].into_iter().enumerate() {
            let mut policy = pre.with_extra_inputs(layout.shared_dim() - layout.robot_dim());
            let curve = train_shared(&mut policy, &noisy, RewardWeights::new(10.0, c2).unwrap(), LatentTracker::zero(layout), seed);
            sd[k] = curve_metrics(&curve, 0.2).unwrap().tail_std;
        }
        lower += usize::from(sd[0] < sd[1]);
        detail.push(format!("seed {seed}: {:.3} vs {:.3}", sd[0], sd[1]));
    }
    (
        lower >= 2,
        format!("tail std c=[10,5] vs c=[10,10]: {}; lower on {lower}/3 (need 2)", detail.join(", ")),
    )
}

fn stage_four(art: &mut Artifacts) -> (bool, String) {
    let layout = shared_layout();
    let (pre, _) = art.pretrained(0);
    let mut policy = pre.with_extra_inputs(layout.shared_dim() - layout.robot_dim());
    let tracker = art.tracker(0);
    train_shared(&mut policy, &HumanProfile::expert(0), RewardWeights::default(), tracker, 0);
    let profiles = [
        ("random", HumanProfile::random(0)),
        ("medium noise", HumanProfile::noisy(0.5, 0)),
        ("low noise", HumanProfile::noisy(0.1, 0)),
    ];
    let mut follows = Vec::new();
    let mut successes = 0;
    for (name, p) in &profiles {
        let table = test_suite(&policy, art.tracker(1), p, name);
        println!("{}", table.to_text());
        follows.push(table.average.aa_followed_ha);
        successes += table.rows.iter().filter(|r| r.success == 1).count();
    }
    let ordered = follows[0] < follows[1] && follows[1] < follows[2];
    (
        ordered && successes == 30,
        format!("mean AA follow {follows:?} (random, medium, low), success {successes}/30"),
    )
}

fn trajectory_likelihood() -> (bool, String) {
    // Two states, human tokens {-1, 0, 1}, autonomous actions {0, 1}.
    let pi_h = |h: &i64, hist: &[usize]| -> f64 {
        let s = *hist.last().unwrap();
        let back = if hist.len() > 1 { hist[0] } else { s };
        let table = [[0.2, 0.5, 0.3], [0.1, 0.3, 0.6]];
        let base = table[s][(*h + 1) as usize];
        if back == s {
            base
        } else {
            [0.4, 0.4, 0.2][(*h + 1) as usize]
        }
    };
    let pi_a = |a: &usize, h: &i64, s: &usize| -> f64 {
        let p1 = match (h, s) {
            (-1, 0) => 0.3,
            (-1, _) => 0.6,
            (0, _) => 0.1,
            _ => 0.85,
        };
        if *a == 1 {
            p1
        } else {
            1.0 - p1
        }
    };
    let trans = |s: &usize, s2: &usize, a: &usize| -> f64 {
        let stay = [[0.7, 0.2], [0.4, 0.9]][*s][*a];
        if s == s2 {
            stay
        } else {
            1.0 - stay
        }
    };
    let p0 = |s: &usize| if *s == 0 { 0.35 } else { 0.65 };

    let mut worst: f64 = 0.0;
    let mut total = 0.0;
    for s1 in 0..2usize {
        for h1 in -1..=1i64 {
            for a1 in 0..2usize {
                for s2 in 0..2usize {
                    for h2 in -1..=1i64 {
                        for a2 in 0..2usize {
                            for s3 in 0..2usize {
                                let joint = p0(&s1)
                                    * pi_h(&h1, &[s1])
                                    * pi_a(&a1, &h1, &s1)
                                    * trans(&s1, &s2, &a1)
                                    * pi_h(&h2, &[s1, s2])
                                    * pi_a(&a2, &h2, &s2)
                                    * trans(&s2, &s3, &a2);
                                total += joint;
                                let lp = trajectory_log_prob(&[s1, s2, s3], &[h1, h2], &[a1, a2], 2, pi_h, pi_a, trans, Some(&p0)).unwrap();
                                worst = worst.max((lp - joint.ln()).abs());
                            }
                        }
                    }
                }
            }
        }
    }
    let det = trajectory_log_prob(&[0, 1, 0], &[0, 1], &[1, 0], 2, |_, _| 1.0, |_, _, _| 1.0, |_, _, _| 1.0, Some(&|_: &usize| 1.0)).unwrap();
    (
        worst <= 1e-12 && det == 0.0 && (total - 1.0).abs() < 1e-12,
        format!("max |log p - log enumerated| = {worst:.1e} over 144 trajectories (sum {total:.15}), deterministic = {det}"),
    )
}

fn spr_meter(art: &mut Artifacts) -> (bool, String) {
    let mut meter = SprMeter::start(0.0);
    for _ in 0..128 {
        meter.add_samples(1);
    }
    let clock = FixedClock(2.0);
    let v = meter.spr(clock.now()).unwrap();
    let (_, curve) = art.pretrained(0);
    (
        v == 64.0 && !curve.spr.is_empty(),
        format!("SPR = {v}, Stage I run emitted {} readings", curve.spr.len()),
    )
}

fn cvae_learnability(art: &mut Artifacts) -> (bool, String) {
    let (surrogate, _) = art.pretrained(0);
    let pilot = PolicyPilot::new(surrogate, robot_layout()).unwrap();
    let mut oracle = Oracle::new(RewardTable::default(), DEFAULT_ORACLE_CAP);
    let episodes: Vec<_> = (0..40u64)
        .map(|i| {
            let region = RegionEnv::from_config(desk_region(), &desk_grid(), RewardTable::default());
            let mut env = SharedEnv::new(region, ArbitrationMode::Shaping, RewardWeights::default(), i).unwrap();
            let mut human = SimulatedHuman::new(HumanProfile::noisy(0.1, i), &mut oracle);
            record_episode(&mut env, &mut human, None).unwrap()
        })
        .collect();
    let config = CvaeConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let data = build_dataset(&episodes, &pilot, &shared_layout(), &config, &mut rng).unwrap();
    let mut model = CvaeModel::<f32>::new(config.n_h, robot_layout().robot_dim(), config.hidden, config.d_z1, &mut rng);
    let curves = train_cvae(&mut model, &data, &config).unwrap();
    let first = curves.validation[0].total;
    let best = curves.validation[curves.best_epoch].total;
    let kl_ok = curves.train.iter().chain(&curves.validation).all(|l| l.kl >= 0.0);
    let acc = model.action_accuracy(&data.validation).unwrap();
    let base = majority_baseline(&data.train, &data.validation);
    art.cvae = Some(model);
    let drop = 1.0 - best / first;
    (
        drop >= 0.3 && kl_ok && acc > base,
        format!(
            "{} train / {} validation windows, validation loss {first:.3} -> {best:.3} ({:.0}% drop, need 30%), KL >= 0: {kl_ok}, accuracy {acc:.3} vs majority {base:.3}",
            data.train.len(),
            data.validation.len(),
            100.0 * drop
        ),
    )
}

#[test]
fn acceptance() {
    let mut art = Artifacts::default();
    let results = vec![
        check("reward table conformance", reward_table),
        check("space partition and payload-conditioned targets", space_partition),
        check("gradient checks", gradient_checks),
        check("perturbation law and override frequency", perturbation_law),
        check("table recomputation", table_recomputation),
        check("trajectory likelihood", trajectory_likelihood),
        check("SPR meter", || spr_meter(&mut art)),
        check("oracle equivalence", oracle_equivalence),
        check("cVAE learnability", || cvae_learnability(&mut art)),
        check("hypothesis 1: shared policy can be trained", || hypothesis_one(&mut art)),
        check("hypothesis 4: lower closeness weight stabilises training", || hypothesis_four(&mut art)),
        check("stage IV follow trend and success", || stage_four(&mut art)),
    ];
    let failed: Vec<_> = results.iter().filter(|c| !c.pass).map(|c| format!("{}: {}", c.name, c.detail)).collect();
    println!(
        "acceptance: {}/{} criteria passed",
        results.len() - failed.len(),
        results.len()
    );
    assert!(failed.is_empty(), "failed criteria:\n{}", failed.join("\n"));
}
