//! Clipped-surrogate policy optimisation (PPO), the sample-processing-rate
//! meter and training curves.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agents::{BasePolicy, ObsPolicy};
use crate::error::{Error, Result};
use crate::nn::{clip_grad_norm, Adam, MlpPolicy, N_ACTIONS};
use crate::region::{sample_region, ActionRP, GridConfig, RegionEnv, RegionGrid, RewardTable, RobotObservation};
use crate::scalar::{log_softmax, softmax, Scalar};
use crate::shared::{ObsLayout, TASK_REWARD_SCALE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub total_timesteps: usize,
    /// Minibatch size of each gradient step.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_epsilon: f64,
    pub rollout_horizon: usize,
    pub epochs_per_update: usize,
    pub ent_coef: f64,
    pub vf_coef: f64,
    pub max_grad_norm: f64,
    pub normalize_advantage: bool,
    pub hidden: Vec<usize>,
    /// Environments stepped per rollout; the horizon is split between them.
    pub n_envs: usize,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            total_timesteps: 500_000,
            batch_size: 32,
            learning_rate: 1e-3,
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_epsilon: 0.2,
            rollout_horizon: 2048,
            epochs_per_update: 10,
            ent_coef: 0.01,
            vf_coef: 0.5,
            max_grad_norm: 0.5,
            normalize_advantage: true,
            hidden: vec![64, 64],
            n_envs: 1,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    /// Shared-policy training defaults: batch 64, learning rate 1e-4.
    pub fn shared_defaults() -> Self {
        Self {
            batch_size: 64,
            learning_rate: 1e-4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("gamma {} outside (0, 1]", self.gamma)));
        }
        if !(self.clip_epsilon > 0.0) {
            return Err(Error::Config("clip_epsilon must be positive".into()));
        }
        if self.batch_size == 0 || self.rollout_horizon == 0 || self.n_envs == 0 {
            return Err(Error::Config("batch_size, rollout_horizon and n_envs must be positive".into()));
        }
        if self.learning_rate < 0.0 || !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(Error::Config("learning_rate must be >= 0 and gae_lambda in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Wall-clock source, replaceable in tests.
pub trait Clock: Send {
    fn now(&self) -> f64;
}

/// Seconds since construction.
pub struct SystemClock(Instant);

impl SystemClock {
    pub fn new() -> Self {
        Self(Instant::now())
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for SystemClock {
    fn now(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

/// A clock that always reads the same time.
#[derive(Clone, Copy, Debug)]
pub struct FixedClock(pub f64);

impl Clock for FixedClock {
    fn now(&self) -> f64 {
        self.0
    }
}

/// Sample processing rate: samples passed forward and backward through the
/// learner per wall-clock second since `t0`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SprMeter {
    pub t0: f64,
    pub samples: u64,
    /// (environment step, SPR) at every checkpoint.
    pub series: Vec<(usize, f64)>,
}

impl SprMeter {
    pub fn start(t0: f64) -> Self {
        Self {
            t0,
            samples: 0,
            series: Vec::new(),
        }
    }

    pub fn add_samples(&mut self, n: usize) {
        self.samples += n as u64;
    }

    pub fn spr(&self, now: f64) -> Result<f64> {
        if now <= self.t0 {
            return Err(Error::Usage(format!("clock {now} not after meter start {}", self.t0)));
        }
        Ok(self.samples as f64 / (now - self.t0))
    }

    pub fn checkpoint(&mut self, step: usize, now: f64) -> Result<f64> {
        let v = self.spr(now)?;
        self.series.push((step, v));
        Ok(v)
    }
}

pub const SMOOTHING_WINDOW: usize = 50;

/// Trailing moving average with a window of `window` points; the first
/// points average over what is available.
pub fn moving_average(xs: &[f64], window: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(xs.len());
    let mut sum = 0.0;
    for i in 0..xs.len() {
        sum += xs[i];
        if i >= window {
            sum -= xs[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

/// Episodic rewards indexed by the cumulative environment step at which the
/// episode ended.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingCurve {
    pub steps: Vec<usize>,
    pub rewards: Vec<f64>,
    pub smoothed: Vec<f64>,
    pub spr: Vec<(usize, f64)>,
}

impl TrainingCurve {
    pub fn push_episode(&mut self, step: usize, reward: f64) {
        self.steps.push(step);
        self.rewards.push(reward);
        self.smoothed = moving_average(&self.rewards, SMOOTHING_WINDOW);
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    /// `step,reward,smoothed,spr` with the latest SPR reading at each step.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["step", "reward", "smoothed", "spr"])?;
        let mut k = 0;
        for i in 0..self.rewards.len() {
            while k < self.spr.len() && self.spr[k].0 <= self.steps[i] {
                k += 1;
            }
            let spr = if k == 0 { String::new() } else { format!("{}", self.spr[k - 1].1) };
            w.write_record([
                self.steps[i].to_string(),
                self.rewards[i].to_string(),
                self.smoothed[i].to_string(),
                spr,
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Usage(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }
}

/// One environment transition as seen by the trainer.
#[derive(Clone, Debug)]
pub struct EnvStep<T> {
    pub obs: Vec<T>,
    /// Learning signal.
    pub reward: f64,
    /// Reward accumulated into the logged episodic return.
    pub log_reward: f64,
    pub done: bool,
}

/// Episodic environment with a flat observation and four discrete actions.
pub trait TrainEnv<T> {
    fn obs_dim(&self) -> usize;
    fn reset(&mut self) -> Result<Vec<T>>;
    fn step(&mut self, action: usize) -> Result<EnvStep<T>>;
}

/// Generalised advantage estimates and value targets for one environment's
/// rollout segment. `dones[t]` marks that the transition at `t` ended an
/// episode; `last_value` bootstraps the unfinished tail.
pub fn compute_gae(rewards: &[f64], values: &[f64], dones: &[bool], last_value: f64, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut gae = 0.0;
    for t in (0..n).rev() {
        let (next_value, nonterminal) = if dones[t] {
            (0.0, 0.0)
        } else if t + 1 < n {
            (values[t + 1], 1.0)
        } else {
            (last_value, 1.0)
        };
        let delta = rewards[t] + gamma * next_value * nonterminal - values[t];
        gae = delta + gamma * lambda * nonterminal * gae;
        adv[t] = gae;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

#[derive(Clone, Debug)]
pub struct PpoSample<T> {
    pub obs: Vec<T>,
    pub action: usize,
    pub old_log_prob: T,
    pub advantage: T,
    pub ret: T,
}

#[derive(Clone, Copy, Debug)]
pub struct LossCoefficients {
    pub clip_epsilon: f64,
    pub ent_coef: f64,
    pub vf_coef: f64,
}

impl From<&TrainerConfig> for LossCoefficients {
    fn from(c: &TrainerConfig) -> Self {
        Self {
            clip_epsilon: c.clip_epsilon,
            ent_coef: c.ent_coef,
            vf_coef: c.vf_coef,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PpoLoss<T> {
    pub total: T,
    pub policy: T,
    pub value: T,
    pub entropy: T,
    pub actor_grad: Vec<T>,
    pub critic_grad: Vec<T>,
}

/// Clipped surrogate for one sample: `min(r A, clip(r, 1-eps, 1+eps) A)`.
pub fn clipped_surrogate<T: Scalar>(ratio: T, advantage: T, eps: T) -> T {
    let clipped = ratio.max(T::one() - eps).min(T::one() + eps);
    (ratio * advantage).min(clipped * advantage)
}

/// Minibatch loss `-surrogate + vf_coef * mse(V, R) - ent_coef * H` averaged
/// over samples, with analytic gradients for actor and critic.
pub fn ppo_loss<T: Scalar>(policy: &MlpPolicy<T>, batch: &[PpoSample<T>], c: LossCoefficients) -> Result<PpoLoss<T>> {
    let n = T::lit(batch.len() as f64);
    let eps = T::lit(c.clip_epsilon);
    let ent_coef = T::lit(c.ent_coef);
    let vf_coef = T::lit(c.vf_coef);
    let mut actor_grad = vec![T::zero(); policy.actor.num_params()];
    let mut critic_grad = vec![T::zero(); policy.critic.num_params()];
    let (mut pl, mut vl, mut ent) = (T::zero(), T::zero(), T::zero());

    for s in batch {
        let at = policy.actor.forward(&s.obs)?;
        let logits = at.output();
        let logp = log_softmax(logits);
        let probs = softmax(logits);
        let ratio = (logp[s.action] - s.old_log_prob).exp();
        let surrogate = clipped_surrogate(ratio, s.advantage, eps);
        let entropy = -probs.iter().zip(&logp).map(|(&p, &l)| p * l).sum::<T>();
        pl -= surrogate;
        ent += entropy;

        // d(-surrogate)/d logp_a is -A r on the unclipped branch, 0 otherwise.
        let unclipped_active = ratio * s.advantage <= clipped_surrogate(ratio, s.advantage, eps);
        let d_logp = if unclipped_active { -s.advantage * ratio } else { T::zero() };
        let mut g = vec![T::zero(); N_ACTIONS];
        for k in 0..N_ACTIONS {
            let onehot = if k == s.action { T::one() } else { T::zero() };
            // d(-ent_coef * H)/d logit_k = ent_coef * p_k (log p_k + H)
            g[k] = (d_logp * (onehot - probs[k]) + ent_coef * probs[k] * (logp[k] + entropy)) / n;
        }
        policy.actor.backward_params(&at, &g, &mut actor_grad);

        let ct = policy.critic.forward(&s.obs)?;
        let v = ct.output()[0];
        let err = v - s.ret;
        vl += err * err;
        policy.critic.backward_params(&ct, &[vf_coef * T::lit(2.0) * err / n], &mut critic_grad);
    }
    let (pl, vl, ent) = (pl / n, vl / n, ent / n);
    Ok(PpoLoss {
        total: pl + vf_coef * vl - ent_coef * ent,
        policy: pl,
        value: vl,
        entropy: ent,
        actor_grad,
        critic_grad,
    })
}

/// Scales advantages to zero mean and unit standard deviation.
pub fn normalize_advantages<T: Scalar>(batch: &mut [PpoSample<T>]) {
    let n = T::lit(batch.len() as f64);
    let mean = batch.iter().map(|s| s.advantage).sum::<T>() / n;
    let var = batch.iter().map(|s| (s.advantage - mean).powi(2)).sum::<T>() / n;
    let std = var.sqrt() + T::lit(1e-8);
    for s in batch {
        s.advantage = (s.advantage - mean) / std;
    }
}

struct Transition<T> {
    obs: Vec<T>,
    action: usize,
    log_prob: T,
    value: T,
    reward: f64,
    done: bool,
}

/// Runs PPO until `total_timesteps` environment steps have been collected.
///
/// `make_env(i)` builds the i-th rollout environment. With one environment
/// the run is bitwise reproducible for a fixed seed (SPR readings aside).
pub fn ppo_train<T, E, F>(
    mut make_env: F,
    policy: &mut MlpPolicy<T>,
    config: &TrainerConfig,
    meter: &mut SprMeter,
    clock: &dyn Clock,
) -> Result<TrainingCurve>
where
    T: Scalar,
    E: TrainEnv<T>,
    F: FnMut(usize) -> E,
{
    config.validate()?;
    let mut envs: Vec<E> = (0..config.n_envs).map(&mut make_env).collect();
    if envs[0].obs_dim() != policy.input_dim() {
        return Err(Error::Dimension {
            what: "policy input vs environment observation",
            expected: policy.input_dim(),
            actual: envs[0].obs_dim(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut actor_opt = Adam::<T>::new(policy.actor.num_params(), config.learning_rate).with_eps(1e-5);
    let mut critic_opt = Adam::<T>::new(policy.critic.num_params(), config.learning_rate).with_eps(1e-5);
    let coefs = LossCoefficients::from(config);
    let per_env = (config.rollout_horizon / config.n_envs).max(1);

    let mut obs: Vec<Vec<T>> = envs.iter_mut().map(|e| e.reset()).collect::<Result<_>>()?;
    let mut ep_return = vec![0.0; config.n_envs];
    let mut curve = TrainingCurve::default();
    let mut steps = 0usize;

    while steps < config.total_timesteps {
        let mut segments: Vec<Vec<Transition<T>>> = (0..config.n_envs).map(|_| Vec::with_capacity(per_env)).collect();
        'collect: for _ in 0..per_env {
            for (i, env) in envs.iter_mut().enumerate() {
                if steps >= config.total_timesteps {
                    break 'collect;
                }
                let out = policy.forward(&obs[i])?;
                let action = sample_categorical(&out.probs, &mut rng);
                let log_prob = out.probs[action].ln();
                let st = env.step(action)?;
                steps += 1;
                ep_return[i] += st.log_reward;
                segments[i].push(Transition {
                    obs: std::mem::replace(&mut obs[i], st.obs),
                    action,
                    log_prob,
                    value: out.value,
                    reward: st.reward,
                    done: st.done,
                });
                if st.done {
                    curve.push_episode(steps, ep_return[i]);
                    ep_return[i] = 0.0;
                    obs[i] = env.reset()?;
                }
            }
        }

        let mut samples = Vec::with_capacity(config.rollout_horizon);
        for (i, seg) in segments.into_iter().enumerate() {
            if seg.is_empty() {
                continue;
            }
            let last_value = policy.critic.predict(&obs[i])?[0].as_f64();
            let rewards: Vec<f64> = seg.iter().map(|t| t.reward).collect();
            let values: Vec<f64> = seg.iter().map(|t| t.value.as_f64()).collect();
            let dones: Vec<bool> = seg.iter().map(|t| t.done).collect();
            let (adv, ret) = compute_gae(&rewards, &values, &dones, last_value, config.gamma, config.gae_lambda);
            for (k, t) in seg.into_iter().enumerate() {
                samples.push(PpoSample {
                    obs: t.obs,
                    action: t.action,
                    old_log_prob: t.log_prob,
                    advantage: T::lit(adv[k]),
                    ret: T::lit(ret[k]),
                });
            }
        }

        let mut order: Vec<usize> = (0..samples.len()).collect();
        for _ in 0..config.epochs_per_update {
            order.shuffle(&mut rng);
            for chunk in order.chunks(config.batch_size) {
                let mut batch: Vec<PpoSample<T>> = chunk.iter().map(|&k| samples[k].clone()).collect();
                if config.normalize_advantage && batch.len() > 1 {
                    normalize_advantages(&mut batch);
                }
                let mut loss = ppo_loss(policy, &batch, coefs)?;
                if !loss.total.is_finite() {
                    return Err(Error::Diverged(format!(
                        "non-finite loss at step {steps}: policy {} value {} entropy {}",
                        loss.policy, loss.value, loss.entropy
                    )));
                }
                clip_grad_norm(&mut [&mut loss.actor_grad[..], &mut loss.critic_grad[..]], config.max_grad_norm);
                actor_opt.step(policy.actor.params_mut(), &loss.actor_grad);
                critic_opt.step(policy.critic.params_mut(), &loss.critic_grad);
                meter.add_samples(batch.len());
            }
        }
        let now = clock.now();
        if now > meter.t0 {
            meter.checkpoint(steps, now)?;
        }
    }
    curve.spr = meter.series.clone();
    Ok(curve)
}

fn sample_categorical<T: Scalar, R: Rng + ?Sized>(probs: &[T], rng: &mut R) -> usize {
    let w: Vec<f64> = probs.iter().map(|p| p.as_f64().max(0.0)).collect();
    match WeightedIndex::new(&w) {
        Ok(d) => d.sample(rng),
        Err(_) => rng.random_range(0..probs.len()),
    }
}


/// Greedy controller over the robot observation encoding.
#[derive(Clone, Debug)]
pub struct PolicyPilot<T> {
    pub policy: MlpPolicy<T>,
    pub layout: ObsLayout,
}

impl<T: Scalar> PolicyPilot<T> {
    pub fn new(policy: MlpPolicy<T>, layout: ObsLayout) -> Result<Self> {
        if policy.input_dim() != layout.robot_dim() {
            return Err(Error::Dimension {
                what: "policy input vs robot observation",
                expected: layout.robot_dim(),
                actual: policy.input_dim(),
            });
        }
        Ok(Self { policy, layout })
    }
}

impl<T: Scalar> ObsPolicy for PolicyPilot<T> {
    fn greedy(&self, obs: &RobotObservation) -> Result<ActionRP> {
        let x = self.layout.encode_robot::<T>(obs)?;
        Ok(ActionRP::from_index(self.policy.greedy(&x)?).expect("four action logits"))
    }
}

impl<T: Scalar> BasePolicy for PolicyPilot<T> {
    fn action(&mut self, env: &RegionEnv) -> Result<ActionRP> {
        self.greedy(&env.observe())
    }
}

/// Single-robot planning task. Each episode draws a fresh region unless one
/// is pinned.
pub struct PlanningTask {
    config: GridConfig,
    rewards: RewardTable,
    layout: ObsLayout,
    fixed: Option<RegionGrid>,
    rng: ChaCha8Rng,
    env: Option<RegionEnv>,
}

impl PlanningTask {
    pub fn new(config: GridConfig, rewards: RewardTable, fixed: Option<RegionGrid>, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = ObsLayout::new(config.n_c, config.n_r, config.p_max, 0);
        Ok(Self {
            config,
            rewards,
            layout,
            fixed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            env: None,
        })
    }

    pub fn layout(&self) -> ObsLayout {
        self.layout
    }

    fn next_region(&mut self) -> Result<RegionGrid> {
        if let Some(g) = &self.fixed {
            return Ok(g.clone());
        }
        for _ in 0..1000 {
            let g = sample_region(&self.config, &mut self.rng)?;
            if g.total_objects() > 0 {
                return Ok(g);
            }
        }
        Err(Error::Config("region sampler keeps producing empty regions".into()))
    }
}

impl<T: Scalar> TrainEnv<T> for PlanningTask {
    fn obs_dim(&self) -> usize {
        self.layout.robot_dim()
    }

    fn reset(&mut self) -> Result<Vec<T>> {
        let grid = self.next_region()?;
        let env = RegionEnv::from_config(grid, &self.config, self.rewards.clone());
        let obs = self.layout.encode_robot(&env.observe())?;
        self.env = Some(env);
        Ok(obs)
    }

    fn step(&mut self, action: usize) -> Result<EnvStep<T>> {
        let env = self.env.as_mut().ok_or_else(|| Error::Usage("step before reset".into()))?;
        let a = ActionRP::from_index(action).ok_or_else(|| Error::Usage(format!("action {action}")))?;
        let out = env.step(a)?;
        Ok(EnvStep {
            obs: self.layout.encode_robot(&out.next_observation)?,
            reward: out.reward / TASK_REWARD_SCALE,
            log_reward: out.reward,
            done: out.done,
        })
    }
}

/// Runs the greedy policy from the start of `grid` and returns the task
/// return and the final state.
pub fn greedy_rollout<P: BasePolicy + ?Sized>(pilot: &mut P, grid: &RegionGrid, rewards: &RewardTable, step_limit: usize) -> Result<(f64, RegionEnv)> {
    let mut env = RegionEnv::new(grid.clone(), rewards.clone(), step_limit);
    let mut ret = 0.0;
    while !env.is_done() {
        let a = pilot.action(&env)?;
        ret += env.step(a)?.reward;
    }
    Ok((ret, env))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spr_arithmetic() {
        let mut m = SprMeter::start(10.0);
        assert_eq!(m.spr(12.0).unwrap(), 0.0);
        m.add_samples(128);
        assert_eq!(m.spr(12.0).unwrap(), 64.0);
        assert!(m.spr(10.0).is_err());
        m.checkpoint(100, 12.0).unwrap();
        m.add_samples(128);
        m.checkpoint(200, 14.0).unwrap();
        assert_eq!(m.series, vec![(100, 64.0), (200, 64.0)]);
    }

    #[test]
    fn moving_average_window() {
        let xs: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let s = moving_average(&xs, 50);
        assert_eq!(s.len(), 100);
        assert_eq!(s[0], 0.0);
        assert_eq!(s[1], 0.5);
        assert_eq!(s[99], (50..100).sum::<usize>() as f64 / 50.0);
    }

    #[test]
    fn gae_with_unit_lambda_is_discounted_return() {
        let rewards = [1.0, -2.0, 3.0, 0.5, 4.0, -1.0];
        let dones = [false, false, true, false, false, true];
        let values = [0.3, -0.1, 0.7, 0.2, 0.0, 0.9];
        let (_, ret) = compute_gae(&rewards, &values, &dones, 0.0, 0.9, 1.0);
        // Straightforward backward recursion restarted at each episode end.
        let mut expected = vec![0.0; 6];
        let mut g = 0.0;
        for t in (0..6).rev() {
            if dones[t] {
                g = 0.0;
            }
            g = rewards[t] + 0.9 * g;
            expected[t] = g;
        }
        for (a, b) in ret.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12, "{ret:?} vs {expected:?}");
        }
    }

    #[test]
    fn gae_bootstraps_unfinished_tail() {
        let (adv, ret) = compute_gae(&[1.0], &[0.5], &[false], 2.0, 0.5, 0.95);
        assert!((ret[0] - 2.0).abs() < 1e-12);
        assert!((adv[0] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn surrogate_inside_clip_range_is_unclipped() {
        for &(r, a) in &[(1.0f64, 2.0), (0.85, -1.0), (1.19, 3.0), (0.81, 0.5)] {
            assert_eq!(clipped_surrogate(r, a, 0.2), r * a);
        }
        assert_eq!(clipped_surrogate(1.5f64, 1.0, 0.2), 1.2);
        assert_eq!(clipped_surrogate(1.5f64, -1.0, 0.2), -1.5);
    }

    #[test]
    fn advantage_normalization_is_affine() {
        let mut batch: Vec<PpoSample<f64>> = [3.0, -1.0, 0.5, 2.0]
            .iter()
            .map(|&a| PpoSample {
                obs: vec![],
                action: 0,
                old_log_prob: 0.0,
                advantage: a,
                ret: 0.0,
            })
            .collect();
        let before: Vec<f64> = batch.iter().map(|s| s.advantage).collect();
        normalize_advantages(&mut batch);
        let after: Vec<f64> = batch.iter().map(|s| s.advantage).collect();
        assert!(after.iter().sum::<f64>().abs() < 1e-12);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(before[i] < before[j], after[i] < after[j]);
            }
        }
    }

    #[test]
    fn csv_layout() {
        let mut c = TrainingCurve::default();
        c.push_episode(10, 1.0);
        c.push_episode(20, 3.0);
        c.spr = vec![(15, 64.0)];
        let text = c.to_csv().unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines, vec!["step,reward,smoothed,spr", "10,1,1,", "20,3,2,64"]);
    }

    fn tiny_task() -> (GridConfig, RegionGrid) {
        let cfg = GridConfig {
            n_c: 3,
            n_r: 1,
            ..GridConfig::default()
        };
        let grid = RegionGrid::empty(3, 1, 4).with_objects(&[((1, 0), 1)]);
        (cfg, grid)
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let (cfg, grid) = tiny_task();
        let layout = ObsLayout::new(3, 1, 4, 0);
        let mut policy = MlpPolicy::<f32>::new(layout.robot_dim(), &[16, 16], &mut ChaCha8Rng::seed_from_u64(0));
        let before = policy.clone();
        let tc = TrainerConfig {
            total_timesteps: 512,
            rollout_horizon: 128,
            learning_rate: 0.0,
            ..TrainerConfig::default()
        };
        let mut meter = SprMeter::start(0.0);
        let curve = ppo_train(
            |i| PlanningTask::new(cfg.clone(), RewardTable::default(), Some(grid.clone()), i as u64).unwrap(),
            &mut policy,
            &tc,
            &mut meter,
            &SystemClock::new(),
        )
        .unwrap();
        assert_eq!(policy, before);
        assert!(!curve.is_empty());
        assert!(meter.samples > 0);
    }

    #[test]
    fn fixed_seed_reproduces_curve() {
        let (cfg, grid) = tiny_task();
        let layout = ObsLayout::new(3, 1, 4, 0);
        let run = || {
            let mut policy = MlpPolicy::<f32>::new(layout.robot_dim(), &[16, 16], &mut ChaCha8Rng::seed_from_u64(4));
            let tc = TrainerConfig {
                total_timesteps: 2048,
                rollout_horizon: 256,
                seed: 4,
                ..TrainerConfig::default()
            };
            let mut meter = SprMeter::start(0.0);
            let curve = ppo_train(
                |i| PlanningTask::new(cfg.clone(), RewardTable::default(), Some(grid.clone()), i as u64).unwrap(),
                &mut policy,
                &tc,
                &mut meter,
                &SystemClock::new(),
            )
            .unwrap();
            (curve.steps, curve.rewards, curve.smoothed, policy)
        };
        assert_eq!(run(), run());
    }
}
