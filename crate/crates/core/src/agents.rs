//! Simulated human operators, action perturbation, the human error angle and
//! the episode recorder.

use std::collections::VecDeque;
use std::f64::consts::FRAC_PI_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::oracle::Oracle;
use crate::record::{EpisodeHeader, EpisodeRecord, RecordMode, StepRecord};
use crate::region::{ActionRP, RegionEnv, RobotObservation};
use crate::shared::{blended_reward, HumanActionToken, SharedEnv};

/// Unit vector of an action in the cell-relative frame.
pub fn action_vector(a: ActionRP) -> (f64, f64) {
    match a {
        ActionRP::Left => (-1.0, 0.0),
        ActionRP::Right => (1.0, 0.0),
        ActionRP::Front => (0.0, 1.0),
        ActionRP::Back => (0.0, -1.0),
    }
}

/// Angle between two action vectors, in radians.
pub fn action_angle(a: ActionRP, b: ActionRP) -> f64 {
    let (ax, ay) = action_vector(a);
    let (bx, by) = action_vector(b);
    (ax * bx + ay * by).clamp(-1.0, 1.0).acos()
}

/// Number of discrete error classes: 0, pi/2, pi, and no input.
pub const ERROR_CLASSES: usize = 4;
pub const IDLE_ERROR: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HumanError {
    /// `None` when the human gave no input.
    pub angle: Option<f64>,
    pub index: usize,
}

/// Angular difference between the human action and the reference action,
/// discretised in quarter turns. No input maps to [`IDLE_ERROR`].
pub fn human_error(a_h: HumanActionToken, a_star: ActionRP) -> HumanError {
    match a_h.action() {
        None => HumanError {
            angle: None,
            index: IDLE_ERROR,
        },
        Some(h) => {
            let angle = action_angle(h, a_star);
            HumanError {
                angle: Some(angle),
                index: (angle / FRAC_PI_2).round() as usize,
            }
        }
    }
}

/// Shifts an action by `u` and wraps it back into 0..=3.
pub fn perturb_by(a: ActionRP, u: i64) -> ActionRP {
    let mut output = a as i64 + u;
    if output < 0 {
        output += 4;
    }
    if output > 3 {
        output %= 4;
    }
    ActionRP::from_index(output as usize).expect("wrapped into range")
}

/// One pass of the human-input perturbation: add a uniform integer in [0, 4).
pub fn perturb_action<R: Rng + ?Sized>(a: ActionRP, rng: &mut R) -> ActionRP {
    perturb_by(a, rng.random_range(0..4))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HumanProfile {
    /// Probability of giving any input on a step.
    pub p_act: f64,
    /// Perturbation passes applied to a noisy step; 0 is an expert.
    pub noise_passes: u32,
    /// Probability that a given step is perturbed at all.
    pub noise_prob: f64,
    pub seed: u64,
}

impl Default for HumanProfile {
    fn default() -> Self {
        Self::expert(0)
    }
}

impl HumanProfile {
    pub fn expert(seed: u64) -> Self {
        Self {
            p_act: 0.8,
            noise_passes: 0,
            noise_prob: 1.0,
            seed,
        }
    }

    pub fn noisy(noise_prob: f64, seed: u64) -> Self {
        Self {
            p_act: 0.8,
            noise_passes: 1,
            noise_prob,
            seed,
        }
    }

    /// Every input replaced by a uniformly random action.
    pub fn random(seed: u64) -> Self {
        Self::noisy(1.0, seed)
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_act) || !(0.0..=1.0).contains(&self.noise_prob) {
            return Err(crate::Error::Config("p_act and noise_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Something that proposes an action from the full environment state.
pub trait BasePolicy {
    fn action(&mut self, env: &RegionEnv) -> Result<ActionRP>;
}

/// Something that proposes an action from the robot observation alone.
pub trait ObsPolicy {
    fn greedy(&self, obs: &RobotObservation) -> Result<ActionRP>;
}

impl BasePolicy for Oracle {
    fn action(&mut self, env: &RegionEnv) -> Result<ActionRP> {
        Ok(self.best_action(env)?.unwrap_or(ActionRP::Left))
    }
}

impl<B: BasePolicy + ?Sized> BasePolicy for &mut B {
    fn action(&mut self, env: &RegionEnv) -> Result<ActionRP> {
        (**self).action(env)
    }
}

impl<B: BasePolicy + ?Sized> BasePolicy for Box<B> {
    fn action(&mut self, env: &RegionEnv) -> Result<ActionRP> {
        (**self).action(env)
    }
}

/// Samples a human token: idle with probability `1 - p_act`, otherwise the
/// base policy's action with the configured perturbation.
pub fn simulated_human_action<B, R>(env: &RegionEnv, base: &mut B, profile: &HumanProfile, rng: &mut R) -> Result<HumanActionToken>
where
    B: BasePolicy + ?Sized,
    R: Rng + ?Sized,
{
    let acts = rng.random::<f64>() < profile.p_act;
    if !acts {
        return Ok(HumanActionToken::IDLE);
    }
    let mut a = base.action(env)?;
    if profile.noise_passes > 0 && rng.random::<f64>() < profile.noise_prob {
        for _ in 0..profile.noise_passes {
            a = perturb_action(a, rng);
        }
    }
    Ok(a.into())
}

/// Source of human tokens for an episode.
pub trait HumanSource {
    fn next_token(&mut self, env: &RegionEnv) -> Result<HumanActionToken>;
}

pub struct SimulatedHuman<B> {
    pub profile: HumanProfile,
    base: B,
    rng: ChaCha8Rng,
}

impl<B: BasePolicy> SimulatedHuman<B> {
    pub fn new(profile: HumanProfile, base: B) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(profile.seed);
        Self { profile, base, rng }
    }

    pub fn base_mut(&mut self) -> &mut B {
        &mut self.base
    }
}

impl<B: BasePolicy> HumanSource for SimulatedHuman<B> {
    fn next_token(&mut self, env: &RegionEnv) -> Result<HumanActionToken> {
        simulated_human_action(env, &mut self.base, &self.profile, &mut self.rng)
    }
}

/// Replays a fixed token list, then stays idle.
#[derive(Clone, Debug, Default)]
pub struct ScriptedHuman {
    tokens: VecDeque<HumanActionToken>,
}

impl ScriptedHuman {
    pub fn new(tokens: impl IntoIterator<Item = HumanActionToken>) -> Self {
        Self {
            tokens: tokens.into_iter().collect(),
        }
    }

    pub fn from_actions(actions: &[ActionRP]) -> Self {
        Self::new(actions.iter().map(|&a| HumanActionToken::from(a)))
    }
}

impl HumanSource for ScriptedHuman {
    fn next_token(&mut self, _env: &RegionEnv) -> Result<HumanActionToken> {
        Ok(self.tokens.pop_front().unwrap_or(HumanActionToken::IDLE))
    }
}

impl<H: HumanSource + ?Sized> HumanSource for &mut H {
    fn next_token(&mut self, env: &RegionEnv) -> Result<HumanActionToken> {
        (**self).next_token(env)
    }
}

/// Autonomous side of a shared episode. Implementations may keep per-episode
/// history, so `reset` is called before the first step.
pub trait AutonomousAgent {
    fn reset(&mut self) {}
    fn propose(&mut self, env: &RegionEnv, a_h: HumanActionToken) -> Result<ActionRP>;
}

/// Runs one episode from the environment's current (fresh) state.
///
/// Without an agent the human drives the robot directly and an idle token
/// leaves it in place. With an agent the shared environment arbitrates.
pub fn record_episode<H>(env: &mut SharedEnv, human: &mut H, agent: Option<&mut dyn AutonomousAgent>) -> Result<EpisodeRecord>
where
    H: HumanSource + ?Sized,
{
    let mode = if agent.is_some() {
        RecordMode::Shared
    } else {
        RecordMode::Manual
    };
    let mut record = EpisodeRecord::new(EpisodeHeader::for_env(env, mode));
    match agent {
        None => {
            while !env.region().is_done() {
                let obs = env.region().observe();
                let a_h = human.next_token(env.region())?;
                let region = env.region_mut();
                let outcome = match a_h.action() {
                    Some(a) => region.step(a)?,
                    None => region.wait()?,
                };
                record.push(StepRecord::new(record.steps.len(), obs, a_h, None, a_h.action(), &outcome, None));
            }
        }
        Some(agent) => {
            agent.reset();
            while !env.region().is_done() {
                let obs = env.region().observe();
                let a_h = human.next_token(env.region())?;
                let a_a = agent.propose(env.region(), a_h)?;
                let step = env.shared_step(a_a, a_h)?;
                debug_assert_eq!(step.reward, blended_reward(step.outcome.reward, a_a, a_h, env.weights()));
                record.push(StepRecord::new(
                    record.steps.len(),
                    obs,
                    a_h,
                    Some(a_a),
                    Some(step.executed),
                    &step.outcome,
                    Some(step.reward),
                ));
            }
        }
    }
    record.final_observation = Some(env.region().observe());
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;
    use crate::oracle::{oracle_optimal_return, DEFAULT_ORACLE_CAP};
    use crate::region::{DoneReason, RegionGrid, RewardTable};
    use crate::shared::{ArbitrationMode, RewardWeights};

    #[test]
    fn perturbation_examples() {
        assert_eq!(perturb_by(ActionRP::Back, 2), ActionRP::Right);
        for a in ActionRP::ALL {
            assert_eq!(perturb_by(a, 0), a);
        }
    }

    #[test]
    fn perturbation_marginal_is_uniform() {
        // Exhaustive over u: every output appears exactly once per input.
        for a in ActionRP::ALL {
            let mut seen = [0; 4];
            for u in 0..4 {
                seen[perturb_by(a, u).index()] += 1;
            }
            assert_eq!(seen, [1; 4]);
        }
    }

    #[test]
    fn error_angles() {
        use ActionRP::*;
        let e = human_error(Right.into(), Right);
        assert_eq!((e.angle, e.index), (Some(0.0), 0));
        let e = human_error(Left.into(), Right);
        assert_eq!((e.angle, e.index), (Some(PI), 2));
        let e = human_error(Front.into(), Right);
        assert_eq!((e.angle, e.index), (Some(FRAC_PI_2), 1));
        assert_eq!(human_error(HumanActionToken::IDLE, Right).index, IDLE_ERROR);
        for a in ActionRP::ALL {
            for b in ActionRP::ALL {
                let ab = human_error(a.into(), b);
                let ba = human_error(b.into(), a);
                assert_eq!(ab, ba);
                assert_eq!(ab.index as f64, ab.angle.unwrap() / FRAC_PI_2);
            }
        }
    }

    struct Fixed(ActionRP);

    impl BasePolicy for Fixed {
        fn action(&mut self, _: &RegionEnv) -> Result<ActionRP> {
            Ok(self.0)
        }
    }

    fn env() -> RegionEnv {
        RegionEnv::new(RegionGrid::empty(6, 2, 4).with_objects(&[((2, 0), 1)]), RewardTable::default(), 120)
    }

    #[test]
    fn non_cooperative_human_is_always_idle() {
        let p = HumanProfile {
            p_act: 0.0,
            ..HumanProfile::expert(1)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let t = simulated_human_action(&env(), &mut Fixed(ActionRP::Back), &p, &mut rng).unwrap();
            assert!(t.is_idle());
        }
    }

    #[test]
    fn expert_copies_base_policy() {
        let p = HumanProfile {
            p_act: 1.0,
            ..HumanProfile::expert(1)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let t = simulated_human_action(&env(), &mut Fixed(ActionRP::Front), &p, &mut rng).unwrap();
            assert_eq!(t.action(), Some(ActionRP::Front));
        }
    }

    #[test]
    fn one_noise_pass_is_uniform() {
        let p = HumanProfile {
            p_act: 1.0,
            ..HumanProfile::random(5)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut counts = [0usize; 4];
        for _ in 0..10_000 {
            let t = simulated_human_action(&env(), &mut Fixed(ActionRP::Right), &p, &mut rng).unwrap();
            counts[t.action().unwrap().index()] += 1;
        }
        for c in counts {
            assert!((2300..=2700).contains(&c), "{counts:?}");
        }
    }

    #[test]
    fn manual_oracle_human_matches_oracle_return() {
        let grid = RegionGrid::empty(5, 2, 4).with_objects(&[((1, 1), 2), ((3, 0), 3)]);
        let (best, plan) = oracle_optimal_return(&grid, DEFAULT_ORACLE_CAP).unwrap();
        let region = RegionEnv::new(grid, RewardTable::default(), 100);
        let mut env = SharedEnv::new(region, ArbitrationMode::Shaping, RewardWeights::default(), 0).unwrap();
        let mut human = ScriptedHuman::from_actions(&plan);
        let rec = record_episode(&mut env, &mut human, None).unwrap();
        assert_eq!(rec.task_return(), best);
        assert_eq!(rec.done_reason(), DoneReason::Goal);
        assert!(rec.steps.iter().all(|s| s.a_a.is_none()));
    }

    #[test]
    fn idle_manual_human_never_moves() {
        let region = env();
        let start = region.position();
        let mut env = SharedEnv::new(region, ArbitrationMode::Shaping, RewardWeights::default(), 0).unwrap();
        let p = HumanProfile {
            p_act: 0.0,
            ..HumanProfile::expert(3)
        };
        let mut human = SimulatedHuman::new(p, Fixed(ActionRP::Right));
        let rec = record_episode(&mut env, &mut human, None).unwrap();
        assert_eq!(rec.done_reason(), DoneReason::StepLimit);
        assert_eq!(rec.steps.len(), 120);
        assert!(rec.steps.iter().all(|s| s.obs.s1 == start && s.executed.is_none()));
    }
}
