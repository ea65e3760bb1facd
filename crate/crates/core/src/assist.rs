//! The shared-autonomy agent: a policy over the augmented observation fed
//! with the human token and the latent `z1` inferred from recent history.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::agents::{AutonomousAgent, HumanSource, ObsPolicy, SimulatedHuman};
use crate::encoder::{window_from_history, CvaeModel, HistoryStep, ZMode};
use crate::error::{Error, Result};
use crate::learn::{EnvStep, TrainEnv};
use crate::nn::MlpPolicy;
use crate::oracle::Oracle;
use crate::region::{sample_region, ActionRP, GridConfig, RegionEnv, RegionGrid, RewardTable, RobotObservation};
use crate::scalar::Scalar;
use crate::shared::{ArbitrationMode, HumanActionToken, ObsLayout, RewardWeights, SharedEnv};

/// Keeps the interaction history of the running episode and turns it into
/// `z1`. Until `n_h` steps are available, and in zero mode, `z1 = 0`.
pub struct LatentTracker<T> {
    layout: ObsLayout,
    model: Option<CvaeModel<T>>,
    surrogate: Option<Box<dyn ObsPolicy + Send>>,
    mode: ZMode,
    history: Vec<HistoryStep>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> LatentTracker<T> {
    /// A tracker that always yields the zero latent.
    pub fn zero(layout: ObsLayout) -> Self {
        Self {
            layout,
            model: None,
            surrogate: None,
            mode: ZMode::Zero,
            history: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn new(
        layout: ObsLayout,
        model: CvaeModel<T>,
        surrogate: Box<dyn ObsPolicy + Send>,
        mode: ZMode,
        seed: u64,
    ) -> Result<Self> {
        if model.d_z1 != layout.d_z1 || model.state_dim != layout.robot_dim() {
            return Err(Error::Config(format!(
                "encoder expects state {} / z1 {}, layout has {} / {}",
                model.state_dim,
                model.d_z1,
                layout.robot_dim(),
                layout.d_z1
            )));
        }
        Ok(Self {
            layout,
            model: Some(model),
            surrogate: Some(surrogate),
            mode,
            history: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn layout(&self) -> ObsLayout {
        self.layout
    }

    pub fn mode(&self) -> ZMode {
        self.mode
    }

    pub fn reset(&mut self) {
        self.history.clear();
    }

    /// Appends the current step and returns `z1` for it.
    pub fn observe(&mut self, obs: &RobotObservation, a_h: HumanActionToken) -> Result<Vec<T>> {
        let zero = vec![T::zero(); self.layout.d_z1];
        let (Some(model), Some(surrogate)) = (&self.model, &self.surrogate) else {
            return Ok(zero);
        };
        if self.mode == ZMode::Zero {
            return Ok(zero);
        }
        self.history.push(HistoryStep::new(obs.clone(), a_h, surrogate.as_ref())?);
        if self.history.len() > model.n_h {
            self.history.remove(0);
        }
        match window_from_history(&self.layout, &self.history, model.n_h)? {
            None => Ok(zero),
            Some(w) => model.encode_z1(&w, self.mode, &mut self.rng),
        }
    }
}

/// Greedy shared policy; implements the autonomous side of an episode.
pub struct SharedPilot<T> {
    pub policy: MlpPolicy<T>,
    pub tracker: LatentTracker<T>,
}

impl<T: Scalar> SharedPilot<T> {
    pub fn new(policy: MlpPolicy<T>, tracker: LatentTracker<T>) -> Result<Self> {
        let dim = tracker.layout().shared_dim();
        if policy.input_dim() != dim {
            return Err(Error::Dimension {
                what: "shared policy input",
                expected: dim,
                actual: policy.input_dim(),
            });
        }
        Ok(Self { policy, tracker })
    }
}

impl<T: Scalar> AutonomousAgent for SharedPilot<T> {
    fn reset(&mut self) {
        self.tracker.reset();
    }

    fn propose(&mut self, env: &RegionEnv, a_h: HumanActionToken) -> Result<ActionRP> {
        let obs = env.observe();
        let z1 = self.tracker.observe(&obs, a_h)?;
        let x = self.tracker.layout().encode_shared(&obs, a_h, &z1)?;
        Ok(ActionRP::from_index(self.policy.greedy(&x)?).expect("four action logits"))
    }
}

/// Shared-autonomy training task: a simulated human proposes a token each
/// step, the learner's action is arbitrated and rewarded with the blended
/// reward.
pub struct SharedTask<T> {
    grid_config: GridConfig,
    rewards: RewardTable,
    fixed: Option<RegionGrid>,
    mode: ArbitrationMode,
    weights: RewardWeights,
    human: SimulatedHuman<Oracle>,
    tracker: LatentTracker<T>,
    rng: ChaCha8Rng,
    env: Option<SharedEnv>,
    a_h: HumanActionToken,
}

impl<T: Scalar> SharedTask<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        grid_config: GridConfig,
        rewards: RewardTable,
        fixed: Option<RegionGrid>,
        mode: ArbitrationMode,
        weights: RewardWeights,
        human: SimulatedHuman<Oracle>,
        tracker: LatentTracker<T>,
        seed: u64,
    ) -> Result<Self> {
        grid_config.validate()?;
        mode.validate()?;
        weights.validate()?;
        Ok(Self {
            grid_config,
            rewards,
            fixed,
            mode,
            weights,
            human,
            tracker,
            rng: ChaCha8Rng::seed_from_u64(seed),
            env: None,
            a_h: HumanActionToken::IDLE,
        })
    }

    fn next_region(&mut self) -> Result<RegionGrid> {
        if let Some(g) = &self.fixed {
            return Ok(g.clone());
        }
        self.human.base_mut().clear();
        for _ in 0..1000 {
            let g = sample_region(&self.grid_config, &mut self.rng)?;
            if g.total_objects() > 0 {
                return Ok(g);
            }
        }
        Err(Error::Config("region sampler keeps producing empty regions".into()))
    }

    fn observe(&mut self) -> Result<Vec<T>> {
        let env = self.env.as_ref().expect("env is live");
        let obs = env.region().observe();
        self.a_h = self.human.next_token(env.region())?;
        let z1 = self.tracker.observe(&obs, self.a_h)?;
        self.tracker.layout().encode_shared(&obs, self.a_h, &z1)
    }
}

impl<T: Scalar> TrainEnv<T> for SharedTask<T> {
    fn obs_dim(&self) -> usize {
        self.tracker.layout().shared_dim()
    }

    fn reset(&mut self) -> Result<Vec<T>> {
        let grid = self.next_region()?;
        let region = RegionEnv::from_config(grid, &self.grid_config, self.rewards.clone());
        let seed = rand::Rng::random(&mut self.rng);
        self.env = Some(SharedEnv::new(region, self.mode, self.weights, seed)?);
        self.tracker.reset();
        self.observe()
    }

    fn step(&mut self, action: usize) -> Result<EnvStep<T>> {
        let a = ActionRP::from_index(action).ok_or_else(|| Error::Usage(format!("action {action}")))?;
        let env = self.env.as_mut().ok_or_else(|| Error::Usage("step before reset".into()))?;
        let st = env.shared_step(a, self.a_h)?;
        let done = st.outcome.done;
        let obs = if done {
            vec![T::zero(); self.tracker.layout().shared_dim()]
        } else {
            self.observe()?
        };
        Ok(EnvStep {
            obs,
            reward: st.reward / self.weights.magnitude(self.rewards.r_goal),
            log_reward: st.reward,
            done,
        })
    }
}
