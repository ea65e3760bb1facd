//! Shared-autonomy layer on top of the region world.
//!
//! The autonomous policy sees the robot observation augmented with the human
//! action token and the human latent `z1`. Under policy shaping its proposal is
//! the only input that reaches the robot; under override the human action may
//! replace it.

use std::f64::consts::PI;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agents::action_angle;
use crate::error::{Error, Result};
use crate::region::{ActionRP, RegionEnv, RobotObservation, StepOutcome};
use crate::scalar::Scalar;

/// Human input for one step: an action 0..=3 or -1 for no input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "i64", into = "i64")]
pub struct HumanActionToken(i8);

impl HumanActionToken {
    pub const IDLE: HumanActionToken = HumanActionToken(-1);
    /// Width of the one-hot encoding: idle plus four actions.
    pub const CLASSES: usize = 5;

    pub fn new(value: i64) -> Result<Self> {
        Self::try_from(value).map_err(Error::Usage)
    }

    pub fn value(self) -> i8 {
        self.0
    }

    pub fn is_idle(self) -> bool {
        self.0 < 0
    }

    pub fn action(self) -> Option<ActionRP> {
        usize::try_from(self.0).ok().and_then(ActionRP::from_index)
    }

    /// Slot in the 5-way one-hot: 0 is idle, 1..=4 are actions 0..=3.
    pub fn slot(self) -> usize {
        (self.0 + 1) as usize
    }
}

impl From<ActionRP> for HumanActionToken {
    fn from(a: ActionRP) -> Self {
        HumanActionToken(a as i8)
    }
}

impl From<Option<ActionRP>> for HumanActionToken {
    fn from(a: Option<ActionRP>) -> Self {
        a.map_or(Self::IDLE, Self::from)
    }
}

impl TryFrom<i64> for HumanActionToken {
    type Error = String;

    fn try_from(v: i64) -> std::result::Result<Self, String> {
        if (-1..=3).contains(&v) {
            Ok(HumanActionToken(v as i8))
        } else {
            Err(format!("human action token {v} outside -1..=3"))
        }
    }
}

impl From<HumanActionToken> for i64 {
    fn from(t: HumanActionToken) -> i64 {
        t.0 as i64
    }
}

impl fmt::Display for HumanActionToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Dimensions of the flat observation encodings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObsLayout {
    pub n_c: usize,
    pub n_r: usize,
    pub p_max: u32,
    pub d_z1: usize,
}

impl ObsLayout {
    pub fn new(n_c: usize, n_r: usize, p_max: u32, d_z1: usize) -> Self {
        Self { n_c, n_r, p_max, d_z1 }
    }

    /// one-hot(angular) + one-hot(radial) + one-hot(payload) + scaled s3.
    pub fn robot_dim(&self) -> usize {
        self.n_c + self.n_r + self.p_max as usize + 1 + self.n_c
    }

    pub fn shared_dim(&self) -> usize {
        self.robot_dim() + HumanActionToken::CLASSES + self.d_z1
    }

    fn check(&self, obs: &RobotObservation) -> Result<()> {
        if obs.s3.len() != self.n_c {
            return Err(Error::Dimension {
                what: "s3",
                expected: self.n_c,
                actual: obs.s3.len(),
            });
        }
        if obs.s1.col >= self.n_c || obs.s1.row >= self.n_r || obs.s2 > self.p_max {
            return Err(Error::Usage(format!(
                "observation {:?}/{} outside a {}x{} grid with p_max {}",
                obs.s1, obs.s2, self.n_c, self.n_r, self.p_max
            )));
        }
        Ok(())
    }

    pub fn encode_robot<T: Scalar>(&self, obs: &RobotObservation) -> Result<Vec<T>> {
        self.check(obs)?;
        let mut v = vec![T::zero(); self.robot_dim()];
        v[obs.s1.col] = T::one();
        v[self.n_c + obs.s1.row] = T::one();
        v[self.n_c + self.n_r + obs.s2 as usize] = T::one();
        let base = self.n_c + self.n_r + self.p_max as usize + 1;
        for (j, &d) in obs.s3.iter().enumerate() {
            v[base + j] = scale_s3(d, self.n_c);
        }
        Ok(v)
    }

    pub fn encode_shared<T: Scalar>(&self, obs: &RobotObservation, a_h: HumanActionToken, z1: &[T]) -> Result<Vec<T>> {
        if z1.len() != self.d_z1 {
            return Err(Error::Dimension {
                what: "z1",
                expected: self.d_z1,
                actual: z1.len(),
            });
        }
        let mut v = self.encode_robot(obs)?;
        let mut hot = [T::zero(); HumanActionToken::CLASSES];
        hot[a_h.slot()] = T::one();
        v.extend_from_slice(&hot);
        v.extend_from_slice(z1);
        Ok(v)
    }
}

/// Affine map of a column distance onto [0, 1]; the -1 sentinel stays -1.
pub fn scale_s3<T: Scalar>(d: i32, n_c: usize) -> T {
    if d < 0 {
        -T::one()
    } else {
        T::lit(d as f64 / (n_c - 1) as f64)
    }
}

/// `R = c1 R1 / r1_scale + c2 R2` weights.
///
/// `r1_scale` divides the task reward before weighting. At 1 the task reward
/// keeps its native units, so the per-step cost `c1 * r_step` outweighs the
/// largest closeness credit `c2` whenever `c1 * 2 > c2`; larger divisors make
/// every extra step with a cooperative human profitable.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardWeights {
    pub c1: f64,
    pub c2: f64,
    #[serde(default = "unit_scale")]
    pub r1_scale: f64,
}

fn unit_scale() -> f64 {
    1.0
}

impl RewardWeights {
    pub fn new(c1: f64, c2: f64) -> Result<Self> {
        let w = Self { c1, c2, r1_scale: 1.0 };
        w.validate()?;
        Ok(w)
    }

    pub fn with_r1_scale(mut self, r1_scale: f64) -> Result<Self> {
        self.r1_scale = r1_scale;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c1 >= 0.0 && self.c2 >= 0.0) || (self.c1 == 0.0 && self.c2 == 0.0) {
            return Err(Error::Config(format!(
                "reward weights must be non-negative and not both zero, got [{}, {}]",
                self.c1, self.c2
            )));
        }
        if !(self.r1_scale > 0.0 && self.r1_scale.is_finite()) {
            return Err(Error::Config(format!("r1_scale must be positive, got {}", self.r1_scale)));
        }
        Ok(())
    }

    /// Largest magnitude a single weighted term can take given `|r_goal|`;
    /// used to bring learning signals near unit scale.
    pub fn magnitude(&self, r_goal: f64) -> f64 {
        (self.c1 * r_goal.abs() / self.r1_scale).max(self.c2).max(f64::MIN_POSITIVE)
    }
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            c1: 10.0,
            c2: 10.0,
            r1_scale: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum ArbitrationMode {
    Shaping,
    Override { p_override: f64 },
}

impl ArbitrationMode {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ArbitrationMode::Override { p_override } if !(0.0..=1.0).contains(&p_override) => {
                Err(Error::Config(format!("p_override {p_override} outside [0, 1]")))
            }
            _ => Ok(()),
        }
    }
}

impl Default for ArbitrationMode {
    fn default() -> Self {
        ArbitrationMode::Shaping
    }
}

/// Closeness of the autonomous action to the human input, `1 - angle / pi`.
/// No credit when the human gave no input.
pub fn closeness_reward(a_a: ActionRP, a_h: HumanActionToken) -> f64 {
    match a_h.action() {
        None => 0.0,
        Some(h) => 1.0 - action_angle(a_a, h) / PI,
    }
}

/// `|r_goal|`, the divisor that maps task rewards near unit scale.
pub const TASK_REWARD_SCALE: f64 = 400.0;

/// `c1 * r1 / c.r1_scale + c2 * closeness`.
pub fn blended_reward(r1: f64, a_a: ActionRP, a_h: HumanActionToken, c: RewardWeights) -> f64 {
    c.c1 * (r1 / c.r1_scale) + c.c2 * closeness_reward(a_a, a_h)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SharedStep {
    pub reward: f64,
    pub outcome: StepOutcome,
    pub executed: ActionRP,
    /// The autonomous proposal equals the human action.
    pub followed: bool,
}

/// The shared MDP: a region episode plus arbitration and reward blending.
#[derive(Clone, Debug)]
pub struct SharedEnv {
    env: RegionEnv,
    mode: ArbitrationMode,
    weights: RewardWeights,
    rng: ChaCha8Rng,
}

impl SharedEnv {
    pub fn new(env: RegionEnv, mode: ArbitrationMode, weights: RewardWeights, seed: u64) -> Result<Self> {
        mode.validate()?;
        weights.validate()?;
        Ok(Self {
            env,
            mode,
            weights,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn region(&self) -> &RegionEnv {
        &self.env
    }

    pub fn region_mut(&mut self) -> &mut RegionEnv {
        &mut self.env
    }

    pub fn mode(&self) -> ArbitrationMode {
        self.mode
    }

    pub fn weights(&self) -> RewardWeights {
        self.weights
    }

    /// Picks the executed action. Shaping never lets the human action through.
    pub fn arbitrate(&mut self, a_a: ActionRP, a_h: HumanActionToken) -> ActionRP {
        match (self.mode, a_h.action()) {
            (ArbitrationMode::Override { p_override }, Some(h)) => {
                if self.rng.random::<f64>() < p_override {
                    h
                } else {
                    a_a
                }
            }
            _ => a_a,
        }
    }

    /// Executes one shared step. The blended reward scores the autonomous
    /// proposal regardless of which action was executed.
    pub fn shared_step(&mut self, a_a: ActionRP, a_h: HumanActionToken) -> Result<SharedStep> {
        if self.env.is_done() {
            return Err(Error::EpisodeDone(self.env.done_reason().to_string()));
        }
        let executed = self.arbitrate(a_a, a_h);
        let outcome = self.env.step(executed)?;
        Ok(SharedStep {
            reward: blended_reward(outcome.reward, a_a, a_h, self.weights),
            outcome,
            executed,
            followed: a_h.action() == Some(a_a),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::region::{Position, RegionGrid, RewardTable};

    fn layout() -> ObsLayout {
        ObsLayout::new(8, 3, 4, 5)
    }

    fn obs() -> RobotObservation {
        let mut s3 = vec![-1; 8];
        s3[0] = 0;
        s3[7] = 7;
        RobotObservation {
            s1: Position::new(2, 1),
            s2: 3,
            s3,
        }
    }

    #[test]
    fn shared_encoding_layout() {
        let l = layout();
        let v: Vec<f64> = l.encode_shared(&obs(), HumanActionToken::IDLE, &[0.0; 5]).unwrap();
        assert_eq!(v.len(), 8 + 3 + 5 + 8 + 5 + 5);
        assert_eq!(v.len(), l.shared_dim());
        assert_eq!(v[..8].iter().sum::<f64>(), 1.0);
        assert_eq!(v[2], 1.0);
        assert_eq!(v[8 + 1], 1.0);
        assert_eq!(v[11 + 3], 1.0);
        let s3 = &v[16..24];
        assert_eq!(s3[0], 0.0);
        assert_eq!(s3[1], -1.0);
        assert_eq!(s3[7], 1.0);
        let hot = &v[24..29];
        assert_eq!(hot, &[1.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(v[29..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn action_token_slots() {
        let l = layout();
        let z = [0.5f32, -0.5, 1.0, 0.0, 2.0];
        let v = l.encode_shared(&obs(), HumanActionToken::from(ActionRP::Back), &z).unwrap();
        assert_eq!(&v[24..29], &[0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(&v[29..], &z);
    }

    #[test]
    fn encoding_dimension_errors() {
        let l = layout();
        assert!(matches!(
            l.encode_shared::<f32>(&obs(), HumanActionToken::IDLE, &[0.0; 4]),
            Err(Error::Dimension { .. })
        ));
        let mut o = obs();
        o.s3.pop();
        assert!(l.encode_robot::<f32>(&o).is_err());
    }

    #[test]
    fn token_bounds() {
        assert!(HumanActionToken::new(4).is_err());
        assert!(HumanActionToken::new(-2).is_err());
        assert!(HumanActionToken::new(-1).unwrap().is_idle());
        let t: HumanActionToken = serde_json::from_str("2").unwrap();
        assert_eq!(t.action(), Some(ActionRP::Front));
        assert!(serde_json::from_str::<HumanActionToken>("7").is_err());
    }

    #[test]
    fn closeness_values() {
        use ActionRP::*;
        let h = HumanActionToken::from;
        assert_eq!(closeness_reward(Right, h(Right)), 1.0);
        assert_eq!(closeness_reward(Left, h(Right)), 0.0);
        assert_eq!(closeness_reward(Front, h(Right)), 0.5);
        assert_eq!(closeness_reward(Front, HumanActionToken::IDLE), 0.0);
        for a in ActionRP::ALL {
            for b in ActionRP::ALL {
                let r = closeness_reward(a, h(b));
                assert_eq!(r, closeness_reward(b, h(a)));
                assert!([0.0, 0.5, 1.0].contains(&r));
            }
        }
    }

    #[test]
    fn blended_reward_arithmetic() {
        let h = HumanActionToken::from(ActionRP::Right);
        let scaled = |c1, c2| RewardWeights::new(c1, c2).unwrap().with_r1_scale(TASK_REWARD_SCALE).unwrap();
        // r1 / 400 = -0.1
        let r = blended_reward(-40.0, ActionRP::Right, h, scaled(10.0, 10.0));
        assert!((r - 9.0).abs() < 1e-12);
        let r = blended_reward(-40.0, ActionRP::Right, h, scaled(10.0, 0.0));
        assert!((r + 1.0).abs() < 1e-12);
        let r = blended_reward(-2.0, ActionRP::Right, h, RewardWeights::default());
        assert_eq!(r, -10.0);
        assert!(RewardWeights::default().with_r1_scale(0.0).is_err());
        let noisy = HumanActionToken::from(ActionRP::Front);
        let a = blended_reward(-2.0, ActionRP::Right, noisy, RewardWeights::new(10.0, 5.0).unwrap());
        let b = blended_reward(-2.0, ActionRP::Right, noisy, RewardWeights::new(10.0, 10.0).unwrap());
        assert!((a - b + 5.0 * 0.5).abs() < 1e-12);
        assert!(RewardWeights::new(0.0, 0.0).is_err());
    }

    fn shared(mode: ArbitrationMode, seed: u64) -> SharedEnv {
        let grid = RegionGrid::empty(6, 3, 4).with_objects(&[((3, 2), 1)]);
        let env = RegionEnv::new(grid, RewardTable::default(), 10_000);
        SharedEnv::new(env, mode, RewardWeights::default(), seed).unwrap()
    }

    #[test]
    fn shaping_executes_autonomous_action() {
        let mut s = shared(ArbitrationMode::Shaping, 1);
        for a_h in [-1i64, 0, 1, 2, 3] {
            let step = s.shared_step(ActionRP::Back, HumanActionToken::new(a_h).unwrap()).unwrap();
            assert_eq!(step.executed, ActionRP::Back);
            assert_eq!(step.followed, a_h == 3);
            s.shared_step(ActionRP::Front, HumanActionToken::IDLE).unwrap();
        }
    }

    #[test]
    fn certain_override() {
        let mut s = shared(ArbitrationMode::Override { p_override: 1.0 }, 1);
        let step = s.shared_step(ActionRP::Left, HumanActionToken::from(ActionRP::Front)).unwrap();
        assert_eq!(step.executed, ActionRP::Front);
        // The proposal is what gets scored.
        let expected = blended_reward(step.outcome.reward, ActionRP::Left, HumanActionToken::from(ActionRP::Front), RewardWeights::default());
        assert_eq!(step.reward, expected);
        let step = s.shared_step(ActionRP::Left, HumanActionToken::IDLE).unwrap();
        assert_eq!(step.executed, ActionRP::Left);
    }

    #[test]
    fn override_frequency() {
        let mut s = shared(ArbitrationMode::Override { p_override: 0.8 }, 99);
        let n = 10_000;
        let hits = (0..n)
            .filter(|_| s.arbitrate(ActionRP::Left, HumanActionToken::from(ActionRP::Right)) == ActionRP::Right)
            .count();
        let f = hits as f64 / n as f64;
        assert!((0.78..=0.82).contains(&f), "{f}");
    }

    #[test]
    fn invalid_override_probability() {
        let env = RegionEnv::new(RegionGrid::empty(3, 1, 1), RewardTable::default(), 10);
        assert!(SharedEnv::new(env, ArbitrationMode::Override { p_override: 1.5 }, RewardWeights::default(), 0).is_err());
    }
}
