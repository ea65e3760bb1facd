//! Session lifecycle: creation, ordered steps, persistence and finalization.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use thiserror::Error;

use workbench_core::agents::AutonomousAgent;
use workbench_core::assist::{LatentTracker, SharedPilot};
use workbench_core::checkpoint::{load_cvae, load_policy};
use workbench_core::config::{ExperimentConfig, PolicyRef};
use workbench_core::eval::episode_stats;
use workbench_core::learn::PolicyPilot;
use workbench_core::record::{EpisodeHeader, EpisodeRecord, EpisodeWriter, RecordMode, StepRecord};
use workbench_core::region::{compute_spaces, RegionEnv, RegionGrid};
use workbench_core::shared::{HumanActionToken, ObsLayout, SharedEnv};
use workbench_core::stages::evaluation_region;
use workbench_core::{Policy, Real};

use crate::protocol::{CreateSession, ErrorBody, StateView, StepView};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("unknown policy {0}")]
    UnknownPolicy(String),
    #[error("{0} mode needs a policy id")]
    MissingPolicy(&'static str),
    #[error("expected seq {expected}, got {got}")]
    Sequence { expected: u64, got: u64 },
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error(transparent)]
    Core(#[from] workbench_core::Error),
}

impl ServiceError {
    pub fn body(&self) -> ErrorBody {
        let kind = match self {
            ServiceError::UnknownSession(_) => "unknown_session",
            ServiceError::UnknownPolicy(_) => "unknown_policy",
            ServiceError::MissingPolicy(_) => "missing_policy",
            ServiceError::Sequence { .. } => "sequence",
            ServiceError::Invalid(_) => "invalid",
            ServiceError::Core(e) => e.kind(),
        };
        ErrorBody {
            kind: kind.into(),
            message: self.to_string(),
            done_reason: None,
            expected_seq: match self {
                ServiceError::Sequence { expected, .. } => Some(*expected),
                _ => None,
            },
        }
    }
}

pub type ServiceResult<T> = Result<T, ServiceError>;

enum Driver {
    Manual,
    Shared(Box<SharedPilot<Real>>),
    Autonomous(Box<PolicyPilot<Real>>),
}

/// One live episode. Mutated by one request at a time through the manager.
pub struct Session {
    id: String,
    mode: RecordMode,
    env: SharedEnv,
    driver: Driver,
    record: EpisodeRecord,
    writer: Option<EpisodeWriter>,
    path: PathBuf,
}

impl Session {
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn mode(&self) -> RecordMode {
        self.mode
    }

    pub fn steps(&self) -> usize {
        self.record.steps.len()
    }

    pub fn is_done(&self) -> bool {
        self.env.region().is_done()
    }

    pub fn view(&self) -> StateView {
        let region = self.env.region();
        let spaces = compute_spaces(region.grid(), region.payload());
        StateView {
            mode: self.mode,
            step: self.steps(),
            step_limit: region.step_limit(),
            grid: region.grid().clone(),
            position: region.position(),
            payload: region.payload(),
            observation: region.observe(),
            subgoals: spaces.augmented_subgoals.into_iter().collect(),
            obstacles: spaces.obstacles.into_iter().collect(),
            done: region.is_done(),
            done_reason: region.done_reason(),
            stats: episode_stats(&self.record),
        }
    }

    /// Executes one step. `seq` must equal the number of steps taken.
    pub fn submit(&mut self, seq: u64, token: HumanActionToken, injected: bool) -> ServiceResult<StepView> {
        if self.is_done() {
            let reason = self.env.region().done_reason();
            let err = workbench_core::Error::EpisodeDone(reason.to_string());
            return Err(ServiceError::Core(err));
        }
        let expected = self.steps() as u64;
        if seq != expected {
            return Err(ServiceError::Sequence { expected, got: seq });
        }
        let obs = self.env.region().observe();
        let t = self.steps();
        let (a_a, executed, followed, outcome, blended) = match &mut self.driver {
            Driver::Manual => {
                let region = self.env.region_mut();
                let out = match token.action() {
                    Some(a) => region.step(a)?,
                    None => region.wait()?,
                };
                (None, token.action(), false, out, None)
            }
            Driver::Shared(pilot) => {
                if t == 0 {
                    pilot.reset();
                }
                let a_a = pilot.propose(self.env.region(), token)?;
                let st = self.env.shared_step(a_a, token)?;
                (Some(a_a), Some(st.executed), st.followed, st.outcome, Some(st.reward))
            }
            Driver::Autonomous(pilot) => {
                let a = workbench_core::agents::ObsPolicy::greedy(pilot.as_ref(), &obs)?;
                let out = self.env.region_mut().step(a)?;
                (Some(a), Some(a), token.action() == Some(a), out, None)
            }
        };
        let step = StepRecord::new(t, obs, token, a_a, executed, &outcome, blended);
        if let Some(w) = &mut self.writer {
            w.step(&step)?;
        }
        self.record.push(step);
        if outcome.done {
            self.close()?;
        }
        Ok(StepView {
            t,
            a_h: token,
            a_a,
            executed,
            followed,
            injected,
            reward: outcome.reward,
            blended,
            events: outcome.events,
            state: self.view(),
        })
    }

    fn close(&mut self) -> ServiceResult<()> {
        let fin = self.env.region().observe();
        if let Some(w) = self.writer.take() {
            w.finish(&fin)?;
        }
        self.record.final_observation = Some(fin);
        Ok(())
    }

    /// Closes the episode file and returns its path.
    pub fn finalize(mut self) -> ServiceResult<PathBuf> {
        self.close()?;
        Ok(self.path)
    }

    pub fn record(&self) -> &EpisodeRecord {
        &self.record
    }
}

/// Loaded models of one configured policy id.
struct LoadedPolicy {
    policy: Policy,
    cvae: Option<(workbench_core::Cvae, Policy)>,
}

/// Owns all live sessions and the policies they may use.
pub struct SessionManager {
    config: ExperimentConfig,
    episodes_dir: PathBuf,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
    policies: Mutex<HashMap<String, Arc<LoadedPolicy>>>,
}

impl SessionManager {
    pub fn new(config: ExperimentConfig) -> Self {
        let episodes_dir = config.service.episodes_dir.clone();
        Self {
            config,
            episodes_dir,
            sessions: Mutex::new(HashMap::new()),
            policies: Mutex::new(HashMap::new()),
        }
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn episodes_dir(&self) -> &Path {
        &self.episodes_dir
    }

    pub fn policy_ids(&self) -> Vec<String> {
        self.config.service.policies.iter().map(|p| p.id.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.sessions.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn policy(&self, id: &str) -> ServiceResult<Arc<LoadedPolicy>> {
        if let Some(p) = self.policies.lock().unwrap().get(id) {
            return Ok(p.clone());
        }
        let r: &PolicyRef = self
            .config
            .service
            .policies
            .iter()
            .find(|p| p.id == id)
            .ok_or_else(|| ServiceError::UnknownPolicy(id.into()))?;
        let (policy, _) = load_policy::<Real>(&r.policy)?;
        let cvae = match (&r.cvae, &r.surrogate) {
            (Some(c), Some(s)) => Some((load_cvae::<Real>(c)?.0, load_policy::<Real>(s)?.0)),
            (None, None) => None,
            _ => return Err(ServiceError::Invalid(format!("policy {id}: cvae and surrogate go together"))),
        };
        let loaded = Arc::new(LoadedPolicy { policy, cvae });
        self.policies.lock().unwrap().insert(id.into(), loaded.clone());
        Ok(loaded)
    }

    fn region(&self, req: &CreateSession, seed: u64) -> ServiceResult<RegionGrid> {
        let g = &self.config.grid;
        match &req.region {
            Some(r) => {
                r.validate(g.obj_max)?;
                Ok(r.clone())
            }
            None => Ok(evaluation_region(&self.config, seed)?),
        }
    }

    pub fn create(&self, req: CreateSession) -> ServiceResult<(String, StateView)> {
        let cfg = &self.config;
        let mode = req.mode.unwrap_or(RecordMode::Manual);
        let seed = req.seed.unwrap_or(cfg.seed);
        let grid = self.region(&req, seed)?;
        let layout = ObsLayout::new(grid.n_c, grid.n_r, grid.p_max, cfg.cvae.d_z1);
        let driver = match mode {
            RecordMode::Manual => Driver::Manual,
            RecordMode::Shared => {
                let id = req.policy.as_deref().ok_or(ServiceError::MissingPolicy("shared"))?;
                let p = self.policy(id)?;
                let tracker = match &p.cvae {
                    Some((model, surrogate)) => {
                        let robot = ObsLayout::new(grid.n_c, grid.n_r, grid.p_max, 0);
                        let pilot = PolicyPilot::new(surrogate.clone(), robot)?;
                        LatentTracker::new(layout, model.clone(), Box::new(pilot), cfg.z_mode, seed)?
                    }
                    None => LatentTracker::zero(layout),
                };
                Driver::Shared(Box::new(SharedPilot::new(p.policy.clone(), tracker)?))
            }
            RecordMode::Autonomous => {
                let id = req.policy.as_deref().ok_or(ServiceError::MissingPolicy("autonomous"))?;
                let p = self.policy(id)?;
                let robot = ObsLayout::new(grid.n_c, grid.n_r, grid.p_max, 0);
                Driver::Autonomous(Box::new(PolicyPilot::new(p.policy.clone(), robot)?))
            }
        };
        let region = RegionEnv::from_config(grid, &cfg.grid, cfg.rewards.clone());
        let env = SharedEnv::new(region, cfg.arbitration, cfg.weights, seed)?;
        let id = uuid::Uuid::new_v4().simple().to_string();
        let mut header = EpisodeHeader::for_env(&env, mode);
        header.episode_id = Some(id.clone());
        header.seed = Some(seed);
        let date = chrono::Utc::now().format("%Y-%m-%d").to_string();
        let path = self.episodes_dir.join(date).join(format!("{id}.jsonl"));
        let writer = EpisodeWriter::create(&path, &header)?;
        let mut session = Session {
            id: id.clone(),
            mode,
            env,
            driver,
            record: EpisodeRecord::new(header),
            writer: Some(writer),
            path,
        };
        if session.is_done() {
            session.close()?;
        }
        let view = session.view();
        self.sessions.lock().unwrap().insert(id.clone(), Arc::new(Mutex::new(session)));
        Ok((id, view))
    }

    fn get(&self, id: &str) -> ServiceResult<Arc<Mutex<Session>>> {
        self.sessions
            .lock()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::UnknownSession(id.into()))
    }

    pub fn state(&self, id: &str) -> ServiceResult<StateView> {
        Ok(self.get(id)?.lock().unwrap().view())
    }

    pub fn mode(&self, id: &str) -> ServiceResult<RecordMode> {
        Ok(self.get(id)?.lock().unwrap().mode())
    }

    pub fn submit(&self, id: &str, seq: u64, token: HumanActionToken) -> ServiceResult<StepView> {
        self.get(id)?.lock().unwrap().submit(seq, token, false)
    }

    /// Injects an idle token for the session's next step.
    pub fn inject_idle(&self, id: &str) -> ServiceResult<StepView> {
        let s = self.get(id)?;
        let mut s = s.lock().unwrap();
        let seq = s.steps() as u64;
        s.submit(seq, HumanActionToken::IDLE, true)
    }

    pub fn finalize(&self, id: &str) -> ServiceResult<PathBuf> {
        let s = self
            .sessions
            .lock()
            .unwrap()
            .remove(id)
            .ok_or_else(|| ServiceError::UnknownSession(id.into()))?;
        let s = match Arc::try_unwrap(s) {
            Ok(m) => m.into_inner().unwrap(),
            Err(_) => return Err(ServiceError::Invalid(format!("session {id} is busy"))),
        };
        s.finalize()
    }
}
