//! Episode records and their JSONL persistence (`episode/1`).
//!
//! A file holds one JSON object per line. The first line is the header with
//! the initial region, followed by one line per step and an optional closing
//! line with the final observation:
//!
//! ```text
//! {"schema":"episode/1","kind":"header","mode":"manual","region":{...},...}
//! {"schema":"episode/1","kind":"step","t":0,"obs":{"s1":[0,0],"s2":0,"s3":[...]},"a_h":1,...}
//! {"schema":"episode/1","kind":"end","final_obs":{...}}
//! ```

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::region::{ActionRP, DoneReason, Event, RegionEnv, RegionGrid, RewardTable, RobotObservation, StepOutcome};
use crate::shared::{ArbitrationMode, HumanActionToken, RewardWeights, SharedEnv};

pub const EPISODE_SCHEMA: &str = "episode/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordMode {
    Manual,
    Shared,
    Autonomous,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeHeader {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub episode_id: Option<String>,
    pub mode: RecordMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub region: RegionGrid,
    pub step_limit: usize,
    pub rewards: RewardTable,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<RewardWeights>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arbitration: Option<ArbitrationMode>,
}

impl EpisodeHeader {
    pub fn for_env(env: &SharedEnv, mode: RecordMode) -> Self {
        let region = env.region();
        let shared = mode != RecordMode::Manual;
        Self {
            episode_id: None,
            mode,
            seed: None,
            region: region.initial_grid().clone(),
            step_limit: region.step_limit(),
            rewards: region.rewards().clone(),
            weights: shared.then(|| env.weights()),
            arbitration: shared.then(|| env.mode()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub obs: RobotObservation,
    pub a_h: HumanActionToken,
    /// Autonomous proposal; absent in manual episodes.
    pub a_a: Option<ActionRP>,
    /// Action sent to the robot; absent when it stood still.
    pub executed: Option<ActionRP>,
    /// Task reward of the step.
    pub reward: f64,
    /// Weighted task + closeness reward, for shared episodes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blended: Option<f64>,
    pub events: Vec<Event>,
    pub done_reason: DoneReason,
}

impl StepRecord {
    pub fn new(
        t: usize,
        obs: RobotObservation,
        a_h: HumanActionToken,
        a_a: Option<ActionRP>,
        executed: Option<ActionRP>,
        outcome: &StepOutcome,
        blended: Option<f64>,
    ) -> Self {
        Self {
            t,
            obs,
            a_h,
            a_a,
            executed,
            reward: outcome.reward,
            blended,
            events: outcome.events.clone(),
            done_reason: outcome.done_reason,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Line {
    Header(EpisodeHeader),
    Step(StepRecord),
    End { final_obs: RobotObservation },
}

#[derive(Serialize, Deserialize)]
struct LineDoc {
    schema: String,
    #[serde(flatten)]
    line: Line,
}

fn encode_line(line: Line) -> String {
    serde_json::to_string(&LineDoc {
        schema: EPISODE_SCHEMA.to_string(),
        line,
    })
    .expect("episode line serialises")
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub header: EpisodeHeader,
    pub steps: Vec<StepRecord>,
    pub final_observation: Option<RobotObservation>,
}

impl EpisodeRecord {
    pub fn new(header: EpisodeHeader) -> Self {
        Self {
            header,
            steps: Vec::new(),
            final_observation: None,
        }
    }

    pub fn push(&mut self, step: StepRecord) {
        self.steps.push(step);
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn task_return(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    /// Sum of blended rewards, falling back to task rewards for manual steps.
    pub fn blended_return(&self) -> f64 {
        self.steps.iter().map(|s| s.blended.unwrap_or(s.reward)).sum()
    }

    pub fn done_reason(&self) -> DoneReason {
        self.steps.last().map_or(DoneReason::Running, |s| s.done_reason)
    }

    pub fn human_actions(&self) -> Vec<HumanActionToken> {
        self.steps.iter().map(|s| s.a_h).collect()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = encode_line(Line::Header(self.header.clone()));
        out.push('\n');
        for s in &self.steps {
            out.push_str(&encode_line(Line::Step(s.clone())));
            out.push('\n');
        }
        if let Some(obs) = &self.final_observation {
            out.push_str(&encode_line(Line::End { final_obs: obs.clone() }));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut record: Option<EpisodeRecord> = None;
        for (i, raw) in text.lines().enumerate() {
            if raw.trim().is_empty() {
                continue;
            }
            let doc: LineDoc = serde_json::from_str(raw)?;
            if doc.schema != EPISODE_SCHEMA {
                return Err(Error::Schema {
                    expected: EPISODE_SCHEMA.into(),
                    found: doc.schema,
                });
            }
            match (doc.line, record.as_mut()) {
                (Line::Header(h), None) => record = Some(EpisodeRecord::new(h)),
                (Line::Step(s), Some(r)) => {
                    if s.t != r.steps.len() {
                        return Err(Error::Usage(format!("line {}: step t={} out of order", i + 1, s.t)));
                    }
                    r.push(s)
                }
                (Line::End { final_obs }, Some(r)) => r.final_observation = Some(final_obs),
                (_, _) => return Err(Error::Usage(format!("line {}: header must come first, exactly once", i + 1))),
            }
        }
        record.ok_or_else(|| Error::Usage("episode file has no header".into()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&text)
    }

    /// Re-executes the recorded executed actions on a fresh copy of the
    /// initial region and returns the task rewards.
    pub fn replay_rewards(&self) -> Result<Vec<f64>> {
        let h = &self.header;
        let mut env = RegionEnv::new(h.region.clone(), h.rewards.clone(), h.step_limit);
        self.steps
            .iter()
            .map(|s| {
                Ok(match s.executed {
                    Some(a) => env.step(a)?.reward,
                    None => env.wait()?.reward,
                })
            })
            .collect()
    }
}

/// Append-only writer used while an episode is still running.
pub struct EpisodeWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl EpisodeWriter {
    pub fn create(path: &Path, header: &EpisodeHeader) -> Result<Self> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let file = OpenOptions::new()
            .create_new(true)
            .write(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut w = Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        };
        w.line(Line::Header(header.clone()))?;
        Ok(w)
    }

    fn line(&mut self, line: Line) -> Result<()> {
        writeln!(self.out, "{}", encode_line(line)).map_err(|e| Error::io(&self.path, e))?;
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }

    pub fn step(&mut self, step: &StepRecord) -> Result<()> {
        self.line(Line::Step(step.clone()))
    }

    pub fn finish(mut self, final_obs: &RobotObservation) -> Result<PathBuf> {
        self.line(Line::End {
            final_obs: final_obs.clone(),
        })?;
        Ok(self.path)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// Reads every `*.jsonl` episode below `dir`, in path order.
pub fn read_episode_dir(dir: &Path) -> Result<Vec<EpisodeRecord>> {
    let mut files = Vec::new();
    collect_jsonl(dir, &mut files)?;
    files.sort();
    files.iter().map(|p| EpisodeRecord::read(p)).collect()
}

fn collect_jsonl(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_jsonl(&path, out)?;
        } else if path.extension().is_some_and(|e| e == "jsonl") {
            out.push(path);
        }
    }
    Ok(())
}

/// Line-by-line check that a file is a well-formed `episode/1` record.
pub fn validate_file(path: &Path) -> Result<usize> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    for line in BufReader::new(file).lines() {
        text.push_str(&line.map_err(|e| Error::io(path, e))?);
        text.push('\n');
    }
    Ok(EpisodeRecord::from_jsonl(&text)?.len())
}
