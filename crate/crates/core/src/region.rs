//! Adaptive radial grid world.
//!
//! The region around the machine base is discretised into `n_c` angular
//! columns and `n_r` radial rows. Row 0 is nearest the base. Cells are indexed
//! column-major: `cell = col * n_r + row`, so each angular column is a
//! contiguous run of `n_r` cells.

use std::collections::BTreeSet;
use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const REGION_SCHEMA: &str = "region/1";

/// Sampling and shape parameters for a region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub n_c: usize,
    pub n_r: usize,
    pub p_max: u32,
    /// Upper bound for per-cell object counts; also the truncation bound of the
    /// count distribution.
    pub obj_max: u32,
    pub object_mean: f64,
    pub object_std: f64,
    /// Probability that a cell is populated at all before its count is drawn.
    pub occupancy: f64,
    pub start_cell: usize,
    /// Defaults to the start cell.
    pub storage_cell: Option<usize>,
    /// Defaults to `10 * n_c * n_r`.
    pub step_limit: Option<usize>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            n_c: 12,
            n_r: 3,
            p_max: 4,
            obj_max: 4,
            object_mean: 2.0,
            object_std: 1.0,
            occupancy: 1.0,
            start_cell: 0,
            storage_cell: None,
            step_limit: None,
        }
    }
}

impl GridConfig {
    pub fn cells(&self) -> usize {
        self.n_c * self.n_r
    }

    pub fn storage(&self) -> usize {
        self.storage_cell.unwrap_or(self.start_cell)
    }

    pub fn step_limit(&self) -> usize {
        self.step_limit.unwrap_or(10 * self.n_c * self.n_r)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_c < 3 {
            return Err(Error::Config(format!("n_c must be >= 3, got {}", self.n_c)));
        }
        if self.n_r < 1 {
            return Err(Error::Config("n_r must be >= 1".into()));
        }
        if self.p_max < 1 {
            return Err(Error::Config("p_max must be >= 1".into()));
        }
        if self.start_cell >= self.cells() || self.storage() >= self.cells() {
            return Err(Error::Config(format!(
                "start/storage cell out of range for {} cells",
                self.cells()
            )));
        }
        if !(self.object_std >= 0.0) || !self.object_mean.is_finite() {
            return Err(Error::Config("object distribution parameters must be finite, std >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.occupancy) {
            return Err(Error::Config("occupancy must lie in [0, 1]".into()));
        }
        if self.step_limit == Some(0) {
            return Err(Error::Config("step_limit must be positive".into()));
        }
        Ok(())
    }
}

/// The static layout of one region plus its per-cell object counts.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct RegionGrid {
    pub n_c: usize,
    pub n_r: usize,
    pub p_max: u32,
    pub storage_cell: usize,
    pub start_cell: usize,
    pub objects: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
struct RegionDoc {
    schema: String,
    n_c: usize,
    n_r: usize,
    p_max: u32,
    storage_cell: usize,
    start_cell: usize,
    objects: Vec<u32>,
}

impl RegionGrid {
    /// An object-free region with the given shape.
    pub fn empty(n_c: usize, n_r: usize, p_max: u32) -> Self {
        Self {
            n_c,
            n_r,
            p_max,
            storage_cell: 0,
            start_cell: 0,
            objects: vec![0; n_c * n_r],
        }
    }

    pub fn with_objects(mut self, placements: &[((usize, usize), u32)]) -> Self {
        for &((col, row), count) in placements {
            let cell = self.cell(Position::new(col, row));
            self.objects[cell] = count;
        }
        self
    }

    pub fn cells(&self) -> usize {
        self.n_c * self.n_r
    }

    #[inline]
    pub fn cell(&self, p: Position) -> usize {
        p.col * self.n_r + p.row
    }

    #[inline]
    pub fn position(&self, cell: usize) -> Position {
        Position::new(cell / self.n_r, cell % self.n_r)
    }

    pub fn total_objects(&self) -> u32 {
        self.objects.iter().sum()
    }

    pub fn validate(&self, obj_max: u32) -> Result<()> {
        if self.n_c < 3 || self.n_r < 1 {
            return Err(Error::Config(format!(
                "grid must have n_c >= 3 and n_r >= 1, got {}x{}",
                self.n_c, self.n_r
            )));
        }
        if self.p_max < 1 {
            return Err(Error::Config("p_max must be >= 1".into()));
        }
        if self.objects.len() != self.cells() {
            return Err(Error::Dimension {
                what: "region objects",
                expected: self.cells(),
                actual: self.objects.len(),
            });
        }
        if self.storage_cell >= self.cells() || self.start_cell >= self.cells() {
            return Err(Error::Config("storage/start cell out of range".into()));
        }
        if let Some(c) = self.objects.iter().position(|&n| n > obj_max) {
            return Err(Error::Config(format!(
                "cell {c} holds {} objects, above obj_max {obj_max}",
                self.objects[c]
            )));
        }
        if self.objects[self.storage_cell] != 0 || self.objects[self.start_cell] != 0 {
            return Err(Error::Config("start and storage cells must be empty".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&RegionDoc {
            schema: REGION_SCHEMA.to_string(),
            n_c: self.n_c,
            n_r: self.n_r,
            p_max: self.p_max,
            storage_cell: self.storage_cell,
            start_cell: self.start_cell,
            objects: self.objects.clone(),
        })
        .expect("region serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: RegionDoc = serde_json::from_str(text)?;
        if doc.schema != REGION_SCHEMA {
            return Err(Error::Schema {
                expected: REGION_SCHEMA.into(),
                found: doc.schema,
            });
        }
        let grid = RegionGrid {
            n_c: doc.n_c,
            n_r: doc.n_r,
            p_max: doc.p_max,
            storage_cell: doc.storage_cell,
            start_cell: doc.start_cell,
            objects: doc.objects,
        };
        grid.validate(u32::MAX)?;
        Ok(grid)
    }
}

impl Serialize for RegionGrid {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        RegionDoc {
            schema: REGION_SCHEMA.to_string(),
            n_c: self.n_c,
            n_r: self.n_r,
            p_max: self.p_max,
            storage_cell: self.storage_cell,
            start_cell: self.start_cell,
            objects: self.objects.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for RegionGrid {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let doc = RegionDoc::deserialize(d)?;
        if doc.schema != REGION_SCHEMA {
            return Err(serde::de::Error::custom(format!(
                "expected schema {REGION_SCHEMA}, found {}",
                doc.schema
            )));
        }
        Ok(RegionGrid {
            n_c: doc.n_c,
            n_r: doc.n_r,
            p_max: doc.p_max,
            storage_cell: doc.storage_cell,
            start_cell: doc.start_cell,
            objects: doc.objects,
        })
    }
}

/// Draws a region with independent truncated-Gaussian object counts per cell.
pub fn sample_region<R: Rng + ?Sized>(config: &GridConfig, rng: &mut R) -> Result<RegionGrid> {
    config.validate()?;
    let upper = config.obj_max as f64;
    let normal = if config.object_std > 0.0 {
        Some(Normal::new(config.object_mean, config.object_std).map_err(|e| Error::Config(e.to_string()))?)
    } else {
        None
    };
    let storage = config.storage();
    let mut objects = Vec::with_capacity(config.cells());
    for cell in 0..config.cells() {
        // Draws happen for every cell, including start/storage, so that the
        // random stream does not depend on where those cells are.
        let occupied = config.occupancy >= 1.0 || rng.random::<f64>() < config.occupancy;
        let x = match &normal {
            None => config.object_mean.clamp(0.0, upper),
            Some(dist) => truncated_draw(dist, 0.0, upper, config.object_mean, rng),
        };
        let count = if occupied && cell != config.start_cell && cell != storage {
            x.round() as u32
        } else {
            0
        };
        objects.push(count.min(config.obj_max));
    }
    Ok(RegionGrid {
        n_c: config.n_c,
        n_r: config.n_r,
        p_max: config.p_max,
        storage_cell: storage,
        start_cell: config.start_cell,
        objects,
    })
}

fn truncated_draw<R: Rng + ?Sized>(dist: &Normal<f64>, lo: f64, hi: f64, mean: f64, rng: &mut R) -> f64 {
    for _ in 0..10_000 {
        let x = dist.sample(rng);
        if (lo..=hi).contains(&x) {
            return x;
        }
    }
    // Only reachable when the interval carries negligible mass.
    mean.clamp(lo, hi)
}

/// End-effector position: angular column and radial row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "(usize, usize)", into = "(usize, usize)")]
pub struct Position {
    pub col: usize,
    pub row: usize,
}

impl Position {
    pub const fn new(col: usize, row: usize) -> Self {
        Self { col, row }
    }
}

impl From<(usize, usize)> for Position {
    fn from((col, row): (usize, usize)) -> Self {
        Self { col, row }
    }
}

impl From<Position> for (usize, usize) {
    fn from(p: Position) -> Self {
        (p.col, p.row)
    }
}

/// Cell-relative movement. Left/right step one angular column with
/// wraparound; front moves one row toward the base, back one row away.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "i64", into = "i64")]
pub enum ActionRP {
    Left = 0,
    Right = 1,
    Front = 2,
    Back = 3,
}

impl ActionRP {
    pub const ALL: [ActionRP; 4] = [ActionRP::Left, ActionRP::Right, ActionRP::Front, ActionRP::Back];

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

impl TryFrom<i64> for ActionRP {
    type Error = String;

    fn try_from(v: i64) -> std::result::Result<Self, String> {
        usize::try_from(v)
            .ok()
            .and_then(Self::from_index)
            .ok_or_else(|| format!("action token {v} outside 0..=3"))
    }
}

impl From<ActionRP> for i64 {
    fn from(a: ActionRP) -> i64 {
        a as i64
    }
}

impl fmt::Display for ActionRP {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ActionRP::Left => "left",
            ActionRP::Right => "right",
            ActionRP::Front => "front",
            ActionRP::Back => "back",
        };
        f.write_str(s)
    }
}

/// Per-event reward constants. Every term is additive within a step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardTable {
    pub r_step: f64,
    pub r_cut_per_object: f64,
    pub r_store_per_object: f64,
    pub r_goal: f64,
    pub r_collision: f64,
    pub r_out_of_bounds: f64,
    pub r_carry_per_unit: f64,
    pub r_trapped: f64,
}

impl Default for RewardTable {
    fn default() -> Self {
        Self {
            r_step: -2.0,
            r_cut_per_object: 20.0,
            r_store_per_object: 20.0,
            r_goal: 400.0,
            r_collision: -20.0,
            r_out_of_bounds: -20.0,
            r_carry_per_unit: -5.0,
            r_trapped: -400.0,
        }
    }
}

/// Classification of object cells for a given payload.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ObjectSpaces {
    pub objects: BTreeSet<usize>,
    pub subgoals: BTreeSet<usize>,
    pub augmented_subgoals: BTreeSet<usize>,
    pub obstacles: BTreeSet<usize>,
}

/// Splits object cells into reachable subgoals (innermost object cell of each
/// angular column) and obstacles (every object cell behind it), then builds
/// the payload-conditioned target set.
pub fn compute_spaces(grid: &RegionGrid, payload: u32) -> ObjectSpaces {
    let mut spaces = ObjectSpaces::default();
    for col in 0..grid.n_c {
        let mut seen = false;
        for row in 0..grid.n_r {
            let cell = grid.cell(Position::new(col, row));
            if grid.objects[cell] == 0 {
                continue;
            }
            spaces.objects.insert(cell);
            if seen {
                spaces.obstacles.insert(cell);
            } else {
                spaces.subgoals.insert(cell);
                seen = true;
            }
        }
    }
    spaces.augmented_subgoals = if payload >= grid.p_max {
        BTreeSet::from([grid.storage_cell])
    } else if payload > 0 {
        let mut s = spaces.subgoals.clone();
        s.insert(grid.storage_cell);
        s
    } else {
        spaces.subgoals.clone()
    };
    spaces
}

/// Whether the arm cannot enter `cell`: the cell is an obstacle or sits
/// radially behind one in its column.
pub fn is_shadowed(grid: &RegionGrid, spaces: &ObjectSpaces, cell: usize) -> bool {
    let p = grid.position(cell);
    (0..=p.row).any(|row| spaces.obstacles.contains(&grid.cell(Position::new(p.col, row))))
}

/// `s^RP = (s1, s2, s3)`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RobotObservation {
    /// (angular index, radial index)
    pub s1: Position,
    /// Payload count.
    pub s2: u32,
    /// Counter-clockwise column distance to every column holding a target, or -1.
    pub s3: Vec<i32>,
}

impl RobotObservation {
    pub fn cfm_ee(&self, p_max: u32) -> f64 {
        (p_max - self.s2.min(p_max)) as f64 / p_max as f64
    }
}

/// Builds the observation for a robot at `position` carrying `payload`.
pub fn observe(grid: &RegionGrid, position: Position, payload: u32) -> RobotObservation {
    let spaces = compute_spaces(grid, payload);
    observe_with(grid, &spaces, position, payload)
}

fn observe_with(grid: &RegionGrid, spaces: &ObjectSpaces, position: Position, payload: u32) -> RobotObservation {
    let mut s3 = vec![-1i32; grid.n_c];
    for &cell in &spaces.augmented_subgoals {
        let col = grid.position(cell).col;
        s3[col] = ((col + grid.n_c - position.col) % grid.n_c) as i32;
    }
    RobotObservation {
        s1: position,
        s2: payload,
        s3,
    }
}

/// Target cell of `action` from `p`, or `None` when it leaves the region.
pub fn neighbor(grid: &RegionGrid, p: Position, action: ActionRP) -> Option<Position> {
    match action {
        ActionRP::Left => Some(Position::new((p.col + grid.n_c - 1) % grid.n_c, p.row)),
        ActionRP::Right => Some(Position::new((p.col + 1) % grid.n_c, p.row)),
        ActionRP::Front => p.row.checked_sub(1).map(|row| Position::new(p.col, row)),
        ActionRP::Back => (p.row + 1 < grid.n_r).then(|| Position::new(p.col, p.row + 1)),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DoneReason {
    Goal,
    Trapped,
    StepLimit,
    Running,
}

impl DoneReason {
    pub fn is_done(self) -> bool {
        self != DoneReason::Running
    }
}

impl fmt::Display for DoneReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DoneReason::Goal => "goal",
            DoneReason::Trapped => "trapped",
            DoneReason::StepLimit => "step_limit",
            DoneReason::Running => "running",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Event {
    Cut(u32),
    Store(u32),
    Collision,
    OutOfBounds,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub next_observation: RobotObservation,
    pub reward: f64,
    pub done: bool,
    pub done_reason: DoneReason,
    pub events: Vec<Event>,
}

/// One running episode on a region. Single owner; `Send` but not shared.
#[derive(Clone, Debug)]
pub struct RegionEnv {
    initial: RegionGrid,
    grid: RegionGrid,
    rewards: RewardTable,
    step_limit: usize,
    position: Position,
    payload: u32,
    steps: usize,
    done: DoneReason,
    cut_total: u32,
    deposited_total: u32,
}

impl RegionEnv {
    pub fn new(grid: RegionGrid, rewards: RewardTable, step_limit: usize) -> Self {
        let position = grid.position(grid.start_cell);
        let mut env = Self {
            initial: grid.clone(),
            grid,
            rewards,
            step_limit: step_limit.max(1),
            position,
            payload: 0,
            steps: 0,
            done: DoneReason::Running,
            cut_total: 0,
            deposited_total: 0,
        };
        env.reset();
        env
    }

    pub fn from_config(grid: RegionGrid, config: &GridConfig, rewards: RewardTable) -> Self {
        Self::new(grid, rewards, config.step_limit())
    }

    /// Places the robot at an arbitrary position and payload on `grid`, which
    /// becomes the episode's initial region. Used to set up specific
    /// configurations.
    pub fn with_state(grid: RegionGrid, rewards: RewardTable, step_limit: usize, position: Position, payload: u32) -> Self {
        let mut env = Self::new(grid, rewards, step_limit);
        env.position = position;
        env.payload = payload.min(env.grid.p_max);
        env.refresh_done();
        env
    }

    /// Restores the initial region. An object-free region is complete at reset.
    pub fn reset(&mut self) -> RobotObservation {
        self.grid = self.initial.clone();
        self.position = self.grid.position(self.grid.start_cell);
        self.payload = 0;
        self.steps = 0;
        self.cut_total = 0;
        self.deposited_total = 0;
        self.done = DoneReason::Running;
        self.refresh_done();
        self.observe()
    }

    fn refresh_done(&mut self) {
        self.done = if self.grid.total_objects() == 0 && self.payload == 0 {
            DoneReason::Goal
        } else {
            DoneReason::Running
        };
    }

    pub fn grid(&self) -> &RegionGrid {
        &self.grid
    }

    pub fn initial_grid(&self) -> &RegionGrid {
        &self.initial
    }

    pub fn rewards(&self) -> &RewardTable {
        &self.rewards
    }

    pub fn position(&self) -> Position {
        self.position
    }

    pub fn payload(&self) -> u32 {
        self.payload
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn step_limit(&self) -> usize {
        self.step_limit
    }

    pub fn done_reason(&self) -> DoneReason {
        self.done
    }

    pub fn is_done(&self) -> bool {
        self.done.is_done()
    }

    pub fn cut_total(&self) -> u32 {
        self.cut_total
    }

    pub fn deposited_total(&self) -> u32 {
        self.deposited_total
    }

    pub fn spaces(&self) -> ObjectSpaces {
        compute_spaces(&self.grid, self.payload)
    }

    pub fn observe(&self) -> RobotObservation {
        observe(&self.grid, self.position, self.payload)
    }

    pub fn legal_actions(&self) -> Vec<ActionRP> {
        legal_actions(&self.grid, self.position)
    }

    pub fn step(&mut self, action: ActionRP) -> Result<StepOutcome> {
        if self.is_done() {
            return Err(Error::EpisodeDone(self.done.to_string()));
        }
        let r = &self.rewards;
        let carried = self.payload;
        let spaces = compute_spaces(&self.grid, self.payload);
        let mut reward = 0.0;
        let mut events = Vec::new();
        let mut target_transition = false;

        match neighbor(&self.grid, self.position, action) {
            None => {
                events.push(Event::OutOfBounds);
                reward += r.r_out_of_bounds;
            }
            Some(next) if is_shadowed(&self.grid, &spaces, self.grid.cell(next)) => {
                events.push(Event::Collision);
                reward += r.r_collision;
            }
            Some(next) => {
                self.position = next;
                let cell = self.grid.cell(next);
                if cell == self.grid.storage_cell && self.payload > 0 {
                    let n = self.payload;
                    self.payload = 0;
                    self.deposited_total += n;
                    reward += r.r_store_per_object * n as f64;
                    events.push(Event::Store(n));
                    target_transition = true;
                    if self.grid.total_objects() == 0 {
                        reward += r.r_goal;
                        self.done = DoneReason::Goal;
                    }
                } else if self.grid.objects[cell] > 0 && spaces.augmented_subgoals.contains(&cell) {
                    let n = self.grid.objects[cell].min(self.grid.p_max - self.payload);
                    self.grid.objects[cell] -= n;
                    self.payload += n;
                    self.cut_total += n;
                    reward += r.r_cut_per_object * n as f64;
                    events.push(Event::Cut(n));
                    target_transition = true;
                }
            }
        }

        reward += r.r_carry_per_unit * carried as f64;
        if !target_transition {
            reward += r.r_step;
        }
        Ok(self.finish_step(reward, events))
    }

    /// A step in which the robot receives no command and stays in place.
    /// Step and carrying costs still accrue and the step counts toward the
    /// limit.
    pub fn wait(&mut self) -> Result<StepOutcome> {
        if self.is_done() {
            return Err(Error::EpisodeDone(self.done.to_string()));
        }
        let reward = self.rewards.r_step + self.rewards.r_carry_per_unit * self.payload as f64;
        Ok(self.finish_step(reward, Vec::new()))
    }

    fn finish_step(&mut self, mut reward: f64, events: Vec<Event>) -> StepOutcome {
        self.steps += 1;
        if !self.is_done() {
            if self.legal_actions().is_empty() {
                self.done = DoneReason::Trapped;
                reward += self.rewards.r_trapped;
            } else if self.steps >= self.step_limit {
                self.done = DoneReason::StepLimit;
                reward += self.rewards.r_trapped;
            }
        }

        StepOutcome {
            next_observation: self.observe(),
            reward,
            done: self.is_done(),
            done_reason: self.done,
            events,
        }
    }
}

/// Actions whose target cell is inside the region and not shadowed.
pub fn legal_actions(grid: &RegionGrid, position: Position) -> Vec<ActionRP> {
    let spaces = compute_spaces(grid, 0);
    ActionRP::ALL
        .into_iter()
        .filter(|&a| match neighbor(grid, position, a) {
            None => false,
            Some(next) => !is_shadowed(grid, &spaces, grid.cell(next)),
        })
        .collect()
}
