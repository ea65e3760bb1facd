//! Exact optimal planner for small regions.
//!
//! Between two target events (a cut or a deposit) every move costs the same
//! amount, so the best way to reach the next event cell is a shortest path
//! through non-target cells. The search therefore enumerates, from each
//! (position, payload, remaining objects) state, every target cell reachable
//! next, and recurses. Cuts only remove objects and deposits only empty the
//! payload, so the recursion is well founded.

use std::collections::{HashMap, VecDeque};

use crate::error::{Error, Result};
use crate::region::{compute_spaces, is_shadowed, neighbor, ActionRP, Position, RegionEnv, RegionGrid, RewardTable};

pub const DEFAULT_ORACLE_CAP: usize = 250_000;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
struct StateKey {
    position: Position,
    payload: u32,
    objects: Vec<u32>,
}

#[derive(Clone, Debug)]
struct Solution {
    value: f64,
    /// Moves up to and including the next target event. Empty when finished.
    leg: Vec<ActionRP>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Shape {
    n_c: usize,
    n_r: usize,
    p_max: u32,
    storage_cell: usize,
}

/// Memoised exhaustive planner. The memo is reused across calls as long as the
/// region shape stays the same.
#[derive(Debug)]
pub struct Oracle {
    rewards: RewardTable,
    cap: usize,
    shape: Option<Shape>,
    memo: HashMap<StateKey, Solution>,
}

impl Oracle {
    pub fn new(rewards: RewardTable, cap: usize) -> Self {
        Self {
            rewards,
            cap,
            shape: None,
            memo: HashMap::new(),
        }
    }

    pub fn states_explored(&self) -> usize {
        self.memo.len()
    }

    /// Drops memoised states, e.g. between unrelated regions.
    pub fn clear(&mut self) {
        self.memo.clear();
    }

    /// Optimal undiscounted return from the start of `grid` and one action
    /// sequence achieving it.
    pub fn solve(&mut self, grid: &RegionGrid, step_limit: usize) -> Result<(f64, Vec<ActionRP>)> {
        let mut env = RegionEnv::new(grid.clone(), self.rewards.clone(), usize::MAX / 2);
        let mut total = 0.0;
        let mut sequence = Vec::new();
        let value = self.value_of(&env)?;
        while !env.is_done() {
            let leg = self.lookup(&env)?.leg;
            if leg.is_empty() {
                break;
            }
            for a in leg {
                total += env.step(a)?.reward;
                sequence.push(a);
            }
        }
        debug_assert_eq!(total, value);
        if sequence.len() > step_limit {
            return Err(Error::OracleInfeasible(format!(
                "optimal plan needs {} steps, limit is {step_limit}",
                sequence.len()
            )));
        }
        Ok((value, sequence))
    }

    /// First move of an optimal continuation from the environment's current
    /// state, or `None` once the episode is over.
    pub fn best_action(&mut self, env: &RegionEnv) -> Result<Option<ActionRP>> {
        if env.is_done() {
            return Ok(None);
        }
        Ok(self.lookup(env)?.leg.first().copied())
    }

    /// Optimal return-to-go from the environment's current state.
    pub fn value_of(&mut self, env: &RegionEnv) -> Result<f64> {
        if env.is_done() {
            return Ok(0.0);
        }
        Ok(self.lookup(env)?.value)
    }

    fn lookup(&mut self, env: &RegionEnv) -> Result<Solution> {
        let grid = env.grid();
        let shape = Shape {
            n_c: grid.n_c,
            n_r: grid.n_r,
            p_max: grid.p_max,
            storage_cell: grid.storage_cell,
        };
        if self.shape.as_ref() != Some(&shape) {
            self.memo.clear();
            self.shape = Some(shape);
        }
        self.solve_state(grid, env.position(), env.payload())
    }

    fn solve_state(&mut self, grid: &RegionGrid, position: Position, payload: u32) -> Result<Solution> {
        if grid.total_objects() == 0 && payload == 0 {
            return Ok(Solution {
                value: 0.0,
                leg: Vec::new(),
            });
        }
        let key = StateKey {
            position,
            payload,
            objects: grid.objects.clone(),
        };
        if let Some(s) = self.memo.get(&key) {
            return Ok(s.clone());
        }
        if self.memo.len() >= self.cap {
            return Err(Error::OracleInfeasible(format!(
                "more than {} states explored",
                self.cap
            )));
        }

        let mut best: Option<Solution> = None;
        for leg in event_legs(grid, position, payload) {
            let mut env = RegionEnv::with_state(grid.clone(), self.rewards.clone(), usize::MAX / 2, position, payload);
            let mut gained = 0.0;
            for &a in &leg {
                gained += env.step(a)?.reward;
            }
            let rest = if env.is_done() {
                0.0
            } else {
                self.solve_state(env.grid(), env.position(), env.payload())?.value
            };
            let value = gained + rest;
            if best.as_ref().map_or(true, |b| value > b.value) {
                best = Some(Solution { value, leg });
            }
        }
        let best = best.ok_or_else(|| {
            Error::OracleInfeasible(format!("no reachable target from {position:?}"))
        })?;
        self.memo.insert(key, best.clone());
        Ok(best)
    }
}

/// Shortest move sequences from `start` to every reachable target cell, each
/// ending on the move that enters the target. Intermediate cells are never
/// targets. The start cell itself counts as a target if leaving and
/// re-entering it triggers an event.
fn event_legs(grid: &RegionGrid, start: Position, payload: u32) -> Vec<Vec<ActionRP>> {
    let spaces = compute_spaces(grid, payload);
    let is_target = |cell: usize| {
        (cell == grid.storage_cell && payload > 0)
            || (grid.objects[cell] > 0 && spaces.augmented_subgoals.contains(&cell))
    };
    let start_cell = grid.cell(start);
    let mut parent: Vec<Option<(usize, ActionRP)>> = vec![None; grid.cells()];
    let mut visited = vec![false; grid.cells()];
    visited[start_cell] = true;
    let mut start_reentry: Option<Vec<ActionRP>> = None;
    let mut targets = Vec::new();
    let mut queue = VecDeque::from([start_cell]);

    let path_to = |parent: &[Option<(usize, ActionRP)>], mut cell: usize| {
        let mut path = Vec::new();
        while cell != start_cell {
            let (prev, a) = parent[cell].expect("reached cell has a parent");
            path.push(a);
            cell = prev;
        }
        path.reverse();
        path
    };

    while let Some(u) = queue.pop_front() {
        for a in ActionRP::ALL {
            let Some(next) = neighbor(grid, grid.position(u), a) else {
                continue;
            };
            let c = grid.cell(next);
            if is_shadowed(grid, &spaces, c) {
                continue;
            }
            if c == start_cell {
                if u != start_cell && start_reentry.is_none() && is_target(c) {
                    let mut p = path_to(&parent, u);
                    p.push(a);
                    start_reentry = Some(p);
                }
                continue;
            }
            if visited[c] {
                continue;
            }
            visited[c] = true;
            parent[c] = Some((u, a));
            if is_target(c) {
                targets.push(path_to(&parent, c));
            } else {
                queue.push_back(c);
            }
        }
    }
    targets.extend(start_reentry);
    targets
}

/// Optimal return and plan under the default reward table.
pub fn oracle_optimal_return(grid: &RegionGrid, cap: usize) -> Result<(f64, Vec<ActionRP>)> {
    let step_limit = 10 * grid.n_c * grid.n_r;
    Oracle::new(RewardTable::default(), cap).solve(grid, step_limit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::region::legal_actions;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empty_region_needs_no_moves() {
        let (ret, seq) = oracle_optimal_return(&RegionGrid::empty(4, 1, 4), 1000).unwrap();
        assert_eq!(ret, 0.0);
        assert!(seq.is_empty());
    }

    #[test]
    fn single_adjacent_object_hand_enumerated() {
        // 4x1 ring, one object right of the start/storage cell. The best plan
        // is right (cut 1: +20), left (store 1: +20, goal +400, carry -5).
        let g = RegionGrid::empty(4, 1, 4).with_objects(&[((1, 0), 1)]);
        let (ret, seq) = oracle_optimal_return(&g, 1000).unwrap();
        assert_eq!(seq, vec![ActionRP::Right, ActionRP::Left]);
        assert_eq!(ret, 20.0 + 20.0 + 400.0 - 5.0);
    }

    #[test]
    fn reentry_of_partially_cut_cell() {
        // Five objects in one cell with p_max 4: the plan must come back for
        // the last one.
        let g = RegionGrid {
            n_c: 3,
            n_r: 2,
            p_max: 4,
            storage_cell: 0,
            start_cell: 0,
            objects: vec![0, 0, 4, 0, 1, 0],
        };
        let (ret, seq) = oracle_optimal_return(&g, 10_000).unwrap();
        let mut env = RegionEnv::new(g, RewardTable::default(), 60);
        let replay: f64 = seq.iter().map(|&a| env.step(a).unwrap().reward).sum();
        assert_eq!(replay, ret);
        assert!(env.is_done());
    }

    #[test]
    fn cap_exceeded_is_reported() {
        let g = RegionGrid::empty(6, 2, 4).with_objects(&[((1, 0), 3), ((3, 1), 4), ((4, 0), 2)]);
        assert!(matches!(oracle_optimal_return(&g, 3), Err(Error::OracleInfeasible(_))));
    }

    #[test]
    fn dominates_random_rollouts() {
        let g = RegionGrid::empty(5, 2, 4).with_objects(&[((1, 0), 2), ((2, 1), 1), ((4, 0), 3)]);
        let (best, seq) = oracle_optimal_return(&g, 100_000).unwrap();
        let mut env = RegionEnv::new(g.clone(), RewardTable::default(), 100);
        let replay: f64 = seq.iter().map(|&a| env.step(a).unwrap().reward).sum();
        assert_eq!(replay, best);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let mut env = RegionEnv::new(g.clone(), RewardTable::default(), 100);
            let mut ret = 0.0;
            while !env.is_done() {
                let legal = legal_actions(env.grid(), env.position());
                let a = legal[rng.random_range(0..legal.len())];
                ret += env.step(a).unwrap().reward;
            }
            assert!(ret <= best, "random rollout {ret} beat oracle {best}");
        }
    }
}
