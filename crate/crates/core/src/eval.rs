//! Trajectory likelihood, per-episode interaction statistics, shared-policy
//! test suites and training-curve summaries.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agents::{AutonomousAgent, HumanProfile, SimulatedHuman};
use crate::error::{Error, Result};
use crate::learn::TrainingCurve;
use crate::oracle::{Oracle, DEFAULT_ORACLE_CAP};
use crate::record::EpisodeRecord;
use crate::region::{DoneReason, GridConfig, RegionEnv, RegionGrid, RewardTable, RobotObservation};
use crate::shared::{ArbitrationMode, RewardWeights, SharedEnv};

/// Log-probability of a trajectory under the factorisation
///
/// `p(s_1) * prod_t pi_h(a_h_t | s_{t-n_h+1..t}) * pi_a(a_a_t | a_h_t, s_t) * p(s_{t+1} | s_t, a_a_t)`.
///
/// `states` holds `T + 1` states, the action slices `T` entries. Early steps
/// condition `pi_h` on the available prefix. Without `initial` the first
/// state is treated as given. A zero factor yields `-inf`.
#[allow(clippy::too_many_arguments)]
pub fn trajectory_log_prob<S, H, A, FH, FA, FT>(
    states: &[S],
    human: &[H],
    auto: &[A],
    n_h: usize,
    mut pi_h: FH,
    mut pi_a: FA,
    mut transition: FT,
    initial: Option<&dyn Fn(&S) -> f64>,
) -> Result<f64>
where
    FH: FnMut(&H, &[S]) -> f64,
    FA: FnMut(&A, &H, &S) -> f64,
    FT: FnMut(&S, &S, &A) -> f64,
{
    let t_len = human.len();
    if auto.len() != t_len || states.len() != t_len + 1 {
        return Err(Error::Usage(format!(
            "trajectory lengths disagree: {} states, {} human and {} autonomous actions",
            states.len(),
            t_len,
            auto.len()
        )));
    }
    if n_h == 0 {
        return Err(Error::Usage("history length must be positive".into()));
    }
    let mut lp = initial.map_or(0.0, |p| p(&states[0]).ln());
    for t in 0..t_len {
        let from = (t + 1).saturating_sub(n_h);
        lp += pi_h(&human[t], &states[from..=t]).ln();
        lp += pi_a(&auto[t], &human[t], &states[t]).ln();
        lp += transition(&states[t], &states[t + 1], &auto[t]).ln();
    }
    Ok(lp)
}

/// States visited by a recorded episode, including the final one when known.
pub fn record_states(record: &EpisodeRecord) -> Vec<RobotObservation> {
    let mut s: Vec<RobotObservation> = record.steps.iter().map(|st| st.obs.clone()).collect();
    if let Some(f) = &record.final_observation {
        s.push(f.clone());
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub steps: usize,
    pub ha_interaction: usize,
    /// `100 * ha_interaction / steps`, rounded to one decimal.
    pub ha_percent: f64,
    pub aa_followed_ha: usize,
    pub reward: f64,
    pub success: u8,
}

fn percent(part: usize, whole: usize) -> f64 {
    if whole == 0 {
        return 0.0;
    }
    (1000.0 * part as f64 / whole as f64).round() / 10.0
}

impl EpisodeStats {
    /// Stats from integer action sequences, `-1` meaning no human input.
    pub fn from_sequences(aa: &[i64], ha: &[i64], reward: f64, success: bool) -> Result<Self> {
        if aa.len() != ha.len() {
            return Err(Error::Usage(format!("{} autonomous vs {} human actions", aa.len(), ha.len())));
        }
        let ha_interaction = ha.iter().filter(|&&h| h != -1).count();
        let aa_followed_ha = aa.iter().zip(ha).filter(|(a, h)| **h != -1 && a == h).count();
        Ok(Self {
            steps: ha.len(),
            ha_interaction,
            ha_percent: percent(ha_interaction, ha.len()),
            aa_followed_ha,
            reward,
            success: u8::from(success),
        })
    }
}

/// Stats of a recorded episode. Manual steps have no autonomous action and
/// never count as followed.
pub fn episode_stats(record: &EpisodeRecord) -> EpisodeStats {
    let ha: Vec<i64> = record.steps.iter().map(|s| i64::from(s.a_h)).collect();
    let aa: Vec<i64> = record
        .steps
        .iter()
        .map(|s| s.a_a.map_or(-2, |a| a.index() as i64))
        .collect();
    EpisodeStats::from_sequences(&aa, &ha, record.blended_return(), record.done_reason() == DoneReason::Goal)
        .expect("aligned sequences")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AverageRow {
    pub steps: f64,
    pub ha_interaction: f64,
    pub aa_followed_ha: f64,
    pub reward: f64,
    pub success: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestTable {
    pub label: String,
    pub rows: Vec<EpisodeStats>,
    pub average: AverageRow,
}

impl TestTable {
    pub fn new(label: impl Into<String>, rows: Vec<EpisodeStats>) -> Self {
        let n = rows.len().max(1) as f64;
        let mean = |f: &dyn Fn(&EpisodeStats) -> f64| rows.iter().map(f).sum::<f64>() / n;
        let average = AverageRow {
            steps: mean(&|r| r.steps as f64),
            ha_interaction: mean(&|r| r.ha_interaction as f64),
            aa_followed_ha: mean(&|r| r.aa_followed_ha as f64),
            reward: mean(&|r| r.reward),
            success: mean(&|r| r.success as f64),
        };
        Self {
            label: label.into(),
            rows,
            average,
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{}", self.label);
        let _ = writeln!(
            out,
            "{:>7} | {:>6} | {:>14} | {:>9} | {:>9} | {:>7}",
            "Test ID", "steps", "HA Interaction", "AA follow", "reward", "success"
        );
        let rule = "-".repeat(68);
        let _ = writeln!(out, "{rule}");
        for (i, r) in self.rows.iter().enumerate() {
            let _ = writeln!(
                out,
                "{:>7} | {:>6} | {:>14} | {:>9} | {:>9.2} | {:>7}",
                i, r.steps, r.ha_interaction, r.aa_followed_ha, r.reward, r.success
            );
        }
        let _ = writeln!(out, "{rule}");
        let a = &self.average;
        let _ = writeln!(
            out,
            "{:>7} | {:>6.1} | {:>14.1} | {:>9.1} | {:>9.2} | {:>7.2}",
            "avg.", a.steps, a.ha_interaction, a.aa_followed_ha, a.reward, a.success
        );
        out
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["test_id", "steps", "ha_interaction", "ha_percent", "aa_followed_ha", "reward", "success"])?;
        for (i, r) in self.rows.iter().enumerate() {
            w.write_record(&[
                i.to_string(),
                r.steps.to_string(),
                r.ha_interaction.to_string(),
                r.ha_percent.to_string(),
                r.aa_followed_ha.to_string(),
                r.reward.to_string(),
                r.success.to_string(),
            ])?;
        }
        let a = &self.average;
        w.write_record(&[
            "avg".to_string(),
            a.steps.to_string(),
            a.ha_interaction.to_string(),
            String::new(),
            a.aa_followed_ha.to_string(),
            a.reward.to_string(),
            a.success.to_string(),
        ])?;
        let bytes = w.into_inner().map_err(|e| Error::Usage(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    pub fn write(&self, text: &Path, csv: &Path) -> Result<()> {
        std::fs::write(text, self.to_text()).map_err(|e| Error::io(text, e))?;
        std::fs::write(csv, self.to_csv()?).map_err(|e| Error::io(csv, e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    pub n_tests: usize,
    pub seed: u64,
    pub weights: RewardWeights,
    pub mode: ArbitrationMode,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            n_tests: 10,
            seed: 0,
            weights: RewardWeights::default(),
            mode: ArbitrationMode::Shaping,
        }
    }
}

/// Runs `n_tests` shared episodes on `region` with a simulated human whose
/// base policy is the exact planner. Test `i` seeds the human and the
/// arbitration with `seed + i`.
pub fn run_test_suite(
    agent: &mut dyn AutonomousAgent,
    profile: &HumanProfile,
    region: &RegionGrid,
    grid_config: &GridConfig,
    rewards: &RewardTable,
    config: &SuiteConfig,
    label: &str,
) -> Result<(TestTable, Vec<EpisodeRecord>)> {
    profile.validate()?;
    let mut rows = Vec::with_capacity(config.n_tests);
    let mut records = Vec::with_capacity(config.n_tests);
    let mut oracle = Oracle::new(rewards.clone(), DEFAULT_ORACLE_CAP);
    for i in 0..config.n_tests as u64 {
        let seed = config.seed.wrapping_add(i);
        let region_env = RegionEnv::from_config(region.clone(), grid_config, rewards.clone());
        let mut env = SharedEnv::new(region_env, config.mode, config.weights, seed)?;
        let mut human = SimulatedHuman::new(profile.with_seed(seed), &mut oracle);
        let mut record = crate::agents::record_episode(&mut env, &mut human, Some(&mut *agent))?;
        record.header.episode_id = Some(format!("{label}-{i}"));
        record.header.seed = Some(seed);
        rows.push(episode_stats(&record));
        records.push(record);
    }
    Ok((TestTable::new(label, rows), records))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveMetrics {
    /// Mean of the smoothed series over the head fraction.
    pub head_mean: f64,
    /// Mean of the smoothed series over the tail fraction.
    pub final_mean: f64,
    /// Sample standard deviation of the smoothed series over the tail.
    pub tail_std: f64,
    pub improvement: f64,
    /// `max - min` of the smoothed series.
    pub range: f64,
}

impl CurveMetrics {
    /// Improvement as a fraction of the observed range (0 for a flat curve).
    pub fn improvement_fraction(&self) -> f64 {
        if self.range > 0.0 {
            self.improvement / self.range
        } else {
            0.0
        }
    }
}

/// Head/tail summary of a curve's smoothed series.
pub fn curve_metrics(curve: &TrainingCurve, tail_fraction: f64) -> Result<CurveMetrics> {
    series_metrics(&curve.smoothed, tail_fraction)
}

pub fn series_metrics(xs: &[f64], tail_fraction: f64) -> Result<CurveMetrics> {
    check_fraction(xs, tail_fraction)?;
    let k = ((xs.len() as f64 * tail_fraction).round() as usize).clamp(1, xs.len());
    Ok(summarise(xs, &xs[..k], &xs[xs.len() - k..]))
}

/// Like [`curve_metrics`], with head and tail taken as the episodes finishing
/// in the first and last `fraction` of the environment steps.
pub fn curve_metrics_by_steps(curve: &TrainingCurve, fraction: f64) -> Result<CurveMetrics> {
    let xs = &curve.smoothed;
    check_fraction(xs, fraction)?;
    let last = *curve.steps.last().unwrap_or(&0) as f64;
    let head: Vec<f64> = curve.steps.iter().zip(xs).filter(|(&s, _)| s as f64 <= fraction * last).map(|(_, &x)| x).collect();
    let tail: Vec<f64> = curve.steps.iter().zip(xs).filter(|(&s, _)| s as f64 >= (1.0 - fraction) * last).map(|(_, &x)| x).collect();
    let head = if head.is_empty() { vec![xs[0]] } else { head };
    Ok(summarise(xs, &head, &tail))
}

fn check_fraction(xs: &[f64], fraction: f64) -> Result<()> {
    if xs.is_empty() {
        return Err(Error::Usage("empty curve".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Usage(format!("tail fraction {fraction} outside (0, 1]")));
    }
    Ok(())
}

fn summarise(xs: &[f64], head: &[f64], tail: &[f64]) -> CurveMetrics {
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let final_mean = mean(tail);
    let head_mean = mean(head);
    let k = tail.len();
    let tail_std = if k > 1 {
        (tail.iter().map(|x| (x - final_mean).powi(2)).sum::<f64>() / (k - 1) as f64).sqrt()
    } else {
        0.0
    };
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    CurveMetrics {
        head_mean,
        final_mean,
        tail_std,
        improvement: final_mean - head_mean,
        range: hi - lo,
    }
}
