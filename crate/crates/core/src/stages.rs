//! End-to-end stage pipelines: pre-training, human recording, encoder
//! training, shared-policy training, testing and the summary report.
//!
//! Every stage writes into its own directory under the configured output
//! directory and leaves a `manifest.json` listing inputs, seeds and SHA-256
//! digests of everything it read and wrote.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::agents::{record_episode, SimulatedHuman};
use crate::assist::{LatentTracker, SharedPilot, SharedTask};
use crate::checkpoint::{load_cvae, load_policy, save_cvae, save_policy, CheckpointInfo};
use crate::config::{ExperimentConfig, SharedInit};
use crate::encoder::{build_dataset, majority_baseline, train_cvae as fit_cvae, CvaeModel};
use crate::error::{Error, Result};
use crate::eval::{curve_metrics, run_test_suite, SuiteConfig, TestTable};
use crate::learn::{greedy_rollout, ppo_train, PlanningTask, PolicyPilot, SprMeter, SystemClock};
use crate::nn::MlpPolicy;
use crate::oracle::{Oracle, DEFAULT_ORACLE_CAP};
use crate::record::{read_episode_dir, EpisodeRecord};
use crate::region::{sample_region, DoneReason, RegionEnv, RegionGrid};
use crate::shared::{ObsLayout, SharedEnv};
use crate::Real;

pub const MANIFEST_SCHEMA: &str = "manifest/1";

/// Tail fraction used for curve summaries in stage reports.
const CURVE_TAIL: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: String,
    pub stage: String,
    pub seed: u64,
    pub config_sha256: String,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub summary: Value,
}

/// Result of one stage; the manifest is already on disk.
#[derive(Clone, Debug)]
pub struct StageReport {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn digests(paths: &[PathBuf]) -> Result<Vec<FileDigest>> {
    paths
        .iter()
        .map(|p| {
            Ok(FileDigest {
                path: p.clone(),
                sha256: sha256_file(p)?,
            })
        })
        .collect()
}

pub fn stage_dir(cfg: &ExperimentConfig, stage: &str) -> PathBuf {
    cfg.output_dir.join(stage)
}

pub fn pretrained_policy_path(cfg: &ExperimentConfig) -> PathBuf {
    stage_dir(cfg, "pretrain").join("policy.ckpt")
}

pub fn episodes_dir(cfg: &ExperimentConfig) -> PathBuf {
    stage_dir(cfg, "record").join("episodes")
}

pub fn cvae_path(cfg: &ExperimentConfig) -> PathBuf {
    stage_dir(cfg, "cvae").join("cvae.ckpt")
}

pub fn shared_policy_path(cfg: &ExperimentConfig) -> PathBuf {
    stage_dir(cfg, "shared").join("policy.ckpt")
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn finish(cfg: &ExperimentConfig, stage: &str, seed: u64, inputs: &[PathBuf], outputs: &[PathBuf], summary: Value) -> Result<StageReport> {
    let dir = stage_dir(cfg, stage);
    let manifest = Manifest {
        schema: MANIFEST_SCHEMA.into(),
        stage: stage.into(),
        seed,
        config_sha256: hex::encode(Sha256::digest(cfg.to_json().as_bytes())),
        inputs: digests(inputs)?,
        outputs: digests(outputs)?,
        summary,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    fs::write(dir.join("config.json"), cfg.to_json()).map_err(|e| Error::io(&dir, e))?;
    Ok(StageReport { dir, manifest })
}

fn robot_layout(cfg: &ExperimentConfig) -> ObsLayout {
    ObsLayout::new(cfg.grid.n_c, cfg.grid.n_r, cfg.grid.p_max, 0)
}

fn shared_layout(cfg: &ExperimentConfig) -> ObsLayout {
    ObsLayout::new(cfg.grid.n_c, cfg.grid.n_r, cfg.grid.p_max, cfg.cvae.d_z1)
}

/// The configured fixed region, or a non-empty region drawn from `seed`.
pub fn evaluation_region(cfg: &ExperimentConfig, seed: u64) -> Result<RegionGrid> {
    if let Some(r) = &cfg.region {
        return Ok(r.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..1000 {
        let g = sample_region(&cfg.grid, &mut rng)?;
        if g.total_objects() > 0 {
            return Ok(g);
        }
    }
    Err(Error::Config("region sampler keeps producing empty regions".into()))
}

/// Stage I: PPO on the planning task alone.
pub fn pretrain(cfg: &ExperimentConfig) -> Result<StageReport> {
    cfg.validate()?;
    let dir = stage_dir(cfg, "pretrain");
    create_dir(&dir)?;
    let layout = robot_layout(cfg);
    let tc = &cfg.pretrain;
    let mut policy = MlpPolicy::<Real>::new(layout.robot_dim(), &tc.hidden, &mut ChaCha8Rng::seed_from_u64(tc.seed));
    let mut meter = SprMeter::start(0.0);
    let clock = SystemClock::new();
    let curve = ppo_train(
        |i| PlanningTask::new(cfg.grid.clone(), cfg.rewards.clone(), cfg.region.clone(), tc.seed.wrapping_add(i as u64)).expect("validated"),
        &mut policy,
        tc,
        &mut meter,
        &clock,
    )?;
    let ckpt = pretrained_policy_path(cfg);
    let info = CheckpointInfo {
        seed: tc.seed,
        trained_steps: tc.total_timesteps as u64,
        meta: json!({ "layout": layout, "stage": "pretrain" }),
    };
    save_policy(&policy, &ckpt, &info)?;
    let curve_path = dir.join("curve.csv");
    curve.write_csv(&curve_path)?;

    let region = evaluation_region(cfg, cfg.seed)?;
    let mut pilot = PolicyPilot::new(policy, layout)?;
    let (greedy, _) = greedy_rollout(&mut pilot, &region, &cfg.rewards, cfg.grid.step_limit())?;
    let mut summary = json!({
        "episodes": curve.len(),
        "greedy_return": greedy,
        "spr_final": curve.spr.last().map(|s| s.1),
    });
    if !curve.is_empty() {
        summary["curve"] = serde_json::to_value(curve_metrics(&curve, CURVE_TAIL)?)?;
    }
    if let Ok((best, _)) = Oracle::new(cfg.rewards.clone(), DEFAULT_ORACLE_CAP).solve(&region, cfg.grid.step_limit()) {
        summary["oracle_return"] = json!(best);
    }
    finish(cfg, "pretrain", tc.seed, &[], &[ckpt, curve_path], summary)
}

/// Stage II, headless: a simulated human drives the robot manually.
pub fn record_human(cfg: &ExperimentConfig) -> Result<StageReport> {
    cfg.validate()?;
    let dir = episodes_dir(cfg);
    create_dir(&dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut oracle = Oracle::new(cfg.rewards.clone(), DEFAULT_ORACLE_CAP);
    let mut outputs = Vec::new();
    let mut goals = 0;
    for i in 0..cfg.record.episodes {
        let region = match &cfg.region {
            Some(r) => r.clone(),
            None => {
                oracle.clear();
                evaluation_region(cfg, rand::Rng::random(&mut rng))?
            }
        };
        let seed = cfg.seed.wrapping_add(i as u64);
        let env = RegionEnv::from_config(region, &cfg.grid, cfg.rewards.clone());
        let mut shared = SharedEnv::new(env, cfg.arbitration, cfg.weights, seed)?;
        let mut human = SimulatedHuman::new(cfg.record.human.with_seed(seed), &mut oracle);
        let mut rec = record_episode(&mut shared, &mut human, None)?;
        rec.header.episode_id = Some(format!("sim-{i:03}"));
        rec.header.seed = Some(seed);
        goals += usize::from(rec.done_reason() == DoneReason::Goal);
        let path = dir.join(format!("sim-{i:03}.jsonl"));
        rec.write(&path)?;
        outputs.push(path);
    }
    let summary = json!({ "episodes": outputs.len(), "goals": goals });
    finish(cfg, "record", cfg.seed, &[], &outputs, summary)
}

fn load_surrogate(cfg: &ExperimentConfig) -> Result<PolicyPilot<Real>> {
    let (policy, _) = load_policy::<Real>(&pretrained_policy_path(cfg))?;
    PolicyPilot::new(policy, robot_layout(cfg))
}

fn episode_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    Ok(files)
}

/// Stage II analysis: fits the cVAE on the recorded episodes, with errors
/// measured against the pre-trained surrogate.
pub fn train_cvae(cfg: &ExperimentConfig) -> Result<StageReport> {
    cfg.validate()?;
    let dir = stage_dir(cfg, "cvae");
    create_dir(&dir)?;
    let episodes = read_episode_dir(&episodes_dir(cfg))?;
    let surrogate = load_surrogate(cfg)?;
    let layout = shared_layout(cfg);
    let c = &cfg.cvae;
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let data = build_dataset(&episodes, &surrogate, &layout, c, &mut rng)?;
    let mut model = CvaeModel::<Real>::new(c.n_h, layout.robot_dim(), c.hidden, c.d_z1, &mut rng);
    let curves = fit_cvae(&mut model, &data, c)?;
    let ckpt = cvae_path(cfg);
    save_cvae(
        &model,
        &ckpt,
        &CheckpointInfo {
            seed: c.seed,
            trained_steps: curves.train.len() as u64,
            meta: json!({ "layout": layout }),
        },
    )?;
    let loss_path = dir.join("loss.csv");
    curves.write_csv(&loss_path)?;
    let summary = json!({
        "train_windows": data.train.len(),
        "validation_windows": data.validation.len(),
        "best_epoch": curves.best_epoch,
        "validation_first": curves.validation.first().map(|l| l.total),
        "validation_best": curves.validation.get(curves.best_epoch).map(|l| l.total),
        "action_accuracy": model.action_accuracy(&data.validation)?,
        "majority_baseline": majority_baseline(&data.train, &data.validation),
    });
    let mut inputs = episode_files(&episodes_dir(cfg))?;
    inputs.push(pretrained_policy_path(cfg));
    finish(cfg, "cvae", c.seed, &inputs, &[ckpt, loss_path], summary)
}

/// The latent tracker for shared training and testing. Without `with_z1`
/// the latent input stays zero.
pub fn build_tracker(cfg: &ExperimentConfig, seed: u64) -> Result<(LatentTracker<Real>, Vec<PathBuf>)> {
    let layout = shared_layout(cfg);
    if !cfg.with_z1 {
        return Ok((LatentTracker::zero(layout), Vec::new()));
    }
    let path = cvae_path(cfg);
    let (model, _) = load_cvae::<Real>(&path)?;
    let surrogate = load_surrogate(cfg)?;
    let tracker = LatentTracker::new(layout, model, Box::new(surrogate), cfg.z_mode, seed)?;
    Ok((tracker, vec![path, pretrained_policy_path(cfg)]))
}

/// Initial shared policy according to `shared_init`.
pub fn initial_shared_policy(cfg: &ExperimentConfig) -> Result<(MlpPolicy<Real>, Vec<PathBuf>)> {
    let layout = shared_layout(cfg);
    match cfg.shared_init {
        SharedInit::Scratch => Ok((
            MlpPolicy::new(layout.shared_dim(), &cfg.shared.hidden, &mut ChaCha8Rng::seed_from_u64(cfg.shared.seed)),
            Vec::new(),
        )),
        SharedInit::Pretrained => {
            let path = pretrained_policy_path(cfg);
            let (pre, _) = load_policy::<Real>(&path)?;
            if pre.input_dim() != layout.robot_dim() {
                return Err(Error::Dimension {
                    what: "pre-trained policy input",
                    expected: layout.robot_dim(),
                    actual: pre.input_dim(),
                });
            }
            Ok((pre.with_extra_inputs(layout.shared_dim() - layout.robot_dim()), vec![path]))
        }
    }
}

/// Stage III: PPO on the shared task with a simulated human.
pub fn train_shared(cfg: &ExperimentConfig) -> Result<StageReport> {
    cfg.validate()?;
    let dir = stage_dir(cfg, "shared");
    create_dir(&dir)?;
    let tc = &cfg.shared;
    let (mut policy, mut inputs) = initial_shared_policy(cfg)?;
    let mut trackers = Vec::with_capacity(tc.n_envs);
    for i in 0..tc.n_envs {
        let (t, used) = build_tracker(cfg, tc.seed.wrapping_add(i as u64))?;
        if i == 0 {
            inputs.extend(used);
        }
        trackers.push(Some(t));
    }
    let mut meter = SprMeter::start(0.0);
    let clock = SystemClock::new();
    let curve = ppo_train(
        |i| {
            let seed = tc.seed.wrapping_add(i as u64);
            let human = SimulatedHuman::new(cfg.human.with_seed(seed), Oracle::new(cfg.rewards.clone(), DEFAULT_ORACLE_CAP));
            SharedTask::new(
                cfg.grid.clone(),
                cfg.rewards.clone(),
                cfg.region.clone(),
                cfg.arbitration,
                cfg.weights,
                human,
                trackers[i].take().expect("one tracker per environment"),
                seed,
            )
            .expect("validated")
        },
        &mut policy,
        tc,
        &mut meter,
        &clock,
    )?;
    let ckpt = shared_policy_path(cfg);
    let info = CheckpointInfo {
        seed: tc.seed,
        trained_steps: tc.total_timesteps as u64,
        meta: json!({
            "layout": shared_layout(cfg),
            "stage": "train-shared",
            "with_z1": cfg.with_z1,
            "weights": cfg.weights,
            "arbitration": cfg.arbitration,
            "init": cfg.shared_init,
        }),
    };
    save_policy(&policy, &ckpt, &info)?;
    let curve_path = dir.join("curve.csv");
    curve.write_csv(&curve_path)?;
    let spr_path = dir.join("spr.csv");
    write_spr(&curve.spr, &spr_path)?;
    let mut summary = json!({
        "episodes": curve.len(),
        "spr_final": curve.spr.last().map(|s| s.1),
    });
    if !curve.is_empty() {
        summary["curve"] = serde_json::to_value(curve_metrics(&curve, CURVE_TAIL)?)?;
    }
    finish(cfg, "shared", tc.seed, &inputs, &[ckpt, curve_path, spr_path], summary)
}

fn write_spr(series: &[(usize, f64)], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "spr"])?;
    for (s, v) in series {
        w.write_record([s.to_string(), v.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Stage IV: greedy shared-policy tests against each configured profile.
/// Up to `jobs` profiles run in parallel; results do not depend on `jobs`.
pub fn test_shared(cfg: &ExperimentConfig, jobs: usize) -> Result<StageReport> {
    cfg.validate()?;
    let dir = stage_dir(cfg, "test");
    create_dir(&dir)?;
    let ckpt = shared_policy_path(cfg);
    let (policy, _) = load_policy::<Real>(&ckpt)?;
    let region = evaluation_region(cfg, cfg.seed)?;
    let suite = SuiteConfig {
        n_tests: cfg.test.n_tests,
        seed: cfg.seed,
        weights: cfg.weights,
        mode: cfg.arbitration,
    };
    let run = |k: usize| -> Result<(TestTable, Vec<EpisodeRecord>, Vec<PathBuf>)> {
        let named = &cfg.test.profiles[k];
        let (tracker, used) = build_tracker(cfg, cfg.seed)?;
        let mut pilot = SharedPilot::new(policy.clone(), tracker)?;
        let (table, records) = run_test_suite(&mut pilot, &named.profile, &region, &cfg.grid, &cfg.rewards, &suite, &named.name)?;
        Ok((table, records, used))
    };
    let n = cfg.test.profiles.len();
    let mut results = Vec::with_capacity(n);
    for chunk in (0..n).collect::<Vec<_>>().chunks(jobs.max(1)) {
        if chunk.len() == 1 {
            results.push(run(chunk[0])?);
            continue;
        }
        let batch: Vec<_> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|&k| s.spawn(move || run(k))).collect();
            handles.into_iter().map(|h| h.join().expect("test worker panicked")).collect()
        });
        for r in batch {
            results.push(r?);
        }
    }
    let mut inputs = vec![ckpt];
    let mut outputs = Vec::new();
    let mut tables = serde_json::Map::new();
    for (k, (table, records, used)) in results.into_iter().enumerate() {
        let name = &cfg.test.profiles[k].name;
        if k == 0 {
            inputs.extend(used);
        }
        let text = dir.join(format!("{name}.txt"));
        let csv = dir.join(format!("{name}.csv"));
        table.write(&text, &csv)?;
        let ep_dir = dir.join("episodes").join(name);
        if ep_dir.exists() {
            fs::remove_dir_all(&ep_dir).map_err(|e| Error::io(&ep_dir, e))?;
        }
        create_dir(&ep_dir)?;
        for (i, r) in records.iter().enumerate() {
            let p = ep_dir.join(format!("{i:02}.jsonl"));
            r.write(&p)?;
            outputs.push(p);
        }
        outputs.push(text);
        outputs.push(csv);
        tables.insert(name.clone(), serde_json::to_value(&table.average)?);
    }
    finish(cfg, "test", cfg.seed, &inputs, &outputs, Value::Object(tables))
}

/// Collects every stage manifest present under the output directory into
/// `report.md` and `report.json`.
pub fn report(cfg: &ExperimentConfig) -> Result<StageReport> {
    let dir = stage_dir(cfg, "report");
    create_dir(&dir)?;
    let mut md = String::from("# Experiment report\n");
    let mut all = serde_json::Map::new();
    let mut inputs = Vec::new();
    for stage in ["pretrain", "record", "cvae", "shared", "test"] {
        let path = stage_dir(cfg, stage).join("manifest.json");
        if !path.exists() {
            continue;
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        md.push_str(&format!("\n## {stage}\n\nseed {}\n\n```json\n{}\n```\n", m.seed, serde_json::to_string_pretty(&m.summary)?));
        if stage == "test" {
            for named in &cfg.test.profiles {
                let t = stage_dir(cfg, "test").join(format!("{}.txt", named.name));
                if let Ok(table) = fs::read_to_string(&t) {
                    md.push_str(&format!("\n```text\n{table}```\n"));
                }
            }
        }
        all.insert(stage.into(), m.summary);
        inputs.push(path);
    }
    if inputs.is_empty() {
        return Err(Error::Usage(format!("no stage outputs under {}", cfg.output_dir.display())));
    }
    let md_path = dir.join("report.md");
    let json_path = dir.join("report.json");
    fs::write(&md_path, md).map_err(|e| Error::io(&md_path, e))?;
    fs::write(&json_path, serde_json::to_string_pretty(&Value::Object(all))?).map_err(|e| Error::io(&json_path, e))?;
    finish(cfg, "report", cfg.seed, &inputs, &[md_path, json_path], Value::Null)
}
