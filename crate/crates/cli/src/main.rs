use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use workbench_core::config::ExperimentConfig;
use workbench_core::shared::{ArbitrationMode, RewardWeights};
use workbench_core::stages::{self, StageReport};

#[derive(Parser, Debug)]
#[command(name = "workbench", version, about = "Shared-autonomy experiment driver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Stage I: train the planning policy.
    Pretrain(Common),
    /// Stage II: record episodes with a simulated human, or serve live sessions with --live.
    RecordHuman {
        #[command(flatten)]
        common: Common,
        /// Number of episodes to record.
        #[arg(long)]
        episodes: Option<usize>,
        /// Start the session service instead of simulating.
        #[arg(long)]
        live: bool,
    },
    /// Stage II: fit the human encoder on recorded episodes.
    TrainCvae(Common),
    /// Stage III: train the shared policy with a simulated human.
    TrainShared {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        shared: SharedFlags,
    },
    /// Stage IV: test the shared policy against each human profile.
    TestShared {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        shared: SharedFlags,
        /// Profiles tested in parallel.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Run the live session service.
    Serve(Common),
    /// Summarise every stage present under the output directory.
    Report(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment document (schema experiment/1); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Overrides the experiment seed and the seed of the stage's trainer.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the number of environment steps of the stage's trainer.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args, Debug)]
struct SharedFlags {
    #[arg(long, conflicts_with = "no_z1")]
    with_z1: bool,
    /// Keep the latent input at zero.
    #[arg(long)]
    no_z1: bool,
    /// Reward weights c1 c2.
    #[arg(long, num_args = 2, value_names = ["C1", "C2"])]
    weights: Option<Vec<f64>>,
    /// Human override arbitration with this probability.
    #[arg(long)]
    override_p: Option<f64>,
}

#[derive(Debug)]
struct Failure {
    kind: String,
    message: String,
}

impl From<workbench_core::Error> for Failure {
    fn from(e: workbench_core::Error) -> Self {
        Self {
            kind: e.kind().into(),
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        kind: "usage".into(),
        message: message.into(),
    }
}

enum Stage {
    Pretrain,
    Shared,
    Other,
}

fn load(common: &Common, stage: Stage) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(d) = &common.output_dir {
        cfg.output_dir = d.clone();
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
        cfg.pretrain.seed = s;
        cfg.shared.seed = s;
        cfg.cvae.seed = s;
    }
    if let Some(n) = common.steps {
        match stage {
            Stage::Pretrain => cfg.pretrain.total_timesteps = n,
            Stage::Shared => cfg.shared.total_timesteps = n,
            Stage::Other => return Err(usage("--steps applies to pretrain and train-shared")),
        }
    }
    Ok(cfg)
}

fn apply_shared(cfg: &mut ExperimentConfig, f: &SharedFlags) -> Result<(), Failure> {
    if f.with_z1 {
        cfg.with_z1 = true;
    }
    if f.no_z1 {
        cfg.with_z1 = false;
    }
    if let Some(w) = &f.weights {
        cfg.weights = RewardWeights::new(w[0], w[1])?.with_r1_scale(cfg.weights.r1_scale)?;
    }
    if let Some(p) = f.override_p {
        cfg.arbitration = ArbitrationMode::Override { p_override: p };
    }
    cfg.validate()?;
    Ok(())
}

fn serve(mut cfg: ExperimentConfig) -> Result<(), Failure> {
    workbench_service::apply_env_overrides(&mut cfg.service, |k| std::env::var(k).ok()).map_err(usage)?;
    let rt = tokio::runtime::Runtime::new().map_err(|e| Failure {
        kind: "io".into(),
        message: e.to_string(),
    })?;
    rt.block_on(workbench_service::run(cfg)).map_err(|e| Failure {
        kind: "io".into(),
        message: e.to_string(),
    })
}

fn run(cli: Cli) -> Result<Option<StageReport>, Failure> {
    let report = match cli.command {
        Command::Pretrain(c) => stages::pretrain(&load(&c, Stage::Pretrain)?)?,
        Command::RecordHuman { common, episodes, live } => {
            let mut cfg = load(&common, Stage::Other)?;
            if live {
                serve(cfg)?;
                return Ok(None);
            }
            if let Some(n) = episodes {
                cfg.record.episodes = n;
            }
            stages::record_human(&cfg)?
        }
        Command::TrainCvae(c) => stages::train_cvae(&load(&c, Stage::Other)?)?,
        Command::TrainShared { common, shared } => {
            let mut cfg = load(&common, Stage::Shared)?;
            apply_shared(&mut cfg, &shared)?;
            stages::train_shared(&cfg)?
        }
        Command::TestShared { common, shared, jobs } => {
            let mut cfg = load(&common, Stage::Other)?;
            apply_shared(&mut cfg, &shared)?;
            stages::test_shared(&cfg, jobs)?
        }
        Command::Serve(c) => {
            serve(load(&c, Stage::Other)?)?;
            return Ok(None);
        }
        Command::Report(c) => stages::report(&load(&c, Stage::Other)?)?,
    };
    Ok(Some(report))
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(Some(r)) => {
            let out = json!({
                "stage": r.manifest.stage,
                "dir": r.dir,
                "summary": r.manifest.summary,
            });
            println!("{}", serde_json::to_string_pretty(&out).expect("json"));
            ExitCode::SUCCESS
        }
        Ok(None) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", json!({ "error": { "kind": f.kind, "message": f.message } }));
            ExitCode::FAILURE
        }
    }
}
