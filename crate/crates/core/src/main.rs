use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hazardlab::pipeline::{Pipeline, Stage};
use hazardlab::HazardError;

#[derive(Debug, Parser)]
#[command(name = "hazardlab", version, about = "Renal-failure risk-factor study pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Pipeline config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Worker thread cap for parallel stages.
    #[arg(long)]
    jobs: Option<usize>,
    /// Overrides the config seed (and the generator seed).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic event stream and its ground truth.
    Synth(Common),
    /// Apply the entry criteria and label outcomes.
    Cohort(Common),
    /// Build the survival matrix and the rolling-window datasets.
    Featurize(Common),
    /// Fit the penalized Cox model and rank factors.
    FitCox(Common),
    /// Covariate-adjusted survival curves for one factor.
    AdjustSurvival {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        factor: String,
        /// Comma-separated levels in the factor's original units.
        #[arg(long, value_delimiter = ',', required = true)]
        levels: Vec<f64>,
    },
    /// Fit the sparse logistic model on the primary window dataset.
    FitGlm(Common),
    /// Cross-validated metrics per feature set and observation period.
    Evaluate(Common),
    /// Join rankings, metrics and traces into a summary.
    Report(Common),
    /// Run every stage in order, stopping at the first failure.
    All(Common),
}

impl Command {
    fn split(self) -> (Common, Stage) {
        match self {
            Command::Synth(c) => (c, Stage::Synth),
            Command::Cohort(c) => (c, Stage::Cohort),
            Command::Featurize(c) => (c, Stage::Featurize),
            Command::FitCox(c) => (c, Stage::FitCox),
            Command::AdjustSurvival { common, factor, levels } => (common, Stage::AdjustSurvival { factor, levels }),
            Command::FitGlm(c) => (c, Stage::FitGlm),
            Command::Evaluate(c) => (c, Stage::Evaluate),
            Command::Report(c) => (c, Stage::Report),
            Command::All(c) => (c, Stage::All),
        }
    }
}

fn fail(kind: &str, message: String, code: u8) -> ExitCode {
    let body = serde_json::json!({"error": kind, "message": message, "exit_code": code});
    eprintln!("{body}");
    ExitCode::from(code)
}

fn run(common: &Common, stage: &Stage) -> Result<(), HazardError> {
    if let Some(n) = common.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| HazardError::Config(format!("--jobs: {e}")))?;
    }
    Pipeline::from_file(&common.config, common.seed)?.run(stage)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.to_string(), 1),
    };
    let (common, stage) = cli.command.split();
    match run(&common, &stage) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), e.to_string(), if e.is_validation() { 1 } else { 2 }),
    }
}
