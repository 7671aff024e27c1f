//! `rtolab` command line: single-step tools (planning, sampling, fitting,
//! training, exploration) and config-driven experiment runs.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rtolab::optimizers::Algo;

#[derive(Parser)]
#[command(name = "rtolab", version, about = "Token-level RLHF laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Exact KL-regularized planning; writes the optimal policy and value tables.
    Plan(PlanArgs),
    /// Draws a Bradley–Terry preference dataset from an MDP's reward.
    Sample(SampleArgs),
    /// Constrained reward MLE with covariance and confidence radius.
    Mle(MleArgs),
    /// Fits a DPO policy to a preference dataset.
    DpoFit(DpoArgs),
    /// Policy optimization with sparse or dense token rewards.
    Train(TrainArgs),
    /// Token- vs sentence-feedback search on random prefix trees.
    Explore(ExploreArgs),
    /// Pessimistic planning against its suboptimality bounds over many seeds.
    TheoryBound(TheoryArgs),
    /// Runs an `rl` experiment config and prints the per-algorithm medians.
    Ablate(RunArgs),
    /// Paired comparison of two training-curve files.
    Compare(CompareArgs),
    /// Checks an experiment config and prints its hash.
    ValidateConfig {
        config: PathBuf,
    },
    /// Runs any experiment config.
    Run(RunArgs),
}

#[derive(Args)]
struct PlanArgs {
    /// MDP config (JSON).
    #[arg(long)]
    mdp: PathBuf,
    #[arg(long)]
    beta: f64,
    /// Reference policy file; uniform when omitted.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Where to write the optimal policy (JSON).
    #[arg(long)]
    out: PathBuf,
    /// Optional CSV of Q and V per node.
    #[arg(long)]
    values: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    mdp: PathBuf,
    #[arg(long)]
    pairs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Response sampler; uniform when omitted.
    #[arg(long)]
    sampler: Option<PathBuf>,
    /// Output JSONL.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MleArgs {
    #[arg(long)]
    mdp: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Feature spec (JSON); defaults to the MDP's linear reward features.
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    b_bound: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long, default_value_t = 1.0)]
    pessimism_c: f64,
    #[arg(long, default_value_t = 0.1)]
    delta: f64,
    /// Output JSON with the fit, covariance and radius.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DpoArgs {
    #[arg(long)]
    mdp: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    beta: f64,
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long, default_value_t = 20_000)]
    max_iters: usize,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    algo: Algo,
    /// MDP config; its reward is the ground truth used for logging.
    #[arg(long)]
    mdp: PathBuf,
    /// Learned reward from `mle`; the MDP reward is used when omitted.
    #[arg(long)]
    reward: Option<PathBuf>,
    #[arg(long)]
    dpo_policy: Option<PathBuf>,
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long, default_value_t = 0.05)]
    beta1: f64,
    #[arg(long, default_value_t = 0.01)]
    beta2: f64,
    #[arg(long, default_value_t = 1.0)]
    beta3: f64,
    /// Delimiter tokens for semi_rto, comma separated.
    #[arg(long, value_delimiter = ',')]
    delimiters: Vec<usize>,
    /// PPO settings (JSON); defaults otherwise.
    #[arg(long)]
    ppo: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    iters: usize,
    /// Log CSV.
    #[arg(long)]
    out: PathBuf,
    /// Final policy (JSON).
    #[arg(long)]
    policy_out: Option<PathBuf>,
}

#[derive(Args)]
struct ExploreArgs {
    #[arg(long = "A", alias = "vocab", default_value_t = 2)]
    vocab: usize,
    #[arg(long = "H", alias = "horizon", default_value_t = 3)]
    horizon: usize,
    #[arg(long, default_value_t = 1.0)]
    xi: f64,
    #[arg(long, default_value_t = 50)]
    trees: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Use the fixed two-token, depth-three example tree instead of random trees.
    #[arg(long)]
    example: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TheoryArgs {
    /// `theory_bound` experiment parameters (JSON).
    #[arg(long)]
    instance: PathBuf,
    /// Runs seeds 0..N.
    #[arg(long, default_value_t = 200)]
    seeds: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    /// `curves.csv` of the first run.
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long)]
    group_a: Option<String>,
    #[arg(long)]
    group_b: Option<String>,
    #[arg(long, default_value = "subopt_exact")]
    metric: String,
}

#[derive(Args)]
struct RunArgs {
    config: PathBuf,
    /// Output directory; overrides the config's `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Plan(a) => commands::plan(a),
        Command::Sample(a) => commands::sample(a),
        Command::Mle(a) => commands::mle(a),
        Command::DpoFit(a) => commands::dpo(a),
        Command::Train(a) => commands::train(a),
        Command::Explore(a) => commands::explore(a),
        Command::TheoryBound(a) => commands::theory_bound(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Compare(a) => commands::compare(a),
        Command::ValidateConfig { config } => commands::validate(&config),
        Command::Run(a) => commands::run(a),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            exit_code(&err)
        }
    }
}

/// 2 for configuration problems, 1 for everything else.
fn exit_code(err: &anyhow::Error) -> ExitCode {
    let config = err.chain().any(|e| {
        matches!(e.downcast_ref::<rtolab::Error>(), Some(rtolab::Error::Config(_)))
            || e.downcast_ref::<serde_json::Error>().is_some_and(|j| !j.is_io())
    });
    ExitCode::from(if config { 2 } else { 1 })
}
