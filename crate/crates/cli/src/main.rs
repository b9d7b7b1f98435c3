use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

/// Asymmetric dual self-distillation for point clouds.
#[derive(Debug, Parser)]
#[command(name = "asymdsd", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic shape dataset (APCD files plus manifest.csv).
    GenData(GenDataArgs),
    /// Self-supervised pre-training; writes metrics.jsonl and checkpoints.
    Pretrain(PretrainArgs),
    /// Linear or kNN probe on frozen teacher features of a checkpoint.
    Probe(ProbeArgs),
    /// Finite-difference check of the full student objective.
    Gradcheck(GradcheckArgs),
    /// Print the effective configuration as JSON.
    ShowConfig(ConfigArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated shape classes.
    #[arg(long, value_delimiter = ',', default_value = "sphere,box,cylinder,torus,cone")]
    classes: Vec<String>,
    #[arg(long, default_value_t = 100)]
    per_class: usize,
    #[arg(long, default_value_t = 2048)]
    points: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// JSON config layered over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ScaleArg::Micro)]
    scale: ScaleArg,
    /// `key=value` or `section.key=value`; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Args)]
struct PretrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Dataset directory or manifest; overrides `data.dataset`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Run directory; overrides `data.output`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from the run directory's last checkpoint.
    #[arg(long)]
    resume: bool,
    /// Resume even when the checkpoint's config digest differs.
    #[arg(long, requires = "resume")]
    force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ScaleArg {
    Full,
    Small,
    Micro,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ProbeKind {
    Linear,
    Knn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MetricArg {
    Euclidean,
    Cosine,
}

#[derive(Debug, Args)]
struct ProbeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = ProbeKind::Linear)]
    kind: ProbeKind,
    /// Neighbours for the kNN probe.
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, value_enum, default_value_t = MetricArg::Euclidean)]
    metric: MetricArg,
    /// L2 penalty of the linear probe.
    #[arg(long, default_value_t = 1e-3)]
    l2: f64,
    /// Held-out share of every class.
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    /// Print the report as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Scalar parameters to probe.
    #[arg(long, default_value_t = 128)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Test hook: perturb the analytic gradient of this tensor.
    #[arg(long, value_name = "TENSOR")]
    corrupt: Option<String>,
    #[arg(long)]
    json: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Pretrain(a) => commands::pretrain(a),
        Command::Probe(a) => commands::probe(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::ShowConfig(a) => commands::show_config(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e.error);
            ExitCode::from(e.code)
        }
    }
}
