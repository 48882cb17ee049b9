//! `corelens` command-line front end.
//!
//! Every subcommand reads its section of the optional `--config` file
//! (JSON, or TOML by extension), overlays the flags given on the command
//! line, and rejects unknown or missing fields before doing any work.

mod artifact;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use corelens::{ErrorKind, Result};
use serde::{Serialize, Serializer};
use serde_json::Value;

use config::{DistillMethod, Method, SweepEntry};

#[derive(Parser)]
#[command(name = "corelens", version, about = "Group-robust probing, background projection and embedding inversion")]
struct Cli {
    /// JSON or TOML file with one section per subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a planted-shortcut embedding set.
    GenSynth(GenSynthArgs),
    /// Seeded train/validation/test split.
    Split(SplitArgs),
    /// Train an ERM, DFR or zero-shot linear probe.
    ProbeTrain(ProbeTrainArgs),
    /// Project out a background subspace.
    Distill(DistillArgs),
    /// Per-group accuracy report of a probe on a set.
    Eval(EvalArgs),
    /// Per-group deltas between two reports.
    Compare(CompareArgs),
    /// Best/worst/average group accuracy across tasks.
    Sweep(SweepArgs),
    /// Cosine-similarity distribution of a query over an image set.
    Audit(AuditArgs),
    /// Invert a target vector to text through the reference encoder.
    Invert(InvertArgs),
    /// Run inversion over every ordered pair of a word list.
    InvertGrid(InvertGridArgs),
}

fn skip_false<S: Serializer>(v: &bool, s: S) -> std::result::Result<S::Ok, S::Error> {
    if *v {
        s.serialize_bool(true)
    } else {
        s.serialize_none()
    }
}

#[derive(Args, Serialize)]
struct GenSynthArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    /// n00,n01,n10,n11
    #[arg(long, value_delimiter = ',')]
    group_counts: Option<Vec<usize>>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    beta_core: Option<f64>,
    #[arg(long)]
    beta_spur: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Serialize)]
struct SplitArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// train,val,test
    #[arg(long, value_delimiter = ',')]
    fractions: Option<Vec<f64>>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Serialize)]
struct ProbeTrainArgs {
    #[arg(long, value_enum)]
    method: Option<Method>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    prompts: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    plateau_factor: Option<f64>,
    #[arg(long)]
    plateau_patience: Option<usize>,
}

#[derive(Args, Serialize)]
struct DistillArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    /// EMB1 file whose rows span the background subspace.
    #[arg(long)]
    background: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    num_vectors: Option<usize>,
    #[arg(long, value_enum)]
    method: Option<DistillMethod>,
    #[arg(long)]
    drop_tolerance: Option<f64>,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    probe: Option<PathBuf>,
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    csv_out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct CompareArgs {
    #[arg(long)]
    before: Option<PathBuf>,
    #[arg(long)]
    after: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    csv_out: Option<PathBuf>,
}

fn parse_entry(s: &str) -> std::result::Result<SweepEntry, String> {
    let (task, report) = s.split_once('=').ok_or("expected TASK=REPORT")?;
    Ok(SweepEntry {
        task: task.to_string(),
        report: report.into(),
    })
}

#[derive(Args, Serialize)]
struct SweepArgs {
    /// TASK=REPORT, repeatable.
    #[arg(long = "report", value_parser = parse_entry)]
    reports: Option<Vec<SweepEntry>>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    csv_out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct AuditArgs {
    #[arg(long)]
    query: Option<PathBuf>,
    #[arg(long)]
    query_row: Option<usize>,
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    similarities_out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum MaskArg {
    Payload,
    All,
}

#[derive(Args, Serialize)]
struct InversionArgs {
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    eot_index: Option<usize>,
    #[arg(long, value_enum)]
    optimize_mask: Option<MaskArg>,
    #[arg(long)]
    #[serde(serialize_with = "skip_false")]
    plateau_stop: bool,
}

#[derive(Args, Serialize)]
struct InvertArgs {
    #[arg(long)]
    encoder_seed: Option<u64>,
    #[arg(long)]
    initial_text: Option<String>,
    #[arg(long)]
    target_text: Option<String>,
    #[arg(long)]
    target_vector: Option<PathBuf>,
    #[arg(long)]
    target_row: Option<usize>,
    #[command(flatten)]
    inversion: InversionArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct InvertGridArgs {
    #[arg(long)]
    encoder_seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    words: Option<Vec<String>>,
    #[command(flatten)]
    inversion: InversionArgs,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    runs_out: Option<PathBuf>,
}

fn section<A: Serialize>(cli_config: Option<&std::path::Path>, command: &str, flags: &A) -> Result<Value> {
    let mut base = config::load_section(cli_config, command)?;
    if let Some(top) = config::prune(serde_json::to_value(flags)?) {
        config::overlay(&mut base, top);
    }
    Ok(base)
}

macro_rules! dispatch {
    ($cli:expr, $name:literal, $args:expr, $ty:ty, $run:path) => {{
        let value = section($cli.config.as_deref(), $name, $args)?;
        let cfg: $ty = config::resolve($name, value)?;
        $run(&cfg)
    }};
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenSynth(a) => dispatch!(cli, "gen-synth", a, config::GenSynth, commands::gen_synth),
        Command::Split(a) => dispatch!(cli, "split", a, config::Split, commands::split_cmd),
        Command::ProbeTrain(a) => dispatch!(cli, "probe-train", a, config::ProbeTrain, commands::probe_train),
        Command::Distill(a) => dispatch!(cli, "distill", a, config::Distill, commands::distill),
        Command::Eval(a) => dispatch!(cli, "eval", a, config::Eval, commands::eval),
        Command::Compare(a) => dispatch!(cli, "compare", a, config::Compare, commands::compare),
        Command::Sweep(a) => dispatch!(cli, "sweep", a, config::Sweep, commands::sweep),
        Command::Audit(a) => dispatch!(cli, "audit", a, config::Audit, commands::audit),
        Command::Invert(a) => dispatch!(cli, "invert", a, config::Invert, commands::invert_cmd),
        Command::InvertGrid(a) => dispatch!(cli, "invert-grid", a, config::InvertGrid, commands::invert_grid),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Data => 3,
                ErrorKind::Numerical => 4,
            })
        }
    }
}
