//! Argument parsing and command dispatch.

use std::fs;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use clusternet::checkpoint::load_checkpoint;
use clusternet::trainer::AblationMode;

use crate::error::{CliError, CliResult};
use crate::export::{encoder_rasters, to_dot, StructureExport};
use crate::generate::generate;
use crate::gradcheck::{build_case, check_gradients, parse_connections};
use crate::run::{run_ablation, run_training, RunSpec, Task};

#[derive(Debug, Parser)]
#[command(name = "clusternet", version, about = "Self-evolving neuron-cluster networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a network, evolving its structure on loss plateaus.
    Train(TrainArgs),
    /// Evaluate a checkpoint before and after removing structure.
    Ablate(AblateArgs),
    /// Continue a prompt with a text-task checkpoint.
    Generate(GenerateArgs),
    /// Write a checkpoint's structure as JSON, DOT or PGM rasters.
    Export(ExportArgs),
    /// Compare analytic and finite-difference gradients on a tiny network.
    Gradcheck(GradcheckArgs),
}

/// Epochs of patience; `None` never triggers evolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Patience(pub Option<u64>);

fn parse_patience(s: &str) -> Result<Patience, String> {
    match s {
        "inf" | "none" | "never" => Ok(Patience(None)),
        n => n.parse::<u64>().map(|p| Patience(Some(p))).map_err(|e| format!("{e}")),
    }
}

fn parse_probs(s: &str) -> Result<[f64; 4], String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    let probs: [f64; 4] = parts
        .try_into()
        .map_err(|_| "expected four values: split,grow,connect,prune".to_string())?;
    if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err("probabilities must be finite and non-negative".into());
    }
    Ok(probs)
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub task: Task,
    /// CIFAR-style binary file or directory (image), or a text file (text).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    pub d_hidden: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub epochs: u64,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    /// Stagnant epochs before an evolution event, or `inf`.
    #[arg(long, default_value = "10", value_parser = parse_patience)]
    pub patience: Patience,
    #[arg(long, default_value_t = 1e-4)]
    pub min_delta: f64,
    /// Relative strategy weights: split,grow,connect,prune.
    #[arg(long, default_value = "0.25,0.25,0.35,0.15", value_parser = parse_probs)]
    pub probs: [f64; 4],
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub no_split: bool,
    #[arg(long)]
    pub init_dense_connections: bool,
    #[arg(long, default_value_t = 1)]
    pub eval_interval: u64,
    #[arg(long, default_value_t = 0.1)]
    pub eval_fraction: f64,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long, default_value_t = 16)]
    pub patch_size: usize,
    /// Text context length; one initial cluster per position.
    #[arg(long, default_value_t = 8)]
    pub context: usize,
    #[arg(long, default_value_t = 4096)]
    pub samples: usize,
    #[arg(long, default_value_t = 4)]
    pub patches: usize,
    #[arg(long, default_value_t = 4)]
    pub patch_dim: usize,
    #[arg(long, default_value_t = 0.2)]
    pub noise: f64,
}

impl TrainArgs {
    pub fn spec(&self) -> RunSpec {
        RunSpec {
            task: self.task,
            data: self.data.clone(),
            d_hidden: self.d_hidden,
            seed: self.seed,
            epochs: self.epochs,
            batch_size: self.batch_size,
            patience: self.patience.0,
            min_delta: self.min_delta,
            probs: self.probs,
            split_enabled: !self.no_split,
            init_dense_connections: self.init_dense_connections,
            eval_interval: self.eval_interval,
            eval_fraction: self.eval_fraction,
            lr: self.lr,
            weight_decay: self.weight_decay,
            patch_size: self.patch_size,
            context: self.context,
            xor_samples: self.samples,
            xor_patches: self.patches,
            xor_patch_dim: self.patch_dim,
            xor_noise: self.noise,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    A,
    B,
    C,
    None,
}

impl From<ModeArg> for AblationMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::A => AblationMode::KeepInitialOnly,
            ModeArg::B => AblationMode::KeepInitialAndTheirConnections,
            ModeArg::C => AblationMode::DropAllConnections,
            ModeArg::None => AblationMode::None,
        }
    }
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// A: initial clusters only; B: initial clusters and their connections;
    /// C: drop every connection.
    #[arg(long, value_enum, ignore_case = true)]
    pub mode: ModeArg,
    /// Run description; defaults to run.json beside the checkpoint.
    #[arg(long)]
    pub run: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "")]
    pub prompt: String,
    #[arg(long, default_value_t = 64)]
    pub length: usize,
    #[arg(long, default_value_t = 0.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExportFormat {
    Json,
    Dot,
    Pgm,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum)]
    pub format: ExportFormat,
    /// Output file (json, dot) or directory (pgm).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 3)]
    pub d_hidden: usize,
    #[arg(long, default_value_t = 2)]
    pub clusters: usize,
    /// Comma-separated `source>target` cluster pairs, e.g. `0>1,1>0`.
    #[arg(long, default_value = "none")]
    pub connections: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn train_cmd(args: &TrainArgs, out: &mut dyn Write) -> CliResult<()> {
    let outcome = run_training(&args.spec(), &args.out)?;
    if let Some(last) = outcome.history.last() {
        writeln!(
            out,
            "epoch {} train_loss {:.6} eval_loss {:.6} top1 {:.4} clusters {} connections {} events {}",
            last.epoch,
            last.train_loss,
            last.eval_loss,
            last.top1,
            last.cluster_count,
            last.connection_count,
            last.events_so_far
        )?;
    }
    Ok(())
}

fn ablate_cmd(args: &AblateArgs, out: &mut dyn Write) -> CliResult<()> {
    let report = run_ablation(&args.checkpoint, args.run.as_deref(), args.mode.into())?;
    write!(out, "{}", report.render())?;
    Ok(())
}

fn generate_cmd(args: &GenerateArgs, out: &mut dyn Write, err: &mut dyn Write) -> CliResult<()> {
    let (net, _) = load_checkpoint(&args.checkpoint)?;
    let g = generate(&net, args.prompt.as_bytes(), args.length, args.temperature, args.seed)?;
    if let Some(w) = &g.warning {
        writeln!(err, "warning: {w}")?;
    }
    out.write_all(&g.text)?;
    writeln!(out)?;
    Ok(())
}

fn export_cmd(args: &ExportArgs, out: &mut dyn Write) -> CliResult<()> {
    let (net, _) = load_checkpoint(&args.checkpoint)?;
    match args.format {
        ExportFormat::Json => fs::write(&args.out, StructureExport::of(&net).to_json())?,
        ExportFormat::Dot => fs::write(&args.out, to_dot(&net))?,
        ExportFormat::Pgm => {
            fs::create_dir_all(&args.out)?;
            let rasters = encoder_rasters(&net)?;
            for r in &rasters {
                fs::write(args.out.join(format!("cluster_{}.pgm", r.cluster)), r.to_pgm())?;
            }
            writeln!(out, "wrote {} rasters", rasters.len())?;
        }
    }
    Ok(())
}

fn gradcheck_cmd(args: &GradcheckArgs, out: &mut dyn Write) -> CliResult<()> {
    let edges = parse_connections(&args.connections)?;
    let (net, batch) = build_case(args.d_hidden, args.clusters, &edges, args.seed)?;
    let report = check_gradients(&net, &batch, &|_, _| {})?;
    write!(out, "{}", report.render())?;
    if report.passed() {
        Ok(())
    } else {
        let worst = report.worst().expect("a failing report has entries");
        Err(CliError::Numeric(format!("gradient mismatch in {}", worst.name)))
    }
}

pub fn run(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> CliResult<()> {
    match &cli.command {
        Command::Train(a) => train_cmd(a, out),
        Command::Ablate(a) => ablate_cmd(a, out),
        Command::Generate(a) => generate_cmd(a, out, err),
        Command::Export(a) => export_cmd(a, out),
        Command::Gradcheck(a) => gradcheck_cmd(a, out),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn main_with_args(args: &[String], out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = write!(err, "{e}");
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(&cli, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
