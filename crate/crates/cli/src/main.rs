//! `hamlet` — train, evaluate, sweep, and introspect hierarchical
//! multimodal attention classifiers.
//!
//! Exit codes: 0 success, 2 configuration/validation error, 3
//! runtime/numeric error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hamlet_core::config::RunConfig;
use hamlet_core::Error;

mod commands;
mod gradcheck;

#[derive(Parser)]
#[command(name = "hamlet", version, about = "Hierarchical multimodal attention classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes checkpoint, history CSV, standardizer, and
    /// the effective config into the output directory
    Train(TrainArgs),
    /// Evaluate a checkpoint; prints a metrics report as JSON
    Eval(EvalArgs),
    /// Cross-validated sweep over head counts and fusion modes
    Sweep(SweepArgs),
    /// Export recorded attention maps as JSON
    ExportAttention(ExportArgs),
    /// Verify every block's gradients against finite differences
    Gradcheck(GradcheckArgs),
    /// Materialize a synthetic dataset to disk
    GenerateData(GenerateArgs),
}

/// Flags shared by config-driven commands; every flag overrides the
/// corresponding file value.
#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML run config
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// mat-sum | mat-concat | sum | concat
    #[arg(long)]
    fusion: Option<String>,
    #[arg(long)]
    uat_heads: Option<usize>,
    #[arg(long)]
    mat_heads: Option<usize>,
    /// hamlet | nsa | usa | keyless
    #[arg(long)]
    variant: Option<String>,
    /// Accept dropout outside [0.2, 0.4]
    #[arg(long)]
    allow_any_dropout: bool,
    /// Abort on any non-finite intermediate value
    #[arg(long)]
    check_finite: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => {
                return Err(Error::Config(
                    "this command needs --config pointing at a run config".into(),
                ))
            }
        };
        if let Some(seed) = self.seed {
            cfg.training.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.output.dir = out.clone();
        }
        if let Some(fusion) = &self.fusion {
            cfg.model.fusion = fusion.parse()?;
        }
        if let Some(h) = self.uat_heads {
            cfg.model.uat_heads = h;
        }
        if let Some(h) = self.mat_heads {
            cfg.model.mat_heads = h;
        }
        if let Some(v) = &self.variant {
            cfg.model.variant = v.parse()?;
        }
        cfg.allow_any_dropout |= self.allow_any_dropout;
        cfg.check_finite |= self.check_finite;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint written by `hamlet train`
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset manifest; defaults to the data source recorded in the
    /// checkpoint's config
    #[arg(long)]
    data: Option<PathBuf>,
    /// Write the JSON report here as well as to stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Head-count cells as `uat:mat` pairs
    #[arg(long, value_delimiter = ',', default_values_t = ["1:1".to_string(), "1:2".to_string(), "2:2".to_string(), "2:4".to_string()])]
    cells: Vec<String>,
    /// Fusion modes to cross with the cells
    #[arg(long, value_delimiter = ',', default_values_t = ["mat-sum".to_string(), "mat-concat".to_string()])]
    fusions: Vec<String>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset manifest; defaults to the checkpoint config's data source
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output file (or directory with --per-sample)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Include raw per-head weight matrices
    #[arg(long)]
    raw: bool,
    /// One JSON file per sample instead of a single array
    #[arg(long)]
    per_sample: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Optional run config; its model section sizes the full-model check
    /// (dims are capped: embedding <= 16, segments <= 4, batch <= 2)
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    /// Run config with a `[data.synthetic]` section
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory to write the manifest and sample files into
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => args
            .config
            .resolve()
            .and_then(|cfg| commands::cmd_train(&cfg)),
        Command::Eval(args) => {
            commands::cmd_eval(&args.checkpoint, args.data.as_deref(), args.out.as_deref())
        }
        Command::Sweep(args) => args
            .config
            .resolve()
            .and_then(|cfg| commands::cmd_sweep(&cfg, &args.cells, &args.fusions)),
        Command::ExportAttention(args) => commands::cmd_export_attention(
            &args.checkpoint,
            args.data.as_deref(),
            args.out.as_deref(),
            args.raw,
            args.per_sample,
        ),
        Command::Gradcheck(args) => gradcheck::cmd_gradcheck(args.config.as_deref()),
        Command::GenerateData(args) => {
            commands::cmd_generate_data(&args.config, args.seed, &args.out)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            if err.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
