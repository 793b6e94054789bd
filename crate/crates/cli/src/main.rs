//! `tsda`: generate synthetic domains, pretrain, adapt, evaluate and run
//! experiment matrices, ablations, sweeps and significance tests.

mod commands;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "tsda",
    version,
    about = "Unsupervised domain adaptation for time-series classification"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Layered TOML config (dataset, model, pretrain, adapt, runner sections).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run with this single seed instead of the configured seed list.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Parallel scenario workers (0: every core).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Config override `section.key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic source/target pair as domain directories.
    GenerateSynthetic {
        /// Shift preset: none, small, medium or large.
        #[arg(long)]
        preset: Option<String>,
    },
    /// Pretrain a source model and save its checkpoint.
    Pretrain {
        /// Source domain name.
        #[arg(long, default_value = "source")]
        source: String,
    },
    /// Adapt a pretrained source checkpoint to an unlabeled target domain.
    Adapt {
        #[arg(long)]
        source_ckpt: PathBuf,
        #[arg(long, default_value = "source")]
        source: String,
        #[arg(long, default_value = "target")]
        target: String,
    },
    /// Score a checkpoint on a domain's test split.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        domain: String,
    },
    /// Every ordered domain pair of the configured family.
    Matrix {
        /// Comma-separated variants.
        #[arg(long, default_value = "full,source_only", value_delimiter = ',')]
        variants: Vec<String>,
    },
    /// All ablation variants on one scenario.
    Ablate {
        #[arg(long, default_value = "source")]
        source: String,
        #[arg(long, default_value = "target")]
        target: String,
    },
    /// Sensitivity of one scenario to λ or ζ.
    Sweep {
        /// `lambda` or `zeta`.
        #[arg(long)]
        param: String,
        /// Comma-separated increasing values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long, default_value = "source")]
        source: String,
        #[arg(long, default_value = "target")]
        target: String,
        #[arg(long, default_value = "full")]
        variant: String,
    },
    /// Wilcoxon signed-rank test between two variants' per-scenario means.
    Significance {
        /// Seed records written by `matrix` or `ablate`.
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        a: String,
        #[arg(long)]
        b: String,
        /// Pair individual (scenario, seed) scores instead of scenario means.
        #[arg(long)]
        per_seed: bool,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let ctx = commands::Context::new(&cli.global)?;
    match cli.command {
        Command::GenerateSynthetic { preset } => commands::generate_synthetic(&ctx, preset.as_deref()),
        Command::Pretrain { source } => commands::pretrain(&ctx, &source),
        Command::Adapt {
            source_ckpt,
            source,
            target,
        } => commands::adapt(&ctx, &source_ckpt, &source, &target),
        Command::Evaluate { ckpt, domain } => commands::evaluate(&ctx, &ckpt, &domain),
        Command::Matrix { variants } => commands::matrix(&ctx, &variants),
        Command::Ablate { source, target } => commands::ablate(&ctx, &source, &target),
        Command::Sweep {
            param,
            values,
            source,
            target,
            variant,
        } => commands::sweep(&ctx, &param, &values, &source, &target, &variant),
        Command::Significance {
            records,
            a,
            b,
            per_seed,
        } => commands::significance(&records, &a, &b, per_seed),
    }
}
