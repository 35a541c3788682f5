use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sail_core::config::RunConfig;
use sail_core::pipeline;
use sail_core::{Result, SailError};

/// Structure-aware interpretable learning on synthetic layered scenes.
#[derive(Parser)]
#[command(name = "sail", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run config; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the master seed and both training seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Stage I segmentation pretraining.
    Pretrain(Common),
    /// Stage II classification fine-tuning.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Stage I checkpoint (default: <out>/stage1.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Train from random initialization instead of a Stage I checkpoint.
        #[arg(long)]
        from_scratch: bool,
    },
    /// Attribution maps for every test scene.
    Explain {
        #[command(flatten)]
        common: Common,
        /// Stage II checkpoint (default: <out>/stage2.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Explanation and classification metrics for saved maps.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Maps directory (default: <out>/maps).
        #[arg(long)]
        maps: Option<PathBuf>,
        /// Accept artifacts produced under a different config hash.
        #[arg(long)]
        force: bool,
    },
    /// Trains and scores all six classification heads.
    AblateHeads {
        #[command(flatten)]
        common: Common,
        /// Stage I checkpoint (default: <out>/stage1.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        from_scratch: bool,
    },
    /// Scores attribution at every registered layer.
    AblateLayers {
        #[command(flatten)]
        common: Common,
        /// Stage II checkpoint (default: <out>/stage2.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Exports the synthetic dataset as PGM images and masks.
    GenData(Common),
}

fn load(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var("SAIL_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| SailError::Usage(format!("SAIL_THREADS must be a positive integer, got '{raw}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| SailError::Usage(e.to_string()))
}

fn run(cli: Cli) -> Result<PathBuf> {
    init_threads()?;
    match cli.command {
        Command::Pretrain(c) => pipeline::cmd_pretrain(&load(&c)?),
        Command::Finetune {
            common,
            checkpoint,
            from_scratch,
        } => pipeline::cmd_finetune(&load(&common)?, checkpoint.as_deref(), from_scratch),
        Command::Explain { common, checkpoint } => pipeline::cmd_explain(&load(&common)?, checkpoint.as_deref()),
        Command::Evaluate {
            common,
            checkpoint,
            maps,
            force,
        } => pipeline::cmd_evaluate(&load(&common)?, checkpoint.as_deref(), maps.as_deref(), force),
        Command::AblateHeads {
            common,
            checkpoint,
            from_scratch,
        } => pipeline::cmd_ablate_heads(&load(&common)?, checkpoint.as_deref(), from_scratch),
        Command::AblateLayers { common, checkpoint } => {
            pipeline::cmd_ablate_layers(&load(&common)?, checkpoint.as_deref())
        }
        Command::GenData(c) => pipeline::cmd_gen_data(&load(&c)?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(path) => {
            println!("{}", path.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("sail: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
