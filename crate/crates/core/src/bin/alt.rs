use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use alt_core::config::{AdaptConfig, Preset};
use alt_core::harness::{self, adapted_checkpoint_path, source_checkpoint_path};
use alt_core::AltError;

#[derive(Parser)]
#[command(
    name = "alt",
    version,
    about = "Source-free domain adaptation with adaptive local transfer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config file; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Method preset applied on top of the config.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Field override, e.g. `--set adapt.k=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the source model.
    Pretrain(Common),
    /// Adapt a source checkpoint on the target domain.
    Adapt {
        #[command(flatten)]
        common: Common,
        /// Source checkpoint; defaults to `<out>/source.altc`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write diagnostics for a checkpoint.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to analyze; defaults to `<out>/adapted.altc`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the preset grid over the configured seeds.
    Ablate(Common),
}

fn load(common: &Common) -> Result<AdaptConfig, AltError> {
    let mut cfg = AdaptConfig::load_with_overrides(common.config.as_deref(), &common.overrides)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
    if let Some(p) = common.preset {
        cfg.apply_preset(p);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), AltError> {
    match cli.command {
        Command::Pretrain(common) => {
            let cfg = load(&common)?;
            let path = harness::cmd_pretrain(&cfg)?;
            println!("wrote {}", path.display());
        }
        Command::Adapt { common, checkpoint } => {
            let cfg = load(&common)?;
            let ckpt = checkpoint.unwrap_or_else(|| source_checkpoint_path(&cfg.out_dir));
            let run = harness::cmd_adapt(&cfg, &ckpt)?;
            println!(
                "source-only accuracy {:.4}, adapted accuracy {:.4}",
                run.source_only.accuracy, run.target_eval.accuracy
            );
        }
        Command::Analyze { common, checkpoint } => {
            let mut cfg = load(&common)?;
            let ckpt = checkpoint.unwrap_or_else(|| adapted_checkpoint_path(&cfg.out_dir));
            // Without an explicit config, analyze with the one the checkpoint was trained under.
            if common.config.is_none() && common.overrides.is_empty() {
                if let Some(embedded) = harness::embedded_config(&ckpt)? {
                    let out = cfg.out_dir.clone();
                    cfg = embedded;
                    cfg.out_dir = out;
                    if let Some(s) = common.seed {
                        cfg.seed = s;
                    }
                }
            }
            let report = harness::cmd_analyze(&cfg, &ckpt)?;
            print!("{}", report.summary());
        }
        Command::Ablate(common) => {
            let cfg = load(&common)?;
            let table = harness::cmd_ablate(&cfg)?;
            print!("{}", table.to_csv());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!(
                "error kind={} msg={}",
                e.kind(),
                e.to_string().replace('\n', " ")
            );
            ExitCode::FAILURE
        }
    }
}
