//! Command-line front end. Exit codes: 0 success, 1 runtime failure,
//! 2 configuration or usage error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use xdlf::commands;
use xdlf::datagen::corpus::Split;
use xdlf::Error;

#[derive(Parser)]
#[command(name = "xdlf", version, about = "Cross-domain local-forensics deepfake detector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic real/fake clip corpus.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a detector and write a checkpoint and metrics CSV.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// full, no_fgfe, no_cross_attention, concat_fusion, freq_freq, rgb_rgb
        /// or no_time_2d.
        #[arg(long)]
        variant: Option<String>,
    },
    /// Evaluate a checkpoint on a corpus split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Defaults to `eval_<split>` beside the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump attention and band maps for one clip.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        clip: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic and numerical gradients.
    GradCheck {
        /// all, tensor, fgfe, fusion or model.
        #[arg(long, default_value = "all")]
        module: String,
    },
}

fn run(cli: Cli) -> Result<bool, Error> {
    match cli.command {
        Command::GenData { config, out, seed } => {
            let m = commands::gen_data(config.as_deref(), &out, seed)?;
            println!("wrote {} ({:.1}s)", out.display(), m.wall_clock_secs);
        }
        Command::Train {
            config,
            corpus,
            out,
            variant,
        } => {
            println!("epoch,lr,train_loss,train_acc,val_acc,val_auc");
            let m = commands::train_cmd(config.as_deref(), &corpus, &out, variant.as_deref(), |e| {
                println!("{}", e.csv_row())
            })?;
            println!("wrote {} ({:.1}s)", out.display(), m.wall_clock_secs);
        }
        Command::Eval {
            checkpoint,
            corpus,
            split,
            out,
        } => {
            let (r, _) = commands::eval_cmd(&checkpoint, &corpus, split, out.as_deref())?;
            println!(
                "{split}: video ACC {:.4} AUC {} | clip ACC {:.4} AUC {}",
                r.video_acc, r.video_auc, r.clip_acc, r.clip_auc
            );
        }
        Command::Inspect { checkpoint, clip, out } => {
            let m = commands::inspect_cmd(&checkpoint, &clip, &out)?;
            println!("wrote {} files to {}", m.outputs.len(), out.display());
        }
        Command::GradCheck { module } => {
            let reports = commands::grad_check_cmd(&module)?;
            let mut ok = true;
            for r in &reports {
                println!("{r}");
                ok &= r.passed();
            }
            return Ok(ok);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = std::env::var("XDLF_THREADS").ok().and_then(|v| v.parse().ok()) {
        // Fails only if the pool already exists, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 1 })
        }
    }
}
