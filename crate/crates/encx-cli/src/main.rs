//! `encx`: generate, prepare, train, evaluate, and analyze encoding runs over
//! portable matrix containers.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
//! failure.

mod commands;
mod config;

use clap::{Parser, Subcommand};
use commands::TrainArgs;
use config::CliConfig;
use encx_core::EncxError;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "encx", version, about = "Encoding-model workbench pipeline")]
struct Cli {
    /// JSON config file; flags override individual fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker thread cap (or the ENCX_THREADS environment variable).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset with ground truth.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Align, z-score, delay-embed, and fit PCA from a dataset manifest.
    Prepare {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one encoder on a prepared directory.
    Train {
        #[arg(long)]
        prepared: PathBuf,
        /// semantic | audio | both
        #[arg(long)]
        modality: String,
        /// linear | mllinear | mlp | dimlp
        #[arg(long)]
        encoder: String,
        /// pca | voxels
        #[arg(long, default_value = "voxels")]
        output_space: String,
        /// Component count for pca output (default min(512, k_max)).
        #[arg(long)]
        n_pca: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a trained model on the prepared test story.
    Eval {
        #[arg(long)]
        prepared: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Error-difference analysis between model pairs plus the connectivity baseline.
    Red {
        #[arg(long)]
        prepared: PathBuf,
        /// label=model1:model2 (repeatable)
        #[arg(long = "pair")]
        pairs: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Variance partitioning across semantic / audio / joint models.
    Vp {
        #[arg(long)]
        prepared: PathBuf,
        #[arg(long)]
        sem: PathBuf,
        #[arg(long)]
        aud: PathBuf,
        #[arg(long)]
        joint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Consolidate eval summaries under a run directory into one table.
    Report {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(classify(&err))
        }
    }
}

fn classify(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(encx) = cause.downcast_ref::<EncxError>() {
            return match encx {
                EncxError::InvalidArgument(_) => 2,
                EncxError::Numerical(_) => 4,
                _ => 3,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    if format!("{err:#}").contains("config error") {
        2
    } else {
        3
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = CliConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let threads = cli.threads.or_else(|| {
        std::env::var("ENCX_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(n) = threads {
        // A second initialization (as in tests that call run twice) is not an
        // error worth dying for.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }

    match cli.cmd {
        Cmd::Synth { out } => commands::cmd_synth(&cfg, &out),
        Cmd::Prepare { manifest, out } => commands::cmd_prepare(&cfg, &manifest, &out),
        Cmd::Train {
            prepared,
            modality,
            encoder,
            output_space,
            n_pca,
            out,
        } => commands::cmd_train(
            &cfg,
            &prepared,
            &TrainArgs {
                modality,
                encoder,
                output_space,
                n_pca,
            },
            &out,
        ),
        Cmd::Eval {
            prepared,
            model,
            out,
        } => commands::cmd_eval(&cfg, &prepared, &model, &out),
        Cmd::Red {
            prepared,
            pairs,
            out,
        } => {
            let parsed: anyhow::Result<Vec<_>> =
                pairs.iter().map(|p| commands::parse_pair(p)).collect();
            commands::cmd_red(&cfg, &prepared, &parsed?, &out)
        }
        Cmd::Vp {
            prepared,
            sem,
            aud,
            joint,
            out,
        } => commands::cmd_vp(&cfg, &prepared, &sem, &aud, &joint, &out),
        Cmd::Report { run, out } => commands::cmd_report(&cfg, &run, &out),
    }
}
