use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use alignmol::harness::{cmd_align_pca, cmd_eval, cmd_sample, cmd_train_ae, cmd_train_ldm, HarnessError, RunConfig};

#[derive(Parser)]
#[command(name = "alignmol", version, about = "Latent diffusion for 3D molecules with a learned alignment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the rotation network and autoencoder.
    TrainAe {
        #[command(flatten)]
        common: Common,
    },
    /// Train the latent denoiser against a frozen autoencoder.
    TrainLdm {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ae: PathBuf,
    },
    /// Sample molecules.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ae: PathBuf,
        #[arg(long)]
        ldm: PathBuf,
        /// Number of molecules (default: config `sample.n`, else 100).
        #[arg(long)]
        n: Option<usize>,
        /// Raw property values, in conditioning-key order.
        #[arg(long, num_args = 1.., allow_negative_numbers = true)]
        condition: Option<Vec<f64>>,
    },
    /// Stability, validity and uniqueness of a molecule file.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        bond_table: Option<PathBuf>,
    },
    /// Rotate every molecule into its principal-axes frame.
    AlignPca {
        #[command(flatten)]
        common: Common,
        /// Input file (default: the configured dataset).
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

fn config(common: &Common) -> Result<Option<RunConfig>, HarnessError> {
    let Some(path) = &common.config else { return Ok(None) };
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(Some(cfg))
}

fn require_config(common: &Common) -> Result<RunConfig, HarnessError> {
    config(common)?.ok_or_else(|| HarnessError::Usage("--config is required".into()))
}

fn require_out(common: &Common) -> Result<&Path, HarnessError> {
    common
        .out
        .as_deref()
        .ok_or_else(|| HarnessError::Usage("--out is required".into()))
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::TrainAe { common } => {
            let cfg = require_config(&common)?;
            let r = cmd_train_ae(&cfg, require_out(&common)?)?;
            println!(
                "epochs={} best_epoch={} best_val={:.6} rmsd={:.6} type_accuracy={:.6}",
                r.epochs, r.best_epoch, r.best_val, r.reconstruction.rmsd, r.reconstruction.type_accuracy
            );
        }
        Command::TrainLdm { common, ae } => {
            let cfg = require_config(&common)?;
            let r = cmd_train_ldm(&cfg, &ae, require_out(&common)?)?;
            println!(
                "iterations={} initial_loss={:.6} final_loss={:.6}",
                r.iterations, r.initial_loss, r.final_loss
            );
        }
        Command::Sample {
            common,
            ae,
            ldm,
            n,
            condition,
        } => {
            let cfg = config(&common)?;
            let n = n.or(cfg.as_ref().map(|c| c.sample.n)).unwrap_or(100);
            let seed = common.seed.or(cfg.as_ref().map(|c| c.seed)).unwrap_or(0);
            let condition = condition.or_else(|| cfg.as_ref().and_then(|c| c.sample.condition.clone()));
            let out = require_out(&common)?;
            let s = cmd_sample(&ae, &ldm, n, seed, condition.as_deref(), out)?;
            log::info!("wrote {} molecules to {}", s.len(), out.display());
        }
        Command::Eval {
            common,
            samples,
            bond_table,
        } => {
            let report = cmd_eval(&samples, bond_table.as_deref())?;
            print!("{report}");
            if let Some(out) = &common.out {
                std::fs::write(out, report.to_string()).map_err(|e| HarnessError::io(out, e))?;
            }
        }
        Command::AlignPca { common, input } => {
            let input = match input {
                Some(p) => p,
                None => require_config(&common)?.dataset,
            };
            let n = cmd_align_pca(&input, require_out(&common)?)?;
            log::info!("aligned {n} molecules");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
