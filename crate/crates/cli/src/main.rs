use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ddm_cli::artifacts::ModelKind;
use ddm_cli::commands::{self, SampleArgs, UncertaintyArgs};
use ddm_cli::Result;
use ddm_core::ddm::SamplerMode;
use ddm_core::uq::UqMode;

#[derive(Parser)]
#[command(name = "ddm", version, about = "Deterministic diffusion imaging pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Ddm,
    Dpm,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Direct,
    Indirect,
}

#[derive(Clone, Copy, ValueEnum)]
enum UqModeArg {
    Naive,
    Full,
}

#[derive(Subcommand)]
enum Command {
    /// Generate ground truths and raw patterns.
    GenData {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the DDM or the DPM baseline on the generated dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value = "ddm")]
        model: ModelArg,
    },
    /// Reconstruct the test split from a checkpoint.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset archive; defaults to data.ddt next to the checkpoint.
        #[arg(long)]
        data: Option<PathBuf>,
        /// DDM sampler; indirect when omitted.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Reverse steps; the trained horizon when omitted.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Store every visited state.
        #[arg(long)]
        trajectory: bool,
        /// Number of PGM previews; the config value when omitted.
        #[arg(long)]
        previews: Option<usize>,
    },
    /// Model and data uncertainty along the reverse chain.
    Uncertainty {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Dropout samples per step.
        #[arg(long = "S")]
        samples: Option<usize>,
        /// Covariance samples per step.
        #[arg(long = "H")]
        h: Option<usize>,
        #[arg(long, value_enum)]
        mode: Option<UqModeArg>,
        /// Chains averaged into the most-trusted reconstruction.
        #[arg(long)]
        paths: Option<usize>,
        /// Test samples analysed.
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-sample metrics and a summary line.
    Eval {
        #[arg(long)]
        recon: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config } => {
            println!("{}", commands::gen_data(&config)?.display());
        }
        Command::Train { config, model } => {
            let kind = match model {
                ModelArg::Ddm => ModelKind::Ddm,
                ModelArg::Dpm => ModelKind::Dpm,
            };
            let path = commands::train(&config, kind, &mut |line| eprintln!("{line}"))?;
            println!("{}", path.display());
        }
        Command::Sample {
            ckpt,
            data,
            mode,
            steps,
            out,
            trajectory,
            previews,
        } => {
            let args = SampleArgs {
                data,
                mode: mode.map(|m| match m {
                    ModeArg::Direct => SamplerMode::Direct,
                    ModeArg::Indirect => SamplerMode::Indirect,
                }),
                steps,
                out,
                trajectory,
                previews,
            };
            println!("{}", commands::sample(&ckpt, &args)?.display());
        }
        Command::Uncertainty {
            ckpt,
            data,
            samples,
            h,
            mode,
            paths,
            count,
            out,
        } => {
            let args = UncertaintyArgs {
                data,
                samples,
                h,
                mode: mode.map(|m| match m {
                    UqModeArg::Naive => UqMode::Naive,
                    UqModeArg::Full => UqMode::Full,
                }),
                paths,
                count,
                out,
            };
            println!("{}", commands::uncertainty(&ckpt, &args)?.display());
        }
        Command::Eval { recon, data, out } => {
            let (path, summary) = commands::eval(&recon, &data, out.as_deref())?;
            println!("{summary}");
            eprintln!("{}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ddm: {e}");
            e.exit_code()
        }
    }
}
