use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{CommandFactory, Parser, Subcommand};
use frameguide_cli::commands::{cmd_analyze, cmd_dataset, cmd_generate, cmd_train, Analysis, Globals, Task, TrainTarget};

#[derive(Debug, Parser)]
#[command(name = "frameguide", version, about = "Training-free frame-level guidance for a toy video diffusion model")]
struct Cli {
    /// JSON run configuration; relative paths inside it resolve against its directory.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Run directory; overrides the configured `out`.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Also sample the unguided video from the same seed.
    #[arg(long, global = true)]
    baseline: bool,
    /// Keep the sampler but skip every guidance update.
    #[arg(long = "guidance-off", global = true)]
    guidance_off: bool,
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Debug, Subcommand)]
enum Verb {
    /// Render the synthetic clip dataset.
    Dataset,
    /// Train the VAE or the denoiser.
    Train {
        #[arg(value_enum)]
        target: TrainTarget,
    },
    /// Sample a guided video.
    Generate {
        #[arg(value_enum)]
        task: Task,
    },
    /// Produce a report bundle.
    Analyze {
        #[arg(value_enum)]
        which: Analysis,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            if code != 0 {
                eprintln!("\n{}", Cli::command().render_usage());
            }
            return ExitCode::from(code);
        }
    };
    let g = Globals {
        config: cli.config,
        seed: cli.seed,
        out: cli.out,
        baseline: cli.baseline,
        guidance_off: cli.guidance_off,
    };
    let result = match cli.verb {
        Verb::Dataset => cmd_dataset(&g),
        Verb::Train { target } => cmd_train(&g, target),
        Verb::Generate { task } => cmd_generate(&g, task),
        Verb::Analyze { which } => cmd_analyze(&g, which),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
