use std::path::PathBuf;
use std::process::ExitCode;

use atlasprompt::par;
use atlasprompt_cli::{CliError, Pipeline, Stage};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "atlasprompt", version, about = "Atlas-prompted segmentation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Configuration file; defaults to <work-dir>/config.json, then built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true, default_value = ".")]
    work_dir: PathBuf,

    /// Overrides the configured seed for every stage.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for data-parallel kernels.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Comma-separated structure names or label ids.
    #[arg(long, global = true, value_delimiter = ',')]
    structures: Option<Vec<String>>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate the synthetic atlas series and subjects.
    Phantom,
    /// Register the age-matched atlases onto every subject.
    Register,
    /// Build box prompts and the prompt audit log.
    Prompt,
    Train,
    Infer,
    /// STAPLE-fuse the per-orientation predictions.
    Fuse,
    Evaluate,
    Report,
    /// Every stage in order, skipping those already up to date.
    Run,
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    if let Some(n) = cli.jobs {
        if !par::set_threads(n) {
            log::warn!("--jobs {n} ignored: thread pool already initialised or built without parallelism");
        }
    }
    let mut config = Pipeline::resolve_config(&cli.work_dir, cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(s) = &cli.structures {
        config.structures = s.clone();
    }
    let mut pipeline = Pipeline::open(&cli.work_dir, config)?;
    let stages: Vec<Stage> = match cli.command {
        Command::Phantom => vec![Stage::Phantom],
        Command::Register => vec![Stage::Register],
        Command::Prompt => vec![Stage::Prompt],
        Command::Train => vec![Stage::Train],
        Command::Infer => vec![Stage::Infer],
        Command::Fuse => vec![Stage::Fuse],
        Command::Evaluate => vec![Stage::Evaluate],
        Command::Report => vec![Stage::Report],
        Command::Run => Stage::ALL.to_vec(),
    };
    for stage in stages {
        let o = pipeline.run(stage)?;
        if o.skipped {
            println!("{stage}: up to date");
        } else if o.reused > 0 {
            println!("{stage}: done ({} computed, {} reused)", o.computed, o.reused);
        } else {
            println!("{stage}: done");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
