mod commands;

use std::path::PathBuf;
use std::process::ExitCode;
use clap::{Parser, Subcommand, ValueEnum};


#[derive(Parser, Debug)]
#[command(name = "enlighten", version, about = "Unpaired low-light image enhancement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Gan,
    Ahe,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Split a folder of photos into low-light (trainA) and normal-light
    /// (trainB) sets by mean intensity and write a manifest.
    PrepareData {
        src: PathBuf,
        out: PathBuf,
        #[arg(long, default_value_t = enlighten::data::DEFAULT_LOW_THRESHOLD)]
        low_threshold: f64,
        /// File names to leave out, one per line.
        #[arg(long)]
        exclude: Option<PathBuf>,
        /// Output size as WIDTHxHEIGHT.
        #[arg(long, default_value = "600x400", conflicts_with = "keep_size")]
        resize: String,
        /// Convert to PNG without resizing.
        #[arg(long)]
        keep_size: bool,
    },
    /// Train from a TOML config.
    Train {
        config: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train with the low-light side replaced by the dark images of a
    /// target folder.
    Adapt {
        config: PathBuf,
        target_low_dir: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Enhance every image of a folder into PNGs with the same names.
    Enhance {
        input: PathBuf,
        output: PathBuf,
        #[arg(long, value_enum, default_value_t = Method::Gan)]
        method: Method,
        /// Required for `--method gan`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long, default_value_t = 8)]
        tiles_x: usize,
        #[arg(long, default_value_t = 8)]
        tiles_y: usize,
        /// CLAHE clip limit; 0 disables clipping.
        #[arg(long, default_value_t = 0.0)]
        clip_limit: f64,
    },
    /// Score every image of a folder; prints one JSON line per image and a
    /// summary line.
    EvaluateNiqe {
        dir: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Write the report here instead of stdout.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Fit a pristine NIQE model to a folder of natural images.
    FitNiqe {
        dir: PathBuf,
        /// `.json` for text, anything else for the binary format.
        output: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(commands::USER_ERROR) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::PrepareData {
            src,
            out,
            low_threshold,
            exclude,
            resize,
            keep_size,
        } => commands::prepare_data(&src, &out, low_threshold, exclude.as_deref(), (!keep_size).then_some(resize.as_str())),
        Command::Train { config, resume, seed } => commands::train(&config, None, resume.as_deref(), seed),
        Command::Adapt {
            config,
            target_low_dir,
            resume,
            seed,
        } => commands::train(&config, Some(&target_low_dir), resume.as_deref(), seed),
        Command::Enhance {
            input,
            output,
            method,
            checkpoint,
            jobs,
            tiles_x,
            tiles_y,
            clip_limit,
        } => {
            let ahe = enlighten::baselines::AheConfig {
                tiles_x,
                tiles_y,
                clip_limit,
            };
            commands::enhance(&input, &output, method, checkpoint.as_deref(), jobs, ahe)
        }
        Command::EvaluateNiqe { dir, model, report, jobs } => {
            commands::evaluate_niqe(&dir, &model, report.as_deref(), jobs)
        }
        Command::FitNiqe { dir, output } => commands::fit_niqe(&dir, &output),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            log::error!("{}", failure.message);
            ExitCode::from(failure.code)
        }
    }
}
