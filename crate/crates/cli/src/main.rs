//! `fnerf`: create a multi-scene model, add scenes one at a time, render,
//! evaluate and report storage.
//!
//! Exit codes: 0 success, 1 usage or configuration, 2 data or model file,
//! 3 non-finite values during training.

mod commands;
mod config;
mod files;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use factorized_nerf::Error;

#[derive(Parser)]
#[command(name = "fnerf", version, about = "Multi-scene radiance fields with continual scene addition")]
struct Cli {
    /// Seed for every random choice; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Log more; repeat for debug output.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

/// Run configuration sources, lowest precedence first.
#[derive(Args, Clone, Default)]
pub struct ConfigArgs {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set total_steps=2000`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Create a model with no scenes.
    Init {
        #[arg(long)]
        out: PathBuf,
        /// Replace an existing model file.
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train a new scene into the model from its images alone.
    AddScene {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        scene_id: String,
        /// Dataset directory with transforms_{train,test}.json, or builtin:<name>.
        #[arg(long)]
        data: String,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Render one view of a trained scene.
    Render {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        scene_id: String,
        /// Index of a stored training pose, or a file holding a 4×4 camera-to-world matrix.
        #[arg(long, default_value = "0")]
        pose: String,
        /// Output size, `N` or `WxH`; defaults to the stored intrinsics.
        #[arg(long)]
        size: Option<String>,
        /// Samples per ray.
        #[arg(long, default_value_t = 64)]
        samples: usize,
        #[arg(long)]
        out: PathBuf,
        /// Also write the unquantized image as a float dump.
        #[arg(long)]
        raw: Option<PathBuf>,
    },
    /// Per-scene quality across stages and on the current model.
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// Directory searched for `<scene-id>/` datasets of non-built-in scenes.
        #[arg(long)]
        data_root: Option<PathBuf>,
        /// Samples per ray.
        #[arg(long, default_value_t = 64)]
        samples: usize,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Shared and per-scene bytes, with the size projected to more scenes.
    Size {
        #[arg(long)]
        model: PathBuf,
        /// Scene counts to project to.
        #[arg(long, value_delimiter = ',', default_value = "1,10,100")]
        scenes: Vec<usize>,
        #[arg(long)]
        json: bool,
    },
    /// Print every config key with its default and description.
    Defaults,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config { .. } => 1,
        Error::NonFinite { .. } => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();

    let seed = cli.seed;
    let result = match cli.command {
        Command::Init { out, force, config } => commands::init(&out, force, &config, seed),
        Command::AddScene { model, scene_id, data, config } => {
            commands::add_scene(&model, &scene_id, &data, &config, seed)
        }
        Command::Render { model, scene_id, pose, size, samples, out, raw } => {
            commands::render(&commands::RenderArgs { model, scene_id, pose, size, samples, out, raw })
        }
        Command::Eval { model, data_root, samples, json } => {
            commands::eval(&model, data_root.as_deref(), samples, json)
        }
        Command::Size { model, scenes, json } => commands::size(&model, &scenes, json),
        Command::Defaults => {
            print!("{}", config::RunConfig::default().to_text());
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
