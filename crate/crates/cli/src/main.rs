//! `fof`: synthetic data, cross-validated training, evaluation, and exports.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Arg, ArgMatches, Args, Command, CommandFactory, FromArgMatches, Parser, Subcommand};
use fof_core::Error;
use serde_json::Map;

use commands::Inspect;
use config::{flag_name, keys, parse_value, read_file, Group, Resolved};

#[derive(Debug, Parser)]
#[command(name = "fof", version, about = "Focus-oriented glioma grading on synthetic histology")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset directory.
    GenData(GenArgs),
    /// Cross-validate one configuration and write a run directory.
    Train(RunArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(InspectArgs),
    /// Export contribution maps and mask overlays for the predicted grade.
    Cam(InspectArgs),
    /// Export projected embeddings, one TSV per biomarker subspace.
    Embed(EmbedArgs),
    /// Cross-validate all four ablations with shared folds and seeds.
    Ablate(RunArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    /// Flat JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct InspectArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Model checkpoint (`model.ckpt`).
    #[arg(long)]
    checkpoint: PathBuf,
    /// File listing sample ids, one per line; defaults to all samples.
    #[arg(long)]
    ids: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EmbedArgs {
    #[command(flatten)]
    inspect: InspectArgs,
    /// Projection heads checkpoint (`projectors.ckpt`).
    #[arg(long)]
    projectors: PathBuf,
}

impl InspectArgs {
    fn view(&self) -> Inspect<'_> {
        Inspect {
            data: &self.data,
            out: &self.out,
            checkpoint: &self.checkpoint,
            ids: self.ids.as_deref(),
        }
    }
}

fn groups(subcommand: &str) -> &'static [Group] {
    match subcommand {
        "gen-data" => &[Group::Generator],
        "train" | "ablate" => &[Group::Model, Group::Train],
        _ => &[Group::Train],
    }
}

/// Adds one `--kebab-name VALUE` flag per configuration key.
fn with_key_flags(cmd: Command) -> Command {
    let names: Vec<String> = cmd.get_subcommands().map(|s| s.get_name().to_string()).collect();
    names.into_iter().fold(cmd, |cmd, name| {
        let group = groups(&name);
        cmd.mut_subcommand(name, |sub| {
            keys(group).into_iter().fold(sub, |sub, key| {
                let flag = flag_name(&key);
                sub.arg(
                    Arg::new(key.clone())
                        .long(flag)
                        .value_name("VALUE")
                        .help(format!("Override `{key}`"))
                        .help_heading("Configuration"),
                )
            })
        })
    })
}

fn resolve(config: Option<&PathBuf>, sub: &ArgMatches, group: &[Group]) -> Result<Resolved> {
    let file = match config {
        Some(p) => read_file(p)?,
        None => Map::new(),
    };
    let mut flags = Map::new();
    for key in keys(group) {
        if let Some(raw) = sub.get_one::<String>(&key) {
            flags.insert(key, parse_value(raw));
        }
    }
    Resolved::new(file, flags)
}

fn run(cli: Cli, matches: &ArgMatches) -> Result<()> {
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    let group = groups(name);
    match &cli.command {
        Cmd::GenData(a) => commands::gen_data(&resolve(a.config.as_ref(), sub, group)?, &a.out),
        Cmd::Train(a) => commands::train(&resolve(a.config.as_ref(), sub, group)?, &a.data, &a.out),
        Cmd::Ablate(a) => commands::ablate(&resolve(a.config.as_ref(), sub, group)?, &a.data, &a.out),
        Cmd::Eval(a) => commands::eval(&resolve(a.config.as_ref(), sub, group)?, &a.view()),
        Cmd::Cam(a) => commands::cam(&resolve(a.config.as_ref(), sub, group)?, &a.view()),
        Cmd::Embed(a) => {
            resolve(a.inspect.config.as_ref(), sub, group)?;
            commands::embed(&a.inspect.view(), &a.projectors)
        }
    }
}

/// 3 for configuration and input-format errors, 4 for I/O errors, 1 otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Io { .. }) => 4,
        Some(Error::Config(_) | Error::Format { .. } | Error::Domain { .. } | Error::BatchSize { .. } | Error::Json(_)) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let matches = match with_key_flags(Cli::command()).try_get_matches() {
        Ok(m) => m,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            eprintln!("{}", text.lines().next().unwrap_or("error: invalid arguments"));
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{}", e.to_string().lines().next().unwrap_or("error: invalid arguments"));
            return ExitCode::from(2);
        }
    };
    match run(cli, &matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::from(exit_code(&e))
        }
    }
}
