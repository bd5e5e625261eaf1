use std::path::PathBuf;
use std::process::ExitCode;

use avguard_cli::commands;
use avguard_cli::config::{parse_override, ExperimentConfig};
use avguard_core::Result;
use clap::{Args, Parser, Subcommand};

/// Audio-in-video watermarking and audio tamper localization.
#[derive(Parser)]
#[command(name = "avguard", version)]
struct Cli {
    /// Experiment config (flat TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Override any config key, e.g. `--set iterations=200`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct Paths {
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    reference: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic clips as containers.
    GenData,
    /// Train a model (resumes when --checkpoint is given).
    Train {
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Hide a container's audio in its frames.
    Embed {
        #[command(flatten)]
        paths: Paths,
    },
    /// Recover frames and audio from a watermarked container.
    Recover {
        #[command(flatten)]
        paths: Paths,
    },
    /// Score a container's audio against the recovered audio.
    Localize {
        #[arg(long)]
        input: Option<PathBuf>,
        /// Recovered container; recovered on the fly when absent.
        #[arg(long)]
        recovered: Option<PathBuf>,
        #[arg(long)]
        ground_truth: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Apply an audio/visual attack to a container.
    Simulate {
        #[command(flatten)]
        paths: Paths,
        #[arg(long)]
        donor: Option<PathBuf>,
    },
    /// Run the full attack protocol over a dataset.
    Evaluate {
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
}

fn path_value(p: &std::path::Path) -> toml::Value {
    toml::Value::String(p.to_string_lossy().into_owned())
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    let mut overrides = cli.overrides.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>>>()?;
    let mut put_path = |key: &str, p: &Option<PathBuf>| {
        if let Some(p) = p {
            overrides.push((key.to_string(), path_value(p)));
        }
    };
    put_path("output", &cli.output);
    put_path("checkpoint", &cli.checkpoint);
    match &cli.command {
        Command::Train { dataset } | Command::Evaluate { dataset } => put_path("dataset", dataset),
        Command::Embed { paths } | Command::Recover { paths } => {
            put_path("input", &paths.input);
            put_path("reference", &paths.reference);
        }
        Command::Simulate { paths, donor } => {
            put_path("input", &paths.input);
            put_path("reference", &paths.reference);
            put_path("donor", donor);
        }
        Command::Localize { input, recovered, ground_truth, .. } => {
            put_path("input", input);
            put_path("recovered", recovered);
            put_path("ground_truth", ground_truth);
        }
        Command::GenData => {}
    }
    if let Command::Localize { threshold: Some(t), .. } = &cli.command {
        overrides.push(("threshold".into(), toml::Value::Float(*t)));
    }
    if let Some(seed) = cli.seed {
        let seed = i64::try_from(seed).map_err(|_| avguard_core::Error::Config("seed must fit in i64".into()))?;
        overrides.push(("seed".into(), toml::Value::Integer(seed)));
    }
    let cfg = ExperimentConfig::with_overrides(cli.config.as_deref(), &overrides)?;
    cfg.validate()?;
    match cli.command {
        Command::GenData => commands::gen_data(&cfg),
        Command::Train { .. } => commands::train_cmd(&cfg),
        Command::Embed { .. } => commands::embed_cmd(&cfg),
        Command::Recover { .. } => commands::recover_cmd(&cfg),
        Command::Localize { .. } => commands::localize_cmd(&cfg),
        Command::Simulate { .. } => commands::simulate_cmd(&cfg),
        Command::Evaluate { .. } => commands::evaluate_cmd(&cfg),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e) as u8)
        }
    }
}
