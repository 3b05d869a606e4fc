use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use pairwise_compose::Config;

mod commands;

#[derive(Parser, Debug)]
#[command(name = "compose", version, about = "Pairwise object compositing experiments")]
struct Cli {
    /// JSON configuration file; every field is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Dotted configuration override, e.g. `--set train.steps=50`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scene corpus plus manifest.
    GenCorpus {
        /// Number of scenes (defaults to data.train_scenes).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Select boxes per image from a JSON-lines annotation file.
    Select {
        #[arg(long)]
        annotations: PathBuf,
        /// `pair` or `multi:M`.
        #[arg(long, default_value = "pair")]
        mode: String,
    },
    /// Train the denoiser on a generated corpus and write a checkpoint.
    Train,
    /// Composite held-out scenes with a trained checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of held-out scenes to composite.
        #[arg(long, default_value_t = 4)]
        count: usize,
    },
    /// Recomposition metrics on held-out scenes, as JSON lines.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Overlap heatmap of intersecting box pairs.
    Heatmap {
        /// Use the selected pairs of a generated corpus instead of random boxes.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Gate score-difference maps across sampler steps, in both object orders.
    DumpAlpha {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Held-out scene index.
        #[arg(long, default_value_t = 0)]
        scene: usize,
    },
}

fn resolve_config(cli: &Cli) -> anyhow::Result<Config> {
    let base = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let mut cfg = base.with_overrides(&cli.overrides)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = resolve_config(cli)?;
    std::fs::create_dir_all(&cli.out)?;
    std::fs::write(cli.out.join("config.resolved.json"), cfg.to_json())?;
    let out = cli.out.as_path();
    match &cli.command {
        Command::GenCorpus { count } => commands::gen_corpus(&cfg, out, count.unwrap_or(cfg.data.train_scenes)),
        Command::Select { annotations, mode } => commands::select(&cfg, out, annotations, mode),
        Command::Train => commands::train(&cfg, out),
        Command::Sample { checkpoint, count } => commands::sample(&cfg, out, checkpoint, *count),
        Command::Eval { checkpoint } => commands::eval(&cfg, out, checkpoint),
        Command::Heatmap { corpus } => commands::heatmap(&cfg, out, corpus.as_deref()),
        Command::DumpAlpha { checkpoint, scene } => commands::dump_alpha(&cfg, out, checkpoint, *scene),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PICS_LOG", "info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let report = json!({
                "error": err.to_string(),
                "causes": err.chain().skip(1).map(|c| c.to_string()).collect::<Vec<_>>(),
            });
            eprintln!("{report}");
            ExitCode::FAILURE
        }
    }
}
