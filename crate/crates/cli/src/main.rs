use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use modctx_cli::commands;
use modctx_cli::config::{load_config, RunConfig};
use modctx_cli::serve;
use modctx_core::synth::SynthConfig;

#[derive(Parser)]
#[command(name = "modctx", version, about = "Context-aware comment moderation experiments")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the split seed and the training seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for this run.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Restricts train/serve to one model.
    #[arg(long, global = true)]
    model: Option<String>,
    /// Restricts llm to one prompt variant.
    #[arg(long, global = true)]
    variant: Option<String>,
    /// Replays recorded LLM replies instead of calling the API (file or per-variant directory).
    #[arg(long, global = true)]
    replay: Option<PathBuf>,
    /// Uses the bundled synthetic demo corpus and an offline LLM stub.
    #[arg(long, global = true)]
    demo: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Load the corpus store and write merged, labeled examples.
    Ingest,
    /// Balance classes, split train/val/test and build the user history index.
    Split,
    /// Train the baselines and deep models; write test-set predictions.
    Train,
    /// Classify the test sample with the configured prompt variants.
    Llm,
    /// Score every prediction file and write the report table.
    Eval,
    /// Print the last evaluation table.
    Report,
    /// Run ingest, split, train, llm and eval in sequence.
    Run,
    /// Serve a trained model over HTTP.
    Serve {
        /// Listen address; defaults to `serve.addr`.
        #[arg(long)]
        addr: Option<String>,
    },
    /// Write a synthetic corpus and embeddings to --out.
    Synth {
        #[arg(long, default_value_t = 5000)]
        posts: usize,
        #[arg(long, default_value_t = 200)]
        users: usize,
        #[arg(long, default_value_t = 40)]
        articles: usize,
        #[arg(long, default_value_t = 16)]
        dim: usize,
    },
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = if cli.demo {
        let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("runs/demo"));
        commands::demo_config(&out)?
    } else if let Some(path) = &cli.config {
        load_config(path)?
    } else {
        RunConfig::default()
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<()> {
    if let Some(Command::Synth {
        posts,
        users,
        articles,
        dim,
    }) = &cli.command
    {
        let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("data/synthetic"));
        let synth = SynthConfig {
            seed: cli.seed.unwrap_or(SynthConfig::default().seed),
            posts: *posts,
            users: *users,
            articles: *articles,
            ..SynthConfig::default()
        };
        let vec_path = commands::synth(&out, &synth, *dim)?;
        println!(
            "wrote {posts} posts to {} and embeddings to {}",
            out.display(),
            vec_path.display()
        );
        return Ok(());
    }
    let cfg = resolve_config(&cli)?;
    match cli.command.as_ref().unwrap_or(&Command::Run) {
        Command::Ingest => commands::ingest(&cfg),
        Command::Split => commands::split(&cfg),
        Command::Train => commands::train(&cfg, cli.model.as_deref()),
        Command::Llm => commands::llm(&cfg, cli.variant.as_deref(), cli.replay.as_deref()),
        Command::Eval => commands::eval(&cfg).map(|_| ()),
        Command::Report => commands::report(&cfg).map(|_| ()),
        Command::Run => commands::run_all(&cfg).map(|_| ()),
        Command::Serve { addr } => {
            let model = cli.model.as_deref().unwrap_or(&cfg.serve.model);
            let state = serve::load_state(&cfg, model)?;
            serve::run(state, addr.as_deref().unwrap_or(&cfg.serve.addr))
        }
        Command::Synth { .. } => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
