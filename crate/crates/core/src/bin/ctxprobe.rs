use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ctxprobe::pipeline::{self, Backend, Overrides, PipelineError, RunConfig};

#[derive(Parser)]
#[command(
    name = "ctxprobe",
    version,
    about = "Context-usage experiments for document-level MT with LLMs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Materialize prompts for every item, prompt kind and context condition.
    Prepare(Common),
    /// Generate translations for prepared instances.
    Translate(Common),
    /// Score gold and contrastive targets by forced decoding.
    Contrast(Common),
    /// Erasure attribution on the attribution instances.
    Attribute(Common),
    /// Compute metrics and write tables, figure data and run.json.
    Score(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    base_url: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    max_parallel: Option<usize>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
}

fn load(c: &Common) -> Result<RunConfig, PipelineError> {
    let mut config = RunConfig::load(&c.config)?;
    config.apply(&Overrides {
        seed: c.seed,
        base_url: c.base_url.clone(),
        model: c.model.clone(),
        max_parallel: c.max_parallel,
        cache_dir: c.cache_dir.clone(),
    });
    config.validate()?;
    Ok(config)
}

fn run(cli: Cli) -> Result<String, PipelineError> {
    let (stage, common) = match &cli.command {
        Command::Prepare(c) => ("prepare", c),
        Command::Translate(c) => ("translate", c),
        Command::Contrast(c) => ("contrast", c),
        Command::Attribute(c) => ("attribute", c),
        Command::Score(c) => ("score", c),
    };
    let config = load(common)?;
    if stage == "score" {
        let s = pipeline::score(&config)?;
        return Ok(format!(
            "score: wrote {} file(s) under {}",
            s.files.len(),
            config.run_dir().display()
        ));
    }
    let data = pipeline::load_data(&config)?;
    let backend = Backend::open(&config, &data)?;
    let line = match stage {
        "prepare" => {
            let s = pipeline::prepare(&config, &data, &backend)?;
            format!(
                "prepare: {} instances ({} translation, {} pronoun, {} attribution), {} rejected example(s)",
                s.total(),
                s.translation,
                s.pronoun,
                s.attribution,
                s.rejected
            )
        }
        _ => {
            let s = match stage {
                "translate" => pipeline::translate(&config, &backend)?,
                "contrast" => pipeline::contrast(&config, &backend)?,
                _ => pipeline::attribute(&config, &backend)?,
            };
            let cache = backend.client.cache_stats();
            format!(
                "{}: {} done, {} already on disk, {} total; cache {} hit(s), {} miss(es)",
                s.stage, s.completed, s.skipped, s.total, cache.hits, cache.misses
            )
        }
    };
    Ok(line)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(line) => {
            println!("{line}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("ctxprobe: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
