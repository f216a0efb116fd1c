use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use xforge::pipeline::{Pipeline, PipelineConfig, Stage};

#[derive(Parser)]
#[command(name = "xforge", version, about = "Multilingual code-instruction data synthesis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Skip completed stages and continue an interrupted discuss stage.
    #[arg(long, global = true)]
    resume: bool,
    #[arg(long, global = true)]
    scale_factor: Option<f64>,
    #[arg(long, global = true, value_enum)]
    backend: Option<BackendArg>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override any config key, e.g. `--set rounds=50`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Http,
    Mock,
}

#[derive(Subcommand)]
enum Command {
    /// Build seed_s1 and seed_s2 from the snippet corpus.
    Seed,
    /// Run agent discussion rounds to build agent_s3.
    Discuss,
    /// Build execution-verified preference pairs.
    Dpo,
    /// Score benchmark problem files with pass@k.
    Eval,
    /// Write sft.jsonl, dpo.jsonl and manifest.json.
    Emit {
        /// Output directory (defaults to `<run_dir>/dataset`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the composition report as JSON.
    Report,
}

fn overrides(cli: &Cli) -> anyhow::Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| anyhow::anyhow!("--set expects KEY=VALUE, got `{kv}`"))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    if let Some(f) = cli.scale_factor {
        out.insert("scale_factor".into(), f.to_string());
    }
    if let Some(b) = cli.backend {
        let name = match b {
            BackendArg::Http => "http",
            BackendArg::Mock => "mock",
        };
        out.insert("backend".into(), name.into());
    }
    if let Some(s) = cli.seed {
        out.insert("seed".into(), s.to_string());
    }
    Ok(out)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let config = PipelineConfig::load(cli.config.as_deref(), &overrides(&cli)?)?;
    let pipeline = Pipeline::new(config)?;
    let stage = match &cli.command {
        Command::Seed => Stage::Seed,
        Command::Discuss => Stage::Discuss,
        Command::Dpo => Stage::Dpo,
        Command::Eval => Stage::Eval,
        Command::Emit { out } => {
            let out = out.clone().unwrap_or_else(|| pipeline.run_dir().join("dataset"));
            let manifest = pipeline.emit_dataset(&out)?;
            println!("{}", serde_json::to_string_pretty(&manifest)?);
            return Ok(());
        }
        Command::Report => {
            println!("{}", serde_json::to_string_pretty(&pipeline.report()?)?);
            return Ok(());
        }
    };
    let state = pipeline.run_stage(stage, cli.resume)?;
    println!("{}", serde_json::to_string_pretty(&state.stage_checkpoints[&stage])?);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
