use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hats_core::pipeline::{self, RunConfig};
use serde_json::json;

#[derive(Parser, Debug)]
#[command(
    name = "hats",
    version,
    about = "Accident knowledge graph, KG embedding and hazard-aware scene graphs"
)]
struct Cli {
    /// JSON run config; HATS_* environment variables override its keys.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Artifact directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "hats-out")]
    out: PathBuf,
    /// Worker threads for parallel evaluation.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic crash tables.
    GenSynth,
    /// Ingest tables into the property graph.
    BuildKg,
    /// Check schema and coherence rules on the graph.
    ValidateKg,
    /// Export triplets and the 8:1:1 split.
    ExportTriplets,
    /// Train the KG embedding and export node embeddings.
    TrainKge {
        /// Override the configured epoch count; 0 saves the initialization.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Filtered link-prediction metrics on the valid and test splits.
    EvalKge,
    /// Generate synthetic scene archives.
    GenScenes,
    /// Train relevance selection and relation heads.
    TrainHeads,
    /// Evaluate the heads on test scenes, with ablations if configured.
    EvalHeads,
    /// Write a traffic scene graph (JSON and DOT) per test scene.
    EmitTsg,
    /// Aggregate every metric JSON.
    Report,
    /// Every stage in order.
    Run,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenSynth => "gen-synth",
            Command::BuildKg => "build-kg",
            Command::ValidateKg => "validate-kg",
            Command::ExportTriplets => "export-triplets",
            Command::TrainKge { .. } => "train-kge",
            Command::EvalKge => "eval-kge",
            Command::GenScenes => "gen-scenes",
            Command::TrainHeads => "train-heads",
            Command::EvalHeads => "eval-heads",
            Command::EmitTsg => "emit-tsg",
            Command::Report => "report",
            Command::Run => "run",
        }
    }
}

fn fail(command: &str, kind: &str, message: &str, code: u8) -> ExitCode {
    let line = json!({ "error": kind, "command": command, "message": message });
    eprintln!("{line}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let name = cli.command.name();

    if let Some(n) = cli.threads {
        if n == 0 {
            return fail(name, "usage", "--threads must be positive", 2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            return fail(name, "runtime", &e.to_string(), 1);
        }
    }

    let cfg = RunConfig::load(cli.config.as_deref(), std::env::vars()).and_then(|mut c| {
        if let Some(s) = cli.seed {
            c.seed = s;
        }
        if let Command::TrainKge { epochs: Some(e) } = cli.command {
            c.kge.epochs = e;
        }
        c.resolve()
    });
    let cfg = match cfg {
        Ok(c) => c,
        Err(e) => return fail(name, "validation", &e.to_string(), 1),
    };

    let result = match cli.command {
        Command::Run => pipeline::run_all(&cfg, &cli.out).map(|s| json!(s)),
        _ => pipeline::run_stage(&cfg, &cli.out, name),
    };
    match result {
        Ok(summary) => {
            println!("{}", json!({ "command": name, "ok": true, "summary": summary }));
            ExitCode::SUCCESS
        }
        Err(e) => {
            let kind = if e.is_validation() { "validation" } else { "runtime" };
            fail(name, kind, &e.to_string().replace('\n', " "), 1)
        }
    }
}
