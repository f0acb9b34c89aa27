//! `redlab` command-line driver.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure. Every command
//! writes `run.json` (command, resolved arguments, version) into its output
//! directory; `redlab replay run.json` re-executes it.

mod args;
mod commands;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Map, Value};

use args::*;

#[derive(Parser, Debug)]
#[command(name = "redlab", about = "Encoder-decoder vs decoder-only language model laboratory", disable_version_flag = true)]
struct Cli {
    /// JSON object of subcommand options; explicit flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Print version information as JSON.
    #[arg(long)]
    version: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a byte-level BPE tokenizer.
    TokenizerTrain(TokenizerTrainArgs),
    /// Pretrain a model (causal LM for dec-*, prefix LM for red-*).
    Pretrain(PretrainArgs),
    /// Finetune a checkpoint on input/target pairs.
    Finetune(FinetuneArgs),
    /// Prefix-LM perplexity of checkpoints.
    EvalPpl(EvalPplArgs),
    /// Perplexity over a grid of prefix and context lengths.
    Extrapolate(ExtrapolateArgs),
    /// Locality curve, per-position log-probs and pooled attention maps.
    AnalyzeAttention(AnalyzeAttentionArgs),
    /// Greedy decoding.
    Decode(DecodeArgs),
    /// Power-law fits of perplexity against FLOPs or parameters.
    FitScaling(FitScalingArgs),
    /// IsoFLOP slices across model sizes.
    Isoflop(IsoflopArgs),
    /// Compute-optimal frontier over evaluated checkpoints.
    Frontier(FrontierArgs),
    /// Parameter count and FLOPs per sequence of a configuration.
    Flops(FlopsArgs),
    /// Re-run a command from its run.json.
    Replay {
        run_json: PathBuf,
        /// Output directory for the re-run (defaults to the recorded one).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Runtime(e.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Usage(msg.into()))
}

fn is_unset(v: &Value) -> bool {
    match v {
        Value::Null | Value::Bool(false) => true,
        Value::Array(a) => a.is_empty(),
        _ => false,
    }
}

/// Config values first, then every flag that was actually given.
fn merge(cli: Value, config: Option<&Value>) -> CliResult<Value> {
    let mut out = match config {
        None => Map::new(),
        Some(Value::Object(m)) => m.clone(),
        Some(_) => return usage("--config must hold a JSON object"),
    };
    if let Value::Object(m) = cli {
        for (k, v) in m {
            if !is_unset(&v) {
                out.insert(k, v);
            }
        }
    }
    Ok(Value::Object(out))
}

/// Deserialises merged options, rejecting keys the command does not know.
fn parse_args<T: Serialize + DeserializeOwned>(value: Value) -> CliResult<T> {
    let known = serde_json::to_value(serde_json::from_value::<T>(Value::Object(Map::new()))?)?;
    if let (Value::Object(given), Value::Object(known)) = (&value, &known) {
        if let Some(k) = given.keys().find(|k| !known.contains_key(*k)) {
            return usage(format!("unknown option `{k}`"));
        }
    }
    serde_json::from_value(value).or_else(|e| usage(format!("invalid options: {e}")))
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::TokenizerTrain(_) => "tokenizer-train",
        Command::Pretrain(_) => "pretrain",
        Command::Finetune(_) => "finetune",
        Command::EvalPpl(_) => "eval-ppl",
        Command::Extrapolate(_) => "extrapolate",
        Command::AnalyzeAttention(_) => "analyze-attention",
        Command::Decode(_) => "decode",
        Command::FitScaling(_) => "fit-scaling",
        Command::Isoflop(_) => "isoflop",
        Command::Frontier(_) => "frontier",
        Command::Flops(_) => "flops",
        Command::Replay { .. } => "replay",
    }
}

fn cli_value(c: &Command) -> serde_json::Result<Value> {
    match c {
        Command::TokenizerTrain(a) => serde_json::to_value(a),
        Command::Pretrain(a) => serde_json::to_value(a),
        Command::Finetune(a) => serde_json::to_value(a),
        Command::EvalPpl(a) => serde_json::to_value(a),
        Command::Extrapolate(a) => serde_json::to_value(a),
        Command::AnalyzeAttention(a) => serde_json::to_value(a),
        Command::Decode(a) => serde_json::to_value(a),
        Command::FitScaling(a) => serde_json::to_value(a),
        Command::Isoflop(a) => serde_json::to_value(a),
        Command::Frontier(a) => serde_json::to_value(a),
        Command::Flops(a) => serde_json::to_value(a),
        Command::Replay { .. } => Ok(Value::Null),
    }
}

/// Output of one command: the directory it wrote to, its fully resolved
/// arguments, and anything else worth recording.
pub struct Outcome {
    pub out: PathBuf,
    pub args: Value,
    pub resolved: Value,
}

fn execute(name: &str, args: Value) -> CliResult<Outcome> {
    match name {
        "tokenizer-train" => commands::tokenizer_train(parse_args(args)?),
        "pretrain" => commands::pretrain(parse_args(args)?),
        "finetune" => commands::finetune(parse_args(args)?),
        "eval-ppl" => commands::eval_ppl(parse_args(args)?),
        "extrapolate" => commands::extrapolate(parse_args(args)?),
        "analyze-attention" => commands::analyze_attention(parse_args(args)?),
        "decode" => commands::decode(parse_args(args)?),
        "fit-scaling" => commands::fit_scaling(parse_args(args)?),
        "isoflop" => commands::isoflop(parse_args(args)?),
        "frontier" => commands::frontier(parse_args(args)?),
        "flops" => commands::flops(parse_args(args)?),
        other => usage(format!("unknown command `{other}`")),
    }
}

pub const RUN_FILE: &str = "run.json";

fn write_run(name: &str, outcome: &Outcome) -> CliResult<()> {
    let record = json!({
        "command": name,
        "args": outcome.args,
        "resolved": outcome.resolved,
        "version": env!("CARGO_PKG_VERSION"),
    });
    std::fs::create_dir_all(&outcome.out)?;
    std::fs::write(outcome.out.join(RUN_FILE), serde_json::to_string_pretty(&record)? + "\n")?;
    Ok(())
}

fn replay(run_json: &Path, out: Option<PathBuf>) -> CliResult<(String, Value)> {
    let text = std::fs::read_to_string(run_json).map_err(|e| CliError::Usage(format!("{}: {e}", run_json.display())))?;
    let record: Value = serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", run_json.display())))?;
    let name = record["command"].as_str().ok_or_else(|| CliError::Usage("run.json has no command".into()))?;
    let mut args = record["args"].clone();
    if let (Some(out), Value::Object(m)) = (out, &mut args) {
        m.insert("out".into(), json!(out));
    }
    Ok((name.to_string(), args))
}

fn run(cli: Cli) -> CliResult<()> {
    if cli.version {
        let info = json!({ "name": "redlab", "version": env!("CARGO_PKG_VERSION") });
        println!("{info}");
        return Ok(());
    }
    let Some(command) = cli.command else {
        let help = Cli::command().render_help();
        return usage(format!("a subcommand is required\n\n{help}"));
    };
    let (name, args) = match &command {
        Command::Replay { run_json, out } => replay(run_json, out.clone())?,
        c => {
            let config = match &cli.config {
                Some(p) => {
                    let text = std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
                    Some(serde_json::from_str::<Value>(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?)
                }
                None => None,
            };
            (command_name(c).to_string(), merge(cli_value(c)?, config.as_ref())?)
        }
    };
    let outcome = execute(&name, args)?;
    write_run(&name, &outcome)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
