//! `prolif`: generate, diagnose and cure feature proliferation from the shell.
//!
//! Every command writes into `--out DIR` and leaves a `manifest.json` there
//! holding the fully resolved settings, so `prolif rerun DIR/manifest.json`
//! reproduces the run.

mod commands;
mod config;
mod render;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Result;
use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use commands::*;
use config::{file_section, read_manifest, resolve, usage, Run, Usage};

#[derive(Parser, Debug)]
#[command(name = "prolif", version, about = "Feature proliferation toolkit for a style-based generator")]
struct Cli {
    /// TOML file with one table per command, e.g. `[synth]`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// More logging (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Randomly initialize a toy generator and save it as a container.
    InitModel(InitModelArgs),
    /// Render one image, optionally with a cure.
    Synth(SynthArgs),
    /// Estimate per-channel mean statistics over sampled generations.
    EstimateStats(EstimateStatsArgs),
    /// Score every channel of one generation against the statistics.
    Detect(DetectArgs),
    /// Per-layer proliferation fraction, with an optional exact oracle.
    EtaTrace(EtaTraceArgs),
    /// Plant an anomalous channel and compare baseline, injected and cured.
    Inject(InjectArgs),
    /// Grid of cure settings and truncation strengths for one seed.
    Sweep(SweepArgs),
    /// PSNR, SSIM and a difference map for two PNGs.
    Compare(CompareArgs),
    /// Replay a previous run from its manifest.
    Rerun {
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn settings<A: Serialize>(config: Option<&Path>, name: &str, flags: &A) -> Result<Value> {
    resolve(flags, file_section(config, name)?)
}

fn execute<C: Serialize + DeserializeOwned>(
    name: &str,
    mut value: Value,
    f: fn(&C, &mut Run) -> Result<()>,
) -> Result<()> {
    absolutize(&mut value)?;
    let cfg: C = serde_json::from_value(value).map_err(|e| usage(format!("invalid settings for {name}: {e}")))?;
    let resolved = serde_json::to_value(&cfg)?;
    let out = match resolved.get("out") {
        Some(Value::String(s)) => PathBuf::from(s),
        _ => return Err(usage("--out is required")),
    };
    let start = Instant::now();
    let mut run = Run::new(&out)?;
    f(&cfg, &mut run)?;
    run.finish(name, resolved, start.elapsed())?;
    Ok(())
}

fn dispatch(name: &str, value: Value) -> Result<()> {
    match name {
        "init-model" => execute(name, value, init_model),
        "synth" => execute(name, value, synth),
        "estimate-stats" => execute(name, value, estimate_stats),
        "detect" => execute(name, value, detect),
        "eta-trace" => execute(name, value, eta_trace),
        "inject" => execute(name, value, inject),
        "sweep" => execute(name, value, sweep),
        "compare" => execute(name, value, compare),
        other => Err(usage(format!("unknown command {other:?}"))),
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = cli.config.as_deref();
    let (name, value) = match &cli.command {
        Command::InitModel(a) => ("init-model", settings(cfg, "init-model", a)?),
        Command::Synth(a) => ("synth", settings(cfg, "synth", a)?),
        Command::EstimateStats(a) => ("estimate-stats", settings(cfg, "estimate-stats", a)?),
        Command::Detect(a) => ("detect", settings(cfg, "detect", a)?),
        Command::EtaTrace(a) => ("eta-trace", settings(cfg, "eta-trace", a)?),
        Command::Inject(a) => ("inject", settings(cfg, "inject", a)?),
        Command::Sweep(a) => ("sweep", settings(cfg, "sweep", a)?),
        Command::Compare(a) => ("compare", settings(cfg, "compare", a)?),
        Command::Rerun { manifest, out } => {
            let manifest = read_manifest(manifest)?;
            let mut value = manifest.config;
            match &mut value {
                Value::Object(map) => {
                    map.insert("out".into(), Value::String(config::absolute(out)?.to_string_lossy().into_owned()));
                }
                _ => return Err(usage("manifest config is not an object")),
            }
            return dispatch(&manifest.command, value);
        }
    };
    dispatch(name, value)
}

/// 2: bad usage or settings, 3: unreadable or corrupt input, 4: numerical
/// failure during generation, 1: anything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    use proliferation::Error as E;
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::NonFinite { .. } => 4,
                E::Container(_) | E::StatsParse { .. } | E::Io(_) => 3,
                _ => 2,
            };
        }
        if cause.is::<proliferation::ContainerError>()
            || cause.is::<std::io::Error>()
            || cause.is::<image::ImageError>()
        {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
