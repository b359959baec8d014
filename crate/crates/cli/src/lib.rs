//! Command-line pipelines over the `spindefect` analysis library.

pub mod error;
pub mod ingest;
pub mod manifest;
pub mod pipelines;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use error::{CliError, CliResult};
use manifest::{Output, RunManifest};
use pipelines::Run;

#[derive(Debug, Parser)]
#[command(name = "spindefect", version, about = "Spin-defect analysis pipelines")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML configuration; relative input paths resolve against its directory.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate zero-field lines and an angular ODMR sweep.
    OdmrSim(Common),
    /// Fit D, E and orientation to an angular ODMR table.
    OdmrFit(Common),
    /// Normalize, background-correct and fit a coincidence histogram.
    G2Fit(Common),
    /// Recover the six rates from g2 components and the detected rate.
    RatesExtract(Common),
    /// Model fluorescence and contrast against pump power.
    PowerSweep(Common),
    /// Recover the one-phonon band from an emission spectrum.
    PsbDeconvolve(Common),
    /// Synthesize a phonon sideband from a one-phonon band.
    PsbSynth(Common),
    /// Classify HOMO/LUMO pairs of the vacancy model.
    DefectClassify(Common),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::OdmrSim(_) => "odmr-sim",
            Command::OdmrFit(_) => "odmr-fit",
            Command::G2Fit(_) => "g2-fit",
            Command::RatesExtract(_) => "rates-extract",
            Command::PowerSweep(_) => "power-sweep",
            Command::PsbDeconvolve(_) => "psb-deconvolve",
            Command::PsbSynth(_) => "psb-synth",
            Command::DefectClassify(_) => "defect-classify",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::OdmrSim(c)
            | Command::OdmrFit(c)
            | Command::G2Fit(c)
            | Command::RatesExtract(c)
            | Command::PowerSweep(c)
            | Command::PsbDeconvolve(c)
            | Command::PsbSynth(c)
            | Command::DefectClassify(c) => c,
        }
    }
}

fn load_config<T: DeserializeOwned>(path: Option<&Path>) -> CliResult<T> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?,
        None => String::new(),
    };
    toml::from_str(&text).map_err(|e| {
        let name = path.map(|p| p.display().to_string()).unwrap_or_else(|| "configuration".into());
        CliError::usage(format!("{name}: {}", e.message()))
    })
}

fn go<T: DeserializeOwned + Serialize>(
    common: &Common,
    run: &mut Run,
    f: fn(&T, &mut Run) -> CliResult<Vec<Output>>,
) -> CliResult<(serde_json::Value, Vec<Output>)> {
    let cfg: T = load_config(common.config.as_deref())?;
    let params = serde_json::to_value(&cfg).map_err(|e| CliError::Io(e.to_string()))?;
    Ok((params, f(&cfg, run)?))
}

/// Runs one pipeline and writes its outputs and manifest.
pub fn run(command: &Command) -> CliResult<RunManifest> {
    let common = command.common();
    let mut run = Run::new(pipelines::config_base(common.config.as_deref()), common.seed);
    if let Some(c) = &common.config {
        run.inputs.push(manifest::digest_file(c)?);
    }
    let (parameters, outputs) = match command {
        Command::OdmrSim(_) => go(common, &mut run, pipelines::odmr_sim)?,
        Command::OdmrFit(_) => go(common, &mut run, pipelines::odmr_fit)?,
        Command::G2Fit(_) => go(common, &mut run, pipelines::g2_fit)?,
        Command::RatesExtract(_) => go(common, &mut run, pipelines::rates_extract)?,
        Command::PowerSweep(_) => go(common, &mut run, pipelines::power_sweep)?,
        Command::PsbDeconvolve(_) => go(common, &mut run, pipelines::psb_deconvolve)?,
        Command::PsbSynth(_) => go(common, &mut run, pipelines::psb_synth)?,
        Command::DefectClassify(_) => go(common, &mut run, pipelines::defect_classify)?,
    };
    let m = RunManifest {
        command: command.name().to_string(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        timestamp: manifest::timestamp(),
        seed: common.seed,
        parameters,
        inputs: run.inputs,
        outputs: Vec::new(),
    };
    manifest::write_run(&common.out, &outputs, m)
}
