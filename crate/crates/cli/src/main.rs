//! `holetrap`: one subcommand per invocation; every run writes its outputs
//! and a manifest into the output directory.

mod commands;
mod error;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use holetrap::config::{RunConfig, Strictness};

use crate::error::CliError;

/// Environment variable naming the directory searched for configs.
pub const CONFIG_DIR_VAR: &str = "HOLETRAP_CONFIG_DIR";

#[derive(Debug, Parser)]
#[command(name = "holetrap", version, about = "Through-hole loading and sympathetic cooling simulator")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// Config file. A bare name is also looked up as `<name>.toml` in $HOLETRAP_CONFIG_DIR.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    profile: Option<ProfileArg>,
    /// Unknown config keys are errors (default).
    #[arg(long, global = true, conflicts_with = "lenient")]
    strict: bool,
    /// Unknown config keys are warnings.
    #[arg(long, global = true)]
    lenient: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ProfileArg {
    Desk,
    Overnight,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Surface-trap potential.
    #[command(subcommand)]
    Trap(TrapCmd),
    /// Atomic beam geometry.
    #[command(subcommand)]
    Beam(BeamCmd),
    /// Isotope-shift spectra.
    #[command(subcommand)]
    Spectrum(SpectrumCmd),
    /// Equilibrium positions and normal modes of the configured chain.
    Modes,
    /// Largest sympathetically coolable chain.
    Coverage {
        #[arg(long, value_enum)]
        modes: Option<ModesArg>,
    },
    /// Molecular dynamics runs.
    #[command(subcommand)]
    Simulate(SimulateCmd),
    /// Inspect the configuration without running anything.
    #[command(subcommand)]
    Config(ConfigCmd),
}

#[derive(Debug, Subcommand)]
enum TrapCmd {
    /// Trap center, secular frequencies and principal axes.
    Solve,
    /// Potential distortion caused by the loading hole versus hole size.
    DistortionScan,
}

#[derive(Debug, Subcommand)]
enum BeamCmd {
    /// Beam divergence, source-size inversion and optional atom samples.
    Divergence,
}

#[derive(Debug, Subcommand)]
enum SpectrumCmd {
    /// Synthetic spectrum on the configured grid.
    Synth,
    /// Voigt fit of a measured or synthetic spectrum.
    Fit {
        /// CSV `detuning_hz,intensity[,sigma]`; defaults to `spectra.data`.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Hold a parameter at its start value, as `PEAK:PARAM`
        /// (PARAM one of center, lorentzian, gaussian, amplitude, baseline).
        #[arg(long = "pin", value_name = "PEAK:PARAM")]
        pins: Vec<String>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModesArg {
    Axial,
    All,
}

#[derive(Debug, Subcommand)]
enum SimulateCmd {
    /// Load and crystallize the coolant ions.
    Load,
    /// Inject one hot ion into a coolant crystal; with `cooldyn.trials` > 0
    /// also run the capture and hopping ensembles.
    Sympathetic,
    /// Staged load, inject and identify protocol.
    Protocol,
}

#[derive(Debug, Subcommand)]
enum ConfigCmd {
    /// Validate and list defaulted fields.
    Check,
    /// Print the effective configuration, defaults included.
    Show,
}

fn resolve_config(path: &Path) -> Result<PathBuf, CliError> {
    if path.is_file() {
        return Ok(path.to_path_buf());
    }
    if let Some(dir) = std::env::var_os(CONFIG_DIR_VAR) {
        let dir = PathBuf::from(dir);
        for candidate in [dir.join(path), dir.join(path).with_extension("toml")] {
            if candidate.is_file() {
                return Ok(candidate);
            }
        }
    }
    Err(CliError::Usage(format!("config file `{}` not found", path.display())))
}

fn load_config(g: &GlobalArgs) -> Result<RunConfig, CliError> {
    let strictness = if g.lenient { Strictness::Lenient } else { Strictness::Strict };
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(&resolve_config(p)?, strictness)?,
        None => {
            let default = std::env::var_os(CONFIG_DIR_VAR).map(|d| PathBuf::from(d).join("default.toml"));
            match default.filter(|p| p.is_file()) {
                Some(p) => RunConfig::load(&p, strictness)?,
                None => RunConfig::defaults(),
            }
        }
    };
    if let Some(seed) = g.seed {
        cfg.set_seed(seed);
    }
    if let Some(p) = g.profile {
        cfg.set_profile(match p {
            ProfileArg::Desk => "desk",
            ProfileArg::Overnight => "overnight",
        })?;
    }
    for w in &cfg.warnings {
        eprintln!("warning: {w}");
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = load_config(&cli.global)?;
    let name = match &cli.command {
        Command::Config(ConfigCmd::Check) => {
            println!("config ok: {} field(s) defaulted", cfg.defaulted.len());
            for d in &cfg.defaulted {
                println!("  default {d}");
            }
            return Ok(());
        }
        Command::Config(ConfigCmd::Show) => {
            print!("{}", cfg.to_toml_string());
            return Ok(());
        }
        Command::Trap(TrapCmd::Solve) => "trap solve",
        Command::Trap(TrapCmd::DistortionScan) => "trap distortion-scan",
        Command::Beam(BeamCmd::Divergence) => "beam divergence",
        Command::Spectrum(SpectrumCmd::Synth) => "spectrum synth",
        Command::Spectrum(SpectrumCmd::Fit { .. }) => "spectrum fit",
        Command::Modes => "modes",
        Command::Coverage { .. } => "coverage",
        Command::Simulate(SimulateCmd::Load) => "simulate load",
        Command::Simulate(SimulateCmd::Sympathetic) => "simulate sympathetic",
        Command::Simulate(SimulateCmd::Protocol) => "simulate protocol",
    };
    let out_dir = match &cli.global.out {
        Some(p) => p.clone(),
        None => cfg.resolve(cfg.str("output_dir").unwrap_or("out")),
    };
    let mut ctx = commands::Context::new(cfg, &out_dir)?;
    match cli.command {
        Command::Trap(TrapCmd::Solve) => commands::trap_solve(&mut ctx)?,
        Command::Trap(TrapCmd::DistortionScan) => commands::distortion_scan(&mut ctx)?,
        Command::Beam(BeamCmd::Divergence) => commands::beam_divergence(&mut ctx)?,
        Command::Spectrum(SpectrumCmd::Synth) => commands::spectrum_synth(&mut ctx)?,
        Command::Spectrum(SpectrumCmd::Fit { input, pins }) => commands::spectrum_fit(&mut ctx, input.as_deref(), &pins)?,
        Command::Modes => commands::modes(&mut ctx)?,
        Command::Coverage { modes } => {
            let set = modes.map(|m| match m {
                ModesArg::Axial => "axial",
                ModesArg::All => "all",
            });
            commands::coverage(&mut ctx, set)?
        }
        Command::Simulate(SimulateCmd::Load) => commands::simulate_load(&mut ctx)?,
        Command::Simulate(SimulateCmd::Sympathetic) => commands::simulate_sympathetic(&mut ctx)?,
        Command::Simulate(SimulateCmd::Protocol) => commands::simulate_protocol(&mut ctx)?,
        Command::Config(_) => unreachable!("handled above"),
    }
    ctx.finish(name)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
