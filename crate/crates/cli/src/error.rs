use holetrap::beamline::BeamError;
use holetrap::config::ConfigError;
use holetrap::cooldyn::DynamicsError;
use holetrap::crystal::CrystalError;
use holetrap::isotopes::IsotopeError;
use holetrap::spectra::SpectraError;
use holetrap::trapmodel::TrapError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Isotope(#[from] IsotopeError),
    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },
    #[error("trap: {0}")]
    Trap(#[from] TrapError),
    #[error("beam: {0}")]
    Beam(#[from] BeamError),
    #[error("spectrum: {0}")]
    Spectra(#[from] SpectraError),
    #[error("crystal: {0}")]
    Crystal(#[from] CrystalError),
    #[error("dynamics: {0}")]
    Dynamics(#[from] DynamicsError),
}

impl CliError {
    pub fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> Self {
        let context = context.into();
        move |source| CliError::Io { context, source }
    }

    /// One code per error family.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) | CliError::Isotope(_) => 2,
            CliError::Io { .. } => 3,
            CliError::Trap(_) => 10,
            CliError::Beam(_) => 11,
            CliError::Spectra(_) => 12,
            CliError::Crystal(_) => 13,
            CliError::Dynamics(_) => 14,
        }
    }
}
