//! Surface-electrode trap electrostatics in the gapless-plane approximation.
//!
//! The electrode plane is z = 0 and the ion sits at z > 0. The trap axis runs
//! along y; x is the in-plane radial direction.

mod distortion;
mod layout;
mod potential;
mod secular;

use nalgebra::Vector3;
use thiserror::Error;

pub use distortion::{hole_distortion_scan, write_distortion_csv, DistortionRow, SAMPLE_CUBE_EDGE};
pub use layout::{ElectrodeLayout, LayoutFile, RectPatch, Role, TrapDrive};
pub use potential::{dc_potential, patch_potential, pseudopotential, Trap};
pub use secular::{default_guess, find_trap_center, secular_analysis, secular_at, trap_center, SecularResult};

#[derive(Debug, Error, PartialEq)]
pub enum TrapError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("no trap: {0}")]
    NoTrap(String),
    #[error("unstable direction {axis:?} (curvature {curvature:e} N/m)")]
    Unstable { axis: Vector3<f64>, curvature: f64 },
}
