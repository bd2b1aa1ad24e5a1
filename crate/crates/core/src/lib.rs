//! Simulation and analysis toolkit for isotope-selective ion loading through a
//! backside through-hole in a surface-electrode trap, and for sympathetic
//! cooling of the hot isotope ions that result.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod constants;
pub mod cooldyn;
pub mod crystal;
pub mod isotopes;
pub mod jet;
pub mod beamline;
pub mod spectra;
pub mod trapmodel;
