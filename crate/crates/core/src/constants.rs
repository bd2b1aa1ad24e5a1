//! Fundamental constants and the provenance-tagged constants registry.
//!
//! CODATA fundamentals are plain `const`s. Everything else (isotope data,
//! apparatus numbers, calibrated knobs) is read from `data/constants.toml`,
//! which is embedded at compile time so every binary carries the exact table
//! it was built with.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

/// Planck constant, J s.
pub const PLANCK: f64 = 6.626_070_15e-34;
/// Reduced Planck constant, J s.
pub const HBAR: f64 = PLANCK / (2.0 * PI);
/// Speed of light, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
/// Boltzmann constant, J/K.
pub const BOLTZMANN: f64 = 1.380_649e-23;
/// Elementary charge, C.
pub const ELEMENTARY_CHARGE: f64 = 1.602_176_634e-19;
/// Vacuum permittivity, F/m.
pub const EPSILON_0: f64 = 8.854_187_8188e-12;
/// Atomic mass unit, kg.
pub const ATOMIC_MASS_UNIT: f64 = 1.660_539_068_92e-27;
/// Coulomb constant 1/(4 pi eps0), N m^2 / C^2.
pub const COULOMB: f64 = 1.0 / (4.0 * PI * EPSILON_0);

const REGISTRY_SOURCE: &str = include_str!("../data/constants.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Measured,
    Literature,
    Derived,
    Calibrated,
    Assumed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Constant {
    pub name: String,
    pub value: f64,
    pub unit: String,
    pub provenance: Provenance,
    pub note: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegistryFile {
    version: u32,
    constant: Vec<Constant>,
}

#[derive(Debug)]
pub struct Registry {
    pub version: u32,
    entries: BTreeMap<String, Constant>,
}

impl Registry {
    fn parse(source: &str) -> Result<Self, String> {
        let file: RegistryFile = toml::from_str(source).map_err(|e| e.to_string())?;
        let mut entries = BTreeMap::new();
        for c in file.constant {
            if !c.value.is_finite() {
                return Err(format!("constant `{}` is not finite", c.name));
            }
            if entries.insert(c.name.clone(), c).is_some() {
                return Err("duplicate constant name".into());
            }
        }
        Ok(Self {
            version: file.version,
            entries,
        })
    }

    /// Looks up a constant. Names are compile-time literals in this crate, so
    /// a miss is a programming error.
    pub fn get(&self, name: &str) -> &Constant {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("constant `{name}` missing from registry"))
    }

    pub fn value(&self, name: &str) -> f64 {
        self.get(name).value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Constant> {
        self.entries.values()
    }
}

/// The embedded constants table.
pub fn registry() -> &'static Registry {
    static REGISTRY: OnceLock<Registry> = OnceLock::new();
    REGISTRY.get_or_init(|| Registry::parse(REGISTRY_SOURCE).expect("embedded constants.toml is valid"))
}

/// Shorthand for `registry().value(name)`.
pub fn value(name: &str) -> f64 {
    registry().value(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_parses_and_is_versioned() {
        let r = registry();
        assert!(r.version >= 1);
        assert!(r.iter().count() > 20);
    }

    #[test]
    fn doppler_geometry_factor_matches_its_calibration_pair() {
        let v = value("reported_most_probable_speed_mps");
        let lambda = value("wavelength_423_m");
        let theta = value("fitted_divergence_deg").to_radians();
        let naive = 2.0 * v / lambda * (0.5 * theta).sin();
        let c = value("fitted_gaussian_fwhm_hz") / naive;
        assert!((c - value("doppler_geometry_factor")).abs() < 1e-12);
    }

    #[test]
    fn ion_masses_are_atomic_minus_electron() {
        let electron_u = 5.485_799_090_65e-4;
        assert!((value("mass_ca40_ion_u") - (39.962_590_851 - electron_u)).abs() < 1e-12);
        assert!((value("mass_ca44_ion_u") - (43.955_481_56 - electron_u)).abs() < 1e-12);
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let src = r#"
            version = 1
            [[constant]]
            name = "a"
            value = 1.0
            unit = "1"
            provenance = "derived"
            note = ""
            [[constant]]
            name = "a"
            value = 2.0
            unit = "1"
            provenance = "derived"
            note = ""
        "#;
        assert!(Registry::parse(src).is_err());
    }
}
