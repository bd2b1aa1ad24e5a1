//! Isotope data shared by the spectroscopy, crystal and dynamics modules.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constants::{value, ATOMIC_MASS_UNIT, ELEMENTARY_CHARGE};

#[derive(Debug, Error, PartialEq)]
pub enum IsotopeError {
    #[error("unknown isotope `{0}`")]
    Unknown(String),
    #[error("isotope `{name}`: {reason}")]
    Invalid { name: String, reason: String },
}

/// One isotope of the ion species, with the shifts of every transition the
/// apparatus addresses relative to the reference isotope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Isotope {
    pub name: String,
    /// Ion mass, kg.
    pub mass: f64,
    /// Ion charge, C.
    pub charge: f64,
    pub natural_abundance: f64,
    pub shift_423: f64,
    pub shift_397: f64,
    pub shift_866: f64,
}

impl Isotope {
    pub fn mass_number(&self) -> f64 {
        self.mass / ATOMIC_MASS_UNIT
    }
}

/// Ordered isotope list; the first entry is the reference and has all shifts 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsotopeTable {
    entries: Vec<Isotope>,
}

impl IsotopeTable {
    pub fn new(entries: Vec<Isotope>) -> Result<Self, IsotopeError> {
        for (k, iso) in entries.iter().enumerate() {
            let bad = |reason: &str| IsotopeError::Invalid {
                name: iso.name.clone(),
                reason: reason.to_string(),
            };
            if !(0.0..=1.0).contains(&iso.natural_abundance) {
                return Err(bad("abundance outside [0, 1]"));
            }
            if !(iso.mass > 0.0) {
                return Err(bad("mass must be positive"));
            }
            if k == 0 && (iso.shift_423 != 0.0 || iso.shift_397 != 0.0 || iso.shift_866 != 0.0) {
                return Err(bad("reference isotope must have zero shifts"));
            }
        }
        Ok(Self { entries })
    }

    /// 40Ca+ (reference) and 44Ca+.
    pub fn calcium() -> Self {
        Self::new(vec![ca40(), ca44()]).expect("registry isotope data is valid")
    }

    pub fn get(&self, name: &str) -> Result<&Isotope, IsotopeError> {
        self.entries
            .iter()
            .find(|i| i.name == name)
            .ok_or_else(|| IsotopeError::Unknown(name.to_string()))
    }

    pub fn index_of(&self, name: &str) -> Result<usize, IsotopeError> {
        self.entries
            .iter()
            .position(|i| i.name == name)
            .ok_or_else(|| IsotopeError::Unknown(name.to_string()))
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Isotope> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Same table restricted to the named isotopes (reference first).
    pub fn only(&self, names: &[&str]) -> Result<Self, IsotopeError> {
        let mut out = Vec::new();
        for iso in &self.entries {
            if names.contains(&iso.name.as_str()) {
                out.push(iso.clone());
            }
        }
        for n in names {
            self.get(n)?;
        }
        Ok(Self { entries: out })
    }
}

pub fn ca40() -> Isotope {
    Isotope {
        name: "40Ca".into(),
        mass: value("mass_ca40_ion_u") * ATOMIC_MASS_UNIT,
        charge: ELEMENTARY_CHARGE,
        natural_abundance: value("abundance_ca40"),
        shift_423: 0.0,
        shift_397: 0.0,
        shift_866: 0.0,
    }
}

pub fn ca44() -> Isotope {
    Isotope {
        name: "44Ca".into(),
        mass: value("mass_ca44_ion_u") * ATOMIC_MASS_UNIT,
        charge: ELEMENTARY_CHARGE,
        natural_abundance: value("abundance_ca44"),
        shift_423: value("shift_423_ca44_hz"),
        shift_397: value("shift_397_ca44_hz"),
        shift_866: value("shift_866_ca44_hz"),
    }
}
