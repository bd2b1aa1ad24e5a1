//! Electrode geometry, drive settings, and the layout file format.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use super::TrapError;

const CANONICAL_SOURCE: &str = include_str!("../../data/canonical_layout.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Rf,
    Dc,
}

/// Rectangular electrode patch in the z = 0 plane. Coordinates in meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RectPatch {
    pub label: String,
    pub role: Role,
    pub x1: f64,
    pub x2: f64,
    pub y1: f64,
    pub y2: f64,
    /// +1 for an electrode, -1 for a cutout removing area from its parent.
    pub sign: f64,
}

impl RectPatch {
    fn contains_rect(&self, other: &RectPatch) -> bool {
        other.x1 >= self.x1 && other.x2 <= self.x2 && other.y1 >= self.y1 && other.y2 <= self.y2
    }

    fn overlap_area(&self, other: &RectPatch) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w > 0.0 && h > 0.0 {
            w * h
        } else {
            0.0
        }
    }

    fn contains_point(&self, p: &Vector2<f64>) -> bool {
        p.x > self.x1 && p.x < self.x2 && p.y > self.y1 && p.y < self.y2
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElectrodeLayout {
    pub name: String,
    pub patches: Vec<RectPatch>,
    pub hole_center: Vector2<f64>,
}

impl ElectrodeLayout {
    /// Validates the patch invariants: ordered corners, no overlap between
    /// electrodes, and every cutout inside exactly one electrode of the same label.
    pub fn new(
        name: impl Into<String>,
        patches: Vec<RectPatch>,
        hole_center: Vector2<f64>,
    ) -> Result<Self, TrapError> {
        let cfg = |m: String| TrapError::Config(m);
        for p in &patches {
            if !(p.x1 < p.x2 && p.y1 < p.y2) {
                return Err(cfg(format!("patch `{}` has unordered corners", p.label)));
            }
            if p.sign != 1.0 && p.sign != -1.0 {
                return Err(cfg(format!("patch `{}` sign must be +1 or -1", p.label)));
            }
        }
        let (solid, cutouts): (Vec<_>, Vec<_>) = patches.iter().partition(|p| p.sign > 0.0);
        for (i, a) in solid.iter().enumerate() {
            for b in &solid[i + 1..] {
                if a.overlap_area(b) > 0.0 {
                    return Err(cfg(format!("patches `{}` and `{}` overlap", a.label, b.label)));
                }
            }
        }
        for c in &cutouts {
            let parents = solid
                .iter()
                .filter(|s| s.label == c.label && s.role == c.role && s.contains_rect(c))
                .count();
            if parents != 1 {
                return Err(cfg(format!(
                    "cutout `{}` must lie inside exactly one electrode with that label",
                    c.label
                )));
            }
        }
        Ok(Self {
            name: name.into(),
            patches,
            hole_center,
        })
    }

    /// The layout shipped with the crate (`data/canonical_layout.toml`).
    pub fn canonical() -> Self {
        LayoutFile::parse(CANONICAL_SOURCE)
            .and_then(|f| f.layout())
            .expect("embedded canonical layout is valid")
    }

    pub fn canonical_drive(name: &str) -> Result<TrapDrive, TrapError> {
        LayoutFile::parse(CANONICAL_SOURCE)?.drive(name)
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.patches.iter().filter(|p| p.sign > 0.0).map(|p| p.label.as_str())
    }

    pub fn dc_labels(&self) -> impl Iterator<Item = &str> {
        self.patches
            .iter()
            .filter(|p| p.sign > 0.0 && p.role == Role::Dc)
            .map(|p| p.label.as_str())
    }

    /// Electrode under the hole center.
    pub fn hole_electrode(&self) -> Result<&RectPatch, TrapError> {
        self.patches
            .iter()
            .find(|p| p.sign > 0.0 && p.contains_point(&self.hole_center))
            .ok_or_else(|| TrapError::Config("no electrode under the hole center".into()))
    }

    pub fn hole_side(&self) -> f64 {
        self.patches
            .iter()
            .find(|p| p.sign < 0.0)
            .map(|p| p.x2 - p.x1)
            .unwrap_or(0.0)
    }

    /// Same layout with the hole replaced by a centered square of the given
    /// side (0 removes it).
    pub fn with_hole(&self, side: f64) -> Result<Self, TrapError> {
        if !(side >= 0.0) {
            return Err(TrapError::Config("hole side must be non-negative".into()));
        }
        let mut patches: Vec<RectPatch> =
            self.patches.iter().filter(|p| p.sign > 0.0).cloned().collect();
        if side > 0.0 {
            let parent = self.hole_electrode()?;
            let half = 0.5 * side;
            let cut = RectPatch {
                label: parent.label.clone(),
                role: parent.role,
                x1: self.hole_center.x - half,
                x2: self.hole_center.x + half,
                y1: self.hole_center.y - half,
                y2: self.hole_center.y + half,
                sign: -1.0,
            };
            if !parent.contains_rect(&cut) || cut.area() >= parent.area() {
                return Err(TrapError::Config(format!(
                    "hole of side {:.1} um does not fit inside electrode `{}`",
                    side * 1e6,
                    parent.label
                )));
            }
            patches.push(cut);
        }
        Self::new(self.name.clone(), patches, self.hole_center)
    }
}

/// RF amplitude and frequency plus the static electrode voltages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrapDrive {
    /// RF amplitude, V.
    pub rf_voltage: f64,
    /// RF drive angular frequency, rad/s.
    pub rf_omega: f64,
    /// Electrode label -> volts. Missing labels are grounded.
    pub dc_voltages: BTreeMap<String, f64>,
}

impl TrapDrive {
    /// Checks the drive against a layout and fills in missing labels with 0 V.
    pub fn resolved(&self, layout: &ElectrodeLayout) -> Result<TrapDrive, TrapError> {
        if !(self.rf_omega > 0.0) {
            return Err(TrapError::Domain("rf_omega must be positive".into()));
        }
        let known: Vec<&str> = layout.dc_labels().collect();
        for label in self.dc_voltages.keys() {
            if !known.contains(&label.as_str()) {
                return Err(TrapError::Config(format!("unknown DC electrode `{label}`")));
            }
        }
        let mut out = self.clone();
        for label in known {
            out.dc_voltages.entry(label.to_string()).or_insert(0.0);
        }
        Ok(out)
    }

    /// Voltage map sum, used for superposition checks.
    pub fn with_dc(&self, dc: BTreeMap<String, f64>) -> TrapDrive {
        TrapDrive {
            dc_voltages: dc,
            ..self.clone()
        }
    }
}

// ---------------------------------------------------------------------------
// File format

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Units {
    length: String,
    voltage: String,
    frequency: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PatchEntry {
    label: String,
    role: Role,
    x: [f64; 2],
    y: [f64; 2],
    #[serde(default = "plus_one")]
    sign: f64,
}

fn plus_one() -> f64 {
    1.0
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DriveEntry {
    rf_voltage: f64,
    rf_frequency: f64,
    #[serde(default)]
    dc: BTreeMap<String, f64>,
}

/// Parsed layout file: geometry plus named drive presets, in file units.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutFile {
    name: String,
    hole_center: [f64; 2],
    #[serde(default)]
    hole_side: f64,
    units: Units,
    patch: Vec<PatchEntry>,
    #[serde(default)]
    drive: BTreeMap<String, DriveEntry>,
}

fn length_scale(unit: &str) -> Result<f64, TrapError> {
    match unit {
        "m" => Ok(1.0),
        "mm" => Ok(1e-3),
        "um" => Ok(1e-6),
        other => Err(TrapError::Config(format!("unsupported length unit `{other}`"))),
    }
}

fn voltage_scale(unit: &str) -> Result<f64, TrapError> {
    match unit {
        "V" => Ok(1.0),
        "mV" => Ok(1e-3),
        other => Err(TrapError::Config(format!("unsupported voltage unit `{other}`"))),
    }
}

fn frequency_scale(unit: &str) -> Result<f64, TrapError> {
    match unit {
        "Hz" => Ok(1.0),
        "kHz" => Ok(1e3),
        "MHz" => Ok(1e6),
        other => Err(TrapError::Config(format!("unsupported frequency unit `{other}`"))),
    }
}

impl LayoutFile {
    pub fn parse(source: &str) -> Result<Self, TrapError> {
        toml::from_str(source).map_err(|e| TrapError::Config(format!("layout file: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, TrapError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| TrapError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn layout(&self) -> Result<ElectrodeLayout, TrapError> {
        let l = length_scale(&self.units.length)?;
        let patches = self
            .patch
            .iter()
            .map(|p| RectPatch {
                label: p.label.clone(),
                role: p.role,
                x1: p.x[0] * l,
                x2: p.x[1] * l,
                y1: p.y[0] * l,
                y2: p.y[1] * l,
                sign: p.sign,
            })
            .collect();
        let center = Vector2::new(self.hole_center[0] * l, self.hole_center[1] * l);
        let base = ElectrodeLayout::new(self.name.clone(), patches, center)?;
        if self.hole_side > 0.0 {
            base.with_hole(self.hole_side * l)
        } else {
            Ok(base)
        }
    }

    pub fn drive_names(&self) -> impl Iterator<Item = &str> {
        self.drive.keys().map(String::as_str)
    }

    pub fn drive(&self, name: &str) -> Result<TrapDrive, TrapError> {
        let v = voltage_scale(&self.units.voltage)?;
        let f = frequency_scale(&self.units.frequency)?;
        let d = self
            .drive
            .get(name)
            .ok_or_else(|| TrapError::Config(format!("no drive preset `{name}`")))?;
        Ok(TrapDrive {
            rf_voltage: d.rf_voltage * v,
            rf_omega: 2.0 * PI * d.rf_frequency * f,
            dc_voltages: d.dc.iter().map(|(k, x)| (k.clone(), x * v)).collect(),
        })
    }
}
