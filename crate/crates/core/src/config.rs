//! Run configuration: a TOML file whose physical quantities carry their unit
//! in the key (`temperature_K = 530`, `oven_distance_mm = 3`).
//!
//! Loading checks every key against a fixed schema and reports all problems
//! at once. Absent fields take registry defaults, and the loaded config
//! records which ones it filled. Quantities keep the unit they were written
//! in, so saving a loaded config reproduces it exactly.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constants::value;

pub const SCHEMA_VERSION: i64 = 1;

/// Physical dimension of a field.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dim {
    Length,
    Time,
    Frequency,
    Temperature,
    Angle,
    /// 1/s.
    Rate,
    /// K/s.
    HeatingRate,
    Power,
}

impl Dim {
    /// Factor converting `unit` to SI, if `unit` belongs to this dimension.
    pub fn scale(self, unit: &str) -> Option<f64> {
        let table: &[(&str, f64)] = match self {
            Dim::Length => &[("m", 1.0), ("mm", 1e-3), ("um", 1e-6), ("nm", 1e-9)],
            Dim::Time => &[("s", 1.0), ("ms", 1e-3), ("us", 1e-6), ("ns", 1e-9)],
            Dim::Frequency => &[("Hz", 1.0), ("kHz", 1e3), ("MHz", 1e6), ("GHz", 1e9)],
            Dim::Temperature => &[("K", 1.0), ("mK", 1e-3), ("uK", 1e-6)],
            Dim::Angle => &[("deg", 1.0), ("rad", 180.0 / std::f64::consts::PI)],
            Dim::Rate => &[("per_s", 1.0), ("per_ms", 1e3)],
            Dim::HeatingRate => &[("K_per_s", 1.0), ("mK_per_s", 1e-3)],
            Dim::Power => &[("W", 1.0), ("mW", 1e-3), ("uW", 1e-6)],
        };
        table.iter().find(|(u, _)| *u == unit).map(|(_, f)| *f)
    }

    fn example(self) -> &'static str {
        match self {
            Dim::Length => "m",
            Dim::Time => "s",
            Dim::Frequency => "Hz",
            Dim::Temperature => "K",
            Dim::Angle => "deg",
            Dim::Rate => "per_s",
            Dim::HeatingRate => "K_per_s",
            Dim::Power => "W",
        }
    }
}

/// A number with the unit it was written in. Angles are SI-converted to degrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quantity {
    pub value: f64,
    pub unit: String,
}

impl Quantity {
    pub fn new(value: f64, unit: &str) -> Self {
        Self {
            value,
            unit: unit.to_string(),
        }
    }

    fn si(&self, dim: Dim) -> f64 {
        self.value * dim.scale(&self.unit).expect("unit checked at load")
    }
}

/// One protocol stage as written in the config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEntry {
    pub name: String,
    pub kind: String,
    pub duration: Quantity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Value {
    Quantity(Quantity),
    QuantityList(Vec<Quantity>),
    Float(f64),
    FloatList(Vec<f64>),
    Int(i64),
    Bool(bool),
    Str(String),
    StrList(Vec<String>),
    Stages(Vec<StageEntry>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Quantity(Dim),
    QuantityList(Dim),
    Float,
    FloatList,
    Int,
    Bool,
    Str,
    StrList,
    Stages,
}

impl Kind {
    fn dim(self) -> Option<Dim> {
        match self {
            Kind::Quantity(d) | Kind::QuantityList(d) => Some(d),
            _ => None,
        }
    }
}

struct Field {
    section: &'static str,
    name: &'static str,
    kind: Kind,
    default: fn() -> Option<Value>,
    choices: &'static [&'static str],
}

const ISOTOPES: &[&str] = &["40Ca", "44Ca"];

fn q(v: f64, unit: &str) -> Option<Value> {
    Some(Value::Quantity(Quantity::new(v, unit)))
}

fn s(v: &str) -> Option<Value> {
    Some(Value::Str(v.into()))
}

fn none() -> Option<Value> {
    None
}

macro_rules! field {
    ($sec:expr, $name:expr, $kind:expr, $default:expr) => {
        Field {
            section: $sec,
            name: $name,
            kind: $kind,
            default: $default,
            choices: &[],
        }
    };
    ($sec:expr, $name:expr, $kind:expr, $default:expr, $choices:expr) => {
        Field {
            section: $sec,
            name: $name,
            kind: $kind,
            default: $default,
            choices: $choices,
        }
    };
}

use Dim::*;

static SCHEMA: &[Field] = &[
    field!("", "schema_version", Kind::Int, || Some(Value::Int(SCHEMA_VERSION))),
    field!("", "name", Kind::Str, || s("unnamed")),
    field!("", "seed", Kind::Int, || Some(Value::Int(0))),
    field!("", "output_dir", Kind::Str, || s("out")),
    field!("", "profile", Kind::Str, || s("desk"), &["desk", "overnight"]),
    // trap
    field!("trap", "layout", Kind::Str, || s("canonical")),
    field!("trap", "drive", Kind::Str, || s("symmetric")),
    field!("trap", "species", Kind::Str, || s("40Ca"), ISOTOPES),
    field!("trap", "scan_height", Kind::Quantity(Length), || q(value("ion_height_m") * 1e6, "um")),
    field!("trap", "hole_sides", Kind::QuantityList(Length), || {
        Some(Value::QuantityList((1..=8).map(|k| Quantity::new(10.0 * k as f64, "um")).collect()))
    }),
    // beam
    field!("beam", "species", Kind::Str, || s("40Ca"), ISOTOPES),
    field!("beam", "oven_distance", Kind::Quantity(Length), || q(value("oven_distance_m") * 1e3, "mm")),
    field!("beam", "source_diameter", Kind::Quantity(Length), || {
        q(value("effective_source_diameter_m") * 1e6, "um")
    }),
    field!("beam", "temperature", Kind::Quantity(Temperature), || q(value("oven_temperature_k"), "K")),
    field!("beam", "hole_side", Kind::Quantity(Length), || q(value("hole_side_m") * 1e6, "um")),
    field!("beam", "divergence", Kind::Quantity(Angle), none),
    field!("beam", "samples", Kind::Int, || Some(Value::Int(0))),
    // spectra
    field!("spectra", "isotopes", Kind::StrList, || {
        Some(Value::StrList(ISOTOPES.iter().map(|s| s.to_string()).collect()))
    }),
    field!("spectra", "lorentzian_fwhm", Kind::Quantity(Frequency), || {
        q(value("fitted_lorentzian_fwhm_hz") * 1e-6, "MHz")
    }),
    field!("spectra", "gaussian_fwhm", Kind::Quantity(Frequency), || {
        q(value("fitted_gaussian_fwhm_hz") * 1e-6, "MHz")
    }),
    field!("spectra", "scan_start", Kind::Quantity(Frequency), || q(value("scan_start_hz") * 1e-6, "MHz")),
    field!("spectra", "scan_stop", Kind::Quantity(Frequency), || q(value("scan_stop_hz") * 1e-6, "MHz")),
    field!("spectra", "points", Kind::Int, || Some(Value::Int(241))),
    field!("spectra", "noise_level", Kind::Float, || Some(Value::Float(0.02))),
    field!("spectra", "physical_bounds", Kind::Bool, || Some(Value::Bool(true))),
    field!("spectra", "data", Kind::Str, none),
    // crystal
    field!("crystal", "coolant", Kind::Str, || s("44Ca"), ISOTOPES),
    field!("crystal", "coolant_count", Kind::Int, || Some(Value::Int(2))),
    field!("crystal", "sympathetic", Kind::Str, || s("40Ca"), ISOTOPES),
    field!("crystal", "chain", Kind::StrList, || {
        Some(Value::StrList(vec!["44Ca".into(), "40Ca".into(), "40Ca".into(), "44Ca".into()]))
    }),
    field!("crystal", "axial_frequency", Kind::Quantity(Frequency), || {
        q(value("crystal_axial_frequency_hz") * 1e-6, "MHz")
    }),
    field!("crystal", "radial_x_frequency", Kind::Quantity(Frequency), || {
        q(value("crystal_radial_x_frequency_hz") * 1e-6, "MHz")
    }),
    field!("crystal", "radial_y_frequency", Kind::Quantity(Frequency), || {
        q(value("crystal_radial_y_frequency_hz") * 1e-6, "MHz")
    }),
    field!("crystal", "damping", Kind::Quantity(Rate), || {
        q(value("coverage_per_coolant_damping_per_s"), "per_s")
    }),
    field!("crystal", "heating_rate", Kind::Quantity(Rate), || q(value("coverage_heating_rate_per_s"), "per_s")),
    field!("crystal", "modes", Kind::Str, || s("axial"), &["axial", "all"]),
    field!("crystal", "scan_limit", Kind::Int, || Some(Value::Int(8))),
    // cooldyn
    field!("cooldyn", "trap", Kind::Str, || s("harmonic"), &["harmonic", "secular", "full_rf"]),
    field!("cooldyn", "coolant", Kind::Str, || s("40Ca"), ISOTOPES),
    field!("cooldyn", "coolant_count", Kind::Int, || Some(Value::Int(2))),
    field!("cooldyn", "sympathetic", Kind::Str, || s("44Ca"), ISOTOPES),
    field!("cooldyn", "duration", Kind::Quantity(Time), none),
    field!("cooldyn", "timestep", Kind::Quantity(Time), none),
    field!("cooldyn", "heating_rate", Kind::Quantity(HeatingRate), none),
    field!("cooldyn", "photon_recoil", Kind::Bool, || Some(Value::Bool(true))),
    field!("cooldyn", "saturation", Kind::Float, none),
    field!("cooldyn", "detuning", Kind::Quantity(Frequency), none),
    field!("cooldyn", "escape_radius", Kind::Quantity(Length), none),
    field!("cooldyn", "energy_ratio", Kind::Float, none),
    field!("cooldyn", "energy_ratios", Kind::FloatList, || Some(Value::FloatList(vec![0.25, 1.0, 4.0, 8.0]))),
    field!("cooldyn", "heating_rates", Kind::QuantityList(HeatingRate), || {
        Some(Value::QuantityList(
            [0.0, 200.0, 400.0, 800.0].iter().map(|v| Quantity::new(*v, "K_per_s")).collect(),
        ))
    }),
    field!("cooldyn", "trials", Kind::Int, || Some(Value::Int(0))),
    field!("cooldyn", "melt_temperature", Kind::Quantity(Temperature), none),
    field!("cooldyn", "persist", Kind::Quantity(Time), none),
    field!("cooldyn", "window", Kind::Quantity(Time), none),
    field!("cooldyn", "decimation", Kind::Int, || Some(Value::Int(8))),
    field!("cooldyn", "record", Kind::Bool, || Some(Value::Bool(false))),
    field!("cooldyn", "stage", Kind::Stages, none),
];

const SECTIONS: &[&str] = &["trap", "beam", "spectra", "crystal", "cooldyn"];

/// One validation problem.
#[derive(Debug, Clone, PartialEq)]
pub struct Issue {
    /// `section.key`.
    pub field: String,
    pub message: String,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: not valid TOML: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{} validation error(s):\n{}", .0.len(), .0.iter().map(|i| format!("  {i}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<Issue>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Strictness {
    /// Unknown keys are errors.
    #[default]
    Strict,
    /// Unknown keys are warnings.
    Lenient,
}

/// A validated configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    entries: BTreeMap<String, Value>,
    /// Directory relative paths resolve against.
    pub base_dir: PathBuf,
    /// Fields that took their default value.
    pub defaulted: Vec<String>,
    pub warnings: Vec<String>,
}

impl PartialEq for RunConfig {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

fn key_of(f: &Field) -> String {
    if f.section.is_empty() {
        f.name.to_string()
    } else {
        format!("{}.{}", f.section, f.name)
    }
}

fn type_name(kind: Kind) -> String {
    match kind {
        Kind::Quantity(_) => "a number".into(),
        Kind::QuantityList(_) | Kind::FloatList => "an array of numbers".into(),
        Kind::Float => "a number".into(),
        Kind::Int => "an integer".into(),
        Kind::Bool => "a boolean".into(),
        Kind::Str => "a string".into(),
        Kind::StrList => "an array of strings".into(),
        Kind::Stages => "an array of stage tables".into(),
    }
}

fn number(v: &toml::Value) -> Option<f64> {
    match v {
        toml::Value::Float(x) => Some(*x),
        toml::Value::Integer(i) => Some(*i as f64),
        _ => None,
    }
}

/// Interprets a raw TOML value for `field`; `unit` is the key suffix.
fn convert(field: &Field, unit: Option<&str>, raw: &toml::Value, issues: &mut Vec<Issue>) -> Option<Value> {
    let path = key_of(field);
    let wrong = |issues: &mut Vec<Issue>| {
        issues.push(Issue {
            field: path.clone(),
            message: format!("expected {}", type_name(field.kind)),
        });
        None
    };
    let out = match field.kind {
        Kind::Quantity(_) => match number(raw) {
            Some(x) => Value::Quantity(Quantity::new(x, unit.unwrap_or_default())),
            None => return wrong(issues),
        },
        Kind::QuantityList(_) | Kind::FloatList => {
            let Some(arr) = raw.as_array() else { return wrong(issues) };
            let Some(xs) = arr.iter().map(number).collect::<Option<Vec<f64>>>() else { return wrong(issues) };
            if field.kind == Kind::FloatList {
                Value::FloatList(xs)
            } else {
                Value::QuantityList(xs.into_iter().map(|x| Quantity::new(x, unit.unwrap_or_default())).collect())
            }
        }
        Kind::Float => match number(raw) {
            Some(x) => Value::Float(x),
            None => return wrong(issues),
        },
        Kind::Int => match raw.as_integer() {
            Some(i) => Value::Int(i),
            None => return wrong(issues),
        },
        Kind::Bool => match raw.as_bool() {
            Some(b) => Value::Bool(b),
            None => return wrong(issues),
        },
        Kind::Str => match raw.as_str() {
            Some(s) => Value::Str(s.to_string()),
            None => return wrong(issues),
        },
        Kind::StrList => {
            let Some(arr) = raw.as_array() else { return wrong(issues) };
            let Some(xs) = arr.iter().map(|v| v.as_str().map(str::to_string)).collect::<Option<Vec<_>>>() else {
                return wrong(issues);
            };
            Value::StrList(xs)
        }
        Kind::Stages => {
            let Some(arr) = raw.as_array() else { return wrong(issues) };
            let mut stages = Vec::new();
            for (i, st) in arr.iter().enumerate() {
                let here = format!("{path}[{i}]");
                let Some(t) = st.as_table() else {
                    issues.push(Issue {
                        field: here,
                        message: "expected a table".into(),
                    });
                    continue;
                };
                let mut name = None;
                let mut kind = None;
                let mut duration = None;
                for (k, v) in t {
                    match k.as_str() {
                        "name" => name = v.as_str().map(str::to_string),
                        "kind" => kind = v.as_str().map(str::to_string),
                        "duration" => issues.push(Issue {
                            field: format!("{here}.duration"),
                            message: "needs a unit suffix, e.g. duration_ms".into(),
                        }),
                        k if k.starts_with("duration_") => {
                            let u = &k["duration_".len()..];
                            match (Time.scale(u), number(v)) {
                                (Some(_), Some(x)) => duration = Some(Quantity::new(x, u)),
                                (None, _) => issues.push(Issue {
                                    field: format!("{here}.{k}"),
                                    message: format!("unit `{u}` is not a time unit"),
                                }),
                                (_, None) => issues.push(Issue {
                                    field: format!("{here}.{k}"),
                                    message: "expected a number".into(),
                                }),
                            }
                        }
                        other => issues.push(Issue {
                            field: format!("{here}.{other}"),
                            message: "unknown key".into(),
                        }),
                    }
                }
                if let Some(k) = kind.as_deref().filter(|k| !["load", "inject", "identify"].contains(k)) {
                    issues.push(Issue {
                        field: format!("{here}.kind"),
                        message: format!("`{k}` is not one of load, inject, identify"),
                    });
                }
                match (name, kind, duration) {
                    (Some(name), Some(kind), Some(duration)) => stages.push(StageEntry { name, kind, duration }),
                    _ => issues.push(Issue {
                        field: here,
                        message: "a stage needs name, kind and duration_<unit>".into(),
                    }),
                }
            }
            Value::Stages(stages)
        }
    };
    if let Value::Str(s) = &out {
        if !field.choices.is_empty() && !field.choices.contains(&s.as_str()) {
            issues.push(Issue {
                field: path,
                message: format!("`{s}` is not one of {}", field.choices.join(", ")),
            });
            return None;
        }
    }
    Some(out)
}

/// Matches a key against the section's fields: exact name, or name plus a
/// unit suffix.
fn match_key<'a>(section: &str, key: &'a str) -> Option<(&'static Field, Option<&'a str>)> {
    let mut best: Option<(&'static Field, Option<&'a str>)> = None;
    for f in SCHEMA.iter().filter(|f| f.section == section) {
        if key == f.name {
            return Some((f, None));
        }
        if f.kind.dim().is_some() {
            if let Some(rest) = key.strip_prefix(f.name).and_then(|r| r.strip_prefix('_')) {
                if best.is_none_or(|(b, _)| b.name.len() < f.name.len()) {
                    best = Some((f, Some(rest)));
                }
            }
        }
    }
    best
}

impl RunConfig {
    /// All defaults.
    pub fn defaults() -> Self {
        Self::from_table(&toml::Table::new(), Path::new("."), Strictness::Strict).expect("defaults are valid")
    }

    pub fn load(path: &Path, strictness: Strictness) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &base, strictness).map_err(|e| match e {
            ConfigError::Parse { message, .. } => ConfigError::Parse {
                path: path.to_path_buf(),
                message,
            },
            other => other,
        })
    }

    pub fn parse(text: &str, base_dir: &Path, strictness: Strictness) -> Result<Self, ConfigError> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse {
            path: PathBuf::new(),
            message: e.message().to_string(),
        })?;
        Self::from_table(&table, base_dir, strictness)
    }

    fn from_table(table: &toml::Table, base_dir: &Path, strictness: Strictness) -> Result<Self, ConfigError> {
        let mut issues = Vec::new();
        let mut warnings = Vec::new();
        let mut entries = BTreeMap::new();
        let unknown = |path: String, issues: &mut Vec<Issue>, warnings: &mut Vec<String>| match strictness {
            Strictness::Strict => issues.push(Issue {
                field: path,
                message: "unknown key".into(),
            }),
            Strictness::Lenient => warnings.push(format!("{path}: unknown key ignored")),
        };

        let mut visit = |section: &str, key: &str, raw: &toml::Value, issues: &mut Vec<Issue>| {
            let path = if section.is_empty() { key.to_string() } else { format!("{section}.{key}") };
            let Some((field, unit)) = match_key(section, key) else {
                unknown(path, issues, &mut warnings);
                return;
            };
            let fkey = key_of(field);
            if let Some(dim) = field.kind.dim() {
                match unit {
                    None => {
                        issues.push(Issue {
                            field: fkey,
                            message: format!("unit mismatch: missing unit suffix, e.g. `{}_{}`", field.name, dim.example()),
                        });
                        return;
                    }
                    Some(u) if dim.scale(u).is_none() => {
                        issues.push(Issue {
                            field: fkey,
                            message: format!("unit mismatch: `{u}` is not a {dim:?} unit"),
                        });
                        return;
                    }
                    _ => {}
                }
            }
            if entries.contains_key(&fkey) {
                issues.push(Issue {
                    field: fkey,
                    message: "given more than once".into(),
                });
                return;
            }
            if let Some(v) = convert(field, unit, raw, issues) {
                entries.insert(fkey, v);
            }
        };

        for (key, raw) in table {
            if SECTIONS.contains(&key.as_str()) {
                match raw.as_table() {
                    Some(t) => {
                        for (k, v) in t {
                            visit(key, k, v, &mut issues);
                        }
                    }
                    None => issues.push(Issue {
                        field: key.clone(),
                        message: "expected a table".into(),
                    }),
                }
            } else {
                visit("", key, raw, &mut issues);
            }
        }

        let mut defaulted = Vec::new();
        for f in SCHEMA {
            let k = key_of(f);
            if !entries.contains_key(&k) {
                if let Some(v) = (f.default)() {
                    entries.insert(k.clone(), v);
                    defaulted.push(k);
                }
            }
        }

        let cfg = Self {
            entries,
            base_dir: base_dir.to_path_buf(),
            defaulted,
            warnings,
        };
        cfg.check(&mut issues);
        if issues.is_empty() {
            Ok(cfg)
        } else {
            Err(ConfigError::Invalid(issues))
        }
    }

    /// Cross-field and file checks.
    fn check(&self, issues: &mut Vec<Issue>) {
        let mut bad = |field: &str, message: String| {
            issues.push(Issue {
                field: field.into(),
                message,
            })
        };
        if let Some(Value::Int(v)) = self.entries.get("schema_version") {
            if *v != SCHEMA_VERSION {
                bad("schema_version", format!("version {v} is not supported (expected {SCHEMA_VERSION})"));
            }
        }
        if let Some(Value::Int(v)) = self.entries.get("seed") {
            if *v < 0 {
                bad("seed", "must be non-negative".into());
            }
        }
        for key in ["beam.samples", "crystal.scan_limit", "cooldyn.trials"] {
            if let Some(Value::Int(v)) = self.entries.get(key) {
                if *v < 0 {
                    bad(key, "must be non-negative".into());
                }
            }
        }
        for key in ["spectra.points", "crystal.coolant_count", "cooldyn.decimation"] {
            if let Some(Value::Int(v)) = self.entries.get(key) {
                if *v < 1 {
                    bad(key, "must be at least 1".into());
                }
            }
        }
        for key in ["spectra.isotopes", "crystal.chain"] {
            if let Some(Value::StrList(xs)) = self.entries.get(key) {
                for x in xs {
                    if !ISOTOPES.contains(&x.as_str()) {
                        bad(key, format!("unknown isotope `{x}`"));
                    }
                }
            }
        }
        if let Some(Value::Str(layout)) = self.entries.get("trap.layout") {
            if layout != "canonical" && !self.resolve(layout).is_file() {
                bad("trap.layout", format!("file `{}` not found", self.resolve(layout).display()));
            }
        }
        if let Some(Value::Str(data)) = self.entries.get("spectra.data") {
            if !self.resolve(data).is_file() {
                bad("spectra.data", format!("file `{}` not found", self.resolve(data).display()));
            }
        }
    }

    /// `path` relative to the config file's directory.
    pub fn resolve(&self, path: &str) -> PathBuf {
        let p = Path::new(path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.entries.get(key)
    }

    fn dim_of(key: &str) -> Dim {
        SCHEMA
            .iter()
            .find(|f| key_of(f) == key)
            .and_then(|f| f.kind.dim())
            .unwrap_or_else(|| panic!("`{key}` is not a quantity field"))
    }

    /// Quantity in SI units (angles in degrees).
    pub fn si(&self, key: &str) -> f64 {
        self.opt_si(key).unwrap_or_else(|| panic!("`{key}` has no value"))
    }

    pub fn opt_si(&self, key: &str) -> Option<f64> {
        match self.entries.get(key) {
            Some(Value::Quantity(q)) => Some(q.si(Self::dim_of(key))),
            _ => None,
        }
    }

    pub fn si_list(&self, key: &str) -> Vec<f64> {
        match self.entries.get(key) {
            Some(Value::QuantityList(qs)) => qs.iter().map(|q| q.si(Self::dim_of(key))).collect(),
            _ => Vec::new(),
        }
    }

    pub fn float(&self, key: &str) -> Option<f64> {
        match self.entries.get(key) {
            Some(Value::Float(x)) => Some(*x),
            _ => None,
        }
    }

    pub fn floats(&self, key: &str) -> Vec<f64> {
        match self.entries.get(key) {
            Some(Value::FloatList(x)) => x.clone(),
            _ => Vec::new(),
        }
    }

    pub fn int(&self, key: &str) -> i64 {
        match self.entries.get(key) {
            Some(Value::Int(i)) => *i,
            _ => panic!("`{key}` is not an integer field with a value"),
        }
    }

    pub fn boolean(&self, key: &str) -> bool {
        matches!(self.entries.get(key), Some(Value::Bool(true)))
    }

    pub fn str(&self, key: &str) -> Option<&str> {
        match self.entries.get(key) {
            Some(Value::Str(s)) => Some(s),
            _ => None,
        }
    }

    pub fn strs(&self, key: &str) -> Vec<String> {
        match self.entries.get(key) {
            Some(Value::StrList(s)) => s.clone(),
            _ => Vec::new(),
        }
    }

    pub fn stages(&self) -> Option<&[StageEntry]> {
        match self.entries.get("cooldyn.stage") {
            Some(Value::Stages(s)) => Some(s),
            _ => None,
        }
    }

    /// Seconds of a stage duration.
    pub fn stage_duration(stage: &StageEntry) -> f64 {
        stage.duration.si(Time)
    }

    pub fn seed(&self) -> u64 {
        self.int("seed") as u64
    }

    /// Overrides the seed, as `--seed` does.
    pub fn set_seed(&mut self, seed: u64) {
        self.entries.insert("seed".into(), Value::Int(seed as i64));
    }

    /// Overrides the profile (`desk` or `overnight`).
    pub fn set_profile(&mut self, profile: &str) -> Result<(), ConfigError> {
        if !["desk", "overnight"].contains(&profile) {
            return Err(ConfigError::Invalid(vec![Issue {
                field: "profile".into(),
                message: format!("`{profile}` is not one of desk, overnight"),
            }]));
        }
        self.entries.insert("profile".into(), Value::Str(profile.into()));
        Ok(())
    }

    /// The full config, defaults included, as TOML.
    pub fn to_toml_string(&self) -> String {
        let mut root = toml::Table::new();
        for f in SCHEMA {
            let Some(v) = self.entries.get(&key_of(f)) else { continue };
            let (key, item) = match v {
                Value::Quantity(q) => (format!("{}_{}", f.name, q.unit), toml::Value::Float(q.value)),
                Value::QuantityList(qs) => {
                    let unit = qs.first().map_or_else(|| f.kind.dim().unwrap().example().to_string(), |q| q.unit.clone());
                    (
                        format!("{}_{unit}", f.name),
                        toml::Value::Array(qs.iter().map(|q| toml::Value::Float(q.value)).collect()),
                    )
                }
                Value::Float(x) => (f.name.to_string(), toml::Value::Float(*x)),
                Value::FloatList(xs) => (
                    f.name.to_string(),
                    toml::Value::Array(xs.iter().map(|x| toml::Value::Float(*x)).collect()),
                ),
                Value::Int(i) => (f.name.to_string(), toml::Value::Integer(*i)),
                Value::Bool(b) => (f.name.to_string(), toml::Value::Boolean(*b)),
                Value::Str(s) => (f.name.to_string(), toml::Value::String(s.clone())),
                Value::StrList(xs) => (
                    f.name.to_string(),
                    toml::Value::Array(xs.iter().map(|x| toml::Value::String(x.clone())).collect()),
                ),
                Value::Stages(st) => (
                    f.name.to_string(),
                    toml::Value::Array(
                        st.iter()
                            .map(|s| {
                                let mut t = toml::Table::new();
                                t.insert("name".into(), toml::Value::String(s.name.clone()));
                                t.insert("kind".into(), toml::Value::String(s.kind.clone()));
                                t.insert(format!("duration_{}", s.duration.unit), toml::Value::Float(s.duration.value));
                                toml::Value::Table(t)
                            })
                            .collect(),
                    ),
                ),
            };
            if f.section.is_empty() {
                root.insert(key, item);
            } else {
                root.entry(f.section)
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .expect("section is a table")
                    .insert(key, item);
            }
        }
        toml::to_string(&root).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        RunConfig::parse(text, Path::new("."), Strictness::Strict)
    }

    fn issues(text: &str) -> Vec<Issue> {
        match parse(text) {
            Err(ConfigError::Invalid(v)) => v,
            other => panic!("expected validation errors, got {other:?}"),
        }
    }

    #[test]
    fn minimal_config_fills_and_reports_defaults() {
        let cfg = parse("schema_version = 1\nname = \"m\"\n").unwrap();
        assert!(cfg.defaulted.contains(&"beam.temperature".to_string()));
        assert!(!cfg.defaulted.contains(&"name".to_string()));
        assert_eq!(cfg.si("beam.temperature"), value("oven_temperature_k"));
        assert!((cfg.si("beam.oven_distance") - value("oven_distance_m")).abs() < 1e-15);
        assert_eq!(cfg.opt_si("cooldyn.duration"), None);
    }

    #[test]
    fn unit_suffixes_convert() {
        let cfg = parse("[beam]\ntemperature_mK = 530000\noven_distance_um = 3000\n").unwrap();
        assert!((cfg.si("beam.temperature") - 530.0).abs() < 1e-9);
        assert!((cfg.si("beam.oven_distance") - 3e-3).abs() < 1e-15);
    }

    #[test]
    fn missing_unit_is_a_unit_mismatch_naming_the_field() {
        let v = issues("[beam]\ntemperature = 530\n");
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].field, "beam.temperature");
        assert!(v[0].message.contains("unit mismatch"));
    }

    #[test]
    fn wrong_dimension_is_a_unit_mismatch() {
        let v = issues("[beam]\ntemperature_mm = 530\n");
        assert_eq!(v[0].field, "beam.temperature");
        assert!(v[0].message.contains("unit mismatch"));
    }

    #[test]
    fn all_errors_reported_in_one_pass() {
        let v = issues("schema_version = 2\nbogus = 1\n[beam]\ntemperature = 530\nsamples = \"x\"\n[trap]\nlayout = \"missing.toml\"\n");
        let fields: Vec<&str> = v.iter().map(|i| i.field.as_str()).collect();
        for f in ["schema_version", "bogus", "beam.temperature", "beam.samples", "trap.layout"] {
            assert!(fields.contains(&f), "{f} missing from {fields:?}");
        }
    }

    #[test]
    fn lenient_mode_warns_on_unknown_keys() {
        let text = "bogus = 1\n[beam]\nextra = true\n";
        assert_eq!(issues(text).len(), 2);
        let cfg = RunConfig::parse(text, Path::new("."), Strictness::Lenient).unwrap();
        assert_eq!(cfg.warnings.len(), 2);
    }

    #[test]
    fn lenient_mode_still_rejects_unit_errors() {
        let r = RunConfig::parse("[beam]\ntemperature = 530\n", Path::new("."), Strictness::Lenient);
        assert!(matches!(r, Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn choices_are_checked() {
        let v = issues("profile = \"weekend\"\n[cooldyn]\ntrap = \"penning\"\n");
        assert_eq!(v.len(), 2);
    }

    #[test]
    fn stages_parse_and_validate() {
        let cfg = parse(
            "[[cooldyn.stage]]\nname = \"a\"\nkind = \"load\"\nduration_ms = 1.5\n\
             [[cooldyn.stage]]\nname = \"b\"\nkind = \"inject\"\nduration_us = 20\n",
        )
        .unwrap();
        let st = cfg.stages().unwrap();
        assert_eq!(st.len(), 2);
        assert!((RunConfig::stage_duration(&st[0]) - 1.5e-3).abs() < 1e-18);
        let v = issues("[[cooldyn.stage]]\nname = \"a\"\nkind = \"warp\"\nduration = 1\n");
        assert!(v.iter().any(|i| i.field.ends_with(".kind")));
        assert!(v.iter().any(|i| i.field.ends_with(".duration")));
    }

    #[test]
    fn round_trip_of_defaults() {
        let cfg = RunConfig::defaults();
        let again = parse(&cfg.to_toml_string()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn referenced_files_resolve_against_the_config_directory() {
        let dir = std::env::temp_dir().join(format!("holetrap-cfg-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        std::fs::write(dir.join("data.csv"), "detuning_hz,intensity\n").unwrap();
        let path = dir.join("run.toml");
        std::fs::write(&path, "[spectra]\ndata = \"data.csv\"\n").unwrap();
        let cfg = RunConfig::load(&path, Strictness::Strict).unwrap();
        assert_eq!(cfg.resolve("data.csv"), dir.join("data.csv"));
        std::fs::remove_dir_all(&dir).unwrap();
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn unit_for(d: Dim) -> impl Strategy<Value = &'static str> {
            let units: &'static [&'static str] = match d {
                Dim::Length => &["m", "mm", "um", "nm"],
                Dim::Temperature => &["K", "mK", "uK"],
                Dim::Time => &["s", "ms", "us", "ns"],
                _ => &["Hz", "kHz", "MHz", "GHz"],
            };
            proptest::sample::select(units)
        }

        proptest! {
            #[test]
            fn serialize_then_load_is_identity(
                t in 1.0f64..1e4, tu in unit_for(Dim::Temperature),
                d in 1e-3f64..1e3, du in unit_for(Dim::Length),
                f in -1e3f64..1e3, fu in unit_for(Dim::Frequency),
                dt in 1e-3f64..10.0, dtu in unit_for(Dim::Time),
                seed in 0u64..1_000_000,
                sides in proptest::collection::vec(1.0f64..100.0, 1..6),
                ratios in proptest::collection::vec(0.01f64..20.0, 1..6),
                recoil: bool,
            ) {
                let sides: Vec<String> = sides.iter().map(|x| format!("{x:?}")).collect();
                let ratios: Vec<String> = ratios.iter().map(|x| format!("{x:?}")).collect();
                let text = format!(
                    "seed = {seed}\n[trap]\nhole_sides_um = [{}]\n[beam]\ntemperature_{tu} = {t:?}\noven_distance_{du} = {d:?}\n\
                     [spectra]\nscan_start_{fu} = {f:?}\n[cooldyn]\nduration_{dtu} = {dt:?}\nenergy_ratios = [{}]\nphoton_recoil = {recoil}\n\
                     [[cooldyn.stage]]\nname = \"s\"\nkind = \"identify\"\nduration_{dtu} = {dt:?}\n",
                    sides.join(", "), ratios.join(", ")
                );
                let a = parse(&text).unwrap();
                let b = parse(&a.to_toml_string()).unwrap();
                prop_assert_eq!(&a, &b);
                prop_assert_eq!(a.to_toml_string(), b.to_toml_string());
            }
        }
    }
}
