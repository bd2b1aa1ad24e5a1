//! Stochastic molecular dynamics of trapped ions: trap and Coulomb forces,
//! Doppler cooling with photon recoil, anomalous heating, hot-ion injection
//! and event detection.
//!
//! Positions are relative to the trap center. In the harmonic trap the chain
//! axis is z and the atomic beam travels along +x; in a surface trap the
//! frame is the electrode frame and the beam travels along +z.

mod events;
mod runs;

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal, UnitSphere};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::beamline::BeamError;
use crate::constants::{value, BOLTZMANN, COULOMB, HBAR};
use crate::crystal::{ChainTrap, CrystalError};
use crate::isotopes::{ca40, ca44, Isotope};
use crate::trapmodel::{default_guess, secular_at, SecularResult, Trap, TrapError};

pub use events::{detect_events, write_events_jsonl, Event, EventDetector, EventKind, EventThresholds, Frame};
pub use runs::{
    capture_ensemble, crystallized_chain, hop_ensemble, inject, laser_cooling_reference, run_load, run_protocol,
    run_sympathetic, write_trajectory_csv, CapturePoint, HopPoint, IonFluorescence, IonSnapshot, LoadReport, Protocol,
    ProtocolReport, ProtocolStage, Recording, StageKind, StageReport, SympatheticReport,
};

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error(transparent)]
    Trap(#[from] TrapError),
    #[error(transparent)]
    Crystal(#[from] CrystalError),
    #[error(transparent)]
    Beam(#[from] BeamError),
    #[error("protocol aborted at stage {stage} ({name}): {reason}")]
    ProtocolAbort { stage: usize, name: String, reason: String },
    #[error("state became non-finite at t = {0:e} s")]
    NonFinite(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A cooling beam on the 397 nm line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaserBeam {
    /// m.
    pub wavelength: f64,
    /// Hz, relative to the resonance of the addressed isotope.
    pub detuning: f64,
    pub saturation: f64,
    /// Unit propagation direction.
    pub direction: Vector3<f64>,
    /// Natural linewidth Gamma/2pi, Hz.
    pub linewidth: f64,
    /// 397 nm isotope shift of the isotope the beam is tuned to, Hz.
    pub addressed_shift: f64,
}

impl LaserBeam {
    pub fn new(
        wavelength: f64,
        detuning: f64,
        saturation: f64,
        direction: Vector3<f64>,
        linewidth: f64,
        addressed_shift: f64,
    ) -> Result<Self, DynamicsError> {
        let norm = direction.norm();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(DynamicsError::Scenario("beam direction must be a non-zero vector".into()));
        }
        let beam = Self {
            wavelength,
            detuning,
            saturation,
            direction: direction / norm,
            linewidth,
            addressed_shift,
        };
        beam.validate()?;
        Ok(beam)
    }

    /// The registry's cooling beam, tuned to `addressed`, along (1,1,1)/sqrt(3)
    /// so that it has a projection on every trap axis.
    pub fn cooling(addressed: &Isotope) -> Self {
        let linewidth = value("natural_linewidth_397_hz");
        Self {
            wavelength: value("wavelength_397_m"),
            detuning: value("md_detuning_linewidths") * linewidth,
            saturation: value("md_saturation"),
            direction: Vector3::new(1.0, 1.0, 1.0).normalize(),
            linewidth,
            addressed_shift: addressed.shift_397,
        }
    }

    /// Same beam tuned to another isotope.
    pub fn retuned(&self, addressed: &Isotope) -> Self {
        Self {
            addressed_shift: addressed.shift_397,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        if !(self.wavelength > 0.0 && self.linewidth > 0.0) {
            return Err(DynamicsError::Scenario("beam wavelength and linewidth must be positive".into()));
        }
        if !(self.saturation >= 0.0) {
            return Err(DynamicsError::Scenario("saturation must be non-negative".into()));
        }
        if !((self.direction.norm() - 1.0).abs() < 1e-12) {
            return Err(DynamicsError::Scenario("beam direction must be a unit vector".into()));
        }
        if !self.detuning.is_finite() {
            return Err(DynamicsError::Scenario("beam detuning must be finite".into()));
        }
        Ok(())
    }

    /// rad/m.
    pub fn wavenumber(&self) -> f64 {
        2.0 * PI / self.wavelength
    }

    /// Shift of `ion`'s resonance relative to the addressed isotope, Hz.
    pub fn shift_for(&self, ion: &Isotope) -> f64 {
        ion.shift_397 - self.addressed_shift
    }
}

/// Mean radiation-pressure force (N) and scattering rate (1/s) of a
/// two-level ion moving at `velocity` whose resonance sits `isotope_shift`
/// Hz above the one the beam is tuned to.
pub fn scattering_force(beam: &LaserBeam, velocity: &Vector3<f64>, isotope_shift: f64) -> (Vector3<f64>, f64) {
    let gamma = 2.0 * PI * beam.linewidth;
    let k = beam.wavenumber();
    let delta = 2.0 * PI * (beam.detuning - isotope_shift) - k * beam.direction.dot(velocity);
    let s = beam.saturation;
    let x = 2.0 * delta / gamma;
    let rate = 0.5 * gamma * s / (1.0 + s + x * x);
    (beam.direction * (HBAR * k * rate), rate)
}

/// The 866 nm repumper, reduced to an efficiency factor on the 397 nm rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Repumper {
    /// Hz, relative to the resonance of the addressed isotope.
    pub detuning: f64,
    /// FWHM of the efficiency response, Hz.
    pub width: f64,
    /// 866 nm isotope shift of the isotope the repumper is tuned to, Hz.
    pub addressed_shift: f64,
}

impl Repumper {
    pub fn resonant(addressed: &Isotope) -> Self {
        Self {
            detuning: 0.0,
            width: value("repumper_width_866_hz"),
            addressed_shift: addressed.shift_866,
        }
    }

    pub fn retuned(&self, addressed: &Isotope) -> Self {
        Self {
            addressed_shift: addressed.shift_866,
            ..self.clone()
        }
    }

    /// `1 / (1 + (2 delta / W)^2)` with delta the repumper detuning seen by `ion`.
    pub fn efficiency(&self, ion: &Isotope) -> f64 {
        let d = self.detuning - (ion.shift_866 - self.addressed_shift);
        let x = 2.0 * d / self.width;
        1.0 / (1.0 + x * x)
    }
}

/// Simulation scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Secular frequencies and heating reduced by `desk_scale_factor`.
    #[default]
    Desk,
    /// Unscaled.
    Overnight,
}

impl Profile {
    pub fn factor(self) -> f64 {
        match self {
            Profile::Desk => value("desk_scale_factor"),
            Profile::Overnight => 1.0,
        }
    }
}

/// A surface-electrode trap solved for a reference species.
#[derive(Debug, Clone)]
pub struct SurfaceTrap {
    pub trap: Arc<Trap>,
    pub reference: Isotope,
    pub secular: SecularResult,
}

impl SurfaceTrap {
    pub fn new(trap: Trap, reference: &Isotope) -> Result<Self, DynamicsError> {
        let secular = secular_at(&trap, reference, &default_guess(trap.layout()))?;
        Ok(Self {
            trap: Arc::new(trap),
            reference: reference.clone(),
            secular,
        })
    }

    pub fn center(&self) -> Vector3<f64> {
        self.secular.trap_center
    }

    /// Divides every secular frequency by `factor`: RF and DC voltages by
    /// `factor^2`, drive frequency by `factor`. The trap center and the RF
    /// stability parameter are unchanged.
    pub fn scaled(&self, factor: f64) -> Result<Self, DynamicsError> {
        let mut drive = self.trap.drive().clone();
        let f2 = factor * factor;
        drive.rf_voltage /= f2;
        drive.rf_omega /= factor;
        for v in drive.dc_voltages.values_mut() {
            *v /= f2;
        }
        Self::new(Trap::new(self.trap.layout(), &drive)?, &self.reference)
    }

    /// Principal axes ordered (radial_x, radial_y, axial) by increasing
    /// frequency from the top: the softest axis is the chain axis.
    fn sorted_axes(&self) -> [Vector3<f64>; 3] {
        let mut idx = [0usize, 1, 2];
        idx.sort_by(|&a, &b| self.secular.frequencies[a].total_cmp(&self.secular.frequencies[b]));
        let a = &self.secular.principal_axes;
        [a[idx[1]], a[idx[2]], a[idx[0]]]
    }
}

/// Trap force model.
#[derive(Debug, Clone)]
pub enum TrapField {
    /// Ideal harmonic secular trap.
    Harmonic(ChainTrap),
    /// Pseudopotential plus static field of a surface trap.
    Secular(SurfaceTrap),
    /// Time-dependent RF plus static field of a surface trap.
    FullRf(SurfaceTrap),
}

impl TrapField {
    /// The same trap with secular frequencies divided by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self, DynamicsError> {
        if !(factor > 0.0) {
            return Err(DynamicsError::Scenario("scale factor must be positive".into()));
        }
        Ok(match self {
            TrapField::Harmonic(t) => {
                TrapField::Harmonic(ChainTrap::new(t.reference_mass, t.axial / factor, t.radial_x / factor, t.radial_y / factor)?)
            }
            TrapField::Secular(s) => TrapField::Secular(s.scaled(factor)?),
            TrapField::FullRf(s) => TrapField::FullRf(s.scaled(factor)?),
        })
    }

    /// Unit vectors (radial_x, radial_y, axial) of the chain frame.
    pub fn axes(&self) -> [Vector3<f64>; 3] {
        match self {
            TrapField::Harmonic(_) => [Vector3::x(), Vector3::y(), Vector3::z()],
            TrapField::Secular(s) | TrapField::FullRf(s) => s.sorted_axes(),
        }
    }

    pub fn chain_axis(&self) -> Vector3<f64> {
        self.axes()[2]
    }

    /// Propagation direction of the atomic beam and the two transverse
    /// directions matching the beamline's x and y.
    pub fn beam_frame(&self) -> [Vector3<f64>; 3] {
        match self {
            TrapField::Harmonic(_) => [Vector3::y(), Vector3::z(), Vector3::x()],
            TrapField::Secular(_) | TrapField::FullRf(_) => [Vector3::x(), Vector3::y(), Vector3::z()],
        }
    }

    /// Harmonic approximation in the chain frame.
    pub fn chain_trap(&self, species: &Isotope) -> Result<ChainTrap, DynamicsError> {
        match self {
            TrapField::Harmonic(t) => Ok(*t),
            TrapField::Secular(s) | TrapField::FullRf(s) => {
                let r = secular_at(&s.trap, species, &s.center())?;
                Ok(ChainTrap::from_secular(&r, species.mass)?)
            }
        }
    }

    /// Spring constants along (radial_x, radial_y, axial), N/m.
    pub fn curvatures(&self, species: &Isotope) -> Result<[f64; 3], DynamicsError> {
        Ok(self.chain_trap(species)?.curvature(species.mass))
    }

    /// Highest secular frequency over `species`, Hz.
    pub fn max_frequency(&self, species: &[&Isotope]) -> Result<f64, DynamicsError> {
        let mut f: f64 = 0.0;
        for s in species {
            let k = self.curvatures(s)?;
            for kk in k {
                f = f.max((kk / s.mass).sqrt() / (2.0 * PI));
            }
        }
        Ok(f)
    }

    /// Axial frequency of `species`, Hz.
    pub fn axial_frequency(&self, species: &Isotope) -> Result<f64, DynamicsError> {
        Ok((self.curvatures(species)?[2] / species.mass).sqrt() / (2.0 * PI))
    }

    /// Energy needed to reach `escape_radius` along the softest axis.
    pub fn depth(&self, species: &Isotope, escape_radius: f64) -> Result<f64, DynamicsError> {
        let k = self.curvatures(species)?;
        let kmin = k.iter().copied().fold(f64::INFINITY, f64::min);
        Ok(0.5 * kmin * escape_radius * escape_radius)
    }

    fn rf_period(&self) -> Option<f64> {
        match self {
            TrapField::FullRf(s) => Some(2.0 * PI / s.trap.drive().rf_omega),
            _ => None,
        }
    }

    /// Whether `r` is a point where the force can be evaluated.
    fn admissible(&self, r: &Vector3<f64>) -> bool {
        match self {
            TrapField::Harmonic(_) => true,
            TrapField::Secular(s) | TrapField::FullRf(s) => (s.center() + r).z > 0.0,
        }
    }

    fn force(&self, ion: &Isotope, r: &Vector3<f64>, t: f64) -> Result<Vector3<f64>, TrapError> {
        match self {
            TrapField::Harmonic(trap) => {
                let k = trap.curvature(ion.mass);
                Ok(Vector3::new(-k[0] * r.x, -k[1] * r.y, -k[2] * r.z))
            }
            TrapField::Secular(s) => {
                let p = s.center() + r;
                let g = s.trap.pseudopotential_gradient(ion.mass, ion.charge, &p)? + s.trap.dc_gradient(&p) * ion.charge;
                Ok(-g)
            }
            TrapField::FullRf(s) => {
                let p = s.center() + r;
                if !(p.z > 0.0) {
                    return Err(TrapError::Domain("point below the electrode plane".into()));
                }
                let omega = s.trap.drive().rf_omega;
                let e = s.trap.dc_gradient(&p) + s.trap.rf_gradient(&p) * (omega * t).cos();
                Ok(-e * ion.charge)
            }
        }
    }

    /// Secular potential energy relative to the trap center. For the full RF
    /// field this is the pseudopotential approximation.
    fn potential(&self, ion: &Isotope, r: &Vector3<f64>) -> Result<f64, TrapError> {
        match self {
            TrapField::Harmonic(trap) => {
                let k = trap.curvature(ion.mass);
                Ok(0.5 * (k[0] * r.x * r.x + k[1] * r.y * r.y + k[2] * r.z * r.z))
            }
            TrapField::Secular(s) | TrapField::FullRf(s) => {
                let c = s.center();
                Ok(s.trap.energy(ion.mass, ion.charge, &(c + r))? - s.trap.energy(ion.mass, ion.charge, &c)?)
            }
        }
    }
}

/// Anomalous heating and photon-recoil switches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Temperature rise per ion without cooling, K/s.
    pub heating_rate: f64,
    /// Poisson photon kicks when true; the mean radiation force when false.
    pub photon_recoil: bool,
}

/// How the hot ion enters the trap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum InjectionSource {
    /// Velocity from the atomic beam, scaled so that an atom at the most
    /// probable beam speed carries `energy_ratio` times the trap depth. The ion
    /// appears `offset` below the trap center along the beam.
    Beam { energy_ratio: f64, offset: f64 },
    /// Explicit position and velocity in the simulation frame.
    Fixed { position: Vector3<f64>, velocity: Vector3<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Injection {
    pub species: Isotope,
    pub source: InjectionSource,
}

/// Everything a run needs besides its state.
#[derive(Debug, Clone)]
pub struct CoolingScenario {
    pub trap: TrapField,
    pub beams: Vec<LaserBeam>,
    pub repumper: Option<Repumper>,
    pub noise: NoiseModel,
    pub coolant: Isotope,
    pub coolant_count: usize,
    pub injection: Injection,
    /// s.
    pub duration: f64,
    /// s.
    pub timestep: f64,
    pub seed: u64,
    /// Ions farther than this from the trap center are lost, m.
    pub escape_radius: f64,
    pub thresholds: EventThresholds,
    /// Steps between recorded frames.
    pub decimation: usize,
}

impl CoolingScenario {
    /// 40Ca+ coolants cooling an injected 44Ca+ in the registry's crystal trap.
    pub fn reference(profile: Profile) -> Result<Self, DynamicsError> {
        Self::harmonic(ChainTrap::standard(), ca40(), 2, ca44(), profile)
    }

    /// Scenario in a harmonic trap with registry defaults for everything
    /// else. Frequencies and heating are divided by the profile factor.
    pub fn harmonic(
        trap: ChainTrap,
        coolant: Isotope,
        coolant_count: usize,
        sympathetic: Isotope,
        profile: Profile,
    ) -> Result<Self, DynamicsError> {
        Self::with_trap(TrapField::Harmonic(trap), coolant, coolant_count, sympathetic, profile)
    }

    pub fn with_trap(
        trap: TrapField,
        coolant: Isotope,
        coolant_count: usize,
        sympathetic: Isotope,
        profile: Profile,
    ) -> Result<Self, DynamicsError> {
        let factor = profile.factor();
        let trap = if factor == 1.0 { trap } else { trap.scaled(factor)? };
        let f_max = trap.max_frequency(&[&coolant, &sympathetic])?;
        let f_axial = trap.axial_frequency(&coolant)?;
        let mut timestep = 1.0 / (value("md_steps_per_period") * f_max);
        if let Some(t_rf) = trap.rf_period() {
            timestep = timestep.min(t_rf / value("md_steps_per_period"));
        }
        let sc = Self {
            beams: vec![LaserBeam::cooling(&coolant)],
            repumper: Some(Repumper::resonant(&coolant)),
            noise: NoiseModel {
                heating_rate: value("md_heating_rate_k_per_s") / factor,
                photon_recoil: true,
            },
            injection: Injection {
                species: sympathetic,
                source: InjectionSource::Beam {
                    energy_ratio: value("md_injection_energy_ratio"),
                    offset: value("md_injection_offset_m"),
                },
            },
            coolant,
            coolant_count,
            duration: value("md_duration_periods") / f_axial,
            timestep,
            seed: 0,
            escape_radius: value("ion_height_m"),
            thresholds: EventThresholds::for_axial_frequency(f_axial),
            decimation: 8,
            trap,
        };
        sc.validate()?;
        Ok(sc)
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        let bad = |m: &str| Err(DynamicsError::Scenario(m.into()));
        if !(self.duration > 0.0) {
            return bad("duration must be positive");
        }
        if !(self.timestep > 0.0) {
            return bad("timestep must be positive");
        }
        let f_max = self.trap.max_frequency(&[&self.coolant, &self.injection.species])?;
        if !(self.timestep < 1.0 / (50.0 * f_max)) {
            return Err(DynamicsError::Scenario(format!(
                "timestep {:e} s is not below 1/(50 x {:.4e} Hz)",
                self.timestep, f_max
            )));
        }
        if let Some(t_rf) = self.trap.rf_period() {
            if !(self.timestep < t_rf / 50.0) {
                return bad("full-RF runs need at least 50 steps per RF period");
            }
        }
        if !(self.escape_radius > 0.0) {
            return bad("escape radius must be positive");
        }
        if !(self.noise.heating_rate >= 0.0) {
            return bad("heating rate must be non-negative");
        }
        if self.decimation == 0 {
            return bad("decimation must be at least 1");
        }
        for b in &self.beams {
            b.validate()?;
        }
        if let Some(r) = &self.repumper {
            if !(r.width > 0.0) {
                return bad("repumper width must be positive");
            }
        }
        self.thresholds.validate()?;
        match &self.injection.source {
            InjectionSource::Beam { energy_ratio, offset } => {
                if !(*energy_ratio >= 0.0 && offset.is_finite()) {
                    return bad("injection energy ratio must be non-negative");
                }
            }
            InjectionSource::Fixed { position, velocity } => {
                if !(position.iter().chain(velocity.iter()).all(|x| x.is_finite())) {
                    return bad("fixed injection state must be finite");
                }
            }
        }
        Ok(())
    }

    /// Number of steps covering `duration`.
    pub fn steps_for(&self, duration: f64) -> usize {
        (duration / self.timestep).round() as usize
    }

    /// Scattering rate of a resting ion of the addressed isotope, summed over
    /// beams, 1/s.
    pub fn resonant_rate(&self) -> f64 {
        self.beams.iter().map(|b| scattering_force(b, &Vector3::zeros(), 0.0).1).sum()
    }

    /// All beams and the repumper retuned to `addressed`.
    pub fn retuned(&self, addressed: &Isotope) -> Self {
        Self {
            beams: self.beams.iter().map(|b| b.retuned(addressed)).collect(),
            repumper: self.repumper.as_ref().map(|r| r.retuned(addressed)),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ion {
    /// Stable identifier, unique within a run.
    pub id: usize,
    pub species: Isotope,
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    /// Integral of the scattering rate since the last reset.
    pub scattered: f64,
}

impl Ion {
    pub fn at_rest(id: usize, species: Isotope, position: Vector3<f64>) -> Self {
        Self {
            id,
            species,
            position,
            velocity: Vector3::zeros(),
            scattered: 0.0,
        }
    }

    pub fn kinetic_energy(&self) -> f64 {
        0.5 * self.species.mass * self.velocity.norm_squared()
    }
}

/// Photon counts and summed absorption impulses, per beam.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhotonLedger {
    pub counts: Vec<u64>,
    pub absorption_impulse: Vec<Vector3<f64>>,
}

/// Dynamical state of one trajectory.
#[derive(Debug, Clone)]
pub struct SimState {
    pub ions: Vec<Ion>,
    pub time: f64,
    pub rng: ChaCha8Rng,
    pub events: Vec<Event>,
    pub photons: PhotonLedger,
    accel: Vec<Vector3<f64>>,
    next_id: usize,
}

impl SimState {
    /// Trajectory `stream` of the ensemble seeded by `seed`.
    pub fn new(ions: Vec<Ion>, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let next_id = ions.iter().map(|i| i.id + 1).max().unwrap_or(0);
        Self {
            ions,
            time: 0.0,
            rng,
            events: Vec::new(),
            photons: PhotonLedger::default(),
            accel: Vec::new(),
            next_id,
        }
    }

    /// Adds an ion and returns its id.
    pub fn add_ion(&mut self, species: Isotope, position: Vector3<f64>, velocity: Vector3<f64>) -> usize {
        let id = self.next_id;
        self.next_id += 1;
        self.ions.push(Ion {
            id,
            species,
            position,
            velocity,
            scattered: 0.0,
        });
        self.accel.clear();
        id
    }

    pub fn ion(&self, id: usize) -> Option<&Ion> {
        self.ions.iter().find(|i| i.id == id)
    }

    pub fn kinetic_energy(&self) -> f64 {
        self.ions.iter().map(Ion::kinetic_energy).sum()
    }

    /// Kinetic plus secular trap plus Coulomb energy, J.
    pub fn energy(&self, trap: &TrapField) -> Result<f64, DynamicsError> {
        let mut e = self.kinetic_energy();
        for ion in &self.ions {
            e += trap.potential(&ion.species, &ion.position)?;
        }
        for i in 0..self.ions.len() {
            for j in (i + 1)..self.ions.len() {
                let (a, b) = (&self.ions[i], &self.ions[j]);
                e += COULOMB * a.species.charge * b.species.charge / (a.position - b.position).norm();
            }
        }
        Ok(e)
    }

    pub fn reset_scattering(&mut self) {
        for ion in &mut self.ions {
            ion.scattered = 0.0;
        }
    }
}

/// Trap plus Coulomb accelerations.
fn accelerations(ions: &[Ion], trap: &TrapField, t: f64) -> Result<Vec<Vector3<f64>>, DynamicsError> {
    let mut f: Vec<Vector3<f64>> = ions
        .iter()
        .map(|ion| trap.force(&ion.species, &ion.position, t))
        .collect::<Result<_, _>>()?;
    for i in 0..ions.len() {
        for j in (i + 1)..ions.len() {
            let d = ions[i].position - ions[j].position;
            let r2 = d.norm_squared();
            let fij = d * (COULOMB * ions[i].species.charge * ions[j].species.charge / (r2 * r2.sqrt()));
            f[i] += fij;
            f[j] -= fij;
        }
    }
    for (fi, ion) in f.iter_mut().zip(ions) {
        *fi /= ion.species.mass;
    }
    Ok(f)
}

fn random_unit<R: Rng + ?Sized>(rng: &mut R) -> Vector3<f64> {
    let [x, y, z]: [f64; 3] = UnitSphere.sample(rng);
    Vector3::new(x, y, z)
}

/// Advances `state` by one timestep.
///
/// Velocity Verlet integrates the trap and Coulomb forces. Ions that leave
/// the escape radius are removed and logged. Light then acts once per step:
/// a Poisson number of photons per beam, each an absorption kick along the
/// beam plus an isotropic emission kick, or the mean force when recoil is
/// off. Anomalous heating adds Gaussian velocity kicks.
pub fn step(state: &mut SimState, sc: &CoolingScenario) -> Result<(), DynamicsError> {
    let dt = sc.timestep;
    if state.accel.len() != state.ions.len() {
        state.accel = accelerations(&state.ions, &sc.trap, state.time)?;
    }
    for (ion, a) in state.ions.iter_mut().zip(&state.accel) {
        ion.velocity += a * (0.5 * dt);
        ion.position += ion.velocity * dt;
    }
    let t1 = state.time + dt;

    let mut k = 0;
    while k < state.ions.len() {
        let r = state.ions[k].position;
        let escaped = !(r.norm() <= sc.escape_radius);
        if escaped || !sc.trap.admissible(&r) {
            let ion = state.ions.remove(k);
            state.events.push(Event::loss(
                t1,
                ion.id,
                &ion.species.name,
                if escaped { "escape radius" } else { "electrode plane" },
            ));
        } else {
            k += 1;
        }
    }

    state.accel = accelerations(&state.ions, &sc.trap, t1)?;
    for (ion, a) in state.ions.iter_mut().zip(&state.accel) {
        ion.velocity += a * (0.5 * dt);
    }

    if state.photons.counts.len() != sc.beams.len() {
        state.photons.counts.resize(sc.beams.len(), 0);
        state.photons.absorption_impulse.resize(sc.beams.len(), Vector3::zeros());
    }
    for ion in &mut state.ions {
        let m = ion.species.mass;
        let efficiency = sc.repumper.as_ref().map_or(1.0, |r| r.efficiency(&ion.species));
        for (b, beam) in sc.beams.iter().enumerate() {
            let (force, rate) = scattering_force(beam, &ion.velocity, beam.shift_for(&ion.species));
            let rate = rate * efficiency;
            ion.scattered += rate * dt;
            if sc.noise.photon_recoil {
                let mean = rate * dt;
                if mean > 0.0 {
                    let n = Poisson::new(mean)
                        .map_err(|e| DynamicsError::Scenario(format!("photon number: {e}")))?
                        .sample(&mut state.rng) as u64;
                    if n > 0 {
                        let p = HBAR * beam.wavenumber();
                        let kick = beam.direction * (n as f64 * p);
                        ion.velocity += kick / m;
                        state.photons.counts[b] += n;
                        state.photons.absorption_impulse[b] += kick;
                        for _ in 0..n {
                            ion.velocity += random_unit(&mut state.rng) * (p / m);
                        }
                    }
                }
            } else {
                ion.velocity += force * (efficiency * dt / m);
            }
        }
        if sc.noise.heating_rate > 0.0 {
            let sigma = (2.0 * BOLTZMANN * sc.noise.heating_rate * dt / m).sqrt();
            for c in 0..3 {
                let g: f64 = StandardNormal.sample(&mut state.rng);
                ion.velocity[c] += sigma * g;
            }
        }
    }
    state.time = t1;
    if state
        .ions
        .iter()
        .any(|i| !(i.position.iter().all(|x| x.is_finite()) && i.velocity.iter().all(|x| x.is_finite())))
    {
        return Err(DynamicsError::NonFinite(t1));
    }
    Ok(())
}
