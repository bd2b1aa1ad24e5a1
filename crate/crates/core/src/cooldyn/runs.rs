//! Loading, sympathetic-cooling and protocol runs, and seeded ensembles.

use std::collections::VecDeque;
use std::io::Write;

use nalgebra::Vector3;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{
    step, CoolingScenario, DynamicsError, Event, EventDetector, EventKind, Frame, InjectionSource, Ion, SimState,
    TrapField,
};
use crate::beamline::{most_probable_beam_speed, sample_atom, Aperture, BeamModel, OvenGeometry};
use crate::constants::{value, BOLTZMANN};
use crate::crystal::equilibrium_positions;
use crate::isotopes::Isotope;

/// Ions at rest at the crystal equilibrium of `species` (ordered along the
/// chain axis), with ids 0, 1, ...
pub fn crystallized_chain(trap: &TrapField, species: &[Isotope]) -> Result<Vec<Ion>, DynamicsError> {
    if species.is_empty() {
        return Ok(Vec::new());
    }
    let chain = equilibrium_positions(species, &trap.chain_trap(&species[0])?)?;
    let [ex, ey, ez] = trap.axes();
    Ok(chain
        .positions
        .iter()
        .zip(species)
        .enumerate()
        .map(|(id, (p, s))| Ion::at_rest(id, s.clone(), ex * p.x + ey * p.y + ez * p.z))
        .collect())
}

/// Adds the scenario's injected ion to `state` and returns its id.
pub fn inject(state: &mut SimState, sc: &CoolingScenario) -> Result<usize, DynamicsError> {
    let species = &sc.injection.species;
    let (position, velocity) = match &sc.injection.source {
        InjectionSource::Fixed { position, velocity } => (*position, *velocity),
        InjectionSource::Beam { energy_ratio, offset } => {
            let oven = OvenGeometry::default();
            let aperture = Aperture::default();
            let beam = BeamModel::from_geometry(&oven, &aperture, species)?;
            let atom = sample_atom(&beam, &oven, &aperture, &mut state.rng);
            let v_mp = most_probable_beam_speed(oven.temperature, species.mass)?;
            let depth = sc.trap.depth(species, sc.escape_radius)?;
            let scale = (2.0 * energy_ratio * depth / species.mass).sqrt() / v_mp;
            let [ex, ey, ez] = sc.trap.beam_frame();
            let to_sim = |v: &Vector3<f64>| ex * v.x + ey * v.y + ez * v.z;
            (to_sim(&atom.position) - ez * *offset, to_sim(&atom.velocity) * scale)
        }
    };
    let id = state.add_ion(species.clone(), position, velocity);
    let energy = 0.5 * species.mass * velocity.norm_squared();
    state.events.push(Event {
        time: state.time,
        kind: EventKind::Injected,
        ions: vec![id],
        details: json!({ "species": species.name, "kinetic_energy_j": energy }),
    });
    Ok(id)
}

/// Sliding mean over a fixed time span.
#[derive(Debug, Clone)]
struct WindowMean {
    span: f64,
    samples: VecDeque<(f64, f64)>,
    sum: f64,
}

impl WindowMean {
    fn new(span: f64) -> Self {
        Self {
            span,
            samples: VecDeque::new(),
            sum: 0.0,
        }
    }

    fn push(&mut self, t: f64, v: f64) -> f64 {
        self.samples.push_back((t, v));
        self.sum += v;
        while let Some(&(t0, v0)) = self.samples.front() {
            if t - t0 > self.span {
                self.samples.pop_front();
                self.sum -= v0;
            } else {
                break;
            }
        }
        self.sum / self.samples.len() as f64
    }
}

/// Steps `state` for `duration`, feeding every `decimation`-th frame to the
/// detector and to `observe`; stops early when `observe` returns false.
fn advance<F: FnMut(&SimState) -> bool>(
    state: &mut SimState,
    sc: &CoolingScenario,
    duration: f64,
    detector: &mut EventDetector,
    mut frames: Option<&mut Vec<Frame>>,
    mut observe: F,
) -> Result<(), DynamicsError> {
    for i in 1..=sc.steps_for(duration) {
        step(state, sc)?;
        if i % sc.decimation == 0 {
            let frame = Frame::of(state);
            let found = detector.observe(&frame);
            state.events.extend(found);
            if let Some(f) = frames.as_deref_mut() {
                f.push(frame);
            }
            if !observe(state) {
                break;
            }
        }
    }
    Ok(())
}

fn start_detector(state: &mut SimState, sc: &CoolingScenario, frames: Option<&mut Vec<Frame>>) -> EventDetector {
    let mut det = EventDetector::new(sc.thresholds, sc.trap.chain_axis(), false);
    let frame = Frame::of(state);
    state.events.extend(det.observe(&frame));
    if let Some(f) = frames {
        f.push(frame);
    }
    det
}

/// Position and velocity of one ion at the end of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IonSnapshot {
    pub id: usize,
    pub species: String,
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
}

fn snapshot(state: &SimState) -> Vec<IonSnapshot> {
    state
        .ions
        .iter()
        .map(|i| IonSnapshot {
            id: i.id,
            species: i.species.name.clone(),
            position: i.position,
            velocity: i.velocity,
        })
        .collect()
}

/// Recorded frames of a run, when requested.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Recording {
    pub frames: Vec<Frame>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadReport {
    pub coolants_loaded: usize,
    pub survivors: usize,
    pub crystallized: bool,
    /// First time the sliding-window temperature fell below the threshold, s.
    pub crystallization_time: Option<f64>,
    /// Sliding-window temperature at the end, K.
    pub final_temperature: f64,
    pub events: Vec<Event>,
    pub final_ions: Vec<IonSnapshot>,
    #[serde(skip)]
    pub recording: Option<Recording>,
}

fn thermal_velocities(state: &mut SimState, temperature: f64) {
    for ion in &mut state.ions {
        let sigma = (BOLTZMANN * temperature / ion.species.mass).sqrt();
        for c in 0..3 {
            let g: f64 = StandardNormal.sample(&mut state.rng);
            ion.velocity[c] = sigma * g;
        }
    }
}

/// Coolant ions start at their crystal sites with a thermal velocity spread
/// at the registry's load temperature and are laser cooled for `duration`.
fn load_into(
    state: &mut SimState,
    sc: &CoolingScenario,
    duration: f64,
    frames: Option<&mut Vec<Frame>>,
) -> Result<(bool, Option<f64>, f64), DynamicsError> {
    thermal_velocities(state, value("md_load_temperature_k"));
    let mut frames = frames;
    let mut det = start_detector(state, sc, frames.as_deref_mut());
    let threshold = sc.thresholds.melt_temperature;
    let mut window = WindowMean::new(sc.thresholds.window);
    let mut crystallized_at = None;
    let mut last = window.push(state.time, Frame::of(state).temperature().unwrap_or(0.0));
    advance(state, sc, duration, &mut det, frames, |s| {
        last = window.push(s.time, Frame::of(s).temperature().unwrap_or(0.0));
        if crystallized_at.is_none() && last < threshold {
            crystallized_at = Some(s.time);
        }
        true
    })?;
    Ok((last < threshold && !state.ions.is_empty(), crystallized_at, last))
}

/// Loads and laser cools the scenario's coolant ions.
pub fn run_load(sc: &CoolingScenario, stream: u64, record: bool) -> Result<LoadReport, DynamicsError> {
    sc.validate()?;
    let chain = crystallized_chain(&sc.trap, &vec![sc.coolant.clone(); sc.coolant_count])?;
    let mut state = SimState::new(chain, sc.seed, stream);
    let mut frames = record.then(Vec::new);
    let (crystallized, crystallization_time, final_temperature) =
        load_into(&mut state, sc, sc.duration, frames.as_mut())?;
    Ok(LoadReport {
        coolants_loaded: sc.coolant_count,
        survivors: state.ions.len(),
        crystallized,
        crystallization_time,
        final_temperature,
        events: state.events.clone(),
        final_ions: snapshot(&state),
        recording: frames.map(|frames| Recording { frames }),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SympatheticReport {
    pub hot_id: usize,
    /// The hot ion cooled below the threshold and every ion is still trapped.
    pub captured: bool,
    /// First time the hot ion's sliding-window kinetic energy fell below the
    /// threshold, s.
    pub cooling_time: Option<f64>,
    pub coolants_survived: bool,
    pub hot_ion_survived: bool,
    pub failure: Option<String>,
    /// J.
    pub injection_energy: f64,
    /// J.
    pub trap_depth: f64,
    pub simulated_time: f64,
    pub events: Vec<Event>,
    pub final_ions: Vec<IonSnapshot>,
    #[serde(skip)]
    pub recording: Option<Recording>,
}

fn sympathetic_into(
    state: &mut SimState,
    sc: &CoolingScenario,
    duration: f64,
    frames: Option<&mut Vec<Frame>>,
    stop_when_cooled: bool,
) -> Result<SympatheticReport, DynamicsError> {
    let coolant_ids: Vec<usize> = state.ions.iter().map(|i| i.id).collect();
    let threshold = sc.thresholds.energy_threshold();
    let start = state.time;
    let hot = inject(state, sc)?;
    let injection_energy = state.ion(hot).map_or(0.0, Ion::kinetic_energy);
    let mut frames = frames;
    let mut det = start_detector(state, sc, frames.as_deref_mut());
    let mut window = WindowMean::new(sc.thresholds.window);
    let mut cooling_time = (window.push(state.time, injection_energy) < threshold).then_some(0.0);
    let mut coolant_lost_first = false;
    if !(stop_when_cooled && cooling_time.is_some()) {
        advance(state, sc, duration, &mut det, frames, |s| {
            let Some(ion) = s.ion(hot) else { return false };
            if !coolant_ids.iter().all(|id| s.ion(*id).is_some()) {
                coolant_lost_first = cooling_time.is_none();
                return false;
            }
            let mean = window.push(s.time, ion.kinetic_energy());
            if cooling_time.is_none() && mean < threshold {
                cooling_time = Some(s.time - start);
                return !stop_when_cooled;
            }
            true
        })?;
    }
    let hot_ion_survived = state.ion(hot).is_some();
    let coolants_survived = coolant_ids.iter().all(|id| state.ion(*id).is_some());
    let failure = if coolant_lost_first {
        Some("coolant lost before capture".to_string())
    } else if !hot_ion_survived {
        Some("sympathetic ion lost".to_string())
    } else if !coolants_survived {
        Some("coolant lost after capture".to_string())
    } else if cooling_time.is_none() {
        Some("not cooled within the run".to_string())
    } else {
        None
    };
    Ok(SympatheticReport {
        hot_id: hot,
        captured: failure.is_none(),
        cooling_time,
        coolants_survived,
        hot_ion_survived,
        failure,
        injection_energy,
        trap_depth: sc.trap.depth(&sc.injection.species, sc.escape_radius)?,
        simulated_time: state.time - start,
        events: state.events.clone(),
        final_ions: snapshot(state),
        recording: None,
    })
}

fn sympathetic(
    sc: &CoolingScenario,
    stream: u64,
    record: bool,
    stop_when_cooled: bool,
) -> Result<SympatheticReport, DynamicsError> {
    sc.validate()?;
    let chain = crystallized_chain(&sc.trap, &vec![sc.coolant.clone(); sc.coolant_count])?;
    let mut state = SimState::new(chain, sc.seed, stream);
    let mut frames = record.then(Vec::new);
    let mut report = sympathetic_into(&mut state, sc, sc.duration, frames.as_mut(), stop_when_cooled)?;
    report.recording = frames.map(|frames| Recording { frames });
    Ok(report)
}

/// Injects the scenario's hot ion next to a crystallized coolant chain at
/// rest and follows it for the full duration.
pub fn run_sympathetic(sc: &CoolingScenario, stream: u64, record: bool) -> Result<SympatheticReport, DynamicsError> {
    sympathetic(sc, stream, record, false)
}

/// The same injection, but the injected ion is of the coolant species, alone
/// and laser cooled directly; stops once it is cold.
pub fn laser_cooling_reference(sc: &CoolingScenario, stream: u64) -> Result<SympatheticReport, DynamicsError> {
    let mut direct = sc.clone();
    direct.coolant_count = 0;
    direct.injection.species = sc.coolant.clone();
    sympathetic(&direct, stream, false, true)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapturePoint {
    pub energy_ratio: f64,
    pub trials: usize,
    pub captured: usize,
    pub coolant_losses: usize,
    pub hot_losses: usize,
    /// Mean over captured trajectories, s.
    pub mean_cooling_time: Option<f64>,
}

impl CapturePoint {
    pub fn probability(&self) -> f64 {
        self.captured as f64 / self.trials as f64
    }
}

/// Capture statistics versus injection energy. Trajectory `i` uses stream
/// `i` at every energy, so the energies share their random numbers.
pub fn capture_ensemble(sc: &CoolingScenario, energy_ratios: &[f64], trials: usize) -> Result<Vec<CapturePoint>, DynamicsError> {
    energy_ratios
        .iter()
        .map(|&ratio| {
            let mut s = sc.clone();
            match &mut s.injection.source {
                InjectionSource::Beam { energy_ratio, .. } => *energy_ratio = ratio,
                InjectionSource::Fixed { .. } => {
                    return Err(DynamicsError::Scenario("energy sweep needs a beam injection source".into()))
                }
            }
            let runs: Vec<SympatheticReport> = (0..trials as u64)
                .into_par_iter()
                .map(|i| sympathetic(&s, i, false, true))
                .collect::<Result<_, _>>()?;
            let times: Vec<f64> = runs.iter().filter(|r| r.captured).filter_map(|r| r.cooling_time).collect();
            Ok(CapturePoint {
                energy_ratio: ratio,
                trials,
                captured: runs.iter().filter(|r| r.captured).count(),
                coolant_losses: runs.iter().filter(|r| !r.coolants_survived).count(),
                hot_losses: runs.iter().filter(|r| !r.hot_ion_survived).count(),
                mean_cooling_time: (!times.is_empty()).then(|| times.iter().sum::<f64>() / times.len() as f64),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HopPoint {
    /// K/s.
    pub heating_rate: f64,
    pub trials: usize,
    pub hops: usize,
    pub melts: usize,
    pub losses: usize,
    /// Hops per second per trajectory.
    pub rate: f64,
}

/// Hop statistics of a crystallized chain of `species` versus heating rate.
pub fn hop_ensemble(
    sc: &CoolingScenario,
    species: &[Isotope],
    heating_rates: &[f64],
    trials: usize,
) -> Result<Vec<HopPoint>, DynamicsError> {
    if species.len() < 2 {
        return Err(DynamicsError::Scenario("hopping needs at least two ions".into()));
    }
    let chain = crystallized_chain(&sc.trap, species)?;
    heating_rates
        .iter()
        .map(|&rate| {
            let mut s = sc.clone();
            s.noise.heating_rate = rate;
            s.validate()?;
            let logs: Vec<Vec<Event>> = (0..trials as u64)
                .into_par_iter()
                .map(|i| {
                    let mut state = SimState::new(chain.clone(), s.seed, i);
                    let mut det = start_detector(&mut state, &s, None);
                    advance(&mut state, &s, s.duration, &mut det, None, |_| true)?;
                    Ok(state.events)
                })
                .collect::<Result<_, DynamicsError>>()?;
            let count = |k: EventKind| logs.iter().flatten().filter(|e| e.kind == k).count();
            let hops = count(EventKind::Hop);
            Ok(HopPoint {
                heating_rate: rate,
                trials,
                hops,
                melts: count(EventKind::Melt),
                losses: count(EventKind::Loss),
                rate: hops as f64 / (trials as f64 * s.duration),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    /// Load and crystallize the coolant ions.
    Load,
    /// Inject the hot ion with beams tuned to the coolant.
    Inject,
    /// Retune beams to the sympathetic isotope and see which ions scatter.
    Identify,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolStage {
    pub name: String,
    pub kind: StageKind,
    /// s.
    pub duration: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    pub stages: Vec<ProtocolStage>,
}

impl Protocol {
    /// Load and identify stages of registry length; the inject stage runs for
    /// the scenario duration.
    pub fn standard(sc: &CoolingScenario) -> Result<Self, DynamicsError> {
        let short = value("md_stage_periods") / sc.trap.axial_frequency(&sc.coolant)?;
        let stage = |name: &str, kind, duration| ProtocolStage {
            name: name.into(),
            kind,
            duration,
        };
        Ok(Self {
            stages: vec![
                stage("load coolant", StageKind::Load, short),
                stage("inject", StageKind::Inject, sc.duration),
                stage("identify", StageKind::Identify, short),
            ],
        })
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        let kinds: Vec<StageKind> = self.stages.iter().map(|s| s.kind).collect();
        if kinds != [StageKind::Load, StageKind::Inject, StageKind::Identify] {
            return Err(DynamicsError::Scenario("protocol stages must be load, inject, identify in that order".into()));
        }
        if let Some(s) = self.stages.iter().find(|s| !(s.duration > 0.0)) {
            return Err(DynamicsError::Scenario(format!("stage `{}` needs a positive duration", s.name)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IonFluorescence {
    pub id: usize,
    pub species: String,
    /// Time-averaged scattering rate over the stage, 1/s.
    pub mean_rate: f64,
    pub fluorescing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    /// 1-based.
    pub index: usize,
    pub name: String,
    pub kind: StageKind,
    pub duration: f64,
    pub lost: Vec<usize>,
    pub crystallized: bool,
    pub fluorescence: Vec<IonFluorescence>,
    pub verdict: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub stages: Vec<StageReport>,
    pub captured: bool,
    pub cooling_time: Option<f64>,
    /// The sympathetic ion scatters under the retuned beams and no coolant does.
    pub identified: bool,
    pub sympathetic_id: usize,
    /// Coolant scattering rate under coolant-tuned beams divided by the rate
    /// under retuned beams, per coolant.
    pub coolant_rate_drop: Vec<f64>,
    pub events: Vec<Event>,
    pub final_ions: Vec<IonSnapshot>,
}

fn fluorescence(state: &SimState, duration: f64, reference_rate: f64) -> Vec<IonFluorescence> {
    let cut = value("md_scatter_fraction") * reference_rate;
    state
        .ions
        .iter()
        .map(|i| {
            let mean_rate = i.scattered / duration;
            IonFluorescence {
                id: i.id,
                species: i.species.name.clone(),
                mean_rate,
                fluorescing: mean_rate >= cut,
            }
        })
        .collect()
}

fn lost_since(before: &[usize], state: &SimState) -> Vec<usize> {
    before.iter().copied().filter(|id| state.ion(*id).is_none()).collect()
}

/// Runs load, inject and identify in sequence on one trajectory.
pub fn run_protocol(sc: &CoolingScenario, protocol: &Protocol, stream: u64) -> Result<ProtocolReport, DynamicsError> {
    sc.validate()?;
    protocol.validate()?;
    let [load, inj, ident] = [&protocol.stages[0], &protocol.stages[1], &protocol.stages[2]];
    let abort = |stage: usize, s: &ProtocolStage, reason: &str| DynamicsError::ProtocolAbort {
        stage,
        name: s.name.clone(),
        reason: reason.into(),
    };
    let reference_rate = sc.resonant_rate();
    let chain = crystallized_chain(&sc.trap, &vec![sc.coolant.clone(); sc.coolant_count])?;
    let coolant_ids: Vec<usize> = chain.iter().map(|i| i.id).collect();
    let mut state = SimState::new(chain, sc.seed, stream);
    let mut stages = Vec::new();

    let (crystallized, _, temperature) = load_into(&mut state, sc, load.duration, None)?;
    let lost = lost_since(&coolant_ids, &state);
    let f1 = fluorescence(&state, load.duration, reference_rate);
    stages.push(StageReport {
        index: 1,
        name: load.name.clone(),
        kind: load.kind,
        duration: load.duration,
        crystallized,
        verdict: format!(
            "{} of {} coolants kept; window temperature {:.3e} K",
            coolant_ids.len() - lost.len(),
            coolant_ids.len(),
            temperature
        ),
        lost,
        fluorescence: f1,
    });
    if state.ions.is_empty() || !crystallized {
        return Err(abort(2, inj, "no crystallized coolant"));
    }

    state.reset_scattering();
    let before: Vec<usize> = state.ions.iter().map(|i| i.id).collect();
    let symp = sympathetic_into(&mut state, sc, inj.duration, None, false)?;
    let hot = symp.hot_id;
    let f2 = fluorescence(&state, inj.duration, reference_rate);
    stages.push(StageReport {
        index: 2,
        name: inj.name.clone(),
        kind: inj.kind,
        duration: inj.duration,
        lost: lost_since(&before, &state)
            .into_iter()
            .chain((!symp.hot_ion_survived).then_some(hot))
            .collect(),
        crystallized: symp.cooling_time.is_some(),
        fluorescence: f2.clone(),
        verdict: match &symp.failure {
            None => format!("captured; cooled after {:.3e} s", symp.cooling_time.unwrap_or(0.0)),
            Some(cause) => format!("not captured: {cause}"),
        },
    });
    if !symp.hot_ion_survived {
        return Err(abort(3, ident, "the sympathetic ion was not trapped"));
    }

    let retuned = sc.retuned(&sc.injection.species);
    state.reset_scattering();
    let before: Vec<usize> = state.ions.iter().map(|i| i.id).collect();
    let mut det = start_detector(&mut state, &retuned, None);
    advance(&mut state, &retuned, ident.duration, &mut det, None, |_| true)?;
    let f3 = fluorescence(&state, ident.duration, retuned.resonant_rate());
    let hot_fluoresces = f3.iter().any(|f| f.id == hot && f.fluorescing);
    let coolant_dark = f3.iter().filter(|f| f.id != hot).all(|f| !f.fluorescing);
    let identified = hot_fluoresces && coolant_dark;
    let coolant_rate_drop = f3
        .iter()
        .filter(|f| f.id != hot)
        .filter_map(|f| f2.iter().find(|g| g.id == f.id).map(|g| g.mean_rate / f.mean_rate))
        .collect();
    stages.push(StageReport {
        index: 3,
        name: ident.name.clone(),
        kind: ident.kind,
        duration: ident.duration,
        lost: lost_since(&before, &state),
        crystallized: !det.is_melted(),
        fluorescence: f3,
        verdict: if identified {
            format!("ion {hot} ({}) identified", sc.injection.species.name)
        } else {
            "sympathetic ion not identified".into()
        },
    });

    Ok(ProtocolReport {
        captured: symp.captured,
        cooling_time: symp.cooling_time,
        identified,
        sympathetic_id: hot,
        coolant_rate_drop,
        events: state.events.clone(),
        final_ions: snapshot(&state),
        stages,
    })
}

/// CSV with one row per ion per frame.
pub fn write_trajectory_csv<W: Write>(frames: &[Frame], mut out: W) -> std::io::Result<()> {
    writeln!(out, "time_s,id,species,x_m,y_m,z_m,vx_m_s,vy_m_s,vz_m_s")?;
    for f in frames {
        for k in 0..f.ids.len() {
            let (p, v) = (f.positions[k], f.velocities[k]);
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                f.time, f.ids[k], f.species[k], p.x, p.y, p.z, v.x, v.y, v.z
            )?;
        }
    }
    Ok(())
}
