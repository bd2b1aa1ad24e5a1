//! Crystallization, melting, hopping and loss detection on trajectory frames.

use std::collections::VecDeque;
use std::io::Write;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{DynamicsError, SimState};
use crate::constants::{value, BOLTZMANN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Crystallized,
    Melt,
    Hop,
    Loss,
    Injected,
}

/// One log entry; serialized as a JSON line `{time, type, ions, details}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    /// s.
    pub time: f64,
    #[serde(rename = "type")]
    pub kind: EventKind,
    pub ions: Vec<usize>,
    pub details: serde_json::Value,
}

impl Event {
    pub fn loss(time: f64, id: usize, species: &str, cause: &str) -> Self {
        Self {
            time,
            kind: EventKind::Loss,
            ions: vec![id],
            details: json!({ "species": species, "cause": cause }),
        }
    }
}

/// Detection thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventThresholds {
    /// A new ordering or phase must hold this long, s.
    pub persist: f64,
    /// Length of the sliding temperature window, s.
    pub window: f64,
    /// Kinetic temperature above which the crystal counts as melted, K.
    pub melt_temperature: f64,
}

impl EventThresholds {
    /// Registry defaults, with times in units of the axial period.
    pub fn for_axial_frequency(f_axial: f64) -> Self {
        Self {
            persist: value("md_persist_periods") / f_axial,
            window: value("md_window_periods") / f_axial,
            melt_temperature: value("md_crystal_temperature_k"),
        }
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        if !(self.persist >= 0.0 && self.window > 0.0 && self.melt_temperature > 0.0) {
            return Err(DynamicsError::Scenario(
                "event thresholds need persist >= 0, window > 0 and a positive melt temperature".into(),
            ));
        }
        Ok(())
    }

    /// Kinetic energy of one ion at the melt temperature, J.
    pub fn energy_threshold(&self) -> f64 {
        1.5 * BOLTZMANN * self.melt_temperature
    }
}

/// Snapshot of all ions at one time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub time: f64,
    pub ids: Vec<usize>,
    pub species: Vec<String>,
    pub masses: Vec<f64>,
    pub positions: Vec<Vector3<f64>>,
    pub velocities: Vec<Vector3<f64>>,
}

impl Frame {
    pub fn of(state: &SimState) -> Self {
        Self {
            time: state.time,
            ids: state.ions.iter().map(|i| i.id).collect(),
            species: state.ions.iter().map(|i| i.species.name.clone()).collect(),
            masses: state.ions.iter().map(|i| i.species.mass).collect(),
            positions: state.ions.iter().map(|i| i.position).collect(),
            velocities: state.ions.iter().map(|i| i.velocity).collect(),
        }
    }

    /// `sum m v^2 / (3 N k_B)`; None for an empty frame.
    pub fn temperature(&self) -> Option<f64> {
        if self.ids.is_empty() {
            return None;
        }
        let twice_ke: f64 = self.masses.iter().zip(&self.velocities).map(|(m, v)| m * v.norm_squared()).sum();
        Some(twice_ke / (3.0 * self.ids.len() as f64 * BOLTZMANN))
    }

    /// Ion ids sorted along `axis`, ties broken by id.
    pub fn ordering(&self, axis: &Vector3<f64>) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.ids.len()).collect();
        idx.sort_by(|&a, &b| {
            axis.dot(&self.positions[a])
                .total_cmp(&axis.dot(&self.positions[b]))
                .then(self.ids[a].cmp(&self.ids[b]))
        });
        idx.into_iter().map(|i| self.ids[i]).collect()
    }
}

/// Streaming detector; feed frames in time order.
#[derive(Debug, Clone)]
pub struct EventDetector {
    thresholds: EventThresholds,
    axis: Vector3<f64>,
    report_losses: bool,
    window: VecDeque<(f64, f64)>,
    window_sum: f64,
    melted: bool,
    candidate: Option<f64>,
    order: Option<Vec<usize>>,
    pending: Option<(Vec<usize>, f64)>,
    last_ids: Vec<usize>,
}

impl EventDetector {
    /// `axis` is the chain axis used for ordering. With `report_losses`, ions
    /// that disappear between frames produce loss events; a simulation that
    /// logs losses itself should leave it off.
    pub fn new(thresholds: EventThresholds, axis: Vector3<f64>, report_losses: bool) -> Self {
        Self {
            thresholds,
            axis: axis.normalize(),
            report_losses,
            window: VecDeque::new(),
            window_sum: 0.0,
            melted: false,
            candidate: None,
            order: None,
            pending: None,
            last_ids: Vec::new(),
        }
    }

    pub fn is_melted(&self) -> bool {
        self.melted
    }

    /// Mean kinetic temperature over the current window, K.
    pub fn window_temperature(&self) -> Option<f64> {
        (!self.window.is_empty()).then(|| self.window_sum / self.window.len() as f64)
    }

    pub fn observe(&mut self, frame: &Frame) -> Vec<Event> {
        let mut out = Vec::new();
        let t = frame.time;

        if self.report_losses {
            for id in &self.last_ids {
                if !frame.ids.contains(id) {
                    out.push(Event {
                        time: t,
                        kind: EventKind::Loss,
                        ions: vec![*id],
                        details: json!({ "cause": "absent from frame" }),
                    });
                }
            }
        }
        self.last_ids.clone_from(&frame.ids);

        let order = frame.ordering(&self.axis);
        let same_set = self
            .order
            .as_ref()
            .is_some_and(|o| o.len() == order.len() && o.iter().all(|id| order.contains(id)));
        if !same_set {
            self.order = Some(order);
            self.pending = None;
        } else if self.order.as_ref() == Some(&order) {
            self.pending = None;
        } else {
            let since = match &self.pending {
                Some((p, since)) if *p == order => *since,
                _ => t,
            };
            if t - since >= self.thresholds.persist {
                let old = self.order.as_ref().expect("set above");
                let moved: Vec<usize> = order.iter().zip(old).filter(|(a, b)| a != b).map(|(a, _)| *a).collect();
                let mut ions = moved;
                ions.sort_unstable();
                out.push(Event {
                    time: t,
                    kind: EventKind::Hop,
                    ions,
                    details: json!({ "onset": since, "order": order }),
                });
                self.order = Some(order);
                self.pending = None;
            } else {
                self.pending = Some((order, since));
            }
        }

        if let Some(temp) = frame.temperature() {
            self.window.push_back((t, temp));
            self.window_sum += temp;
            while let Some(&(t0, v)) = self.window.front() {
                if t - t0 > self.thresholds.window {
                    self.window.pop_front();
                    self.window_sum -= v;
                } else {
                    break;
                }
            }
            let mean = self.window_sum / self.window.len() as f64;
            let crossing = if self.melted {
                mean <= self.thresholds.melt_temperature
            } else {
                mean > self.thresholds.melt_temperature
            };
            if crossing {
                let since = *self.candidate.get_or_insert(t);
                if t - since >= self.thresholds.persist {
                    self.melted = !self.melted;
                    self.candidate = None;
                    out.push(Event {
                        time: t,
                        kind: if self.melted { EventKind::Melt } else { EventKind::Crystallized },
                        ions: frame.ids.clone(),
                        details: json!({ "onset": since, "temperature_k": mean }),
                    });
                }
            } else {
                self.candidate = None;
            }
        }
        out
    }
}

/// Runs a fresh detector over a recorded trajectory, losses included.
pub fn detect_events(frames: &[Frame], thresholds: &EventThresholds, axis: &Vector3<f64>) -> Vec<Event> {
    let mut det = EventDetector::new(*thresholds, *axis, true);
    frames.iter().flat_map(|f| det.observe(f)).collect()
}

/// One JSON object per line.
pub fn write_events_jsonl<W: Write>(events: &[Event], mut out: W) -> std::io::Result<()> {
    for e in events {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
