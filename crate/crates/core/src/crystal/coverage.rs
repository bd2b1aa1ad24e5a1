//! Sympathetic-cooling reach of a set of coolant ions.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{equilibrium_positions, normal_modes, ChainTrap, CrystalError, ModeSpectrum};
use crate::isotopes::Isotope;

/// Chains up to this many ions have every coolant placement enumerated.
pub const EXHAUSTIVE_LIMIT: usize = 12;

/// Which normal modes must be cooled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeSet {
    /// Modes along the chain axis only.
    #[default]
    Axial,
    /// All 3N modes.
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    /// Direction of each mode, in the order axial, radial_x, radial_y.
    pub directions: Vec<String>,
    /// rad/s.
    pub frequencies: Vec<f64>,
    /// Per-mode damping, 1/s.
    pub damping: Vec<f64>,
    pub coolable: Vec<bool>,
    pub heating_rate: f64,
    pub minimum: f64,
    /// Index of the least-damped mode.
    pub bottleneck: usize,
}

impl CoverageReport {
    pub fn all_coolable(&self) -> bool {
        self.coolable.iter().all(|&c| c)
    }
}

/// Mode damping `gamma_m = per_coolant_damping * sum_{i in coolants} b_{i,m}^2`
/// for every mode in `modes`; a mode is coolable when `gamma_m > heating_rate`.
pub fn mode_coverage(
    spectrum: &ModeSpectrum,
    coolant_indices: &[usize],
    per_coolant_damping: f64,
    heating_rate: f64,
    modes: ModeSet,
) -> Result<CoverageReport, CrystalError> {
    if !(per_coolant_damping > 0.0) {
        return Err(CrystalError::Domain("per-coolant damping must be positive".into()));
    }
    if !(heating_rate >= 0.0) {
        return Err(CrystalError::Domain("heating rate must be non-negative".into()));
    }
    let n = spectrum.axial.len();
    let mut seen = vec![false; n];
    for &i in coolant_indices {
        if i >= n {
            return Err(CrystalError::Input(format!("coolant index {i} outside a {n}-ion chain")));
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(CrystalError::Input(format!("coolant index {i} listed twice")));
        }
    }
    let mut report = CoverageReport {
        directions: Vec::with_capacity(3 * n),
        frequencies: Vec::with_capacity(3 * n),
        damping: Vec::with_capacity(3 * n),
        coolable: Vec::with_capacity(3 * n),
        heating_rate,
        minimum: f64::INFINITY,
        bottleneck: 0,
    };
    let blocks = spectrum.blocks();
    let selected = match modes {
        ModeSet::Axial => &blocks[..1],
        ModeSet::All => &blocks[..],
    };
    for (name, block) in selected {
        for m in 0..block.len() {
            let share: f64 = coolant_indices.iter().map(|&i| block.vectors[(i, m)].powi(2)).sum();
            let gamma = per_coolant_damping * share;
            if gamma < report.minimum {
                report.minimum = gamma;
                report.bottleneck = report.damping.len();
            }
            report.directions.push(name.to_string());
            report.frequencies.push(block.frequencies[m]);
            report.damping.push(gamma);
            report.coolable.push(gamma > heating_rate);
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanVerdict {
    /// Stopped at the first sympathetic-ion count with no coolable placement.
    HeatingLimited,
    /// Stopped because every placement of the next chain was structurally unstable.
    StructuralLimit,
    /// Every count up to the scan limit was coolable.
    ScanLimit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanEntry {
    pub sc_ions: usize,
    /// Chain positions (0-based along +z) holding coolants in the best placement.
    pub placement: Vec<usize>,
    pub min_coverage: f64,
    pub coolable: bool,
    pub exhaustive: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainScan {
    pub n_max: usize,
    pub verdict: ScanVerdict,
    pub entries: Vec<ScanEntry>,
}

#[allow(clippy::too_many_arguments)]
fn placement_coverage(
    placement: &[usize],
    total: usize,
    coolant: &Isotope,
    sc: &Isotope,
    trap: &ChainTrap,
    damping: f64,
    heating: f64,
    modes: ModeSet,
) -> Result<CoverageReport, CrystalError> {
    let species: Vec<Isotope> = (0..total)
        .map(|i| if placement.contains(&i) { coolant.clone() } else { sc.clone() })
        .collect();
    let chain = equilibrium_positions(&species, trap)?;
    mode_coverage(&normal_modes(&chain)?, placement, damping, heating, modes)
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, k, &mut Vec::with_capacity(k), &mut out);
    out
}

/// Higher coverage wins; equal coverage goes to the lexicographically smaller
/// placement, so the reduction is independent of evaluation order.
fn better(a: (f64, Vec<usize>), b: (f64, Vec<usize>)) -> (f64, Vec<usize>) {
    match a.0.total_cmp(&b.0) {
        std::cmp::Ordering::Greater => a,
        std::cmp::Ordering::Less => b,
        std::cmp::Ordering::Equal => {
            if a.1 <= b.1 {
                a
            } else {
                b
            }
        }
    }
}

/// Largest number of sympathetically cooled ions that `coolant_count`
/// coolants keep coolable, scanning N = 1, 2, ... up to `scan_limit`.
///
/// For each N the best placement maximizes the minimum mode damping. Chains
/// of up to [`EXHAUSTIVE_LIMIT`] ions are searched exhaustively in parallel;
/// longer chains place coolants greedily one at a time. Placements that are
/// structurally unstable are skipped. The scan stops at the first N with no
/// coolable placement.
#[allow(clippy::too_many_arguments)]
pub fn max_coolable_chain(
    coolant: &Isotope,
    coolant_count: usize,
    sc: &Isotope,
    trap: &ChainTrap,
    damping: f64,
    heating: f64,
    modes: ModeSet,
    scan_limit: usize,
) -> Result<ChainScan, CrystalError> {
    if coolant_count == 0 {
        return Err(CrystalError::Domain("need at least one coolant".into()));
    }
    let mut entries = Vec::new();
    let mut n_max = 0;
    for n in 1..=scan_limit {
        let total = n + coolant_count;
        let exhaustive = total <= EXHAUSTIVE_LIMIT;
        let best = if exhaustive {
            combinations(total, coolant_count)
                .into_par_iter()
                .filter_map(|p| {
                    placement_coverage(&p, total, coolant, sc, trap, damping, heating, modes)
                        .ok()
                        .map(|r| (r.minimum, p))
                })
                .reduce_with(better)
        } else {
            let mut chosen: Vec<usize> = Vec::new();
            let mut last = None;
            for _ in 0..coolant_count {
                let step = (0..total)
                    .into_par_iter()
                    .filter(|p| !chosen.contains(p))
                    .filter_map(|p| {
                        let mut trial = chosen.clone();
                        trial.push(p);
                        trial.sort_unstable();
                        placement_coverage(&trial, total, coolant, sc, trap, damping, heating, modes)
                            .ok()
                            .map(|r| (r.minimum, trial))
                    })
                    .reduce_with(better);
                match step {
                    Some((cov, trial)) => {
                        chosen = trial.clone();
                        last = Some((cov, trial));
                    }
                    None => {
                        last = None;
                        break;
                    }
                }
            }
            last
        };
        let Some((min_coverage, placement)) = best else {
            if n_max == 0 {
                return Err(CrystalError::StructuralTransition { ions: total, ratio: 0.0 });
            }
            return Ok(ChainScan { n_max, verdict: ScanVerdict::StructuralLimit, entries });
        };
        let coolable = min_coverage > heating;
        entries.push(ScanEntry {
            sc_ions: n,
            placement,
            min_coverage,
            coolable,
            exhaustive,
        });
        if !coolable {
            return Ok(ChainScan { n_max, verdict: ScanVerdict::HeatingLimited, entries });
        }
        n_max = n;
    }
    Ok(ChainScan { n_max, verdict: ScanVerdict::ScanLimit, entries })
}
