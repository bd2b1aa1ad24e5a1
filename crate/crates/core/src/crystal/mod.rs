//! Linear Coulomb crystals of mixed isotopes: equilibrium structure, normal
//! modes, and how well a set of coolant ions reaches every mode.
//!
//! The chain axis is z; x and y are radial.

mod coverage;

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constants::{value, COULOMB};
use crate::isotopes::{ca40, Isotope};
use crate::trapmodel::SecularResult;

pub use coverage::{max_coolable_chain, mode_coverage, ChainScan, CoverageReport, ModeSet, ScanEntry, ScanVerdict, EXHAUSTIVE_LIMIT};

#[derive(Debug, Error, PartialEq)]
pub enum CrystalError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("equilibrium search did not converge after {iterations} iterations (gradient {gradient:e} N)")]
    NonConvergence { iterations: usize, gradient: f64, last: Vec<f64> },
    #[error("linear chain of {ions} ions is unstable toward a zigzag (radial mode at {ratio:.4} of the axial frequency)")]
    StructuralTransition { ions: usize, ratio: f64 },
    #[error("chain is not at equilibrium (gradient {0:e} N)")]
    NotAtEquilibrium(f64),
    #[error("input error: {0}")]
    Input(String),
}

/// Harmonic secular trap specified by the frequencies a reference mass sees.
///
/// The axial curvature is static and the same for every mass. Radially, the
/// pseudopotential part scales as 1/m while the static defocusing `-k_z/2`
/// does not.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChainTrap {
    pub reference_mass: f64,
    /// rad/s, for the reference mass.
    pub axial: f64,
    pub radial_x: f64,
    pub radial_y: f64,
}

impl ChainTrap {
    pub fn new(reference_mass: f64, axial: f64, radial_x: f64, radial_y: f64) -> Result<Self, CrystalError> {
        let t = Self { reference_mass, axial, radial_x, radial_y };
        if !(reference_mass > 0.0 && axial > 0.0 && radial_x > 0.0 && radial_y > 0.0) {
            return Err(CrystalError::Domain("trap frequencies and mass must be positive".into()));
        }
        Ok(t)
    }

    /// The registry's crystal trap for 40Ca+.
    pub fn standard() -> Self {
        let w = |name| 2.0 * PI * value(name);
        Self {
            reference_mass: ca40().mass,
            axial: w("crystal_axial_frequency_hz"),
            radial_x: w("crystal_radial_x_frequency_hz"),
            radial_y: w("crystal_radial_y_frequency_hz"),
        }
    }

    /// Harmonic approximation of a solved surface trap. The axis with the
    /// lowest frequency becomes the chain axis.
    pub fn from_secular(result: &SecularResult, mass: f64) -> Result<Self, CrystalError> {
        let mut f = result.frequencies;
        f.sort_by(f64::total_cmp);
        Self::new(mass, f[0], f[1], f[2])
    }

    /// Spring constants (x, y, z) in N/m for an ion of `mass`.
    pub fn curvature(&self, mass: f64) -> [f64; 3] {
        let kz = self.reference_mass * self.axial * self.axial;
        let radial = |w: f64| (self.reference_mass * w * w + 0.5 * kz) * self.reference_mass / mass - 0.5 * kz;
        [radial(self.radial_x), radial(self.radial_y), kz]
    }

    /// Natural length `(q^2 / 4 pi eps0 k_z)^(1/3)` for charge `q`.
    pub fn length_scale(&self, charge: f64) -> f64 {
        (COULOMB * charge * charge / self.curvature(self.reference_mass)[2]).cbrt()
    }
}

/// Ordered chain of ions at their equilibrium positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IonChain {
    pub species: Vec<Isotope>,
    pub trap: ChainTrap,
    pub positions: Vec<Vector3<f64>>,
}

const MAX_NEWTON: usize = 200;
/// Smallest allowed ratio of the softest radial mode to the axial frequency.
pub const ZIGZAG_MARGIN: f64 = 0.05;

impl IonChain {
    pub fn len(&self) -> usize {
        self.species.len()
    }

    pub fn is_empty(&self) -> bool {
        self.species.is_empty()
    }

    fn force_scale(&self) -> f64 {
        let q = self.species[0].charge;
        self.trap.curvature(self.trap.reference_mass)[2] * self.trap.length_scale(q)
    }

    pub fn energy(&self, positions: &[Vector3<f64>]) -> f64 {
        let mut e = 0.0;
        for (i, (s, p)) in self.species.iter().zip(positions).enumerate() {
            let k = self.trap.curvature(s.mass);
            e += 0.5 * (k[0] * p.x * p.x + k[1] * p.y * p.y + k[2] * p.z * p.z);
            for (t, r) in self.species.iter().zip(positions).skip(i + 1) {
                e += COULOMB * s.charge * t.charge / (p - r).norm();
            }
        }
        e
    }

    pub fn gradient(&self, positions: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
        let n = self.len();
        let mut g = vec![Vector3::zeros(); n];
        for i in 0..n {
            let k = self.trap.curvature(self.species[i].mass);
            let p = positions[i];
            g[i] += Vector3::new(k[0] * p.x, k[1] * p.y, k[2] * p.z);
            for j in i + 1..n {
                let r = p - positions[j];
                let d = r.norm();
                let f = COULOMB * self.species[i].charge * self.species[j].charge / (d * d * d) * r;
                g[i] -= f;
                g[j] += f;
            }
        }
        g
    }

    /// Full 3N x 3N Hessian of the potential energy, coordinates ordered
    /// (x0, y0, z0, x1, ...).
    pub fn hessian(&self) -> DMatrix<f64> {
        let n = self.len();
        let mut h = DMatrix::zeros(3 * n, 3 * n);
        for i in 0..n {
            let k = self.trap.curvature(self.species[i].mass);
            for a in 0..3 {
                h[(3 * i + a, 3 * i + a)] += k[a];
            }
            for j in i + 1..n {
                let r = self.positions[i] - self.positions[j];
                let d = r.norm();
                let c = COULOMB * self.species[i].charge * self.species[j].charge / d.powi(5);
                for a in 0..3 {
                    for b in 0..3 {
                        let delta = if a == b { d * d } else { 0.0 };
                        let v = c * (3.0 * r[a] * r[b] - delta);
                        h[(3 * i + a, 3 * i + b)] += v;
                        h[(3 * j + a, 3 * j + b)] += v;
                        h[(3 * i + a, 3 * j + b)] -= v;
                        h[(3 * j + a, 3 * i + b)] -= v;
                    }
                }
            }
        }
        h
    }

    pub fn gradient_norm(&self) -> f64 {
        self.gradient(&self.positions).iter().map(|g| g.norm_squared()).sum::<f64>().sqrt()
    }
}

/// Equilibrium of `species` (in chain order along +z) in `trap`.
///
/// Axial positions come from Newton's method with backtracking on the 1D
/// energy, the radial coordinates being zero by symmetry. The result is
/// rejected if any radial mode is soft (below `ZIGZAG_MARGIN` of the axial
/// frequency), which signals the approach of the zigzag transition.
pub fn equilibrium_positions(species: &[Isotope], trap: &ChainTrap) -> Result<IonChain, CrystalError> {
    let n = species.len();
    if n == 0 {
        return Err(CrystalError::Domain("chain needs at least one ion".into()));
    }
    let mut chain = IonChain {
        species: species.to_vec(),
        trap: *trap,
        positions: vec![Vector3::zeros(); n],
    };
    for s in species {
        if trap.curvature(s.mass).iter().any(|k| !(*k > 0.0)) {
            return Err(CrystalError::Domain(format!("{} is not confined by this trap", s.name)));
        }
    }
    let kz = trap.curvature(trap.reference_mass)[2];
    let ell = trap.length_scale(species[0].charge);
    // Standard approximation for the spread of an N-ion chain.
    let spacing = 2.0 * ell / (n as f64).powf(0.56);
    let mut z: Vec<f64> = (0..n).map(|i| spacing * (i as f64 - 0.5 * (n - 1) as f64)).collect();

    let pair = |i: usize, j: usize| COULOMB * species[i].charge * species[j].charge;
    let energy = |z: &[f64]| {
        let mut e = 0.0;
        for i in 0..n {
            e += 0.5 * kz * z[i] * z[i];
            for j in i + 1..n {
                e += pair(i, j) / (z[j] - z[i]);
            }
        }
        e
    };
    let ordered = |z: &[f64]| z.windows(2).all(|w| w[1] > w[0]);
    let tolerance = 1e-10 * kz * ell;
    let mut converged = false;
    let mut grad_norm = f64::INFINITY;
    for _ in 0..MAX_NEWTON {
        let mut g = DVector::from_iterator(n, z.iter().map(|zi| kz * zi));
        let mut h = DMatrix::from_diagonal_element(n, n, kz);
        for i in 0..n {
            for j in i + 1..n {
                let d = z[j] - z[i];
                let c = pair(i, j);
                g[i] += c / (d * d);
                g[j] -= c / (d * d);
                let k = 2.0 * c / (d * d * d);
                h[(i, i)] += k;
                h[(j, j)] += k;
                h[(i, j)] -= k;
                h[(j, i)] -= k;
            }
        }
        grad_norm = g.norm();
        if grad_norm < tolerance {
            converged = true;
            break;
        }
        let step = h.cholesky().map(|c| c.solve(&g)).unwrap_or_else(|| g.clone() / kz);
        let e0 = energy(&z);
        let mut t = 1.0;
        loop {
            let trial: Vec<f64> = z.iter().zip(step.iter()).map(|(zi, s)| zi - t * s).collect();
            if ordered(&trial) && energy(&trial) <= e0 - 1e-4 * t * g.dot(&step) {
                z = trial;
                break;
            }
            t *= 0.5;
            if t < 1e-12 {
                break;
            }
        }
        if t < 1e-12 {
            // No descent possible: the iterate is stationary to rounding.
            converged = grad_norm < 1e3 * tolerance;
            break;
        }
    }
    if !converged {
        return Err(CrystalError::NonConvergence {
            iterations: MAX_NEWTON,
            gradient: grad_norm,
            last: z,
        });
    }
    chain.positions = z.iter().map(|&zi| Vector3::new(0.0, 0.0, zi)).collect();

    let modes = normal_modes_unchecked(&chain);
    let softest = modes
        .radial_x
        .frequencies
        .iter()
        .chain(&modes.radial_y.frequencies)
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let ratio = softest / trap.axial;
    if !(ratio >= ZIGZAG_MARGIN) {
        return Err(CrystalError::StructuralTransition { ions: n, ratio });
    }
    Ok(chain)
}

/// Modes along one direction: `vectors[(i, m)]` is ion `i`'s mass-weighted
/// amplitude in mode `m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeBlock {
    /// rad/s, ascending.
    pub frequencies: Vec<f64>,
    pub vectors: DMatrix<f64>,
}

impl ModeBlock {
    fn from_hessian(h: &DMatrix<f64>, masses: &[f64]) -> Self {
        let n = masses.len();
        let inv_sqrt: Vec<f64> = masses.iter().map(|m| 1.0 / m.sqrt()).collect();
        let weighted = DMatrix::from_fn(n, n, |i, j| h[(i, j)] * inv_sqrt[i] * inv_sqrt[j]);
        let eig = SymmetricEigen::new(weighted);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let frequencies = order
            .iter()
            .map(|&k| eig.eigenvalues[k].max(0.0).sqrt() * eig.eigenvalues[k].signum())
            .collect();
        let mut vectors = DMatrix::zeros(n, n);
        for (m, &k) in order.iter().enumerate() {
            let mut v = eig.eigenvectors.column(k).into_owned();
            // Fix the sign so the largest component is positive.
            let big = v.iter().cloned().fold(0.0, |a: f64, b| if b.abs() > a.abs() { b } else { a });
            if big < 0.0 {
                v = -v;
            }
            vectors.set_column(m, &v);
        }
        Self { frequencies, vectors }
    }

    pub fn len(&self) -> usize {
        self.frequencies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frequencies.is_empty()
    }
}

/// Normal modes of a linear chain, split by direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSpectrum {
    pub axial: ModeBlock,
    pub radial_x: ModeBlock,
    pub radial_y: ModeBlock,
}

impl ModeSpectrum {
    pub fn blocks(&self) -> [(&'static str, &ModeBlock); 3] {
        [("axial", &self.axial), ("radial_x", &self.radial_x), ("radial_y", &self.radial_y)]
    }

    /// Every mode's frequency, ascending.
    pub fn all_frequencies(&self) -> Vec<f64> {
        let mut f: Vec<f64> = self.blocks().iter().flat_map(|(_, b)| b.frequencies.clone()).collect();
        f.sort_by(f64::total_cmp);
        f
    }
}

fn normal_modes_unchecked(chain: &IonChain) -> ModeSpectrum {
    let n = chain.len();
    let h = chain.hessian();
    let masses: Vec<f64> = chain.species.iter().map(|s| s.mass).collect();
    let block = |a: usize| ModeBlock::from_hessian(&DMatrix::from_fn(n, n, |i, j| h[(3 * i + a, 3 * j + a)]), &masses);
    ModeSpectrum {
        axial: block(2),
        radial_x: block(0),
        radial_y: block(1),
    }
}

/// Eigenmodes of the mass-weighted Hessian `M^-1/2 H M^-1/2`, reported per
/// direction. For a chain on the axis the three directions decouple exactly.
pub fn normal_modes(chain: &IonChain) -> Result<ModeSpectrum, CrystalError> {
    let g = chain.gradient_norm();
    let scale = chain.force_scale();
    if !(g < 1e-8 * scale) {
        return Err(CrystalError::NotAtEquilibrium(g));
    }
    Ok(normal_modes_unchecked(chain))
}

/// JSON-ready view: frequencies in Hz and row-major participation matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeReport {
    pub species: Vec<String>,
    pub positions_m: Vec<[f64; 3]>,
    pub blocks: Vec<ModeBlockReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeBlockReport {
    pub direction: String,
    pub frequencies_hz: Vec<f64>,
    /// `participation[i][m]`: ion i, mode m.
    pub participation: Vec<Vec<f64>>,
}

impl ModeReport {
    pub fn new(chain: &IonChain, modes: &ModeSpectrum) -> Self {
        Self {
            species: chain.species.iter().map(|s| s.name.clone()).collect(),
            positions_m: chain.positions.iter().map(|p| [p.x, p.y, p.z]).collect(),
            blocks: modes
                .blocks()
                .iter()
                .map(|(name, b)| ModeBlockReport {
                    direction: name.to_string(),
                    frequencies_hz: b.frequencies.iter().map(|w| w / (2.0 * PI)).collect(),
                    participation: (0..b.len()).map(|i| b.vectors.row(i).iter().copied().collect()).collect(),
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests;
