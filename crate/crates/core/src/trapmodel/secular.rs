//! Trap-center search and secular (normal-mode) analysis of a single ion.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use super::layout::{ElectrodeLayout, TrapDrive};
use super::potential::Trap;
use super::TrapError;
use crate::isotopes::Isotope;

const MAX_NEWTON_ITERATIONS: usize = 200;

/// Gradient tolerance: 1e-12 of the force of 1 V across 100 um on the ion.
fn gradient_tolerance(charge: f64) -> f64 {
    1e-12 * charge.abs() * 1.0 / 100e-6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecularResult {
    pub trap_center: Vector3<f64>,
    /// Angular secular frequencies of the x-like, y-like and z-like axes, rad/s.
    pub frequencies: [f64; 3],
    /// Unit principal axes in the same order as `frequencies`.
    pub principal_axes: [Vector3<f64>; 3],
    /// Signed tilt of the x-like axis out of the electrode plane, degrees.
    pub xz_rotation_angle: f64,
    /// Hessian of the total secular energy at the center, N/m.
    pub hessian: Matrix3<f64>,
}

impl SecularResult {
    /// `sum_i m w_i^2 e_i e_i^T`.
    pub fn reconstructed_hessian(&self, mass: f64) -> Matrix3<f64> {
        self.frequencies
            .iter()
            .zip(&self.principal_axes)
            .fold(Matrix3::zeros(), |acc, (w, e)| acc + e * e.transpose() * (mass * w * w))
    }
}

/// Minimizes pseudopotential plus static energy by damped Newton iteration.
pub fn find_trap_center(
    layout: &ElectrodeLayout,
    drive: &TrapDrive,
    species: &Isotope,
    initial_guess: &Vector3<f64>,
) -> Result<Vector3<f64>, TrapError> {
    let trap = Trap::new(layout, drive)?;
    trap_center(&trap, species, initial_guess)
}

pub fn trap_center(trap: &Trap, species: &Isotope, initial_guess: &Vector3<f64>) -> Result<Vector3<f64>, TrapError> {
    if !(initial_guess.z > 0.0) {
        return Err(TrapError::Domain("initial guess must lie above the surface".into()));
    }
    let (m, q) = (species.mass, species.charge);
    let tol = gradient_tolerance(q);
    let mut p = *initial_guess;
    let mut jet = trap.energy_jet(m, q, &p)?;
    for _ in 0..MAX_NEWTON_ITERATIONS {
        if jet.g.norm() < tol {
            return check_minimum(&jet.h, p);
        }
        let step = newton_direction(&jet.h, &jet.g);
        // Keep the trial point above the surface.
        let mut t = 1.0;
        while p.z + t * step.z <= 0.1 * p.z {
            t *= 0.5;
        }
        let mut accepted = false;
        for _ in 0..60 {
            let trial = p + step * t;
            let tj = trap.energy_jet(m, q, &trial)?;
            // Armijo on the energy, or plain gradient decrease once energy
            // differences drop below rounding.
            if tj.v <= jet.v + 1e-4 * t * jet.g.dot(&step) || tj.g.norm() < jet.g.norm() {
                p = trial;
                jet = tj;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if jet.g.norm() < tol {
        return check_minimum(&jet.h, p);
    }
    Err(TrapError::NoTrap(format!(
        "Newton search stalled at ({:.3e}, {:.3e}, {:.3e}) m with |grad| = {:.3e} N",
        p.x,
        p.y,
        p.z,
        jet.g.norm()
    )))
}

fn newton_direction(h: &Matrix3<f64>, g: &Vector3<f64>) -> Vector3<f64> {
    // Newton on the positive-definite part; flipped curvature elsewhere so a
    // saddle region still yields a descent direction.
    let eig = SymmetricEigen::new(*h);
    let scale = eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
    let mut d = Vector3::zeros();
    for k in 0..3 {
        let e = eig.eigenvectors.column(k);
        let lam = eig.eigenvalues[k].abs().max(1e-9 * scale);
        d -= e * (e.dot(g) / lam);
    }
    d
}

fn check_minimum(h: &Matrix3<f64>, p: Vector3<f64>) -> Result<Vector3<f64>, TrapError> {
    let eig = SymmetricEigen::new(*h);
    for k in 0..3 {
        if eig.eigenvalues[k] <= 0.0 {
            return Err(TrapError::Unstable {
                axis: eig.eigenvectors.column(k).into_owned(),
                curvature: eig.eigenvalues[k],
            });
        }
    }
    Ok(p)
}

/// Default starting point: straight above the hole at the design ion height.
pub fn default_guess(layout: &ElectrodeLayout) -> Vector3<f64> {
    Vector3::new(
        layout.hole_center.x,
        layout.hole_center.y,
        crate::constants::value("ion_height_m"),
    )
}

/// Trap center, secular frequencies and principal axes for one species.
pub fn secular_analysis(layout: &ElectrodeLayout, drive: &TrapDrive, species: &Isotope) -> Result<SecularResult, TrapError> {
    let trap = Trap::new(layout, drive)?;
    secular_at(&trap, species, &default_guess(layout))
}

pub fn secular_at(trap: &Trap, species: &Isotope, guess: &Vector3<f64>) -> Result<SecularResult, TrapError> {
    let center = trap_center(trap, species, guess)?;
    let hessian = trap.energy_jet(species.mass, species.charge, &center)?.h;
    let hessian = 0.5 * (hessian + hessian.transpose());
    let eig = SymmetricEigen::new(hessian);

    // Assign each eigenvector to the coordinate axis it is closest to.
    let mut order = [usize::MAX; 3];
    let mut used = [false; 3];
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for k in 0..3 {
        for axis in 0..3 {
            pairs.push((eig.eigenvectors[(axis, k)].abs(), axis, k));
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    for (_, axis, k) in pairs {
        if order[axis] == usize::MAX && !used[k] {
            order[axis] = k;
            used[k] = true;
        }
    }

    let mut frequencies = [0.0; 3];
    let mut axes = [Vector3::zeros(); 3];
    for axis in 0..3 {
        let k = order[axis];
        let lam = eig.eigenvalues[k];
        let mut e: Vector3<f64> = eig.eigenvectors.column(k).into_owned();
        if lam <= 0.0 {
            return Err(TrapError::Unstable { axis: e, curvature: lam });
        }
        if e[axis] < 0.0 {
            e = -e;
        }
        frequencies[axis] = (lam / species.mass).sqrt();
        axes[axis] = e;
    }
    let x_like = axes[0];
    let xz_rotation_angle = x_like.z.atan2(x_like.x).to_degrees();
    Ok(SecularResult {
        trap_center: center,
        frequencies,
        principal_axes: axes,
        xz_rotation_angle,
        hessian,
    })
}
