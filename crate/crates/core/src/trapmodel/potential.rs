//! Gapless-plane potentials of rectangular electrodes and the RF pseudopotential.
//!
//! A rectangle held at unit voltage in an otherwise grounded plane produces
//! `phi(p) = Omega(p) / 2pi`, where `Omega` is the solid angle the rectangle
//! subtends at `p`. Everything here is a superposition of that basis function.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};

use super::layout::{ElectrodeLayout, RectPatch, Role, TrapDrive};
use super::TrapError;
use crate::jet::{Jet, Real};

fn corners(patch: &RectPatch) -> [(f64, f64, f64); 4] {
    [
        (patch.x1, patch.y1, 1.0),
        (patch.x2, patch.y2, 1.0),
        (patch.x1, patch.y2, -1.0),
        (patch.x2, patch.y1, -1.0),
    ]
}

/// Signed solid-angle fraction of `patch` seen from `p` (z > 0 assumed).
pub(crate) fn basis<T: Real>(patch: &RectPatch, p: &[T; 3]) -> T {
    let [x, y, z] = *p;
    let mut acc = T::cst(0.0);
    for (xi, yj, s) in corners(patch) {
        let dx = -x + xi;
        let dy = -y + yj;
        let r = (dx * dx + dy * dy + z * z).sqrt();
        acc = acc + (dx * dy / (z * r)).atan() * s;
    }
    acc * (patch.sign / (2.0 * PI))
}

/// Gradient of [`basis`] in closed form.
pub(crate) fn basis_gradient<T: Real>(patch: &RectPatch, p: &[T; 3]) -> [T; 3] {
    let [x, y, z] = *p;
    let zero = T::cst(0.0);
    let (mut gx, mut gy, mut gz) = (zero, zero, zero);
    for (xi, yj, s) in corners(patch) {
        let dx = -x + xi;
        let dy = -y + yj;
        let z2 = z * z;
        let xz = dx * dx + z2;
        let yz = dy * dy + z2;
        let r2 = dx * dx + dy * dy + z2;
        let r = r2.sqrt();
        gx = gx - dy * z / (r * xz) * s;
        gy = gy - dx * z / (r * yz) * s;
        gz = gz - dx * dy * (r2 + z2) / (r * xz * yz) * s;
    }
    let k = patch.sign / (2.0 * PI);
    [gx * k, gy * k, gz * k]
}

fn check_height(p: &Vector3<f64>) -> Result<(), TrapError> {
    if p.z > 0.0 && p.iter().all(|c| c.is_finite()) {
        Ok(())
    } else {
        Err(TrapError::Domain(format!(
            "evaluation point must lie above the electrode plane (z = {:e} m)",
            p.z
        )))
    }
}

/// Potential of a single patch held at unit voltage: sign times the solid-angle
/// fraction, in `[0, 1]` for an electrode.
pub fn patch_potential(patch: &RectPatch, p: &Vector3<f64>) -> Result<f64, TrapError> {
    check_height(p)?;
    Ok(basis(patch, &[p.x, p.y, p.z]))
}

/// A layout bound to a drive, with voltages resolved per patch.
#[derive(Debug, Clone)]
pub struct Trap {
    layout: ElectrodeLayout,
    drive: TrapDrive,
    dc_terms: Vec<(RectPatch, f64)>,
    rf_terms: Vec<RectPatch>,
}

impl Trap {
    pub fn new(layout: &ElectrodeLayout, drive: &TrapDrive) -> Result<Self, TrapError> {
        let drive = drive.resolved(layout)?;
        let mut dc_terms = Vec::new();
        let mut rf_terms = Vec::new();
        for patch in &layout.patches {
            match patch.role {
                Role::Rf => rf_terms.push(patch.clone()),
                Role::Dc => {
                    let v = drive.dc_voltages[&patch.label];
                    if v != 0.0 {
                        dc_terms.push((patch.clone(), v));
                    }
                }
            }
        }
        Ok(Self {
            layout: layout.clone(),
            drive,
            dc_terms,
            rf_terms,
        })
    }

    pub fn layout(&self) -> &ElectrodeLayout {
        &self.layout
    }

    pub fn drive(&self) -> &TrapDrive {
        &self.drive
    }

    pub(crate) fn dc_generic<T: Real>(&self, p: &[T; 3]) -> T {
        self.dc_terms
            .iter()
            .fold(T::cst(0.0), |acc, (patch, v)| acc + basis(patch, p) * *v)
    }

    /// Gradient of the RF potential for unit amplitude.
    pub(crate) fn rf_unit_gradient<T: Real>(&self, p: &[T; 3]) -> [T; 3] {
        let zero = T::cst(0.0);
        self.rf_terms.iter().fold([zero; 3], |acc, patch| {
            let g = basis_gradient(patch, p);
            [acc[0] + g[0], acc[1] + g[1], acc[2] + g[2]]
        })
    }

    fn pseudo_generic<T: Real>(&self, mass: f64, charge: f64, p: &[T; 3]) -> T {
        let g = self.rf_unit_gradient(p);
        let k = charge * charge * self.drive.rf_voltage * self.drive.rf_voltage
            / (4.0 * mass * self.drive.rf_omega * self.drive.rf_omega);
        (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]) * k
    }

    /// Static potential, V.
    pub fn dc_potential(&self, p: &Vector3<f64>) -> Result<f64, TrapError> {
        check_height(p)?;
        Ok(self.dc_generic(&[p.x, p.y, p.z]))
    }

    /// Gradient of the static potential, V/m.
    pub fn dc_gradient(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let q = [p.x, p.y, p.z];
        self.dc_terms.iter().fold(Vector3::zeros(), |acc, (patch, v)| {
            let g = basis_gradient(patch, &q);
            acc + Vector3::new(g[0], g[1], g[2]) * *v
        })
    }

    /// RF potential for unit amplitude (dimensionless).
    pub fn rf_unit_potential(&self, p: &Vector3<f64>) -> Result<f64, TrapError> {
        check_height(p)?;
        let q = [p.x, p.y, p.z];
        Ok(self.rf_terms.iter().map(|patch| basis(patch, &q)).sum())
    }

    /// Gradient of the RF potential at full amplitude, V/m.
    pub fn rf_gradient(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let g = self.rf_unit_gradient(&[p.x, p.y, p.z]);
        Vector3::new(g[0], g[1], g[2]) * self.drive.rf_voltage
    }

    /// `q^2 |grad V_rf|^2 / (4 m Omega^2)`, J.
    pub fn pseudopotential(&self, mass: f64, charge: f64, p: &Vector3<f64>) -> Result<f64, TrapError> {
        check_height(p)?;
        check_mass(mass)?;
        Ok(self.pseudo_generic(mass, charge, &[p.x, p.y, p.z]))
    }

    /// Pseudopotential plus `q V_dc`, J.
    pub fn energy(&self, mass: f64, charge: f64, p: &Vector3<f64>) -> Result<f64, TrapError> {
        check_height(p)?;
        check_mass(mass)?;
        let q = [p.x, p.y, p.z];
        Ok(self.pseudo_generic(mass, charge, &q) + self.dc_generic(&q) * charge)
    }

    /// Total secular energy with exact gradient (N) and Hessian (N/m).
    pub fn energy_jet(&self, mass: f64, charge: f64, p: &Vector3<f64>) -> Result<Jet, TrapError> {
        check_height(p)?;
        check_mass(mass)?;
        let q = Jet::point(p);
        Ok(self.pseudo_generic(mass, charge, &q) + self.dc_generic(&q) * charge)
    }

    /// Gradient of the pseudopotential alone, J/m.
    pub fn pseudopotential_gradient(&self, mass: f64, charge: f64, p: &Vector3<f64>) -> Result<Vector3<f64>, TrapError> {
        check_height(p)?;
        check_mass(mass)?;
        Ok(self.pseudo_generic(mass, charge, &Jet::point(p)).g)
    }

    /// Hessian of the static potential, V/m^2.
    pub fn dc_hessian(&self, p: &Vector3<f64>) -> Matrix3<f64> {
        self.dc_generic(&Jet::point(p)).h
    }
}

fn check_mass(mass: f64) -> Result<(), TrapError> {
    if mass > 0.0 && mass.is_finite() {
        Ok(())
    } else {
        Err(TrapError::Domain("mass must be positive".into()))
    }
}

/// Static potential of `layout` under `drive`, V.
pub fn dc_potential(layout: &ElectrodeLayout, drive: &TrapDrive, p: &Vector3<f64>) -> Result<f64, TrapError> {
    Trap::new(layout, drive)?.dc_potential(p)
}

/// RF pseudopotential, J.
pub fn pseudopotential(
    layout: &ElectrodeLayout,
    drive: &TrapDrive,
    mass: f64,
    charge: f64,
    p: &Vector3<f64>,
) -> Result<f64, TrapError> {
    Trap::new(layout, drive)?.pseudopotential(mass, charge, p)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use proptest::prelude::*;

    use super::*;
    use crate::isotopes::{ca40, ca44};

    fn square(side: f64) -> RectPatch {
        RectPatch {
            label: "p".into(),
            role: Role::Dc,
            x1: -0.5 * side,
            x2: 0.5 * side,
            y1: -0.5 * side,
            y2: 0.5 * side,
            sign: 1.0,
        }
    }

    fn canonical() -> (ElectrodeLayout, TrapDrive) {
        (
            ElectrodeLayout::canonical(),
            ElectrodeLayout::canonical_drive("symmetric").unwrap(),
        )
    }

    /// Tensor Gauss-Legendre quadrature of `z / (2 pi r^3)` over the patch.
    fn quadrature(patch: &RectPatch, p: &Vector3<f64>) -> f64 {
        let (nodes, weights) = gauss_legendre_20();
        let panels = 40;
        let integrate = |a: f64, b: f64, f: &dyn Fn(f64) -> f64| {
            let h = (b - a) / panels as f64;
            let mut s = 0.0;
            for k in 0..panels {
                let lo = a + h * k as f64;
                for (x, w) in nodes.iter().zip(&weights) {
                    s += w * 0.5 * h * f(lo + 0.5 * h * (x + 1.0));
                }
            }
            s
        };
        integrate(patch.x1, patch.x2, &|x| {
            integrate(patch.y1, patch.y2, &|y| {
                let r2 = (x - p.x).powi(2) + (y - p.y).powi(2) + p.z * p.z;
                p.z / (2.0 * PI * r2 * r2.sqrt())
            })
        })
    }

    fn gauss_legendre_20() -> (Vec<f64>, Vec<f64>) {
        // Newton iteration on P_20.
        let n = 20;
        let mut xs = Vec::new();
        let mut ws = Vec::new();
        for i in 1..=n {
            let mut x = (PI * (i as f64 - 0.25) / (n as f64 + 0.5)).cos();
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0, x);
                for k in 2..=n {
                    let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                    p0 = p1;
                    p1 = p2;
                }
                let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                let dx = p1 / dp;
                x -= dx;
                if dx.abs() < 1e-16 {
                    let w = 2.0 / ((1.0 - x * x) * dp * dp);
                    xs.push(x);
                    ws.push(w);
                    break;
                }
            }
        }
        (xs, ws)
    }

    #[test]
    fn unit_potential_just_above_interior() {
        let v = patch_potential(&square(1e-3), &Vector3::new(1e-5, -2e-5, 1e-12)).unwrap();
        assert!((v - 1.0).abs() < 1e-8);
    }

    #[test]
    fn far_field_decays() {
        let patch = square(1e-4);
        let near = patch_potential(&patch, &Vector3::new(0.0, 0.0, 1e-3)).unwrap();
        let far = patch_potential(&patch, &Vector3::new(0.3, 0.2, 10.0)).unwrap();
        assert!(far < 1e-9 && far < near);
    }

    #[test]
    fn non_positive_height_is_a_domain_error() {
        assert!(matches!(
            patch_potential(&square(1.0), &Vector3::new(0.0, 0.0, 0.0)),
            Err(TrapError::Domain(_))
        ));
        let (l, d) = canonical();
        assert!(dc_potential(&l, &d, &Vector3::new(0.0, 0.0, -1e-6)).is_err());
    }

    #[test]
    fn matches_area_quadrature() {
        let patch = RectPatch {
            label: "p".into(),
            role: Role::Dc,
            x1: -130e-6,
            x2: 70e-6,
            y1: 10e-6,
            y2: 400e-6,
            sign: 1.0,
        };
        for p in [
            Vector3::new(0.0, 0.0, 200e-6),
            Vector3::new(-300e-6, 150e-6, 80e-6),
            Vector3::new(40e-6, 600e-6, 350e-6),
        ] {
            let exact = patch_potential(&patch, &p).unwrap();
            let quad = quadrature(&patch, &p);
            assert!((exact - quad).abs() < 1e-8, "{exact} vs {quad}");
        }
    }

    #[test]
    fn closed_form_gradient_matches_jet() {
        let patch = square(300e-6);
        let p = Vector3::new(50e-6, -120e-6, 90e-6);
        let g = basis_gradient(&patch, &[p.x, p.y, p.z]);
        let j = basis(&patch, &Jet::point(&p));
        for k in 0..3 {
            assert!((g[k] - j.g[k]).abs() < 1e-9 * j.g.norm());
        }
    }

    #[test]
    fn zero_voltages_give_zero_potential() {
        let (l, d) = canonical();
        let d = d.with_dc(BTreeMap::new());
        assert_eq!(dc_potential(&l, &d, &Vector3::new(1e-5, 2e-5, 1e-4)).unwrap(), 0.0);
    }

    #[test]
    fn unknown_label_is_a_configuration_error() {
        let (l, d) = canonical();
        let mut dc = d.dc_voltages.clone();
        dc.insert("Bogus".into(), 1.0);
        assert!(matches!(
            dc_potential(&l, &d.with_dc(dc), &Vector3::new(0.0, 0.0, 1e-4)),
            Err(TrapError::Config(_))
        ));
    }

    #[test]
    fn symmetric_voltages_give_mirror_symmetric_potential() {
        let (l, d) = canonical();
        let trap = Trap::new(&l, &d).unwrap();
        for (x, y, z) in [(30e-6, 10e-6, 150e-6), (400e-6, -200e-6, 60e-6)] {
            let a = trap.dc_potential(&Vector3::new(x, y, z)).unwrap();
            let b = trap.dc_potential(&Vector3::new(2.0 * l.hole_center.x - x, y, z)).unwrap();
            assert!((a - b).abs() < 1e-12);
            let m = ca40().mass;
            let q = ca40().charge;
            let pa = trap.pseudopotential(m, q, &Vector3::new(x, y, z)).unwrap();
            let pb = trap.pseudopotential(m, q, &Vector3::new(-x, y, z)).unwrap();
            assert!((pa - pb).abs() <= 1e-12 * pa.abs());
        }
    }

    #[test]
    fn grounded_aperture_removes_its_solid_angle() {
        // Center electrode alone at 1 V: the change from a 40 um aperture at
        // 200 um is the aperture's own solid-angle fraction.
        let l = ElectrodeLayout::canonical();
        let mut dc = BTreeMap::new();
        dc.insert("Center".to_string(), 1.0);
        let d = ElectrodeLayout::canonical_drive("symmetric").unwrap().with_dc(dc);
        let p = Vector3::new(0.0, 0.0, 200e-6);
        let with = dc_potential(&l.with_hole(40e-6).unwrap(), &d, &p).unwrap();
        let without = dc_potential(&l.with_hole(0.0).unwrap(), &d, &p).unwrap();
        let s: f64 = 40e-6;
        let h = 200e-6;
        let omega = 4.0 * (s * s / ((s * s + 4.0 * h * h))).asin();
        assert!(((without - with) - omega / (2.0 * PI)).abs() < 1e-12);
        // 6.3 mV per volt on the Center electrode; the canonical drive keeps
        // Center near ground so the distortion stays below a millivolt.
        let center_v = ElectrodeLayout::canonical_drive("symmetric").unwrap().dc_voltages["Center"];
        assert!((without - with) * center_v.abs() < 1e-3);
    }

    #[test]
    fn pseudopotential_scales_inversely_with_mass() {
        let (l, d) = canonical();
        let trap = Trap::new(&l, &d).unwrap();
        let p = Vector3::new(20e-6, 5e-6, 230e-6);
        let a = trap.pseudopotential(ca40().mass, ca40().charge, &p).unwrap();
        let b = trap.pseudopotential(ca44().mass, ca44().charge, &p).unwrap();
        assert!((b / a - ca40().mass / ca44().mass).abs() < 1e-12);
        assert!(trap.pseudopotential(0.0, 1.0, &p).is_err());
        let mut d0 = d.clone();
        d0.rf_omega = 0.0;
        assert!(pseudopotential(&l, &d0, 1.0, 1.0, &p).is_err());
    }

    #[test]
    fn pseudopotential_gradient_matches_central_differences() {
        let (l, d) = canonical();
        let trap = Trap::new(&l, &d).unwrap();
        let (m, q) = (ca40().mass, ca40().charge);
        let p = Vector3::new(35e-6, -20e-6, 170e-6);
        let g = trap.pseudopotential_gradient(m, q, &p).unwrap();
        let h = 1e-8;
        for k in 0..3 {
            let mut e = Vector3::zeros();
            e[k] = h;
            let fd = (trap.pseudopotential(m, q, &(p + e)).unwrap()
                - trap.pseudopotential(m, q, &(p - e)).unwrap())
                / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-6 * g.norm(), "axis {k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn superposition_of_voltage_maps() {
        let (l, d) = canonical();
        let a = d.dc_voltages.clone();
        let b: BTreeMap<String, f64> = l.dc_labels().enumerate().map(|(i, s)| (s.to_string(), 0.3 * i as f64 - 1.0)).collect();
        let sum: BTreeMap<String, f64> = b.iter().map(|(k, v)| (k.clone(), v + a.get(k).copied().unwrap_or(0.0))).collect();
        let p = Vector3::new(-70e-6, 130e-6, 95e-6);
        let va = dc_potential(&l, &d.with_dc(a), &p).unwrap();
        let vb = dc_potential(&l, &d.with_dc(b), &p).unwrap();
        let vs = dc_potential(&l, &d.with_dc(sum), &p).unwrap();
        assert!((va + vb - vs).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn basis_is_bounded(x in -2e-3..2e-3f64, y in -2e-3..2e-3f64, z in 1e-7..5e-3f64) {
            let l = ElectrodeLayout::canonical();
            for patch in l.patches.iter().filter(|p| p.sign > 0.0) {
                let v = patch_potential(patch, &Vector3::new(x, y, z)).unwrap();
                prop_assert!((-1e-15..=1.0 + 1e-15).contains(&v));
            }
        }

        #[test]
        fn dc_potential_is_harmonic(x in -3e-4..3e-4f64, y in -3e-4..3e-4f64, z in 5e-5..4e-4f64) {
            let (l, d) = canonical();
            let trap = Trap::new(&l, &d).unwrap();
            let p = Vector3::new(x, y, z);
            let lap = trap.dc_hessian(&p).trace();
            let v = trap.dc_potential(&p).unwrap().abs().max(1.0);
            let scale = 1e-4;
            prop_assert!(lap.abs() < 1e-6 * v / (scale * scale), "laplacian {lap}");
        }
    }
}
