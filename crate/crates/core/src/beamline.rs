//! The collimated atomic beam: divergence set by the oven-to-hole geometry,
//! the flux-weighted thermal speed distribution, effusion flux, and sampling
//! of atom initial conditions.
//!
//! Frame: the through-hole is in the plane z = 0 centered at `Aperture::center`,
//! the oven exit sits `distance_to_hole` below it, and atoms travel toward +z.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::{Vector2, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constants::{value, BOLTZMANN};
use crate::isotopes::Isotope;

#[derive(Debug, Error, PartialEq)]
pub enum BeamError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("inconsistent divergence: {0}")]
    Inconsistent(String),
    #[error("out of range: {0}")]
    Range(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OvenGeometry {
    /// Oven exit to through-hole distance, m.
    pub distance_to_hole: f64,
    /// Diameter of the effective emitting disk, m.
    pub source_diameter: f64,
    /// K.
    pub temperature: f64,
    /// A; recorded only.
    pub drive_current: f64,
}

impl Default for OvenGeometry {
    fn default() -> Self {
        Self {
            distance_to_hole: value("oven_distance_m"),
            source_diameter: value("effective_source_diameter_m"),
            temperature: value("oven_temperature_k"),
            drive_current: 3.54,
        }
    }
}

impl OvenGeometry {
    pub fn validate(&self) -> Result<(), BeamError> {
        if !(self.distance_to_hole > 0.0) {
            return Err(BeamError::Domain("oven distance must be positive".into()));
        }
        if !(self.source_diameter >= 0.0) {
            return Err(BeamError::Domain("source diameter must be non-negative".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(BeamError::Domain("temperature must be positive".into()));
        }
        if !(300.0..=900.0).contains(&self.temperature) {
            log::warn!("oven temperature {} K is outside 300-900 K", self.temperature);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aperture {
    /// Side of the square hole, m.
    pub side: f64,
    pub center: Vector2<f64>,
}

impl Default for Aperture {
    fn default() -> Self {
        Self {
            side: value("hole_side_m"),
            center: Vector2::zeros(),
        }
    }
}

/// Full divergence angle (degrees) of rays from a disk of `source_radius`
/// through an aperture of half-width `aperture_half` at `distance`.
pub fn divergence_angle(source_radius: f64, aperture_half: f64, distance: f64) -> Result<f64, BeamError> {
    if !(distance > 0.0) {
        return Err(BeamError::Domain(format!("distance must be positive, got {distance}")));
    }
    if !(source_radius >= 0.0 && aperture_half >= 0.0) {
        return Err(BeamError::Domain("radii must be non-negative".into()));
    }
    Ok((2.0 * ((source_radius + aperture_half) / distance).atan()).to_degrees())
}

/// Source diameter reproducing a given full divergence; inverse of
/// [`divergence_angle`].
pub fn invert_divergence_to_source(full_divergence: f64, aperture_half: f64, distance: f64) -> Result<f64, BeamError> {
    if !(distance > 0.0) {
        return Err(BeamError::Domain(format!("distance must be positive, got {distance}")));
    }
    if !(full_divergence > 0.0 && full_divergence < 180.0) {
        return Err(BeamError::Domain("divergence must lie in (0, 180) degrees".into()));
    }
    let reach = distance * (0.5 * full_divergence.to_radians()).tan();
    let radius = reach - aperture_half;
    if radius < 0.0 {
        let minimum = divergence_angle(0.0, aperture_half, distance)?;
        return Err(BeamError::Inconsistent(format!(
            "{full_divergence} deg is below the point-source value {minimum:.4} deg"
        )));
    }
    Ok(2.0 * radius)
}

/// Mode of the flux-weighted (v^3) beam distribution, `sqrt(3 kT/m)`.
pub fn most_probable_beam_speed(temperature: f64, mass: f64) -> Result<f64, BeamError> {
    if !(temperature > 0.0 && mass > 0.0) {
        return Err(BeamError::Domain("temperature and mass must be positive".into()));
    }
    Ok((3.0 * BOLTZMANN * temperature / mass).sqrt())
}

/// Flux-weighted Maxwell-Boltzmann speed distribution of an effusive beam,
/// `f(v) = (a^2 / 2) ... ∝ v^3 exp(-m v^2 / 2kT)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamSpeedDistribution {
    pub temperature: f64,
    pub mass: f64,
}

impl BeamSpeedDistribution {
    fn a(&self) -> f64 {
        self.mass / (2.0 * BOLTZMANN * self.temperature)
    }

    pub fn density(&self, v: f64) -> f64 {
        if v < 0.0 {
            return 0.0;
        }
        let a = self.a();
        2.0 * a * a * v.powi(3) * (-a * v * v).exp()
    }

    pub fn cdf(&self, v: f64) -> f64 {
        if v <= 0.0 {
            return 0.0;
        }
        let u = self.a() * v * v;
        // 1 - (1 + u) e^{-u}, written to keep precision for small u.
        -(-u).exp_m1() - u * (-u).exp()
    }

    pub fn mode(&self) -> f64 {
        (3.0 * BOLTZMANN * self.temperature / self.mass).sqrt()
    }

    pub fn mean(&self) -> f64 {
        (9.0 * PI * BOLTZMANN * self.temperature / (8.0 * self.mass)).sqrt()
    }
}

const SPEED_TABLE_POINTS: usize = 8192;
const SPEED_TABLE_SPAN: f64 = 10.0;

/// Inverse-CDF sampler on a tabulated grid over `[0, 10 v_mp]`.
#[derive(Debug, Clone)]
pub struct SpeedSampler {
    speeds: Vec<f64>,
    cdf: Vec<f64>,
}

impl SpeedSampler {
    pub fn new(dist: &BeamSpeedDistribution) -> Self {
        let top = SPEED_TABLE_SPAN * dist.mode();
        let speeds: Vec<f64> = (0..SPEED_TABLE_POINTS)
            .map(|k| top * k as f64 / (SPEED_TABLE_POINTS - 1) as f64)
            .collect();
        let cdf = speeds.iter().map(|&v| dist.cdf(v)).collect();
        Self { speeds, cdf }
    }

    pub fn invert(&self, u: f64) -> f64 {
        let k = self.cdf.partition_point(|&c| c <= u);
        if k == 0 {
            return 0.0;
        }
        if k >= self.cdf.len() {
            return *self.speeds.last().unwrap();
        }
        let (c0, c1) = (self.cdf[k - 1], self.cdf[k]);
        let t = if c1 > c0 { (u - c0) / (c1 - c0) } else { 0.0 };
        self.speeds[k - 1] + t * (self.speeds[k] - self.speeds[k - 1])
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.invert(rng.random::<f64>())
    }
}

#[derive(Debug, Clone)]
pub struct BeamModel {
    /// Full divergence, degrees.
    pub full_divergence: f64,
    pub speed_distribution: BeamSpeedDistribution,
    /// Atoms/s through the aperture, when computed.
    pub flux: Option<f64>,
    sampler: SpeedSampler,
}

impl BeamModel {
    pub fn new(full_divergence: f64, speed_distribution: BeamSpeedDistribution, flux: Option<f64>) -> Result<Self, BeamError> {
        if !(full_divergence > 0.0 && full_divergence < 90.0) {
            return Err(BeamError::Domain(format!(
                "divergence {full_divergence} deg outside (0, 90)"
            )));
        }
        if !(speed_distribution.temperature > 0.0 && speed_distribution.mass > 0.0) {
            return Err(BeamError::Domain("temperature and mass must be positive".into()));
        }
        Ok(Self {
            full_divergence,
            speed_distribution,
            flux,
            sampler: SpeedSampler::new(&speed_distribution),
        })
    }

    /// Beam implied by an oven/aperture geometry for one species.
    pub fn from_geometry(oven: &OvenGeometry, aperture: &Aperture, species: &Isotope) -> Result<Self, BeamError> {
        oven.validate()?;
        let div = divergence_angle(0.5 * oven.source_diameter, 0.5 * aperture.side, oven.distance_to_hole)?;
        let flux = oven_flux(oven, aperture, species).ok();
        Self::new(
            div,
            BeamSpeedDistribution {
                temperature: oven.temperature,
                mass: species.mass,
            },
            flux,
        )
    }

    pub fn sample_speed<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.sampler.sample(rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AtomSample {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
}

/// Draws one atom crossing the aperture plane.
///
/// The position is uniform over the square hole; the direction is the ray from
/// a uniformly drawn point of the emitting disk through that position; the
/// speed comes from the tabulated inverse CDF.
pub fn sample_atom<R: Rng + ?Sized>(beam: &BeamModel, oven: &OvenGeometry, aperture: &Aperture, rng: &mut R) -> AtomSample {
    let half = 0.5 * aperture.side;
    let position = Vector3::new(
        aperture.center.x + half * (2.0 * rng.random::<f64>() - 1.0),
        aperture.center.y + half * (2.0 * rng.random::<f64>() - 1.0),
        0.0,
    );
    let r = 0.5 * oven.source_diameter * rng.random::<f64>().sqrt();
    let phi = 2.0 * PI * rng.random::<f64>();
    let source = Vector3::new(
        aperture.center.x + r * phi.cos(),
        aperture.center.y + r * phi.sin(),
        -oven.distance_to_hole,
    );
    let dir = (position - source).normalize();
    let speed = beam.sample_speed(rng);
    AtomSample {
        position,
        velocity: dir * speed,
    }
}

/// Vapor pressure from the two-parameter fit, Pa.
pub fn vapor_pressure(temperature: f64) -> Result<f64, BeamError> {
    let (lo, hi) = (value("vapor_pressure_t_min_k"), value("vapor_pressure_t_max_k"));
    if !(lo..=hi).contains(&temperature) {
        return Err(BeamError::Range(format!(
            "{temperature} K outside the vapor-pressure fit band {lo}-{hi} K"
        )));
    }
    Ok(10f64.powf(value("vapor_pressure_a") - value("vapor_pressure_b") / temperature))
}

/// Atoms of `species` per second passing the hole.
///
/// Effusion from the emitting disk, `n vbar / 4` per unit area with a cosine
/// angular law, times the fraction `A_hole / (pi d^2)` landing in the hole,
/// times the isotope's abundance.
pub fn oven_flux(oven: &OvenGeometry, aperture: &Aperture, species: &Isotope) -> Result<f64, BeamError> {
    oven.validate()?;
    let t = oven.temperature;
    let n = vapor_pressure(t)? / (BOLTZMANN * t);
    let vbar = (8.0 * BOLTZMANN * t / (PI * species.mass)).sqrt();
    let source_area = PI * (0.5 * oven.source_diameter).powi(2);
    let hole_area = aperture.side * aperture.side;
    let d = oven.distance_to_hole;
    Ok(species.natural_abundance * 0.25 * n * vbar * source_area * hole_area / (PI * d * d))
}

/// CSV `x,y,z,vx,vy,vz`.
pub fn write_samples_csv<W: Write>(samples: &[AtomSample], mut out: W) -> std::io::Result<()> {
    writeln!(out, "x,y,z,vx,vy,vz")?;
    for s in samples {
        let (p, v) = (s.position, s.velocity);
        writeln!(out, "{:e},{:e},{:e},{:e},{:e},{:e}", p.x, p.y, p.z, v.x, v.y, v.z)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::isotopes::ca40;

    #[test]
    fn point_source_divergence() {
        let d = divergence_angle(0.0, 20e-6, 3e-3).unwrap();
        assert!((d - 0.76).abs() < 0.01, "{d}");
    }

    #[test]
    fn extended_source_divergence() {
        let d = divergence_angle(46.5e-6, 20e-6, 3e-3).unwrap();
        assert!((d - 2.54).abs() < 0.02, "{d}");
    }

    #[test]
    fn zero_extent_has_zero_divergence() {
        assert_eq!(divergence_angle(0.0, 0.0, 3e-3).unwrap(), 0.0);
        assert!(matches!(divergence_angle(0.0, 1e-6, 0.0), Err(BeamError::Domain(_))));
    }

    #[test]
    fn inversion_recovers_source() {
        let s = invert_divergence_to_source(2.54, 20e-6, 3e-3).unwrap();
        assert!((s - 93e-6).abs() < 2e-6, "{s}");
        let p = invert_divergence_to_source(0.764, 20e-6, 3e-3).unwrap();
        assert!(p.abs() < 0.1e-6, "{p}");
        assert!(matches!(
            invert_divergence_to_source(0.5, 20e-6, 3e-3),
            Err(BeamError::Inconsistent(_))
        ));
    }

    #[test]
    fn most_probable_speed_at_530k() {
        let v = most_probable_beam_speed(530.0, ca40().mass).unwrap();
        assert!((573.0..=576.0).contains(&v), "{v}");
        let v4 = most_probable_beam_speed(4.0 * 530.0, ca40().mass).unwrap();
        assert!((v4 / v - 2.0).abs() < 1e-12);
        assert!(most_probable_beam_speed(0.0, 1.0).is_err());
    }

    fn beam() -> (BeamModel, OvenGeometry, Aperture) {
        let oven = OvenGeometry::default();
        let ap = Aperture::default();
        (BeamModel::from_geometry(&oven, &ap, &ca40()).unwrap(), oven, ap)
    }

    #[test]
    fn density_normalizes() {
        let (b, ..) = beam();
        let d = b.speed_distribution;
        let top = 10.0 * d.mode();
        let n = 20000;
        let h = top / n as f64;
        // Simpson
        let mut s = d.density(0.0) + d.density(top);
        for k in 1..n {
            s += d.density(k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
        }
        let integral = s * h / 3.0;
        assert!((0.999..=1.0 + 1e-12).contains(&integral), "{integral}");
        assert!((d.cdf(top) - integral).abs() < 1e-9);
    }

    #[test]
    fn samples_respect_the_cone() {
        let (b, oven, ap) = beam();
        let half = (0.5 * b.full_divergence).to_radians();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100_000 {
            let s = sample_atom(&b, &oven, &ap, &mut rng);
            let v = s.velocity;
            assert!(v.z > 0.0);
            assert!((v.x.abs() / v.z).atan() <= half + 1e-12);
            assert!((v.y.abs() / v.z).atan() <= half + 1e-12);
            assert!(s.position.x.abs() <= 0.5 * ap.side && s.position.y.abs() <= 0.5 * ap.side);
        }
    }

    #[test]
    fn mean_speed_matches_flux_weighted_moment() {
        let (b, oven, ap) = beam();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 1_000_000;
        let mean = (0..n).map(|_| sample_atom(&b, &oven, &ap, &mut rng).velocity.norm()).sum::<f64>() / n as f64;
        let want = b.speed_distribution.mean();
        assert!((mean / want - 1.0).abs() < 0.005, "{mean} vs {want}");
    }

    #[test]
    fn histogram_mode_matches_most_probable_speed() {
        let (b, ..) = beam();
        let vmp = b.speed_distribution.mode();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bins = 300;
        let top = 3.0 * vmp;
        let mut hist = vec![0u64; bins];
        for _ in 0..10_000_000 {
            let v = b.sample_speed(&mut rng);
            if v < top {
                hist[(v / top * bins as f64) as usize] += 1;
            }
        }
        // Quadratic least-squares fit of the counts over the bins within 15% of
        // the raw maximum; the vertex is the mode estimate.
        let peak = (0..bins).max_by_key(|&k| hist[k]).unwrap();
        let width = top / bins as f64;
        let center = |k: usize| (k as f64 + 0.5) * width;
        let (mut s, mut sx, mut sx2, mut sx3, mut sx4, mut sy, mut sxy, mut sx2y) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        for k in 0..bins {
            let x = center(k) - center(peak);
            if x.abs() > 0.15 * vmp {
                continue;
            }
            let y = hist[k] as f64;
            s += 1.0;
            sx += x;
            sx2 += x * x;
            sx3 += x.powi(3);
            sx4 += x.powi(4);
            sy += y;
            sxy += x * y;
            sx2y += x * x * y;
        }
        let m = nalgebra::Matrix3::new(sx4, sx3, sx2, sx3, sx2, sx, sx2, sx, s);
        let c = m.lu().solve(&nalgebra::Vector3::new(sx2y, sxy, sy)).unwrap();
        let mode = center(peak) - c[1] / (2.0 * c[0]);
        assert!((mode / vmp - 1.0).abs() < 0.01, "{mode} vs {vmp}");
    }

    #[test]
    fn ks_test_against_analytic_cdf() {
        let (b, ..) = beam();
        let d = b.speed_distribution;
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 100_000;
        let mut v: Vec<f64> = (0..n).map(|_| b.sample_speed(&mut rng)).collect();
        v.sort_by(f64::total_cmp);
        let mut dmax: f64 = 0.0;
        for (i, x) in v.iter().enumerate() {
            let f = d.cdf(*x);
            dmax = dmax.max((f - i as f64 / n as f64).abs()).max(((i + 1) as f64 / n as f64 - f).abs());
        }
        // Two-sided critical value at alpha = 0.01.
        let crit = 1.628 / (n as f64).sqrt();
        assert!(dmax < crit, "D = {dmax}, critical {crit}");
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let (b, oven, ap) = beam();
        let draw = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            (0..100).map(|_| sample_atom(&b, &oven, &ap, &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn flux_monotone_in_temperature_and_linear_in_area() {
        let s = ca40();
        let ap = Aperture::default();
        let at = |t: f64| {
            oven_flux(&OvenGeometry { temperature: t, ..Default::default() }, &ap, &s).unwrap()
        };
        assert!(at(550.0) > at(480.0));
        let big = Aperture { side: ap.side * 2f64.sqrt(), ..ap.clone() };
        let base = oven_flux(&OvenGeometry::default(), &ap, &s).unwrap();
        let doubled = oven_flux(&OvenGeometry::default(), &big, &s).unwrap();
        assert!((doubled / base - 2.0).abs() < 1e-12);
        assert!(matches!(
            oven_flux(&OvenGeometry { temperature: 700.0, ..Default::default() }, &ap, &s),
            Err(BeamError::Range(_))
        ));
    }

    #[test]
    fn flux_matches_effusion_integral() {
        // Direct quadrature: the in-oven Maxwell speed distribution integrated
        // for the wall flux, and the cosine-law transfer kernel
        // cos(th_s) cos(th_h) / (pi r^2) integrated over disk and hole.
        let s = ca40();
        let oven = OvenGeometry::default();
        let ap = Aperture::default();
        let t = oven.temperature;
        let n = vapor_pressure(t).unwrap() / (BOLTZMANN * t);
        let a = s.mass / (2.0 * BOLTZMANN * t);
        let maxwell = |v: f64| 4.0 * PI * (a / PI).powf(1.5) * v * v * (-a * v * v).exp();
        let vmax = 12.0 / a.sqrt();
        let m = 4000;
        let h = vmax / m as f64;
        let mut vint = 0.0;
        for k in 0..m {
            let v = (k as f64 + 0.5) * h;
            vint += v * maxwell(v) * h;
        }
        // Over a half-space with a cosine law the mean normal velocity is vbar/4.
        let wall_flux = n * vint / 4.0;
        let rs = 0.5 * oven.source_diameter;
        let d = oven.distance_to_hole;
        let q = 24;
        let mut geom = 0.0;
        for i in 0..q {
            let r = rs * (i as f64 + 0.5) / q as f64;
            for j in 0..q {
                let phi = 2.0 * PI * (j as f64 + 0.5) / q as f64;
                let (sx, sy) = (r * phi.cos(), r * phi.sin());
                let da_s = r * (rs / q as f64) * (2.0 * PI / q as f64);
                for u in 0..q {
                    for w in 0..q {
                        let hx = ap.side * ((u as f64 + 0.5) / q as f64 - 0.5);
                        let hy = ap.side * ((w as f64 + 0.5) / q as f64 - 0.5);
                        let da_h = (ap.side / q as f64).powi(2);
                        let r2 = (hx - sx).powi(2) + (hy - sy).powi(2) + d * d;
                        let cos = d / r2.sqrt();
                        geom += cos * cos / (PI * r2) * da_s * da_h;
                    }
                }
            }
        }
        let quad = s.natural_abundance * wall_flux * geom;
        let ours = oven_flux(&oven, &ap, &s).unwrap();
        assert!((ours / quad - 1.0).abs() < 0.01, "{ours} vs {quad}");
    }

    proptest! {
        #[test]
        fn divergence_monotone(r in 0.0..1e-3f64, a in 0.0..1e-3f64, d in 1e-4..1e-2f64, bump in 1e-7..1e-4f64) {
            let base = divergence_angle(r, a, d).unwrap();
            prop_assert!(divergence_angle(r + bump, a, d).unwrap() > base);
            prop_assert!(divergence_angle(r, a + bump, d).unwrap() > base);
            if r + a > 0.0 {
                prop_assert!(divergence_angle(r, a, d + bump).unwrap() < base);
            }
        }

        #[test]
        fn inversion_is_identity(r in 1e-7..1e-3f64, a in 0.0..1e-4f64, d in 1e-4..1e-2f64) {
            let div = divergence_angle(r, a, d).unwrap();
            let back = 0.5 * invert_divergence_to_source(div, a, d).unwrap();
            prop_assert!((back - r).abs() <= 1e-12 * (r + a).max(r) * 10.0, "{back} vs {r}");
        }
    }
}
