//! 423 nm cross-beam fluorescence spectroscopy: line-broadening budget, Voigt
//! synthesis and fitting, and the rate-competition model of isotope-selective
//! photoionization.

mod fit;
mod voigt;

use std::f64::consts::PI;
use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constants::{value, PLANCK, SPEED_OF_LIGHT};
use crate::isotopes::IsotopeTable;

pub use fit::{fit_voigt, fit_voigt_peaks, Estimate, FitConstraints, Param, Pin, VoigtFit};
pub use voigt::{faddeeva, voigt, voigt_fwhm};

#[derive(Debug, Error, PartialEq)]
pub enum SpectraError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("degenerate: {0}")]
    Degenerate(String),
    #[error("fit did not converge in {iterations} iterations")]
    NonConvergence { iterations: usize, best: Vec<VoigtFit> },
    #[error("probability undefined: {0}")]
    UndefinedProbability(String),
    #[error("division by zero rate: {0}")]
    ZeroRate(String),
    #[error("invalid spectrum: {0}")]
    InvalidSpectrum(String),
}

/// Widths (Hz) of the 423 nm line shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineshapeModel {
    pub natural_linewidth: f64,
    pub saturation_parameter: f64,
    pub transit_width: f64,
    pub gaussian_fwhm: f64,
    pub lorentzian_fwhm: f64,
}

impl LineshapeModel {
    /// Model carrying only the two fitted widths.
    pub fn from_widths(gaussian_fwhm: f64, lorentzian_fwhm: f64) -> Self {
        Self {
            natural_linewidth: value("natural_linewidth_423_hz"),
            saturation_parameter: 0.0,
            transit_width: 0.0,
            gaussian_fwhm,
            lorentzian_fwhm,
        }
    }

    /// The widths fitted to the measured spectrum.
    pub fn fitted() -> Self {
        Self::from_widths(value("fitted_gaussian_fwhm_hz"), value("fitted_lorentzian_fwhm_hz"))
    }

    pub fn with_gaussian(mut self, gaussian_fwhm: f64) -> Self {
        self.gaussian_fwhm = gaussian_fwhm;
        self
    }

    pub fn validate(&self) -> Result<(), SpectraError> {
        let widths = [
            self.natural_linewidth,
            self.saturation_parameter,
            self.transit_width,
            self.gaussian_fwhm,
            self.lorentzian_fwhm,
        ];
        if widths.iter().any(|w| !(*w >= 0.0)) {
            return Err(SpectraError::Domain("widths must be non-negative".into()));
        }
        if self.lorentzian_fwhm < self.natural_linewidth {
            return Err(SpectraError::Domain("Lorentzian width below the natural linewidth".into()));
        }
        Ok(())
    }

    pub fn profile(&self, detuning: f64) -> Result<f64, SpectraError> {
        voigt(detuning, self.gaussian_fwhm, self.lorentzian_fwhm)
    }
}

fn require_positive(pairs: &[(&str, f64)]) -> Result<(), SpectraError> {
    for (name, v) in pairs {
        if !(*v > 0.0) || !v.is_finite() {
            return Err(SpectraError::Domain(format!("{name} must be positive, got {v}")));
        }
    }
    Ok(())
}

/// Two-level saturation intensity `pi h c Gamma / (3 lambda^3)`, W/m^2.
pub fn saturation_intensity(wavelength: f64, natural_linewidth: f64) -> Result<f64, SpectraError> {
    require_positive(&[("wavelength", wavelength), ("linewidth", natural_linewidth)])?;
    let gamma = 2.0 * PI * natural_linewidth;
    Ok(PI * PLANCK * SPEED_OF_LIGHT * gamma / (3.0 * wavelength.powi(3)))
}

/// Lorentzian budget for a beam of `power` and `beam_diameter` crossing atoms
/// at `speed`.
///
/// Transit width is `K_tt v / d` with the registry's `transit_time_constant`;
/// the power-broadened and transit widths add linearly. The Gaussian width is
/// left at zero; see [`doppler_gaussian_fwhm`].
pub fn broadening_budget(power: f64, beam_diameter: f64, speed: f64, natural_linewidth: f64) -> Result<LineshapeModel, SpectraError> {
    require_positive(&[
        ("beam diameter", beam_diameter),
        ("speed", speed),
        ("linewidth", natural_linewidth),
    ])?;
    if !(power >= 0.0) {
        return Err(SpectraError::Domain(format!("power must be non-negative, got {power}")));
    }
    let isat = saturation_intensity(value("wavelength_423_m"), natural_linewidth)?;
    let s = power / (PI * (0.5 * beam_diameter).powi(2)) / isat;
    let power_broadened = natural_linewidth * (1.0 + s).sqrt();
    let transit = value("transit_time_constant") * speed / beam_diameter;
    Ok(LineshapeModel {
        natural_linewidth,
        saturation_parameter: s,
        transit_width: transit,
        gaussian_fwhm: 0.0,
        lorentzian_fwhm: power_broadened + transit,
    })
}

/// Residual Doppler width from the beam's transverse velocity spread,
/// `C_geom * 2 (v / lambda) sin(theta / 2)`.
pub fn doppler_gaussian_fwhm(speed: f64, full_divergence_deg: f64, wavelength: f64) -> Result<f64, SpectraError> {
    require_positive(&[("speed", speed), ("wavelength", wavelength)])?;
    if !(0.0..180.0).contains(&full_divergence_deg) {
        return Err(SpectraError::Domain("divergence outside [0, 180) degrees".into()));
    }
    Ok(value("doppler_geometry_factor") * naive_doppler_fwhm(speed, full_divergence_deg, wavelength))
}

/// The uncalibrated form `2 (v / lambda) sin(theta / 2)`.
pub fn naive_doppler_fwhm(speed: f64, full_divergence_deg: f64, wavelength: f64) -> f64 {
    2.0 * speed / wavelength * (0.5 * full_divergence_deg.to_radians()).sin()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    /// Hz, relative to the reference isotope's resonance.
    pub detuning: Vec<f64>,
    pub intensity: Vec<f64>,
    pub sigma: Option<Vec<f64>>,
}

impl Spectrum {
    pub fn new(detuning: Vec<f64>, intensity: Vec<f64>, sigma: Option<Vec<f64>>) -> Result<Self, SpectraError> {
        if detuning.len() != intensity.len() || sigma.as_ref().is_some_and(|s| s.len() != detuning.len()) {
            return Err(SpectraError::InvalidSpectrum("column lengths differ".into()));
        }
        if detuning.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(SpectraError::InvalidSpectrum("grid not strictly increasing".into()));
        }
        if intensity.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(SpectraError::InvalidSpectrum("intensities must be finite and non-negative".into()));
        }
        if let Some(s) = &sigma {
            if s.iter().any(|v| !(*v > 0.0)) {
                return Err(SpectraError::InvalidSpectrum("sigma must be positive".into()));
            }
        }
        Ok(Self { detuning, intensity, sigma })
    }

    pub fn len(&self) -> usize {
        self.detuning.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detuning.is_empty()
    }

    /// CSV `detuning_hz,intensity[,sigma]`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        match &self.sigma {
            Some(s) => {
                writeln!(out, "detuning_hz,intensity,sigma")?;
                for ((d, i), e) in self.detuning.iter().zip(&self.intensity).zip(s) {
                    writeln!(out, "{d:e},{i:e},{e:e}")?;
                }
            }
            None => {
                writeln!(out, "detuning_hz,intensity")?;
                for (d, i) in self.detuning.iter().zip(&self.intensity) {
                    writeln!(out, "{d:e},{i:e}")?;
                }
            }
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self, SpectraError> {
        let bad = |line: usize, msg: &str| SpectraError::InvalidSpectrum(format!("line {line}: {msg}"));
        let mut lines = input.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| bad(1, "empty file"))?;
        let header = header.map_err(|e| bad(1, &e.to_string()))?;
        let with_sigma = match header.trim() {
            "detuning_hz,intensity" => false,
            "detuning_hz,intensity,sigma" => true,
            other => return Err(bad(1, &format!("unexpected header `{other}`"))),
        };
        let (mut d, mut i, mut s) = (Vec::new(), Vec::new(), Vec::new());
        for (k, line) in lines {
            let line = line.map_err(|e| bad(k + 1, &e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<f64> = line
                .split(',')
                .map(|c| c.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| bad(k + 1, &e.to_string()))?;
            if cols.len() != if with_sigma { 3 } else { 2 } {
                return Err(bad(k + 1, "wrong column count"));
            }
            d.push(cols[0]);
            i.push(cols[1]);
            if with_sigma {
                s.push(cols[2]);
            }
        }
        Spectrum::new(d, i, with_sigma.then_some(s))
    }
}

/// Evenly spaced grid of `points` detunings from `start` to `stop` inclusive.
pub fn detuning_grid(start: f64, stop: f64, points: usize) -> Result<Vec<f64>, SpectraError> {
    if points < 2 || !(stop > start) {
        return Err(SpectraError::Domain("grid needs stop > start and at least 2 points".into()));
    }
    Ok((0..points)
        .map(|k| start + (stop - start) * k as f64 / (points - 1) as f64)
        .collect())
}

/// Shot-noise-like perturbation: Gaussian with standard deviation
/// `level * sqrt(I * I_max)`, so the peak point carries relative noise `level`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Noise {
    pub level: f64,
    pub seed: u64,
}

/// Sum over isotopes of `abundance * voigt(detuning - shift_423)`, optionally
/// with seeded noise. Noisy intensities are clipped at zero and carry their
/// per-point sigma.
pub fn synth_spectrum(table: &IsotopeTable, model: &LineshapeModel, grid: &[f64], noise: Option<Noise>) -> Result<Spectrum, SpectraError> {
    let mut clean = Vec::with_capacity(grid.len());
    for &d in grid {
        let mut acc = 0.0;
        for iso in table.iter() {
            acc += iso.natural_abundance * model.profile(d - iso.shift_423)?;
        }
        clean.push(acc);
    }
    let Some(noise) = noise else {
        return Spectrum::new(grid.to_vec(), clean, None);
    };
    if !(noise.level >= 0.0) {
        return Err(SpectraError::Domain("noise level must be non-negative".into()));
    }
    let peak = clean.iter().cloned().fold(0.0, f64::max);
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let sigma: Vec<f64> = clean
        .iter()
        .map(|&i| noise.level * (i.max(1e-6 * peak) * peak).sqrt())
        .collect();
    let noisy = clean
        .iter()
        .zip(&sigma)
        .map(|(&i, &s)| {
            let n: f64 = StandardNormal.sample(&mut rng);
            (i + s * n).max(0.0)
        })
        .collect();
    let sigma = if noise.level > 0.0 { Some(sigma) } else { None };
    Spectrum::new(grid.to_vec(), noisy, sigma)
}

fn ionization_rates(table: &IsotopeTable, model: &LineshapeModel, laser_detuning: f64) -> Result<Vec<f64>, SpectraError> {
    table
        .iter()
        .map(|iso| Ok(iso.natural_abundance * model.profile(laser_detuning - iso.shift_423)?))
        .collect()
}

/// Probability that each isotope (in table order) is the first one ionized,
/// from competition between rates `abundance * voigt(delta - shift)`.
pub fn selectivity(table: &IsotopeTable, model: &LineshapeModel, laser_detuning: f64) -> Result<Vec<f64>, SpectraError> {
    if !(model.gaussian_fwhm > 0.0 || model.lorentzian_fwhm > 0.0) {
        return Err(SpectraError::Domain("model widths must be positive".into()));
    }
    let rates = ionization_rates(table, model, laser_detuning)?;
    let total: f64 = rates.iter().sum();
    if !(total > 0.0) {
        return Err(SpectraError::UndefinedProbability("every ionization rate is zero".into()));
    }
    Ok(rates.iter().map(|r| r / total).collect())
}

/// Ratio of loading times at two laser detunings, `T_b / T_a = r_a / r_b`,
/// where `r` is the total ionization rate summed over isotopes.
pub fn loading_time_ratio(table: &IsotopeTable, model: &LineshapeModel, detuning_a: f64, detuning_b: f64) -> Result<f64, SpectraError> {
    let ra: f64 = ionization_rates(table, model, detuning_a)?.iter().sum();
    let rb: f64 = ionization_rates(table, model, detuning_b)?.iter().sum();
    if !(ra > 0.0 && rb > 0.0) {
        return Err(SpectraError::ZeroRate(format!("rates {ra:e} and {rb:e}")));
    }
    Ok(ra / rb)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::isotopes::{ca40, ca44};

    #[test]
    fn saturation_intensity_at_423nm() {
        let i = saturation_intensity(423e-9, 35.4e6).unwrap();
        assert!((i / 611.0 - 1.0).abs() < 0.01, "{i}");
    }

    #[test]
    fn saturation_intensity_scaling() {
        let base = saturation_intensity(423e-9, 35.4e6).unwrap();
        assert!((saturation_intensity(423e-9, 70.8e6).unwrap() / base - 2.0).abs() < 1e-12);
        assert!((saturation_intensity(211.5e-9, 35.4e6).unwrap() / base - 8.0).abs() < 1e-12);
        assert!(saturation_intensity(0.0, 1.0).is_err());
    }

    #[test]
    fn budget_at_experimental_conditions() {
        let m = broadening_budget(50e-6, 250e-6, 573.0, 35.4e6).unwrap();
        // Independent arithmetic: s = P / (pi r^2) / I_sat with
        // I_sat = pi h c (2 pi 35.4 MHz) / (3 (423 nm)^3).
        let isat = std::f64::consts::PI * 6.62607015e-34 * 299792458.0 * 2.0 * std::f64::consts::PI * 35.4e6
            / (3.0 * 423e-9f64.powi(3));
        let s = 50e-6 / (std::f64::consts::PI * 125e-6f64.powi(2)) / isat;
        assert!((m.saturation_parameter - s).abs() < 1e-12 * s);
        assert!((1.6..=1.7).contains(&m.saturation_parameter));
        let power_only = m.lorentzian_fwhm - m.transit_width;
        assert!((57e6..=59e6).contains(&power_only), "{power_only}");
        assert!((0.5e6..=2.5e6).contains(&m.transit_width), "{}", m.transit_width);
        let fitted = value("fitted_lorentzian_fwhm_hz");
        let sigma = value("fitted_lorentzian_sigma_hz");
        assert!((m.lorentzian_fwhm - fitted).abs() < 2.0 * sigma);
    }

    #[test]
    fn budget_zero_power_limit() {
        let m = broadening_budget(0.0, 250e-6, 573.0, 35.4e6).unwrap();
        assert!((m.lorentzian_fwhm - (35.4e6 + m.transit_width)).abs() < 1e-6);
    }

    #[test]
    fn doppler_width_calibration() {
        let g = doppler_gaussian_fwhm(573.0, 2.54, 423e-9).unwrap();
        assert!((g - 50.2e6).abs() < 0.5e6, "{g}");
        assert_eq!(doppler_gaussian_fwhm(573.0, 0.0, 423e-9).unwrap(), 0.0);
        let g2 = doppler_gaussian_fwhm(2.0 * 573.0, 2.54, 423e-9).unwrap();
        assert!((g2 / g - 2.0).abs() < 1e-12);
        // The uncalibrated formula overshoots by about 20 %.
        let naive = naive_doppler_fwhm(573.0, 2.54, 423e-9);
        assert!((naive / g - 1.0 / value("doppler_geometry_factor")).abs() < 1e-12);
        assert!(naive > 1.15 * g);
    }

    fn grid() -> Vec<f64> {
        detuning_grid(-250e6, 950e6, 241).unwrap()
    }

    #[test]
    fn single_isotope_single_peak() {
        let t = IsotopeTable::new(vec![ca40()]).unwrap();
        let s = synth_spectrum(&t, &LineshapeModel::fitted(), &grid(), None).unwrap();
        let k = (0..s.len()).max_by(|&a, &b| s.intensity[a].total_cmp(&s.intensity[b])).unwrap();
        assert_eq!(s.detuning[k], 0.0);
        for w in s.intensity[k..].windows(2) {
            assert!(w[1] < w[0]);
        }
    }

    #[test]
    fn peak_ratio_follows_abundance() {
        let t = IsotopeTable::calcium();
        let m = LineshapeModel::fitted();
        let s = synth_spectrum(&t, &m, &[0.0, ca44().shift_423], None).unwrap();
        let ratio = s.intensity[0] / s.intensity[1];
        let abundance = ca40().natural_abundance / ca44().natural_abundance;
        // Overlapping wings shift the ratio away from the bare abundance ratio
        // by well under a factor of two.
        assert!((ratio / abundance - 1.0).abs() < 0.5, "{ratio} vs {abundance}");
        let v0 = m.profile(0.0).unwrap();
        let vs = m.profile(ca44().shift_423).unwrap();
        let want = (ca40().natural_abundance * v0 + ca44().natural_abundance * vs)
            / (ca40().natural_abundance * vs + ca44().natural_abundance * v0);
        assert!((ratio - want).abs() < 1e-12 * want);
    }

    #[test]
    fn noise_is_seeded() {
        let t = IsotopeTable::calcium();
        let m = LineshapeModel::fitted();
        let n = Some(Noise { level: 0.02, seed: 5 });
        let a = synth_spectrum(&t, &m, &grid(), n).unwrap();
        let b = synth_spectrum(&t, &m, &grid(), n).unwrap();
        assert_eq!(a, b);
        let c = synth_spectrum(&t, &m, &grid(), Some(Noise { level: 0.02, seed: 6 })).unwrap();
        assert_ne!(a.intensity, c.intensity);
        assert!(a.intensity.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn csv_round_trip() {
        let t = IsotopeTable::calcium();
        let m = LineshapeModel::fitted();
        for noise in [None, Some(Noise { level: 0.02, seed: 1 })] {
            let s = synth_spectrum(&t, &m, &grid(), noise).unwrap();
            let mut buf = Vec::new();
            s.write_csv(&mut buf).unwrap();
            let back = Spectrum::read_csv(buf.as_slice()).unwrap();
            assert_eq!(back, s);
        }
        assert!(Spectrum::read_csv("freq,counts\n".as_bytes()).is_err());
    }

    #[test]
    fn spectrum_invariants() {
        assert!(Spectrum::new(vec![1.0, 1.0], vec![0.0, 0.0], None).is_err());
        assert!(Spectrum::new(vec![1.0, 2.0], vec![0.0, -1.0], None).is_err());
    }

    #[test]
    fn selectivity_on_reference_resonance() {
        let p = selectivity(&IsotopeTable::calcium(), &LineshapeModel::fitted(), 0.0).unwrap();
        assert!(p[0] > 0.999);
    }

    #[test]
    fn selectivity_at_heavy_isotope_resonance() {
        let t = IsotopeTable::calcium();
        let p = selectivity(&t, &LineshapeModel::fitted(), ca44().shift_423).unwrap();
        assert!((0.03..=0.25).contains(&p[0]), "{}", p[0]);
        // Independent evaluation of the two competing rates.
        let m = LineshapeModel::fitted();
        let r40 = 0.969 * voigt(757e6, m.gaussian_fwhm, m.lorentzian_fwhm).unwrap();
        let r44 = 0.024 * voigt(0.0, m.gaussian_fwhm, m.lorentzian_fwhm).unwrap();
        assert!((p[0] - r40 / (r40 + r44)).abs() < 1e-12);
    }

    #[test]
    fn selectivity_undefined_without_widths() {
        let m = LineshapeModel::from_widths(0.0, 0.0);
        assert!(selectivity(&IsotopeTable::calcium(), &m, 0.0).is_err());
    }

    #[test]
    fn selectivity_sharpens_as_widths_shrink() {
        let t = IsotopeTable::calcium();
        let mut last = 0.0;
        for scale in [1.0, 0.3, 0.1, 0.03, 0.01] {
            let m = LineshapeModel::from_widths(50.2e6 * scale, 60.1e6 * scale);
            let p = selectivity(&t, &m, ca44().shift_423).unwrap()[1];
            assert!(p > last);
            last = p;
        }
        assert!(last > 0.99);
    }

    #[test]
    fn loading_time_ratio_identity_and_scale() {
        let t = IsotopeTable::calcium();
        let m = LineshapeModel::fitted();
        assert_eq!(loading_time_ratio(&t, &m, 123e6, 123e6).unwrap(), 1.0);
        let r = loading_time_ratio(&t, &m, 0.0, ca44().shift_423).unwrap();
        assert!(r > 1.0);
        // Scaling every abundance by the same factor leaves the ratio alone.
        let scaled = IsotopeTable::new(
            t.iter()
                .map(|i| crate::isotopes::Isotope { natural_abundance: 0.5 * i.natural_abundance, ..i.clone() })
                .collect(),
        )
        .unwrap();
        let r2 = loading_time_ratio(&scaled, &m, 0.0, ca44().shift_423).unwrap();
        assert!((r2 / r - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn selectivity_normalizes(d in -2e9..2e9f64, g in 1e6..2e8f64, l in 1e6..2e8f64) {
            let p = selectivity(&IsotopeTable::calcium(), &LineshapeModel::from_widths(g, l), d).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
