//! Levenberg-Marquardt fitting of one or more Voigt peaks on a shared baseline.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::voigt::{voigt, voigt_with_gradient};
use super::{SpectraError, Spectrum};
use crate::constants::value;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    /// One standard deviation; zero for pinned or bound-active parameters.
    pub sigma: f64,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Self { value, sigma: 0.0 }
    }
}

/// One fitted peak, `amplitude * voigt(detuning - center) + baseline`.
/// `amplitude` is the peak area in intensity x Hz.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoigtFit {
    pub center: Estimate,
    pub lorentzian_fwhm: Estimate,
    pub gaussian_fwhm: Estimate,
    pub amplitude: Estimate,
    pub baseline: Estimate,
    pub residual_norm: f64,
    pub iterations: usize,
}

impl VoigtFit {
    pub fn initial(center: f64, lorentzian_fwhm: f64, gaussian_fwhm: f64, amplitude: f64, baseline: f64) -> Self {
        Self {
            center: Estimate::exact(center),
            lorentzian_fwhm: Estimate::exact(lorentzian_fwhm),
            gaussian_fwhm: Estimate::exact(gaussian_fwhm),
            amplitude: Estimate::exact(amplitude),
            baseline: Estimate::exact(baseline),
            residual_norm: f64::NAN,
            iterations: 0,
        }
    }

    /// Starting point read off the data: tallest point, half-maximum width
    /// split evenly between the two widths, minimum as baseline.
    pub fn guess(spectrum: &Spectrum) -> Result<Self, SpectraError> {
        if spectrum.is_empty() {
            return Err(SpectraError::InvalidSpectrum("empty spectrum".into()));
        }
        let y = &spectrum.intensity;
        let x = &spectrum.detuning;
        let base = y.iter().cloned().fold(f64::INFINITY, f64::min);
        let k = (0..y.len()).max_by(|&a, &b| y[a].total_cmp(&y[b])).unwrap();
        let height = y[k] - base;
        let half = base + 0.5 * height;
        let lo = (0..k).rev().find(|&j| y[j] < half).unwrap_or(0);
        let hi = (k..y.len()).find(|&j| y[j] < half).unwrap_or(y.len() - 1);
        let width = (x[hi] - x[lo]).max(x[1.min(x.len() - 1)] - x[0]);
        let (l, g) = (0.5 * width, 0.5 * width);
        let amplitude = height / voigt(0.0, g, l)?;
        Ok(Self::initial(x[k], l, g, amplitude, base))
    }

    pub fn eval(&self, detuning: f64) -> Result<f64, SpectraError> {
        Ok(self.baseline.value
            + self.amplitude.value * voigt(detuning - self.center.value, self.gaussian_fwhm.value, self.lorentzian_fwhm.value)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Param {
    Center,
    Lorentzian,
    Gaussian,
    Amplitude,
    Baseline,
}

/// Holds `param` of peak `peak` at its initial value. Baseline pins ignore the
/// peak index since the baseline is shared.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pin {
    pub peak: usize,
    pub param: Param,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConstraints {
    /// Lower bound on every Lorentzian width, Hz.
    pub min_lorentzian: Option<f64>,
    pub pinned: Vec<Pin>,
    pub max_iterations: usize,
}

impl Default for FitConstraints {
    fn default() -> Self {
        Self {
            min_lorentzian: None,
            pinned: Vec::new(),
            max_iterations: 500,
        }
    }
}

impl FitConstraints {
    /// Lorentzian width bounded below by the natural linewidth.
    pub fn physical() -> Self {
        Self {
            min_lorentzian: Some(value("natural_linewidth_423_hz")),
            ..Self::default()
        }
    }

    pub fn pin(mut self, peak: usize, param: Param) -> Self {
        self.pinned.push(Pin { peak, param });
        self
    }
}

const PER_PEAK: usize = 4;

struct Problem<'a> {
    x: &'a [f64],
    y: &'a [f64],
    weight: Vec<f64>,
    peaks: usize,
    lower: Vec<f64>,
}

impl Problem<'_> {
    fn model(&self, p: &[f64], d: f64) -> f64 {
        let mut f = p[self.peaks * PER_PEAK];
        for k in 0..self.peaks {
            let q = &p[k * PER_PEAK..];
            f += q[3] * voigt_with_gradient(d - q[0], q[2], q[1]).0;
        }
        f
    }

    fn residuals(&self, p: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            self.x.len(),
            self.x.iter().zip(self.y).zip(&self.weight).map(|((&d, &y), &w)| (y - self.model(p, d)) * w),
        )
    }

    fn jacobian(&self, p: &[f64], free: &[usize]) -> DMatrix<f64> {
        let mut full = DMatrix::zeros(self.x.len(), p.len());
        for (i, (&d, &w)) in self.x.iter().zip(&self.weight).enumerate() {
            for k in 0..self.peaks {
                let q = &p[k * PER_PEAK..];
                let (v, [dx, dg, dl]) = voigt_with_gradient(d - q[0], q[2], q[1]);
                let c = k * PER_PEAK;
                full[(i, c)] = -q[3] * dx * w;
                full[(i, c + 1)] = q[3] * dl * w;
                full[(i, c + 2)] = q[3] * dg * w;
                full[(i, c + 3)] = v * w;
            }
            full[(i, self.peaks * PER_PEAK)] = w;
        }
        full.select_columns(free)
    }

    fn clamp(&self, p: &mut [f64]) {
        for (v, lo) in p.iter_mut().zip(&self.lower) {
            if *v < *lo {
                *v = *lo;
            }
        }
    }
}

fn pack(initial: &[VoigtFit]) -> Vec<f64> {
    let mut p = Vec::with_capacity(initial.len() * PER_PEAK + 1);
    for f in initial {
        p.extend([f.center.value, f.lorentzian_fwhm.value, f.gaussian_fwhm.value, f.amplitude.value]);
    }
    p.push(initial[0].baseline.value);
    p
}

fn unpack(p: &[f64], sigma: &[f64], peaks: usize, residual_norm: f64, iterations: usize) -> Vec<VoigtFit> {
    let b = peaks * PER_PEAK;
    let e = |i: usize| Estimate { value: p[i], sigma: sigma[i] };
    (0..peaks)
        .map(|k| {
            let c = k * PER_PEAK;
            VoigtFit {
                center: e(c),
                lorentzian_fwhm: e(c + 1),
                gaussian_fwhm: e(c + 2),
                amplitude: e(c + 3),
                baseline: e(b),
                residual_norm,
                iterations,
            }
        })
        .collect()
}

/// Single-peak fit; see [`fit_voigt_peaks`].
pub fn fit_voigt(spectrum: &Spectrum, initial: &VoigtFit, constraints: &FitConstraints) -> Result<VoigtFit, SpectraError> {
    fit_voigt_peaks(spectrum, std::slice::from_ref(initial), constraints).map(|v| v[0])
}

/// Damped Gauss-Newton fit of `baseline + sum_k A_k voigt(d - c_k; G_k, L_k)`.
///
/// The baseline is shared and taken from `initial[0]`. Residuals are weighted
/// by `1/sigma` when the spectrum carries uncertainties, and the covariance is
/// then absolute; otherwise it is scaled by the reduced chi-square. Widths are
/// bounded below (Lorentzian by `min_lorentzian`), and parameters sitting on a
/// bound at the optimum report zero sigma, like pinned ones.
pub fn fit_voigt_peaks(spectrum: &Spectrum, initial: &[VoigtFit], constraints: &FitConstraints) -> Result<Vec<VoigtFit>, SpectraError> {
    let n = spectrum.len();
    if n < 8 {
        return Err(SpectraError::Domain(format!("need at least 8 points, got {n}")));
    }
    if initial.is_empty() {
        return Err(SpectraError::Domain("no peaks to fit".into()));
    }
    let (lo, hi) = (spectrum.detuning[0], spectrum.detuning[n - 1]);
    for f in initial {
        if !(lo..=hi).contains(&f.center.value) {
            return Err(SpectraError::Domain(format!("initial center {:e} Hz outside the grid", f.center.value)));
        }
    }
    if spectrum.intensity.iter().all(|&v| v == spectrum.intensity[0]) {
        return Err(SpectraError::Degenerate("spectrum carries no signal".into()));
    }
    let peaks = initial.len();
    let dim = peaks * PER_PEAK + 1;
    let floor = 1e-6 * (hi - lo);
    let mut lower = vec![f64::NEG_INFINITY; dim];
    for k in 0..peaks {
        lower[k * PER_PEAK + 1] = constraints.min_lorentzian.unwrap_or(0.0).max(floor);
        lower[k * PER_PEAK + 2] = floor;
    }
    let mut fixed = vec![false; dim];
    for pin in &constraints.pinned {
        let idx = match pin.param {
            Param::Baseline => dim - 1,
            other => {
                if pin.peak >= peaks {
                    return Err(SpectraError::Domain(format!("pin refers to missing peak {}", pin.peak)));
                }
                pin.peak * PER_PEAK
                    + match other {
                        Param::Center => 0,
                        Param::Lorentzian => 1,
                        Param::Gaussian => 2,
                        _ => 3,
                    }
            }
        };
        fixed[idx] = true;
    }
    let free: Vec<usize> = (0..dim).filter(|&i| !fixed[i]).collect();
    if free.is_empty() {
        return Err(SpectraError::Domain("every parameter is pinned".into()));
    }
    let weight = match &spectrum.sigma {
        Some(s) => s.iter().map(|v| 1.0 / v).collect(),
        None => vec![1.0; n],
    };
    let problem = Problem {
        x: &spectrum.detuning,
        y: &spectrum.intensity,
        weight,
        peaks,
        lower,
    };

    let mut p = pack(initial);
    problem.clamp(&mut p);
    let mut r = problem.residuals(&p);
    let mut cost = r.norm_squared();
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < constraints.max_iterations {
        iterations += 1;
        let j = problem.jacobian(&p, &free);
        let a = j.transpose() * &j;
        let g = j.transpose() * &r;
        if (0..free.len()).any(|i| !(a[(i, i)] > 0.0)) {
            return Err(SpectraError::Degenerate("a free parameter has no effect on the model".into()));
        }
        let mut accepted = false;
        while lambda < 1e20 {
            let mut m = a.clone();
            for i in 0..free.len() {
                m[(i, i)] += lambda * a[(i, i)];
            }
            let Some(chol) = m.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let step = chol.solve(&g);
            let mut trial = p.clone();
            for (s, &i) in step.iter().zip(&free) {
                trial[i] += s;
            }
            problem.clamp(&mut trial);
            let r_trial = problem.residuals(&trial);
            let c_trial = r_trial.norm_squared();
            if c_trial.is_finite() && c_trial < cost {
                let small_step = free.iter().all(|&i| (trial[i] - p[i]).abs() <= 1e-12 * (p[i].abs() + floor));
                let small_gain = cost - c_trial <= 1e-14 * cost;
                p = trial;
                r = r_trial;
                cost = c_trial;
                lambda = (lambda / 10.0).max(1e-12);
                accepted = true;
                converged = small_step || small_gain;
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            // No descent direction left at working precision.
            converged = true;
        }
        if converged {
            break;
        }
    }

    let residual_norm = cost.sqrt();
    if !converged {
        return Err(SpectraError::NonConvergence {
            iterations,
            best: unpack(&p, &vec![0.0; dim], peaks, residual_norm, iterations),
        });
    }

    // Covariance over the parameters that are free and off their bounds.
    let active: Vec<usize> = free.iter().copied().filter(|&i| p[i] > problem.lower[i]).collect();
    let mut sigma = vec![0.0; dim];
    if !active.is_empty() {
        let j = problem.jacobian(&p, &active);
        let a = j.transpose() * &j;
        let d = DVector::from_iterator(active.len(), (0..active.len()).map(|i| 1.0 / a[(i, i)].sqrt()));
        let scaled = DMatrix::from_fn(active.len(), active.len(), |i, k| a[(i, k)] * d[i] * d[k]);
        let inv = scaled
            .cholesky()
            .ok_or_else(|| SpectraError::Degenerate("singular normal equations at the optimum".into()))?
            .inverse();
        let dof = n.saturating_sub(active.len()).max(1) as f64;
        let factor = if spectrum.sigma.is_some() { 1.0 } else { cost / dof };
        for (pos, &i) in active.iter().enumerate() {
            sigma[i] = (inv[(pos, pos)] * factor).sqrt() * d[pos];
        }
    }
    Ok(unpack(&p, &sigma, peaks, residual_norm, iterations))
}
