//! Voigt profile through the Faddeeva function `w(z) = exp(-z^2) erfc(-iz)`.

use std::f64::consts::{LN_2, PI};
use std::sync::OnceLock;

use num_complex::Complex64;

use super::SpectraError;

const TERMS: usize = 32;

struct Weideman {
    scale: f64,
    coeffs: [f64; TERMS],
}

fn weideman() -> &'static Weideman {
    static TABLE: OnceLock<Weideman> = OnceLock::new();
    TABLE.get_or_init(|| {
        // Rational expansion of Weideman (SIAM J. Numer. Anal. 31, 1994) with
        // the cosine transform written out instead of an FFT.
        let n = TERMS as f64;
        let m = 2 * TERMS;
        let scale = (n / 2f64.sqrt()).sqrt();
        let samples: Vec<(f64, f64)> = (-(m as i64) + 1..m as i64)
            .map(|k| {
                let theta = k as f64 * PI / m as f64;
                let t = scale * (0.5 * theta).tan();
                (k as f64, (-t * t).exp() * (scale * scale + t * t))
            })
            .collect();
        let mut coeffs = [0.0; TERMS];
        for (j, c) in coeffs.iter_mut().enumerate() {
            let order = (j + 1) as f64;
            *c = samples
                .iter()
                .map(|&(k, f)| f * (PI * k * order / m as f64).cos())
                .sum::<f64>()
                / (2 * m) as f64;
        }
        Weideman { scale, coeffs }
    })
}

/// Faddeeva function for `Im z >= 0`.
pub fn faddeeva(z: Complex64) -> Complex64 {
    let Weideman { scale, coeffs } = weideman();
    let i = Complex64::i();
    let denom = *scale - i * z;
    let big_z = (*scale + i * z) / denom;
    let mut p = Complex64::new(0.0, 0.0);
    for c in coeffs.iter().rev() {
        p = p * big_z + *c;
    }
    2.0 * p / (denom * denom) + 1.0 / (PI.sqrt() * denom)
}

fn faddeeva_derivative(z: Complex64, w: Complex64) -> Complex64 {
    -2.0 * z * w + Complex64::new(0.0, 2.0 / PI.sqrt())
}

pub(crate) fn sigma_of(gaussian_fwhm: f64) -> f64 {
    gaussian_fwhm / (2.0 * (2.0 * LN_2).sqrt())
}

fn lorentzian(x: f64, fwhm: f64) -> f64 {
    let g = 0.5 * fwhm;
    g / (PI * (x * x + g * g))
}

fn gaussian(x: f64, fwhm: f64) -> f64 {
    let s = sigma_of(fwhm);
    (-0.5 * (x / s).powi(2)).exp() / (s * (2.0 * PI).sqrt())
}

/// Unit-area Voigt density (1/Hz) at `detuning` for the given FWHMs (Hz).
pub fn voigt(detuning: f64, gaussian_fwhm: f64, lorentzian_fwhm: f64) -> Result<f64, SpectraError> {
    if !(gaussian_fwhm >= 0.0 && lorentzian_fwhm >= 0.0) || !detuning.is_finite() {
        return Err(SpectraError::Domain("widths must be non-negative and detuning finite".into()));
    }
    match (gaussian_fwhm > 0.0, lorentzian_fwhm > 0.0) {
        (false, false) => Err(SpectraError::Degenerate("both widths are zero".into())),
        (false, true) => Ok(lorentzian(detuning, lorentzian_fwhm)),
        (true, false) => Ok(gaussian(detuning, gaussian_fwhm)),
        (true, true) => Ok(voigt_with_gradient(detuning, gaussian_fwhm, lorentzian_fwhm).0),
    }
}

/// Value and partial derivatives `(dV/dx, dV/dG, dV/dL)` for strictly positive
/// widths.
pub(crate) fn voigt_with_gradient(x: f64, gaussian_fwhm: f64, lorentzian_fwhm: f64) -> (f64, [f64; 3]) {
    let sigma = sigma_of(gaussian_fwhm);
    let gamma = 0.5 * lorentzian_fwhm;
    let root = sigma * 2f64.sqrt();
    let norm = 1.0 / (sigma * (2.0 * PI).sqrt());
    let z = Complex64::new(x, gamma) / root;
    let w = faddeeva(z);
    let dw = faddeeva_derivative(z, w);
    let v = w.re * norm;
    let dx = dw.re / root * norm;
    let dgamma = -dw.im / root * norm;
    let dsigma = (dw * (-z / sigma)).re * norm - v / sigma;
    (v, [dx, dsigma * sigma_of(1.0), dgamma * 0.5])
}

/// Full width at half maximum of the Voigt profile, found by bisection.
pub fn voigt_fwhm(gaussian_fwhm: f64, lorentzian_fwhm: f64) -> Result<f64, SpectraError> {
    let peak = voigt(0.0, gaussian_fwhm, lorentzian_fwhm)?;
    let (mut lo, mut hi) = (0.0, gaussian_fwhm + lorentzian_fwhm);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if voigt(mid, gaussian_fwhm, lorentzian_fwhm)? > 0.5 * peak {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo + hi)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    /// Direct convolution of the Gaussian and Lorentzian by composite Simpson
    /// over +-14 sigma of the Gaussian factor.
    fn convolution(x: f64, g: f64, l: f64) -> f64 {
        let s = sigma_of(g);
        let span = 14.0 * s;
        let n = 40_000;
        let h = 2.0 * span / n as f64;
        let f = |t: f64| gaussian(t, g) * lorentzian(x - t, l);
        let mut acc = f(-span) + f(span);
        for k in 1..n {
            acc += f(-span + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
        }
        acc * h / 3.0
    }

    #[test]
    fn lorentzian_limit() {
        let l = 60.1e6;
        assert!((voigt(0.0, 0.0, l).unwrap() - 2.0 / (PI * l)).abs() < 1e-24);
    }

    #[test]
    fn gaussian_limit() {
        let g = 50.2e6;
        let s = g / (2.0 * (2.0 * LN_2).sqrt());
        assert!((voigt(0.0, g, 0.0).unwrap() - 1.0 / (s * (2.0 * PI).sqrt())).abs() < 1e-24);
        // Nearly Gaussian profile approaches the limit continuously.
        let near = voigt(0.0, g, 1e-6 * g).unwrap();
        assert!((near / voigt(0.0, g, 0.0).unwrap() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn degenerate_widths() {
        assert!(matches!(voigt(0.0, 0.0, 0.0), Err(SpectraError::Degenerate(_))));
        assert!(matches!(voigt(0.0, -1.0, 1.0), Err(SpectraError::Domain(_))));
    }

    #[test]
    fn matches_convolution_on_fig4_widths() {
        let (g, l) = (50.2e6, 60.1e6);
        for k in -100..=100 {
            let x = k as f64 * 10e6;
            let want = convolution(x, g, l);
            let got = voigt(x, g, l).unwrap();
            assert!((got / want - 1.0).abs() < 1e-6, "x={x}: {got} vs {want}");
        }
    }

    #[test]
    fn matches_convolution_across_width_ratios() {
        for ratio in [0.01, 0.1, 1.0, 10.0, 100.0] {
            let g = 50e6;
            let l = ratio * g;
            for k in -40..=40 {
                let x = k as f64 * 0.1 * (g + l);
                let want = convolution(x, g, l);
                let got = voigt(x, g, l).unwrap();
                assert!((got / want - 1.0).abs() < 1e-6, "ratio {ratio} x={x}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn unit_area() {
        let (g, l) = (50.2e6, 60.1e6);
        let simpson = |span: f64, n: usize| {
            let h = 2.0 * span / n as f64;
            let mut acc = voigt(-span, g, l).unwrap() + voigt(span, g, l).unwrap();
            for k in 1..n {
                acc += voigt(-span + k as f64 * h, g, l).unwrap() * if k % 2 == 1 { 4.0 } else { 2.0 };
            }
            acc * h / 3.0
        };
        // Over +-50 combined widths the Lorentzian wings beyond the window
        // still hold 2 gamma / (pi X) of the area, about 0.35 %.
        let span = 50.0 * (g + l);
        let tail = 2.0 * (0.5 * l) / (PI * span);
        let area = simpson(span, 200_000) + tail;
        assert!((area - 1.0).abs() < 1e-6, "{area}");
        let wide = simpson(500.0 * (g + l), 2_000_000);
        assert!((0.999..=1.0).contains(&wide), "{wide}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (g, l) = (50.2e6, 60.1e6);
        for x in [-300e6, -40e6, 0.0, 25e6, 180e6] {
            let (_, grad) = voigt_with_gradient(x, g, l);
            let h = 1e3;
            let fd = [
                (voigt(x + h, g, l).unwrap() - voigt(x - h, g, l).unwrap()) / (2.0 * h),
                (voigt(x, g + h, l).unwrap() - voigt(x, g - h, l).unwrap()) / (2.0 * h),
                (voigt(x, g, l + h).unwrap() - voigt(x, g, l - h).unwrap()) / (2.0 * h),
            ];
            let scale = voigt(0.0, g, l).unwrap() / g;
            for k in 0..3 {
                assert!((grad[k] - fd[k]).abs() < 1e-6 * scale, "x={x} k={k}: {} vs {}", grad[k], fd[k]);
            }
        }
    }

    #[test]
    fn fwhm_limits() {
        assert!((voigt_fwhm(0.0, 60e6).unwrap() / 60e6 - 1.0).abs() < 1e-10);
        assert!((voigt_fwhm(50e6, 0.0).unwrap() / 50e6 - 1.0).abs() < 1e-10);
    }

    proptest! {
        #[test]
        fn symmetric(x in 0.0..2e9f64, g in 1e5..2e8f64, l in 1e5..2e8f64) {
            let a = voigt(x, g, l).unwrap();
            let b = voigt(-x, g, l).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.abs());
        }

        #[test]
        fn fwhm_monotone(g in 1e6..2e8f64, l in 1e6..2e8f64, bump in 1e5..1e7f64) {
            let base = voigt_fwhm(g, l).unwrap();
            prop_assert!(voigt_fwhm(g + bump, l).unwrap() > base);
            prop_assert!(voigt_fwhm(g, l + bump).unwrap() > base);
        }
    }
}
