use std::f64::consts::PI;

use nalgebra::{DMatrix, Vector3};
use proptest::prelude::*;

use super::*;
use crate::constants::{value, COULOMB};
use crate::isotopes::{ca40, ca44};

fn trap_1mhz() -> ChainTrap {
    let w = 2.0 * PI * 1e6;
    ChainTrap::new(ca40().mass, w, 8.0 * w, 8.5 * w).unwrap()
}

fn chain_of(pattern: &str, trap: &ChainTrap) -> IonChain {
    let species: Vec<_> = pattern
        .chars()
        .map(|c| if c == 'a' { ca40() } else { ca44() })
        .collect();
    equilibrium_positions(&species, trap).unwrap()
}

/// Cyclic Jacobi eigenvalue iteration, used as an independent oracle.
fn jacobi_eigenvalues(mut a: DMatrix<f64>) -> Vec<f64> {
    let n = a.nrows();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[(i, j)].powi(2)).sum();
        if off.sqrt() < 1e-15 * a.norm() {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[(p, q)] == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[(k, p)], a[(k, q)]);
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[(p, k)], a[(q, k)]);
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut e: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    e.sort_by(f64::total_cmp);
    e
}

#[test]
fn single_ion_sits_at_the_center() {
    let c = chain_of("a", &trap_1mhz());
    assert_eq!(c.positions[0], Vector3::zeros());
}

#[test]
fn two_ion_spacing_matches_grid_scan() {
    let trap = trap_1mhz();
    let c = chain_of("aa", &trap);
    let spacing = c.positions[1].z - c.positions[0].z;
    assert!((spacing - 5.6e-6).abs() < 0.05e-6, "{spacing}");
    // Brute-force scan of E(d) = k d^2 / 4 + C / d, then a refined scan.
    let k = ca40().mass * trap.axial * trap.axial;
    let q = ca40().charge;
    let e = |d: f64| 0.25 * k * d * d + COULOMB * q * q / d;
    let scan = |lo: f64, hi: f64, n: usize| {
        (0..=n)
            .map(|i| lo + (hi - lo) * i as f64 / n as f64)
            .min_by(|a, b| e(*a).total_cmp(&e(*b)))
            .unwrap()
    };
    let coarse = scan(1e-6, 20e-6, 19_000);
    let cell = 1e-12;
    let fine = scan(coarse - 1e-9, coarse + 1e-9, 2000);
    assert!((fine - spacing).abs() < 2.0 * cell, "{fine} vs {spacing}");
}

#[test]
fn equilibrium_gradient_is_small() {
    let trap = trap_1mhz();
    for pattern in ["ab", "aab", "abba", "babab", "aaaaaa"] {
        let c = chain_of(pattern, &trap);
        let scale = c.force_scale();
        assert!(c.gradient_norm() < 1e-10 * scale, "{pattern}");
        assert!(c.positions.windows(2).all(|w| w[1].z > w[0].z));
    }
}

#[test]
fn mirror_symmetric_species_give_mirror_positions() {
    let trap = trap_1mhz();
    for pattern in ["aba", "abba", "baaab", "abaaba"] {
        let c = chain_of(pattern, &trap);
        let n = c.len();
        for i in 0..n {
            assert!((c.positions[i].z + c.positions[n - 1 - i].z).abs() < 1e-12 * trap.length_scale(ca40().charge), "{pattern}");
        }
    }
}

#[test]
fn equal_mass_axial_ratios() {
    let trap = trap_1mhz();
    let m2 = normal_modes(&chain_of("aa", &trap)).unwrap();
    let r2 = [1.0, 3f64.sqrt()];
    for (w, r) in m2.axial.frequencies.iter().zip(r2) {
        assert!((w / trap.axial - r).abs() < 1e-9 * r);
    }
    let m3 = normal_modes(&chain_of("aaa", &trap)).unwrap();
    let r3 = [1.0, 3f64.sqrt(), (29.0f64 / 5.0).sqrt()];
    for (w, r) in m3.axial.frequencies.iter().zip(r3) {
        assert!((w / trap.axial - r).abs() < 1e-9 * r);
    }
}

#[test]
fn mixed_pair_matches_two_by_two_oracle() {
    let trap = trap_1mhz();
    let c = chain_of("ab", &trap);
    let m = normal_modes(&c).unwrap();
    // Axial Hessian [[k + 2C/d^3, -2C/d^3], [-2C/d^3, k + 2C/d^3]] mass-weighted.
    let k = ca40().mass * trap.axial * trap.axial;
    let d = c.positions[1].z - c.positions[0].z;
    let kc = 2.0 * COULOMB * ca40().charge * ca44().charge / d.powi(3);
    let (m1, m2) = (ca40().mass, ca44().mass);
    let a = (k + kc) / m1;
    let b = (k + kc) / m2;
    let off = kc / (m1 * m2).sqrt();
    let mean = 0.5 * (a + b);
    let disc = (0.25 * (a - b).powi(2) + off * off).sqrt();
    let want = [(mean - disc).sqrt(), (mean + disc).sqrt()];
    for (w, v) in m.axial.frequencies.iter().zip(want) {
        assert!((w / v - 1.0).abs() < 1e-12);
    }
    let single_44 = (k / m2).sqrt();
    let single_40 = (k / m1).sqrt();
    assert!(m.axial.frequencies[0] > single_44 && m.axial.frequencies[0] < single_40);
}

#[test]
fn hessian_matches_finite_difference_of_gradient() {
    let trap = trap_1mhz();
    let c = chain_of("abaab", &trap);
    let h = c.hessian();
    let n = c.len();
    let step = 1e-6 * trap.length_scale(ca40().charge);
    for col in 0..3 * n {
        let mut plus = c.positions.clone();
        let mut minus = c.positions.clone();
        plus[col / 3][col % 3] += step;
        minus[col / 3][col % 3] -= step;
        let gp = c.gradient(&plus);
        let gm = c.gradient(&minus);
        for row in 0..3 * n {
            let fd = (gp[row / 3][row % 3] - gm[row / 3][row % 3]) / (2.0 * step);
            assert!((fd - h[(row, col)]).abs() < 1e-6 * h.amax(), "({row},{col})");
        }
    }
}

#[test]
fn modes_match_brute_force_diagonalization_up_to_six_ions() {
    let trap = trap_1mhz();
    for pattern in ["ab", "aba", "abba", "aabab", "babaab", "bbaaaa"] {
        let c = chain_of(pattern, &trap);
        let h = c.hessian();
        let n = 3 * c.len();
        let w = DMatrix::from_fn(n, n, |i, j| {
            h[(i, j)] / (c.species[i / 3].mass * c.species[j / 3].mass).sqrt()
        });
        let oracle: Vec<f64> = jacobi_eigenvalues(w).into_iter().map(f64::sqrt).collect();
        let ours = normal_modes(&c).unwrap().all_frequencies();
        for (a, b) in ours.iter().zip(&oracle) {
            assert!((a / b - 1.0).abs() < 1e-9, "{pattern}: {a} vs {b}");
        }
    }
}

#[test]
fn eigenvectors_orthonormal_and_complete() {
    let trap = trap_1mhz();
    let m = normal_modes(&chain_of("abaaba", &trap)).unwrap();
    for (_, b) in m.blocks() {
        let gram = b.vectors.transpose() * &b.vectors;
        assert!((gram - DMatrix::identity(b.len(), b.len())).amax() < 1e-10);
        for i in 0..b.len() {
            let s: f64 = b.vectors.row(i).iter().map(|v| v * v).sum();
            assert!((s - 1.0).abs() < 1e-10);
        }
    }
}

#[test]
fn heavier_isotope_never_raises_axial_modes() {
    let trap = trap_1mhz();
    for n in 2..=6 {
        let base = normal_modes(&chain_of(&"a".repeat(n), &trap)).unwrap();
        for k in 0..n {
            let pattern: String = (0..n).map(|i| if i == k { 'b' } else { 'a' }).collect();
            let swapped = normal_modes(&chain_of(&pattern, &trap)).unwrap();
            for (a, b) in swapped.axial.frequencies.iter().zip(&base.axial.frequencies) {
                assert!(*a <= b * (1.0 + 1e-12), "{pattern}");
            }
        }
    }
}

#[test]
fn zigzag_threshold_is_a_structural_error() {
    let w = 2.0 * PI * 1e6;
    let weak = ChainTrap::new(ca40().mass, w, 1.3 * w, 1.3 * w).unwrap();
    let species = vec![ca40(); 6];
    assert!(matches!(
        equilibrium_positions(&species, &weak),
        Err(CrystalError::StructuralTransition { ions: 6, .. })
    ));
}

#[test]
fn off_equilibrium_chain_is_rejected() {
    let mut c = chain_of("aa", &trap_1mhz());
    c.positions[0].z *= 0.9;
    assert!(matches!(normal_modes(&c), Err(CrystalError::NotAtEquilibrium(_))));
}

#[test]
fn coverage_with_every_ion_a_coolant_is_uniform() {
    let m = normal_modes(&chain_of("abaab", &trap_1mhz())).unwrap();
    let r = mode_coverage(&m, &[0, 1, 2, 3, 4], 1000.0, 0.0, ModeSet::All).unwrap();
    assert!(r.damping.iter().all(|g| (g - 1000.0).abs() < 1e-9));
    assert_eq!(r.damping.len(), 15);
}

#[test]
fn coverage_without_coolants_is_zero() {
    let m = normal_modes(&chain_of("aaa", &trap_1mhz())).unwrap();
    let r = mode_coverage(&m, &[], 1000.0, 1.0, ModeSet::All).unwrap();
    assert!(r.damping.iter().all(|g| *g == 0.0));
    assert!(!r.coolable.iter().any(|c| *c));
}

#[test]
fn coverage_depends_on_coolant_placement() {
    let trap = trap_1mhz();
    let ends = normal_modes(&chain_of("baaaab", &trap)).unwrap();
    let middle = normal_modes(&chain_of("aabbaa", &trap)).unwrap();
    let a = mode_coverage(&ends, &[0, 5], 1000.0, 0.0, ModeSet::All).unwrap();
    let b = mode_coverage(&middle, &[2, 3], 1000.0, 0.0, ModeSet::All).unwrap();
    assert!((a.minimum - b.minimum).abs() > 1e-3 * a.minimum.max(b.minimum), "{} vs {}", a.minimum, b.minimum);
}

#[test]
fn coverage_input_errors() {
    let m = normal_modes(&chain_of("aaa", &trap_1mhz())).unwrap();
    assert!(matches!(mode_coverage(&m, &[3], 1.0, 0.0, ModeSet::All), Err(CrystalError::Input(_))));
    assert!(matches!(mode_coverage(&m, &[1, 1], 1.0, 0.0, ModeSet::All), Err(CrystalError::Input(_))));
    assert!(matches!(mode_coverage(&m, &[0], 0.0, 0.0, ModeSet::All), Err(CrystalError::Domain(_))));
}

#[test]
fn zero_heating_scans_to_the_limit() {
    let s = max_coolable_chain(&ca44(), 2, &ca40(), &ChainTrap::standard(), 1000.0, 0.0, ModeSet::Axial, 6).unwrap();
    assert_eq!(s.verdict, ScanVerdict::ScanLimit);
    assert_eq!(s.n_max, 6);
}

#[test]
fn calibrated_profile_holds_four_sympathetic_ions() {
    let s = max_coolable_chain(
        &ca44(),
        2,
        &ca40(),
        &ChainTrap::standard(),
        value("coverage_per_coolant_damping_per_s"),
        value("coverage_heating_rate_per_s"),
        ModeSet::Axial,
        10,
    )
    .unwrap();
    assert_eq!(s.n_max, value("observed_max_sc_ions") as usize);
    assert_eq!(s.verdict, ScanVerdict::HeatingLimited);
}

#[test]
fn n_max_non_increasing_in_heating() {
    let damping = value("coverage_per_coolant_damping_per_s");
    let mut last = usize::MAX;
    for heating in [0.0, 50.0, 120.0, 165.0, 190.0, 300.0, 460.0, 1000.0] {
        let s = max_coolable_chain(&ca44(), 2, &ca40(), &ChainTrap::standard(), damping, heating, ModeSet::Axial, 8).unwrap();
        assert!(s.n_max <= last, "{heating}");
        last = s.n_max;
    }
}

#[test]
fn greedy_fallback_beyond_exhaustive_limit() {
    let s = max_coolable_chain(&ca44(), 2, &ca40(), &ChainTrap::standard(), 1000.0, 0.0, ModeSet::Axial, EXHAUSTIVE_LIMIT).unwrap();
    let last = s.entries.last().unwrap();
    assert!(!last.exhaustive);
    assert_eq!(last.placement.len(), 2);
}

#[test]
fn scan_is_deterministic() {
    let run = || max_coolable_chain(&ca44(), 2, &ca40(), &ChainTrap::standard(), 1000.0, 165.0, ModeSet::All, 8).unwrap();
    assert_eq!(run(), run());
}

#[test]
fn report_serializes_in_hz() {
    let trap = trap_1mhz();
    let c = chain_of("aa", &trap);
    let m = normal_modes(&c).unwrap();
    let r = ModeReport::new(&c, &m);
    assert!((r.blocks[0].frequencies_hz[0] - 1e6).abs() < 1e-3);
    let json = serde_json::to_string(&r).unwrap();
    let back: ModeReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, r);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn coverage_minimum_bounded_by_mean(pattern in prop::collection::vec(any::<bool>(), 2..7), pick in prop::collection::vec(any::<bool>(), 7)) {
        let trap = trap_1mhz();
        let species: Vec<_> = pattern.iter().map(|b| if *b { ca44() } else { ca40() }).collect();
        let chain = equilibrium_positions(&species, &trap).unwrap();
        let m = normal_modes(&chain).unwrap();
        let n = species.len();
        let coolants: Vec<usize> = (0..n).filter(|&i| pick[i]).collect();
        let r = mode_coverage(&m, &coolants, 1.0, 0.0, ModeSet::All).unwrap();
        prop_assert!(r.minimum <= coolants.len() as f64 / n as f64 + 1e-12);
        prop_assert!(r.damping.iter().all(|g| *g >= 0.0));
    }

    #[test]
    fn equal_mass_frequencies_ignore_labels(n in 2usize..7, shift in 0usize..7) {
        // Relabeling identical ions (rotating names) leaves the spectrum intact.
        let trap = trap_1mhz();
        let mut species = vec![ca40(); n];
        for (i, s) in species.iter_mut().enumerate() {
            s.name = format!("ion{}", (i + shift) % n);
        }
        let a = normal_modes(&equilibrium_positions(&species, &trap).unwrap()).unwrap();
        let b = normal_modes(&equilibrium_positions(&vec![ca40(); n], &trap).unwrap()).unwrap();
        prop_assert_eq!(a.all_frequencies(), b.all_frequencies());
    }
}
