//! How much the through-hole perturbs the static trapping potential.

use std::io::Write;

use nalgebra::Vector3;

use super::layout::{ElectrodeLayout, TrapDrive};
use super::potential::Trap;
use super::TrapError;

/// Edge of the cube over which the distortion is sampled.
pub const SAMPLE_CUBE_EDGE: f64 = 50e-6;
const SAMPLES_PER_EDGE: usize = 11;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistortionRow {
    pub hole_side: f64,
    pub distortion: f64,
}

/// Max `|V_with_hole - V_without_hole|` over a 50 um cube centered above the
/// hole at `height`, for each hole side.
pub fn hole_distortion_scan(
    layout: &ElectrodeLayout,
    drive: &TrapDrive,
    hole_sizes: &[f64],
    height: f64,
) -> Result<Vec<DistortionRow>, TrapError> {
    if !(height > 0.5 * SAMPLE_CUBE_EDGE) {
        return Err(TrapError::Domain(format!(
            "sampling height {height:e} m puts the cube below the surface"
        )));
    }
    let reference = Trap::new(&layout.with_hole(0.0)?, drive)?;
    let center = Vector3::new(layout.hole_center.x, layout.hole_center.y, height);
    let points = cube_points(&center);
    let base: Vec<f64> = points
        .iter()
        .map(|p| reference.dc_potential(p))
        .collect::<Result<_, _>>()?;

    hole_sizes
        .iter()
        .map(|&side| {
            let holed = Trap::new(&layout.with_hole(side)?, drive)?;
            let mut worst: f64 = 0.0;
            for (p, v0) in points.iter().zip(&base) {
                worst = worst.max((holed.dc_potential(p)? - v0).abs());
            }
            Ok(DistortionRow {
                hole_side: side,
                distortion: worst,
            })
        })
        .collect()
}

fn cube_points(center: &Vector3<f64>) -> Vec<Vector3<f64>> {
    let n = SAMPLES_PER_EDGE;
    let step = SAMPLE_CUBE_EDGE / (n - 1) as f64;
    let lo = center - Vector3::repeat(0.5 * SAMPLE_CUBE_EDGE);
    let mut out = Vec::with_capacity(n * n * n);
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                out.push(lo + Vector3::new(i as f64, j as f64, k as f64) * step);
            }
        }
    }
    out
}

/// CSV with header `size_um,distortion_V`.
pub fn write_distortion_csv<W: Write>(rows: &[DistortionRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "size_um,distortion_V")?;
    for r in rows {
        writeln!(out, "{},{:e}", r.hole_side * 1e6, r.distortion)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scan(sizes: &[f64]) -> Vec<DistortionRow> {
        let l = ElectrodeLayout::canonical();
        let d = ElectrodeLayout::canonical_drive("symmetric").unwrap();
        hole_distortion_scan(&l, &d, sizes, 200e-6).unwrap()
    }

    #[test]
    fn no_hole_no_distortion() {
        assert_eq!(scan(&[0.0])[0].distortion, 0.0);
    }

    #[test]
    fn monotone_in_hole_size_and_under_bound_at_60um() {
        let rows = scan(&[0.0, 20e-6, 40e-6, 60e-6, 80e-6]);
        for w in rows.windows(2) {
            assert!(w[1].distortion > w[0].distortion);
        }
        assert!(rows[3].distortion < 1e-3);
        assert!(rows[2].distortion < rows[3].distortion);
    }

    #[test]
    fn oversize_hole_is_a_configuration_error() {
        let l = ElectrodeLayout::canonical();
        let d = ElectrodeLayout::canonical_drive("symmetric").unwrap();
        assert!(matches!(
            hole_distortion_scan(&l, &d, &[400e-6], 200e-6),
            Err(TrapError::Config(_))
        ));
    }

    #[test]
    fn csv_header() {
        let mut buf = Vec::new();
        write_distortion_csv(&scan(&[0.0, 40e-6]), &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("size_um,distortion_V\n0,0e0\n40,"));
    }
}
