//! Mask visualizations as plain files: a PGM heatmap of the per-patch mean
//! retain probability with a CSV twin, the full retain-probability map, and
//! the per-kernel retained-count histogram.

use std::fmt::Write;

use crate::error::{Error, Result};
use crate::mask::FixedMask;

/// Pixels per patch cell in the PGM.
pub const CELL: usize = 16;

/// Mean over kernels of the retain probability at each patch, from
/// `keep[N×C]` (row-major).
pub fn patch_means(keep: &[f64], n: usize, c: usize) -> Result<Vec<f64>> {
    if keep.len() != n * c || c == 0 {
        return Err(Error::dim(format!("{} retain values for a {n}×{c} map", keep.len())));
    }
    Ok(keep.chunks(c).map(|r| r.iter().sum::<f64>() / c as f64).collect())
}

/// Binary `P5` image of a `grid×grid` map with values in `[0, 1]`.
pub fn heatmap_pgm(values: &[f64], grid: usize) -> Result<Vec<u8>> {
    if values.len() != grid * grid {
        return Err(Error::dim(format!("{} values for a {grid}×{grid} grid", values.len())));
    }
    if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::invalid(format!("heatmap value {v} outside [0, 1]")));
    }
    let side = grid * CELL;
    let mut out = format!("P5\n{side} {side}\n255\n").into_bytes();
    for y in 0..side {
        for x in 0..side {
            out.push((values[(y / CELL) * grid + x / CELL] * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn heatmap_csv(values: &[f64], grid: usize) -> String {
    let mut s = String::from("# lumvit heatmap v1\nrow,col,mean_retain\n");
    for (i, v) in values.iter().enumerate() {
        writeln!(s, "{},{},{:.10}", i / grid, i % grid, v).expect("write to string");
    }
    s
}

pub fn retain_map_csv(keep: &[f64], n: usize, c: usize) -> String {
    let mut s = String::from("# lumvit retain-map v1\npatch,kernel,retain\n");
    for i in 0..n {
        for j in 0..c {
            writeln!(s, "{i},{j},{:.10}", keep[i * c + j]).expect("write to string");
        }
    }
    s
}

pub fn kernel_histogram_csv(mask: &FixedMask) -> String {
    let mut s = String::from("# lumvit kernel-histogram v1\nkernel,retained\n");
    for (j, h) in mask.kernel_histogram().iter().enumerate() {
        writeln!(s, "{j},{h}").expect("write to string");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_header_and_cells() {
        let v = [0.0, 1.0, 0.5, 0.25];
        let img = heatmap_pgm(&v, 2).unwrap();
        let header = format!("P5\n{s} {s}\n255\n", s = 2 * CELL);
        assert!(img.starts_with(header.as_bytes()));
        let px = &img[header.len()..];
        assert_eq!(px.len(), 4 * CELL * CELL);
        assert_eq!(px[0], 0);
        assert_eq!(px[CELL], 255);
        assert_eq!(px[CELL * 2 * CELL], 128);
    }

    #[test]
    fn means_and_range_check() {
        let m = patch_means(&[0.2, 0.4, 1.0, 0.0], 2, 2).unwrap();
        assert!((m[0] - 0.3).abs() < 1e-15 && (m[1] - 0.5).abs() < 1e-15);
        assert!(heatmap_pgm(&[1.5], 1).is_err());
    }

    #[test]
    fn histogram_counts_per_kernel() {
        let mask = FixedMask::new(2, 3, vec![true, false, true, true, false, false]).unwrap();
        assert_eq!(kernel_histogram_csv(&mask).lines().nth(2), Some("0,2"));
    }
}
