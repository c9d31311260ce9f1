//! Ram-Lak filtering along the detector axis and filtered back-projection.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Image, Sinogram};
use crate::error::{Error, Result};
use crate::geometry::{FanGeometry, ImageGrid};
use crate::{fft, phantoms, projector};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterSpec {
    /// Ramp cutoff as a fraction of the Nyquist frequency, in (0, 1].
    pub cutoff_fraction: f64,
    /// Zero-padded row length as a multiple of the detector bin count.
    pub pad_factor: usize,
    /// Global FBP scale; see [`calibrate_scale`].
    pub scale: f64,
}

impl Default for FilterSpec {
    fn default() -> Self {
        FilterSpec {
            cutoff_fraction: 1.0,
            pad_factor: 2,
            scale: 1.0,
        }
    }
}

impl FilterSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.cutoff_fraction > 0.0 && self.cutoff_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "filter.cutoff_fraction must lie in (0, 1], got {}",
                self.cutoff_fraction
            )));
        }
        if self.pad_factor < 2 {
            return Err(Error::Config(format!(
                "filter.pad_factor must be at least 2, got {}",
                self.pad_factor
            )));
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::Config(format!("filter.scale must be positive, got {}", self.scale)));
        }
        Ok(())
    }

    /// Ramp response of padded-spectrum bin `m` for rows padded to `len`,
    /// in cycles per detector bin.
    pub fn ramp(&self, m: usize, len: usize) -> f64 {
        let k = m.min(len - m) as f64 / len as f64;
        if k <= 0.5 * self.cutoff_fraction + 1e-15 {
            k
        } else {
            0.0
        }
    }
}

/// Ramp-filter every angle row independently.
pub fn ram_lak(g: &Sinogram, spec: &FilterSpec) -> Result<Sinogram> {
    spec.validate()?;
    let cols = g.cols();
    if cols < 2 {
        return Err(Error::Shape("ram_lak needs at least 2 detector bins".into()));
    }
    if let Some(i) = g.values().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("sinogram entry {i}")));
    }
    let mut out = Sinogram::zeros(g.rows(), cols);
    out.values_mut()
        .par_chunks_mut(cols)
        .zip(g.values().par_chunks(cols))
        .for_each(|(dst, src)| {
            let filtered = filter_row_padded(src, spec);
            dst.copy_from_slice(&filtered[..cols]);
        });
    Ok(out)
}

/// Filtered row before cropping, `pad_factor * row.len()` samples long.
fn filter_row_padded(row: &[f64], spec: &FilterSpec) -> Vec<f64> {
    let len = spec.pad_factor * row.len();
    let plan = fft::plan(len);
    let mut padded = vec![0.0; len];
    padded[..row.len()].copy_from_slice(row);
    let mut spectrum = plan.full_forward(&padded);
    for (m, c) in spectrum.iter_mut().enumerate() {
        *c *= spec.ramp(m, len);
    }
    plan.full_inverse_real(spectrum)
}

/// Filtered back-projection: `scale * back_project(ram_lak(g))`.
pub fn fbp(g: &Sinogram, geom: &FanGeometry, grid: ImageGrid, spec: &FilterSpec) -> Result<Image> {
    g.check_geometry(geom)?;
    let filtered = ram_lak(g, spec)?;
    let mut img = projector::back_project(&filtered, geom, grid)?;
    img.values_mut().iter_mut().for_each(|v| *v *= spec.scale);
    Ok(img)
}

/// FBP scale that maps a centered unit disc of radius `fov / 2` to a unit
/// interior mean (pixels within 80% of the disc radius).
pub fn calibrate_scale(geom: &FanGeometry, grid: ImageGrid, spec: &FilterSpec) -> Result<f64> {
    let radius = 0.5 * geom.fov_radius();
    let disc = phantoms::disc_image(grid, [0.0, 0.0], radius, 1.0);
    let g = projector::forward_project(&disc, geom)?;
    let unit = FilterSpec { scale: 1.0, ..*spec };
    let img = fbp(&g, geom, grid, &unit)?;
    let mean = interior_mean(&img, radius * 0.8);
    if !(mean.is_finite() && mean > 0.0) {
        return Err(Error::Domain(format!("calibration produced interior mean {mean}")));
    }
    Ok(1.0 / mean)
}

/// Mean over pixel centers within `radius` of the origin.
pub fn interior_mean(img: &Image, radius: f64) -> f64 {
    let grid = img.grid();
    let (mut sum, mut count) = (0.0, 0usize);
    for row in 0..grid.side {
        for col in 0..grid.side {
            let (x, y) = (grid.x(col), grid.y(row));
            if x * x + y * y <= radius * radius {
                sum += img[(row, col)];
                count += 1;
            }
        }
    }
    sum / count.max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64;
    use std::f64::consts::TAU;

    /// Pad, O(n^2) DFT, multiply by the ramp, O(n^2) inverse, crop.
    fn direct_filter(row: &[f64], spec: &FilterSpec) -> Vec<f64> {
        let len = spec.pad_factor * row.len();
        let spectrum: Vec<Complex64> = (0..len)
            .map(|m| {
                row.iter()
                    .enumerate()
                    .map(|(u, &v)| Complex64::from_polar(v, -TAU * (m * u) as f64 / len as f64))
                    .sum::<Complex64>()
                    * spec.ramp(m, len)
            })
            .collect();
        (0..row.len())
            .map(|u| {
                spectrum
                    .iter()
                    .enumerate()
                    .map(|(m, c)| (c * Complex64::from_polar(1.0, TAU * (m * u) as f64 / len as f64)).re)
                    .sum::<f64>()
                    / len as f64
            })
            .collect()
    }

    #[test]
    fn constant_row_loses_its_mean() {
        let row = vec![3.0; 16];
        let spec = FilterSpec::default();
        assert_eq!(spec.ramp(0, 32), 0.0);
        // with zero padding the constant row is a box; its padded output
        // carries no DC
        let full = filter_row_padded(&row, &spec);
        assert!(full.iter().sum::<f64>().abs() < 1e-12);
        let g = Sinogram::from_values(1, 16, row.clone()).unwrap();
        let cropped = ram_lak(&g, &spec).unwrap();
        for (a, b) in cropped.row(0).iter().zip(&direct_filter(&row, &spec)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pure_tone_matches_direct_dft() {
        let u = 32;
        for m in [1usize, 3, 7] {
            let row: Vec<f64> = (0..u).map(|j| (TAU * (m * j) as f64 / u as f64).cos()).collect();
            let g = Sinogram::from_values(1, u, row.clone()).unwrap();
            let spec = FilterSpec::default();
            let fast = ram_lak(&g, &spec).unwrap();
            let slow = direct_filter(&row, &spec);
            for (a, b) in fast.row(0).iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
        // the ramp value of the tone's padded frequency bin
        let spec = FilterSpec::default();
        assert!((spec.ramp(6, 64) - 6.0 / 64.0).abs() < 1e-15);
    }

    #[test]
    fn cutoff_zeroes_high_frequencies() {
        let spec = FilterSpec {
            cutoff_fraction: 0.5,
            ..Default::default()
        };
        assert!(spec.ramp(16, 64) > 0.0);
        assert_eq!(spec.ramp(17, 64), 0.0);
        assert_eq!(spec.ramp(32, 64), 0.0);
    }

    #[test]
    fn linear_and_row_permutation_commute() {
        let spec = FilterSpec::default();
        let a: Vec<f64> = (0..48).map(|i| (i as f64 * 0.77).sin()).collect();
        let b: Vec<f64> = (0..48).map(|i| (i as f64 * 1.3).cos()).collect();
        let ga = Sinogram::from_values(3, 16, a.clone()).unwrap();
        let gb = Sinogram::from_values(3, 16, b).unwrap();
        let lhs = ram_lak(&(&ga.scaled(2.0) + &gb), &spec).unwrap();
        let rhs = &ram_lak(&ga, &spec).unwrap().scaled(2.0) + &ram_lak(&gb, &spec).unwrap();
        for (x, y) in lhs.values().iter().zip(rhs.values()) {
            assert!((x - y).abs() < 1e-10);
        }
        let mut swapped = a[16..32].to_vec();
        swapped.extend_from_slice(&a[..16]);
        swapped.extend_from_slice(&a[32..]);
        let gs = Sinogram::from_values(3, 16, swapped).unwrap();
        let fa = ram_lak(&ga, &spec).unwrap();
        let fs = ram_lak(&gs, &spec).unwrap();
        assert_eq!(fa.row(0), fs.row(1));
        assert_eq!(fa.row(1), fs.row(0));
    }

    #[test]
    fn rejects_bad_input() {
        let spec = FilterSpec::default();
        assert!(ram_lak(&Sinogram::zeros(2, 1), &spec).is_err());
        let bad = FilterSpec {
            pad_factor: 1,
            ..Default::default()
        };
        assert!(ram_lak(&Sinogram::zeros(2, 8), &bad).is_err());
    }
}
