//! Discrete fan-beam ray transform, the weighted fan-beam back-projection,
//! and the exact transpose of that back-projection.
//!
//! The forward transform is ray driven (bilinear sampling at half-pixel
//! steps). The back-projection is pixel driven with linear interpolation
//! along the detector; [`back_project_transpose`] scatters exactly the same
//! interpolation weights, so the pair satisfies the discrete adjoint identity
//! to rounding error.

use std::cell::Cell;
use std::f64::consts::TAU;

use rayon::prelude::*;

use crate::data::{Image, Sinogram};
use crate::error::{Error, Result};
use crate::geometry::{FanGeometry, ImageGrid};

thread_local! {
    static COUNTS: Cell<OpCounts> = const { Cell::new(OpCounts { forward: 0, back: 0, transpose: 0 }) };
}

/// Number of projector invocations made from the current thread.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCounts {
    pub forward: usize,
    pub back: usize,
    pub transpose: usize,
}

pub fn op_counts() -> OpCounts {
    COUNTS.with(Cell::get)
}

pub fn reset_op_counts() {
    COUNTS.with(|c| c.set(OpCounts::default()));
}

fn bump(f: impl FnOnce(&mut OpCounts)) {
    COUNTS.with(|c| {
        let mut v = c.get();
        f(&mut v);
        c.set(v);
    });
}

/// Log-transform of transmitted intensities: `-ln(I_out / I_in)` per bin.
pub fn preprocess(intensities_in: &Sinogram, intensities_out: &Sinogram) -> Result<Sinogram> {
    intensities_in.ensure_same_shape(intensities_out)?;
    let cols = intensities_in.cols();
    let mut values = Vec::with_capacity(intensities_in.values().len());
    for (k, (&i_in, &i_out)) in intensities_in
        .values()
        .iter()
        .zip(intensities_out.values())
        .enumerate()
    {
        if !(i_in > 0.0 && i_out > 0.0) || !i_in.is_finite() || !i_out.is_finite() {
            return Err(Error::Domain(format!(
                "intensity at angle {}, bin {} must be positive (in = {i_in}, out = {i_out})",
                k / cols,
                k % cols
            )));
        }
        values.push(-(i_out / i_in).ln());
    }
    Sinogram::from_values(intensities_in.rows(), cols, values)
}

/// Bilinear sample of the image at `(x, y)`; zero outside the grid.
#[inline]
fn bilinear(values: &[f64], grid: &ImageGrid, x: f64, y: f64) -> f64 {
    let n = grid.side as isize;
    let half = 0.5 * grid.side as f64;
    let fc = x / grid.pixel_size + half - 0.5;
    let fr = half - 0.5 - y / grid.pixel_size;
    let c0 = fc.floor();
    let r0 = fr.floor();
    let (dc, dr) = (fc - c0, fr - r0);
    let (c0, r0) = (c0 as isize, r0 as isize);
    let at = |r: isize, c: isize| -> f64 {
        if r >= 0 && r < n && c >= 0 && c < n {
            values[(r * n + c) as usize]
        } else {
            0.0
        }
    };
    (1.0 - dr) * ((1.0 - dc) * at(r0, c0) + dc * at(r0, c0 + 1))
        + dr * ((1.0 - dc) * at(r0 + 1, c0) + dc * at(r0 + 1, c0 + 1))
}

/// Parameter interval of `p + t d` inside the axis-aligned box `[-h, h]^2`.
fn clip_to_box(p: [f64; 2], d: [f64; 2], h: f64) -> Option<(f64, f64)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for axis in 0..2 {
        if d[axis].abs() < 1e-300 {
            if p[axis].abs() > h {
                return None;
            }
        } else {
            let a = (-h - p[axis]) / d[axis];
            let b = (h - p[axis]) / d[axis];
            t0 = t0.max(a.min(b));
            t1 = t1.min(a.max(b));
        }
    }
    (t1 > t0).then_some((t0, t1))
}

/// Fan-beam ray transform of `f` sampled at every (angle, bin) of `geom`.
pub fn forward_project(f: &Image, geom: &FanGeometry) -> Result<Sinogram> {
    let grid = f.grid();
    grid.check_covers(geom)?;
    bump(|c| c.forward += 1);
    let r = geom.source_radius();
    let bins = geom.bins();
    let step = 0.5 * grid.pixel_size;
    let reach = grid.half_width() + 0.5 * grid.pixel_size;
    let values = f.values();
    let mut out = Sinogram::zeros_for(geom);
    out.values_mut()
        .par_chunks_mut(bins)
        .zip(geom.angles().par_iter())
        .for_each(|(row, &beta)| {
            let (sin_b, cos_b) = beta.sin_cos();
            let src = [r * cos_b, r * sin_b];
            for (j, cell) in row.iter_mut().enumerate() {
                let u = geom.bin_center(j);
                let det = [u * sin_b, -u * cos_b];
                let len = r.hypot(u);
                let dir = [(det[0] - src[0]) / len, (det[1] - src[1]) / len];
                let Some((t0, t1)) = clip_to_box(src, dir, reach) else {
                    continue;
                };
                let n = ((t1 - t0) / step).ceil().max(1.0) as usize;
                let h = (t1 - t0) / n as f64;
                let mut acc = 0.0;
                for k in 0..n {
                    let t = t0 + (k as f64 + 0.5) * h;
                    acc += bilinear(values, &grid, src[0] + t * dir[0], src[1] + t * dir[1]);
                }
                *cell = acc * h;
            }
        });
    Ok(out)
}

/// Pixel centers inside the field of view: (flat index, x, y).
fn fov_pixels(grid: &ImageGrid, fov: f64) -> Vec<(usize, f64, f64)> {
    let mut out = Vec::new();
    for row in 0..grid.side {
        let y = grid.y(row);
        for col in 0..grid.side {
            let x = grid.x(col);
            if x * x + y * y <= fov * fov {
                out.push((row * grid.side + col, x, y));
            }
        }
    }
    out
}

/// Per-angle constants of the back-projection weight.
struct AngleTerm {
    sin: f64,
    cos: f64,
    /// quadrature weight / 2 pi
    scale: f64,
}

fn angle_terms(geom: &FanGeometry) -> Vec<AngleTerm> {
    geom.angles()
        .iter()
        .zip(geom.angle_weights())
        .map(|(&b, &w)| {
            let (sin, cos) = b.sin_cos();
            AngleTerm {
                sin,
                cos,
                scale: w / TAU,
            }
        })
        .collect()
}

/// Detector interpolation for pixel `(x, y)` at one angle: lower bin index,
/// fractional offset and the back-projection weight (times angular scale).
#[inline]
fn pixel_footprint(x: f64, y: f64, a: &AngleTerm, r: f64, u0: f64, inv_du: f64) -> (isize, f64, f64) {
    let along = r - x * a.cos - y * a.sin;
    let across = x * a.sin - y * a.cos;
    let inv = 1.0 / along;
    let u = r * across * inv;
    let weight = r * across.hypot(along) * inv * inv * a.scale;
    let p = (u - u0) * inv_du - 0.5;
    let j0 = p.floor();
    (j0 as isize, p - j0, weight)
}

/// Weighted fan-beam back-projection onto `grid`. Pixels outside the field of
/// view are zero; detector positions off the detector contribute nothing.
pub fn back_project(g: &Sinogram, geom: &FanGeometry, grid: ImageGrid) -> Result<Image> {
    g.check_geometry(geom)?;
    grid.check_covers(geom)?;
    bump(|c| c.back += 1);
    let r = geom.source_radius();
    let bins = geom.bins() as isize;
    let u0 = -0.5 * geom.extent();
    let inv_du = 1.0 / geom.bin_width();
    let terms = angle_terms(geom);
    let pixels = fov_pixels(&grid, geom.fov_radius());
    let data = g.values();
    let sums: Vec<f64> = pixels
        .par_iter()
        .map(|&(_, x, y)| {
            let mut acc = 0.0;
            for (i, a) in terms.iter().enumerate() {
                let (j0, frac, w) = pixel_footprint(x, y, a, r, u0, inv_du);
                let row = &data[i * bins as usize..(i + 1) * bins as usize];
                let mut v = 0.0;
                if j0 >= 0 && j0 < bins {
                    v += (1.0 - frac) * row[j0 as usize];
                }
                if j0 + 1 >= 0 && j0 + 1 < bins {
                    v += frac * row[(j0 + 1) as usize];
                }
                acc += w * v;
            }
            acc
        })
        .collect();
    let mut out = Image::zeros(grid);
    let values = out.values_mut();
    for (&(idx, _, _), s) in pixels.iter().zip(sums) {
        values[idx] = s;
    }
    Ok(out)
}

/// Exact transpose of [`back_project`] for the same geometry and grid.
pub fn back_project_transpose(x: &Image, geom: &FanGeometry) -> Result<Sinogram> {
    let grid = x.grid();
    grid.check_covers(geom)?;
    bump(|c| c.transpose += 1);
    let r = geom.source_radius();
    let bins = geom.bins();
    let u0 = -0.5 * geom.extent();
    let inv_du = 1.0 / geom.bin_width();
    let terms = angle_terms(geom);
    let pixels: Vec<(f64, f64, f64)> = fov_pixels(&grid, geom.fov_radius())
        .into_iter()
        .map(|(idx, px, py)| (x.values()[idx], px, py))
        .filter(|&(v, _, _)| v != 0.0)
        .collect();
    let mut out = Sinogram::zeros_for(geom);
    out.values_mut()
        .par_chunks_mut(bins)
        .zip(terms.par_iter())
        .for_each(|(row, a)| {
            let n = bins as isize;
            for &(v, px, py) in &pixels {
                let (j0, frac, w) = pixel_footprint(px, py, a, r, u0, inv_du);
                let c = v * w;
                if j0 >= 0 && j0 < n {
                    row[j0 as usize] += c * (1.0 - frac);
                }
                if j0 + 1 >= 0 && j0 + 1 < n {
                    row[(j0 + 1) as usize] += c * frac;
                }
            }
        });
    Ok(out)
}
