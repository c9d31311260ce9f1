//! Raster containers shared by every stage: images, sinograms, masks.

use std::ops::{Add, Index, IndexMut};

use crate::error::{Error, Result};
use crate::geometry::{FanGeometry, ImageGrid};

/// Square image of attenuation values on an [`ImageGrid`], row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    grid: ImageGrid,
    values: Vec<f64>,
}

impl Image {
    pub fn zeros(grid: ImageGrid) -> Self {
        Image {
            grid,
            values: vec![0.0; grid.len()],
        }
    }

    pub fn from_values(grid: ImageGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Shape(format!(
                "image needs {} values, got {}",
                grid.len(),
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("image pixel {i}")));
        }
        Ok(Image { grid, values })
    }

    /// Image sampled from `f(x, y)` at pixel centers.
    pub fn from_fn(grid: ImageGrid, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut values = Vec::with_capacity(grid.len());
        for row in 0..grid.side {
            for col in 0..grid.side {
                values.push(f(grid.x(col), grid.y(row)));
            }
        }
        Image { grid, values }
    }

    pub fn grid(&self) -> ImageGrid {
        self.grid
    }

    pub fn side(&self) -> usize {
        self.grid.side
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn dot(&self, other: &Image) -> f64 {
        dot(&self.values, &other.values)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            grid: self.grid,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn ensure_same_grid(&self, other: &Image) -> Result<()> {
        if self.grid != other.grid {
            return Err(Error::Shape(format!(
                "image grids differ: {:?} vs {:?}",
                self.grid, other.grid
            )));
        }
        Ok(())
    }
}

impl Index<(usize, usize)> for Image {
    type Output = f64;

    fn index(&self, (row, col): (usize, usize)) -> &f64 {
        &self.values[row * self.grid.side + col]
    }
}

impl IndexMut<(usize, usize)> for Image {
    fn index_mut(&mut self, (row, col): (usize, usize)) -> &mut f64 {
        &mut self.values[row * self.grid.side + col]
    }
}

impl Add for &Image {
    type Output = Image;

    fn add(self, rhs: &Image) -> Image {
        assert_eq!(self.grid, rhs.grid, "image grids differ");
        Image {
            grid: self.grid,
            values: self.values.iter().zip(&rhs.values).map(|(a, b)| a + b).collect(),
        }
    }
}

/// Line integrals indexed by (source angle, detector bin), row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Sinogram {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl Sinogram {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Sinogram {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn zeros_for(geom: &FanGeometry) -> Self {
        Self::zeros(geom.n_angles(), geom.bins())
    }

    pub fn from_values(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::Shape(format!(
                "sinogram {rows}x{cols} needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "sinogram entry (angle {}, bin {})",
                i / cols.max(1),
                i % cols.max(1)
            )));
        }
        Ok(Sinogram { rows, cols, values })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn dot(&self, other: &Sinogram) -> f64 {
        dot(&self.values, &other.values)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scaled(&self, a: f64) -> Sinogram {
        Sinogram {
            rows: self.rows,
            cols: self.cols,
            values: self.values.iter().map(|v| a * v).collect(),
        }
    }

    pub fn check_geometry(&self, geom: &FanGeometry) -> Result<()> {
        if self.rows != geom.n_angles() || self.cols != geom.bins() {
            return Err(Error::Shape(format!(
                "sinogram is {}x{} but geometry has {} angles x {} bins",
                self.rows,
                self.cols,
                geom.n_angles(),
                geom.bins()
            )));
        }
        Ok(())
    }

    pub fn ensure_same_shape(&self, other: &Sinogram) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Shape(format!(
                "sinograms differ: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }

    /// Copy with every bin outside `mask` set to zero.
    pub fn masked(&self, mask: &KnownMask) -> Sinogram {
        let values = self
            .values
            .iter()
            .zip(mask.values())
            .map(|(&v, &m)| if m { v } else { 0.0 })
            .collect();
        Sinogram {
            rows: self.rows,
            cols: self.cols,
            values,
        }
    }
}

impl Index<(usize, usize)> for Sinogram {
    type Output = f64;

    fn index(&self, (row, col): (usize, usize)) -> &f64 {
        &self.values[row * self.cols + col]
    }
}

impl IndexMut<(usize, usize)> for Sinogram {
    fn index_mut(&mut self, (row, col): (usize, usize)) -> &mut f64 {
        &mut self.values[row * self.cols + col]
    }
}

impl Add for &Sinogram {
    type Output = Sinogram;

    fn add(self, rhs: &Sinogram) -> Sinogram {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols), "sinogram shapes differ");
        Sinogram {
            rows: self.rows,
            cols: self.cols,
            values: self.values.iter().zip(&rhs.values).map(|(a, b)| a + b).collect(),
        }
    }
}

/// Which sinogram bins were measured.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct KnownMask {
    rows: usize,
    cols: usize,
    values: Vec<bool>,
}

impl KnownMask {
    pub fn new(rows: usize, cols: usize, values: Vec<bool>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::Shape(format!(
                "mask {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                values.len()
            )));
        }
        if !values.iter().any(|&v| v) {
            return Err(Error::Domain("mask has no known bins".into()));
        }
        Ok(KnownMask { rows, cols, values })
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        KnownMask {
            rows,
            cols,
            values: vec![true; rows * cols],
        }
    }

    /// Whole angle rows marked known where `known_row(i)` holds.
    pub fn from_rows(rows: usize, cols: usize, known_row: impl Fn(usize) -> bool) -> Result<Self> {
        let values = (0..rows)
            .flat_map(|i| std::iter::repeat_n(known_row(i), cols))
            .collect();
        Self::new(rows, cols, values)
    }

    /// Contiguous arc of source angles starting at row `start` and spanning
    /// `span_deg` degrees, wrapping around the circle.
    pub fn wedge(geom: &FanGeometry, start: usize, span_deg: f64) -> Result<Self> {
        let n = geom.n_angles();
        let deg = geom.angles_deg();
        let first = deg[start % n];
        Self::from_rows(n, geom.bins(), |i| {
            let offset = (deg[i] - first).rem_euclid(360.0);
            offset < span_deg - 1e-9
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[bool] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.values[row * self.cols + col]
    }

    pub fn all_known(&self) -> bool {
        self.values.iter().all(|&v| v)
    }

    pub fn known_count(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }

    pub fn check_shape(&self, g: &Sinogram) -> Result<()> {
        if self.rows != g.rows() || self.cols != g.cols() {
            return Err(Error::Shape(format!(
                "mask is {}x{} but sinogram is {}x{}",
                self.rows,
                self.cols,
                g.rows(),
                g.cols()
            )));
        }
        Ok(())
    }

    /// Same mask with rows cyclically shifted by `shift` (row i moves to
    /// row i + shift).
    pub fn rotated(&self, shift: usize) -> KnownMask {
        let mut values = vec![false; self.values.len()];
        for i in 0..self.rows {
            let dst = (i + shift) % self.rows;
            values[dst * self.cols..(dst + 1) * self.cols]
                .copy_from_slice(&self.values[i * self.cols..(i + 1) * self.cols]);
        }
        KnownMask {
            rows: self.rows,
            cols: self.cols,
            values,
        }
    }

    pub fn content_hash(&self) -> String {
        let mut bytes = Vec::with_capacity(16 + self.values.len());
        bytes.extend_from_slice(&(self.rows as u64).to_le_bytes());
        bytes.extend_from_slice(&(self.cols as u64).to_le_bytes());
        bytes.extend(self.values.iter().map(|&v| v as u8));
        crate::geometry::hex_digest(&bytes)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_requires_known_bin() {
        assert!(KnownMask::new(2, 2, vec![false; 4]).is_err());
        assert!(KnownMask::new(2, 2, vec![false, true, false, false]).is_ok());
        assert!(KnownMask::new(2, 2, vec![true; 3]).is_err());
    }

    #[test]
    fn wedge_wraps() {
        let geom = FanGeometry::full_scan(5.0, 4, 2.2, 36, 0.95).unwrap();
        let m = KnownMask::wedge(&geom, 34, 40.0).unwrap();
        let rows: Vec<bool> = (0..36).map(|i| m.get(i, 0)).collect();
        assert_eq!(rows.iter().filter(|&&v| v).count(), 4);
        assert!(rows[34] && rows[35] && rows[0] && rows[1] && !rows[2]);
        assert_eq!(m.rotated(2), KnownMask::wedge(&geom, 0, 40.0).unwrap());
    }

    #[test]
    fn sinogram_rejects_non_finite() {
        let err = Sinogram::from_values(2, 2, vec![0.0, 1.0, f64::NAN, 0.0]).unwrap_err();
        assert!(err.to_string().contains("angle 1, bin 0"));
    }
}
