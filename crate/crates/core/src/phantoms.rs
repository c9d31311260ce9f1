//! Synthetic training and test data: a constant disc with rectangular and
//! elliptical holes, its segmentation, and its limited-angle sinogram.

use std::f64::consts::{PI, TAU};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Image, KnownMask, Sinogram};
use crate::error::{Error, Result};
use crate::geometry::{FanGeometry, ImageGrid};
use crate::projector;
use crate::raster::Raster;

const SUPERSAMPLE: usize = 4;
const MAX_TRIES: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HoleKind {
    Rectangle,
    Ellipse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub disc_value: f64,
    /// Disc radius range as fractions of the fov radius.
    pub radius_range: [f64; 2],
    /// Center offset bound as a fraction of the fov radius.
    pub center_jitter: f64,
    pub hole_count: [usize; 2],
    pub hole_kinds: Vec<HoleKind>,
    /// Rectangle sides and ellipse axes as fractions of the disc radius.
    pub hole_size_range: [f64; 2],
    /// Standard deviation of additive Gaussian sinogram noise.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            disc_value: 1.0,
            radius_range: [0.7, 0.9],
            center_jitter: 0.05,
            hole_count: [1, 4],
            hole_kinds: vec![HoleKind::Rectangle, HoleKind::Ellipse],
            hole_size_range: [0.05, 0.3],
            noise_sigma: 0.0,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let [r0, r1] = self.radius_range;
        if !(self.disc_value > 0.0 && self.disc_value.is_finite()) {
            return Err(Error::Config("phantom.disc_value must be positive".into()));
        }
        if !(r0 > 0.0 && r0 <= r1) {
            return Err(Error::Config("phantom.radius_range must be increasing and positive".into()));
        }
        if !(self.center_jitter >= 0.0 && r1 + self.center_jitter < 1.0) {
            return Err(Error::Config(
                "phantom.radius_range + phantom.center_jitter must stay inside the fov".into(),
            ));
        }
        if self.hole_count[0] > self.hole_count[1] {
            return Err(Error::Config("phantom.hole_count must be increasing".into()));
        }
        if self.hole_count[1] > 0 && self.hole_kinds.is_empty() {
            return Err(Error::Config("phantom.hole_kinds is empty".into()));
        }
        let [h0, h1] = self.hole_size_range;
        if !(h0 > 0.0 && h0 <= h1 && h1 < 1.0) {
            return Err(Error::Config("phantom.hole_size_range must lie in (0, 1)".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("phantom.noise_sigma must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
enum Hole {
    Rectangle { center: [f64; 2], half: [f64; 2], angle: f64 },
    Ellipse { center: [f64; 2], semi: [f64; 2], angle: f64 },
}

impl Hole {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (center, angle) = match *self {
            Hole::Rectangle { center, angle, .. } | Hole::Ellipse { center, angle, .. } => (center, angle),
        };
        let (s, c) = angle.sin_cos();
        let (dx, dy) = (x - center[0], y - center[1]);
        let (lx, ly) = (c * dx + s * dy, -s * dx + c * dy);
        match *self {
            Hole::Rectangle { half, .. } => lx.abs() <= half[0] && ly.abs() <= half[1],
            Hole::Ellipse { semi, .. } => (lx / semi[0]).powi(2) + (ly / semi[1]).powi(2) <= 1.0,
        }
    }

    fn center(&self) -> [f64; 2] {
        match *self {
            Hole::Rectangle { center, .. } | Hole::Ellipse { center, .. } => center,
        }
    }

    fn circumradius(&self) -> f64 {
        match *self {
            Hole::Rectangle { half, .. } => half[0].hypot(half[1]),
            Hole::Ellipse { semi, .. } => semi[0].max(semi[1]),
        }
    }
}

/// Per-pixel area fraction of `inside` from a `SUPERSAMPLE`^2 sub-grid.
fn coverage(grid: ImageGrid, inside: impl Fn(f64, f64) -> bool + Sync) -> Vec<f64> {
    let n = grid.side;
    let sub = grid.pixel_size / SUPERSAMPLE as f64;
    let norm = 1.0 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
    (0..grid.len())
        .into_par_iter()
        .map(|idx| {
            let (row, col) = (idx / n, idx % n);
            let x0 = grid.x(col) - 0.5 * grid.pixel_size;
            let y0 = grid.y(row) + 0.5 * grid.pixel_size;
            let mut hits = 0usize;
            for a in 0..SUPERSAMPLE {
                for b in 0..SUPERSAMPLE {
                    let x = x0 + (b as f64 + 0.5) * sub;
                    let y = y0 - (a as f64 + 0.5) * sub;
                    hits += inside(x, y) as usize;
                }
            }
            hits as f64 * norm
        })
        .collect()
}

/// Antialiased disc of constant `value`.
pub fn disc_image(grid: ImageGrid, center: [f64; 2], radius: f64, value: f64) -> Image {
    let cov = coverage(grid, |x, y| (x - center[0]).hypot(y - center[1]) <= radius);
    Image::from_values(grid, cov.into_iter().map(|c| c * value).collect()).expect("finite disc")
}

/// Binary material map of a phantom (pixels at least half covered).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segmentation {
    pub side: usize,
    pub values: Vec<bool>,
}

impl Segmentation {
    pub fn from_image(img: &Image, threshold: f64) -> Self {
        Segmentation {
            side: img.side(),
            values: img.values().iter().map(|&v| v >= threshold).collect(),
        }
    }

    pub fn area(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }
}

/// Draws one phantom; identical `(spec, seed)` give identical images.
pub fn generate_phantom(
    spec: &PhantomSpec,
    grid: ImageGrid,
    fov: f64,
    seed: u64,
) -> Result<(Image, Segmentation)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let radius = fov * rng.random_range(spec.radius_range[0]..=spec.radius_range[1]);
    let jitter_r = fov * spec.center_jitter * rng.random::<f64>().sqrt();
    let jitter_a = rng.random_range(0.0..TAU);
    let center = [jitter_r * jitter_a.cos(), jitter_r * jitter_a.sin()];
    let count = rng.random_range(spec.hole_count[0]..=spec.hole_count[1]);
    let margin = 2.0 * grid.pixel_size;

    let mut holes: Vec<Hole> = Vec::with_capacity(count);
    let mut tries = 0;
    while holes.len() < count {
        tries += 1;
        if tries > MAX_TRIES {
            return Err(Error::Sampling(format!(
                "could not place {count} disjoint holes after {MAX_TRIES} tries (seed {seed})"
            )));
        }
        let kind = spec.hole_kinds[rng.random_range(0..spec.hole_kinds.len())];
        let mut size = || radius * rng.random_range(spec.hole_size_range[0]..=spec.hole_size_range[1]);
        let dims = [0.5 * size(), 0.5 * size()];
        let angle = rng.random_range(0.0..PI);
        let rho = radius * rng.random::<f64>().sqrt();
        let phi = rng.random_range(0.0..TAU);
        let c = [center[0] + rho * phi.cos(), center[1] + rho * phi.sin()];
        let hole = match kind {
            HoleKind::Rectangle => Hole::Rectangle { center: c, half: dims, angle },
            HoleKind::Ellipse => Hole::Ellipse { center: c, semi: dims, angle },
        };
        let reach = rho + hole.circumradius();
        if reach + margin >= radius {
            continue;
        }
        let clear = holes.iter().all(|h| {
            let d = (h.center()[0] - c[0]).hypot(h.center()[1] - c[1]);
            d > h.circumradius() + hole.circumradius() + margin
        });
        if clear {
            holes.push(hole);
        }
    }

    let cov = coverage(grid, |x, y| {
        (x - center[0]).hypot(y - center[1]) <= radius && !holes.iter().any(|h| h.contains(x, y))
    });
    let img = Image::from_values(grid, cov.into_iter().map(|c| c * spec.disc_value).collect())?;
    let seg = Segmentation::from_image(&img, 0.5 * spec.disc_value);
    Ok((img, seg))
}

/// Seed of sample `index` derived from the dataset seed.
pub fn sample_seed(base: u64, index: usize) -> u64 {
    // splitmix64 step
    let mut z = base ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Image,
    pub segmentation: Segmentation,
    /// Measured sinogram, zero outside the mask.
    pub sinogram: Sinogram,
    pub mask: KnownMask,
    pub full_sinogram: Option<Sinogram>,
}

/// Phantom, wedge and sinogram of one sample.
pub fn generate_sample(
    spec: &PhantomSpec,
    geom: &FanGeometry,
    grid: ImageGrid,
    span_deg: f64,
    seed: u64,
) -> Result<(Sample, usize)> {
    let (image, segmentation) = generate_phantom(spec, grid, geom.fov_radius(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_ed9e);
    let start = rng.random_range(0..geom.n_angles());
    let mask = KnownMask::wedge(geom, start, span_deg)?;
    let mut full = projector::forward_project(&image, geom)?;
    if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
        full.values_mut().iter_mut().for_each(|v| *v += noise.sample(&mut rng));
    }
    let sinogram = full.masked(&mask);
    Ok((
        Sample {
            image,
            segmentation,
            sinogram,
            mask,
            full_sinogram: Some(full),
        },
        start,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub index: usize,
    pub seed: u64,
    pub wedge_start: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub spec: PhantomSpec,
    pub geometry: FanGeometry,
    pub grid: ImageGrid,
    pub span_deg: f64,
    pub full_sinograms: bool,
    pub samples: Vec<SampleEntry>,
}

impl DatasetManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

pub fn sample_stem(index: usize) -> String {
    format!("sample_{index:05}")
}

/// Generates `count` samples into `out_dir` and writes the manifest.
pub fn generate_dataset(
    spec: &PhantomSpec,
    count: usize,
    geom: &FanGeometry,
    grid: ImageGrid,
    span_deg: f64,
    keep_full: bool,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    spec.validate()?;
    grid.check_covers(geom)?;
    if !(span_deg > 0.0 && span_deg <= 360.0) {
        return Err(Error::Config(format!("wedge span {span_deg} must lie in (0, 360]")));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let entries: Vec<SampleEntry> = (0..count)
        .into_par_iter()
        .map(|index| {
            let seed = sample_seed(spec.seed, index);
            let (sample, wedge_start) = generate_sample(spec, geom, grid, span_deg, seed)?;
            write_sample(out_dir, index, &sample, keep_full)?;
            Ok(SampleEntry { index, seed, wedge_start })
        })
        .collect::<Result<_>>()?;
    let manifest = DatasetManifest {
        format_version: 1,
        spec: spec.clone(),
        geometry: geom.clone(),
        grid,
        span_deg,
        full_sinograms: keep_full,
        samples: entries,
    };
    manifest.save(out_dir)?;
    Ok(manifest)
}

fn write_sample(dir: &Path, index: usize, s: &Sample, keep_full: bool) -> Result<()> {
    let stem = sample_stem(index);
    Raster::from_image(&s.image).save(&dir.join(format!("{stem}.img")))?;
    Raster::from_bools(s.segmentation.side, &s.segmentation.values).save(&dir.join(format!("{stem}.seg")))?;
    Raster::from_sinogram(&s.sinogram).save(&dir.join(format!("{stem}.sino")))?;
    Raster::from_mask(&s.mask).save(&dir.join(format!("{stem}.mask")))?;
    if keep_full {
        if let Some(full) = &s.full_sinogram {
            Raster::from_sinogram(full).save(&dir.join(format!("{stem}.full")))?;
        }
    }
    Ok(())
}

/// Reads sample `index` of a dataset directory.
pub fn load_sample(dir: &Path, index: usize) -> Result<Sample> {
    let stem = sample_stem(index);
    let image = Raster::load(&dir.join(format!("{stem}.img")))?.to_image()?;
    let (rows, cols, values) = Raster::load(&dir.join(format!("{stem}.seg")))?.to_bools()?;
    if rows != cols {
        return Err(Error::Shape(format!("segmentation {rows}x{cols} is not square")));
    }
    let sinogram = Raster::load(&dir.join(format!("{stem}.sino")))?.to_sinogram()?;
    let mask = Raster::load(&dir.join(format!("{stem}.mask")))?.to_mask()?;
    let full_path = dir.join(format!("{stem}.full"));
    let full_sinogram = if full_path.exists() {
        Some(Raster::load(&full_path)?.to_sinogram()?)
    } else {
        None
    };
    Ok(Sample {
        image,
        segmentation: Segmentation { side: rows, values },
        sinogram,
        mask,
        full_sinogram,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> ImageGrid {
        ImageGrid::covering(128, 1.0).unwrap()
    }

    #[test]
    fn plain_disc_area() {
        let spec = PhantomSpec {
            hole_count: [0, 0],
            ..Default::default()
        };
        let g = grid();
        let fov = g.default_fov();
        for seed in 0..5 {
            let (img, seg) = generate_phantom(&spec, g, fov, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let radius = fov * rng.random_range(0.7..=0.9);
            let expected = PI * radius * radius / (g.pixel_size * g.pixel_size);
            let area = seg.area() as f64;
            assert!((area - expected).abs() < 0.01 * expected, "{area} vs {expected}");
            let mass: f64 = img.values().iter().sum();
            assert!((mass - expected).abs() < 0.01 * expected);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = PhantomSpec::default();
        let a = generate_phantom(&spec, grid(), 0.95, 17).unwrap();
        let b = generate_phantom(&spec, grid(), 0.95, 17).unwrap();
        let c = generate_phantom(&spec, grid(), 0.95, 18).unwrap();
        assert_eq!(a.0, b.0);
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn values_in_range_and_edges_intermediate() {
        let spec = PhantomSpec::default();
        let (img, _) = generate_phantom(&spec, grid(), 0.95, 3).unwrap();
        let n = img.side();
        for row in 0..n {
            for col in 0..n {
                let v = img[(row, col)];
                assert!((0.0..=1.0).contains(&v));
                if v > 0.0 && v < 1.0 {
                    // a partially covered pixel borders both classes
                    let mut lo = false;
                    let mut hi = false;
                    for (dr, dc) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1), (-1, -1), (1, 1), (-1, 1), (1, -1)] {
                        let (r, c) = (row as i64 + dr, col as i64 + dc);
                        if r >= 0 && c >= 0 && (r as usize) < n && (c as usize) < n {
                            let w = img[(r as usize, c as usize)];
                            lo |= w < v;
                            hi |= w > v;
                        }
                    }
                    assert!(lo || hi);
                }
            }
        }
    }

    #[test]
    fn impossible_holes_fail() {
        let spec = PhantomSpec {
            hole_count: [40, 40],
            hole_size_range: [0.5, 0.6],
            ..Default::default()
        };
        assert!(matches!(
            generate_phantom(&spec, grid(), 0.95, 0),
            Err(Error::Sampling(_))
        ));
    }

    #[test]
    fn spec_validation() {
        let bad = PhantomSpec {
            radius_range: [0.9, 0.7],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = PhantomSpec {
            radius_range: [0.7, 0.98],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
