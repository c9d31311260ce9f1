//! Fan-beam acquisition geometry, the image grid, and the maps between
//! parallel-beam `(theta, s)` and fan-beam `(beta, u)` line coordinates.
//!
//! A fan-beam line is fixed by the source angle `beta` (source at
//! `(R cos beta, R sin beta)`) and the signed position `u` where the line
//! crosses the virtual flat detector through the rotation center, which runs
//! along `(sin beta, -cos beta)`.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParallelCoords {
    pub theta: f64,
    pub s: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FanCoords {
    pub beta: f64,
    pub u: f64,
}

/// Fan coordinates of the parallel-beam line `(theta, s)`.
pub fn parallel_to_fan(p: ParallelCoords, source_radius: f64) -> Result<FanCoords> {
    let r = source_radius;
    if !(p.s.abs() < r) {
        return Err(Error::Domain(format!(
            "|s| = {} must be below the source radius {r}",
            p.s.abs()
        )));
    }
    let root = ((r - p.s) * (r + p.s)).sqrt();
    Ok(FanCoords {
        beta: p.theta + FRAC_PI_2 - (p.s / root).atan(),
        u: p.s * r / root,
    })
}

/// Inverse of [`parallel_to_fan`]; defined for every detector position.
pub fn fan_to_parallel(q: FanCoords, source_radius: f64) -> ParallelCoords {
    let r = source_radius;
    ParallelCoords {
        theta: q.beta - FRAC_PI_2 + (q.u / r).atan(),
        s: q.u * r / r.hypot(q.u),
    }
}

/// Source point (`t = 0`) and virtual-detector point (`t = 1`) of the line
/// `(beta, u)`.
pub fn line_params(q: FanCoords, source_radius: f64) -> ([f64; 2], [f64; 2]) {
    let (sin_b, cos_b) = q.beta.sin_cos();
    let source = [source_radius * cos_b, source_radius * sin_b];
    let detector = [q.u * sin_b, -q.u * cos_b];
    (source, detector)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GeometryJson {
    #[serde(rename = "R")]
    source_radius: f64,
    bins: usize,
    extent: f64,
    angles_deg: Vec<f64>,
    fov: f64,
}

/// Circular-orbit fan-beam geometry with a flat, centered detector.
///
/// Angles are kept in degrees as given and converted to radians once, so the
/// JSON form round-trips bit for bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GeometryJson", into = "GeometryJson")]
pub struct FanGeometry {
    source_radius: f64,
    detector_bins: usize,
    detector_extent: f64,
    fov_radius: f64,
    angles_deg: Vec<f64>,
    angles: Vec<f64>,
    angle_weights: Vec<f64>,
}

impl TryFrom<GeometryJson> for FanGeometry {
    type Error = Error;

    fn try_from(j: GeometryJson) -> Result<Self> {
        FanGeometry::new(j.source_radius, j.bins, j.extent, j.angles_deg, j.fov)
    }
}

impl From<FanGeometry> for GeometryJson {
    fn from(g: FanGeometry) -> Self {
        GeometryJson {
            source_radius: g.source_radius,
            bins: g.detector_bins,
            extent: g.detector_extent,
            angles_deg: g.angles_deg,
            fov: g.fov_radius,
        }
    }
}

impl FanGeometry {
    pub fn new(
        source_radius: f64,
        detector_bins: usize,
        detector_extent: f64,
        angles_deg: Vec<f64>,
        fov_radius: f64,
    ) -> Result<Self> {
        let finite = [source_radius, detector_extent, fov_radius]
            .iter()
            .chain(angles_deg.iter())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Config("geometry contains non-finite values".into()));
        }
        if !(fov_radius > 0.0 && source_radius > fov_radius) {
            return Err(Error::Config(format!(
                "geometry requires R > fov > 0 (R = {source_radius}, fov = {fov_radius})"
            )));
        }
        if detector_bins == 0 {
            return Err(Error::Config("geometry.bins must be positive".into()));
        }
        let needed = source_radius * fov_radius
            / ((source_radius - fov_radius) * (source_radius + fov_radius)).sqrt();
        if detector_extent / 2.0 < needed {
            return Err(Error::Config(format!(
                "geometry.extent {detector_extent} too small: lines through the fov reach |u| = {needed}"
            )));
        }
        if angles_deg.is_empty() {
            return Err(Error::Config("geometry.angles_deg is empty".into()));
        }
        if angles_deg.iter().any(|a| !(0.0..360.0).contains(a)) {
            return Err(Error::Config("geometry.angles_deg must lie in [0, 360)".into()));
        }
        if angles_deg.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(
                "geometry.angles_deg must be strictly increasing".into(),
            ));
        }
        let angles: Vec<f64> = angles_deg.iter().map(|d| d.to_radians()).collect();
        let angle_weights = quadrature_weights(&angles);
        Ok(FanGeometry {
            source_radius,
            detector_bins,
            detector_extent,
            fov_radius,
            angles_deg,
            angles,
            angle_weights,
        })
    }

    /// `n_angles` equispaced source positions covering the full circle.
    pub fn full_scan(
        source_radius: f64,
        detector_bins: usize,
        detector_extent: f64,
        n_angles: usize,
        fov_radius: f64,
    ) -> Result<Self> {
        let step = 360.0 / n_angles as f64;
        let angles = (0..n_angles).map(|i| i as f64 * step).collect();
        Self::new(source_radius, detector_bins, detector_extent, angles, fov_radius)
    }

    pub fn source_radius(&self) -> f64 {
        self.source_radius
    }

    pub fn bins(&self) -> usize {
        self.detector_bins
    }

    pub fn extent(&self) -> f64 {
        self.detector_extent
    }

    pub fn fov_radius(&self) -> f64 {
        self.fov_radius
    }

    pub fn n_angles(&self) -> usize {
        self.angles.len()
    }

    /// Source angles in radians.
    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    pub fn angles_deg(&self) -> &[f64] {
        &self.angles_deg
    }

    /// Angular quadrature weight per source angle (radians).
    pub fn angle_weights(&self) -> &[f64] {
        &self.angle_weights
    }

    pub fn bin_width(&self) -> f64 {
        self.detector_extent / self.detector_bins as f64
    }

    /// Detector coordinate of the center of bin `j`.
    pub fn bin_center(&self, j: usize) -> f64 {
        -0.5 * self.detector_extent + (j as f64 + 0.5) * self.bin_width()
    }

    /// Largest |u| reached by a line through the field of view.
    pub fn fov_shadow(&self) -> f64 {
        let (r, f) = (self.source_radius, self.fov_radius);
        r * f / ((r - f) * (r + f)).sqrt()
    }

    /// Angular step if the angles are equispaced over the full circle.
    pub fn uniform_step(&self) -> Option<f64> {
        let n = self.angles.len();
        let step = TAU / n as f64;
        let first = self.angles[0];
        let uniform = self
            .angles
            .iter()
            .enumerate()
            .all(|(i, a)| (a - first - i as f64 * step).abs() < 1e-9);
        uniform.then_some(step)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("geometry serializes")
    }

    /// Stable content hash of the JSON form.
    pub fn content_hash(&self) -> String {
        hex_digest(self.to_json().as_bytes())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Trapezoid weights `(beta[i+1] - beta[i-1]) / 2`. Lists that wrap around
/// the circle use circular neighbours; open arcs use one-sided half gaps at
/// the ends.
fn quadrature_weights(angles: &[f64]) -> Vec<f64> {
    let n = angles.len();
    if n == 1 {
        return vec![TAU];
    }
    let gaps: Vec<f64> = angles.windows(2).map(|w| w[1] - w[0]).collect();
    let wrap_gap = angles[0] + TAU - angles[n - 1];
    let mut sorted = gaps.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    let closed = wrap_gap <= 1.5 * median + 1e-12;
    (0..n)
        .map(|i| {
            let prev = if i > 0 {
                gaps[i - 1]
            } else if closed {
                wrap_gap
            } else {
                0.0
            };
            let next = if i + 1 < n {
                gaps[i]
            } else if closed {
                wrap_gap
            } else {
                0.0
            };
            let w = 0.5 * (prev + next);
            if w == 0.0 {
                PI
            } else {
                w
            }
        })
        .collect()
}

/// Square pixel grid centered on the rotation axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageGrid {
    pub side: usize,
    pub pixel_size: f64,
}

impl ImageGrid {
    pub fn new(side: usize, pixel_size: f64) -> Result<Self> {
        if side == 0 || !(pixel_size > 0.0) || !pixel_size.is_finite() {
            return Err(Error::Config(format!(
                "invalid grid: side {side}, pixel size {pixel_size}"
            )));
        }
        Ok(ImageGrid { side, pixel_size })
    }

    /// Grid of `side` pixels spanning `[-half_width, half_width]^2`.
    pub fn covering(side: usize, half_width: f64) -> Result<Self> {
        Self::new(side, 2.0 * half_width / side as f64)
    }

    pub fn half_width(&self) -> f64 {
        0.5 * self.side as f64 * self.pixel_size
    }

    /// Default reconstructable radius: 95% of the half width.
    pub fn default_fov(&self) -> f64 {
        0.95 * self.half_width()
    }

    pub fn len(&self) -> usize {
        self.side * self.side
    }

    pub fn is_empty(&self) -> bool {
        self.side == 0
    }

    /// x coordinate of pixel column `col`.
    pub fn x(&self, col: usize) -> f64 {
        (col as f64 + 0.5 - 0.5 * self.side as f64) * self.pixel_size
    }

    /// y coordinate of pixel row `row`; row 0 is the top of the image.
    pub fn y(&self, row: usize) -> f64 {
        (0.5 * self.side as f64 - row as f64 - 0.5) * self.pixel_size
    }

    pub fn check_covers(&self, geom: &FanGeometry) -> Result<()> {
        if self.half_width() + 1e-12 < geom.fov_radius() {
            return Err(Error::Shape(format!(
                "grid half width {} does not cover fov radius {}",
                self.half_width(),
                geom.fov_radius()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn central_ray() {
        let q = parallel_to_fan(ParallelCoords { theta: 0.0, s: 0.0 }, 3.0).unwrap();
        assert_eq!(q, FanCoords { beta: FRAC_PI_2, u: 0.0 });
        let p = fan_to_parallel(FanCoords { beta: FRAC_PI_2, u: 0.0 }, 3.0);
        assert_abs_diff_eq!(p.theta, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p.s, 0.0, epsilon = 1e-15);
    }

    /// Distance from the origin to the line through `a` and `b`.
    fn origin_distance(a: [f64; 2], b: [f64; 2]) -> f64 {
        let d = [b[0] - a[0], b[1] - a[1]];
        (a[0] * d[1] - a[1] * d[0]).abs() / d[0].hypot(d[1])
    }

    #[test]
    fn forty_five_degree_example() {
        let r = 2.0;
        let s = r / 2f64.sqrt();
        let q = parallel_to_fan(ParallelCoords { theta: 0.0, s }, r).unwrap();
        assert_abs_diff_eq!(q.beta, PI / 4.0, epsilon = 1e-14);
        assert_abs_diff_eq!(q.u, r, epsilon = 1e-14);
        // both parameterizations describe the same line
        let (src, det) = line_params(q, r);
        assert_abs_diff_eq!(origin_distance(src, det), s, epsilon = 1e-12);
        // normal direction of the parallel line is (cos 0, sin 0): the foot
        // point (s, 0) must lie on the fan line
        let d = [det[0] - src[0], det[1] - src[1]];
        let cross = (s - src[0]) * d[1] - (0.0 - src[1]) * d[0];
        assert_abs_diff_eq!(cross, 0.0, epsilon = 1e-12);

        let p = fan_to_parallel(FanCoords { beta: PI / 4.0, u: r }, r);
        assert_abs_diff_eq!(p.theta, 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(p.s, s, epsilon = 1e-14);
    }

    #[test]
    fn out_of_domain() {
        assert!(parallel_to_fan(ParallelCoords { theta: 0.0, s: 3.0 }, 3.0).is_err());
        assert!(parallel_to_fan(ParallelCoords { theta: 0.0, s: -4.0 }, 3.0).is_err());
        assert!(parallel_to_fan(ParallelCoords { theta: 0.0, s: f64::NAN }, 3.0).is_err());
    }

    #[test]
    fn line_endpoints() {
        let (src, det) = line_params(FanCoords { beta: 0.0, u: 0.0 }, 2.0);
        assert_eq!(src, [2.0, 0.0]);
        // t = 1 lands on the virtual detector through the rotation center
        assert_abs_diff_eq!(det[0], 0.0);
        assert_abs_diff_eq!(det[1], 0.0);
        let (src, _) = line_params(FanCoords { beta: FRAC_PI_2, u: 0.0 }, 1.0);
        assert_abs_diff_eq!(src[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(src[1], 1.0);
    }

    #[test]
    fn integrand_midpoint() {
        let (r, beta, u) = (3.0, 0.7, -0.4);
        let (src, det) = line_params(FanCoords { beta, u }, r);
        let t = 0.5;
        let p = [
            r * beta.cos() * (1.0 - t) + u * t * beta.sin(),
            r * beta.sin() * (1.0 - t) - u * t * beta.cos(),
        ];
        assert_abs_diff_eq!(p[0], 0.5 * (src[0] + det[0]), epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], 0.5 * (src[1] + det[1]), epsilon = 1e-15);
    }

    #[test]
    fn preserves_line_distance_and_monotone_odd() {
        let r = 5.0;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..2000 {
            let p = ParallelCoords {
                theta: rng.random_range(-PI..PI),
                s: rng.random_range(-0.99 * r..0.99 * r),
            };
            let q = parallel_to_fan(p, r).unwrap();
            let (src, det) = line_params(q, r);
            assert!((origin_distance(src, det) - p.s.abs()).abs() < 1e-10);
            let neg = parallel_to_fan(ParallelCoords { s: -p.s, ..p }, r).unwrap();
            assert_eq!(neg.u, -q.u);
        }
        let us: Vec<f64> = (-99..=99)
            .map(|i| parallel_to_fan(ParallelCoords { theta: 0.0, s: i as f64 * r / 100.0 }, r).unwrap().u)
            .collect();
        assert!(us.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn geometry_validation() {
        assert!(FanGeometry::full_scan(5.0, 64, 2.2, 36, 0.95).is_ok());
        // source inside the fov
        assert!(FanGeometry::full_scan(0.5, 64, 2.2, 36, 0.95).is_err());
        // detector too narrow
        assert!(FanGeometry::full_scan(5.0, 64, 1.0, 36, 0.95).is_err());
        // repeated angle
        assert!(FanGeometry::new(5.0, 64, 2.2, vec![0.0, 10.0, 10.0], 0.95).is_err());
        assert!(FanGeometry::new(5.0, 64, 2.2, vec![0.0, 360.0], 0.95).is_err());
    }

    #[test]
    fn quadrature_full_and_arc() {
        let g = FanGeometry::full_scan(5.0, 16, 2.2, 8, 0.95).unwrap();
        for w in g.angle_weights() {
            assert_abs_diff_eq!(*w, TAU / 8.0, epsilon = 1e-14);
        }
        assert!(g.uniform_step().is_some());
        let arc = FanGeometry::new(5.0, 16, 2.2, vec![0.0, 10.0, 20.0, 40.0], 0.95).unwrap();
        let w = arc.angle_weights();
        assert_abs_diff_eq!(w[0], 5f64.to_radians(), epsilon = 1e-14);
        assert_abs_diff_eq!(w[2], 15f64.to_radians(), epsilon = 1e-14);
        assert_abs_diff_eq!(w[3], 10f64.to_radians(), epsilon = 1e-14);
        assert!(arc.uniform_step().is_none());
    }

    #[test]
    fn json_roundtrip_is_exact() {
        let g = FanGeometry::full_scan(5.0, 128, 2.1, 180, 0.95).unwrap();
        let text = g.to_json();
        assert!(text.contains("\"R\":5.0"));
        assert!(text.contains("\"angles_deg\""));
        let back: FanGeometry = serde_json::from_str(&text).unwrap();
        assert_eq!(back, g);
        assert_eq!(back.content_hash(), g.content_hash());
    }

    #[test]
    fn grid_coordinates() {
        let grid = ImageGrid::covering(4, 1.0).unwrap();
        assert_abs_diff_eq!(grid.x(0), -0.75);
        assert_abs_diff_eq!(grid.x(3), 0.75);
        assert_abs_diff_eq!(grid.y(0), 0.75);
        assert_abs_diff_eq!(grid.y(3), -0.75);
        assert_abs_diff_eq!(grid.default_fov(), 0.95);
    }
}
