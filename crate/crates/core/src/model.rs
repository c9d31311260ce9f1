//! FNO-BP: extrapolate the limited-angle sinogram, filter it with Ram-Lak
//! plus a learned FNO correction, back-project once and clip at zero.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::{Image, KnownMask, Sinogram};
use crate::error::{Error, Result};
use crate::extrapolation::{BasisSpec, ExtrapolatorCache};
use crate::filtering::{self, FilterSpec};
use crate::fno::{self, FnoParams, Tape};
use crate::geometry::{FanGeometry, ImageGrid};
use crate::projector;

pub const BUNDLE_VERSION: u32 = 1;

/// The parameter-free stages shared by every reconstruction method.
#[derive(Clone)]
pub struct Pipeline {
    geom: FanGeometry,
    grid: ImageGrid,
    basis: BasisSpec,
    lambda: Option<f64>,
    filter: FilterSpec,
    gram_dir: Option<PathBuf>,
    extrapolator: Arc<ExtrapolatorCache>,
}

impl std::fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Pipeline")
            .field("grid", &self.grid)
            .field("basis", &self.basis)
            .field("lambda", &self.lambda)
            .field("filter", &self.filter)
            .finish()
    }
}

impl Pipeline {
    /// `lambda = None` selects the trace-scaled default ridge per mask;
    /// `gram_dir` enables the on-disk Gram cache.
    pub fn new(
        geom: FanGeometry,
        grid: ImageGrid,
        basis: BasisSpec,
        lambda: Option<f64>,
        filter: FilterSpec,
        gram_dir: Option<PathBuf>,
    ) -> Result<Self> {
        filter.validate()?;
        grid.check_covers(&geom)?;
        let extrapolator = Arc::new(ExtrapolatorCache::new(&geom, &basis, lambda, gram_dir.clone())?);
        Ok(Pipeline {
            geom,
            grid,
            basis,
            lambda,
            filter,
            gram_dir,
            extrapolator,
        })
    }

    /// Like [`Pipeline::new`] with the FBP scale calibrated on a unit disc.
    pub fn calibrated(
        geom: FanGeometry,
        grid: ImageGrid,
        basis: BasisSpec,
        lambda: Option<f64>,
        filter: FilterSpec,
        gram_dir: Option<PathBuf>,
    ) -> Result<Self> {
        let scale = filtering::calibrate_scale(&geom, grid, &filter)?;
        Self::new(geom, grid, basis, lambda, FilterSpec { scale, ..filter }, gram_dir)
    }

    pub fn geometry(&self) -> &FanGeometry {
        &self.geom
    }

    pub fn grid(&self) -> ImageGrid {
        self.grid
    }

    pub fn basis(&self) -> &BasisSpec {
        &self.basis
    }

    pub fn lambda(&self) -> Option<f64> {
        self.lambda
    }

    pub fn filter(&self) -> &FilterSpec {
        &self.filter
    }

    /// Factors the extrapolation system for `mask` ahead of timing-sensitive use.
    pub fn prepare(&self, mask: &KnownMask) -> Result<()> {
        self.extrapolator.prepare(mask)
    }

    pub fn extrapolate(&self, g: &Sinogram, mask: &KnownMask) -> Result<Sinogram> {
        g.check_geometry(&self.geom)?;
        self.extrapolator.extrapolate(g, mask)
    }

    pub fn fbp(&self, g: &Sinogram) -> Result<Image> {
        filtering::fbp(g, &self.geom, self.grid, &self.filter)
    }

    pub fn fbp_range(&self, g: &Sinogram, mask: &KnownMask) -> Result<Image> {
        self.fbp(&self.extrapolate(g, mask)?)
    }
}

/// Network input and the fixed Ram-Lak branch for one measurement; neither
/// depends on the trainable parameters.
#[derive(Clone, Debug)]
pub struct PreparedInput {
    pub extrapolated: Sinogram,
    pub filtered: Sinogram,
}

#[derive(Clone, Debug)]
pub struct FnoBpModel {
    pipeline: Pipeline,
    fno: FnoParams,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleManifest {
    format_version: u32,
    geometry: FanGeometry,
    grid: ImageGrid,
    basis: BasisSpec,
    lambda: Option<f64>,
    filter: FilterSpec,
    gram_cache: Option<PathBuf>,
}

/// Mean squared error over pixels.
pub fn loss(pred: &Image, target: &Image) -> Result<f64> {
    pred.ensure_same_grid(target)?;
    let n = pred.values().len() as f64;
    Ok(pred.values().iter().zip(target.values()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
}

impl FnoBpModel {
    pub fn new(pipeline: Pipeline, fno: FnoParams) -> Result<Self> {
        let g = pipeline.geometry();
        if fno.channels() != g.n_angles() {
            return Err(Error::Shape(format!(
                "network has {} channels, geometry has {} angles",
                fno.channels(),
                g.n_angles()
            )));
        }
        if fno.modes() > g.bins() / 2 + 1 {
            return Err(Error::Config(format!(
                "network keeps {} modes, {} bins allow at most {}",
                fno.modes(),
                g.bins(),
                g.bins() / 2 + 1
            )));
        }
        Ok(FnoBpModel { pipeline, fno })
    }

    pub fn pipeline(&self) -> &Pipeline {
        &self.pipeline
    }

    pub fn params(&self) -> &FnoParams {
        &self.fno
    }

    pub fn set_params(&mut self, fno: FnoParams) -> Result<()> {
        if fno.len() != self.fno.len() || fno.channels() != self.fno.channels() {
            return Err(Error::Shape("replacement parameters have different dimensions".into()));
        }
        self.fno = fno;
        Ok(())
    }

    pub fn prepare_input(&self, g: &Sinogram, mask: &KnownMask) -> Result<PreparedInput> {
        let extrapolated = self.pipeline.extrapolate(g, mask)?;
        let filtered = filtering::ram_lak(&extrapolated, &self.pipeline.filter)?;
        Ok(PreparedInput { extrapolated, filtered })
    }

    /// `scale * back_project(filtered + FNO(extrapolated))` before the ReLU.
    fn pre_activation(&self, input: &PreparedInput) -> Result<(Image, Tape)> {
        let (correction, tape) = fno::fno_forward(&input.extrapolated, &self.fno)?;
        let branch = &input.filtered + &correction;
        let mut img = projector::back_project(&branch, &self.pipeline.geom, self.pipeline.grid)?;
        let scale = self.pipeline.filter.scale;
        img.values_mut().iter_mut().for_each(|v| *v *= scale);
        Ok((img, tape))
    }

    pub fn reconstruct_prepared(&self, input: &PreparedInput) -> Result<Image> {
        Ok(self.pre_activation(input)?.0.map(|v| v.max(0.0)))
    }

    /// Full FNO-BP reconstruction of a limited-angle measurement.
    pub fn reconstruct(&self, g: &Sinogram, mask: &KnownMask) -> Result<Image> {
        self.reconstruct_prepared(&self.prepare_input(g, mask)?)
    }

    /// Loss and its gradient with respect to the network parameters.
    pub fn loss_and_gradient_prepared(&self, input: &PreparedInput, target: &Image) -> Result<(f64, Vec<f64>)> {
        let (pre, tape) = self.pre_activation(input)?;
        pre.ensure_same_grid(target)?;
        let pred = pre.map(|v| v.max(0.0));
        let value = loss(&pred, target)?;
        let n = pred.values().len() as f64;
        let scale = self.pipeline.filter.scale;
        // ReLU subgradient is 0 at 0
        let upstream: Vec<f64> = pre
            .values()
            .iter()
            .zip(target.values())
            .map(|(&p, &t)| if p > 0.0 { scale * 2.0 * (p - t) / n } else { 0.0 })
            .collect();
        let upstream = Image::from_values(pre.grid(), upstream)?;
        let d_branch = projector::back_project_transpose(&upstream, &self.pipeline.geom)?;
        let (grad, _) = fno::fno_backward(&tape, &d_branch, &self.fno)?;
        Ok((value, grad))
    }

    pub fn loss_gradient(&self, g: &Sinogram, mask: &KnownMask, target: &Image) -> Result<Vec<f64>> {
        Ok(self.loss_and_gradient_prepared(&self.prepare_input(g, mask)?, target)?.1)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = &self.pipeline;
        let manifest = BundleManifest {
            format_version: BUNDLE_VERSION,
            geometry: p.geom.clone(),
            grid: p.grid,
            basis: p.basis,
            lambda: p.lambda,
            filter: p.filter,
            gram_cache: p.gram_dir.clone(),
        };
        let path = dir.join("model.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
        self.fno.save(&dir.join("fno"))
    }

    /// Loads a bundle; `gram_dir` overrides the stored Gram cache location.
    pub fn load(dir: &Path, gram_dir: Option<PathBuf>) -> Result<Self> {
        let path = dir.join("model.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: BundleManifest = serde_json::from_str(&text)?;
        if m.format_version != BUNDLE_VERSION {
            return Err(Error::Config(format!(
                "model bundle version {} is not supported (expected {BUNDLE_VERSION})",
                m.format_version
            )));
        }
        let pipeline = Pipeline::new(m.geometry, m.grid, m.basis, m.lambda, m.filter, gram_dir.or(m.gram_cache))?;
        Self::new(pipeline, FnoParams::load(&dir.join("fno"))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantoms::{generate_sample, PhantomSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_pipeline() -> Pipeline {
        let geom = FanGeometry::full_scan(4.0, 16, 2.3, 8, 0.95).unwrap();
        let grid = ImageGrid::covering(16, 1.0).unwrap();
        let basis = BasisSpec { orders: 6, ..Default::default() };
        Pipeline::calibrated(geom, grid, basis, None, FilterSpec::default(), None).unwrap()
    }

    fn tiny_model(seed: u64) -> FnoBpModel {
        FnoBpModel::new(tiny_pipeline(), FnoParams::init(8, 3, 4, 3, false, seed).unwrap()).unwrap()
    }

    fn tiny_sample(seed: u64) -> (Sinogram, KnownMask, Image) {
        let p = tiny_pipeline();
        let spec = PhantomSpec { hole_count: [1, 1], hole_size_range: [0.2, 0.4], ..Default::default() };
        let (s, _) = generate_sample(&spec, p.geometry(), p.grid(), 180.0, seed).unwrap();
        (s.sinogram, s.mask, s.image)
    }

    #[test]
    fn loss_examples() {
        let grid = ImageGrid::covering(4, 1.0).unwrap();
        let a = Image::from_fn(grid, |x, y| x * y + 0.3);
        let b = a.map(|v| v + 1.0);
        assert_eq!(loss(&a, &a).unwrap(), 0.0);
        assert!((loss(&b, &a).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(loss(&a, &b).unwrap(), loss(&b, &a).unwrap());
        assert!(loss(&a, &Image::zeros(ImageGrid::covering(5, 1.0).unwrap())).is_err());
    }

    #[test]
    fn output_nonnegative_and_single_back_projection() {
        let m = tiny_model(1);
        let (g, mask, _) = tiny_sample(3);
        m.pipeline().prepare(&mask).unwrap();
        projector::reset_op_counts();
        let img = m.reconstruct(&g, &mask).unwrap();
        let counts = projector::op_counts();
        assert_eq!((counts.back, counts.forward, counts.transpose), (1, 0, 0));
        assert!(img.values().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn zero_network_is_clipped_range_fbp() {
        let pipeline = tiny_pipeline();
        let zero = FnoParams::zeros(8, 3, 4, 3, false).unwrap();
        let m = FnoBpModel::new(pipeline.clone(), zero).unwrap();
        let (g, mask, _) = tiny_sample(4);
        let expected = pipeline.fbp_range(&g, &mask).unwrap().map(|v| v.max(0.0));
        let got = m.reconstruct(&g, &mask).unwrap();
        for (a, b) in got.values().iter().zip(expected.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_gradient_matches_central_differences() {
        let m = tiny_model(5);
        let (g, mask, target) = tiny_sample(6);
        let input = m.prepare_input(&g, &mask).unwrap();
        let (_, grad) = m.loss_and_gradient_prepared(&input, &target).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = 1e-5;
        let eval = |p: &FnoParams| {
            let mm = FnoBpModel::new(m.pipeline().clone(), p.clone()).unwrap();
            loss(&mm.reconstruct_prepared(&input).unwrap(), &target).unwrap()
        };
        let mut checked = 0;
        while checked < 10 {
            let i = rng.random_range(0..m.params().len());
            let mut plus = m.params().values().to_vec();
            plus[i] += h;
            let mut minus = m.params().values().to_vec();
            minus[i] -= h;
            let fd = (eval(&m.params().with_values(plus).unwrap()) - eval(&m.params().with_values(minus).unwrap())) / (2.0 * h);
            if fd.abs() < 1e-9 && grad[i].abs() < 1e-9 {
                continue;
            }
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs());
            assert!(rel <= 1e-3, "parameter {i}: fd {fd} analytic {}", grad[i]);
            checked += 1;
        }
    }

    #[test]
    fn gradient_changes_sign_across_line_minimum() {
        let m = tiny_model(7);
        let (g, mask, target) = tiny_sample(8);
        let input = m.prepare_input(&g, &mask).unwrap();
        let (_, grad) = m.loss_and_gradient_prepared(&input, &target).unwrap();
        let norm = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
        let dir: Vec<f64> = grad.iter().map(|v| -v / norm).collect();
        let at = |t: f64| {
            let vals: Vec<f64> = m.params().values().iter().zip(&dir).map(|(p, d)| p + t * d).collect();
            FnoBpModel::new(m.pipeline().clone(), m.params().with_values(vals).unwrap()).unwrap()
        };
        let phi = |t: f64| loss(&at(t).reconstruct_prepared(&input).unwrap(), &target).unwrap();
        // bracket and golden-section search for the minimum along the descent ray
        let mut hi = 1e-3;
        while phi(2.0 * hi) < phi(hi) {
            hi *= 2.0;
        }
        let (mut a, mut b) = (0.0, 2.0 * hi);
        let r = 0.5 * (5f64.sqrt() - 1.0);
        for _ in 0..80 {
            let c = b - r * (b - a);
            let d = a + r * (b - a);
            if phi(c) < phi(d) {
                b = d;
            } else {
                a = c;
            }
        }
        let t_star = 0.5 * (a + b);
        let slope = |t: f64| {
            let (_, gr) = at(t).loss_and_gradient_prepared(&input, &target).unwrap();
            gr.iter().zip(&dir).map(|(x, y)| x * y).sum::<f64>()
        };
        let delta = 0.05 * t_star;
        assert!(slope(t_star - delta) < 0.0);
        assert!(slope(t_star + delta) > 0.0);
    }

    #[test]
    fn matching_target_gives_zero_gradient() {
        let m = tiny_model(2);
        let (g, mask, _) = tiny_sample(9);
        let input = m.prepare_input(&g, &mask).unwrap();
        let pred = m.reconstruct_prepared(&input).unwrap();
        let (value, grad) = m.loss_and_gradient_prepared(&input, &pred).unwrap();
        assert_eq!(value, 0.0);
        assert!(grad.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bundle_roundtrip() {
        let m = tiny_model(3);
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        let back = FnoBpModel::load(dir.path(), None).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(back.pipeline().filter(), m.pipeline().filter());
        let (g, mask, _) = tiny_sample(1);
        assert_eq!(back.reconstruct(&g, &mask).unwrap(), m.reconstruct(&g, &mask).unwrap());
    }

    #[test]
    fn rejects_mismatched_network() {
        assert!(FnoBpModel::new(tiny_pipeline(), FnoParams::init(9, 3, 4, 3, false, 0).unwrap()).is_err());
        assert!(FnoBpModel::new(tiny_pipeline(), FnoParams::init(8, 3, 10, 3, false, 0).unwrap()).is_err());
    }
}
