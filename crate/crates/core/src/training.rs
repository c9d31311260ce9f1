//! Adam over the FNO parameters on a synthetic dataset.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::error::{Error, Result};
use crate::fno::FnoParams;
use crate::model::{FnoBpModel, PreparedInput};
use crate::phantoms::{load_sample, sample_seed, DatasetManifest};
use crate::raster::{Raster, RasterData};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub shuffle_seed: u64,
    /// Save an intermediate checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            learning_rate: 3e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 8,
            shuffle_seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("training.learning_rate must be positive, got {}", self.learning_rate)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("training.{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("training.epsilon must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("training.batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
}

/// Parameters plus optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: FnoParams,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
    pub history: Vec<LossRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateFile {
    step: u64,
    epoch: usize,
    config: TrainConfig,
    history: Vec<LossRecord>,
}

impl TrainState {
    pub fn new(params: FnoParams) -> Self {
        let n = params.len();
        TrainState {
            params,
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            step: 0,
            epoch: 0,
            history: Vec::new(),
        }
    }

    /// Mean batch loss of each completed epoch.
    pub fn epoch_means(&self) -> Vec<f64> {
        let mut out: Vec<(f64, usize)> = Vec::new();
        for r in &self.history {
            if out.len() <= r.epoch {
                out.resize(r.epoch + 1, (0.0, 0));
            }
            out[r.epoch].0 += r.loss;
            out[r.epoch].1 += 1;
        }
        out.into_iter().map(|(s, n)| s / n.max(1) as f64).collect()
    }

    fn save(&self, dir: &Path, config: &TrainConfig) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let n = self.first_moment.len();
        Raster::new(vec![n], RasterData::F64(self.first_moment.clone()))?.save(&dir.join("adam_m.raster"))?;
        Raster::new(vec![n], RasterData::F64(self.second_moment.clone()))?.save(&dir.join("adam_v.raster"))?;
        let file = StateFile {
            step: self.step,
            epoch: self.epoch,
            config: *config,
            history: self.history.clone(),
        };
        let path = dir.join("train_state.json");
        fs::write(&path, serde_json::to_string_pretty(&file)?).map_err(|e| Error::io(&path, e))
    }

    /// Optimizer state stored next to a model bundle by [`train`].
    pub fn load(dir: &Path, params: FnoParams) -> Result<Self> {
        let path = dir.join("train_state.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let file: StateFile = serde_json::from_str(&text)?;
        let m = Raster::load(&dir.join("adam_m.raster"))?.data.to_f64();
        let v = Raster::load(&dir.join("adam_v.raster"))?.data.to_f64();
        if m.len() != params.len() || v.len() != params.len() {
            return Err(Error::Shape("optimizer moments do not match the network size".into()));
        }
        Ok(TrainState {
            params,
            first_moment: m,
            second_moment: v,
            step: file.step,
            epoch: file.epoch,
            history: file.history,
        })
    }
}

/// Bias-corrected Adam update.
pub fn adam_step(state: &mut TrainState, grads: &[f64], cfg: &TrainConfig) -> Result<()> {
    if grads.len() != state.params.len() {
        return Err(Error::Shape(format!("{} gradients for {} parameters", grads.len(), state.params.len())));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        let tensor = state
            .params
            .tensors()
            .into_iter()
            .find(|t| t.range().contains(&i))
            .map_or_else(String::new, |t| format!(" ({} entry {})", t.name, i - t.offset));
        return Err(Error::NonFinite(format!(
            "gradient of parameter {i}{tensor} is {} at step {}",
            grads[i], state.step
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let params = state.params.values_mut();
    for i in 0..grads.len() {
        let g = grads[i];
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
    Ok(())
}

/// Extrapolated and filtered inputs with their targets, ready for training.
pub struct TrainingSet {
    pub inputs: Vec<PreparedInput>,
    pub targets: Vec<Image>,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Reads every sample of a dataset directory and runs the fixed stages.
    pub fn load(dir: &Path, model: &FnoBpModel) -> Result<Self> {
        let manifest = DatasetManifest::load(dir)?;
        check_compatible(&manifest, model)?;
        let mut inputs = Vec::with_capacity(manifest.samples.len());
        let mut targets = Vec::with_capacity(manifest.samples.len());
        for entry in &manifest.samples {
            let s = load_sample(dir, entry.index)?;
            inputs.push(model.prepare_input(&s.sinogram, &s.mask)?);
            targets.push(s.image);
        }
        Ok(TrainingSet { inputs, targets })
    }

    /// Mean loss over the whole set.
    pub fn mean_loss(&self, model: &FnoBpModel) -> Result<f64> {
        let losses: Vec<f64> = self
            .inputs
            .par_iter()
            .zip(self.targets.par_iter())
            .map(|(x, t)| crate::model::loss(&model.reconstruct_prepared(x)?, t))
            .collect::<Result<_>>()?;
        Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
    }
}

pub fn check_compatible(manifest: &DatasetManifest, model: &FnoBpModel) -> Result<()> {
    let p = model.pipeline();
    if manifest.geometry != *p.geometry() {
        return Err(Error::Config("dataset geometry differs from the model geometry".into()));
    }
    if manifest.grid != p.grid() {
        return Err(Error::Config(format!(
            "dataset grid {:?} differs from the model grid {:?}",
            manifest.grid,
            p.grid()
        )));
    }
    Ok(())
}

/// Sample order of `epoch`, drawn from a stream seeded by `(seed, epoch)`.
pub fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, epoch));
    order.shuffle(&mut rng);
    order
}

/// Batch-averaged loss and gradient; per-sample results are reduced in batch order.
pub fn batch_gradient(model: &FnoBpModel, set: &TrainingSet, batch: &[usize]) -> Result<(f64, Vec<f64>)> {
    let parts: Vec<(f64, Vec<f64>)> = batch
        .par_iter()
        .map(|&i| model.loss_and_gradient_prepared(&set.inputs[i], &set.targets[i]))
        .collect::<Result<_>>()?;
    let n = parts.len() as f64;
    let mut grad = vec![0.0; model.params().len()];
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
    }
    grad.iter_mut().for_each(|v| *v /= n);
    Ok((loss / n, grad))
}

/// Runs epochs `state.epoch .. cfg.epochs`. `on_epoch` receives each finished
/// epoch index with its mean batch loss.
pub fn train_epochs(
    model: &mut FnoBpModel,
    set: &TrainingSet,
    cfg: &TrainConfig,
    state: &mut TrainState,
    checkpoint_dir: Option<&Path>,
    on_epoch: &mut dyn FnMut(usize, f64),
) -> Result<()> {
    cfg.validate()?;
    if set.is_empty() && cfg.epochs > state.epoch {
        return Err(Error::Config("training set is empty".into()));
    }
    model.set_params(state.params.clone())?;
    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let order = epoch_order(set.len(), cfg.shuffle_seed, epoch);
        let mut sum = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let (loss, grad) = batch_gradient(model, set, batch)?;
            state.history.push(LossRecord { step: state.step, epoch, loss });
            adam_step(state, &grad, cfg)?;
            model.set_params(state.params.clone())?;
            sum += loss;
            batches += 1;
        }
        state.epoch += 1;
        on_epoch(epoch, sum / batches.max(1) as f64);
        if let Some(dir) = checkpoint_dir {
            if cfg.checkpoint_every > 0 && state.epoch % cfg.checkpoint_every == 0 && state.epoch < cfg.epochs {
                save_checkpoint(&dir.join("checkpoints").join(format!("epoch_{:03}", state.epoch)), model, state, cfg)?;
            }
        }
    }
    Ok(())
}

/// Model bundle plus optimizer state, so training can resume from it.
pub fn save_checkpoint(dir: &Path, model: &FnoBpModel, state: &TrainState, cfg: &TrainConfig) -> Result<()> {
    model.save(dir)?;
    state.save(dir, cfg)
}

pub fn write_loss_csv(path: &Path, history: &[LossRecord]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "step,epoch,loss").expect("write to memory");
    for r in history {
        writeln!(out, "{},{},{:e}", r.step, r.epoch, r.loss).expect("write to memory");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Trains on the dataset in `data_dir` and writes the final checkpoint and
/// `loss.csv` into `out_dir`. `resume` continues from a saved state.
pub fn train(
    data_dir: &Path,
    cfg: &TrainConfig,
    model: &mut FnoBpModel,
    out_dir: &Path,
    resume: Option<TrainState>,
    on_epoch: &mut dyn FnMut(usize, f64),
) -> Result<TrainState> {
    cfg.validate()?;
    let set = TrainingSet::load(data_dir, model)?;
    let mut state = resume.unwrap_or_else(|| TrainState::new(model.params().clone()));
    train_epochs(model, &set, cfg, &mut state, Some(out_dir), on_epoch)?;
    save_checkpoint(out_dir, model, &state, cfg)?;
    write_loss_csv(&out_dir.join("loss.csv"), &state.history)?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extrapolation::BasisSpec;
    use crate::filtering::FilterSpec;
    use crate::geometry::{FanGeometry, ImageGrid};
    use crate::model::Pipeline;
    use crate::phantoms::{generate_dataset, PhantomSpec};

    fn scalar_state(value: f64) -> TrainState {
        let mut p = FnoParams::zeros(1, 1, 1, 1, false).unwrap();
        p.values_mut()[0] = value;
        TrainState::new(p)
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = scalar_state(0.5);
        let before = s.params.clone();
        let cfg = TrainConfig::default();
        adam_step(&mut s, &vec![0.0; before.len()], &cfg).unwrap();
        assert_eq!(s.params, before);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = scalar_state(0.0);
        let n = s.params.len();
        let mut g = vec![0.0; n];
        g[0] = 1.0;
        let cfg = TrainConfig { learning_rate: 0.01, ..Default::default() };
        adam_step(&mut s, &g, &cfg).unwrap();
        // m_hat = 1, v_hat = 1: update = lr / (1 + eps)
        let expected = -0.01 / (1.0 + 1e-8);
        assert!((s.params.values()[0] - expected).abs() < 1e-15);
        let mut neg = scalar_state(0.0);
        g[0] = -3.0;
        adam_step(&mut neg, &g, &cfg).unwrap();
        assert!((neg.params.values()[0] - 0.01).abs() < 1e-9);
    }

    #[test]
    fn identical_states_step_identically() {
        let mut a = scalar_state(0.2);
        let mut b = scalar_state(0.2);
        let g: Vec<f64> = (0..a.params.len()).map(|i| (i as f64).sin()).collect();
        let cfg = TrainConfig::default();
        for _ in 0..3 {
            adam_step(&mut a, &g, &cfg).unwrap();
            adam_step(&mut b, &g, &cfg).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut s = scalar_state(0.0);
        let mut g = vec![0.0; s.params.len()];
        g[2] = f64::NAN;
        let err = adam_step(&mut s, &g, &TrainConfig::default()).unwrap_err();
        assert!(err.to_string().contains("parameter 2"), "{err}");
        assert_eq!(s.step, 0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { learning_rate: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { beta2: 1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn shuffles_are_seeded_per_epoch() {
        assert_eq!(epoch_order(20, 3, 1), epoch_order(20, 3, 1));
        assert_ne!(epoch_order(20, 3, 1), epoch_order(20, 3, 2));
        let mut o = epoch_order(20, 3, 1);
        o.sort();
        assert_eq!(o, (0..20).collect::<Vec<_>>());
    }

    fn tiny_setup(dir: &Path) -> FnoBpModel {
        let geom = FanGeometry::full_scan(4.0, 16, 2.3, 8, 0.95).unwrap();
        let grid = ImageGrid::covering(16, 1.0).unwrap();
        let spec = PhantomSpec { hole_count: [1, 1], hole_size_range: [0.2, 0.4], seed: 4, ..Default::default() };
        generate_dataset(&spec, 6, &geom, grid, 180.0, false, dir).unwrap();
        let basis = BasisSpec { orders: 6, ..Default::default() };
        let pipeline = Pipeline::calibrated(geom, grid, basis, None, FilterSpec::default(), None).unwrap();
        FnoBpModel::new(pipeline, FnoParams::init(8, 3, 4, 3, false, 1).unwrap()).unwrap()
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let data = tempfile::tempdir().unwrap();
        let mut model = tiny_setup(data.path());
        let set = TrainingSet::load(data.path(), &model).unwrap();
        let cfg = TrainConfig { epochs: 3, batch_size: 4, learning_rate: 1e-3, ..Default::default() };
        let mut full = TrainState::new(model.params().clone());
        train_epochs(&mut model, &set, &cfg, &mut full, None, &mut |_, _| {}).unwrap();

        let mut model2 = tiny_setup(data.path());
        let mut first = TrainState::new(model2.params().clone());
        let part = TrainConfig { epochs: 1, ..cfg };
        train_epochs(&mut model2, &set, &part, &mut first, None, &mut |_, _| {}).unwrap();
        let ckpt = tempfile::tempdir().unwrap();
        save_checkpoint(ckpt.path(), &model2, &first, &part).unwrap();
        let mut loaded = FnoBpModel::load(ckpt.path(), None).unwrap();
        let mut resumed = TrainState::load(ckpt.path(), loaded.params().clone()).unwrap();
        assert_eq!(resumed, first);
        train_epochs(&mut loaded, &set, &cfg, &mut resumed, None, &mut |_, _| {}).unwrap();
        assert_eq!(resumed.history.len(), full.history.len());
        for (a, b) in resumed.history.iter().zip(&full.history) {
            assert_eq!((a.step, a.epoch), (b.step, b.epoch));
            assert!((a.loss - b.loss).abs() <= 1e-10);
        }
        assert_eq!(resumed.params, full.params);
    }

    #[test]
    fn zero_epochs_keep_initial_params_and_write_outputs() {
        let data = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        let mut model = tiny_setup(data.path());
        let init = model.params().clone();
        let cfg = TrainConfig { epochs: 0, ..Default::default() };
        let state = train(data.path(), &cfg, &mut model, out.path(), None, &mut |_, _| {}).unwrap();
        assert_eq!(state.params, init);
        assert_eq!(FnoBpModel::load(out.path(), None).unwrap().params(), &init);
        let csv = fs::read_to_string(out.path().join("loss.csv")).unwrap();
        assert_eq!(csv, "step,epoch,loss\n");
    }

    #[test]
    fn loss_history_is_finite_and_csv_has_one_row_per_step() {
        let data = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        let mut model = tiny_setup(data.path());
        let cfg = TrainConfig { epochs: 2, batch_size: 4, learning_rate: 1e-3, ..Default::default() };
        let mut epochs = Vec::new();
        let state = train(data.path(), &cfg, &mut model, out.path(), None, &mut |e, l| epochs.push((e, l))).unwrap();
        assert_eq!(state.history.len(), 4);
        assert!(state.history.iter().all(|r| r.loss.is_finite() && r.loss >= 0.0));
        assert_eq!(epochs.len(), 2);
        assert_eq!(state.epoch_means().len(), 2);
        let csv = fs::read_to_string(out.path().join("loss.csv")).unwrap();
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.lines().nth(1).unwrap().starts_with("0,0,"));
    }

    #[test]
    fn geometry_mismatch_is_rejected() {
        let data = tempfile::tempdir().unwrap();
        tiny_setup(data.path());
        let geom = FanGeometry::full_scan(4.5, 16, 2.3, 8, 0.95).unwrap();
        let grid = ImageGrid::covering(16, 1.0).unwrap();
        let pipeline = Pipeline::new(geom, grid, BasisSpec { orders: 6, ..Default::default() }, None, FilterSpec::default(), None).unwrap();
        let model = FnoBpModel::new(pipeline, FnoParams::init(8, 3, 4, 3, false, 1).unwrap()).unwrap();
        assert!(TrainingSet::load(data.path(), &model).is_err());
    }
}
