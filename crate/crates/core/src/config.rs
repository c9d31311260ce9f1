//! Run configuration: one JSON document with a schema version, validated
//! before any work starts.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extrapolation::BasisSpec;
use crate::filtering::FilterSpec;
use crate::fno::{FnoParams, FnoSpec};
use crate::geometry::{FanGeometry, ImageGrid};
use crate::model::{FnoBpModel, Pipeline};
use crate::phantoms::PhantomSpec;
use crate::training::TrainConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    pub cutoff_fraction: f64,
    pub pad_factor: usize,
    /// FBP scale; `null` calibrates it on a unit disc.
    pub scale: Option<f64>,
}

impl Default for FilterConfig {
    fn default() -> Self {
        let d = FilterSpec::default();
        FilterConfig {
            cutoff_fraction: d.cutoff_fraction,
            pad_factor: d.pad_factor,
            scale: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Gram cache directory; the `CTKIT_CACHE_DIR` environment variable
    /// takes precedence when set.
    pub cache_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub geometry: FanGeometry,
    pub grid: ImageGrid,
    #[serde(default)]
    pub basis: BasisSpec,
    /// Ridge parameter; `null` uses `1e-3 * trace(G) / 650` per mask.
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub filter: FilterConfig,
    #[serde(default)]
    pub fno: FnoSpec,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub phantom: PhantomSpec,
    #[serde(default)]
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    /// Desk-scale setup: 128 x 128 grid on `[-1, 1]^2`, 180 angles over the
    /// full circle, 128 detector bins.
    fn default() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            geometry: FanGeometry::full_scan(5.0, 128, 2.1, 180, 0.95).expect("default geometry"),
            grid: ImageGrid::covering(128, 1.0).expect("default grid"),
            basis: BasisSpec::default(),
            lambda: None,
            filter: FilterConfig::default(),
            fno: FnoSpec::default(),
            training: TrainConfig::default(),
            phantom: PhantomSpec::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        ImageGrid::new(self.grid.side, self.grid.pixel_size)?;
        self.grid.check_covers(&self.geometry)?;
        self.basis.validate()?;
        if let Some(l) = self.lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::Config(format!("lambda must be non-negative, got {l}")));
            }
        }
        self.filter_spec(self.filter.scale.unwrap_or(1.0)).validate()?;
        self.fno.validate()?;
        self.training.validate()?;
        self.phantom.validate()?;
        Ok(())
    }

    fn filter_spec(&self, scale: f64) -> FilterSpec {
        FilterSpec {
            cutoff_fraction: self.filter.cutoff_fraction,
            pad_factor: self.filter.pad_factor,
            scale,
        }
    }

    /// Gram cache directory: `CTKIT_CACHE_DIR`, else `paths.cache_dir`.
    pub fn cache_dir(&self) -> Option<PathBuf> {
        std::env::var_os("CTKIT_CACHE_DIR")
            .filter(|v| !v.is_empty())
            .map(PathBuf::from)
            .or_else(|| self.paths.cache_dir.clone())
    }

    pub fn pipeline(&self) -> Result<Pipeline> {
        let gram = self.cache_dir();
        match self.filter.scale {
            Some(s) => Pipeline::new(self.geometry.clone(), self.grid, self.basis, self.lambda, self.filter_spec(s), gram),
            None => Pipeline::calibrated(self.geometry.clone(), self.grid, self.basis, self.lambda, self.filter_spec(1.0), gram),
        }
    }

    /// Pipeline plus a freshly initialized network.
    pub fn model(&self) -> Result<FnoBpModel> {
        let fno = FnoParams::for_spec(&self.fno, self.geometry.n_angles(), self.geometry.bins())?;
        FnoBpModel::new(self.pipeline()?, fno)
    }
}
