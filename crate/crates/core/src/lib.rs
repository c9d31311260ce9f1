//! Fan-beam CT reconstruction toolkit.
//!
//! Filtered back-projection, range-condition sinogram extrapolation for
//! limited-angle scans, and a Fourier-neural-operator correction of the
//! filtered sinogram trained end to end through the back-projection.

pub mod config;
pub mod data;
pub mod evaluation;
pub mod error;
pub mod extrapolation;
pub mod fft;
pub mod fno;
pub mod filtering;
pub mod geometry;
pub mod model;
pub mod phantoms;
pub mod projector;
pub mod raster;
pub mod training;

pub use data::{Image, KnownMask, Sinogram};
pub use error::{Error, Result};
pub use extrapolation::{BasisCoefficients, BasisSpec, GramCache};
pub use filtering::FilterSpec;
pub use geometry::{FanGeometry, ImageGrid};
