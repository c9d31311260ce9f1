//! Portable raster files: one JSON header line followed by a raw
//! little-endian, row-major payload.
//!
//! ```text
//! {"magic":"ctkit1","dtype":"f64","shape":[180,128],"meta":{}}\n
//! <180 * 128 * 8 bytes>
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::data::{Image, KnownMask, Sinogram};
use crate::error::{Error, Result};
use crate::geometry::ImageGrid;

pub const MAGIC: &str = "ctkit1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F64,
    F32,
    U8,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum RasterData {
    F64(Vec<f64>),
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl RasterData {
    pub fn dtype(&self) -> Dtype {
        match self {
            RasterData::F64(_) => Dtype::F64,
            RasterData::F32(_) => Dtype::F32,
            RasterData::U8(_) => Dtype::U8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            RasterData::F64(v) => v.len(),
            RasterData::F32(v) => v.len(),
            RasterData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Values widened to f64.
    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            RasterData::F64(v) => v.clone(),
            RasterData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            RasterData::U8(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    magic: String,
    dtype: Dtype,
    shape: Vec<usize>,
    #[serde(default)]
    meta: Map<String, Value>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub shape: Vec<usize>,
    pub meta: Map<String, Value>,
    pub data: RasterData,
}

impl Raster {
    pub fn new(shape: Vec<usize>, data: RasterData) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "raster shape {shape:?} holds {expected} values, payload has {}",
                data.len()
            )));
        }
        Ok(Raster {
            shape,
            meta: Map::new(),
            data,
        })
    }

    pub fn with_meta(mut self, key: &str, value: Value) -> Self {
        self.meta.insert(key.to_string(), value);
        self
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let header = Header {
            magic: MAGIC.to_string(),
            dtype: self.data.dtype(),
            shape: self.shape.clone(),
            meta: self.meta.clone(),
        };
        let line = serde_json::to_string(&header).expect("header serializes");
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
        match &self.data {
            RasterData::F64(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
            RasterData::F32(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
            RasterData::U8(v) => w.write_all(v)?,
        }
        w.flush()
    }

    /// Reads one raster; `origin` only labels errors.
    pub fn read_from<R: BufRead>(mut r: R, origin: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Raster {
            path: origin.to_path_buf(),
            reason,
        };
        let mut line = Vec::new();
        r.read_until(b'\n', &mut line).map_err(|e| Error::io(origin, e))?;
        if line.last() != Some(&b'\n') {
            return Err(bad("missing header line".into()));
        }
        line.pop();
        let header: Header =
            serde_json::from_slice(&line).map_err(|e| bad(format!("bad header: {e}")))?;
        if header.magic != MAGIC {
            return Err(bad(format!("magic {:?}, expected {MAGIC:?}", header.magic)));
        }
        let count: usize = header.shape.iter().product();
        let expected = count * header.dtype.size();
        let mut payload = Vec::with_capacity(expected);
        r.read_to_end(&mut payload).map_err(|e| Error::io(origin, e))?;
        if payload.len() != expected {
            return Err(bad(format!(
                "payload has {} bytes, header implies {expected}",
                payload.len()
            )));
        }
        let data = match header.dtype {
            Dtype::F64 => RasterData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            Dtype::F32 => RasterData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            Dtype::U8 => RasterData::U8(payload),
        };
        Ok(Raster {
            shape: header.shape,
            meta: header.meta,
            data,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(BufWriter::new(file)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(file), path)
    }

    fn expect_2d(&self, what: &str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [rows, cols] => Ok((rows, cols)),
            _ => Err(Error::Shape(format!("{what} raster must be 2-D, shape is {:?}", self.shape))),
        }
    }

    pub fn from_image(img: &Image) -> Self {
        let side = img.side();
        Raster::new(vec![side, side], RasterData::F64(img.values().to_vec()))
            .expect("image shape")
            .with_meta("pixel_size", img.grid().pixel_size.into())
    }

    pub fn to_image(&self) -> Result<Image> {
        let (rows, cols) = self.expect_2d("image")?;
        if rows != cols {
            return Err(Error::Shape(format!("image raster must be square, got {rows}x{cols}")));
        }
        let pixel_size = self
            .meta
            .get("pixel_size")
            .and_then(Value::as_f64)
            .ok_or_else(|| Error::Config("image raster lacks meta.pixel_size".into()))?;
        Image::from_values(ImageGrid::new(rows, pixel_size)?, self.data.to_f64())
    }

    pub fn from_sinogram(g: &Sinogram) -> Self {
        Raster::new(vec![g.rows(), g.cols()], RasterData::F64(g.values().to_vec()))
            .expect("sinogram shape")
    }

    pub fn to_sinogram(&self) -> Result<Sinogram> {
        let (rows, cols) = self.expect_2d("sinogram")?;
        Sinogram::from_values(rows, cols, self.data.to_f64())
    }

    pub fn from_mask(m: &KnownMask) -> Self {
        Raster::new(
            vec![m.rows(), m.cols()],
            RasterData::U8(m.values().iter().map(|&b| b as u8).collect()),
        )
        .expect("mask shape")
    }

    pub fn to_mask(&self) -> Result<KnownMask> {
        let (rows, cols) = self.expect_2d("mask")?;
        KnownMask::new(rows, cols, self.data.to_f64().iter().map(|&v| v != 0.0).collect())
    }

    pub fn from_bools(side: usize, values: &[bool]) -> Self {
        Raster::new(
            vec![side, side],
            RasterData::U8(values.iter().map(|&b| b as u8).collect()),
        )
        .expect("boolean raster shape")
    }

    pub fn to_bools(&self) -> Result<(usize, usize, Vec<bool>)> {
        let (rows, cols) = self.expect_2d("boolean")?;
        Ok((rows, cols, self.data.to_f64().iter().map(|&v| v != 0.0).collect()))
    }
}
