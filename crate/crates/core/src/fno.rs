//! One-dimensional Fourier neural operator over the detector axis.
//!
//! Every angle row of the sinogram is an input channel. The network is
//! lifting (L -> C) -> hidden layers of `spectral_conv + skip` with GELU
//! between them -> projection (C -> L), all pointwise along `u` except the
//! spectral convolutions. Gradients are computed by hand-written adjoints.

use std::fs;
use std::path::Path;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use libm::erf;

use crate::data::Sinogram;
use crate::error::{Error, Result};
use crate::fft;
use crate::raster::{Raster, RasterData};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FnoSpec {
    /// Hidden channel count `C`.
    pub width: usize,
    /// Retained Fourier modes `M`, clamped to `U / 2 + 1`.
    pub modes: usize,
    pub layers: usize,
    pub bias: bool,
    pub seed: u64,
}

impl Default for FnoSpec {
    fn default() -> Self {
        FnoSpec {
            width: 60,
            modes: 280,
            layers: 3,
            bias: false,
            seed: 0,
        }
    }
}

impl FnoSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.modes == 0 || self.layers == 0 {
            return Err(Error::Config("fno.width, fno.modes and fno.layers must be positive".into()));
        }
        Ok(())
    }

    /// Modes actually retained for rows of `bins` samples.
    pub fn modes_for(&self, bins: usize) -> usize {
        self.modes.min(bins / 2 + 1)
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

pub fn gelu_derivative(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// Named slice of the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorInfo {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl TensorInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct LayerOffsets {
    spectral: usize,
    skip: usize,
    bias: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Layout {
    lifting: usize,
    lifting_bias: Option<usize>,
    projection: usize,
    projection_bias: Option<usize>,
    len: usize,
}

/// Network weights in one flat `f64` vector; complex spectral weights are
/// stored as interleaved `(re, im)` pairs, indexed `[out][in][mode]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FnoParams {
    channels: usize,
    width: usize,
    modes: usize,
    layers: usize,
    bias: bool,
    seed: u64,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamsManifest {
    format_version: u32,
    #[serde(rename = "L")]
    channels: usize,
    #[serde(rename = "C")]
    width: usize,
    #[serde(rename = "M")]
    modes: usize,
    layers: Vec<LayerEntry>,
    bias: bool,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

impl FnoParams {
    /// Zero weights of the given dimensions.
    pub fn zeros(channels: usize, width: usize, modes: usize, layers: usize, bias: bool) -> Result<Self> {
        if channels == 0 || width == 0 || modes == 0 || layers == 0 {
            return Err(Error::Config("network dimensions must be positive".into()));
        }
        let mut p = FnoParams {
            channels,
            width,
            modes,
            layers,
            bias,
            seed: 0,
            data: Vec::new(),
        };
        p.data = vec![0.0; p.layout().len];
        Ok(p)
    }

    /// Random initialization: Gaussian spectral weights scaled by
    /// `1 / (C_in C_out)`, every real matrix uniform in `+-sqrt(1 / fan_in)`.
    /// Biases start at zero.
    pub fn init(channels: usize, width: usize, modes: usize, layers: usize, bias: bool, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(channels, width, modes, layers, bias)?;
        p.seed = seed;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in p.tensors() {
            let range = t.range();
            if t.name.ends_with("bias") {
                continue;
            }
            if t.name.ends_with("spectral") {
                let scale = 1.0 / (width * width) as f64;
                for v in &mut p.data[range] {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v = z * scale;
                }
            } else {
                let fan_in = t.shape[1];
                let a = (1.0 / fan_in as f64).sqrt();
                for v in &mut p.data[range] {
                    *v = rng.random_range(-a..=a);
                }
            }
        }
        Ok(p)
    }

    pub fn for_spec(spec: &FnoSpec, channels: usize, bins: usize) -> Result<Self> {
        spec.validate()?;
        Self::init(channels, spec.width, spec.modes_for(bins), spec.layers, spec.bias, spec.seed)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn has_bias(&self) -> bool {
        self.bias
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Same dimensions, new values.
    pub fn with_values(&self, data: Vec<f64>) -> Result<Self> {
        if data.len() != self.data.len() {
            return Err(Error::Shape(format!("{} values for {} parameters", data.len(), self.data.len())));
        }
        Ok(FnoParams { data, ..self.clone() })
    }

    fn layer_len(&self) -> usize {
        let c = self.width;
        2 * c * c * self.modes + c * c + if self.bias { c } else { 0 }
    }

    fn layout(&self) -> Layout {
        let (l, c) = (self.channels, self.width);
        let mut next = c * l;
        let lifting_bias = self.bias.then(|| {
            next += c;
            next - c
        });
        next += self.layers * self.layer_len();
        let projection = next;
        next += l * c;
        let projection_bias = self.bias.then(|| {
            next += l;
            next - l
        });
        Layout {
            lifting: 0,
            lifting_bias,
            projection,
            projection_bias,
            len: next,
        }
    }

    fn layer(&self, k: usize) -> LayerOffsets {
        let c = self.width;
        let base = c * self.channels + if self.bias { c } else { 0 } + k * self.layer_len();
        let skip = base + 2 * c * c * self.modes;
        LayerOffsets {
            spectral: base,
            skip,
            bias: self.bias.then_some(skip + c * c),
        }
    }

    /// Every parameter tensor with its place in the flat vector.
    pub fn tensors(&self) -> Vec<TensorInfo> {
        let (l, c, m) = (self.channels, self.width, self.modes);
        let layout = self.layout();
        let mut out = vec![TensorInfo { name: "lifting".into(), offset: layout.lifting, shape: vec![c, l] }];
        if let Some(o) = layout.lifting_bias {
            out.push(TensorInfo { name: "lifting_bias".into(), offset: o, shape: vec![c] });
        }
        for k in 0..self.layers {
            let off = self.layer(k);
            out.push(TensorInfo { name: format!("layer{}_spectral", k + 1), offset: off.spectral, shape: vec![c, c, m, 2] });
            out.push(TensorInfo { name: format!("layer{}_skip", k + 1), offset: off.skip, shape: vec![c, c] });
            if let Some(o) = off.bias {
                out.push(TensorInfo { name: format!("layer{}_bias", k + 1), offset: o, shape: vec![c] });
            }
        }
        out.push(TensorInfo { name: "projection".into(), offset: layout.projection, shape: vec![l, c] });
        if let Some(o) = layout.projection_bias {
            out.push(TensorInfo { name: "projection_bias".into(), offset: o, shape: vec![l] });
        }
        out
    }

    /// Hash of dimensions and value bits; tapes record it to detect reuse
    /// after the weights changed.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(0x0000_0100_0000_01b3).rotate_left(17);
        };
        for d in [self.channels, self.width, self.modes, self.layers, self.bias as usize] {
            mix(d as u64);
        }
        for v in &self.data {
            mix(v.to_bits());
        }
        h
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::NonFinite(format!("network parameter {i}"))),
            None => Ok(()),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut layers = Vec::new();
        for t in self.tensors() {
            let file = format!("{}.raster", t.name);
            Raster::new(t.shape.clone(), RasterData::F64(self.data[t.range()].to_vec()))?.save(&dir.join(&file))?;
            layers.push(LayerEntry { name: t.name, shape: t.shape, file });
        }
        let manifest = ParamsManifest {
            format_version: FORMAT_VERSION,
            channels: self.channels,
            width: self.width,
            modes: self.modes,
            layers,
            bias: self.bias,
            seed: self.seed,
        };
        let path = dir.join("fno.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("fno.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: ParamsManifest = serde_json::from_str(&text)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Config(format!(
                "network format version {} is not supported (expected {FORMAT_VERSION})",
                manifest.format_version
            )));
        }
        let layer_count = manifest.layers.iter().filter(|e| e.name.ends_with("_skip")).count();
        let mut p = Self::zeros(manifest.channels, manifest.width, manifest.modes, layer_count, manifest.bias)?;
        p.seed = manifest.seed;
        let tensors = p.tensors();
        if tensors.len() != manifest.layers.len() {
            return Err(Error::Config(format!("{} lists an unexpected set of tensors", path.display())));
        }
        for (t, entry) in tensors.iter().zip(&manifest.layers) {
            if t.name != entry.name || t.shape != entry.shape {
                return Err(Error::Config(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    entry.name, entry.shape, t.name, t.shape
                )));
            }
            let r = Raster::load(&dir.join(&entry.file))?;
            if r.shape != t.shape {
                return Err(Error::Shape(format!("{} has shape {:?}, manifest says {:?}", entry.file, r.shape, t.shape)));
            }
            p.data[t.range()].copy_from_slice(&r.data.to_f64());
        }
        p.check_finite()?;
        Ok(p)
    }
}

/// `out[m x n] = a[m x k] * b[k x n]`, row-major.
fn matmul(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let dst = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            for (d, &bv) in dst.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *d += aip * bv;
            }
        }
    }
    out
}

/// `out[k x n] = a[m x k]^T * b[m x n]`.
fn matmul_tn(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            for (d, &bv) in out[p * n..(p + 1) * n].iter_mut().zip(brow) {
                *d += aip * bv;
            }
        }
    }
    out
}

/// `out[m x k] += a[m x n] * b[k x n]^T`.
fn add_matmul_nt(out: &mut [f64], a: &[f64], m: usize, n: usize, b: &[f64], k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            out[i * k + p] += arow.iter().zip(&b[p * n..(p + 1) * n]).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

fn add_bias(x: &mut [f64], bias: &[f64], n: usize) {
    for (row, &b) in x.chunks_mut(n).zip(bias) {
        row.iter_mut().for_each(|v| *v += b);
    }
}

fn sum_rows(x: &[f64], n: usize, out: &mut [f64]) {
    for (row, o) in x.chunks(n).zip(out.iter_mut()) {
        *o += row.iter().sum::<f64>();
    }
}

/// Truncated spectra of each row of `x` (`rows x u`).
fn spectra(x: &[f64], u: usize, modes: usize) -> Vec<Complex64> {
    let plan = fft::plan(u);
    let mut out = Vec::with_capacity(x.len() / u * modes);
    for row in x.chunks(u) {
        let mut s = plan.forward(row);
        s.truncate(modes);
        out.extend(s);
    }
    out
}

fn spectral_apply(xhat: &[Complex64], c_in: usize, w: &[f64], c_out: usize, modes: usize, u: usize) -> Vec<f64> {
    let plan = fft::plan(u);
    let mut out = Vec::with_capacity(c_out * u);
    let mut acc = vec![Complex64::new(0.0, 0.0); modes];
    for o in 0..c_out {
        acc.iter_mut().for_each(|a| *a = Complex64::new(0.0, 0.0));
        for i in 0..c_in {
            let xi = &xhat[i * modes..(i + 1) * modes];
            let base = 2 * ((o * c_in + i) * modes);
            let wi = &w[base..base + 2 * modes];
            for (m, a) in acc.iter_mut().enumerate() {
                *a += Complex64::new(wi[2 * m], wi[2 * m + 1]) * xi[m];
            }
        }
        out.extend(plan.inverse(&acc));
    }
    out
}

/// Spectral convolution of `x` (`c_in` rows of `u` samples) with complex
/// weights `[c_out][c_in][modes]` stored as interleaved pairs.
pub fn spectral_conv(x: &[f64], c_in: usize, u: usize, w: &[f64], c_out: usize, modes: usize) -> Result<Vec<f64>> {
    if modes > u / 2 + 1 {
        return Err(Error::Domain(format!("{modes} modes exceed the {} available for {u} samples", u / 2 + 1)));
    }
    if x.len() != c_in * u || w.len() != 2 * c_out * c_in * modes {
        return Err(Error::Shape("spectral_conv operand sizes disagree".into()));
    }
    Ok(spectral_apply(&spectra(x, u, modes), c_in, w, c_out, modes, u))
}

/// Activations recorded by [`fno_forward`].
#[derive(Clone, Debug)]
pub struct Tape {
    fingerprint: u64,
    rows: usize,
    cols: usize,
    input: Vec<f64>,
    /// Input of each hidden layer, `C x U`.
    hidden: Vec<Vec<f64>>,
    /// Truncated spectra of each hidden layer input, `C x M`.
    hidden_hat: Vec<Vec<Complex64>>,
    /// Pre-activation output of each hidden layer.
    pre: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl Tape {
    pub fn output(&self) -> Sinogram {
        Sinogram::from_values(self.rows, self.cols, self.output.clone()).expect("tape output is finite")
    }

    /// Re-runs the forward pass from the recorded input.
    pub fn replay(&self, p: &FnoParams) -> Result<Sinogram> {
        let g = Sinogram::from_values(self.rows, self.cols, self.input.clone())?;
        Ok(fno_forward(&g, p)?.0)
    }
}

/// Correction sinogram and the tape needed for [`fno_backward`].
pub fn fno_forward(g: &Sinogram, p: &FnoParams) -> Result<(Sinogram, Tape)> {
    let (l, u) = (g.rows(), g.cols());
    if l != p.channels {
        return Err(Error::Shape(format!("sinogram has {l} angle rows, network expects {}", p.channels)));
    }
    let (c, m) = (p.width, p.modes);
    if m > u / 2 + 1 {
        return Err(Error::Domain(format!("{m} modes exceed the {} available for {u} bins", u / 2 + 1)));
    }
    let layout = p.layout();
    let w = &p.data;
    let mut z = matmul(&w[layout.lifting..layout.lifting + c * l], c, l, g.values(), u);
    if let Some(o) = layout.lifting_bias {
        add_bias(&mut z, &w[o..o + c], u);
    }
    let mut hidden = Vec::with_capacity(p.layers);
    let mut hidden_hat = Vec::with_capacity(p.layers);
    let mut pre = Vec::with_capacity(p.layers);
    for k in 0..p.layers {
        let off = p.layer(k);
        let zhat = spectra(&z, u, m);
        let mut a = spectral_apply(&zhat, c, &w[off.spectral..off.spectral + 2 * c * c * m], c, m, u);
        let skip = matmul(&w[off.skip..off.skip + c * c], c, c, &z, u);
        a.iter_mut().zip(&skip).for_each(|(x, y)| *x += y);
        if let Some(o) = off.bias {
            add_bias(&mut a, &w[o..o + c], u);
        }
        let next = if k + 1 < p.layers { a.iter().map(|&v| gelu(v)).collect() } else { a.clone() };
        hidden.push(std::mem::replace(&mut z, next));
        hidden_hat.push(zhat);
        pre.push(a);
    }
    let mut y = matmul(&w[layout.projection..layout.projection + l * c], l, c, &z, u);
    if let Some(o) = layout.projection_bias {
        add_bias(&mut y, &w[o..o + l], u);
    }
    if let Some(i) = y.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("network output at angle {}, bin {}", i / u, i % u)));
    }
    hidden.push(z);
    let tape = Tape {
        fingerprint: p.fingerprint(),
        rows: l,
        cols: u,
        input: g.values().to_vec(),
        hidden,
        hidden_hat,
        pre,
        output: y.clone(),
    };
    Ok((Sinogram::from_values(l, u, y)?, tape))
}

/// Parameter gradient (flat, laid out like [`FnoParams::values`]) and input
/// gradient for the upstream gradient of the correction.
pub fn fno_backward(tape: &Tape, upstream: &Sinogram, p: &FnoParams) -> Result<(Vec<f64>, Sinogram)> {
    if tape.fingerprint != p.fingerprint() {
        return Err(Error::StaleTape("tape was recorded with different network parameters".into()));
    }
    if upstream.rows() != tape.rows || upstream.cols() != tape.cols {
        return Err(Error::Shape("upstream gradient does not match the recorded output".into()));
    }
    let (l, u, c, m) = (tape.rows, tape.cols, p.width, p.modes);
    let layout = p.layout();
    let w = &p.data;
    let mut grad = vec![0.0; w.len()];
    let dy = upstream.values();
    let z_last = &tape.hidden[p.layers];
    add_matmul_nt(&mut grad[layout.projection..layout.projection + l * c], dy, l, u, z_last, c);
    if let Some(o) = layout.projection_bias {
        sum_rows(dy, u, &mut grad[o..o + l]);
    }
    let mut dz = matmul_tn(&w[layout.projection..layout.projection + l * c], l, c, dy, u);
    let plan = fft::plan(u);
    for k in (0..p.layers).rev() {
        let off = p.layer(k);
        let da: Vec<f64> = if k + 1 < p.layers {
            dz.iter().zip(&tape.pre[k]).map(|(d, &a)| d * gelu_derivative(a)).collect()
        } else {
            dz
        };
        let z = &tape.hidden[k];
        add_matmul_nt(&mut grad[off.skip..off.skip + c * c], &da, c, u, z, c);
        if let Some(o) = off.bias {
            sum_rows(&da, u, &mut grad[o..o + c]);
        }
        let mut dz_prev = matmul_tn(&w[off.skip..off.skip + c * c], c, c, &da, u);
        // spectral branch
        let da_hat: Vec<Complex64> = da.chunks(u).flat_map(|row| plan.inverse_adjoint(row, m)).collect();
        let zhat = &tape.hidden_hat[k];
        let mut dz_hat = vec![Complex64::new(0.0, 0.0); c * m];
        for o in 0..c {
            let dao = &da_hat[o * m..(o + 1) * m];
            for i in 0..c {
                let zi = &zhat[i * m..(i + 1) * m];
                let base = off.spectral + 2 * ((o * c + i) * m);
                let dzi = &mut dz_hat[i * m..(i + 1) * m];
                for mm in 0..m {
                    let gw = dao[mm] * zi[mm].conj();
                    grad[base + 2 * mm] += gw.re;
                    grad[base + 2 * mm + 1] += gw.im;
                    dzi[mm] += Complex64::new(w[base + 2 * mm], -w[base + 2 * mm + 1]) * dao[mm];
                }
            }
        }
        for (i, row) in dz_prev.chunks_mut(u).enumerate() {
            let back = plan.forward_adjoint(&dz_hat[i * m..(i + 1) * m]);
            row.iter_mut().zip(&back).for_each(|(a, b)| *a += b);
        }
        dz = dz_prev;
    }
    let lift = &w[layout.lifting..layout.lifting + c * l];
    add_matmul_nt(&mut grad[layout.lifting..layout.lifting + c * l], &dz, c, u, &tape.input, l);
    if let Some(o) = layout.lifting_bias {
        sum_rows(&dz, u, &mut grad[o..o + c]);
    }
    let dx = matmul_tn(lift, c, l, &dz, u);
    Ok((grad, Sinogram::from_values(l, u, dx)?))
}
