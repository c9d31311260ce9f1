//! Range-condition sinogram extrapolation.
//!
//! A consistent parallel-beam sinogram expands as
//! `g(theta, s) = sum_{n,k} c_{n,k} e^{i k theta} P_n(s / r) W(s)` with
//! `c_{n,k} = 0` unless `|k| <= n` and `k + n` is even. Real sinograms have
//! `c_{n,-k} = conj(c_{n,k})`, so only `k >= 0` is stored: 650 complex slots
//! for 50 radial orders. The basis is sampled on the fan-beam lattice through
//! the fan-to-parallel coordinate map.
//!
//! Because the synthesized sinogram is the real part of the series, the
//! normal operator of the masked least-squares problem is
//! `c -> G c + H conj(c)`, with `G` the Hermitian Gram matrix of the complex
//! basis columns and `H` the complex-symmetric coupling between each column
//! and the conjugate of the others. Both are 650 x 650; the ridge system is
//! solved in real coordinates (real parts of all slots, imaginary parts of the
//! `k > 0` slots).

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::data::{KnownMask, Sinogram};
use crate::error::{Error, Result};
use crate::geometry::{fan_to_parallel, hex_digest, FanCoords, FanGeometry};
use crate::raster::{Raster, RasterData};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolyFamily {
    ChebyshevSecond,
    ChebyshevFirst,
    Legendre,
}

impl PolyFamily {
    /// `P_0(x) .. P_{count-1}(x)` by the three-term recurrence.
    pub fn evaluate(self, x: f64, count: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(count);
        if count == 0 {
            return out;
        }
        out.push(1.0);
        if count == 1 {
            return out;
        }
        out.push(match self {
            PolyFamily::ChebyshevSecond => 2.0 * x,
            PolyFamily::ChebyshevFirst | PolyFamily::Legendre => x,
        });
        for n in 1..count - 1 {
            let next = match self {
                PolyFamily::ChebyshevSecond | PolyFamily::ChebyshevFirst => {
                    2.0 * x * out[n] - out[n - 1]
                }
                PolyFamily::Legendre => {
                    let nf = n as f64;
                    ((2.0 * nf + 1.0) * x * out[n] - nf * out[n - 1]) / (nf + 1.0)
                }
            };
            out.push(next);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightKind {
    /// `sqrt(1 - (s / r)^2)` on `|s| <= r`.
    Semicircle,
    /// Indicator of `|s| <= r`.
    Unit,
}

impl WeightKind {
    pub fn evaluate(self, t: f64) -> f64 {
        if t.abs() > 1.0 {
            return 0.0;
        }
        match self {
            WeightKind::Semicircle => (1.0 - t * t).max(0.0).sqrt(),
            WeightKind::Unit => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BasisSpec {
    /// Number of radial orders `N`; orders are `0..N`.
    pub orders: usize,
    pub family: PolyFamily,
    pub weight: WeightKind,
}

impl Default for BasisSpec {
    fn default() -> Self {
        BasisSpec {
            orders: 50,
            family: PolyFamily::ChebyshevSecond,
            weight: WeightKind::Semicircle,
        }
    }
}

impl BasisSpec {
    /// Allowed `(n, k)` pairs, `k >= 0`, `k == n (mod 2)`, ordered by `n`.
    pub fn slots(&self) -> Vec<(usize, usize)> {
        (0..self.orders)
            .flat_map(|n| (n % 2..=n).step_by(2).map(move |k| (n, k)))
            .collect()
    }

    pub fn slot_count(&self) -> usize {
        (0..self.orders).map(|n| n / 2 + 1).sum()
    }

    pub fn content_hash(&self) -> String {
        hex_digest(serde_json::to_string(self).expect("basis spec serializes").as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        if self.orders == 0 {
            return Err(Error::Config("basis.orders must be positive".into()));
        }
        Ok(())
    }
}

/// Complex coefficients `c_{n,k}` in [`BasisSpec::slots`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct BasisCoefficients {
    slots: Arc<Vec<(usize, usize)>>,
    values: Vec<Complex64>,
}

impl BasisCoefficients {
    pub fn zeros(spec: &BasisSpec) -> Self {
        let slots = spec.slots();
        let n = slots.len();
        BasisCoefficients {
            slots: Arc::new(slots),
            values: vec![Complex64::new(0.0, 0.0); n],
        }
    }

    pub fn from_values(spec: &BasisSpec, values: Vec<Complex64>) -> Result<Self> {
        let mut c = Self::zeros(spec);
        if values.len() != c.values.len() {
            return Err(Error::Shape(format!(
                "{} coefficients supplied for {} slots",
                values.len(),
                c.values.len()
            )));
        }
        c.values = values;
        Ok(c)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn slots(&self) -> &[(usize, usize)] {
        &self.slots
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Complex64] {
        &mut self.values
    }

    fn index(&self, n: usize, k: usize) -> Option<usize> {
        if k > n || (n + k) % 2 == 1 {
            return None;
        }
        self.slots.binary_search(&(n, k)).ok()
    }

    /// Coefficient of `(n, k)`; `None` for pairs the range condition forbids.
    pub fn get(&self, n: usize, k: usize) -> Option<Complex64> {
        self.index(n, k).map(|i| self.values[i])
    }

    pub fn set(&mut self, n: usize, k: usize, value: Complex64) -> Result<()> {
        let i = self.index(n, k).ok_or_else(|| {
            Error::Domain(format!("(n = {n}, k = {k}) has no coefficient slot"))
        })?;
        self.values[i] = value;
        Ok(())
    }

    /// Real inner product `Re sum conj(a) b`.
    pub fn dot(&self, other: &BasisCoefficients) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a.conj() * b).re)
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }
}

/// Basis tables for one geometry: `b_{n,k}(beta_i, u_j) = e^{i k beta_i} phi_{n,k}(u_j)`.
#[derive(Debug)]
pub struct Basis {
    spec: BasisSpec,
    slots: Arc<Vec<(usize, usize)>>,
    rows: usize,
    cols: usize,
    /// `phi[p * cols + j]`
    phi: Vec<Complex64>,
    /// `angular[k * rows + i] = e^{i k beta_i}`
    angular: Vec<Complex64>,
    /// Multiplicity of each slot in the real synthesis: 1 for k = 0, else 2.
    multiplicity: Vec<f64>,
    geometry_hash: String,
    spec_hash: String,
}

impl Basis {
    pub fn new(geom: &FanGeometry, spec: &BasisSpec) -> Result<Self> {
        spec.validate()?;
        let slots = spec.slots();
        let r = geom.source_radius();
        let fov = geom.fov_radius();
        let cols = geom.bins();
        let rows = geom.n_angles();
        let mut phi = vec![Complex64::new(0.0, 0.0); slots.len() * cols];
        for j in 0..cols {
            let p = fan_to_parallel(FanCoords { beta: 0.0, u: geom.bin_center(j) }, r);
            let t = p.s / fov;
            let w = spec.weight.evaluate(t);
            if w == 0.0 {
                continue;
            }
            let poly = spec.family.evaluate(t, spec.orders);
            for (idx, &(n, k)) in slots.iter().enumerate() {
                phi[idx * cols + j] = Complex64::from_polar(poly[n] * w, k as f64 * p.theta);
            }
        }
        let mut angular = Vec::with_capacity(spec.orders * rows);
        for k in 0..spec.orders {
            angular.extend(geom.angles().iter().map(|&b| Complex64::from_polar(1.0, k as f64 * b)));
        }
        let multiplicity = slots.iter().map(|&(_, k)| if k == 0 { 1.0 } else { 2.0 }).collect();
        Ok(Basis {
            spec: *spec,
            slots: Arc::new(slots),
            rows,
            cols,
            phi,
            angular,
            multiplicity,
            geometry_hash: geom.content_hash(),
            spec_hash: spec.content_hash(),
        })
    }

    pub fn spec(&self) -> &BasisSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    fn phi(&self, p: usize) -> &[Complex64] {
        &self.phi[p * self.cols..(p + 1) * self.cols]
    }

    fn angular(&self, k: usize) -> &[Complex64] {
        &self.angular[k * self.rows..(k + 1) * self.rows]
    }

    pub fn zero_coefficients(&self) -> BasisCoefficients {
        BasisCoefficients {
            slots: self.slots.clone(),
            values: vec![Complex64::new(0.0, 0.0); self.slots.len()],
        }
    }

    fn check(&self, g: &Sinogram) -> Result<()> {
        if g.rows() != self.rows || g.cols() != self.cols {
            return Err(Error::Shape(format!(
                "sinogram {}x{} does not match basis lattice {}x{}",
                g.rows(),
                g.cols(),
                self.rows,
                self.cols
            )));
        }
        Ok(())
    }

    /// Real part of the truncated series on the fan-beam lattice.
    pub fn synthesize(&self, c: &BasisCoefficients) -> Result<Sinogram> {
        if c.len() != self.len() {
            return Err(Error::Shape(format!("{} coefficients for {} slots", c.len(), self.len())));
        }
        let orders = self.spec.orders;
        // h_k(j) = sum_n m_{n,k} c_{n,k} phi_{n,k}(j)
        let mut h = vec![Complex64::new(0.0, 0.0); orders * self.cols];
        for (p, &(_, k)) in self.slots.iter().enumerate() {
            let coef = c.values[p] * self.multiplicity[p];
            if coef == Complex64::new(0.0, 0.0) {
                continue;
            }
            let dst = &mut h[k * self.cols..(k + 1) * self.cols];
            for (d, f) in dst.iter_mut().zip(self.phi(p)) {
                *d += coef * f;
            }
        }
        let mut out = Sinogram::zeros(self.rows, self.cols);
        for k in 0..orders {
            let hk = &h[k * self.cols..(k + 1) * self.cols];
            if hk.iter().all(|v| *v == Complex64::new(0.0, 0.0)) {
                continue;
            }
            for (i, e) in self.angular(k).iter().enumerate() {
                for (o, v) in out.row_mut(i).iter_mut().zip(hk) {
                    *o += (e * v).re;
                }
            }
        }
        Ok(out)
    }

    /// Adjoint of [`Basis::synthesize`] applied to the masked sinogram.
    pub fn analyze(&self, g: &Sinogram, mask: &KnownMask) -> Result<BasisCoefficients> {
        self.check(g)?;
        mask.check_shape(g)?;
        let orders = self.spec.orders;
        // m_k(j) = sum_i mask * g * e^{-i k beta_i}
        let mut moments = vec![Complex64::new(0.0, 0.0); orders * self.cols];
        for k in 0..orders {
            let dst = &mut moments[k * self.cols..(k + 1) * self.cols];
            for (i, e) in self.angular(k).iter().enumerate() {
                let e = e.conj();
                let row = g.row(i);
                for (j, d) in dst.iter_mut().enumerate() {
                    if mask.get(i, j) {
                        *d += e * row[j];
                    }
                }
            }
        }
        let mut c = self.zero_coefficients();
        for (p, &(_, k)) in self.slots.iter().enumerate() {
            let mk = &moments[k * self.cols..(k + 1) * self.cols];
            let s: Complex64 = mk.iter().zip(self.phi(p)).map(|(m, f)| m * f.conj()).sum();
            c.values[p] = s * self.multiplicity[p];
        }
        Ok(c)
    }
}

/// Free-function form of [`Basis::synthesize`].
pub fn synthesize(c: &BasisCoefficients, geom: &FanGeometry, spec: &BasisSpec) -> Result<Sinogram> {
    Basis::new(geom, spec)?.synthesize(c)
}

/// Free-function form of [`Basis::analyze`].
pub fn analyze(g: &Sinogram, mask: &KnownMask, geom: &FanGeometry, spec: &BasisSpec) -> Result<BasisCoefficients> {
    Basis::new(geom, spec)?.analyze(g, mask)
}

/// Normal-operator blocks of the masked basis, keyed by the hashes of
/// geometry, mask and basis spec.
#[derive(Clone, Debug, PartialEq)]
pub struct GramCache {
    dim: usize,
    /// Hermitian `G`, row-major.
    gram: Vec<Complex64>,
    /// Complex-symmetric `H`, row-major.
    coupling: Vec<Complex64>,
    pub geometry_hash: String,
    pub mask_hash: String,
    pub basis_hash: String,
}

#[derive(Serialize, Deserialize)]
struct GramSidecar {
    dim: usize,
    geometry_hash: String,
    mask_hash: String,
    basis_hash: String,
}

impl GramCache {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn gram(&self, p: usize, q: usize) -> Complex64 {
        self.gram[p * self.dim + q]
    }

    pub fn coupling(&self, p: usize, q: usize) -> Complex64 {
        self.coupling[p * self.dim + q]
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|p| self.gram(p, p).re).sum()
    }

    /// Default ridge parameter `1e-3 * trace(G) / dim`.
    pub fn default_lambda(&self) -> f64 {
        1e-3 * self.trace() / self.dim as f64
    }

    /// Largest `|G_pq - conj(G_qp)|` relative to the largest diagonal entry.
    pub fn hermitian_defect(&self) -> f64 {
        let scale = (0..self.dim).map(|p| self.gram(p, p).norm()).fold(0.0, f64::max).max(1e-300);
        let mut worst = 0.0f64;
        for p in 0..self.dim {
            for q in 0..self.dim {
                worst = worst.max((self.gram(p, q) - self.gram(q, p).conj()).norm());
            }
        }
        worst / scale
    }

    /// Cache key combining the three hashes.
    pub fn key(geometry_hash: &str, mask_hash: &str, basis_hash: &str) -> String {
        hex_digest(format!("{geometry_hash}:{mask_hash}:{basis_hash}").as_bytes())
    }

    pub fn matches(&self, basis: &Basis, mask: &KnownMask) -> bool {
        self.geometry_hash == basis.geometry_hash
            && self.basis_hash == basis.spec_hash
            && self.mask_hash == mask.content_hash()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let split = |v: &[Complex64], f: fn(&Complex64) -> f64| {
            Raster::new(vec![self.dim, self.dim], RasterData::F64(v.iter().map(f).collect()))
                .expect("gram shape")
        };
        split(&self.gram, |c| c.re).save(&dir.join("gram_re.raster"))?;
        split(&self.gram, |c| c.im).save(&dir.join("gram_im.raster"))?;
        split(&self.coupling, |c| c.re).save(&dir.join("coupling_re.raster"))?;
        split(&self.coupling, |c| c.im).save(&dir.join("coupling_im.raster"))?;
        let sidecar = GramSidecar {
            dim: self.dim,
            geometry_hash: self.geometry_hash.clone(),
            mask_hash: self.mask_hash.clone(),
            basis_hash: self.basis_hash.clone(),
        };
        let path = dir.join("gram.json");
        fs::write(&path, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("gram.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let sidecar: GramSidecar = serde_json::from_str(&text)?;
        let dim = sidecar.dim;
        let read = |name: &str| -> Result<Vec<f64>> {
            let r = Raster::load(&dir.join(name))?;
            if r.shape != [dim, dim] {
                return Err(Error::Shape(format!("{name} has shape {:?}, expected [{dim}, {dim}]", r.shape)));
            }
            Ok(r.data.to_f64())
        };
        let join = |re: Vec<f64>, im: Vec<f64>| -> Vec<Complex64> {
            re.into_iter().zip(im).map(|(a, b)| Complex64::new(a, b)).collect()
        };
        Ok(GramCache {
            dim,
            gram: join(read("gram_re.raster")?, read("gram_im.raster")?),
            coupling: join(read("coupling_re.raster")?, read("coupling_im.raster")?),
            geometry_hash: sidecar.geometry_hash,
            mask_hash: sidecar.mask_hash,
            basis_hash: sidecar.basis_hash,
        })
    }

    /// Loads the cached matrices under `cache_dir` or computes and stores them.
    pub fn load_or_compute(cache_dir: &Path, basis: &Basis, mask: &KnownMask) -> Result<Self> {
        let key = Self::key(&basis.geometry_hash, &mask.content_hash(), &basis.spec_hash);
        let dir: PathBuf = cache_dir.join(key);
        if dir.join("gram.json").exists() {
            let cached = Self::load(&dir)?;
            if cached.matches(basis, mask) {
                return Ok(cached);
            }
        }
        let gram = compute_gram(basis, mask)?;
        gram.save(&dir)?;
        Ok(gram)
    }
}

/// `G` and `H` for the masked basis.
pub fn compute_gram(basis: &Basis, mask: &KnownMask) -> Result<GramCache> {
    if mask.rows() != basis.rows || mask.cols() != basis.cols {
        return Err(Error::Shape("mask does not match the basis lattice".into()));
    }
    let orders = basis.spec.orders;
    let cols = basis.cols;
    // t[d][j] = sum_i mask_ij e^{i d beta_i}, d in 0 ..= 2 (orders - 1)
    let max_d = 2 * orders.saturating_sub(1);
    let mut t = vec![Complex64::new(0.0, 0.0); (max_d + 1) * cols];
    // e^{i d beta} for d up to max_d, via products of the stored angular table
    let step: Vec<Complex64> = basis.angular(1.min(orders - 1)).to_vec();
    let mut current = vec![Complex64::new(1.0, 0.0); basis.rows];
    for d in 0..=max_d {
        if d < orders {
            current.copy_from_slice(basis.angular(d));
        } else {
            let half = d / 2;
            for (i, c) in current.iter_mut().enumerate() {
                *c = basis.angular(half)[i] * basis.angular(d - half)[i];
            }
        }
        let dst = &mut t[d * cols..(d + 1) * cols];
        for (i, e) in current.iter().enumerate() {
            for (j, v) in dst.iter_mut().enumerate() {
                if mask.get(i, j) {
                    *v += e;
                }
            }
        }
    }
    drop(step);
    let t_at = |d: isize, j: usize| -> Complex64 {
        if d >= 0 {
            t[d as usize * cols + j]
        } else {
            t[(-d) as usize * cols + j].conj()
        }
    };
    let dim = basis.len();
    let mut gram = vec![Complex64::new(0.0, 0.0); dim * dim];
    let mut coupling = vec![Complex64::new(0.0, 0.0); dim * dim];
    let support: Vec<usize> = (0..cols)
        .filter(|&j| (0..dim).any(|p| basis.phi(p)[j] != Complex64::new(0.0, 0.0)))
        .collect();
    for p in 0..dim {
        let (_, kp) = basis.slots[p];
        let fp = basis.phi(p);
        for q in p..dim {
            let (_, kq) = basis.slots[q];
            let fq = basis.phi(q);
            let dg = kq as isize - kp as isize;
            let dh = -((kp + kq) as isize);
            let mut sg = Complex64::new(0.0, 0.0);
            let mut sh = Complex64::new(0.0, 0.0);
            for &j in &support {
                let a = fp[j].conj();
                sg += a * fq[j] * t_at(dg, j);
                sh += a * fq[j].conj() * t_at(dh, j);
            }
            let scale = 0.5 * basis.multiplicity[p] * basis.multiplicity[q];
            sg *= scale;
            sh *= scale;
            gram[p * dim + q] = sg;
            gram[q * dim + p] = sg.conj();
            coupling[p * dim + q] = sh;
            coupling[q * dim + p] = sh;
        }
        // the diagonal of a Hermitian matrix is real
        gram[p * dim + p].im = 0.0;
    }
    Ok(GramCache {
        dim,
        gram,
        coupling,
        geometry_hash: basis.geometry_hash.clone(),
        mask_hash: mask.content_hash(),
        basis_hash: basis.spec_hash.clone(),
    })
}

/// Real coordinates of the coefficient vector: the real part of every slot
/// and the imaginary part of every `k > 0` slot, interleaved in slot order.
#[derive(Debug)]
struct RealLayout {
    re: Vec<usize>,
    im: Vec<Option<usize>>,
    dim: usize,
    /// Number of real coordinates belonging to orders `0..=n`.
    order_end: Vec<usize>,
}

impl RealLayout {
    fn new(slots: &[(usize, usize)], orders: usize) -> Self {
        let mut re = Vec::with_capacity(slots.len());
        let mut im = Vec::with_capacity(slots.len());
        let mut order_end = vec![0; orders];
        let mut next = 0;
        for &(n, k) in slots {
            re.push(next);
            next += 1;
            if k > 0 {
                im.push(Some(next));
                next += 1;
            } else {
                im.push(None);
            }
            order_end[n] = next;
        }
        RealLayout { re, im, dim: next, order_end }
    }

    fn to_real(&self, c: &[Complex64]) -> DVector<f64> {
        let mut v = DVector::zeros(self.dim);
        for (p, z) in c.iter().enumerate() {
            v[self.re[p]] = z.re;
            if let Some(i) = self.im[p] {
                v[i] = z.im;
            }
        }
        v
    }

    fn to_complex(&self, v: &DVector<f64>, out: &mut [Complex64]) {
        for (p, z) in out.iter_mut().enumerate() {
            let im = self.im[p].map_or(0.0, |i| v[i]);
            *z = Complex64::new(v[self.re[p]], im);
        }
    }

    /// Real symmetric matrix of `c -> G c + H conj(c)` plus `lambda I`.
    fn normal_matrix(&self, gram: &GramCache, lambda: f64) -> DMatrix<f64> {
        let n = gram.dim;
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for p in 0..n {
            for q in 0..n {
                let g = gram.gram(p, q);
                let h = gram.coupling(p, q);
                let (rp, rq) = (self.re[p], self.re[q]);
                m[(rp, rq)] = g.re + h.re;
                if let Some(iq) = self.im[q] {
                    m[(rp, iq)] = -g.im + h.im;
                }
                if let Some(ip) = self.im[p] {
                    m[(ip, rq)] = g.im + h.im;
                    if let Some(iq) = self.im[q] {
                        m[(ip, iq)] = g.re - h.re;
                    }
                }
            }
        }
        for d in 0..self.dim {
            m[(d, d)] += lambda;
        }
        m
    }
}

/// Factored ridge system for one mask, ready to fit and extrapolate.
pub struct Extrapolator {
    basis: Arc<Basis>,
    layout: RealLayout,
    normal: DMatrix<f64>,
    factor: Cholesky<f64, Dyn>,
    lambda: f64,
    mask: KnownMask,
}

impl std::fmt::Debug for Extrapolator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Extrapolator")
            .field("slots", &self.basis.len())
            .field("lambda", &self.lambda)
            .finish()
    }
}

impl Extrapolator {
    /// Factors `(G, H) + lambda I`; `lambda = None` uses the trace default.
    pub fn new(basis: Arc<Basis>, gram: &GramCache, mask: &KnownMask, lambda: Option<f64>) -> Result<Self> {
        if !gram.matches(&basis, mask) {
            return Err(Error::Config(
                "gram cache was computed for a different geometry, mask or basis".into(),
            ));
        }
        let lambda = lambda.unwrap_or_else(|| gram.default_lambda());
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::Config(format!("ridge lambda must be non-negative, got {lambda}")));
        }
        let layout = RealLayout::new(&basis.slots, basis.spec.orders);
        let normal = layout.normal_matrix(gram, lambda);
        let factor = Cholesky::new(normal.clone()).ok_or_else(|| {
            Error::Singular(format!(
                "normal equations are not positive definite with lambda = {lambda}; use lambda > 0"
            ))
        })?;
        Ok(Extrapolator {
            basis,
            layout,
            normal,
            factor,
            lambda,
            mask: mask.clone(),
        })
    }

    /// Computes the Gram blocks for `mask` and factors the system.
    pub fn build(basis: Arc<Basis>, mask: &KnownMask, lambda: Option<f64>) -> Result<Self> {
        let gram = compute_gram(&basis, mask)?;
        Self::new(basis, &gram, mask, lambda)
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn basis(&self) -> &Basis {
        &self.basis
    }

    pub fn mask(&self) -> &KnownMask {
        &self.mask
    }

    /// Ridge coefficients for the known part of `g`.
    pub fn fit(&self, g: &Sinogram) -> Result<BasisCoefficients> {
        Ok(self.fit_with_residual(g)?.0)
    }

    /// Coefficients plus the relative residual of the normal equations.
    pub fn fit_with_residual(&self, g: &Sinogram) -> Result<(BasisCoefficients, f64)> {
        let rhs = self.basis.analyze(g, &self.mask)?;
        let b = self.layout.to_real(rhs.values());
        let x = self.factor.solve(&b);
        let residual = (&self.normal * &x - &b).norm() / b.norm().max(1e-300);
        let mut c = self.basis.zero_coefficients();
        self.layout.to_complex(&x, &mut c.values);
        Ok((c, residual))
    }

    /// `g` on known bins, the fitted series on unknown bins.
    pub fn extrapolate(&self, g: &Sinogram) -> Result<Sinogram> {
        if self.mask.all_known() {
            self.basis.check(g)?;
            return Ok(g.clone());
        }
        let c = self.fit(g)?;
        let fill = self.basis.synthesize(&c)?;
        let mut out = g.clone();
        for ((o, f), &known) in out.values_mut().iter_mut().zip(fill.values()).zip(self.mask.values()) {
            if !known {
                *o = *f;
            }
        }
        Ok(out)
    }
}

/// Ridge fit of `g` on `mask` given precomputed Gram blocks.
pub fn fit(
    g: &Sinogram,
    mask: &KnownMask,
    lambda: f64,
    gram: &GramCache,
    geom: &FanGeometry,
    spec: &BasisSpec,
) -> Result<BasisCoefficients> {
    let basis = Arc::new(Basis::new(geom, spec)?);
    Extrapolator::new(basis, gram, mask, Some(lambda))?.fit(g)
}

/// Replaces the unknown bins of `g` with the fitted range-consistent series.
pub fn extrapolate(
    g: &Sinogram,
    mask: &KnownMask,
    lambda: f64,
    gram: &GramCache,
    geom: &FanGeometry,
    spec: &BasisSpec,
) -> Result<Sinogram> {
    let basis = Arc::new(Basis::new(geom, spec)?);
    Extrapolator::new(basis, gram, mask, Some(lambda))?.extrapolate(g)
}

/// Relative residual `r_n` of the least-squares projection of a full-scan
/// sinogram onto the basis functions of order `<= n`, for every `n`.
pub fn range_residual(g: &Sinogram, geom: &FanGeometry, spec: &BasisSpec) -> Result<Vec<f64>> {
    let basis = Basis::new(geom, spec)?;
    basis.check(g)?;
    let mask = KnownMask::full(g.rows(), g.cols());
    let gram = compute_gram(&basis, &mask)?;
    let layout = RealLayout::new(&basis.slots, spec.orders);
    // a vanishing ridge keeps the factorization defined; the leading blocks
    // of one Cholesky factor give every nested projection
    let lambda = 1e-13 * gram.trace() / gram.dim as f64;
    let normal = layout.normal_matrix(&gram, lambda);
    let chol = Cholesky::new(normal)
        .ok_or_else(|| Error::Singular("basis Gram matrix is not positive definite".into()))?;
    let l = chol.l();
    let b = layout.to_real(basis.analyze(g, &mask)?.values());
    let y = l.solve_lower_triangular(&b).ok_or_else(|| Error::Singular("triangular solve".into()))?;
    let g_norm = g.norm();
    if g_norm == 0.0 {
        return Ok(vec![0.0; spec.orders]);
    }
    let mut out = Vec::with_capacity(spec.orders);
    let mut c = basis.zero_coefficients();
    for n in 0..spec.orders {
        let m = layout.order_end[n];
        let lm = l.view((0, 0), (m, m));
        let ym = y.rows(0, m).into_owned();
        let xm = lm
            .transpose()
            .solve_upper_triangular(&ym)
            .ok_or_else(|| Error::Singular("triangular solve".into()))?;
        let mut x = DVector::zeros(layout.dim);
        x.rows_mut(0, m).copy_from(&xm);
        layout.to_complex(&x, &mut c.values);
        let fit = basis.synthesize(&c)?;
        let resid: f64 = g
            .values()
            .iter()
            .zip(fit.values())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        out.push(resid / g_norm);
    }
    Ok(out)
}

/// Extrapolators shared across calls, keyed by mask. Masks that are whole-row
/// rotations of a cached mask on an equispaced full-circle geometry reuse its
/// factorization: rotating the mask by `s` angle steps multiplies slot `p` by
/// the phase `e^{i k_p s step}`.
pub struct ExtrapolatorCache {
    basis: Arc<Basis>,
    lambda: Option<f64>,
    step: Option<f64>,
    gram_dir: Option<PathBuf>,
    entries: Mutex<HashMap<String, Arc<Extrapolator>>>,
}

impl ExtrapolatorCache {
    pub fn new(geom: &FanGeometry, spec: &BasisSpec, lambda: Option<f64>, gram_dir: Option<PathBuf>) -> Result<Self> {
        Ok(ExtrapolatorCache {
            basis: Arc::new(Basis::new(geom, spec)?),
            lambda,
            step: geom.uniform_step(),
            gram_dir,
            entries: Mutex::new(HashMap::new()),
        })
    }

    pub fn basis(&self) -> &Arc<Basis> {
        &self.basis
    }

    /// Canonical representative of the mask's rotation class and the shift
    /// taking the representative to `mask`.
    fn canonical(&self, mask: &KnownMask) -> (KnownMask, usize) {
        if self.step.is_none() {
            return (mask.clone(), 0);
        }
        let rows = mask.rows();
        let cols = mask.cols();
        let row_pattern: Vec<&[bool]> = (0..rows).map(|i| &mask.values()[i * cols..(i + 1) * cols]).collect();
        // lexicographically smallest rotation of the row sequence
        let mut best = 0;
        for s in 1..rows {
            let better = (0..rows)
                .map(|i| row_pattern[(i + s) % rows].cmp(row_pattern[(i + best) % rows]))
                .find(|o| o.is_ne())
                .is_some_and(|o| o.is_lt());
            if better {
                best = s;
            }
        }
        // canonical row i is mask row i + best, so mask = canonical rotated by best
        let canonical = mask.rotated((rows - best) % rows);
        (canonical, best)
    }

    fn entry(&self, mask: &KnownMask) -> Result<Arc<Extrapolator>> {
        let key = mask.content_hash();
        if let Some(e) = self.entries.lock().expect("extrapolator cache").get(&key) {
            return Ok(e.clone());
        }
        let gram = match &self.gram_dir {
            Some(dir) => GramCache::load_or_compute(dir, &self.basis, mask)?,
            None => compute_gram(&self.basis, mask)?,
        };
        let e = Arc::new(Extrapolator::new(self.basis.clone(), &gram, mask, self.lambda)?);
        self.entries.lock().expect("extrapolator cache").insert(key, e.clone());
        Ok(e)
    }

    /// Factors the system for `mask` (or its rotation class) ahead of time.
    pub fn prepare(&self, mask: &KnownMask) -> Result<()> {
        let (canonical, _) = self.canonical(mask);
        self.entry(&canonical).map(|_| ())
    }

    pub fn extrapolate(&self, g: &Sinogram, mask: &KnownMask) -> Result<Sinogram> {
        mask.check_shape(g)?;
        if mask.all_known() {
            return Ok(g.clone());
        }
        let (canonical, shift) = self.canonical(mask);
        let e = self.entry(&canonical)?;
        let c = if shift == 0 {
            e.fit(g)?
        } else {
            // fit in the canonical frame: rotate the data back, then rotate
            // the coefficients forward
            let step = self.step.expect("rotation needs a uniform geometry");
            let rows = g.rows();
            let mut rolled = Sinogram::zeros(rows, g.cols());
            for i in 0..rows {
                rolled.row_mut(i).copy_from_slice(g.row((i + shift) % rows));
            }
            let mut c = e.fit(&rolled)?;
            let angle = shift as f64 * step;
            for (v, &(_, k)) in c.values.iter_mut().zip(self.basis.slots.iter()) {
                *v *= Complex64::from_polar(1.0, -(k as f64) * angle);
            }
            c
        };
        let fill = self.basis.synthesize(&c)?;
        let mut out = g.clone();
        for ((o, f), &known) in out.values_mut().iter_mut().zip(fill.values()).zip(mask.values()) {
            if !known {
                *o = *f;
            }
        }
        Ok(out)
    }
}
