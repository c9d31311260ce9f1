//! Scoring: clip negatives, Otsu threshold, Matthews correlation against the
//! ground-truth segmentation, averaged per wedge span.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::data::{Image, KnownMask, Sinogram};
use crate::error::{Error, Result};
use crate::model::{FnoBpModel, Pipeline};
use crate::phantoms::{load_sample, DatasetManifest, Segmentation};

pub const OTSU_BINS: usize = 256;
pub const DEFAULT_SPANS: [f64; 7] = [90.0, 80.0, 70.0, 60.0, 50.0, 40.0, 30.0];

/// Histogram of `values` over `[0, max]`; the maximum lands in the last bin.
fn histogram(values: &[f64], bins: usize, max: f64) -> Vec<u64> {
    let mut h = vec![0u64; bins];
    for &v in values {
        let b = ((v / max) * bins as f64).floor();
        h[(b.max(0.0) as usize).min(bins - 1)] += 1;
    }
    h
}

fn between_class_variance(h: &[u64], k: usize, width: f64) -> f64 {
    let center = |b: usize| (b as f64 + 0.5) * width;
    let (mut n0, mut s0, mut n1, mut s1) = (0.0, 0.0, 0.0, 0.0);
    for (b, &c) in h.iter().enumerate() {
        let c = c as f64;
        if b < k {
            n0 += c;
            s0 += c * center(b);
        } else {
            n1 += c;
            s1 += c * center(b);
        }
    }
    if n0 == 0.0 || n1 == 0.0 {
        return 0.0;
    }
    let total = n0 + n1;
    let d = s0 / n0 - s1 / n1;
    (n0 / total) * (n1 / total) * d * d
}

/// Otsu threshold on a `bins`-bin histogram of `[0, max(values)]`: the bin
/// boundary maximizing the between-class variance (first one on ties).
pub fn otsu_threshold(values: &[f64], bins: usize) -> Result<f64> {
    if bins < 2 {
        return Err(Error::Domain("Otsu needs at least 2 bins".into()));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::Domain(format!("Otsu expects clipped finite values, found {v}")));
    }
    let max = values.iter().cloned().fold(0.0, f64::max);
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    if values.is_empty() || !(max > min) {
        return Err(Error::Domain("Otsu threshold of a constant image is undefined".into()));
    }
    let h = histogram(values, bins, max);
    let width = max / bins as f64;
    // prefix sums of counts and first moments
    let total_n: f64 = h.iter().map(|&c| c as f64).sum();
    let total_s: f64 = h.iter().enumerate().map(|(b, &c)| c as f64 * (b as f64 + 0.5) * width).sum();
    let (mut n0, mut s0) = (0.0, 0.0);
    let (mut best, mut best_k) = (-1.0, 1);
    for k in 1..bins {
        let c = h[k - 1] as f64;
        n0 += c;
        s0 += c * (k as f64 - 0.5) * width;
        let n1 = total_n - n0;
        if n0 == 0.0 || n1 == 0.0 {
            continue;
        }
        let d = s0 / n0 - (total_s - s0) / n1;
        let var = (n0 / total_n) * (n1 / total_n) * d * d;
        if var > best {
            best = var;
            best_k = k;
        }
    }
    Ok(max * best_k as f64 / bins as f64)
}

/// Exhaustive search over every boundary with direct class sums; the
/// reference for [`otsu_threshold`].
pub fn otsu_threshold_exhaustive(values: &[f64], bins: usize) -> Result<f64> {
    let max = values.iter().cloned().fold(0.0, f64::max);
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    if values.is_empty() || !(max > min) {
        return Err(Error::Domain("Otsu threshold of a constant image is undefined".into()));
    }
    let h = histogram(values, bins, max);
    let width = max / bins as f64;
    let mut scores: Vec<(usize, f64)> = (1..bins).map(|k| (k, between_class_variance(&h, k, width))).collect();
    scores.retain(|&(k, _)| h[..k].iter().any(|&c| c > 0) && h[k..].iter().any(|&c| c > 0));
    let best = scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
    let k = scores.iter().find(|s| s.1 == best).map_or(1, |s| s.0);
    Ok(max * k as f64 / bins as f64)
}

/// Foreground mask `img > otsu threshold`.
pub fn otsu(img: &Image, bins: usize) -> Result<Vec<bool>> {
    let t = otsu_threshold(img.values(), bins)?;
    Ok(img.values().iter().map(|&v| v > t).collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn count(pred: &[bool], truth: &[bool]) -> Result<Self> {
        if pred.len() != truth.len() {
            return Err(Error::Shape(format!("masks have {} and {} entries", pred.len(), truth.len())));
        }
        let mut c = Confusion::default();
        for (&p, &t) in pred.iter().zip(truth) {
            match (p, t) {
                (true, true) => c.tp += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    /// Matthews correlation; 0 when any marginal is empty.
    pub fn mcc(&self) -> f64 {
        let (tp, tn, fp, fn_) = (self.tp as f64, self.tn as f64, self.fp as f64, self.fn_ as f64);
        let den = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
        if den == 0.0 {
            return 0.0;
        }
        (tp * tn - fp * fn_) / den.sqrt()
    }
}

pub fn mcc(pred: &[bool], truth: &[bool]) -> Result<f64> {
    Ok(Confusion::count(pred, truth)?.mcc())
}

/// Clip, threshold and score one reconstruction. An image that is constant
/// after clipping has no foreground and scores as an all-background mask.
pub fn score(img: &Image, truth: &Segmentation) -> Result<f64> {
    if truth.values.len() != img.values().len() {
        return Err(Error::Shape("segmentation and image sizes differ".into()));
    }
    let clipped = img.map(|v| v.max(0.0));
    let pred = match otsu(&clipped, OTSU_BINS) {
        Ok(m) => m,
        Err(Error::Domain(_)) => vec![false; truth.values.len()],
        Err(e) => return Err(e),
    };
    mcc(&pred, &truth.values)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    Fbp,
    FbpRange,
    FnoBp,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Fbp, Method::FbpRange, Method::FnoBp];

    pub fn label(self) -> &'static str {
        match self {
            Method::Fbp => "fbp",
            Method::FbpRange => "fbp-range",
            Method::FnoBp => "fnobp",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fbp" => Ok(Method::Fbp),
            "fbp-range" | "fbp+range" => Ok(Method::FbpRange),
            "fnobp" => Ok(Method::FnoBp),
            other => Err(Error::Config(format!("unknown method {other:?}; valid methods: fbp, fbp-range, fnobp"))),
        }
    }
}

/// One test phantom: its segmentation and the measurement for any span.
#[derive(Clone, Debug)]
pub struct TestCase {
    pub image: Image,
    pub segmentation: Segmentation,
    pub sinogram: Sinogram,
    pub mask: KnownMask,
    pub full: Option<Sinogram>,
    pub wedge_start: usize,
}

#[derive(Clone, Debug)]
pub struct TestSet {
    pub manifest: DatasetManifest,
    pub cases: Vec<TestCase>,
}

impl TestSet {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(dir)?;
        let cases = manifest
            .samples
            .iter()
            .map(|e| {
                let s = load_sample(dir, e.index)?;
                Ok(TestCase {
                    image: s.image,
                    segmentation: s.segmentation,
                    sinogram: s.sinogram,
                    mask: s.mask,
                    full: s.full_sinogram,
                    wedge_start: e.wedge_start,
                })
            })
            .collect::<Result<_>>()?;
        Ok(TestSet { manifest, cases })
    }

    /// Measurement of case `i` restricted to a wedge of `span_deg` starting
    /// at the case's own wedge start.
    pub fn measurement(&self, i: usize, span_deg: f64) -> Result<(Sinogram, KnownMask)> {
        let c = &self.cases[i];
        if (span_deg - self.manifest.span_deg).abs() < 1e-9 {
            return Ok((c.sinogram.clone(), c.mask.clone()));
        }
        let full = c.full.as_ref().ok_or_else(|| {
            Error::Config(format!(
                "test set was generated for {} degrees without full sinograms; cannot score {span_deg} degrees",
                self.manifest.span_deg
            ))
        })?;
        let mask = KnownMask::wedge(&self.manifest.geometry, c.wedge_start, span_deg)?;
        Ok((full.masked(&mask), mask))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreRow {
    pub method: Method,
    pub span_deg: f64,
    pub per_sample: Vec<f64>,
    pub mean: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreReport {
    pub rows: Vec<ScoreRow>,
}

impl ScoreReport {
    pub fn mean(&self, method: Method, span_deg: f64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.method == method && (r.span_deg - span_deg).abs() < 1e-9)
            .map(|r| r.mean)
    }

    /// `method,span_deg,mean_mcc,samples` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,span_deg,mean_mcc,samples\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{:.6},{}", r.method, r.span_deg, r.mean, r.per_sample.len());
        }
        out
    }

    /// Methods as rows, spans as columns.
    pub fn to_table(&self) -> String {
        let mut spans: Vec<f64> = Vec::new();
        let mut methods: Vec<Method> = Vec::new();
        for r in &self.rows {
            if !spans.iter().any(|s| (s - r.span_deg).abs() < 1e-9) {
                spans.push(r.span_deg);
            }
            if !methods.contains(&r.method) {
                methods.push(r.method);
            }
        }
        let mut out = format!("{:<10}", "method");
        for s in &spans {
            let _ = write!(out, " {:>7}", format!("{s}°"));
        }
        out.push('\n');
        for m in methods {
            let _ = write!(out, "{:<10}", m.label());
            for &s in &spans {
                match self.mean(m, s) {
                    Some(v) => {
                        let _ = write!(out, " {v:>7.3}");
                    }
                    None => {
                        let _ = write!(out, " {:>7}", "-");
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Reconstruction for one method; `model` is required for FNO-BP.
pub fn reconstruct_with(
    method: Method,
    pipeline: &Pipeline,
    model: Option<&FnoBpModel>,
    g: &Sinogram,
    mask: &KnownMask,
) -> Result<Image> {
    match method {
        Method::Fbp => pipeline.fbp(g),
        Method::FbpRange => pipeline.fbp_range(g, mask),
        Method::FnoBp => model
            .ok_or_else(|| Error::Config("fnobp needs a trained checkpoint".into()))?
            .reconstruct(g, mask),
    }
}

/// Scores every method at every span. `model_for` supplies the FNO-BP model
/// of a span (per-span checkpoints or one shared model).
pub fn evaluate(
    methods: &[Method],
    set: &TestSet,
    spans: &[f64],
    pipeline: &Pipeline,
    model_for: &dyn Fn(f64) -> Option<FnoBpModel>,
) -> Result<ScoreReport> {
    let mut report = ScoreReport::default();
    for &method in methods {
        for &span in spans {
            let model = if method == Method::FnoBp {
                Some(model_for(span).ok_or_else(|| {
                    Error::Config(format!("no fnobp checkpoint available for {span} degrees"))
                })?)
            } else {
                None
            };
            let per_sample: Vec<f64> = (0..set.cases.len())
                .into_par_iter()
                .map(|i| {
                    let (g, mask) = set.measurement(i, span)?;
                    let img = reconstruct_with(method, pipeline, model.as_ref(), &g, &mask)?;
                    score(&img, &set.cases[i].segmentation)
                })
                .collect::<Result<_>>()?;
            let mean = per_sample.iter().sum::<f64>() / per_sample.len().max(1) as f64;
            report.rows.push(ScoreRow { method, span_deg: span, per_sample, mean });
        }
    }
    Ok(report)
}
