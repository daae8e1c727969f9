//! NIQE: a no-reference quality score measuring how far the natural scene
//! statistics of an image are from those of a pristine corpus.
//!
//! Grayscale images are split into 96×96 patches at two scales. Each patch
//! yields 18 features per scale from asymmetric generalized Gaussian fits to
//! its MSCN coefficients and to their products with four neighbours. A
//! multivariate Gaussian fitted to pristine patches is compared with one
//! fitted to the test image.

use std::path::Path;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::attention::LUMA_WEIGHTS;
use crate::error::{Error, Result};
use crate::raster::{Image, Plane, ValueRange};

pub const PATCH_SIZE: usize = 96;
pub const SCALES: usize = 2;
pub const SHARPNESS_RATIO: f64 = 0.75;
pub const FEATURES_PER_SCALE: usize = 18;
pub const FEATURE_DIM: usize = FEATURES_PER_SCALE * SCALES;
pub const MIN_PRISTINE_IMAGES: usize = 10;
pub const COVARIANCE_RIDGE: f64 = 1e-6;

const WINDOW_RADIUS: usize = 3;
const WINDOW_SIGMA: f64 = 7.0 / 6.0;
const ALPHA_MIN: f64 = 0.2;
const ALPHA_MAX: f64 = 10.0;
const ALPHA_STEP: f64 = 0.001;
const NEIGHBOUR_SHIFTS: [(isize, isize); 4] = [(0, 1), (1, 0), (1, 1), (-1, 1)];

const BINARY_MAGIC: &[u8; 4] = b"NIQE";
const BINARY_VERSION: u32 = 1;

/// Row-major f64 grid used for the statistics.
#[derive(Clone, Debug)]
struct Grid {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Grid {
    fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    fn from_plane(p: &Plane) -> Self {
        Self {
            height: p.height(),
            width: p.width(),
            data: p.values().iter().map(|&v| v as f64).collect(),
        }
    }

    fn to_plane(&self) -> Result<Plane> {
        Plane::new(self.height, self.width, self.data.iter().map(|&v| v as f32).collect())
    }

    fn crop(&self, height: usize, width: usize) -> Self {
        let data = (0..height)
            .flat_map(|y| self.data[y * self.width..y * self.width + width].iter().copied())
            .collect();
        Self { height, width, data }
    }

    fn half(&self) -> Self {
        let (h, w) = (self.height / 2, self.width / 2);
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let s = self.at(2 * y, 2 * x)
                    + self.at(2 * y, 2 * x + 1)
                    + self.at(2 * y + 1, 2 * x)
                    + self.at(2 * y + 1, 2 * x + 1);
                data.push(s / 4.0);
            }
        }
        Self { height: h, width: w, data }
    }

    fn block(&self, y0: usize, x0: usize, size: usize) -> Vec<f64> {
        (y0..y0 + size)
            .flat_map(|y| self.data[y * self.width + x0..y * self.width + x0 + size].iter().copied())
            .collect()
    }
}

/// 8-bit Rec.601 luma in [0, 255], rounded like an 8-bit conversion.
pub fn gray(img: &Image) -> Plane {
    let unit = img.to_unit();
    let data = unit
        .pixels()
        .chunks_exact(3)
        .map(|p| {
            let v = LUMA_WEIGHTS[0] * p[0] + LUMA_WEIGHTS[1] * p[1] + LUMA_WEIGHTS[2] * p[2];
            (v * 255.0).round().clamp(0.0, 255.0)
        })
        .collect();
    Plane::new(unit.height(), unit.width(), data).expect("dims come from an image")
}

fn gaussian_window() -> [f64; 2 * WINDOW_RADIUS + 1] {
    let mut w: [f64; 2 * WINDOW_RADIUS + 1] = std::array::from_fn(|i| {
        let d = i as f64 - WINDOW_RADIUS as f64;
        (-d * d / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp()
    });
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable filtering with replicated borders.
fn smooth(g: &Grid) -> Grid {
    let k = gaussian_window();
    let r = WINDOW_RADIUS as isize;
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; g.data.len()];
    for y in 0..g.height {
        for x in 0..g.width {
            tmp[y * g.width + x] = (-r..=r)
                .map(|d| k[(d + r) as usize] * g.at(y, clamp(x as isize + d, g.width)))
                .sum();
        }
    }
    let mut out = vec![0.0; g.data.len()];
    for y in 0..g.height {
        for x in 0..g.width {
            out[y * g.width + x] = (-r..=r)
                .map(|d| k[(d + r) as usize] * tmp[clamp(y as isize + d, g.height) * g.width + x])
                .sum();
        }
    }
    Grid {
        height: g.height,
        width: g.width,
        data: out,
    }
}

/// MSCN coefficients and the local standard deviation map.
fn mscn_parts(g: &Grid) -> (Grid, Grid) {
    let mu = smooth(g);
    let sq = Grid {
        data: g.data.iter().map(|v| v * v).collect(),
        ..g.clone()
    };
    let mu_sq = smooth(&sq);
    let sigma: Vec<f64> = mu_sq
        .data
        .iter()
        .zip(&mu.data)
        .map(|(e2, m)| (e2 - m * m).abs().sqrt())
        .collect();
    let coeffs = g
        .data
        .iter()
        .zip(&mu.data)
        .zip(&sigma)
        .map(|((v, m), s)| (v - m) / (s + 1.0))
        .collect();
    (
        Grid { data: coeffs, ..g.clone() },
        Grid { data: sigma, ..g.clone() },
    )
}

/// Mean subtracted contrast normalized coefficients `(I − μ) / (σ + 1)` of a
/// grayscale plane in [0, 255], with μ and σ from a 7×7 Gaussian window.
pub fn mscn(gray: &Plane) -> Result<Plane> {
    if gray.height() == 0 || gray.width() == 0 {
        return Err(Error::Degenerate("empty image"));
    }
    mscn_parts(&Grid::from_plane(gray)).0.to_plane()
}

/// Asymmetric generalized Gaussian parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aggd {
    pub alpha: f64,
    pub mean: f64,
    pub left_var: f64,
    pub right_var: f64,
}

impl Aggd {
    fn scale_factor(&self) -> f64 {
        (0.5 * (ln_gamma(1.0 / self.alpha) - ln_gamma(3.0 / self.alpha))).exp()
    }

    /// Left scale parameter β_l = σ_l·sqrt(Γ(1/α)/Γ(3/α)).
    pub fn left_scale(&self) -> f64 {
        self.left_var.sqrt() * self.scale_factor()
    }

    pub fn right_scale(&self) -> f64 {
        self.right_var.sqrt() * self.scale_factor()
    }
}

/// Γ(2/α)² / (Γ(1/α)·Γ(3/α)), the moment ratio E|x|²/E[x²] of a symmetric
/// generalized Gaussian with shape α.
pub fn moment_ratio(alpha: f64) -> f64 {
    (2.0 * ln_gamma(2.0 / alpha) - ln_gamma(1.0 / alpha) - ln_gamma(3.0 / alpha)).exp()
}

fn alpha_table() -> &'static [(f64, f64)] {
    static TABLE: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let n = ((ALPHA_MAX - ALPHA_MIN) / ALPHA_STEP).round() as usize;
        (0..=n)
            .map(|i| {
                let a = ALPHA_MIN + i as f64 * ALPHA_STEP;
                (a, moment_ratio(a))
            })
            .collect()
    })
}

/// Moment-matching fit with the shape chosen from a grid over [0.2, 10] in
/// steps of 0.001.
pub fn fit_aggd(samples: &[f64]) -> Result<Aggd> {
    if samples.len() < 2 {
        return Err(Error::Degenerate("fewer than two samples"));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("non-finite samples"));
    }
    if samples.iter().all(|&v| v == samples[0]) {
        return Err(Error::Degenerate("all samples identical"));
    }
    let (mut left, mut nl, mut right, mut nr, mut abs, mut sq) = (0.0, 0usize, 0.0, 0usize, 0.0, 0.0);
    for &v in samples {
        if v < 0.0 {
            left += v * v;
            nl += 1;
        } else if v > 0.0 {
            right += v * v;
            nr += 1;
        }
        abs += v.abs();
        sq += v * v;
    }
    let n = samples.len() as f64;
    let left_var = if nl > 0 { left / nl as f64 } else { 0.0 };
    let right_var = if nr > 0 { right / nr as f64 } else { 0.0 };
    let (ls, rs) = (left_var.sqrt(), right_var.sqrt());
    let rhat = (abs / n).powi(2) / (sq / n);
    let rhat_norm = if rs > 0.0 {
        let g = ls / rs;
        rhat * (g.powi(3) + 1.0) * (g + 1.0) / (g * g + 1.0).powi(2)
    } else {
        rhat
    };
    let alpha = alpha_table()
        .iter()
        .min_by(|a, b| (a.1 - rhat_norm).powi(2).total_cmp(&(b.1 - rhat_norm).powi(2)))
        .map(|&(a, _)| a)
        .expect("table is non-empty");
    let mut fit = Aggd {
        alpha,
        mean: 0.0,
        left_var,
        right_var,
    };
    fit.mean = (fit.right_scale() - fit.left_scale()) * (ln_gamma(2.0 / alpha) - ln_gamma(1.0 / alpha)).exp();
    Ok(fit)
}

fn block_features(block: &[f64], size: usize, out: &mut Vec<f64>) -> Result<()> {
    let f = fit_aggd(block)?;
    out.push(f.alpha);
    out.push((f.left_scale() + f.right_scale()) / 2.0);
    let mut pairs = vec![0.0; block.len()];
    for (dy, dx) in NEIGHBOUR_SHIFTS {
        for y in 0..size {
            for x in 0..size {
                let sy = (y as isize - dy).rem_euclid(size as isize) as usize;
                let sx = (x as isize - dx).rem_euclid(size as isize) as usize;
                pairs[y * size + x] = block[y * size + x] * block[sy * size + sx];
            }
        }
        let f = fit_aggd(&pairs)?;
        out.extend([f.alpha, f.mean, f.left_scale(), f.right_scale()]);
    }
    Ok(())
}

/// Which patches contribute features.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PatchSelection {
    All,
    /// Patches whose mean local deviation exceeds `ratio` times the largest
    /// one; flat patches are never kept.
    Sharpest { ratio: f64 },
}

impl Default for PatchSelection {
    fn default() -> Self {
        Self::Sharpest {
            ratio: SHARPNESS_RATIO,
        }
    }
}

/// Features of one image: one 36-value row per usable patch.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchFeatures {
    pub rows: Vec<[f64; FEATURE_DIM]>,
    /// Patches tiled from the image before selection.
    pub candidates: usize,
}

/// Tiles the image (cropped to whole patches) and computes features at full
/// and half resolution. Patches whose statistics are degenerate (a flat
/// block) are dropped.
pub fn patch_features(img: &Image, selection: PatchSelection) -> Result<PatchFeatures> {
    let (h, w) = (img.height(), img.width());
    if h < PATCH_SIZE || w < PATCH_SIZE {
        return Err(Error::Undersized {
            height: h,
            width: w,
            min: PATCH_SIZE,
        });
    }
    let (ph, pw) = (h / PATCH_SIZE, w / PATCH_SIZE);
    let mut scale = Grid::from_plane(&gray(img)).crop(ph * PATCH_SIZE, pw * PATCH_SIZE);

    let mut per_patch: Vec<Option<Vec<f64>>> = vec![Some(Vec::with_capacity(FEATURE_DIM)); ph * pw];
    let mut sharpness = vec![0.0; ph * pw];
    for s in 0..SCALES {
        let size = PATCH_SIZE >> s;
        let (coeffs, sigma) = mscn_parts(&scale);
        for by in 0..ph {
            for bx in 0..pw {
                let i = by * pw + bx;
                if s == 0 {
                    let sig = sigma.block(by * size, bx * size, size);
                    sharpness[i] = sig.iter().sum::<f64>() / sig.len() as f64;
                }
                if let Some(feats) = per_patch[i].as_mut() {
                    let block = coeffs.block(by * size, bx * size, size);
                    if block_features(&block, size, feats).is_err() {
                        per_patch[i] = None;
                    }
                }
            }
        }
        if s + 1 < SCALES {
            scale = scale.half();
        }
    }

    let max_sharpness = sharpness.iter().copied().fold(0.0, f64::max);
    let rows = per_patch
        .into_iter()
        .zip(&sharpness)
        .filter(|(_, &s)| match selection {
            PatchSelection::All => true,
            PatchSelection::Sharpest { ratio } => s > 0.0 && s > ratio * max_sharpness,
        })
        .filter_map(|(f, _)| f)
        .filter(|f| f.iter().all(|v| v.is_finite()))
        .map(|f| f.try_into().expect("two scales of features"))
        .collect::<Vec<[f64; FEATURE_DIM]>>();
    if rows.is_empty() {
        return Err(Error::NoSharpPatches);
    }
    Ok(PatchFeatures {
        rows,
        candidates: ph * pw,
    })
}

/// Sample mean and unbiased covariance (zero for a single row).
fn gaussian_fit(rows: &[[f64; FEATURE_DIM]]) -> (DVector<f64>, DMatrix<f64>) {
    let n = rows.len();
    let mut mu = DVector::zeros(FEATURE_DIM);
    for r in rows {
        mu += DVector::from_column_slice(r);
    }
    mu /= n as f64;
    let mut cov = DMatrix::zeros(FEATURE_DIM, FEATURE_DIM);
    if n > 1 {
        for r in rows {
            let d = DVector::from_column_slice(r) - &mu;
            cov += &d * d.transpose();
        }
        cov /= (n - 1) as f64;
    }
    (mu, cov)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub patch_size: usize,
    pub scales: usize,
    pub sharpness_ratio: f64,
    pub images: usize,
    pub patches: usize,
}

impl Default for ModelMetadata {
    fn default() -> Self {
        Self {
            patch_size: PATCH_SIZE,
            scales: SCALES,
            sharpness_ratio: SHARPNESS_RATIO,
            images: 0,
            patches: 0,
        }
    }
}

/// Multivariate Gaussian over pristine patch features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NiqeModel {
    pub mu: Vec<f64>,
    /// Row-major 36×36.
    pub sigma: Vec<f64>,
    #[serde(default)]
    pub metadata: ModelMetadata,
}

impl NiqeModel {
    pub fn validate(&self) -> Result<()> {
        if self.mu.len() != FEATURE_DIM || self.sigma.len() != FEATURE_DIM * FEATURE_DIM {
            return Err(Error::ModelFile(format!(
                "expected {FEATURE_DIM} means and {} covariance entries, found {} and {}",
                FEATURE_DIM * FEATURE_DIM,
                self.mu.len(),
                self.sigma.len()
            )));
        }
        if self.mu.iter().chain(&self.sigma).any(|v| !v.is_finite()) {
            return Err(Error::ModelFile("non-finite parameters".into()));
        }
        let s = self.sigma_matrix();
        let scale = s.abs().max().max(1.0);
        if (&s - s.transpose()).abs().max() > 1e-9 * scale {
            return Err(Error::ModelFile("covariance is not symmetric".into()));
        }
        if self.metadata.patch_size != PATCH_SIZE || self.metadata.scales != SCALES {
            return Err(Error::ModelFile(format!(
                "model built for {}px patches at {} scales; this evaluator uses {PATCH_SIZE}px at {SCALES}",
                self.metadata.patch_size, self.metadata.scales
            )));
        }
        Ok(())
    }

    fn sigma_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(FEATURE_DIM, FEATURE_DIM, &self.sigma)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    /// Binary layout, little-endian: magic `NIQE`, u32 version, u32
    /// dimension, u32 patch size, u32 scales, f64 sharpness ratio, u64
    /// images, u64 patches, then `mu` and row-major `sigma` as f64.
    pub fn to_binary(&self) -> Vec<u8> {
        let m = &self.metadata;
        let mut out = Vec::with_capacity(48 + 8 * (self.mu.len() + self.sigma.len()));
        out.extend_from_slice(BINARY_MAGIC);
        for v in [BINARY_VERSION, self.mu.len() as u32, m.patch_size as u32, m.scales as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&m.sharpness_ratio.to_le_bytes());
        out.extend_from_slice(&(m.images as u64).to_le_bytes());
        out.extend_from_slice(&(m.patches as u64).to_le_bytes());
        for v in self.mu.iter().chain(&self.sigma) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_binary(bytes: &[u8]) -> Result<Self> {
        let mut r = LeReader(bytes);
        if r.take(4)? != BINARY_MAGIC {
            return Err(Error::ModelFile("missing NIQE magic".into()));
        }
        let version = r.u32()?;
        if version != BINARY_VERSION {
            return Err(Error::ModelFile(format!("unsupported binary version {version}")));
        }
        let dim = r.u32()? as usize;
        let patch_size = r.u32()? as usize;
        let scales = r.u32()? as usize;
        let sharpness_ratio = r.f64()?;
        let images = r.u64()? as usize;
        let patches = r.u64()? as usize;
        if dim != FEATURE_DIM {
            return Err(Error::ModelFile(format!("dimension {dim}, expected {FEATURE_DIM}")));
        }
        let mu = (0..dim).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let sigma = (0..dim * dim).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let model = Self {
            mu,
            sigma,
            metadata: ModelMetadata {
                patch_size,
                scales,
                sharpness_ratio,
                images,
                patches,
            },
        };
        model.validate()?;
        Ok(model)
    }

    /// Writes JSON, or the binary layout when the extension is `.bin`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = match path.extension().and_then(|e| e.to_str()) {
            Some("bin") => self.to_binary(),
            _ => self.to_json().into_bytes(),
        };
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Reads either format, recognized by the magic bytes.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.starts_with(BINARY_MAGIC) {
            return Self::from_binary(&bytes);
        }
        let model: Self = serde_json::from_slice(&bytes)
            .map_err(|e| Error::ModelFile(format!("{}: {e}", path.display())))?;
        model.validate()?;
        Ok(model)
    }
}

struct LeReader<'a>(&'a [u8]);

impl LeReader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.0.len() < n {
            return Err(Error::ModelFile("truncated binary model".into()));
        }
        let (head, tail) = self.0.split_at(n);
        self.0 = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Fits the pristine model from the sharpest patches of every image.
pub fn fit_pristine_model(images: &[Image]) -> Result<NiqeModel> {
    if images.len() < MIN_PRISTINE_IMAGES {
        return Err(Error::Insufficient(format!(
            "{} pristine images given, at least {MIN_PRISTINE_IMAGES} required",
            images.len()
        )));
    }
    let mut rows = Vec::new();
    let mut used = 0;
    for img in images {
        match patch_features(img, PatchSelection::default()) {
            Ok(f) => {
                rows.extend(f.rows);
                used += 1;
            }
            Err(Error::NoSharpPatches) => continue,
            Err(e) => return Err(e),
        }
    }
    if rows.len() < 2 {
        return Err(Error::Insufficient(format!("only {} usable pristine patches", rows.len())));
    }
    let (mu, mut cov) = gaussian_fit(&rows);
    cov += DMatrix::identity(FEATURE_DIM, FEATURE_DIM) * COVARIANCE_RIDGE;
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok(NiqeModel {
        mu: mu.iter().copied().collect(),
        sigma: cov.transpose().iter().copied().collect(),
        metadata: ModelMetadata {
            images: used,
            patches: rows.len(),
            ..ModelMetadata::default()
        },
    })
}

/// Loads every path and fits the pristine model.
pub fn fit_pristine_model_from_paths(paths: &[std::path::PathBuf]) -> Result<NiqeModel> {
    let images = paths
        .iter()
        .map(|p| crate::data::load_rgb(p).map(|img| Image::from_rgb8(&img)))
        .collect::<Result<Vec<_>>>()?;
    fit_pristine_model(&images)
}

/// Mahalanobis-style distance between the pristine Gaussian and the one
/// fitted to `rows`, under the pooled covariance.
pub fn feature_distance(rows: &[[f64; FEATURE_DIM]], model: &NiqeModel) -> Result<f64> {
    model.validate()?;
    if rows.is_empty() {
        return Err(Error::NoSharpPatches);
    }
    let (mu2, cov2) = gaussian_fit(rows);
    let pooled = (model.sigma_matrix() + cov2) * 0.5;
    let d = DVector::from_column_slice(&model.mu) - mu2;
    let chol = pooled.cholesky().ok_or(Error::SingularCovariance)?;
    let q = d.dot(&chol.solve(&d));
    if !q.is_finite() {
        return Err(Error::SingularCovariance);
    }
    Ok(q.max(0.0).sqrt())
}

/// NIQE score of an image (lower is more natural). Every patch of the test
/// image contributes.
pub fn niqe_score(img: &Image, model: &NiqeModel) -> Result<f64> {
    let feats = patch_features(img, PatchSelection::All)?;
    feature_distance(&feats.rows, model)
}

/// Convenience for images already in the signed range.
pub fn niqe_score_any(img: &Image, model: &NiqeModel) -> Result<f64> {
    match img.range() {
        ValueRange::Unit => niqe_score(img, model),
        ValueRange::Signed => niqe_score(&img.to_unit(), model),
    }
}
