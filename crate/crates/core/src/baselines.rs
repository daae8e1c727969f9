//! Adaptive histogram equalization baseline.
//!
//! The 8-bit luma is equalized per tile and the tile mappings are blended
//! bilinearly between tile centres. Colour channels are rescaled by the luma
//! gain. A positive clip limit gives contrast-limited (CLAHE) behaviour.

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::attention::LUMA_WEIGHTS;
use crate::error::{Error, Result};

const BINS: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AheConfig {
    pub tiles_x: usize,
    pub tiles_y: usize,
    /// Bin ceiling as a multiple of the uniform bin height; 0 disables
    /// clipping.
    pub clip_limit: f64,
}

impl Default for AheConfig {
    fn default() -> Self {
        Self {
            tiles_x: 8,
            tiles_y: 8,
            clip_limit: 0.0,
        }
    }
}

impl AheConfig {
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.tiles_x == 0 || self.tiles_y == 0 {
            return Err(Error::InvalidArgument("tile counts must be >= 1".into()));
        }
        if !(self.clip_limit >= 0.0 && self.clip_limit.is_finite()) {
            return Err(Error::InvalidArgument(format!("clip limit {} must be >= 0", self.clip_limit)));
        }
        if self.tiles_x > width || self.tiles_y > height {
            return Err(Error::InvalidArgument(format!(
                "{}x{} tiles do not fit a {width}x{height} image",
                self.tiles_x, self.tiles_y
            )));
        }
        Ok(())
    }
}

/// Rounded Rec.601 luma of every pixel.
pub fn luma(img: &RgbImage) -> Vec<u8> {
    img.pixels()
        .map(|p| {
            let v: f32 = (0..3).map(|c| LUMA_WEIGHTS[c] * p[c] as f32).sum();
            v.round().clamp(0.0, 255.0) as u8
        })
        .collect()
}

fn tile_bounds(len: usize, tiles: usize) -> Vec<(usize, usize)> {
    (0..tiles).map(|i| (i * len / tiles, (i + 1) * len / tiles)).collect()
}

/// Equalization lookup table for one tile's histogram.
///
/// `m(v) = round(255·(cdf(v) − cdf_min) / (1 − cdf_min))` where `cdf_min` is
/// the cdf at the darkest value present. A single-valued tile maps to itself.
pub fn equalization_lut(hist: &[u64; BINS], clip_limit: f64) -> [u8; BINS] {
    let total: u64 = hist.iter().sum();
    let present: Vec<usize> = (0..BINS).filter(|&v| hist[v] > 0).collect();
    if present.len() <= 1 {
        return std::array::from_fn(|v| v as u8);
    }
    let mut h: Vec<f64> = hist.iter().map(|&c| c as f64).collect();
    if clip_limit > 0.0 {
        let ceiling = (clip_limit * total as f64 / BINS as f64).max(1.0);
        let excess: f64 = h.iter().map(|&c| (c - ceiling).max(0.0)).sum();
        for c in h.iter_mut() {
            *c = c.min(ceiling) + excess / BINS as f64;
        }
    }
    let n: f64 = h.iter().sum();
    let mut cdf = [0.0f64; BINS];
    let mut acc = 0.0;
    for v in 0..BINS {
        acc += h[v];
        cdf[v] = acc / n;
    }
    let cdf_min = cdf[present[0]];
    std::array::from_fn(|v| {
        let m = 255.0 * (cdf[v] - cdf_min) / (1.0 - cdf_min);
        m.round().clamp(0.0, 255.0) as u8
    })
}

/// Per-tile lookup tables of a luma plane, row-major over tiles.
#[derive(Clone, Debug)]
pub struct TileMappings {
    pub rows: Vec<(usize, usize)>,
    pub cols: Vec<(usize, usize)>,
    pub luts: Vec<[u8; BINS]>,
}

impl TileMappings {
    pub fn new(luma: &[u8], height: usize, width: usize, cfg: &AheConfig) -> Result<Self> {
        cfg.validate(height, width)?;
        if luma.len() != height * width {
            return Err(Error::Shape(format!("{} luma values for {height}x{width}", luma.len())));
        }
        let rows = tile_bounds(height, cfg.tiles_y);
        let cols = tile_bounds(width, cfg.tiles_x);
        let mut luts = Vec::with_capacity(rows.len() * cols.len());
        for &(y0, y1) in &rows {
            for &(x0, x1) in &cols {
                let mut hist = [0u64; BINS];
                for y in y0..y1 {
                    for &v in &luma[y * width + x0..y * width + x1] {
                        hist[v as usize] += 1;
                    }
                }
                luts.push(equalization_lut(&hist, cfg.clip_limit));
            }
        }
        Ok(Self { rows, cols, luts })
    }

    pub fn lut(&self, tile_y: usize, tile_x: usize) -> &[u8; BINS] {
        &self.luts[tile_y * self.cols.len() + tile_x]
    }
}

/// Neighbouring tile indices and the weight of the second one.
fn axis_weights(pos: usize, bounds: &[(usize, usize)]) -> (usize, usize, f64) {
    let centre = |i: usize| (bounds[i].0 + bounds[i].1) as f64 / 2.0 - 0.5;
    let p = pos as f64;
    let last = bounds.len() - 1;
    if p <= centre(0) {
        return (0, 0, 0.0);
    }
    if p >= centre(last) {
        return (last, last, 0.0);
    }
    let j = (0..last).find(|&j| p < centre(j + 1)).expect("inside the centre range");
    (j, j + 1, (p - centre(j)) / (centre(j + 1) - centre(j)))
}

/// Equalized luma, bilinearly blended between tile mappings.
pub fn equalize_luma(luma: &[u8], height: usize, width: usize, cfg: &AheConfig) -> Result<Vec<f64>> {
    let maps = TileMappings::new(luma, height, width, cfg)?;
    let col_w: Vec<_> = (0..width).map(|x| axis_weights(x, &maps.cols)).collect();
    let mut out = Vec::with_capacity(luma.len());
    for y in 0..height {
        let (r0, r1, ty) = axis_weights(y, &maps.rows);
        for (x, &(c0, c1, tx)) in col_w.iter().enumerate() {
            let v = luma[y * width + x] as usize;
            let m = |r: usize, c: usize| maps.lut(r, c)[v] as f64;
            let top = m(r0, c0) * (1.0 - tx) + m(r0, c1) * tx;
            let bottom = m(r1, c0) * (1.0 - tx) + m(r1, c1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    Ok(out)
}

/// Histogram-equalizes an 8-bit RGB image on its luma channel.
pub fn ahe(img: &RgbImage, cfg: &AheConfig) -> Result<RgbImage> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let y = luma(img);
    let eq = equalize_luma(&y, h, w, cfg)?;
    let mut out = RgbImage::new(img.width(), img.height());
    for ((dst, src), (&yq, &ye)) in out.pixels_mut().zip(img.pixels()).zip(y.iter().zip(&eq)) {
        let px: [u8; 3] = std::array::from_fn(|c| {
            let v = if yq > 0 {
                src[c] as f64 * ye / yq as f64
            } else {
                src[c] as f64 + ye
            };
            v.round().clamp(0.0, 255.0) as u8
        });
        *dst = Rgb(px);
    }
    Ok(out)
}
