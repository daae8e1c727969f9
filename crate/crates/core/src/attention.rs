//! Self-regularized illumination attention.
//!
//! The attention map is `1 - L` where `L` is the Rec.601 luma of the unit-range
//! input, so dark regions get weights close to one. The map is resized to
//! every feature resolution it gates with corner-aligned bilinear sampling.

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::raster::{Image, Plane, ValueRange};

pub const LUMA_WEIGHTS: [f32; 3] = [0.299, 0.587, 0.114];

/// An `H x W` map with every value in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap(Plane);

impl AttentionMap {
    pub fn new(plane: Plane) -> Result<Self> {
        if let Some(&v) = plane.values().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Range {
                value: v,
                range: ValueRange::Unit,
            });
        }
        Ok(Self(plane))
    }

    pub fn plane(&self) -> &Plane {
        &self.0
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn values(&self) -> &[f32] {
        self.0.values()
    }

    /// `1 x 1 x H x W` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(self.values(), (1, 1, self.height(), self.width()), device)?
            .to_dtype(dtype)?)
    }

    pub fn flip_horizontal(&self) -> AttentionMap {
        let (h, w) = (self.height(), self.width());
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            data.extend((0..w).rev().map(|x| self.0.get(y, x)));
        }
        AttentionMap(Plane::new(h, w, data).expect("same dimensions"))
    }

    pub fn crop(&self, y: usize, x: usize, height: usize, width: usize) -> Result<AttentionMap> {
        if height == 0 || width == 0 || y + height > self.height() || x + width > self.width() {
            return Err(Error::InvalidArgument(format!(
                "crop {height}x{width} at ({y}, {x}) exceeds {}x{}",
                self.height(),
                self.width()
            )));
        }
        let mut data = Vec::with_capacity(height * width);
        for row in y..y + height {
            data.extend((x..x + width).map(|col| self.0.get(row, col)));
        }
        Ok(AttentionMap(Plane::new(height, width, data)?))
    }
}

/// Per-pixel Rec.601 luma of a unit-range image.
pub fn luminance(img: &Image) -> Result<Plane> {
    if img.range() != ValueRange::Unit {
        return Err(Error::InvalidArgument("luminance expects a unit-range image".into()));
    }
    let data = img
        .pixels()
        .chunks_exact(3)
        .map(|px| {
            let l = LUMA_WEIGHTS[0] * px[0] + LUMA_WEIGHTS[1] * px[1] + LUMA_WEIGHTS[2] * px[2];
            l.clamp(0.0, 1.0)
        })
        .collect();
    Plane::new(img.height(), img.width(), data)
}

pub fn attention_map(img: &Image) -> Result<AttentionMap> {
    let lum = luminance(img)?;
    let (h, w) = (lum.height(), lum.width());
    let data = lum.into_values().into_iter().map(|l| 1.0 - l).collect();
    AttentionMap::new(Plane::new(h, w, data)?)
}

/// Source taps for corner-aligned linear resampling of a 1-D axis: output
/// index `i` reads `(1 - t) * src[lo] + t * src[hi]`.
pub(crate) fn linear_taps(src_len: usize, dst_len: usize) -> Vec<(usize, usize, f32)> {
    (0..dst_len)
        .map(|i| {
            if src_len == 1 || dst_len == 1 {
                return (0, 0, 0.0);
            }
            let pos = i as f64 * (src_len - 1) as f64 / (dst_len - 1) as f64;
            let lo = (pos.floor() as usize).min(src_len - 1);
            let hi = (lo + 1).min(src_len - 1);
            (lo, hi, (pos - lo as f64) as f32)
        })
        .collect()
}

pub fn resize_attention(map: &AttentionMap, height: usize, width: usize) -> Result<AttentionMap> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidArgument(format!(
            "target size must be positive, got {height}x{width}"
        )));
    }
    let src = map.plane();
    let rows = linear_taps(src.height(), height);
    let cols = linear_taps(src.width(), width);
    let (lo_bound, hi_bound) = src.min_max();
    let mut data = Vec::with_capacity(height * width);
    for &(y0, y1, ty) in &rows {
        for &(x0, x1, tx) in &cols {
            let top = (1.0 - tx) * src.get(y0, x0) + tx * src.get(y0, x1);
            let bottom = (1.0 - tx) * src.get(y1, x0) + tx * src.get(y1, x1);
            let v = (1.0 - ty) * top + ty * bottom;
            // rounding can step a hair outside the convex hull
            data.push(v.clamp(lo_bound, hi_bound));
        }
    }
    AttentionMap::new(Plane::new(height, width, data)?)
}
