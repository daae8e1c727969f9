//! In-memory RGB rasters and single-channel planes.
//!
//! Pixels are stored row-major and channel-interleaved (`H x W x 3`) as
//! `f32`. Every [`Image`] carries the range its values live in, so code that
//! feeds the network (signed) and code that computes attention or statistics
//! (unit) cannot silently mix the two.

use candle_core::{DType, Device, Tensor};
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ValueRange {
    /// Values in `[0, 1]`.
    Unit,
    /// Values in `[-1, 1]`.
    Signed,
}

impl ValueRange {
    pub fn bounds(self) -> (f32, f32) {
        match self {
            ValueRange::Unit => (0.0, 1.0),
            ValueRange::Signed => (-1.0, 1.0),
        }
    }

    fn contains(self, v: f32) -> bool {
        let (lo, hi) = self.bounds();
        v >= lo && v <= hi
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    range: ValueRange,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, range: ValueRange, data: Vec<f32>) -> Result<Self> {
        Self::from_raw(height, width, 3, range, data)
    }

    /// Builds an image from a raw interleaved buffer, rejecting anything that
    /// is not exactly three channels.
    pub fn from_raw(
        height: usize,
        width: usize,
        channels: usize,
        range: ValueRange,
        data: Vec<f32>,
    ) -> Result<Self> {
        if channels != 3 {
            return Err(Error::ChannelCount(channels));
        }
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("image must be non-empty, got {height}x{width}")));
        }
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "buffer of {} values does not match {height}x{width}x3",
                data.len()
            )));
        }
        if let Some(&value) = data.iter().find(|v| !range.contains(**v)) {
            return Err(Error::Range { value, range });
        }
        Ok(Self {
            height,
            width,
            range,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, range: ValueRange, rgb: [f32; 3]) -> Result<Self> {
        Self::from_fn(height, width, range, |_, _| rgb)
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        range: ValueRange,
        mut f: impl FnMut(usize, usize) -> [f32; 3],
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(y, x));
            }
        }
        Self::new(height, width, range, data)
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let data = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
        Self {
            height: img.height() as usize,
            width: img.width() as usize,
            range: ValueRange::Unit,
            data,
        }
    }

    /// Quantizes to 8 bits, rounding to nearest.
    pub fn to_rgb8(&self) -> RgbImage {
        let unit = self.to_unit();
        let raw = unit
            .data
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        RgbImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length matches dimensions")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn pixels(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Maps to `[-1, 1]` via `2x - 1`.
    pub fn to_signed(&self) -> Image {
        match self.range {
            ValueRange::Signed => self.clone(),
            ValueRange::Unit => self.remap(ValueRange::Signed, |v| 2.0 * v - 1.0),
        }
    }

    /// Maps to `[0, 1]` via `(x + 1) / 2`.
    pub fn to_unit(&self) -> Image {
        match self.range {
            ValueRange::Unit => self.clone(),
            ValueRange::Signed => self.remap(ValueRange::Unit, |v| (v + 1.0) / 2.0),
        }
    }

    fn remap(&self, range: ValueRange, f: impl Fn(f32) -> f32) -> Image {
        let (lo, hi) = range.bounds();
        Image {
            height: self.height,
            width: self.width,
            range,
            data: self.data.iter().map(|&v| f(v).clamp(lo, hi)).collect(),
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn crop(&self, y: usize, x: usize, height: usize, width: usize) -> Result<Image> {
        if height == 0 || width == 0 || y + height > self.height || x + width > self.width {
            return Err(Error::InvalidArgument(format!(
                "crop {height}x{width} at ({y}, {x}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(height * width * 3);
        for row in y..y + height {
            let start = (row * self.width + x) * 3;
            data.extend_from_slice(&self.data[start..start + width * 3]);
        }
        Ok(Image {
            height,
            width,
            range: self.range,
            data,
        })
    }

    pub fn flip_horizontal(&self) -> Image {
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in (0..self.width).rev() {
                data.extend_from_slice(&self.pixel(y, x));
            }
        }
        Image { data, ..*self }
    }

    /// `1 x 3 x H x W` tensor in the image's own range.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let plane = self.height * self.width;
        let mut chw = vec![0f32; plane * 3];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                chw[c * plane + i] = px[c];
            }
        }
        Ok(Tensor::from_vec(chw, (1, 3, self.height, self.width), device)?.to_dtype(dtype)?)
    }

    /// Inverse of [`Image::to_tensor`]; accepts `3 x H x W` or `1 x 3 x H x W`.
    pub fn from_tensor(t: &Tensor, range: ValueRange) -> Result<Image> {
        let t = match t.rank() {
            4 if t.dim(0)? == 1 => t.squeeze(0)?,
            3 => t.clone(),
            _ => return Err(Error::Shape(format!("expected a single CHW image, got {:?}", t.dims()))),
        };
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(Error::ChannelCount(c));
        }
        let chw = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        let plane = h * w;
        let mut data = vec![0f32; plane * 3];
        for i in 0..plane {
            for ch in 0..3 {
                data[i * 3 + ch] = chw[ch * plane + i];
            }
        }
        Image::new(h, w, range, data)
    }

}

/// A single-channel `H x W` plane of `f32` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Plane {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::Shape(format!(
                "plane buffer of {} values does not match {height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub(crate) fn into_values(self) -> Vec<f32> {
        self.data
    }
}
