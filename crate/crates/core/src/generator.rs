//! Attention-guided U-Net generator.
//!
//! With the default config the network has 8 conv blocks: four encoder
//! blocks (32/64/128/256 channels, each followed by 2x2 max-pooling), a
//! bottleneck block at 1/16 resolution and three decoder blocks. Every
//! encoder skip is gated by the attention map resized to its resolution
//! before concatenation. The head predicts a tanh residual that is gated by
//! the full-resolution attention and added to the input.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::attention::attention_map;
use crate::error::{Error, Result};
use crate::nn::{leaky_relu, max_pool2x2, resize_bilinear, BatchNorm, Conv2d, ConvSpec, Init, Mode, ParamStore};
use crate::raster::{Image, ValueRange};

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Channels of the first encoder block; doubles per level.
    pub base_channels: usize,
    /// Number of pooling levels. The network has `2 * depth` conv blocks.
    pub depth: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            depth: 4,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.depth > 8 {
            return Err(Error::Config(format!("generator depth must be in 1..=8, got {}", self.depth)));
        }
        if self.base_channels < 2 || self.base_channels % 2 != 0 {
            return Err(Error::Config(format!(
                "generator base_channels must be even and >= 2, got {}",
                self.base_channels
            )));
        }
        Ok(())
    }

    /// Input sides must be a multiple of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }

    pub fn num_blocks(&self) -> usize {
        2 * self.depth
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

/// Two `3x3 conv -> batch-norm -> LeakyReLU(0.2)` stages.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
}

impl ConvBlock {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        in_channels: usize,
        out_channels: usize,
    ) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(store, init, &format!("{name}.conv1"), ConvSpec::same3x3(in_channels, out_channels), INIT_STD)?,
            bn1: BatchNorm::new(store, &format!("{name}.bn1"), out_channels)?,
            conv2: Conv2d::new(store, init, &format!("{name}.conv2"), ConvSpec::same3x3(out_channels, out_channels), INIT_STD)?,
            bn2: BatchNorm::new(store, &format!("{name}.bn2"), out_channels)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let x = leaky_relu(&self.bn1.forward(&self.conv1.forward(x)?, mode)?)?;
        leaky_relu(&self.bn2.forward(&self.conv2.forward(&x)?, mode)?)
    }
}

/// Bilinear 2x upsampling followed by a 3x3 conv that halves the channels.
pub fn upsample_conv(x: &Tensor, conv: &Conv2d) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    conv.forward(&resize_bilinear(x, 2 * h, 2 * w)?)
}

/// Encoder activations, finest first: `(downscale factor, B x C x H x W)`.
#[derive(Clone, Debug)]
pub struct FeatureStack {
    pub levels: Vec<(usize, Tensor)>,
}

pub struct Generator {
    config: GeneratorConfig,
    store: ParamStore,
    encoders: Vec<ConvBlock>,
    bottleneck: ConvBlock,
    ups: Vec<Conv2d>,
    decoders: Vec<ConvBlock>,
    head: Conv2d,
}

impl Generator {
    pub fn new(config: GeneratorConfig, dtype: DType, device: &Device, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(dtype, device);
        let mut init = Init::new(seed);
        let depth = config.depth;

        let mut encoders = Vec::with_capacity(depth);
        let mut in_ch = 3;
        for level in 0..depth {
            let out = config.channels(level);
            encoders.push(ConvBlock::new(&mut store, &mut init, &format!("enc{level}"), in_ch, out)?);
            in_ch = out;
        }
        let bottleneck = ConvBlock::new(&mut store, &mut init, "mid", in_ch, in_ch)?;

        let mut ups = Vec::with_capacity(depth);
        let mut decoders = Vec::with_capacity(depth - 1);
        let mut cur = in_ch;
        for k in 0..depth {
            let level = depth - 1 - k;
            let half = cur / 2;
            ups.push(Conv2d::new(&mut store, &mut init, &format!("up{k}"), ConvSpec::same3x3(cur, half), INIT_STD)?);
            let merged = half + config.channels(level);
            if k + 1 < depth {
                let out = config.channels(level - 1);
                decoders.push(ConvBlock::new(&mut store, &mut init, &format!("dec{k}"), merged, out)?);
                cur = out;
            } else {
                cur = merged;
            }
        }
        let head = Conv2d::new(
            &mut store,
            &mut init,
            "head",
            ConvSpec {
                in_channels: cur,
                out_channels: 3,
                kernel: 1,
                stride: 1,
                padding: 0,
            },
            INIT_STD,
        )?;

        Ok(Self {
            config,
            store,
            encoders,
            bottleneck,
            ups,
            decoders,
            head,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Zeroes the output projection, making the generator the identity map.
    pub fn zero_output_head(&self) -> Result<()> {
        for (name, var) in self.store.params() {
            if name.starts_with("head.") {
                var.set(&var.as_tensor().zeros_like()?)?;
            }
        }
        Ok(())
    }

    fn check_inputs(&self, img: &Tensor, att: &Tensor) -> Result<()> {
        let (b, c, h, w) = img.dims4()?;
        if c != 3 {
            return Err(Error::ChannelCount(c));
        }
        let (ab, ac, ah, aw) = att.dims4()?;
        if (ab, ac, ah, aw) != (b, 1, h, w) {
            return Err(Error::Shape(format!(
                "attention {:?} does not match image {:?}",
                att.dims(),
                img.dims()
            )));
        }
        let m = self.config.size_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::Shape(format!("input {h}x{w} is not a multiple of {m}")));
        }
        Ok(())
    }

    pub fn encode(&self, img: &Tensor, mode: Mode) -> Result<FeatureStack> {
        let mut levels = Vec::with_capacity(self.encoders.len());
        let mut cur = img.clone();
        for (level, block) in self.encoders.iter().enumerate() {
            let e = block.forward(&cur, mode)?;
            cur = max_pool2x2(&e)?;
            levels.push((1 << level, e));
        }
        Ok(FeatureStack { levels })
    }

    /// Signed `B x 3 x H x W` in, signed out, clamped to `[-1, 1]`.
    pub fn forward(&self, img: &Tensor, att: &Tensor, mode: Mode) -> Result<Tensor> {
        self.check_inputs(img, att)?;
        self.store.check_finite("generator")?;
        let stack = self.encode(img, mode)?;
        let (_, deepest) = stack.levels.last().expect("depth >= 1");
        let mut cur = self.bottleneck.forward(&max_pool2x2(deepest)?, mode)?;
        for (k, up) in self.ups.iter().enumerate() {
            let (_, skip) = &stack.levels[self.config.depth - 1 - k];
            let (_, _, h, w) = skip.dims4()?;
            let gate = resize_bilinear(att, h, w)?;
            let gated = skip.broadcast_mul(&gate)?;
            cur = Tensor::cat(&[&upsample_conv(&cur, up)?, &gated], 1)?;
            if let Some(dec) = self.decoders.get(k) {
                cur = dec.forward(&cur, mode)?;
            }
        }
        let residual = self.head.forward(&cur)?.tanh()?;
        Ok(img.add(&residual.broadcast_mul(att)?)?.clamp(-1.0, 1.0)?)
    }

    /// Enhances an image of any size in evaluation mode. Returns a unit-range
    /// image with the input's dimensions.
    pub fn enhance(&self, img: &Image) -> Result<Image> {
        let unit = img.to_unit();
        let (padded, crop) = pad_to_multiple(&unit, self.config.size_multiple())?;
        let att = attention_map(&padded)?;
        let dtype = self.store.dtype();
        let dev = self.store.device();
        let x = padded.to_signed().to_tensor(dtype, dev)?;
        let a = att.to_tensor(dtype, dev)?;
        let y = self.forward(&x, &a, Mode::Eval)?;
        let out = Image::from_tensor(&y, ValueRange::Signed)?;
        Ok(crop.restore(&out)?.to_unit())
    }
}

/// Original dimensions to crop back to after a padded forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropRecord {
    pub height: usize,
    pub width: usize,
    pub pad_bottom: usize,
    pub pad_right: usize,
}

impl CropRecord {
    pub fn is_empty(&self) -> bool {
        self.pad_bottom == 0 && self.pad_right == 0
    }

    pub fn restore(&self, img: &Image) -> Result<Image> {
        if self.is_empty() {
            return Ok(img.clone());
        }
        img.crop(0, 0, self.height, self.width)
    }
}

/// Mirror index without repeating the edge sample; a length-1 axis maps
/// everything to 0.
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Reflect-pads the bottom and right edges up to the next multiple of `m`.
pub fn pad_to_multiple(img: &Image, m: usize) -> Result<(Image, CropRecord)> {
    if m == 0 {
        return Err(Error::InvalidArgument("pad multiple must be >= 1".into()));
    }
    let (h, w) = (img.height(), img.width());
    let ph = h.div_ceil(m) * m;
    let pw = w.div_ceil(m) * m;
    let record = CropRecord {
        height: h,
        width: w,
        pad_bottom: ph - h,
        pad_right: pw - w,
    };
    if record.is_empty() {
        return Ok((img.clone(), record));
    }
    let padded = Image::from_fn(ph, pw, img.range(), |y, x| img.pixel(reflect(y, h), reflect(x, w)))?;
    Ok((padded, record))
}
