//! Frozen VGG-16 feature extractor for the self feature preserving loss.
//!
//! Pretrained weights are read from a safetensors file using torchvision's
//! `features.<index>.{weight,bias}` naming. Without a weights file a seeded
//! He-initialized network with the same layout can be used instead, which
//! keeps the loss plumbing testable offline.

use std::path::PathBuf;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{max_pool2x2, Init};
use crate::raster::Image;

/// Conv layers per VGG-16 block and the block widths.
const VGG16_BLOCKS: [(usize, usize); 5] = [(64, 2), (128, 2), (256, 3), (512, 3), (512, 3)];
const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Activation tap: the `conv`-th conv (post-ReLU) of the `block`-th conv
/// block, both 1-based. Block `i` follows max-pool `i - 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tap {
    pub block: usize,
    pub conv: usize,
}

impl Default for Tap {
    /// conv5_1
    fn default() -> Self {
        Self { block: 5, conv: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorConfig {
    pub weights: Option<PathBuf>,
    pub fallback_seed: Option<u64>,
    /// Divides every block width of the seeded fallback; must be 1 for
    /// pretrained weights.
    pub width_divisor: usize,
    pub tap: Tap,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            weights: None,
            fallback_seed: None,
            width_divisor: 1,
            tap: Tap::default(),
        }
    }
}

impl ExtractorConfig {
    pub fn seeded(seed: u64, width_divisor: usize, tap: Tap) -> Self {
        Self {
            weights: None,
            fallback_seed: Some(seed),
            width_divisor,
            tap,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let Tap { block, conv } = self.tap;
        if !(1..=5).contains(&block) || conv == 0 || conv > VGG16_BLOCKS[block - 1].1 {
            return Err(Error::Config(format!("invalid extractor tap {:?}", self.tap)));
        }
        if self.width_divisor == 0 || VGG16_BLOCKS.iter().any(|(w, _)| w % self.width_divisor != 0) {
            return Err(Error::Config(format!(
                "extractor width_divisor {} must divide 64",
                self.width_divisor
            )));
        }
        Ok(())
    }
}

struct FrozenConv {
    weight: Tensor,
    bias: Tensor,
}

pub struct FeatureExtractor {
    tap: Tap,
    source: String,
    blocks: Vec<Vec<FrozenConv>>,
    mean: Tensor,
    std: Tensor,
}

/// Activations at the configured tap.
#[derive(Clone, Debug)]
pub struct PerceptualFeatures {
    pub activation: Tensor,
    pub tap: Tap,
    pub extractor: String,
}

impl PerceptualFeatures {
    pub fn height(&self) -> usize {
        self.activation.dims()[2]
    }

    pub fn width(&self) -> usize {
        self.activation.dims()[3]
    }
}

impl FeatureExtractor {
    /// Loads pretrained weights when the configured file exists, otherwise
    /// falls back to seeded weights if a seed is configured.
    pub fn load(cfg: &ExtractorConfig, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        match (&cfg.weights, cfg.fallback_seed) {
            (Some(path), _) if path.is_file() => Self::pretrained(path, cfg.tap, dtype, device),
            (weights, Some(seed)) => {
                if let Some(path) = weights {
                    log::warn!("{} not found; using seeded extractor weights", path.display());
                }
                Self::seeded(seed, cfg.width_divisor, cfg.tap, dtype, device)
            }
            (Some(path), None) => Err(Error::MissingWeights(path.clone())),
            (None, None) => Err(Error::MissingWeights(PathBuf::from("<unset>"))),
        }
    }

    fn pretrained(path: &std::path::Path, tap: Tap, dtype: DType, device: &Device) -> Result<Self> {
        let tensors = candle_core::safetensors::load(path, device)?;
        let mut index = 0;
        let mut blocks = Vec::new();
        let mut cin = 3;
        for (b, &(width, convs)) in VGG16_BLOCKS.iter().enumerate().take(tap.block) {
            let mut layers = Vec::new();
            for _ in 0..convs {
                let get = |suffix: &str, dims: &[usize]| -> Result<Tensor> {
                    let name = format!("features.{index}.{suffix}");
                    let t = tensors.get(&name).ok_or_else(|| Error::MissingArray(name.clone()))?;
                    if t.dims() != dims {
                        return Err(Error::ShapeMismatch {
                            name,
                            found: t.dims().to_vec(),
                            expected: dims.to_vec(),
                        });
                    }
                    Ok(t.to_dtype(dtype)?)
                };
                layers.push(FrozenConv {
                    weight: get("weight", &[width, cin, 3, 3])?,
                    bias: get("bias", &[width])?,
                });
                cin = width;
                index += 2;
            }
            if b + 1 < tap.block {
                index += 1;
            }
            blocks.push(layers);
        }
        Self::assemble(tap, format!("vgg16:{}", path.display()), blocks, dtype, device)
    }

    fn seeded(seed: u64, divisor: usize, tap: Tap, dtype: DType, device: &Device) -> Result<Self> {
        let mut init = Init::new(seed);
        let mut blocks = Vec::new();
        let mut cin = 3;
        for &(width, convs) in VGG16_BLOCKS.iter().take(tap.block) {
            let width = width / divisor;
            let mut layers = Vec::new();
            for _ in 0..convs {
                let std = (2.0 / (cin * 9) as f64).sqrt();
                layers.push(FrozenConv {
                    weight: init.normal(&[width, cin, 3, 3], std, device)?.to_dtype(dtype)?,
                    bias: Tensor::zeros(width, dtype, device)?,
                });
                cin = width;
            }
            blocks.push(layers);
        }
        Self::assemble(tap, format!("seeded:{seed}/{divisor}"), blocks, dtype, device)
    }

    fn assemble(tap: Tap, source: String, mut blocks: Vec<Vec<FrozenConv>>, dtype: DType, device: &Device) -> Result<Self> {
        if let Some(last) = blocks.last_mut() {
            last.truncate(tap.conv);
        }
        let mean = Tensor::new(&IMAGENET_MEAN, device)?.to_dtype(dtype)?.reshape((1, 3, 1, 1))?;
        let std = Tensor::new(&IMAGENET_STD, device)?.to_dtype(dtype)?.reshape((1, 3, 1, 1))?;
        Ok(Self {
            tap,
            source,
            blocks,
            mean,
            std,
        })
    }

    pub fn tap(&self) -> Tap {
        self.tap
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// Smallest input side that still yields a non-empty feature map.
    pub fn min_input_size(&self) -> usize {
        1 << (self.tap.block - 1)
    }

    /// Signed `B x 3 x H x W` in; activations at the tap out.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 {
            return Err(Error::ChannelCount(c));
        }
        let min = self.min_input_size();
        if h < min || w < min {
            return Err(Error::Undersized {
                height: h,
                width: w,
                min,
            });
        }
        let unit = x.affine(0.5, 0.5)?;
        let mut cur = unit
            .broadcast_sub(&self.mean)?
            .broadcast_div(&self.std)?;
        for (b, block) in self.blocks.iter().enumerate() {
            if b > 0 {
                cur = max_pool2x2(&cur)?;
            }
            for conv in block {
                cur = cur
                    .conv2d(&conv.weight, 1, 1, 1, 1)?
                    .broadcast_add(&conv.bias.reshape((1, conv.bias.dim(0)?, 1, 1))?)?
                    .relu()?;
            }
        }
        Ok(cur)
    }

    pub fn extract(&self, img: &Image) -> Result<PerceptualFeatures> {
        let x = img.to_signed().to_tensor(self.mean.dtype(), self.mean.device())?;
        Ok(PerceptualFeatures {
            activation: self.forward(&x)?,
            tap: self.tap,
            extractor: self.source.clone(),
        })
    }
}
