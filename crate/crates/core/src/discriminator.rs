//! PatchGAN critics and the random patch sampler feeding the local critic.

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::INIT_STD;
use crate::nn::{leaky_relu, BatchNorm, Conv2d, ConvSpec, Init, Mode, ParamStore};
use crate::raster::Image;

pub const DEFAULT_PATCH_COUNT: usize = 5;
pub const DEFAULT_PATCH_SIZE: usize = 32;

const KERNEL: usize = 4;
const PADDING: usize = 1;
const MAX_WIDTH_MULT: usize = 8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CriticConfig {
    pub base_channels: usize,
    /// Stride-2 layers; the critic has `downsample_layers + 2` convs.
    pub downsample_layers: usize,
}

impl Default for CriticConfig {
    /// The 70x70 PatchGAN: 64/128/256/512/1 channels, strides 2/2/2/1/1.
    fn default() -> Self {
        Self {
            base_channels: 64,
            downsample_layers: 3,
        }
    }
}

impl CriticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.downsample_layers == 0 || self.downsample_layers > 6 {
            return Err(Error::Config(format!(
                "critic needs base_channels >= 1 and downsample_layers in 1..=6, got {self:?}"
            )));
        }
        Ok(())
    }

    /// `(in, out, stride, batch_norm)` per conv layer.
    pub fn layer_plan(&self) -> Vec<(usize, usize, usize, bool)> {
        let width = |i: usize| self.base_channels * (1 << i).min(MAX_WIDTH_MULT);
        let mut plan = vec![(3, width(0), 2, false)];
        for i in 1..self.downsample_layers {
            plan.push((width(i - 1), width(i), 2, true));
        }
        let n = self.downsample_layers;
        plan.push((width(n - 1), width(n), 1, true));
        plan.push((width(n), 1, 1, false));
        plan
    }

    /// Spatial size of the score map for a given input side.
    pub fn output_size(&self, input: usize) -> usize {
        self.layer_plan().iter().fold(input, |s, &(_, _, stride, _)| {
            if s + 2 * PADDING < KERNEL {
                0
            } else {
                (s + 2 * PADDING - KERNEL) / stride + 1
            }
        })
    }

    /// Smallest input side producing a non-empty score map.
    pub fn min_input_size(&self) -> usize {
        (1..).find(|&s| self.output_size(s) >= 1).expect("some size works")
    }

    pub fn total_stride(&self) -> usize {
        1 << self.downsample_layers
    }
}

struct CriticLayer {
    conv: Conv2d,
    norm: Option<BatchNorm>,
    activate: bool,
}

/// Fully-convolutional critic producing an unsquashed score map.
pub struct Critic {
    config: CriticConfig,
    store: ParamStore,
    layers: Vec<CriticLayer>,
}

impl Critic {
    pub fn new(config: CriticConfig, dtype: DType, device: &Device, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(dtype, device);
        let mut init = Init::new(seed);
        let plan = config.layer_plan();
        let last = plan.len() - 1;
        let mut layers = Vec::with_capacity(plan.len());
        for (i, &(cin, cout, stride, bn)) in plan.iter().enumerate() {
            let spec = ConvSpec {
                in_channels: cin,
                out_channels: cout,
                kernel: KERNEL,
                stride,
                padding: PADDING,
            };
            let conv = Conv2d::new(&mut store, &mut init, &format!("layer{i}.conv"), spec, INIT_STD)?;
            let norm = if bn {
                Some(BatchNorm::new(&mut store, &format!("layer{i}.bn"), cout)?)
            } else {
                None
            };
            layers.push(CriticLayer {
                conv,
                norm,
                activate: i != last,
            });
        }
        Ok(Self {
            config,
            store,
            layers,
        })
    }

    pub fn config(&self) -> &CriticConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// `B x 3 x H x W` -> `B x 1 x h' x w'` raw scores.
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let min = self.config.min_input_size();
        if h < min || w < min {
            return Err(Error::Undersized {
                height: h,
                width: w,
                min,
            });
        }
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = layer.conv.forward(&cur)?;
            if let Some(bn) = &layer.norm {
                cur = bn.forward(&cur, mode)?;
            }
            if layer.activate {
                cur = leaky_relu(&cur)?;
            }
        }
        Ok(cur)
    }

    /// One scalar per sample: the spatial mean of the score map.
    pub fn mean_scores(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        Ok(self.forward(x, mode)?.flatten_from(1)?.mean(1)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchOrigin {
    pub y: usize,
    pub x: usize,
}

#[derive(Clone, Debug)]
pub struct PatchSet {
    pub size: usize,
    pub seed: u64,
    pub origins: Vec<PatchOrigin>,
    pub patches: Vec<Image>,
}

/// Top-left corners drawn uniformly over every valid position.
pub fn sample_patch_origins<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    n: usize,
    size: usize,
    rng: &mut R,
) -> Result<Vec<PatchOrigin>> {
    if size == 0 || size > height || size > width {
        return Err(Error::InvalidArgument(format!(
            "patch size {size} does not fit a {height}x{width} image"
        )));
    }
    Ok((0..n)
        .map(|_| PatchOrigin {
            y: rng.random_range(0..=height - size),
            x: rng.random_range(0..=width - size),
        })
        .collect())
}

pub fn sample_patches(img: &Image, n: usize, size: usize, seed: u64) -> Result<PatchSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let origins = sample_patch_origins(img.height(), img.width(), n, size, &mut rng)?;
    let patches = origins
        .iter()
        .map(|o| img.crop(o.y, o.x, size, size))
        .collect::<Result<_>>()?;
    Ok(PatchSet {
        size,
        seed,
        origins,
        patches,
    })
}

/// Crops every origin out of a `B x C x H x W` batch and stacks the results
/// along the batch axis (patch-major).
pub fn crop_patches(batch: &Tensor, origins: &[PatchOrigin], size: usize) -> Result<Tensor> {
    if origins.is_empty() {
        return Err(Error::EmptyBatch("patch origins"));
    }
    let crops = origins
        .iter()
        .map(|o| Ok(batch.narrow(2, o.y, size)?.narrow(3, o.x, size)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&crops, 0)?)
}
