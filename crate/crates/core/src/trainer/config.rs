use std::path::PathBuf;

use candle_core::DType;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{PreprocessConfig, DEFAULT_LOW_THRESHOLD};
use crate::discriminator::{CriticConfig, DEFAULT_PATCH_COUNT, DEFAULT_PATCH_SIZE};
use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::losses::{ExtractorConfig, Tap};

/// Flat training configuration, read from TOML. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub low_dir: Option<PathBuf>,
    pub normal_dir: Option<PathBuf>,
    pub out_dir: PathBuf,

    pub width: usize,
    pub height: usize,
    /// Square training crop; 0 trains on the full resized image.
    pub crop: usize,
    pub flip: bool,

    pub epochs_const: usize,
    pub epochs_decay: usize,
    pub lr: f64,
    pub batch: usize,
    /// Micro-batches accumulated per optimizer step.
    pub accum_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    /// Optimizer steps per epoch; 0 derives it from the larger split.
    pub iters_per_epoch: usize,
    pub seed: u64,

    pub patch_count: usize,
    pub patch_size: usize,

    pub gen_channels: usize,
    pub gen_depth: usize,
    pub critic_channels: usize,
    pub critic_layers: usize,

    pub vgg_weights: Option<PathBuf>,
    pub vgg_fallback_seed: Option<u64>,
    pub vgg_width_divisor: usize,
    pub sfp_block: usize,
    pub sfp_conv: usize,

    /// `"f32"` or `"f64"`.
    pub dtype: String,
    pub checkpoint_every: usize,
    pub queue_depth: usize,
    /// Brightness threshold used to select target-domain images in `adapt`.
    pub low_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            low_dir: None,
            normal_dir: None,
            out_dir: PathBuf::from("runs/enlighten"),
            width: 600,
            height: 400,
            crop: 320,
            flip: true,
            epochs_const: 100,
            epochs_decay: 100,
            lr: 1e-4,
            batch: 32,
            accum_steps: 1,
            beta1: 0.5,
            beta2: 0.999,
            iters_per_epoch: 0,
            seed: 0,
            patch_count: DEFAULT_PATCH_COUNT,
            patch_size: DEFAULT_PATCH_SIZE,
            gen_channels: 32,
            gen_depth: 4,
            critic_channels: 64,
            critic_layers: 3,
            vgg_weights: None,
            vgg_fallback_seed: None,
            vgg_width_divisor: 1,
            sfp_block: 5,
            sfp_conv: 1,
            dtype: "f32".into(),
            checkpoint_every: 10,
            queue_depth: 2,
            low_threshold: DEFAULT_LOW_THRESHOLD,
        }
    }
}

/// Fields that determine the optimization trajectory.
#[derive(Serialize)]
struct Fingerprinted<'a> {
    width: usize,
    height: usize,
    crop: usize,
    flip: bool,
    epochs_const: usize,
    epochs_decay: usize,
    lr: f64,
    batch: usize,
    accum_steps: usize,
    beta1: f64,
    beta2: f64,
    iters_per_epoch: usize,
    seed: u64,
    patch_count: usize,
    patch_size: usize,
    generator: GeneratorConfig,
    critic: CriticConfig,
    vgg_width_divisor: usize,
    tap: Tap,
    dtype: &'a str,
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |key: &str, v: usize| {
            if v == 0 {
                Err(Error::Config(format!("`{key}` must be positive")))
            } else {
                Ok(())
            }
        };
        positive("epochs_const", self.epochs_const)?;
        positive("epochs_decay", self.epochs_decay)?;
        positive("batch", self.batch)?;
        positive("accum_steps", self.accum_steps)?;
        positive("patch_count", self.patch_count)?;
        positive("patch_size", self.patch_size)?;
        positive("checkpoint_every", self.checkpoint_every)?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("`lr` must be positive, got {}", self.lr)));
        }
        for (key, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("`{key}` must be in [0, 1), got {b}")));
            }
        }
        self.dtype()?;
        self.generator_config()
            .validate()
            .map_err(|e| Error::Config(format!("`gen_channels`/`gen_depth`: {e}")))?;
        let critic = self.critic_config();
        critic
            .validate()
            .map_err(|e| Error::Config(format!("`critic_channels`/`critic_layers`: {e}")))?;
        self.extractor_config()
            .validate()
            .map_err(|e| Error::Config(format!("`sfp_block`/`sfp_conv`/`vgg_width_divisor`: {e}")))?;
        self.preprocess_config()
            .validate()
            .map_err(|e| Error::Config(format!("`width`/`height`/`crop`: {e}")))?;

        let (h, w) = self.preprocess_config().train_size();
        let m = self.generator_config().size_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::Config(format!(
                "training size {h}x{w} must be a multiple of {m} (`crop` or `width`/`height`)"
            )));
        }
        if self.patch_size > h.min(w) {
            return Err(Error::Config(format!("`patch_size` {} exceeds training size {h}x{w}", self.patch_size)));
        }
        let min = critic.min_input_size();
        if self.patch_size < min || h.min(w) < min {
            return Err(Error::Config(format!(
                "`patch_size` and training size must be at least {min} for the critic"
            )));
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs_const + self.epochs_decay
    }

    pub fn dtype(&self) -> Result<DType> {
        match self.dtype.as_str() {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            other => Err(Error::Config(format!("`dtype` must be \"f32\" or \"f64\", got {other:?}"))),
        }
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            base_channels: self.gen_channels,
            depth: self.gen_depth,
        }
    }

    pub fn critic_config(&self) -> CriticConfig {
        CriticConfig {
            base_channels: self.critic_channels,
            downsample_layers: self.critic_layers,
        }
    }

    pub fn extractor_config(&self) -> ExtractorConfig {
        let weights = self.vgg_weights.clone().or_else(default_vgg_weights);
        ExtractorConfig {
            weights,
            fallback_seed: self.vgg_fallback_seed,
            width_divisor: self.vgg_width_divisor,
            tap: Tap {
                block: self.sfp_block,
                conv: self.sfp_conv,
            },
        }
    }

    pub fn preprocess_config(&self) -> PreprocessConfig {
        PreprocessConfig {
            width: self.width,
            height: self.height,
            crop: (self.crop > 0).then_some(self.crop),
            flip: self.flip,
        }
    }

    /// Stable hash of everything that shapes training, excluding paths and
    /// I/O cadence.
    pub fn fingerprint(&self) -> String {
        let f = Fingerprinted {
            width: self.width,
            height: self.height,
            crop: self.crop,
            flip: self.flip,
            epochs_const: self.epochs_const,
            epochs_decay: self.epochs_decay,
            lr: self.lr,
            batch: self.batch,
            accum_steps: self.accum_steps,
            beta1: self.beta1,
            beta2: self.beta2,
            iters_per_epoch: self.iters_per_epoch,
            seed: self.seed,
            patch_count: self.patch_count,
            patch_size: self.patch_size,
            generator: self.generator_config(),
            critic: self.critic_config(),
            vgg_width_divisor: self.vgg_width_divisor,
            tap: Tap {
                block: self.sfp_block,
                conv: self.sfp_conv,
            },
            dtype: &self.dtype,
        };
        let json = serde_json::to_vec(&f).expect("fingerprint serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }
}

/// Environment variable naming a directory that holds `vgg16.safetensors`.
pub const WEIGHTS_DIR_ENV: &str = "ENLIGHTEN_WEIGHTS_DIR";

fn default_vgg_weights() -> Option<PathBuf> {
    std::env::var_os(WEIGHTS_DIR_ENV).map(|d| PathBuf::from(d).join("vgg16.safetensors"))
}

/// Constant for the first `epochs_const` epochs, then linear decay reaching
/// zero at the final epoch. Epochs are 1-based.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    let total = cfg.total_epochs();
    if epoch == 0 || epoch > total {
        return Err(Error::InvalidArgument(format!("epoch {epoch} outside 1..={total}")));
    }
    if epoch <= cfg.epochs_const {
        Ok(cfg.lr)
    } else {
        Ok(cfg.lr * ((total - epoch) as f64 / cfg.epochs_decay as f64))
    }
}
