//! Unpaired dataset assembly, brightness filtering and batch preparation.
//!
//! Low-light and normal-light images live in two independent lists. Each
//! side is sampled by its own shuffled cursor, so nothing in this module can
//! pair a low image with a normal one.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::{mpsc, Arc};

use candle_core::{DType, Device, Tensor};
use image::imageops::{self, FilterType};
use image::RgbImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attention_map, AttentionMap};
use crate::error::{Error, Result};
use crate::raster::Image;

/// Images whose mean 8-bit intensity is strictly below this are low-light.
pub const DEFAULT_LOW_THRESHOLD: f64 = 45.0;

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Decodes PNG or JPEG into 8-bit RGB.
pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|source| Error::Decode {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(img.to_rgb8())
}

/// Sorted PNG/JPEG files directly inside `dir`.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if path.is_file() && is_image {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// File names (one per line, `#` comments allowed) to leave out of a corpus.
pub fn read_exclude_list(path: &Path) -> Result<BTreeSet<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            Path::new(l)
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| l.to_string())
        })
        .collect())
}

/// Mean over all pixels and channels, on the 0-255 scale.
pub fn mean_intensity(img: &RgbImage) -> f64 {
    let raw = img.as_raw();
    if raw.is_empty() {
        return 0.0;
    }
    raw.iter().map(|&v| v as u64).sum::<u64>() as f64 / raw.len() as f64
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    /// Strictly darker than the threshold, with their mean intensity.
    pub kept: Vec<(PathBuf, f64)>,
    pub rejected: Vec<(PathBuf, f64)>,
    /// Unreadable files and the reason.
    pub skipped: Vec<(PathBuf, String)>,
}

impl FilterReport {
    pub fn kept_paths(&self) -> Vec<PathBuf> {
        self.kept.iter().map(|(p, _)| p.clone()).collect()
    }

    pub fn rejected_paths(&self) -> Vec<PathBuf> {
        self.rejected.iter().map(|(p, _)| p.clone()).collect()
    }
}

/// Partitions `paths` by mean 8-bit intensity: `< threshold` is kept.
pub fn brightness_filter(paths: &[PathBuf], threshold: f64) -> FilterReport {
    let mut report = FilterReport::default();
    for path in paths {
        match load_rgb(path) {
            Ok(img) => {
                let mean = mean_intensity(&img);
                if mean < threshold {
                    report.kept.push((path.clone(), mean));
                } else {
                    report.rejected.push((path.clone(), mean));
                }
            }
            Err(e) => report.skipped.push((path.clone(), e.to_string())),
        }
    }
    report
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub width: usize,
    pub height: usize,
    /// Square random crop side in training mode.
    pub crop: Option<usize>,
    /// Random horizontal flip in training mode.
    pub flip: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            width: 600,
            height: 400,
            crop: Some(320),
            flip: true,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("preprocess size must be positive".into()));
        }
        if let Some(c) = self.crop {
            if c == 0 || c > self.width || c > self.height {
                return Err(Error::Config(format!(
                    "crop {c} does not fit {}x{}",
                    self.width, self.height
                )));
            }
        }
        Ok(())
    }

    /// Spatial size of training samples.
    pub fn train_size(&self) -> (usize, usize) {
        match self.crop {
            Some(c) => (c, c),
            None => (self.height, self.width),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Preprocessed {
    pub signed: Image,
    pub attention: AttentionMap,
}

/// Resizes to the configured size, optionally crops and flips (training
/// mode, when `rng` is given), then produces the signed network input and
/// the attention map of the unit image.
pub fn preprocess<R: Rng + ?Sized>(
    img: &RgbImage,
    cfg: &PreprocessConfig,
    rng: Option<&mut R>,
) -> Result<Preprocessed> {
    let resized;
    let img = if (img.width() as usize, img.height() as usize) == (cfg.width, cfg.height) {
        img
    } else {
        resized = imageops::resize(img, cfg.width as u32, cfg.height as u32, FilterType::Triangle);
        &resized
    };
    let mut unit = Image::from_rgb8(img);
    if let Some(rng) = rng {
        if let Some(c) = cfg.crop {
            let y = rng.random_range(0..=unit.height() - c);
            let x = rng.random_range(0..=unit.width() - c);
            unit = unit.crop(y, x, c, c)?;
        }
        if cfg.flip && rng.random_bool(0.5) {
            unit = unit.flip_horizontal();
        }
    }
    let attention = attention_map(&unit)?;
    Ok(Preprocessed {
        signed: unit.to_signed(),
        attention,
    })
}

#[derive(Clone, Debug)]
pub enum ImageSource {
    Path(PathBuf),
    Memory(Arc<RgbImage>),
}

impl ImageSource {
    pub fn load(&self) -> Result<RgbImage> {
        match self {
            ImageSource::Path(p) => load_rgb(p),
            ImageSource::Memory(img) => Ok((**img).clone()),
        }
    }
}

impl From<PathBuf> for ImageSource {
    fn from(p: PathBuf) -> Self {
        ImageSource::Path(p)
    }
}

impl From<RgbImage> for ImageSource {
    fn from(img: RgbImage) -> Self {
        ImageSource::Memory(Arc::new(img))
    }
}

/// Reshuffles its index order every time it wraps around.
#[derive(Clone, Debug)]
struct EpochSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl EpochSampler {
    fn new(len: usize, seed: u64) -> Self {
        let mut s = Self {
            order: (0..len).collect(),
            pos: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.order.shuffle(&mut s.rng);
        s
    }

    fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Signed images, their attention maps and an independent normal-light set.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `B x 3 x h x w` in `[-1, 1]`.
    pub low: Tensor,
    /// `B x 1 x h x w` in `[0, 1]`.
    pub low_attention: Tensor,
    /// `B x 3 x h x w` in `[-1, 1]`.
    pub normal: Tensor,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.low.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn mix_seed(seed: u64, stream: u64, epoch: u64) -> u64 {
    // splitmix64 over the combined words
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ epoch.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub struct UnpairedDataset {
    low: Vec<ImageSource>,
    normal: Vec<ImageSource>,
    preprocess: PreprocessConfig,
    seed: u64,
    low_sampler: EpochSampler,
    normal_sampler: EpochSampler,
    augment: ChaCha8Rng,
}

impl UnpairedDataset {
    pub fn new(
        low: Vec<ImageSource>,
        normal: Vec<ImageSource>,
        preprocess: PreprocessConfig,
        seed: u64,
    ) -> Result<Self> {
        if low.is_empty() {
            return Err(Error::Insufficient("low-light split is empty".into()));
        }
        if normal.is_empty() {
            return Err(Error::Insufficient("normal-light split is empty".into()));
        }
        preprocess.validate()?;
        let mut ds = Self {
            low_sampler: EpochSampler::new(low.len(), 0),
            normal_sampler: EpochSampler::new(normal.len(), 0),
            augment: ChaCha8Rng::seed_from_u64(0),
            low,
            normal,
            preprocess,
            seed,
        };
        ds.start_epoch(1);
        Ok(ds)
    }

    pub fn from_dirs(low_dir: &Path, normal_dir: &Path, preprocess: PreprocessConfig, seed: u64) -> Result<Self> {
        let low = list_images(low_dir)?.into_iter().map(ImageSource::from).collect();
        let normal = list_images(normal_dir)?.into_iter().map(ImageSource::from).collect();
        Self::new(low, normal, preprocess, seed)
    }

    pub fn low_len(&self) -> usize {
        self.low.len()
    }

    pub fn normal_len(&self) -> usize {
        self.normal.len()
    }

    pub fn preprocess_config(&self) -> &PreprocessConfig {
        &self.preprocess
    }

    /// Batches needed to see the larger split once.
    pub fn batches_per_epoch(&self, batch: usize) -> usize {
        self.low.len().max(self.normal.len()).div_ceil(batch.max(1))
    }

    /// Resets every random stream to a state that depends only on the master
    /// seed and `epoch`, so a resumed run replays the same epochs.
    pub fn start_epoch(&mut self, epoch: usize) {
        let e = epoch as u64;
        self.low_sampler = EpochSampler::new(self.low.len(), mix_seed(self.seed, 1, e));
        self.normal_sampler = EpochSampler::new(self.normal.len(), mix_seed(self.seed, 2, e));
        self.augment = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, 3, e));
    }

    fn stack(items: &[Preprocessed], dtype: DType, device: &Device) -> Result<(Tensor, Tensor)> {
        let images = items
            .iter()
            .map(|p| p.signed.to_tensor(dtype, device))
            .collect::<Result<Vec<_>>>()?;
        let maps = items
            .iter()
            .map(|p| p.attention.to_tensor(dtype, device))
            .collect::<Result<Vec<_>>>()?;
        Ok((Tensor::cat(&images, 0)?, Tensor::cat(&maps, 0)?))
    }

    /// `b` low and `b` normal images drawn independently.
    pub fn next_batch(&mut self, b: usize, dtype: DType, device: &Device) -> Result<Batch> {
        if b == 0 {
            return Err(Error::InvalidArgument("batch size must be >= 1".into()));
        }
        let mut low = Vec::with_capacity(b);
        for _ in 0..b {
            let i = self.low_sampler.next();
            let img = self.low[i].load()?;
            low.push(preprocess(&img, &self.preprocess, Some(&mut self.augment))?);
        }
        let mut normal = Vec::with_capacity(b);
        for _ in 0..b {
            let i = self.normal_sampler.next();
            let img = self.normal[i].load()?;
            normal.push(preprocess(&img, &self.preprocess, Some(&mut self.augment))?);
        }
        let (low, low_attention) = Self::stack(&low, dtype, device)?;
        let (normal, _) = Self::stack(&normal, dtype, device)?;
        Ok(Batch {
            low,
            low_attention,
            normal,
        })
    }

    /// Prepares `iters` batches on a worker thread feeding a bounded queue
    /// and hands them to `consume` in order. Stops at the first error from
    /// either side.
    pub fn stream_epoch<F>(
        &mut self,
        epoch: usize,
        iters: usize,
        batch: usize,
        dtype: DType,
        device: &Device,
        queue: usize,
        mut consume: F,
    ) -> Result<()>
    where
        F: FnMut(usize, Batch) -> Result<()>,
    {
        self.start_epoch(epoch);
        let (tx, rx) = mpsc::sync_channel::<Result<Batch>>(queue.max(1));
        std::thread::scope(|scope| {
            let producer = scope.spawn(move || {
                for _ in 0..iters {
                    let item = self.next_batch(batch, dtype, device);
                    let failed = item.is_err();
                    if tx.send(item).is_err() || failed {
                        break;
                    }
                }
            });
            let mut outcome = Ok(());
            for (i, item) in rx.iter().enumerate() {
                outcome = item.and_then(|b| consume(i, b));
                if outcome.is_err() {
                    break;
                }
            }
            drop(rx);
            producer.join().expect("batch producer panicked");
            outcome
        })
    }
}
