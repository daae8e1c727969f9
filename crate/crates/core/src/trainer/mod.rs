//! Alternating GAN optimization.
//!
//! Each optimizer step first updates both critics (global relativistic
//! LSGAN plus local patch LSGAN), then the generator on the sum of its two
//! adversarial terms and the global and local SFP losses. Micro-batches can
//! be accumulated to reach a larger effective batch.

mod checkpoint;
mod config;

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, Manifest, CRITIC_GLOBAL_PREFIX, CRITIC_LOCAL_PREFIX,
    FORMAT_VERSION, GENERATOR_PREFIX,
};
pub use config::{lr_schedule, TrainConfig, WEIGHTS_DIR_ENV};

use crate::data::{brightness_filter, list_images, Batch, ImageSource, UnpairedDataset};
use crate::discriminator::{crop_patches, sample_patch_origins, Critic, PatchOrigin};
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::losses::{
    global_d_loss, global_g_loss, local_d_loss, local_g_loss, scalar, sfp_loss, total_g_loss,
    FeatureExtractor, GeneratorLossParts,
};
use crate::nn::{accumulate, collect_grads, grad_norm, scale_grads, Adam, Mode, NamedGrads};

/// Loss terms and gradient norms of one optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub epoch: usize,
    pub iter: u64,
    pub lr: f64,
    pub d_global: f64,
    pub d_local: f64,
    pub g_global: f64,
    pub g_local: f64,
    pub sfp_global: f64,
    pub sfp_local: f64,
    pub g_total: f64,
    pub grad_norm_g: f64,
    pub grad_norm_d_global: f64,
    pub grad_norm_d_local: f64,
}

/// Output of the critic phase of a training step.
#[derive(Default)]
pub struct CriticPhase {
    pub fakes: Vec<(Tensor, Vec<PatchOrigin>)>,
    pub d_global: f64,
    pub d_local: f64,
    pub grad_norm_global: f64,
    pub grad_norm_local: f64,
}

fn stream_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stream)
}

pub struct Trainer {
    cfg: TrainConfig,
    device: Device,
    generator: Generator,
    critic_global: Critic,
    critic_local: Critic,
    extractor: FeatureExtractor,
    opt_g: Adam,
    opt_global: Adam,
    opt_local: Adam,
    patch_rng: ChaCha8Rng,
    epoch: usize,
    iteration: u64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let dtype = cfg.dtype()?;
        let generator = Generator::new(cfg.generator_config(), dtype, device, stream_seed(cfg.seed, 1))?;
        let critic_global = Critic::new(cfg.critic_config(), dtype, device, stream_seed(cfg.seed, 2))?;
        let critic_local = Critic::new(cfg.critic_config(), dtype, device, stream_seed(cfg.seed, 3))?;
        let extractor = FeatureExtractor::load(&cfg.extractor_config(), dtype, device)?;
        Ok(Self {
            opt_g: Adam::new(cfg.beta1, cfg.beta2),
            opt_global: Adam::new(cfg.beta1, cfg.beta2),
            opt_local: Adam::new(cfg.beta1, cfg.beta2),
            patch_rng: ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, 4)),
            cfg,
            device: device.clone(),
            generator,
            critic_global,
            critic_local,
            extractor,
            epoch: 0,
            iteration: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn critic_global(&self) -> &Critic {
        &self.critic_global
    }

    pub fn critic_local(&self) -> &Critic {
        &self.critic_local
    }

    pub fn extractor(&self) -> &FeatureExtractor {
        &self.extractor
    }

    /// Last completed epoch.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn dtype(&self) -> DType {
        self.generator.store().dtype()
    }

    fn sample_origins(&mut self, batch: &Tensor) -> Result<Vec<PatchOrigin>> {
        let (_, _, h, w) = batch.dims4()?;
        sample_patch_origins(h, w, self.cfg.patch_count, self.cfg.patch_size, &mut self.patch_rng)
    }

    /// Generator objectives for a batch whose enhancement is `fake`, with the
    /// local terms evaluated at `fake_origins` (shared by the local critic
    /// and the local SFP loss).
    pub fn generator_loss_parts(
        &self,
        batch: &Batch,
        fake: &Tensor,
        fake_origins: &[PatchOrigin],
        mode: Mode,
    ) -> Result<GeneratorLossParts> {
        let size = self.cfg.patch_size;
        let real_scores = self.critic_global.mean_scores(&batch.normal, mode)?.detach();
        let fake_scores = self.critic_global.mean_scores(fake, mode)?;
        let fake_patches = crop_patches(fake, fake_origins, size)?;
        let low_patches = crop_patches(&batch.low, fake_origins, size)?;
        Ok(GeneratorLossParts {
            sfp_global: sfp_loss(&self.extractor, &batch.low, fake)?,
            sfp_local: sfp_loss(&self.extractor, &low_patches, &fake_patches)?,
            adv_global: global_g_loss(&real_scores, &fake_scores)?,
            adv_local: local_g_loss(&self.critic_local.forward(&fake_patches, mode)?)?,
        })
    }

    /// Total generator loss through a fresh forward pass.
    pub fn generator_loss(&self, batch: &Batch, fake_origins: &[PatchOrigin], mode: Mode) -> Result<Tensor> {
        let fake = self.generator.forward(&batch.low, &batch.low_attention, mode)?;
        total_g_loss(&self.generator_loss_parts(batch, &fake, fake_origins, mode)?)
    }

    fn non_finite(&self, term: &str, batch: &Batch) -> Error {
        let dump = self.dump_batch(batch);
        let location = format!("epoch {} iteration {}", self.epoch + 1, self.iteration + 1);
        match dump {
            Ok(path) => Error::NonFinite(format!("{term} at {location}; batch written to {}", path.display())),
            Err(e) => Error::NonFinite(format!("{term} at {location}; batch dump failed: {e}")),
        }
    }

    fn dump_batch(&self, batch: &Batch) -> Result<PathBuf> {
        let dir = self.cfg.out_dir.join("diagnostics");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join(format!("nonfinite_iter{:08}.safetensors", self.iteration + 1));
        let tensors: Vec<(&str, Tensor)> = vec![
            ("low", batch.low.contiguous()?),
            ("low_attention", batch.low_attention.contiguous()?),
            ("normal", batch.normal.contiguous()?),
        ];
        let bytes = safetensors::serialize(tensors.iter().map(|(k, t)| (*k, t)), None)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Critic phase: both critics take one optimizer step on the given
    /// micro-batches. The generated images are returned, still attached to
    /// the generator graph, together with the patch origins used for them.
    pub fn critic_update(&mut self, micro_batches: &[Batch], lr: f64) -> Result<CriticPhase> {
        if micro_batches.is_empty() {
            return Err(Error::EmptyBatch("train step"));
        }
        self.generator.store().check_finite("generator")?;
        let k = micro_batches.len() as f64;
        let size = self.cfg.patch_size;
        let mut phase = CriticPhase::default();
        let mut grads_global = NamedGrads::new();
        let mut grads_local = NamedGrads::new();
        for batch in micro_batches {
            let fake = self.generator.forward(&batch.low, &batch.low_attention, Mode::Train)?;
            let fake_d = fake.detach();
            let real_scores = self.critic_global.mean_scores(&batch.normal, Mode::Train)?;
            let fake_scores = self.critic_global.mean_scores(&fake_d, Mode::Train)?;
            let d_global = global_d_loss(&real_scores, &fake_scores)?;

            let real_origins = self.sample_origins(&batch.normal)?;
            let fake_origins = self.sample_origins(&fake_d)?;
            let real_patches = crop_patches(&batch.normal, &real_origins, size)?;
            let fake_patches = crop_patches(&fake_d, &fake_origins, size)?;
            let d_local = local_d_loss(
                &self.critic_local.forward(&real_patches, Mode::Train)?,
                &self.critic_local.forward(&fake_patches, Mode::Train)?,
            )?;

            let (dg, dl) = (scalar(&d_global)?, scalar(&d_local)?);
            if !dg.is_finite() || !dl.is_finite() {
                return Err(self.non_finite("critic loss", batch));
            }
            phase.d_global += dg / k;
            phase.d_local += dl / k;
            let grads = (d_global + d_local)?.backward()?;
            accumulate(&mut grads_global, collect_grads(self.critic_global.store(), &grads))?;
            accumulate(&mut grads_local, collect_grads(self.critic_local.store(), &grads))?;
            phase.fakes.push((fake, fake_origins));
        }
        scale_grads(&mut grads_global, 1.0 / k)?;
        scale_grads(&mut grads_local, 1.0 / k)?;
        self.opt_global.step(self.critic_global.store(), &grads_global, lr)?;
        self.opt_local.step(self.critic_local.store(), &grads_local, lr)?;
        phase.grad_norm_global = grad_norm(&grads_global)?;
        phase.grad_norm_local = grad_norm(&grads_local)?;
        Ok(phase)
    }

    /// Generator phase on the images produced by [`Trainer::critic_update`].
    /// Returns the mean loss terms `[sfp_global, sfp_local, adv_global,
    /// adv_local, total]` and the gradient norm.
    pub fn generator_update(&mut self, micro_batches: &[Batch], phase: &CriticPhase, lr: f64) -> Result<([f64; 5], f64)> {
        if micro_batches.len() != phase.fakes.len() {
            return Err(Error::InvalidArgument(format!(
                "{} micro-batches but {} generated batches",
                micro_batches.len(),
                phase.fakes.len()
            )));
        }
        let k = micro_batches.len() as f64;
        let mut sums = [0.0f64; 5];
        let mut grads_g = NamedGrads::new();
        for (batch, (fake, origins)) in micro_batches.iter().zip(&phase.fakes) {
            let parts = self.generator_loss_parts(batch, fake, origins, Mode::Train)?;
            let total = match total_g_loss(&parts) {
                Ok(t) => t,
                Err(Error::NonFinite(what)) => return Err(self.non_finite(&what, batch)),
                Err(e) => return Err(e),
            };
            for (s, v) in sums.iter_mut().zip(parts.values()?) {
                *s += v / k;
            }
            sums[4] += scalar(&total)? / k;
            let grads = total.backward()?;
            accumulate(&mut grads_g, collect_grads(self.generator.store(), &grads))?;
        }
        scale_grads(&mut grads_g, 1.0 / k)?;
        self.opt_g.step(self.generator.store(), &grads_g, lr)?;
        Ok((sums, grad_norm(&grads_g)?))
    }

    /// One critic update followed by one generator update over the given
    /// micro-batches (one entry means no accumulation).
    pub fn train_step(&mut self, micro_batches: &[Batch], lr: f64) -> Result<StepMetrics> {
        let phase = self.critic_update(micro_batches, lr)?;
        let (g, grad_norm_g) = self.generator_update(micro_batches, &phase, lr)?;
        self.iteration += 1;
        Ok(StepMetrics {
            epoch: self.epoch + 1,
            iter: self.iteration,
            lr,
            d_global: phase.d_global,
            d_local: phase.d_local,
            g_global: g[2],
            g_local: g[3],
            sfp_global: g[0],
            sfp_local: g[1],
            g_total: g[4],
            grad_norm_g,
            grad_norm_d_global: phase.grad_norm_global,
            grad_norm_d_local: phase.grad_norm_local,
        })
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut tensors = BTreeMap::new();
        let mut put = |prefix: &str, entries: Vec<(String, Tensor)>| {
            for (k, t) in entries {
                tensors.insert(format!("{prefix}{k}"), t);
            }
        };
        put(GENERATOR_PREFIX, self.generator.store().snapshot()?.into_iter().collect());
        put(CRITIC_GLOBAL_PREFIX, self.critic_global.store().snapshot()?.into_iter().collect());
        put(CRITIC_LOCAL_PREFIX, self.critic_local.store().snapshot()?.into_iter().collect());
        put("adam_generator/", self.opt_g.state(&self.device)?);
        put("adam_critic_global/", self.opt_global.state(&self.device)?);
        put("adam_critic_local/", self.opt_local.state(&self.device)?);
        Ok(Checkpoint {
            manifest: Manifest {
                format_version: FORMAT_VERSION,
                epoch: self.epoch,
                iteration: self.iteration,
                config_fingerprint: self.cfg.fingerprint(),
                generator: self.cfg.generator_config(),
                critic: self.cfg.critic_config(),
                dtype: self.cfg.dtype.clone(),
                arrays: BTreeMap::new(),
            },
            tensors,
        })
    }

    /// Resumes from a checkpoint written by a run with the same config
    /// fingerprint.
    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let current = self.cfg.fingerprint();
        if ckpt.manifest.config_fingerprint != current {
            return Err(Error::FingerprintMismatch {
                checkpoint: ckpt.manifest.config_fingerprint.clone(),
                current,
            });
        }
        ckpt.load_into(self.generator.store(), GENERATOR_PREFIX)?;
        ckpt.load_into(self.critic_global.store(), CRITIC_GLOBAL_PREFIX)?;
        ckpt.load_into(self.critic_local.store(), CRITIC_LOCAL_PREFIX)?;
        self.opt_g.load_state(&ckpt.section("adam_generator/"))?;
        self.opt_global.load_state(&ckpt.section("adam_critic_global/"))?;
        self.opt_local.load_state(&ckpt.section("adam_critic_local/"))?;
        self.epoch = ckpt.manifest.epoch;
        self.iteration = ckpt.manifest.iteration;
        Ok(())
    }

    pub fn steps_per_epoch(&self, dataset: &UnpairedDataset) -> usize {
        match self.cfg.iters_per_epoch {
            0 => dataset
                .batches_per_epoch(self.cfg.batch * self.cfg.accum_steps)
                .max(1),
            n => n,
        }
    }

    /// Runs epochs `epoch() + 1 ..= until` (clamped to the configured total),
    /// appending metrics to `metrics.jsonl` and writing checkpoints into the
    /// output directory.
    pub fn run(&mut self, dataset: &mut UnpairedDataset, until: usize) -> Result<()> {
        let out = self.cfg.out_dir.clone();
        std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        let log_path = out.join("metrics.jsonl");
        let mut log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;

        let total = self.cfg.total_epochs();
        let until = until.min(total);
        let steps = self.steps_per_epoch(dataset);
        let accum = self.cfg.accum_steps;
        let (batch, queue, dtype, device) = (self.cfg.batch, self.cfg.queue_depth, self.dtype(), self.device.clone());

        for epoch in self.epoch + 1..=until {
            let lr = lr_schedule(epoch, &self.cfg)?;
            self.patch_rng = ChaCha8Rng::seed_from_u64(stream_seed(self.cfg.seed, 4 + ((epoch as u64) << 8)));
            let mut pending = Vec::with_capacity(accum);
            dataset.stream_epoch(epoch, steps * accum, batch, dtype, &device, queue, |_, b| {
                pending.push(b);
                if pending.len() == accum {
                    let metrics = self.train_step(&pending, lr)?;
                    pending.clear();
                    let line = serde_json::to_string(&metrics)?;
                    writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
                    log::debug!("{line}");
                }
                Ok(())
            })?;
            self.epoch = epoch;
            log::info!("epoch {epoch}/{total} done (lr {lr:.3e})");
            if epoch % self.cfg.checkpoint_every == 0 || epoch == total {
                let ckpt = self.checkpoint()?;
                save_checkpoint(&out.join(format!("epoch_{epoch:04}.safetensors")), &ckpt)?;
                save_checkpoint(&out.join("latest.safetensors"), &ckpt)?;
            }
        }
        Ok(())
    }
}

fn dataset_for(cfg: &TrainConfig, low: Vec<ImageSource>) -> Result<UnpairedDataset> {
    let normal_dir = cfg
        .normal_dir
        .as_ref()
        .ok_or_else(|| Error::Config("`normal_dir` is required".into()))?;
    let normal = list_images(normal_dir)?.into_iter().map(ImageSource::from).collect();
    UnpairedDataset::new(low, normal, cfg.preprocess_config(), cfg.seed)
}

fn run_to_end(cfg: TrainConfig, mut dataset: UnpairedDataset, resume: Option<&Path>, device: &Device) -> Result<Checkpoint> {
    let mut trainer = Trainer::new(cfg, device)?;
    if let Some(path) = resume {
        trainer.restore(&load_checkpoint(path, device)?)?;
    }
    let total = trainer.config().total_epochs();
    trainer.run(&mut dataset, total)?;
    trainer.checkpoint()
}

/// Full training run on `low_dir` / `normal_dir`.
pub fn train(cfg: TrainConfig, resume: Option<&Path>, device: &Device) -> Result<Checkpoint> {
    let low_dir = cfg
        .low_dir
        .as_ref()
        .ok_or_else(|| Error::Config("`low_dir` is required".into()))?;
    let low = list_images(low_dir)?.into_iter().map(ImageSource::from).collect();
    let dataset = dataset_for(&cfg, low)?;
    run_to_end(cfg, dataset, resume, device)
}

/// Domain adaptation: the low-light side is replaced by the images of
/// `target_low_dir` darker than `cfg.low_threshold`; the normal-light side
/// stays the original corpus.
pub fn adapt(cfg: TrainConfig, target_low_dir: &Path, resume: Option<&Path>, device: &Device) -> Result<Checkpoint> {
    let candidates = list_images(target_low_dir)?;
    let report = brightness_filter(&candidates, cfg.low_threshold);
    for (path, reason) in &report.skipped {
        log::warn!("skipping {}: {reason}", path.display());
    }
    if report.kept.is_empty() {
        return Err(Error::Insufficient(format!(
            "no images in {} are darker than {}",
            target_low_dir.display(),
            cfg.low_threshold
        )));
    }
    let low = report.kept_paths().into_iter().map(ImageSource::from).collect();
    let dataset = dataset_for(&cfg, low)?;
    run_to_end(cfg, dataset, resume, device)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic;

    fn toy_config(out_dir: &Path) -> TrainConfig {
        TrainConfig {
            out_dir: out_dir.to_path_buf(),
            width: 32,
            height: 32,
            crop: 0,
            epochs_const: 2,
            epochs_decay: 2,
            lr: 1e-3,
            batch: 2,
            iters_per_epoch: 1,
            seed: 7,
            patch_count: 2,
            patch_size: 16,
            gen_channels: 4,
            gen_depth: 2,
            critic_channels: 4,
            critic_layers: 2,
            vgg_fallback_seed: Some(5),
            vgg_width_divisor: 16,
            checkpoint_every: 1,
            ..TrainConfig::default()
        }
    }

    fn toy_dataset(cfg: &TrainConfig) -> UnpairedDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut low = Vec::new();
        let mut normal = Vec::new();
        for _ in 0..3 {
            let img = synthetic::scene(&mut rng, 40, 36);
            low.push(ImageSource::from(synthetic::darken(&img, 0.25)));
            normal.push(ImageSource::from(img));
        }
        UnpairedDataset::new(low, normal, cfg.preprocess_config(), cfg.seed).unwrap()
    }

    fn toy_batch(trainer: &Trainer) -> Batch {
        let mut ds = toy_dataset(trainer.config());
        ds.next_batch(2, trainer.dtype(), &Device::Cpu).unwrap()
    }

    fn params(store: &crate::nn::ParamStore) -> Vec<Vec<f64>> {
        store
            .params()
            .values()
            .map(|v| {
                let t = v.as_tensor().flatten_all().unwrap();
                t.to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap()
            })
            .collect()
    }

    #[test]
    fn same_seed_same_metrics() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = toy_config(dir.path());
        let mut a = Trainer::new(cfg.clone(), &Device::Cpu).unwrap();
        let mut b = Trainer::new(cfg, &Device::Cpu).unwrap();
        let batch = toy_batch(&a);
        let ma = a.train_step(std::slice::from_ref(&batch), 1e-3).unwrap();
        let mb = b.train_step(std::slice::from_ref(&batch), 1e-3).unwrap();
        assert_eq!(ma, mb);
    }

    #[test]
    fn zero_head_gives_zero_sfp_at_step_zero() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = Trainer::new(toy_config(dir.path()), &Device::Cpu).unwrap();
        t.generator().zero_output_head().unwrap();
        let batch = toy_batch(&t);
        let fake = t.generator().forward(&batch.low, &batch.low_attention, Mode::Train).unwrap();
        let origins = t.sample_origins(&fake).unwrap();
        let parts = t.generator_loss_parts(&batch, &fake, &origins, Mode::Train).unwrap();
        let [sfp_global, sfp_local, ..] = parts.values().unwrap();
        assert!(sfp_global.abs() < 1e-12, "{sfp_global}");
        assert!(sfp_local.abs() < 1e-12, "{sfp_local}");
    }

    #[test]
    fn one_step_is_finite_and_moves_every_network() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = Trainer::new(toy_config(dir.path()), &Device::Cpu).unwrap();
        let before = (
            params(t.generator().store()),
            params(t.critic_global().store()),
            params(t.critic_local().store()),
        );
        let batch = toy_batch(&t);
        let m = t.train_step(&[batch], 1e-3).unwrap();
        for v in [m.d_global, m.d_local, m.g_global, m.g_local, m.sfp_global, m.sfp_local, m.g_total] {
            assert!(v.is_finite());
        }
        assert!(m.grad_norm_g > 0.0 && m.grad_norm_d_global > 0.0 && m.grad_norm_d_local > 0.0);
        assert_ne!(before.0, params(t.generator().store()));
        assert_ne!(before.1, params(t.critic_global().store()));
        assert_ne!(before.2, params(t.critic_local().store()));
        assert_eq!(t.iteration(), 1);
    }

    #[test]
    fn phases_only_touch_their_own_network() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = Trainer::new(toy_config(dir.path()), &Device::Cpu).unwrap();
        let batches = [toy_batch(&t)];
        let g0 = params(t.generator().store());
        let (dg0, dl0) = (params(t.critic_global().store()), params(t.critic_local().store()));
        let phase = t.critic_update(&batches, 1e-3).unwrap();
        assert_eq!(g0, params(t.generator().store()));
        let (dg1, dl1) = (params(t.critic_global().store()), params(t.critic_local().store()));
        assert_ne!(dg0, dg1);
        assert_ne!(dl0, dl1);
        t.generator_update(&batches, &phase, 1e-3).unwrap();
        assert_ne!(g0, params(t.generator().store()));
        assert_eq!(dg1, params(t.critic_global().store()));
        assert_eq!(dl1, params(t.critic_local().store()));
    }

    #[test]
    fn accumulating_a_repeated_batch_matches_the_single_batch() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            dtype: "f64".into(),
            ..toy_config(dir.path())
        };
        let mut a = Trainer::new(cfg.clone(), &Device::Cpu).unwrap();
        let mut b = Trainer::new(cfg, &Device::Cpu).unwrap();
        let batch = toy_batch(&a);
        let pa = a.critic_update(std::slice::from_ref(&batch), 1e-3).unwrap();
        let pb = b.critic_update(&[batch.clone(), batch], 1e-3).unwrap();
        assert!((pa.d_global - pb.d_global).abs() < 1e-12);
        assert!((pa.grad_norm_global - pb.grad_norm_global).abs() < 1e-9 * pa.grad_norm_global);
        for (x, y) in params(a.critic_global().store()).iter().zip(params(b.critic_global().store()).iter()) {
            for (p, q) in x.iter().zip(y) {
                assert!((p - q).abs() < 1e-9, "{p} vs {q}");
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = toy_config(dir.path());
        let mut t = Trainer::new(cfg.clone(), &Device::Cpu).unwrap();
        t.train_step(&[toy_batch(&t)], 1e-3).unwrap();
        let path = dir.path().join("ck.safetensors");
        save_checkpoint(&path, &t.checkpoint().unwrap()).unwrap();
        let loaded = load_checkpoint(&path, &Device::Cpu).unwrap();

        let mut u = Trainer::new(TrainConfig { seed: 7, ..cfg }, &Device::Cpu).unwrap();
        u.restore(&loaded).unwrap();
        assert_eq!(u.iteration(), 1);
        for (a, b) in [
            (t.generator().store(), u.generator().store()),
            (t.critic_global().store(), u.critic_global().store()),
            (t.critic_local().store(), u.critic_local().store()),
        ] {
            for ((na, va), (nb, vb)) in a.state().zip(b.state()) {
                assert_eq!(na, nb);
                let (va, vb) = (va.flatten_all().unwrap(), vb.flatten_all().unwrap());
                assert_eq!(va.to_vec1::<f32>().unwrap(), vb.to_vec1::<f32>().unwrap(), "{na}");
            }
        }
        let g = loaded.generator(&Device::Cpu).unwrap();
        let batch = toy_batch(&t);
        let x = t.generator().forward(&batch.low, &batch.low_attention, Mode::Eval).unwrap();
        let y = g.forward(&batch.low, &batch.low_attention, Mode::Eval).unwrap();
        assert_eq!(
            x.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            y.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn truncated_checkpoint_is_reported_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let t = Trainer::new(toy_config(dir.path()), &Device::Cpu).unwrap();
        let path = dir.path().join("ck.safetensors");
        save_checkpoint(&path, &t.checkpoint().unwrap()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        for keep in [4, 64, bytes.len() / 2, bytes.len() - 1] {
            std::fs::write(&path, &bytes[..keep]).unwrap();
            let err = load_checkpoint(&path, &Device::Cpu).unwrap_err();
            assert!(matches!(err, Error::CorruptCheckpoint(_)), "{keep}: {err}");
        }
    }

    #[test]
    fn wrong_architecture_names_the_array() {
        let dir = tempfile::tempdir().unwrap();
        let t = Trainer::new(toy_config(dir.path()), &Device::Cpu).unwrap();
        let ckpt = t.checkpoint().unwrap();
        let wider = Generator::new(
            crate::generator::GeneratorConfig {
                base_channels: 8,
                depth: 2,
            },
            DType::F32,
            &Device::Cpu,
            0,
        )
        .unwrap();
        match ckpt.load_into(wider.store(), GENERATOR_PREFIX).unwrap_err() {
            Error::ShapeMismatch { name, .. } => assert!(name.starts_with("generator/"), "{name}"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn fingerprint_mismatch_refuses_resume() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = toy_config(dir.path());
        let ckpt = Trainer::new(cfg.clone(), &Device::Cpu).unwrap().checkpoint().unwrap();
        let mut other = Trainer::new(TrainConfig { lr: 5e-4, ..cfg }, &Device::Cpu).unwrap();
        assert!(matches!(other.restore(&ckpt), Err(Error::FingerprintMismatch { .. })));
    }

    fn read_metrics(path: &Path) -> Vec<StepMetrics> {
        std::fs::read_to_string(path)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect()
    }

    #[test]
    fn resumed_run_replays_the_uninterrupted_run() {
        let full_dir = tempfile::tempdir().unwrap();
        let cfg = toy_config(full_dir.path());
        let mut full = Trainer::new(cfg.clone(), &Device::Cpu).unwrap();
        full.run(&mut toy_dataset(&cfg), 4).unwrap();
        let full_log = read_metrics(&full_dir.path().join("metrics.jsonl"));
        assert_eq!(
            full_log.iter().map(|m| m.lr).collect::<Vec<_>>(),
            vec![1e-3, 1e-3, 5e-4, 0.0]
        );

        let part_dir = tempfile::tempdir().unwrap();
        let part_cfg = TrainConfig {
            out_dir: part_dir.path().to_path_buf(),
            ..cfg.clone()
        };
        let mut first = Trainer::new(part_cfg.clone(), &Device::Cpu).unwrap();
        first.run(&mut toy_dataset(&part_cfg), 2).unwrap();
        let ckpt = load_checkpoint(&part_dir.path().join("epoch_0002.safetensors"), &Device::Cpu).unwrap();
        assert_eq!(ckpt.manifest.epoch, 2);
        let mut resumed = Trainer::new(part_cfg.clone(), &Device::Cpu).unwrap();
        resumed.restore(&ckpt).unwrap();
        resumed.run(&mut toy_dataset(&part_cfg), 4).unwrap();

        assert_eq!(read_metrics(&part_dir.path().join("metrics.jsonl")), full_log);
        assert_eq!(params(full.generator().store()), params(resumed.generator().store()));
        assert!(part_dir.path().join("latest.safetensors").exists());
    }
}
