use std::collections::BTreeSet;
use std::fmt::Display;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::Device;
use enlighten::baselines::{ahe, AheConfig};
use enlighten::data::{brightness_filter, list_images, load_rgb, read_exclude_list};
use enlighten::generator::Generator;
use enlighten::niqe::{fit_pristine_model_from_paths, niqe_score, NiqeModel};
use enlighten::trainer::{self, load_checkpoint, TrainConfig};
use enlighten::Image;
use image::imageops::{self, FilterType};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::Method;

pub const USER_ERROR: u8 = 1;
pub const INTERNAL_ERROR: u8 = 2;

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    fn user(message: impl Display) -> Self {
        Self {
            code: USER_ERROR,
            message: message.to_string(),
        }
    }

    fn internal(message: impl Display) -> Self {
        Self {
            code: INTERNAL_ERROR,
            message: message.to_string(),
        }
    }
}

impl From<enlighten::Error> for Failure {
    fn from(e: enlighten::Error) -> Self {
        if e.is_user_error() {
            Self::user(e)
        } else {
            Self::internal(e)
        }
    }
}

type CmdResult = Result<(), Failure>;

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::user(format!("{}: {e}", path.display()))
}

fn create_dir(path: &Path) -> CmdResult {
    fs::create_dir_all(path).map_err(|e| io_failure(path, e))
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool, Failure> {
    if jobs == 0 {
        return Err(Failure::user("--jobs must be at least 1"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(Failure::internal)
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn png_name(path: &Path) -> String {
    let stem = path.file_stem().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    format!("{stem}.png")
}

fn parse_size(text: &str) -> Result<(u32, u32), Failure> {
    let bad = || Failure::user(format!("size `{text}` is not WIDTHxHEIGHT"));
    let (w, h) = text.split_once(['x', 'X']).ok_or_else(bad)?;
    let w: u32 = w.trim().parse().map_err(|_| bad())?;
    let h: u32 = h.trim().parse().map_err(|_| bad())?;
    if w == 0 || h == 0 {
        return Err(bad());
    }
    Ok((w, h))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub source: String,
    pub output: String,
    pub mean_intensity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub low_threshold: f64,
    pub size: Option<(u32, u32)>,
    /// Written to `trainA/`.
    pub low: Vec<ManifestEntry>,
    /// Written to `trainB/`.
    pub normal: Vec<ManifestEntry>,
    pub excluded: Vec<String>,
    pub skipped: Vec<(String, String)>,
}

pub fn prepare_data(src: &Path, out: &Path, low_threshold: f64, exclude: Option<&Path>, size: Option<&str>) -> CmdResult {
    if !low_threshold.is_finite() {
        return Err(Failure::user("--low-threshold must be finite"));
    }
    let size = size.map(parse_size).transpose()?;
    let excluded_names: BTreeSet<String> = match exclude {
        Some(p) => read_exclude_list(p)?,
        None => BTreeSet::new(),
    };
    let all = list_images(src)?;
    let (excluded, paths): (Vec<PathBuf>, Vec<PathBuf>) =
        all.into_iter().partition(|p| excluded_names.contains(&file_name(p)));
    let report = brightness_filter(&paths, low_threshold);

    let write_side = |entries: &[(PathBuf, f64)], dir: &str| -> Result<Vec<ManifestEntry>, Failure> {
        let dir_path = out.join(dir);
        create_dir(&dir_path)?;
        let mut seen = BTreeSet::new();
        let mut rows = Vec::with_capacity(entries.len());
        for (path, mean) in entries {
            let name = png_name(path);
            if !seen.insert(name.clone()) {
                return Err(Failure::user(format!("two inputs map to {dir}/{name}")));
            }
            let img = load_rgb(path)?;
            let img = match size {
                Some((w, h)) if (img.width(), img.height()) != (w, h) => {
                    imageops::resize(&img, w, h, FilterType::Triangle)
                }
                _ => img,
            };
            let target = dir_path.join(&name);
            img.save(&target).map_err(|e| Failure::user(format!("{}: {e}", target.display())))?;
            rows.push(ManifestEntry {
                source: file_name(path),
                output: format!("{dir}/{name}"),
                mean_intensity: *mean,
            });
        }
        Ok(rows)
    };
    let low = write_side(&report.kept, "trainA")?;
    let normal = write_side(&report.rejected, "trainB")?;
    for (path, reason) in &report.skipped {
        log::warn!("skipping {}: {reason}", path.display());
    }

    let manifest = Manifest {
        low_threshold,
        size,
        low,
        normal,
        excluded: excluded.iter().map(|p| file_name(p)).collect(),
        skipped: report.skipped.iter().map(|(p, r)| (file_name(p), r.clone())).collect(),
    };
    let manifest_path = out.join(MANIFEST_NAME);
    let text = serde_json::to_string_pretty(&manifest).map_err(Failure::internal)?;
    fs::write(&manifest_path, text + "\n").map_err(|e| io_failure(&manifest_path, e))?;
    log::info!(
        "{} low-light, {} normal-light, {} excluded, {} skipped",
        manifest.low.len(),
        manifest.normal.len(),
        manifest.excluded.len(),
        manifest.skipped.len()
    );
    if manifest.low.is_empty() && manifest.normal.is_empty() {
        return Err(Failure::user(format!("no usable images in {}", src.display())));
    }
    Ok(())
}

pub fn train(config: &Path, target_low_dir: Option<&Path>, resume: Option<&Path>, seed: Option<u64>) -> CmdResult {
    let mut cfg = TrainConfig::from_file(config)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
        cfg.validate()?;
    }
    let device = Device::Cpu;
    let ckpt = match target_low_dir {
        Some(dir) => trainer::adapt(cfg.clone(), dir, resume, &device)?,
        None => trainer::train(cfg.clone(), resume, &device)?,
    };
    log::info!(
        "finished at epoch {} (iteration {}); checkpoints in {}",
        ckpt.manifest.epoch,
        ckpt.manifest.iteration,
        cfg.out_dir.display()
    );
    Ok(())
}

enum Enhancer {
    Gan(Generator),
    Ahe(AheConfig),
}

impl Enhancer {
    fn apply(&self, img: &image::RgbImage) -> enlighten::Result<image::RgbImage> {
        match self {
            Enhancer::Gan(g) => Ok(g.enhance(&Image::from_rgb8(img))?.to_rgb8()),
            Enhancer::Ahe(cfg) => ahe(img, cfg),
        }
    }
}

pub fn enhance(
    input: &Path,
    output: &Path,
    method: Method,
    checkpoint: Option<&Path>,
    jobs: usize,
    ahe_cfg: AheConfig,
) -> CmdResult {
    let enhancer = match method {
        Method::Gan => {
            let path = checkpoint.ok_or_else(|| Failure::user("--checkpoint is required for --method gan"))?;
            let device = Device::Cpu;
            Enhancer::Gan(load_checkpoint(path, &device)?.generator(&device)?)
        }
        Method::Ahe => Enhancer::Ahe(ahe_cfg),
    };
    let paths = list_images(input)?;
    create_dir(output)?;
    let pool = thread_pool(jobs)?;
    let failures: Vec<String> = pool.install(|| {
        paths
            .par_iter()
            .filter_map(|path| {
                let target = output.join(png_name(path));
                let result = load_rgb(path)
                    .and_then(|img| enhancer.apply(&img))
                    .and_then(|out| out.save(&target).map_err(enlighten::Error::from));
                result.err().map(|e| format!("{}: {e}", path.display()))
            })
            .collect()
    });
    for f in &failures {
        log::error!("{f}");
    }
    log::info!("enhanced {} of {} images into {}", paths.len() - failures.len(), paths.len(), output.display());
    if !failures.is_empty() {
        return Err(Failure::user(format!("{} images failed", failures.len())));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ReportRow {
    Score { file: String, niqe: f64 },
    Skipped { file: String, skipped: String },
    Summary { summary: Summary },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub scored: usize,
    pub skipped: usize,
    pub mean: Option<f64>,
}

pub fn evaluate_niqe(dir: &Path, model: &Path, report: Option<&Path>, jobs: usize) -> CmdResult {
    let model = NiqeModel::load(model)?;
    let paths = list_images(dir)?;
    let pool = thread_pool(jobs)?;
    let rows: Vec<ReportRow> = pool.install(|| {
        paths
            .par_iter()
            .map(|path| {
                let file = file_name(path);
                let score = load_rgb(path).and_then(|img| niqe_score(&Image::from_rgb8(&img), &model));
                match score {
                    Ok(niqe) => ReportRow::Score { file, niqe },
                    Err(e) => {
                        log::warn!("skipping {}: {e}", path.display());
                        ReportRow::Skipped {
                            file,
                            skipped: e.to_string(),
                        }
                    }
                }
            })
            .collect()
    });
    let scores: Vec<f64> = rows
        .iter()
        .filter_map(|r| match r {
            ReportRow::Score { niqe, .. } => Some(*niqe),
            _ => None,
        })
        .collect();
    let summary = Summary {
        scored: scores.len(),
        skipped: rows.len() - scores.len(),
        mean: (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64),
    };

    let mut text = String::new();
    for row in rows.iter().chain(std::iter::once(&ReportRow::Summary { summary })) {
        text.push_str(&serde_json::to_string(row).map_err(Failure::internal)?);
        text.push('\n');
    }
    match report {
        Some(path) => fs::write(path, text).map_err(|e| io_failure(path, e)),
        None => std::io::stdout().write_all(text.as_bytes()).map_err(Failure::internal),
    }
}

pub fn fit_niqe(dir: &Path, output: &Path) -> CmdResult {
    let paths = list_images(dir)?;
    let model = fit_pristine_model_from_paths(&paths)?;
    model.save(output)?;
    log::info!(
        "fitted on {} images ({} patches), saved to {}",
        model.metadata.images,
        model.metadata.patches,
        output.display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_parse() {
        assert_eq!(parse_size("600x400").unwrap(), (600, 400));
        assert_eq!(parse_size("32X16").unwrap(), (32, 16));
        for bad in ["600", "0x4", "ax4", "4x"] {
            assert_eq!(parse_size(bad).unwrap_err().code, USER_ERROR);
        }
    }

    #[test]
    fn output_names_become_png() {
        assert_eq!(png_name(Path::new("a/b/photo.JPG")), "photo.png");
        assert_eq!(png_name(Path::new("x.png")), "x.png");
    }
}
