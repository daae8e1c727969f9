use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use candle_core::Device;
use enlighten::synthetic;
use enlighten::trainer::load_checkpoint;
use image::{Rgb, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_enlighten"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_scenes(dir: &Path, prefix: &str, n: u64, size: u32, dark: bool) -> Vec<PathBuf> {
    fs::create_dir_all(dir).unwrap();
    (0..n)
        .map(|i| {
            let img = synthetic::scene(&mut ChaCha8Rng::seed_from_u64(i + 100 * dark as u64), size, size);
            let img = if dark { synthetic::darken(&img, 0.2) } else { img };
            let path = dir.join(format!("{prefix}{i}.png"));
            img.save(&path).unwrap();
            path
        })
        .collect()
}

fn toy_config(dir: &Path, low: &Path, normal: &Path, out: &Path) -> PathBuf {
    let text = format!(
        r#"low_dir = "{}"
normal_dir = "{}"
out_dir = "{}"
width = 32
height = 32
crop = 0
epochs_const = 1
epochs_decay = 1
lr = 1e-3
batch = 2
iters_per_epoch = 1
seed = 3
patch_count = 2
patch_size = 16
gen_channels = 4
gen_depth = 2
critic_channels = 4
critic_layers = 2
vgg_fallback_seed = 5
vgg_width_divisor = 16
checkpoint_every = 1
"#,
        p(low),
        p(normal),
        p(out)
    );
    let path = dir.join("toy.toml");
    fs::write(&path, text).unwrap();
    path
}

fn json_lines(text: &str) -> Vec<Value> {
    text.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn prepare_data_splits_by_brightness_and_is_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("src");
    fs::create_dir_all(&src).unwrap();
    RgbImage::from_pixel(30, 20, Rgb([44; 3])).save(src.join("dim.png")).unwrap();
    RgbImage::from_pixel(30, 20, Rgb([200; 3])).save(src.join("day.jpg")).unwrap();
    fs::write(src.join("notes.txt"), "not an image").unwrap();
    let out = tmp.path().join("out");

    let first = run(&["prepare-data", p(&src), p(&out), "--resize", "64x48"]);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let manifest_path = out.join("manifest.json");
    let manifest: Value = serde_json::from_str(&fs::read_to_string(&manifest_path).unwrap()).unwrap();
    assert_eq!(manifest["low"].as_array().unwrap().len(), 1);
    assert_eq!(manifest["normal"].as_array().unwrap().len(), 1);
    assert_eq!(manifest["low"][0]["output"], "trainA/dim.png");
    assert_eq!(manifest["normal"][0]["output"], "trainB/day.png");
    let low = image::open(out.join("trainA/dim.png")).unwrap();
    assert_eq!((low.width(), low.height()), (64, 48));

    let before = fs::read(&manifest_path).unwrap();
    assert!(run(&["prepare-data", p(&src), p(&out), "--resize", "64x48"]).status.success());
    assert_eq!(fs::read(&manifest_path).unwrap(), before);
}

#[test]
fn prepare_data_honours_exclude_list_and_threshold() {
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("src");
    fs::create_dir_all(&src).unwrap();
    for (name, v) in [("a.png", 30u8), ("b.png", 30), ("c.png", 60)] {
        RgbImage::from_pixel(8, 8, Rgb([v; 3])).save(src.join(name)).unwrap();
    }
    let exclude = tmp.path().join("exclude.txt");
    fs::write(&exclude, "# medium brightness\nb.png\n").unwrap();
    let out = tmp.path().join("out");
    let status = run(&[
        "prepare-data",
        p(&src),
        p(&out),
        "--keep-size",
        "--low-threshold",
        "61",
        "--exclude",
        p(&exclude),
    ]);
    assert!(status.status.success());
    let manifest: Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["low"].as_array().unwrap().len(), 2);
    assert_eq!(manifest["normal"].as_array().unwrap().len(), 0);
    assert_eq!(manifest["excluded"], serde_json::json!(["b.png"]));
}

#[test]
fn prepare_data_on_an_empty_dir_writes_an_empty_manifest_and_warns() {
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("empty");
    fs::create_dir_all(&src).unwrap();
    let out = tmp.path().join("out");
    let res = run(&["prepare-data", p(&src), p(&out)]);
    assert_eq!(res.status.code(), Some(1));
    let manifest: Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert!(manifest["low"].as_array().unwrap().is_empty());
    assert!(manifest["normal"].as_array().unwrap().is_empty());
}

#[test]
fn unreadable_source_dir_is_a_user_error() {
    let tmp = tempfile::tempdir().unwrap();
    let res = run(&["prepare-data", p(&tmp.path().join("missing")), p(&tmp.path().join("out"))]);
    assert_eq!(res.status.code(), Some(1));
    assert!(!res.stderr.is_empty());
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(run(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(run(&["enhance", "a", "b", "--method", "sharpen"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn enhance_ahe_writes_one_png_per_input() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("in");
    let inputs = write_scenes(&input, "dark", 3, 40, true);
    let output = tmp.path().join("out");
    let res = run(&["enhance", p(&input), p(&output), "--method", "ahe", "--jobs", "2"]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    for path in inputs {
        let out = image::open(output.join(path.file_name().unwrap())).unwrap();
        assert_eq!((out.width(), out.height()), (40, 40));
    }
    assert_eq!(fs::read_dir(&output).unwrap().count(), 3);
}

#[test]
fn enhance_gan_without_checkpoint_is_a_user_error() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("in");
    write_scenes(&input, "x", 1, 16, true);
    let res = run(&["enhance", p(&input), p(&tmp.path().join("out")), "--method", "gan"]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("--checkpoint"));
}

#[test]
fn enhance_reports_files_that_fail() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("in");
    write_scenes(&input, "ok", 2, 24, true);
    fs::write(input.join("broken.png"), b"not a png").unwrap();
    let output = tmp.path().join("out");
    let res = run(&["enhance", p(&input), p(&output), "--method", "ahe"]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("broken.png"));
    assert_eq!(fs::read_dir(&output).unwrap().count(), 2);
}

#[test]
fn config_errors_name_the_bad_key() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "widht = 32\n").unwrap();
    let res = run(&["train", p(&cfg)]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("widht"));
}

#[test]
fn train_resume_and_enhance_with_the_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let low = tmp.path().join("trainA");
    let normal = tmp.path().join("trainB");
    write_scenes(&low, "low", 3, 32, true);
    write_scenes(&normal, "normal", 3, 32, false);
    let out = tmp.path().join("run");
    let cfg = toy_config(tmp.path(), &low, &normal, &out);

    let res = run(&["train", p(&cfg)]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let latest = load_checkpoint(&out.join("latest.safetensors"), &Device::Cpu).unwrap();
    assert_eq!(latest.manifest.epoch, 2);

    let resumed_dir = tmp.path().join("resumed");
    fs::create_dir_all(&resumed_dir).unwrap();
    let resumed_cfg = toy_config(&resumed_dir, &low, &normal, &resumed_dir.join("run"));
    let first_epoch = out.join("epoch_0001.safetensors");
    let res = run(&["train", p(&resumed_cfg), "--resume", p(&first_epoch)]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let metrics = fs::read_to_string(resumed_dir.join("run/metrics.jsonl")).unwrap();
    let rows = json_lines(&metrics);
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0]["epoch"], 2);
    let original = json_lines(&fs::read_to_string(out.join("metrics.jsonl")).unwrap());
    assert_eq!(rows[0], original[1]);

    let input = tmp.path().join("test");
    let inputs = write_scenes(&input, "t", 2, 20, true);
    let enhanced = tmp.path().join("enhanced");
    let res = run(&[
        "enhance",
        p(&input),
        p(&enhanced),
        "--checkpoint",
        p(&out.join("latest.safetensors")),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    for path in inputs {
        let img = image::open(enhanced.join(path.file_name().unwrap())).unwrap();
        assert_eq!((img.width(), img.height()), (20, 20));
    }
}

#[test]
fn adapt_with_no_dark_targets_fails_explicitly() {
    let tmp = tempfile::tempdir().unwrap();
    let low = tmp.path().join("trainA");
    let normal = tmp.path().join("trainB");
    write_scenes(&low, "low", 2, 32, true);
    write_scenes(&normal, "normal", 2, 32, false);
    let cfg = toy_config(tmp.path(), &low, &normal, &tmp.path().join("run"));
    let target = tmp.path().join("target");
    fs::create_dir_all(&target).unwrap();
    let res = run(&["adapt", p(&cfg), p(&target)]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("darker"));
}

#[test]
fn niqe_fit_and_evaluate_report() {
    let tmp = tempfile::tempdir().unwrap();
    let pristine = tmp.path().join("pristine");
    write_scenes(&pristine, "p", 10, 192, false);
    let model = tmp.path().join("model.json");
    let res = run(&["fit-niqe", p(&pristine), p(&model)]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));

    let test = tmp.path().join("test");
    write_scenes(&test, "t", 3, 100, true);
    RgbImage::from_pixel(50, 50, Rgb([9; 3])).save(test.join("tiny.png")).unwrap();
    let report = tmp.path().join("report.jsonl");
    let res = run(&["evaluate-niqe", p(&test), "--model", p(&model), "--report", p(&report), "--jobs", "2"]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let text = fs::read_to_string(&report).unwrap();
    let rows = json_lines(&text);
    assert_eq!(rows.len(), 5);
    let scores: Vec<f64> = rows.iter().filter_map(|r| r["niqe"].as_f64()).collect();
    assert_eq!(scores.len(), 3);
    assert_eq!(rows[3]["file"], "tiny.png");
    assert!(rows[3]["skipped"].is_string());
    let summary = &rows[4]["summary"];
    assert_eq!(summary["scored"], 3);
    assert_eq!(summary["skipped"], 1);
    let mean = scores.iter().sum::<f64>() / 3.0;
    assert!((summary["mean"].as_f64().unwrap() - mean).abs() < 1e-12);

    let stdout = run(&["evaluate-niqe", p(&test), "--model", p(&model)]);
    assert!(stdout.status.success());
    assert_eq!(String::from_utf8(stdout.stdout).unwrap(), text);
}
