use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use candle_core::{Device, IndexOp, Tensor};
use disentangle::data::MnistColor;
use disentangle::evaluation::REPORT_HEADER;
use disentangle::networks::{Checkpoint, DisentangleModel, ModelConfig};
use disentangle::training::{PerceptualConfig, METRICS_HEADER};
use disentangle_cli::commands::dataset_dir;
use disentangle_cli::config::{ExperimentConfig, Preset};
use disentangle_cli::generate;

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-mini")
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        image_size: 16,
        num_points: 4,
        style_dim: 8,
        sigma_render: 2.0,
        hourglass_channels: vec![8, 8],
        encoder_channels: vec![8, 16],
        ..ModelConfig::desk()
    }
}

fn tiny_config(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk();
    cfg.model = tiny_model();
    cfg.train.epochs = 2;
    cfg.train.lr_init = 1e-3;
    cfg.train.perceptual = PerceptualConfig::RandomConv {
        seed: 0,
        channels: vec![4],
    };
    cfg.data.source = fixture();
    cfg.data.train_limit = 32;
    cfg.eval.database = 64;
    cfg.eval.queries = 32;
    cfg.eval.swap_grid = 3;
    cfg.output_dir = out.join("run");
    cfg
}

struct Env {
    dir: tempfile::TempDir,
}

impl Env {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self) -> &Path {
        self.dir.path()
    }

    fn write_config(&self, name: &str, cfg: &ExperimentConfig) -> PathBuf {
        let p = self.path().join(name);
        std::fs::write(&p, cfg.to_toml()).unwrap();
        p
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_disentangle"))
            .args(args)
            .env("DISENTANGLE_CACHE", self.path().join("cache"))
            .env("RUST_LOG", "warn")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed:\n{}\n{}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn fails(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
        String::from_utf8(out.stderr).unwrap()
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn prepare_is_idempotent_and_presets_differ_only_in_mode() {
    let env = Env::new();
    let cd = tiny_config(env.path());
    let cd_path = env.write_config("cd.toml", &cd);
    assert!(env.ok(&["prepare", "--config", s(&cd_path)]).starts_with("prepared"));
    assert!(env.ok(&["prepare", "--config", s(&cd_path)]).starts_with("already up to date"));

    let mut cb = cd.clone();
    cb.data.preset = Preset::MnistCb;
    let cb_path = env.write_config("cb.toml", &cb);
    env.ok(&["prepare", "--config", s(&cb_path)]);

    std::env::set_var("DISENTANGLE_CACHE", env.path().join("cache"));
    let a = MnistColor::load(&dataset_dir(&cd)).unwrap();
    let b = MnistColor::load(&dataset_dir(&cb)).unwrap();
    assert_ne!(a.spec.mode, b.spec.mode);
    assert_eq!(a.train.len(), b.train.len());
    for i in [0, 17, 500] {
        assert_eq!(a.train.origin(i), b.train.origin(i));
        assert_eq!(a.train.color(i), b.train.color(i));
        assert_eq!(a.train.eval_view().label(i), b.train.eval_view().label(i));
        assert_ne!(a.train.image(i).unwrap(), b.train.image(i).unwrap());
    }
}

#[test]
fn prepare_reports_a_missing_source() {
    let env = Env::new();
    let mut cfg = tiny_config(env.path());
    cfg.data.source = env.path().join("nowhere");
    let path = env.write_config("c.toml", &cfg);
    let err = env.fails(&["prepare", "--config", s(&path)]);
    assert!(err.contains("nowhere"), "{err}");
}

#[test]
fn unknown_config_keys_are_all_listed() {
    let env = Env::new();
    let text = tiny_config(env.path())
        .to_toml()
        .replace("[model]\n", "[model]\nnum_pionts = 4\n")
        .replace("[eval]\n", "[eval]\nrecal = 1\n");
    let path = env.path().join("bad.toml");
    std::fs::write(&path, text).unwrap();
    let err = env.fails(&["train", "--config", s(&path)]);
    assert!(err.contains("model.num_pionts") && err.contains("eval.recal"), "{err}");
}

#[test]
fn train_needs_a_prepared_dataset() {
    let env = Env::new();
    let path = env.write_config("c.toml", &tiny_config(env.path()));
    let err = env.fails(&["train", "--config", s(&path)]);
    assert!(err.contains("disentangle prepare"), "{err}");
}

#[test]
fn end_to_end_pipeline() {
    let env = Env::new();
    let cfg = tiny_config(env.path());
    let cfg_path = env.write_config("c.toml", &cfg);
    let c = s(&cfg_path);
    env.ok(&["prepare", "--config", c]);

    let stdout = env.ok(&["train", "--config", c, "--deterministic"]);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("epoch")).count(), 2, "{stdout}");
    let run = &cfg.output_dir;
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next().unwrap(), METRICS_HEADER);
    assert_eq!(metrics.lines().count(), 1 + 8);
    let stamped = std::fs::read_to_string(run.join("config.digest")).unwrap();
    let ckpt_path = run.join("latest.safetensors");
    let ckpt = Checkpoint::load(&ckpt_path).unwrap();
    assert_eq!(ckpt.extra["experiment_config_digest"], stamped.trim());
    let model_digest = ckpt.build_model().unwrap().digest().unwrap();

    let figs = env.path().join("figs");
    for mode in ["swap-grid", "interpolate-style", "interpolate-content", "overlay"] {
        env.ok(&["generate", "--config", c, "--checkpoint", s(&ckpt_path), "--mode", mode, "--images", "0,1,2", "--out", s(&figs)]);
        let img = image::open(figs.join(format!("{mode}.png"))).unwrap();
        let expected = match mode {
            "swap-grid" => (64, 64),
            "interpolate-style" | "interpolate-content" => (160, 16),
            _ => (48, 16),
        };
        assert_eq!((img.width(), img.height()), expected, "{mode}");
        let side: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(figs.join(format!("{mode}.json"))).unwrap()).unwrap();
        assert_eq!(side["config_digest"], stamped.trim());
        assert_eq!(side["model_digest"], model_digest.as_str());
    }

    let eval_out = env.path().join("eval");
    let summary = env.ok(&[
        "evaluate", "--config", c, "--checkpoint", s(&ckpt_path), "--out", s(&eval_out),
        "--metric", "retrieval", "--metric", "ssim", "--metric", "swap", "--metric", "landmark-error", "--metric", "classifier-score",
    ]);
    assert!(summary.contains("landmark-error") && summary.contains("skipped"), "{summary}");
    assert!(summary.contains("classifier-score"), "{summary}");
    let report = std::fs::read_to_string(eval_out.join("report.csv")).unwrap();
    let mut lines = report.lines();
    assert_eq!(lines.next().unwrap(), REPORT_HEADER);
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    let names: Vec<&str> = rows.iter().map(|r| r[0]).collect();
    for m in ["recall@1/pixel", "recall@1/content", "recall@1/style", "ssim/reconstruction", "style-similarity/identity", "content-similarity/model"] {
        assert!(names.contains(&m), "{m} missing from {names:?}");
    }
    for r in &rows {
        assert_eq!(r[3], model_digest);
        assert_eq!(r[4], stamped.trim());
    }
    let ssim: f64 = rows.iter().find(|r| r[0] == "ssim/reconstruction").unwrap()[1].parse().unwrap();
    assert!((-1.0..=1.0).contains(&ssim) && ssim > 0.0, "{ssim}");
}

#[test]
fn resume_continues_a_run_bit_exactly() {
    let env = Env::new();
    let cfg = tiny_config(env.path());
    let cfg_path = env.write_config("c.toml", &cfg);
    let c = s(&cfg_path);
    env.ok(&["prepare", "--config", c]);
    let full = env.path().join("full");
    env.ok(&["train", "--config", c, "--out", s(&full)]);

    let resumed = env.path().join("resumed");
    std::fs::create_dir_all(&resumed).unwrap();
    std::fs::copy(full.join("epoch-0001.safetensors"), resumed.join("start.safetensors")).unwrap();
    let out = env.ok(&["train", "--config", c, "--out", s(&resumed), "--checkpoint", s(&resumed.join("start.safetensors"))]);
    assert_eq!(out.lines().filter(|l| l.starts_with("epoch")).count(), 1);

    let a = Checkpoint::load(&full.join("latest.safetensors")).unwrap().build_model().unwrap();
    let b = Checkpoint::load(&resumed.join("latest.safetensors")).unwrap().build_model().unwrap();
    assert_eq!(a.digest().unwrap(), b.digest().unwrap());
    let tail = |p: &Path| std::fs::read_to_string(p.join("metrics.csv")).unwrap().lines().skip(5).map(String::from).collect::<Vec<_>>();
    assert_eq!(tail(&full), std::fs::read_to_string(resumed.join("metrics.csv")).unwrap().lines().skip(1).map(String::from).collect::<Vec<_>>());
    assert_eq!(tail(&full).len(), 4);
}

#[test]
fn mismatched_checkpoints_and_run_directories_are_refused() {
    let env = Env::new();
    let cfg = tiny_config(env.path());
    let cfg_path = env.write_config("c.toml", &cfg);
    let c = s(&cfg_path);
    env.ok(&["prepare", "--config", c]);
    env.ok(&["train", "--config", c]);
    let ckpt = cfg.output_dir.join("latest.safetensors");

    let mut other = cfg.clone();
    other.model.num_points = 5;
    let other_path = env.write_config("o.toml", &other);
    let err = env.fails(&["generate", "--config", s(&other_path), "--checkpoint", s(&ckpt), "--out", s(env.path())]);
    assert!(err.contains("digest"), "{err}");

    // Same run directory, different config.
    let mut seeded = cfg.clone();
    seeded.train.seed = 9;
    let seeded_path = env.write_config("s.toml", &seeded);
    let err = env.fails(&["train", "--config", s(&seeded_path)]);
    assert!(err.contains(&cfg.digest()) && err.contains(&seeded.digest()), "{err}");

    // An ablation is a different experiment too.
    let err = env.fails(&["train", "--config", c, "--ablation", "no-kl"]);
    assert!(err.contains("digest"), "{err}");
    env.ok(&["train", "--config", c, "--ablation", "no-kl", "--out", s(&env.path().join("nokl"))]);
    let stamped: ExperimentConfig = toml::from_str(&std::fs::read_to_string(env.path().join("nokl/config.toml")).unwrap()).unwrap();
    assert!(!stamped.train.use_kl);
}

fn random_images(n: usize, seed: u64) -> Tensor {
    let v: Vec<f32> = (0..n * 3 * 16 * 16).map(|i| ((i as f32 * 0.618 + seed as f32) * 12.9898).sin()).collect();
    Tensor::from_vec(v, (n, 3, 16, 16), &Device::Cpu).unwrap()
}

fn bits(t: &Tensor) -> Vec<u32> {
    t.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn interpolation_endpoints_and_midpoint() {
    let model = DisentangleModel::new(tiny_model(), 3).unwrap();
    let x = random_images(2, 0);
    let (a, b) = (x.i(0..1).unwrap(), x.i(1..2).unwrap());

    let style = generate::interpolate_style(&model, &a, &b, 2).unwrap();
    assert_eq!(bits(&style[0]), bits(&model.reconstruct(&a).unwrap().i(0).unwrap()));
    assert_eq!(bits(&style[1]), bits(&model.swap(&a, &b).unwrap().i(0).unwrap()));

    let content = generate::interpolate_content(&model, &a, &b, 2).unwrap();
    assert_eq!(bits(&content[0]), bits(&model.reconstruct(&a).unwrap().i(0).unwrap()));
    let pb = model.bottleneck(&b).unwrap().landmarks;
    let za = model.style_encoder(&a).unwrap();
    assert_eq!(bits(&content[1]), bits(&model.decode_landmarks(&pb, &za).unwrap().i(0).unwrap()));

    let three = generate::interpolate_style(&model, &a, &b, 3).unwrap();
    let zb = model.style_encoder(&b).unwrap();
    let mid = ((&za + &zb).unwrap() / 2.0).unwrap();
    let code = model.content_encoder(&model.bottleneck(&a).unwrap().structure).unwrap();
    let manual = model.decoder(&code.embedding, &mid, &code.skips).unwrap();
    assert_eq!(bits(&three[1]), bits(&manual.i(0).unwrap()));

    assert_eq!(generate::interpolate_style(&model, &a, &b, 10).unwrap().len(), 10);
    assert!(generate::interpolate_style(&model, &a, &b, 1).is_err());
    assert!(generate::interpolate_content(&model, &x, &b, 3).is_err());
}

#[test]
fn swap_grid_diagonal_holds_the_reconstructions() {
    let model = DisentangleModel::new(tiny_model(), 5).unwrap();
    let x = random_images(3, 1);
    let grid = generate::swap_grid(&model, &x, &x).unwrap();
    for i in 0..3 {
        let recon = model.reconstruct(&x.i(i..i + 1).unwrap()).unwrap();
        assert_eq!(bits(&grid[i][i]), bits(&recon.i(0).unwrap()));
    }
    let img = generate::swap_grid_image(&model, &x, &x.i(0..2).unwrap()).unwrap();
    assert_eq!((img.width(), img.height()), (4 * 16, 3 * 16));
    assert_eq!(*img.get_pixel(0, 0), image::Rgb([255, 255, 255]));
    assert_eq!(img.get_pixel(16, 0), generate::to_rgb(&x.i(0).unwrap()).unwrap().get_pixel(0, 0));
}

#[test]
fn overlay_marks_the_landmark_pixels() {
    let img = image::RgbImage::new(16, 16);
    let marked = generate::overlay(&img, &[[-1.0, -1.0], [0.0, 1.0]]);
    assert_eq!(*marked.get_pixel(0, 0), image::Rgb([230, 25, 75]));
    assert_eq!(*marked.get_pixel(15, 8), image::Rgb([60, 180, 75]));
    assert_eq!(*marked.get_pixel(8, 8), image::Rgb([0, 0, 0]));
}

#[test]
fn shipped_desk_config_matches_the_builtin_preset() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    let shipped = ExperimentConfig::load(&path).unwrap();
    assert_eq!(shipped, ExperimentConfig::desk());
    assert_eq!(shipped.digest(), ExperimentConfig::desk().digest());
}
