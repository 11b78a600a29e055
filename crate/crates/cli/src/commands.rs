use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use candle_core::{Device, Tensor};
use disentangle::data::{cache_root, make_mnist_color, MnistColor, Prepared};
use disentangle::evaluation::{
    embedding_index, recall_at_k, ssim, swap_consistency, MetricReport, ModelBranch, ModelFeatures, Representation,
    EVAL_BATCH,
};
use disentangle::losses::IdentityFeatures;
use disentangle::networks::{Checkpoint, DisentangleModel};
use disentangle::training::{StepRecord, Trainer, LATEST_CHECKPOINT};
use serde::Serialize;

use crate::config::{digest_json, ExperimentConfig, Metric};
use crate::generate;

/// Where `prepare` materializes the dataset of `cfg`.
pub fn dataset_dir(cfg: &ExperimentConfig) -> PathBuf {
    cache_root().join(format!(
        "{}-{}px-seed{}",
        cfg.data.preset.name(),
        cfg.model.image_size,
        cfg.data.seed
    ))
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let built = make_mnist_color(&cfg.data.source, &cfg.data.colorize_spec(), cfg.model.image_size)?;
    let prepared = built.save(&dataset_dir(cfg))?;
    Ok(prepared)
}

/// Loads the prepared dataset, failing with a hint when `prepare` has not run.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<MnistColor> {
    let dir = dataset_dir(cfg);
    let data = MnistColor::load(&dir)
        .with_context(|| format!("dataset for this config is not prepared in {}; run `disentangle prepare` first", dir.display()))?;
    if data.spec != cfg.data.colorize_spec() || data.train.image_size() != cfg.model.image_size {
        bail!("dataset in {} was prepared with different settings; run `disentangle prepare` again", dir.display());
    }
    Ok(data)
}

pub const CONFIG_FILE: &str = "config.toml";
pub const DIGEST_FILE: &str = "config.digest";
pub const CONFIG_DIGEST_KEY: &str = "experiment_config_digest";

/// Writes the config and its digest into `out`, refusing to mix runs.
fn stamp_output(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let digest = cfg.digest();
    if let Ok(old) = std::fs::read_to_string(out.join(DIGEST_FILE)) {
        if old.trim() != digest {
            bail!(
                "{} holds a run with config digest {}, but this config has digest {digest}",
                out.display(),
                old.trim()
            );
        }
    }
    std::fs::write(out.join(CONFIG_FILE), cfg.to_toml())?;
    std::fs::write(out.join(DIGEST_FILE), format!("{digest}\n"))?;
    Ok(())
}

/// Per-epoch means of the logged loss components.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub prior: f64,
    pub recon_l1: f64,
    pub recon_perceptual: f64,
    pub kl: f64,
    pub total: f64,
}

impl std::fmt::Display for EpochSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "epoch {:>3}  steps {:>5}  prior {:.4}  l1 {:.4}  perceptual {:.4}  kl {:.4}  total {:.4}",
            self.epoch + 1,
            self.steps,
            self.prior,
            self.recon_l1,
            self.recon_perceptual,
            self.kl,
            self.total
        )
    }
}

fn summarize(records: &[StepRecord]) -> Vec<EpochSummary> {
    let mut out: Vec<EpochSummary> = Vec::new();
    for r in records {
        if out.last().is_none_or(|s| s.epoch != r.epoch) {
            out.push(EpochSummary {
                epoch: r.epoch,
                steps: 0,
                prior: 0.0,
                recon_l1: 0.0,
                recon_perceptual: 0.0,
                kl: 0.0,
                total: 0.0,
            });
        }
        let s = out.last_mut().expect("just pushed");
        s.steps += 1;
        s.prior += r.loss.prior;
        s.recon_l1 += r.loss.recon_l1;
        s.recon_perceptual += r.loss.recon_perceptual;
        s.kl += r.loss.kl;
        s.total += r.loss.total;
    }
    for s in &mut out {
        let n = s.steps as f64;
        s.prior /= n;
        s.recon_l1 /= n;
        s.recon_perceptual /= n;
        s.kl /= n;
        s.total /= n;
    }
    out
}

pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub epochs: Vec<EpochSummary>,
}

/// Trains into `out`, resuming from `resume` when given. Epoch summaries go
/// to `report` as each epoch ends.
pub fn train(
    cfg: &ExperimentConfig,
    out: &Path,
    resume: Option<&Path>,
    report: &mut dyn FnMut(&EpochSummary),
) -> Result<TrainOutcome> {
    let data = load_dataset(cfg)?;
    let train_set = match cfg.data.train_limit {
        0 => data.train,
        n => data.train.truncated(n),
    };
    stamp_output(cfg, out)?;
    let mut trainer = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            check_model_config(&ckpt, cfg)?;
            if let Some(d) = ckpt.extra.get(CONFIG_DIGEST_KEY) {
                ensure!(
                    *d == cfg.digest(),
                    "checkpoint {} was trained under config digest {d}, but this config has digest {}",
                    path.display(),
                    cfg.digest()
                );
            }
            Trainer::from_checkpoint(&ckpt, cfg.train.clone())?
        }
        None => Trainer::new(cfg.model.clone(), cfg.train.clone())?,
    };
    trainer.annotate(CONFIG_DIGEST_KEY, cfg.digest());

    let mut pending: Vec<StepRecord> = Vec::new();
    let summary = trainer.fit(&train_set, Some(out), &mut |r| {
        if pending.last().is_some_and(|p| p.epoch != r.epoch) {
            summarize(&pending).iter().for_each(|s| report(s));
            pending.clear();
        }
        pending.push(*r);
    })?;
    summarize(&pending).iter().for_each(|s| report(s));
    Ok(TrainOutcome {
        checkpoint: summary.last_checkpoint.unwrap_or_else(|| out.join(LATEST_CHECKPOINT)),
        epochs: summarize(&summary.records),
    })
}

fn check_model_config(ckpt: &Checkpoint, cfg: &ExperimentConfig) -> Result<()> {
    let (have, want) = (digest_json(&ckpt.model_config), digest_json(&cfg.model));
    ensure!(
        have == want,
        "checkpoint model config (digest {have}) does not match the experiment's model config (digest {want})"
    );
    Ok(())
}

/// Builds the model stored in `path` after checking it fits `cfg`.
pub fn load_model(cfg: &ExperimentConfig, path: &Path) -> Result<DisentangleModel> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("cannot load checkpoint {}", path.display()))?;
    check_model_config(&ckpt, cfg)?;
    Ok(ckpt.build_model()?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum GenerateMode {
    SwapGrid,
    InterpolateStyle,
    InterpolateContent,
    Overlay,
}

impl GenerateMode {
    pub fn file_stem(self) -> &'static str {
        match self {
            GenerateMode::SwapGrid => "swap-grid",
            GenerateMode::InterpolateStyle => "interpolate-style",
            GenerateMode::InterpolateContent => "interpolate-content",
            GenerateMode::Overlay => "overlay",
        }
    }
}

#[derive(Clone, Debug)]
pub struct GenerateRequest {
    pub mode: GenerateMode,
    /// Test-split indices. Swap grids use them as content sources and, unless
    /// `styles` is set, as style sources too. Interpolations use the first two.
    pub images: Vec<usize>,
    pub styles: Option<Vec<usize>>,
    pub steps: usize,
}

#[derive(Serialize)]
struct Sidecar<'a> {
    mode: &'a str,
    images: &'a [usize],
    styles: &'a [usize],
    steps: usize,
    config_digest: String,
    model_digest: String,
    checkpoint: String,
}

/// Renders one figure to `out/<mode>.png` with a JSON sidecar naming the
/// config and model digests.
pub fn generate(cfg: &ExperimentConfig, checkpoint: &Path, req: &GenerateRequest, out: &Path) -> Result<PathBuf> {
    ensure!(!req.images.is_empty(), "no input images given");
    let model = load_model(cfg, checkpoint)?;
    let data = load_dataset(cfg)?;
    let test = &data.test;
    let tensor = |idx: &[usize]| -> Result<Tensor> { Ok(test.tensor(idx, &Device::Cpu)?) };
    let size = cfg.model.image_size as u32;
    let styles = req.styles.clone().unwrap_or_else(|| req.images.clone());
    let img = match req.mode {
        GenerateMode::SwapGrid => generate::swap_grid_image(&model, &tensor(&req.images)?, &tensor(&styles)?)?,
        GenerateMode::InterpolateStyle | GenerateMode::InterpolateContent => {
            ensure!(req.images.len() >= 2, "interpolation needs two images");
            let (a, b) = (tensor(&req.images[..1])?, tensor(&req.images[1..2])?);
            let frames = if req.mode == GenerateMode::InterpolateStyle {
                generate::interpolate_style(&model, &a, &b, req.steps)?
            } else {
                generate::interpolate_content(&model, &a, &b, req.steps)?
            };
            let tiles = frames.iter().map(|f| generate::to_rgb(f).map(Some)).collect::<Result<Vec<_>>>()?;
            generate::montage(&tiles, tiles.len(), size)
        }
        GenerateMode::Overlay => {
            let x = tensor(&req.images)?;
            let points = disentangle::evaluation::landmarks_of(&model, &x)?;
            let mut tiles = Vec::new();
            for (i, pts) in points.iter().enumerate() {
                tiles.push(Some(generate::overlay(&generate::to_rgb(&x.get(i)?)?, pts)));
            }
            generate::montage(&tiles, tiles.len(), size)
        }
    };
    std::fs::create_dir_all(out)?;
    let path = out.join(format!("{}.png", req.mode.file_stem()));
    img.save(&path)?;
    let sidecar = Sidecar {
        mode: req.mode.file_stem(),
        images: &req.images,
        styles: &styles,
        steps: req.steps,
        config_digest: cfg.digest(),
        model_digest: model.digest()?,
        checkpoint: checkpoint.display().to_string(),
    };
    std::fs::write(path.with_extension("json"), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(path)
}

/// Runs the configured metrics and writes `out/report.csv`.
pub fn evaluate(cfg: &ExperimentConfig, checkpoint: &Path, metrics: &[Metric], out: &Path) -> Result<MetricReport> {
    let model = load_model(cfg, checkpoint)?;
    let data = load_dataset(cfg)?;
    let (model_digest, config_digest) = (model.digest()?, cfg.digest());
    let e = &cfg.eval;
    let db_idx: Vec<usize> = (0..e.database.min(data.train.len())).collect();
    let q_idx: Vec<usize> = (0..e.queries.min(data.test.len())).collect();
    let mut report = MetricReport::default();
    let mut metrics = metrics.to_vec();
    metrics.sort();
    metrics.dedup();
    for metric in metrics {
        match metric {
            Metric::Retrieval => {
                for repr in [Representation::Pixel, Representation::Content, Representation::Style] {
                    let db = embedding_index(&model, &data.train, &db_idx, repr)?;
                    let q = embedding_index(&model, &data.test, &q_idx, repr)?.with_id_offset(data.train.len() as u64);
                    let r = recall_at_k(&db, &q, e.k)?;
                    report.push(&format!("recall@{}/{}", e.k, repr.name()), r, q.len(), &model_digest, &config_digest)?;
                }
            }
            Metric::Ssim => {
                let (mut total, mut n) = (0.0, 0);
                for chunk in q_idx.chunks(EVAL_BATCH) {
                    let x = data.test.tensor(chunk, &Device::Cpu)?;
                    total += ssim(&x, &model.reconstruct(&x)?)? * chunk.len() as f64;
                    n += chunk.len();
                }
                report.push("ssim/reconstruction", total / n as f64, n, &model_digest, &config_digest)?;
            }
            Metric::Swap => {
                let g = e.swap_grid.min(data.test.len());
                let x = data.test.tensor(&(0..g).collect::<Vec<_>>(), &Device::Cpu)?;
                let depth = cfg.model.num_stages();
                let extractors: [(&str, Box<dyn disentangle::losses::FeatureExtractor + '_>, Box<dyn disentangle::losses::FeatureExtractor + '_>); 2] = [
                    ("identity", Box::new(IdentityFeatures), Box::new(IdentityFeatures)),
                    (
                        "model",
                        Box::new(ModelFeatures::new(&model, ModelBranch::Style, depth)),
                        Box::new(ModelFeatures::new(&model, ModelBranch::Content, depth)),
                    ),
                ];
                for (name, style_f, content_f) in &extractors {
                    let c = swap_consistency(&model, &x, &x, style_f.as_ref(), content_f.as_ref())?;
                    report.push(&format!("style-similarity/{name}"), c.style, g * g, &model_digest, &config_digest)?;
                    report.push(&format!("content-similarity/{name}"), c.content, g * g, &model_digest, &config_digest)?;
                }
            }
            Metric::LandmarkError => {
                report.skip("landmark-error", "the dataset has no ground-truth landmark annotations");
            }
            Metric::ClassifierScore => {
                report.skip("classifier-score", "no classifier is configured");
            }
        }
    }
    std::fs::create_dir_all(out)?;
    report.write_csv(&out.join("report.csv"))?;
    Ok(report)
}
