//! Experiment configuration files.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use disentangle::data::{ColorMode, ColorizeSpec};
use disentangle::networks::ModelConfig;
use disentangle::training::{PerceptualConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Which dataset an experiment uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// MNIST with colored digits on black.
    MnistCd,
    /// MNIST with white digits on a colored background.
    MnistCb,
}

impl Preset {
    pub fn mode(self) -> ColorMode {
        match self {
            Preset::MnistCd => ColorMode::Digit,
            Preset::MnistCb => ColorMode::Background,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::MnistCd => "mnist-cd",
            Preset::MnistCb => "mnist-cb",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub preset: Preset,
    /// Directory holding the four MNIST IDX files (optionally gzipped).
    pub source: PathBuf,
    /// Seed of the color stream.
    pub seed: u64,
    pub palette: [f32; 2],
    /// Use only the first `train_limit` training images; 0 keeps all.
    pub train_limit: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            preset: Preset::MnistCd,
            source: PathBuf::from("data/mnist-mini"),
            seed: 0,
            palette: [0.3, 1.0],
            train_limit: 0,
        }
    }
}

impl DataConfig {
    pub fn colorize_spec(&self) -> ColorizeSpec {
        ColorizeSpec {
            mode: self.preset.mode(),
            palette: self.palette,
            seed: self.seed,
        }
    }
}

/// Metrics computed by `evaluate`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    /// recall@k over pixel, content and style embeddings.
    Retrieval,
    /// SSIM between test images and their reconstructions.
    Ssim,
    /// Style and content similarity over a swap grid.
    Swap,
    /// Needs ground-truth landmark annotations.
    LandmarkError,
    /// Needs a trained classifier.
    ClassifierScore,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub metrics: Vec<Metric>,
    pub k: usize,
    /// Training images forming the retrieval database.
    pub database: usize,
    /// Test images used as queries and for SSIM.
    pub queries: usize,
    /// Side of the swap grid used by the similarity metrics.
    pub swap_grid: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            metrics: vec![Metric::Retrieval, Metric::Ssim, Metric::Swap],
            k: 1,
            database: 2000,
            queries: 1000,
            swap_grid: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/desk")
}

impl ExperimentConfig {
    /// 64x64 MNIST-CD with ten landmarks, sized for a CPU.
    pub fn desk() -> Self {
        Self {
            model: ModelConfig::desk(),
            train: TrainConfig::desk(),
            data: DataConfig {
                train_limit: 8000,
                ..DataConfig::default()
            },
            eval: EvalConfig::default(),
            output_dir: default_output_dir(),
        }
    }

    /// Parses a TOML file. Unknown keys are reported all at once.
    pub fn from_toml(text: &str) -> Result<Self> {
        let value: toml::Value = toml::from_str(text).context("config is not valid TOML")?;
        let unknown = unknown_keys(&value, &schema_reference(), "");
        if !unknown.is_empty() {
            bail!("unknown config keys: {}", unknown.into_iter().collect::<Vec<_>>().join(", "));
        }
        let cfg: Self = toml::from_str(text).context("config does not match the schema")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.colorize_spec().validate()?;
        if self.eval.k == 0 {
            bail!("eval.k must be >= 1");
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        digest_json(self)
    }
}

pub fn digest_json<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("value serializes");
    Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

/// A config with every optional field present, used as the key schema.
fn schema_reference() -> toml::Value {
    let mut cfg = ExperimentConfig::desk();
    cfg.train.grad_clip = Some(1.0);
    toml::Value::try_from(&cfg).expect("config converts to a TOML value")
}

fn unknown_keys(value: &toml::Value, reference: &toml::Value, prefix: &str) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    let (Some(table), Some(schema)) = (value.as_table(), reference.as_table()) else {
        return out;
    };
    // Tagged tables take different fields per variant; serde checks those.
    if schema.contains_key("kind") {
        return out;
    }
    for (key, v) in table {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match schema.get(key) {
            None => {
                out.insert(path);
            }
            Some(r) => out.extend(unknown_keys(v, r, &path)),
        }
    }
    out
}

/// Switches that reproduce the ablation rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Ablation {
    NoKl,
    NoPerceptual,
}

impl Ablation {
    pub fn apply(self, train: &mut TrainConfig) {
        match self {
            Ablation::NoKl => train.use_kl = false,
            Ablation::NoPerceptual => {
                train.use_perceptual = false;
                train.perceptual = PerceptualConfig::None;
            }
        }
    }
}
