//! Joint optimization of all four networks.
//!
//! A [`Trainer`] owns the model, the optimizer and the noise RNG. Its
//! position is `(epoch, global_step)`; batch order within an epoch is a
//! function of `(seed, epoch)`, so a run restored from a checkpoint replays
//! exactly the batches an uninterrupted run would have seen.

mod adam;
mod metrics;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use adam::{clip_global_norm, Adam};
pub use metrics::{read_metrics, MetricsLog, METRICS_HEADER};

use crate::data::{batch_iterator, Dataset, ImageBatch, Pass};
use crate::losses::{
    concentration_loss, kl_loss, reconstruction_loss, separation_loss, separation_loss_coords, FeatureExtractor,
    IdentityFeatures, LossBundle, LossTerms, LossWeights, NoFeatures, RandomConvFeatures, Vgg19Features,
};
use crate::networks::{Checkpoint, DisentangleModel, ForwardOutput, Mode, ModelConfig, RngState};
use crate::{Error, Result};

/// Which quantity the separation term compares between channels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SeparationOperand {
    /// Whole heatmap channels.
    #[default]
    Heatmaps,
    /// Soft-argmax coordinates.
    Coordinates,
}

/// Feature extractor used by the perceptual reconstruction term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PerceptualConfig {
    None,
    Identity,
    RandomConv { seed: u64, channels: Vec<usize> },
    Vgg19 { path: PathBuf, blocks: usize },
}

impl PerceptualConfig {
    pub fn build(&self, dtype: DType, device: &Device) -> Result<Box<dyn FeatureExtractor>> {
        Ok(match self {
            PerceptualConfig::None => Box::new(NoFeatures),
            PerceptualConfig::Identity => Box::new(IdentityFeatures),
            PerceptualConfig::RandomConv { seed, channels } => {
                Box::new(RandomConvFeatures::new(*seed, channels, dtype, device)?)
            }
            PerceptualConfig::Vgg19 { path, blocks } => Box::new(Vgg19Features::load(path, *blocks, device)?),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub sigma_sep: f64,
    pub separation_operand: SeparationOperand,
    pub perceptual: PerceptualConfig,
    pub use_perceptual: bool,
    pub use_kl: bool,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Epochs between numbered checkpoints.
    pub checkpoint_every: usize,
    /// Steps between metrics rows.
    pub log_every: usize,
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 160,
            batch_size: 8,
            lr_init: 1e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            weights: LossWeights::default(),
            sigma_sep: 0.5,
            separation_operand: SeparationOperand::Heatmaps,
            perceptual: PerceptualConfig::RandomConv {
                seed: 0,
                channels: vec![16, 32, 64],
            },
            use_perceptual: true,
            use_kl: true,
            grad_clip: Some(5.0),
            checkpoint_every: 1,
            log_every: 1,
            deterministic: true,
        }
    }
}

impl TrainConfig {
    /// Settings for the 64x64 desk model on a CPU.
    pub fn desk() -> Self {
        Self {
            epochs: 5,
            lr_init: 5e-4,
            weights: LossWeights {
                w_prior: 0.005,
                w_kl: 1e-4,
                ..LossWeights::default()
            },
            sigma_sep: 0.15,
            separation_operand: SeparationOperand::Coordinates,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if !(self.lr_init.is_finite() && self.lr_init > 0.0) {
            return Err(Error::config(format!("lr_init must be positive, got {}", self.lr_init)));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.sigma_sep > 0.0) {
            return Err(Error::config("sigma_sep must be positive"));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::config("grad_clip must be positive when set"));
        }
        if self.checkpoint_every == 0 || self.log_every == 0 {
            return Err(Error::config("checkpoint_every and log_every must be >= 1"));
        }
        self.weights.validate()
    }

    /// Loss weights after applying the ablation switches.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights.clone();
        if !self.use_kl {
            w.w_kl = 0.0;
        }
        w
    }

    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// `lr_init * (1 - step / total_steps)`. Steps past the end give 0.
pub fn lr_schedule(step: u64, total_steps: u64, lr_init: f64) -> f64 {
    if total_steps == 0 || step >= total_steps {
        if step > total_steps {
            log::warn!("lr_schedule: step {step} is past the final step {total_steps}; using 0");
        }
        return 0.0;
    }
    lr_init * (1.0 - step as f64 / total_steps as f64)
}

/// One optimizer update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    /// Zero-based index of the update.
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBundle,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainSummary {
    pub records: Vec<StepRecord>,
    pub last_checkpoint: Option<PathBuf>,
}

pub const LATEST_CHECKPOINT: &str = "latest.safetensors";
pub const METRICS_FILE: &str = "metrics.csv";

pub fn epoch_checkpoint_name(epoch: usize) -> String {
    format!("epoch-{epoch:04}.safetensors")
}

const NOISE_STREAM: u64 = 7;

pub struct Trainer {
    config: TrainConfig,
    model: DisentangleModel,
    adam: Adam,
    rng: ChaCha8Rng,
    features: Box<dyn FeatureExtractor>,
    layer_weights: Vec<f64>,
    weights: LossWeights,
    epoch: usize,
    global_step: u64,
    fault_dir: Option<PathBuf>,
    annotations: BTreeMap<String, String>,
}

impl Trainer {
    pub fn new(model_config: ModelConfig, config: TrainConfig) -> Result<Self> {
        let model = DisentangleModel::new(model_config, config.seed)?;
        Self::with_model(model, config)
    }

    /// Starts training an existing model from step 0.
    pub fn with_model(model: DisentangleModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let features: Box<dyn FeatureExtractor> = if config.use_perceptual {
            config.perceptual.build(model.dtype(), model.device())?
        } else {
            Box::new(NoFeatures)
        };
        let s = model.config().image_size;
        let probe = Tensor::zeros((1, 3, s, s), model.dtype(), model.device())?;
        let layer_weights = config.weights.layer_weights(features.features(&probe)?.len())?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(NOISE_STREAM);
        Ok(Self {
            adam: Adam::new(config.adam_beta1, config.adam_beta2, config.adam_eps),
            weights: config.effective_weights(),
            config,
            model,
            rng,
            features,
            layer_weights,
            epoch: 0,
            global_step: 0,
            fault_dir: None,
            annotations: BTreeMap::new(),
        })
    }

    /// Restores model, optimizer, counters and RNG from a checkpoint.
    pub fn from_checkpoint(ckpt: &Checkpoint, config: TrainConfig) -> Result<Self> {
        let model = ckpt.build_model()?;
        let mut t = Self::with_model(model, config)?;
        t.adam.load_state(ckpt.optimizer_step, &ckpt.optimizer)?;
        t.rng = ckpt.rng.restore()?;
        t.epoch = ckpt.epoch;
        t.global_step = ckpt.global_step;
        Ok(t)
    }

    pub fn resume(path: &Path, config: TrainConfig) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, config)
    }

    pub fn model(&self) -> &DisentangleModel {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn global_step(&self) -> u64 {
        self.global_step
    }

    pub fn optimizer(&self) -> &Adam {
        &self.adam
    }

    /// Where a diagnostic checkpoint is written if a step faults.
    pub fn set_fault_dir(&mut self, dir: Option<PathBuf>) {
        self.fault_dir = dir;
    }

    /// Adds a provenance entry to every checkpoint written from now on.
    pub fn annotate(&mut self, key: &str, value: impl Into<String>) {
        self.annotations.insert(key.to_string(), value.into());
    }

    /// Loss terms of a forward pass on `x`, in the given mode.
    pub fn loss_terms(&self, x: &Tensor, out: &ForwardOutput) -> Result<LossTerms> {
        let h = &out.bottleneck.heatmaps;
        let separation = match self.config.separation_operand {
            SeparationOperand::Heatmaps => separation_loss(h, self.config.sigma_sep)?,
            SeparationOperand::Coordinates => separation_loss_coords(&out.bottleneck.landmarks, self.config.sigma_sep)?,
        };
        let (recon_l1, recon_perceptual) =
            reconstruction_loss(x, &out.reconstruction, self.features.as_ref(), &self.layer_weights)?;
        Ok(LossTerms {
            separation,
            concentration: concentration_loss(h)?,
            recon_l1,
            recon_perceptual,
            kl: kl_loss(&out.style.mu_q, &out.style.mu_p)?,
        })
    }

    /// Losses on `x` without updating anything (eval-mode forward).
    pub fn evaluate(&self, x: &Tensor) -> Result<LossBundle> {
        let out = self.model.forward(x, Mode::Eval)?;
        Ok(self.loss_terms(x, &out)?.combine(&self.weights)?.1)
    }

    /// Forward, loss, backward and one optimizer update at learning rate `lr`.
    pub fn train_step(&mut self, batch: &ImageBatch, lr: f64) -> Result<StepRecord> {
        let x = batch.values.to_dtype(self.model.dtype())?;
        let rng_before = self.rng.clone();
        let out = self.model.forward(&x, Mode::Train(&mut self.rng))?;
        let combined = self.loss_terms(&x, &out).and_then(|t| t.combine(&self.weights));
        let (total, loss) = match combined {
            Ok(v) => v,
            Err(e) => return Err(self.fault(e, rng_before)),
        };
        let grads = total.backward()?;
        let mut named = BTreeMap::new();
        for (name, var) in self.model.params().vars() {
            if let Some(g) = grads.get(var.as_tensor()) {
                named.insert(name.clone(), g.clone());
            }
        }
        let grad_norm = clip_global_norm(&mut named, self.config.grad_clip)?;
        if !grad_norm.is_finite() {
            let e = Error::TrainingFault {
                component: "gradient".into(),
                value: grad_norm,
            };
            return Err(self.fault(e, rng_before));
        }
        self.adam.update(self.model.params().vars(), &named, lr)?;
        let record = StepRecord {
            step: self.global_step,
            epoch: self.epoch,
            lr,
            loss,
            grad_norm,
        };
        self.global_step += 1;
        Ok(record)
    }

    fn fault(&mut self, e: Error, rng_before: ChaCha8Rng) -> Error {
        self.rng = rng_before;
        if let (Error::TrainingFault { .. }, Some(dir)) = (&e, &self.fault_dir) {
            let path = dir.join(format!("fault-step-{:08}.safetensors", self.global_step));
            match self.checkpoint().and_then(|c| c.save(&path)) {
                Ok(()) => log::error!("{e}; diagnostic checkpoint written to {}", path.display()),
                Err(save_err) => log::error!("{e}; diagnostic checkpoint failed: {save_err}"),
            }
        }
        e
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut extra = self.annotations.clone();
        extra.insert("train_config_digest".to_string(), self.config.digest());
        Ok(Checkpoint {
            model_config: self.model.config().clone(),
            params: self.model.snapshot_params()?,
            optimizer: self.adam.state(),
            optimizer_step: self.adam.step_count(),
            epoch: self.epoch,
            global_step: self.global_step,
            rng: RngState::capture(&self.rng),
            extra,
        })
    }

    /// Trains until `config.epochs` is reached, continuing from the current
    /// position. With `out_dir`, writes `metrics.csv`, numbered epoch
    /// checkpoints and `latest.safetensors` there.
    pub fn fit(
        &mut self,
        dataset: &Dataset,
        out_dir: Option<&Path>,
        on_step: &mut dyn FnMut(&StepRecord),
    ) -> Result<TrainSummary> {
        let b = self.config.batch_size;
        let steps_per_epoch = (dataset.len() / b) as u64;
        if steps_per_epoch == 0 {
            return Err(Error::config(format!(
                "dataset `{}` has {} items, fewer than one batch of {b}",
                dataset.name(),
                dataset.len()
            )));
        }
        let total_steps = steps_per_epoch * self.config.epochs as u64;
        let mut log = match out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                self.fault_dir.get_or_insert_with(|| dir.to_path_buf());
                Some(MetricsLog::open(&dir.join(METRICS_FILE), self.global_step)?)
            }
            None => None,
        };
        let mut summary = TrainSummary::default();

        while self.epoch < self.config.epochs {
            let done_in_epoch = (self.global_step - steps_per_epoch * self.epoch as u64) as usize;
            let batches = batch_iterator(dataset, b, Some(self.config.seed), self.epoch as u64, Pass::Train)?
                .with_dtype(self.model.dtype())
                .skip(done_in_epoch);
            for batch in batches {
                let batch = batch?;
                let lr = lr_schedule(self.global_step, total_steps, self.config.lr_init);
                let record = self.train_step(&batch, lr)?;
                if let Some(log) = log.as_mut() {
                    if record.step % self.config.log_every as u64 == 0 {
                        log.append(&record)?;
                    }
                }
                on_step(&record);
                summary.records.push(record);
            }
            self.epoch += 1;
            if let Some(log) = log.as_mut() {
                log.flush()?;
            }
            if let Some(dir) = out_dir {
                let ckpt = self.checkpoint()?;
                if self.epoch % self.config.checkpoint_every == 0 || self.epoch == self.config.epochs {
                    ckpt.save(&dir.join(epoch_checkpoint_name(self.epoch)))?;
                }
                let latest = dir.join(LATEST_CHECKPOINT);
                ckpt.save(&latest)?;
                summary.last_checkpoint = Some(latest);
            }
        }
        Ok(summary)
    }
}

/// Fresh training run of `model_config` on `dataset`.
pub fn train(
    model_config: ModelConfig,
    config: TrainConfig,
    dataset: &Dataset,
    out_dir: Option<&Path>,
) -> Result<(Trainer, TrainSummary)> {
    let mut trainer = Trainer::new(model_config, config)?;
    let summary = trainer.fit(dataset, out_dir, &mut |_| {})?;
    Ok((trainer, summary))
}
