//! Checkpoint container: a safetensors file whose tensors hold model
//! parameters and optimizer moments, and whose string metadata holds the
//! format version, model config, counters and RNG state as JSON.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::{Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DisentangleModel, ModelConfig};
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

const PARAM_PREFIX: &str = "param/";
const OPT_PREFIX: &str = "opt/";

/// Serializable position of a ChaCha stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Checkpoint(format!("malformed rng state {self:?}"));
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
struct State {
    epoch: usize,
    global_step: u64,
    optimizer_step: u64,
    rng: RngState,
    #[serde(default)]
    extra: BTreeMap<String, String>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub params: BTreeMap<String, Tensor>,
    pub optimizer: BTreeMap<String, Tensor>,
    pub optimizer_step: u64,
    pub epoch: usize,
    pub global_step: u64,
    pub rng: RngState,
    /// Free-form provenance, e.g. the experiment config digest.
    pub extra: BTreeMap<String, String>,
}

impl Checkpoint {
    /// Writes to a sibling temp file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors: Vec<(String, Tensor)> = Vec::new();
        for (n, t) in &self.params {
            tensors.push((format!("{PARAM_PREFIX}{n}"), t.contiguous()?));
        }
        for (n, t) in &self.optimizer {
            tensors.push((format!("{OPT_PREFIX}{n}"), t.contiguous()?));
        }
        let state = State {
            epoch: self.epoch,
            global_step: self.global_step,
            optimizer_step: self.optimizer_step,
            rng: self.rng.clone(),
            extra: self.extra.clone(),
        };
        let mut meta = HashMap::new();
        meta.insert("format_version".to_string(), CHECKPOINT_FORMAT_VERSION.to_string());
        meta.insert("model_config".to_string(), serde_json::to_string(&self.model_config)?);
        meta.insert("state".to_string(), serde_json::to_string(&state)?);
        let bytes = safetensors::serialize(tensors.iter().map(|(n, t)| (n.as_str(), t)), Some(meta))
            .map_err(|e| Error::Checkpoint(e.to_string()))?;

        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let (_, header) =
            SafeTensors::read_metadata(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let meta = header
            .metadata()
            .as_ref()
            .ok_or_else(|| Error::Checkpoint(format!("{} has no metadata", path.display())))?;
        let get = |k: &str| {
            meta.get(k)
                .ok_or_else(|| Error::Checkpoint(format!("{} lacks `{k}`", path.display())))
        };
        let version: u32 = get("format_version")?
            .parse()
            .map_err(|_| Error::Checkpoint("unreadable format_version".into()))?;
        if version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "{} has format version {version}, this build reads version {CHECKPOINT_FORMAT_VERSION}",
                path.display()
            )));
        }
        let model_config: ModelConfig = serde_json::from_str(get("model_config")?)?;
        let state: State = serde_json::from_str(get("state")?)?;

        let all = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
        let mut params = BTreeMap::new();
        let mut optimizer = BTreeMap::new();
        for (name, t) in all {
            if let Some(n) = name.strip_prefix(PARAM_PREFIX) {
                params.insert(n.to_string(), t);
            } else if let Some(n) = name.strip_prefix(OPT_PREFIX) {
                optimizer.insert(n.to_string(), t);
            } else {
                return Err(Error::Checkpoint(format!("unexpected tensor `{name}`")));
            }
        }
        Ok(Self {
            model_config,
            params,
            optimizer,
            optimizer_step: state.optimizer_step,
            epoch: state.epoch,
            global_step: state.global_step,
            rng: state.rng,
            extra: state.extra,
        })
    }

    /// Builds a model and overwrites its parameters with the stored ones.
    pub fn build_model(&self) -> Result<DisentangleModel> {
        let model = DisentangleModel::new(self.model_config.clone(), 0)?;
        model.load_params(&self.params)?;
        Ok(model)
    }
}

impl DisentangleModel {
    /// Copies of every parameter, keyed by name.
    pub fn snapshot_params(&self) -> Result<BTreeMap<String, Tensor>> {
        self.params()
            .vars()
            .iter()
            .map(|(n, v)| Ok((n.clone(), v.as_tensor().copy()?)))
            .collect()
    }

    pub fn load_params(&self, params: &BTreeMap<String, Tensor>) -> Result<()> {
        let vars = self.params().vars();
        if params.len() != vars.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model has {}",
                params.len(),
                vars.len()
            )));
        }
        for (name, var) in vars {
            let t = params
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks parameter `{name}`")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, model expects {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(var.dtype())?)?;
        }
        Ok(())
    }

    /// SHA-256 over parameter names, shapes and raw bytes, as hex.
    pub fn digest(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, var) in self.params().vars() {
            h.update(name.as_bytes());
            h.update(format!("{:?}", var.dims()).as_bytes());
            for v in var.as_tensor().flatten_all()?.to_dtype(candle_core::DType::F32)?.to_vec1::<f32>()? {
                h.update(v.to_le_bytes());
            }
        }
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }
}
