//! The four networks of the two-branch autoencoder and their composition.
//!
//! ```text
//! x ──> hourglass ──> softmax / soft-argmax / render ──> y ──> content encoder ──┬─> embedding ─┐
//! │                                                                             ├─> mu_p       │
//! │                                                                             └─> skips ──┐  │
//! └──> style encoder ──> mu_q ──> z = mu_q (+ noise while training) ──────── fuse ─────────>│ decoder ──> x_hat
//! ```

mod checkpoint;
mod config;

use candle_core::{DType, Device, Tensor};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub use checkpoint::{Checkpoint, RngState, CHECKPOINT_FORMAT_VERSION};
pub use config::{Fusion, ModelConfig};

use crate::geometry::{self, Bottleneck, LandmarkSet, StructureMap};
use crate::nn::{instance_norm, leaky_relu, Conv2d, ConvTranspose2d, ParamStore};
use crate::{Error, Result};

const LEAK: f64 = 0.2;

/// Parameter-name prefixes of the four networks.
pub const GROUPS: [&str; 4] = ["hourglass", "style_encoder", "content_encoder", "decoder"];

/// Single-stack hourglass producing one raw heatmap per landmark at input resolution.
struct Hourglass {
    stem: Conv2d,
    downs: Vec<Conv2d>,
    bottom: Conv2d,
    ups: Vec<ConvTranspose2d>,
    head: Conv2d,
}

impl Hourglass {
    fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let hc = &cfg.hourglass_channels;
        let stem = Conv2d::new(store, "hourglass.stem", 3, hc[0], 3, 1, 1)?;
        let mut downs = Vec::with_capacity(hc.len());
        let mut ups = Vec::with_capacity(hc.len());
        for i in 0..hc.len() {
            let prev = if i == 0 { hc[0] } else { hc[i - 1] };
            downs.push(Conv2d::new(store, &format!("hourglass.down{i}"), prev, hc[i], 4, 2, 1)?);
            ups.push(ConvTranspose2d::new(store, &format!("hourglass.up{i}"), hc[i], prev, 4, 2, 1)?);
        }
        let last = *hc.last().expect("validated non-empty");
        let bottom = Conv2d::new(store, "hourglass.bottom", last, last, 3, 1, 1)?;
        let head = Conv2d::new(store, "hourglass.head", hc[0], cfg.num_points, 1, 1, 0)?;
        Ok(Self {
            stem,
            downs,
            bottom,
            ups,
            head,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let block = |t: Tensor| leaky_relu(&instance_norm(&t)?, LEAK);
        let mut f = block(self.stem.forward(x)?)?;
        let mut feats = vec![f.clone()];
        for d in &self.downs {
            f = block(d.forward(&f)?)?;
            feats.push(f.clone());
        }
        f = block(self.bottom.forward(&f)?)?;
        for (i, up) in self.ups.iter().enumerate().rev() {
            f = (block(up.forward(&f)?)? + &feats[i])?;
        }
        self.head.forward(&f)
    }
}

/// Stack of stride-2 convolutions taking the input down to 1x1.
struct Encoder {
    stages: Vec<Conv2d>,
}

impl Encoder {
    fn new(store: &mut ParamStore, name: &str, in_channels: usize, cfg: &ModelConfig) -> Result<Self> {
        let mut stages = Vec::new();
        let mut cin = in_channels;
        for i in 0..cfg.num_stages() {
            let cout = cfg.stage_channels(i);
            stages.push(Conv2d::new(store, &format!("{name}.stage{i}"), cin, cout, 4, 2, 1)?);
            cin = cout;
        }
        Ok(Self { stages })
    }

    /// Output of every stage, from `S/2` down to `1x1`.
    fn forward(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut outs: Vec<Tensor> = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let h = match outs.last() {
                None => stage.forward(x)?,
                Some(prev) => instance_norm(&stage.forward(&leaky_relu(prev, LEAK)?)?)?,
            };
            outs.push(h);
        }
        Ok(outs)
    }
}

/// 1x1 head mapping the last encoder stage to a `(batch, D)` vector.
fn vector_head(head: &Conv2d, last: &Tensor) -> Result<Tensor> {
    let b = last.dim(0)?;
    Ok(head.forward(last)?.reshape((b, head.out_channels()))?)
}

struct Decoder {
    input: Conv2d,
    stages: Vec<ConvTranspose2d>,
}

impl Decoder {
    fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let n = cfg.num_stages();
        let fused = match cfg.fusion {
            Fusion::Add => cfg.style_dim,
            Fusion::Concat => 2 * cfg.style_dim,
        };
        let input = Conv2d::new(store, "decoder.input", fused, cfg.stage_channels(n - 1), 1, 1, 0)?;
        let mut stages = Vec::with_capacity(n);
        for j in 0..n {
            let cin = cfg.stage_channels(n - 1 - j);
            let cout = if j + 1 < n { cfg.stage_channels(n - 2 - j) } else { 3 };
            stages.push(ConvTranspose2d::new(store, &format!("decoder.stage{j}"), cin, cout, 4, 2, 1)?);
        }
        Ok(Self { input, stages })
    }

    fn forward(&self, fused: &Tensor, skips: Option<&[Tensor]>) -> Result<Tensor> {
        let (b, f) = fused.dims2()?;
        let n = self.stages.len();
        if let Some(s) = skips {
            if s.len() != n {
                return Err(Error::shape(format!("decoder has {n} stages but got {} skips", s.len())));
            }
        }
        let mut h = self.input.forward(&fused.reshape((b, f, 1, 1))?)?;
        for (j, stage) in self.stages.iter().enumerate() {
            if let Some(s) = skips {
                let skip = &s[n - 1 - j];
                if skip.dims() != h.dims() {
                    return Err(Error::shape(format!(
                        "skip {} has shape {:?}, decoder stage {j} expects {:?}",
                        n - 1 - j,
                        skip.dims(),
                        h.dims()
                    )));
                }
                h = (h + skip)?;
            }
            h = stage.forward(&h.relu()?)?;
            h = if j + 1 < n { instance_norm(&h)? } else { h.tanh()? };
        }
        Ok(h)
    }
}

/// Style code: posterior mean, prior mean and the code fed to the decoder.
#[derive(Clone, Debug)]
pub struct StyleCode {
    pub mu_q: Tensor,
    pub mu_p: Tensor,
    pub z: Tensor,
}

/// Output of the content encoder.
#[derive(Clone, Debug)]
pub struct ContentCode {
    pub embedding: Tensor,
    pub mu_p: Tensor,
    pub skips: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub bottleneck: Bottleneck,
    pub style: StyleCode,
    pub content_embedding: Tensor,
    pub skips: Vec<Tensor>,
    pub reconstruction: Tensor,
}

/// Whether the style code is sampled (`z = mu_q + eps`) or taken as its mean.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

pub struct DisentangleModel {
    config: ModelConfig,
    store: ParamStore,
    hourglass: Hourglass,
    style_encoder: Encoder,
    style_head: Conv2d,
    content_encoder: Encoder,
    content_embed_head: Conv2d,
    content_prior_head: Conv2d,
    decoder: Decoder,
}

impl DisentangleModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::with_dtype(config, seed, DType::F32, Device::Cpu)
    }

    pub fn with_dtype(config: ModelConfig, seed: u64, dtype: DType, device: Device) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(seed, dtype, device, config.init_std);
        let hourglass = Hourglass::new(&mut store, &config)?;
        let style_encoder = Encoder::new(&mut store, "style_encoder", 3, &config)?;
        let last = config.stage_channels(config.num_stages() - 1);
        let style_head = Conv2d::new(&mut store, "style_encoder.mu", last, config.style_dim, 1, 1, 0)?;
        let content_encoder = Encoder::new(&mut store, "content_encoder", config.num_points, &config)?;
        let content_embed_head =
            Conv2d::new(&mut store, "content_encoder.embedding", last, config.style_dim, 1, 1, 0)?;
        let content_prior_head = Conv2d::new(&mut store, "content_encoder.mu", last, config.style_dim, 1, 1, 0)?;
        let decoder = Decoder::new(&mut store, &config)?;
        Ok(Self {
            config,
            store,
            hourglass,
            style_encoder,
            style_head,
            content_encoder,
            content_embed_head,
            content_prior_head,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    /// Scalar parameter count of each of the four networks.
    pub fn parameter_counts(&self) -> Vec<(&'static str, usize)> {
        GROUPS.iter().map(|g| (*g, self.store.count(&format!("{g}.")))).collect()
    }

    fn check_images(&self, x: &Tensor) -> Result<()> {
        let s = self.config.image_size;
        match x.dims4() {
            Ok((_, 3, h, w)) if h == s && w == s => Ok(()),
            _ => Err(Error::shape(format!("expected images (batch, 3, {s}, {s}), got {:?}", x.dims()))),
        }
    }

    /// Raw landmark heatmaps `(batch, K, S, S)` before the spatial softmax.
    pub fn content_extractor(&self, x: &Tensor) -> Result<Tensor> {
        self.check_images(x)?;
        self.hourglass.forward(x)
    }

    /// Posterior mean of the style code, `(batch, D)`.
    pub fn style_encoder(&self, x: &Tensor) -> Result<Tensor> {
        self.check_images(x)?;
        let feats = self.style_encoder.forward(x)?;
        vector_head(&self.style_head, feats.last().expect("at least one stage"))
    }

    /// Every stage output of the style encoder, largest first.
    pub fn style_features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.check_images(x)?;
        self.style_encoder.forward(x)
    }

    pub fn content_encoder(&self, y: &StructureMap) -> Result<ContentCode> {
        let (_, k, h, w) = y.dims();
        let s = self.config.image_size;
        if k != self.config.num_points || h != s || w != s {
            return Err(Error::shape(format!(
                "structure map must be (batch, {}, {s}, {s}), got {:?}",
                self.config.num_points,
                y.values().dims()
            )));
        }
        let skips = self.content_encoder.forward(y.values())?;
        let last = skips.last().expect("at least one stage");
        let embedding = vector_head(&self.content_embed_head, last)?;
        let mu_p = vector_head(&self.content_prior_head, last)?;
        Ok(ContentCode {
            embedding,
            mu_p,
            skips,
        })
    }

    pub fn decoder(&self, content_embedding: &Tensor, z: &Tensor, skips: &[Tensor]) -> Result<Tensor> {
        if content_embedding.dims() != z.dims() {
            return Err(Error::shape(format!(
                "content embedding {:?} and style code {:?} differ",
                content_embedding.dims(),
                z.dims()
            )));
        }
        let fused = match self.config.fusion {
            Fusion::Add => (content_embedding + z)?,
            Fusion::Concat => Tensor::cat(&[content_embedding, z], 1)?,
        };
        let skips = self.config.use_skips.then_some(skips);
        self.decoder.forward(&fused, skips)
    }

    pub fn bottleneck(&self, x: &Tensor) -> Result<Bottleneck> {
        geometry::structure_bottleneck(&self.content_extractor(x)?, self.config.sigma_render)
    }

    pub fn forward(&self, x: &Tensor, mode: Mode<'_>) -> Result<ForwardOutput> {
        let bottleneck = self.bottleneck(x)?;
        let content = self.content_encoder(&bottleneck.structure)?;
        let mu_q = self.style_encoder(x)?;
        let z = match mode {
            Mode::Eval => mu_q.clone(),
            Mode::Train(rng) => (&mu_q + self.standard_normal(mu_q.dims2()?, rng)?)?,
        };
        let reconstruction = self.decoder(&content.embedding, &z, &content.skips)?;
        Ok(ForwardOutput {
            bottleneck,
            style: StyleCode {
                mu_q,
                mu_p: content.mu_p,
                z,
            },
            content_embedding: content.embedding,
            skips: content.skips,
            reconstruction,
        })
    }

    fn standard_normal(&self, shape: (usize, usize), rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let data: Vec<f64> = (0..shape.0 * shape.1).map(|_| StandardNormal.sample(rng)).collect();
        Ok(Tensor::from_vec(data, shape, self.device())?.to_dtype(self.dtype())?)
    }

    /// Eval-mode reconstruction.
    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(x, Mode::Eval)?.reconstruction)
    }

    /// Decodes the content of `x_content` with the style mean of `x_style`.
    pub fn swap(&self, x_content: &Tensor, x_style: &Tensor) -> Result<Tensor> {
        if x_content.dims() != x_style.dims() {
            return Err(Error::shape(format!(
                "content batch {:?} and style batch {:?} differ",
                x_content.dims(),
                x_style.dims()
            )));
        }
        let bottleneck = self.bottleneck(x_content)?;
        let content = self.content_encoder(&bottleneck.structure)?;
        let z = self.style_encoder(x_style)?;
        self.decoder(&content.embedding, &z, &content.skips)
    }

    /// Decodes explicit landmarks and style codes, re-rendering the structure map first.
    pub fn decode_landmarks(&self, landmarks: &LandmarkSet, z: &Tensor) -> Result<Tensor> {
        let s = self.config.image_size;
        let y = geometry::render_gaussian(landmarks, s, s, self.config.sigma_render)?;
        let content = self.content_encoder(&y)?;
        self.decoder(&content.embedding, z, &content.skips)
    }
}
