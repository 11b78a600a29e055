use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::nn::{leaky_relu, Conv2d, ParamStore};
use crate::{Error, Result};

/// A fixed multi-layer feature map `psi_l` over image batches in `[-1, 1]`.
///
/// Implementations must not change after construction; the loss treats
/// them as constants and only differentiates through their inputs.
pub trait FeatureExtractor: Send + Sync {
    fn name(&self) -> &str;

    /// One `(batch, C_l, H_l, W_l)` tensor per layer, shallowest first.
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>>;
}

/// No layers. The perceptual term vanishes.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoFeatures;

impl FeatureExtractor for NoFeatures {
    fn name(&self) -> &str {
        "none"
    }

    fn features(&self, _x: &Tensor) -> Result<Vec<Tensor>> {
        Ok(Vec::new())
    }
}

/// A single layer equal to the input.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityFeatures;

impl FeatureExtractor for IdentityFeatures {
    fn name(&self) -> &str {
        "identity"
    }

    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![x.clone()])
    }
}

/// Stack of frozen, randomly initialized 3x3 stride-2 convolutions with
/// leaky ReLU, emitting after every layer. Needs no downloaded weights.
#[derive(Clone, Debug)]
pub struct RandomConvFeatures {
    layers: Vec<Conv2d>,
}

impl RandomConvFeatures {
    pub fn new(seed: u64, channels: &[usize], dtype: DType, device: &Device) -> Result<Self> {
        let mut layers = Vec::with_capacity(channels.len());
        let mut prev = 3;
        for (i, &c) in channels.iter().enumerate() {
            let std = (2.0 / (prev * 9) as f64).sqrt();
            let mut store = ParamStore::new(seed.wrapping_add(i as u64), dtype, device.clone(), std);
            let conv = Conv2d::new(&mut store, "conv", prev, c, 3, 2, 1)?;
            let vars = store.vars();
            layers.push(Conv2d::from_tensors(
                vars["conv.weight"].as_tensor(),
                vars["conv.bias"].as_tensor(),
                2,
                1,
            )?);
            drop(conv);
            prev = c;
        }
        Ok(Self { layers })
    }
}

impl FeatureExtractor for RandomConvFeatures {
    fn name(&self) -> &str {
        "random-conv"
    }

    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(self.layers.len());
        let mut f = x.clone();
        for conv in &self.layers {
            f = leaky_relu(&conv.forward(&f)?, 0.2)?;
            out.push(f.clone());
        }
        Ok(out)
    }
}

/// Convolution widths of the 19-layer ImageNet classifier; `0` marks a 2x2 max-pool.
const VGG19: [usize; 21] = [
    64, 64, 0, 128, 128, 0, 256, 256, 256, 256, 0, 512, 512, 512, 512, 0, 512, 512, 512, 512, 0,
];
const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

enum VggLayer {
    Conv(Conv2d),
    Pool,
}

/// ReLU features of a pretrained VGG-19 read from a safetensors file using
/// torchvision's `features.{index}.weight` / `.bias` naming.
///
/// Emits the activation after the first convolution of each of the first
/// `blocks` blocks (relu1_1, relu2_1, ...).
pub struct Vgg19Features {
    layers: Vec<VggLayer>,
    blocks: usize,
    mean: Tensor,
    std: Tensor,
}

impl Vgg19Features {
    pub fn load(path: &Path, blocks: usize, device: &Device) -> Result<Self> {
        if !(1..=5).contains(&blocks) {
            return Err(Error::config(format!("vgg19 feature blocks must be in 1..=5, got {blocks}")));
        }
        let tensors = candle_core::safetensors::load(path, device)?;
        let fetch = |idx: usize, what: &str| -> Result<Tensor> {
            let keys = [format!("features.{idx}.{what}"), format!("{idx}.{what}")];
            keys.iter()
                .find_map(|k| tensors.get(k))
                .map(|t| t.to_dtype(DType::F32))
                .transpose()?
                .ok_or_else(|| Error::Ingestion {
                    path: path.to_path_buf(),
                    message: format!("missing tensor features.{idx}.{what}"),
                    hint: "expected torchvision VGG-19 `features` weights in safetensors format".into(),
                })
        };

        let mut layers = Vec::new();
        let mut torch_idx = 0;
        let mut seen_blocks = 0;
        for &c in VGG19.iter() {
            if c == 0 {
                seen_blocks += 1;
                if seen_blocks == blocks {
                    break;
                }
                layers.push(VggLayer::Pool);
                torch_idx += 1;
            } else {
                let conv = Conv2d::from_tensors(&fetch(torch_idx, "weight")?, &fetch(torch_idx, "bias")?, 1, 1)?;
                if conv.out_channels() != c {
                    return Err(Error::Ingestion {
                        path: path.to_path_buf(),
                        message: format!("layer {torch_idx} has {} channels, expected {c}", conv.out_channels()),
                        hint: "the file does not hold VGG-19 weights".into(),
                    });
                }
                layers.push(VggLayer::Conv(conv));
                torch_idx += 2;
            }
        }
        Ok(Self {
            layers,
            blocks,
            mean: Tensor::new(&IMAGENET_MEAN, device)?.to_dtype(DType::F32)?.reshape((1, 3, 1, 1))?,
            std: Tensor::new(&IMAGENET_STD, device)?.to_dtype(DType::F32)?.reshape((1, 3, 1, 1))?,
        })
    }
}

impl FeatureExtractor for Vgg19Features {
    fn name(&self) -> &str {
        "vgg19"
    }

    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let dtype = x.dtype();
        let unit = ((x.to_dtype(DType::F32)? + 1.0)? * 0.5)?;
        let mut f = unit.broadcast_sub(&self.mean)?.broadcast_div(&self.std)?;
        let mut out = Vec::with_capacity(self.blocks);
        let mut after_pool = true;
        for layer in &self.layers {
            match layer {
                VggLayer::Pool => {
                    f = f.max_pool2d(2)?;
                    after_pool = true;
                }
                VggLayer::Conv(conv) => {
                    f = conv.forward(&f)?.relu()?;
                    if after_pool {
                        out.push(f.to_dtype(dtype)?);
                        after_pool = false;
                    }
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_conv_is_deterministic_and_halves() {
        let dev = Device::Cpu;
        let a = RandomConvFeatures::new(4, &[4, 8], DType::F64, &dev).unwrap();
        let b = RandomConvFeatures::new(4, &[4, 8], DType::F64, &dev).unwrap();
        let x = Tensor::randn(0f64, 1.0, (2, 3, 16, 16), &dev).unwrap();
        let fa = a.features(&x).unwrap();
        let fb = b.features(&x).unwrap();
        assert_eq!(fa.len(), 2);
        assert_eq!(fa[0].dims(), &[2, 4, 8, 8]);
        assert_eq!(fa[1].dims(), &[2, 8, 4, 4]);
        let d = (&fa[1] - &fb[1]).unwrap().abs().unwrap().max_all().unwrap();
        assert_eq!(d.to_scalar::<f64>().unwrap(), 0.0);
    }

    #[test]
    fn vgg_loads_torchvision_layout() {
        let dev = Device::Cpu;
        let mut map = std::collections::HashMap::new();
        let mut idx = 0;
        let mut prev = 3;
        for &c in VGG19.iter().take(6) {
            if c == 0 {
                idx += 1;
                continue;
            }
            let w = Tensor::randn(0f32, 0.1, (c, prev, 3, 3), &dev).unwrap();
            map.insert(format!("features.{idx}.weight"), w);
            map.insert(format!("features.{idx}.bias"), Tensor::zeros(c, DType::F32, &dev).unwrap());
            prev = c;
            idx += 2;
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vgg.safetensors");
        candle_core::safetensors::save(&map, &path).unwrap();

        let vgg = Vgg19Features::load(&path, 2, &dev).unwrap();
        let x = Tensor::zeros((1, 3, 16, 16), DType::F32, &dev).unwrap();
        let f = vgg.features(&x).unwrap();
        assert_eq!(f.len(), 2);
        assert_eq!(f[0].dims(), &[1, 64, 16, 16]);
        assert_eq!(f[1].dims(), &[1, 128, 8, 8]);
        assert!(Vgg19Features::load(&path, 3, &dev).is_err());
    }
}
