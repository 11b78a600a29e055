//! Training objective: a prior on the heatmaps (separation plus
//! concentration), reconstruction (pixel L1 plus feature L1) and the KL term
//! between the style posterior and the content-conditioned prior.
//!
//! The per-term functions return scalar tensors that stay in the autograd
//! graph. [`total_loss`] combines plain numbers; [`LossTerms::combine`] does
//! the same on tensors and also returns the differentiable total.

mod features;
pub mod kernels;

use candle_core::{Shape, Tensor, D};
use serde::{Deserialize, Serialize};

pub use features::{FeatureExtractor, IdentityFeatures, NoFeatures, RandomConvFeatures, Vgg19Features};

use crate::geometry::{HeatmapTensor, LandmarkSet};
use crate::ops::{self, HostFn, Kernel1, Real};
use crate::{Error, Result};

/// Relative weights of the loss terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub w_prior: f64,
    pub w_recon: f64,
    pub w_kl: f64,
    /// Scale of the separation term inside the prior. `0` leaves only the
    /// concentration term.
    pub w_separation: f64,
    /// One weight per feature layer. Empty means 1 for every layer.
    pub perceptual_layer_weights: Vec<f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_prior: 1.0,
            w_recon: 1.0,
            w_kl: 0.1,
            w_separation: 1.0,
            perceptual_layer_weights: Vec::new(),
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let scalars = [
            ("w_prior", self.w_prior),
            ("w_recon", self.w_recon),
            ("w_kl", self.w_kl),
            ("w_separation", self.w_separation),
        ];
        for (name, v) in scalars {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if let Some(v) = self.perceptual_layer_weights.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::config(format!("perceptual layer weights must be >= 0, got {v}")));
        }
        if self.w_prior == 0.0 && self.w_recon == 0.0 && self.w_kl == 0.0 {
            return Err(Error::config("at least one of w_prior, w_recon, w_kl must be positive"));
        }
        Ok(())
    }

    /// Layer weights expanded to `n` layers.
    pub fn layer_weights(&self, n: usize) -> Result<Vec<f64>> {
        match self.perceptual_layer_weights.len() {
            0 => Ok(vec![1.0; n]),
            m if m == n => Ok(self.perceptual_layer_weights.clone()),
            m => Err(Error::config(format!("{m} perceptual layer weights for {n} feature layers"))),
        }
    }
}

/// Unweighted scalar values of each term.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub separation: f64,
    pub concentration: f64,
    pub recon_l1: f64,
    pub recon_perceptual: f64,
    pub kl: f64,
}

/// Weighted loss values. `separation` already carries `w_separation`, so
/// `prior = separation + concentration`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub prior: f64,
    pub separation: f64,
    pub concentration: f64,
    pub recon_l1: f64,
    pub recon_perceptual: f64,
    pub kl: f64,
    pub total: f64,
}

pub fn total_loss(parts: &LossParts, weights: &LossWeights) -> Result<LossBundle> {
    let named = [
        ("separation", parts.separation),
        ("concentration", parts.concentration),
        ("recon_l1", parts.recon_l1),
        ("recon_perceptual", parts.recon_perceptual),
        ("kl", parts.kl),
    ];
    for (component, value) in named {
        if !value.is_finite() {
            return Err(Error::TrainingFault {
                component: component.to_string(),
                value,
            });
        }
    }
    let separation = weights.w_separation * parts.separation;
    let prior = separation + parts.concentration;
    let total = weights.w_prior * prior + weights.w_recon * (parts.recon_l1 + parts.recon_perceptual) + weights.w_kl * parts.kl;
    Ok(LossBundle {
        prior,
        separation,
        concentration: parts.concentration,
        recon_l1: parts.recon_l1,
        recon_perceptual: parts.recon_perceptual,
        kl: parts.kl,
        total,
    })
}

/// The loss terms as scalar tensors of one forward pass.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub separation: Tensor,
    pub concentration: Tensor,
    pub recon_l1: Tensor,
    pub recon_perceptual: Tensor,
    pub kl: Tensor,
}

impl LossTerms {
    pub fn parts(&self) -> Result<LossParts> {
        Ok(LossParts {
            separation: scalar(&self.separation)?,
            concentration: scalar(&self.concentration)?,
            recon_l1: scalar(&self.recon_l1)?,
            recon_perceptual: scalar(&self.recon_perceptual)?,
            kl: scalar(&self.kl)?,
        })
    }

    /// Weighted total as a graph node, plus the reported values. Fails on any
    /// non-finite term before a backward pass can spread it.
    pub fn combine(&self, weights: &LossWeights) -> Result<(Tensor, LossBundle)> {
        let bundle = total_loss(&self.parts()?, weights)?;
        let prior = ((&self.separation * weights.w_separation)? + &self.concentration)?;
        let recon = (&self.recon_l1 + &self.recon_perceptual)?;
        let total = (((prior * weights.w_prior)? + (recon * weights.w_recon)?)? + (&self.kl * weights.w_kl)?)?;
        Ok((total, bundle))
    }
}

/// Reads a single-element tensor as `f64`.
pub fn scalar(t: &Tensor) -> Result<f64> {
    let v = ops::to_f64_vec(t)?;
    match v.as_slice() {
        [x] => Ok(*x),
        _ => Err(Error::shape(format!("expected a scalar, got shape {:?}", t.dims()))),
    }
}

fn check_sigma(sigma_sep: f64) -> Result<()> {
    if !(sigma_sep.is_finite() && sigma_sep > 0.0) {
        return Err(Error::config(format!("sigma_sep must be positive, got {sigma_sep}")));
    }
    Ok(())
}

struct SeparationGrad {
    batch: usize,
    k: usize,
    sigma: f64,
}

impl HostFn for SeparationGrad {
    fn run<T: Real>(&self, inputs: &[&[T]]) -> Vec<T> {
        kernels::separation_backward(inputs[0], self.batch, self.k, self.sigma, inputs[1][0].f())
    }
}

struct ConcentrationGrad {
    planes: usize,
    height: usize,
    width: usize,
}

impl HostFn for ConcentrationGrad {
    fn run<T: Real>(&self, inputs: &[&[T]]) -> Vec<T> {
        kernels::concentration_backward(inputs[0], self.planes, self.height, self.width, inputs[1][0].f())
    }
}

struct SeparationKernel {
    batch: usize,
    k: usize,
    sigma: f64,
}

impl Kernel1 for SeparationKernel {
    const NAME: &'static str = "separation-loss";

    fn out_shape(&self, _input: &Shape) -> candle_core::Result<Shape> {
        Ok(Shape::from(()))
    }

    fn forward<T: Real>(&self, input: &[T]) -> Vec<T> {
        vec![T::of(kernels::separation_forward(input, self.batch, self.k, self.sigma))]
    }

    fn backward(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Tensor> {
        let g = SeparationGrad {
            batch: self.batch,
            k: self.k,
            sigma: self.sigma,
        };
        ops::host(&g, &[arg, &grad.reshape(1)?], arg.shape())
    }
}

struct ConcentrationKernel {
    planes: usize,
    height: usize,
    width: usize,
}

impl Kernel1 for ConcentrationKernel {
    const NAME: &'static str = "concentration-loss";

    fn out_shape(&self, _input: &Shape) -> candle_core::Result<Shape> {
        Ok(Shape::from(()))
    }

    fn forward<T: Real>(&self, input: &[T]) -> Vec<T> {
        vec![T::of(kernels::concentration_forward(input, self.planes, self.height, self.width))]
    }

    fn backward(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Tensor> {
        let g = ConcentrationGrad {
            planes: self.planes,
            height: self.height,
            width: self.width,
        };
        ops::host(&g, &[arg, &grad.reshape(1)?], arg.shape())
    }
}

/// Sum over ordered channel pairs of `exp(-|h_i - h_j|^2 / (2 sigma_sep^2))`,
/// averaged over the batch.
pub fn separation_loss(h: &HeatmapTensor, sigma_sep: f64) -> Result<Tensor> {
    check_sigma(sigma_sep)?;
    let (batch, k, _, _) = h.dims();
    Ok(ops::apply(
        h.values(),
        SeparationKernel {
            batch,
            k,
            sigma: sigma_sep,
        },
    )?)
}

/// Separation computed on soft-argmax coordinates instead of whole maps.
pub fn separation_loss_coords(points: &LandmarkSet, sigma_sep: f64) -> Result<Tensor> {
    check_sigma(sigma_sep)?;
    let (batch, k) = points.dims();
    let c = points.coords();
    let diff = c.unsqueeze(2)?.broadcast_sub(&c.unsqueeze(1)?)?;
    let kernel = (diff.sqr()?.sum(D::Minus1)? * (-1.0 / (2.0 * sigma_sep * sigma_sep)))?.exp()?;
    // The diagonal contributes exactly exp(0) = 1 per channel.
    let off_diagonal = (kernel.sum_all()? - (batch * k) as f64)?;
    Ok((off_diagonal / batch.max(1) as f64)?)
}

/// Mean over batch and channels of each map's spatial variance about its soft-argmax.
pub fn concentration_loss(h: &HeatmapTensor) -> Result<Tensor> {
    let (batch, k, height, width) = h.dims();
    Ok(ops::apply(
        h.values(),
        ConcentrationKernel {
            planes: batch * k,
            height,
            width,
        },
    )?)
}

fn mean_abs_diff(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("cannot compare {:?} with {:?}", a.dims(), b.dims())));
    }
    Ok((a - b)?.abs()?.mean_all()?)
}

/// `(mean |x - x_hat|, sum_l lambda_l * mean |psi_l(x) - psi_l(x_hat)|)`.
///
/// Features of the target `x` are detached.
pub fn reconstruction_loss(
    x: &Tensor,
    x_hat: &Tensor,
    features: &dyn FeatureExtractor,
    layer_weights: &[f64],
) -> Result<(Tensor, Tensor)> {
    let l1 = mean_abs_diff(x, x_hat)?;
    let fx = features.features(&x.detach())?;
    let fy = features.features(x_hat)?;
    if fx.len() != layer_weights.len() {
        return Err(Error::config(format!(
            "{} perceptual layer weights for {} feature layers of `{}`",
            layer_weights.len(),
            fx.len(),
            features.name()
        )));
    }
    let mut perceptual = l1.zeros_like()?;
    for ((a, b), &w) in fx.iter().zip(&fy).zip(layer_weights) {
        if w != 0.0 {
            perceptual = (perceptual + (mean_abs_diff(&a.detach(), b)? * w)?)?;
        }
    }
    Ok((l1, perceptual))
}

/// `0.5 * |mu_q - mu_p|^2`, averaged over the batch.
pub fn kl_loss(mu_q: &Tensor, mu_p: &Tensor) -> Result<Tensor> {
    if mu_q.dims() != mu_p.dims() || mu_q.rank() != 2 {
        return Err(Error::shape(format!(
            "style means must both be (batch, D), got {:?} and {:?}",
            mu_q.dims(),
            mu_p.dims()
        )));
    }
    let batch = mu_q.dim(0)?.max(1);
    Ok(((mu_q - mu_p)?.sqr()?.sum_all()? * (0.5 / batch as f64))?)
}
