use candle_core::{DType, Tensor};

use crate::geometry::LandmarkSet;
use crate::losses::FeatureExtractor;
use crate::ops::to_f64_vec;
use crate::{Error, Result};

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("cannot compare {:?} with {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

fn layers(a: &Tensor, b: &Tensor, features: &dyn FeatureExtractor, metric: &str) -> Result<Vec<(Tensor, Tensor)>> {
    same_shape(a, b)?;
    let fa = features.features(a)?;
    let fb = features.features(b)?;
    if fa.is_empty() {
        return Err(Error::MetricUnavailable {
            metric: metric.into(),
            reason: format!("feature extractor `{}` has no layers", features.name()),
        });
    }
    Ok(fa.into_iter().zip(fb).collect())
}

/// `(batch, C, C)` Gram matrices of `(batch, C, H, W)` features, divided by `C * H * W`.
pub fn gram(f: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = f.dims4()?;
    let flat = f.to_dtype(DType::F64)?.reshape((b, c, h * w))?;
    Ok((flat.matmul(&flat.t()?)? / (c * h * w) as f64)?)
}

/// Sum over layers of the squared Frobenius distance between Gram
/// matrices, averaged over the batch.
pub fn style_similarity(a: &Tensor, b: &Tensor, features: &dyn FeatureExtractor) -> Result<f64> {
    let mut total = 0.0;
    for (fa, fb) in layers(a, b, features, "style_similarity")? {
        let batch = fa.dim(0)?;
        let d = (gram(&fa)? - gram(&fb)?)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
        total += d / batch as f64;
    }
    Ok(total)
}

/// Sum over layers of the mean squared feature difference.
pub fn content_similarity(a: &Tensor, b: &Tensor, features: &dyn FeatureExtractor) -> Result<f64> {
    let mut total = 0.0;
    for (fa, fb) in layers(a, b, features, "content_similarity")? {
        let d = (fa.to_dtype(DType::F64)? - fb.to_dtype(DType::F64)?)?;
        total += d.sqr()?.mean_all()?.to_scalar::<f64>()?;
    }
    Ok(total)
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filter over every full window position.
fn filter_valid(img: &[f64], h: usize, w: usize, win: &[f64]) -> Vec<f64> {
    let n = win.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = (0..n).map(|t| win[t] * img[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..n).map(|t| win[t] * rows[(i + t) * ow + j]).sum();
        }
    }
    out
}

/// Mean structural similarity between two `(batch, C, H, W)` batches with
/// values in `[-1, 1]`, using an 11x11 Gaussian window (sigma 1.5),
/// `K1 = 0.01`, `K2 = 0.03` and a data range of 2. Averaged over window
/// positions, channels and images.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    let (bs, c, h, w) = a.dims4()?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(format!("ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    let range = 2.0;
    let c1 = (SSIM_K1 * range) * (SSIM_K1 * range);
    let c2 = (SSIM_K2 * range) * (SSIM_K2 * range);
    let win = gaussian_window();
    let av = to_f64_vec(a)?;
    let bv = to_f64_vec(b)?;
    let plane = h * w;
    let mut total = 0.0;
    let mut count = 0usize;
    for p in 0..bs * c {
        let x = &av[p * plane..(p + 1) * plane];
        let y = &bv[p * plane..(p + 1) * plane];
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(y).map(|(u, v)| u * v).collect();
        let mx = filter_valid(x, h, w, &win);
        let my = filter_valid(y, h, w, &win);
        let sxx = filter_valid(&xx, h, w, &win);
        let syy = filter_valid(&yy, h, w, &win);
        let sxy = filter_valid(&xy, h, w, &win);
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            total += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Distance used to normalize landmark errors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LandmarkNorm {
    /// Distance between two ground-truth landmarks (the eyes), per image.
    InterOcular { left: usize, right: usize },
    /// Image diagonal, `2 * sqrt(2)` in normalized coordinates.
    Diagonal,
}

/// Mean Euclidean landmark error divided by the chosen normalizer.
pub fn landmark_error(pred: &LandmarkSet, gt: &LandmarkSet, norm: LandmarkNorm) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(Error::shape(format!("predicted {:?} and ground-truth {:?} landmarks differ", pred.dims(), gt.dims())));
    }
    let (b, k) = gt.dims();
    if let LandmarkNorm::InterOcular { left, right } = norm {
        if left >= k || right >= k || left == right {
            return Err(Error::config(format!("eye indices ({left}, {right}) invalid for {k} landmarks")));
        }
    }
    let mut total = 0.0;
    for item in 0..b {
        let p = pred.points(item)?;
        let g = gt.points(item)?;
        let scale = match norm {
            LandmarkNorm::Diagonal => 2.0 * std::f64::consts::SQRT_2,
            LandmarkNorm::InterOcular { left, right } => dist(g[left], g[right]),
        };
        if !(scale > 0.0) {
            return Err(Error::MetricUnavailable {
                metric: "landmark_error".into(),
                reason: format!("normalizer is zero for item {item}"),
            });
        }
        let e: f64 = p.iter().zip(&g).map(|(u, v)| dist(*u, *v)).sum::<f64>() / k as f64;
        total += e / scale;
    }
    Ok(total / b as f64)
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// A classifier giving `(batch, classes)` probabilities.
pub trait Classifier {
    fn probabilities(&self, x: &Tensor) -> Result<Tensor>;
}

/// `exp(E_x KL(p(y|x) || p(y)))` over rows of class probabilities.
pub fn classifier_entropy_score(probs: &Tensor) -> Result<f64> {
    let (n, c) = probs.dims2()?;
    if n == 0 || c == 0 {
        return Err(Error::shape("classifier entropy score needs a non-empty probability matrix"));
    }
    let p = to_f64_vec(probs)?;
    let mut marginal = vec![0.0; c];
    for row in p.chunks_exact(c) {
        for (m, v) in marginal.iter_mut().zip(row) {
            *m += v / n as f64;
        }
    }
    let mut kl = 0.0;
    for row in p.chunks_exact(c) {
        for (v, m) in row.iter().zip(&marginal) {
            if *v > 0.0 {
                kl += v * (v / m).ln();
            }
        }
    }
    Ok((kl / n as f64).exp())
}
