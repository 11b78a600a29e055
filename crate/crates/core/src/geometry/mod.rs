//! Differentiable structure bottleneck: raw activations are normalized per
//! channel with a spatial softmax, reduced to one landmark per channel with a
//! soft-argmax, and re-rendered as fixed-width Gaussian bumps.
//!
//! Coordinates are normalized to `[-1, 1]` per axis and stored in
//! `(row, col)` order. Pixel `0` maps to `-1` and pixel `n - 1` to `+1`, so a
//! one-hot mass in the top-left pixel has coordinates `(-1, -1)`.

pub mod kernels;

use candle_core::{Shape, Tensor};

use crate::ops::{self, HostFn, Kernel1, Real};
use crate::{Error, Result};

/// Per-channel spatial probability maps, shape `(batch, K, H, W)`.
#[derive(Clone, Debug)]
pub struct HeatmapTensor {
    values: Tensor,
}

/// Soft-argmax landmarks, shape `(batch, K, 2)`, `(row, col)` in `[-1, 1]`.
#[derive(Clone, Debug)]
pub struct LandmarkSet {
    coords: Tensor,
}

/// Re-rendered Gaussian bumps with unit peak, shape `(batch, K, H, W)`.
#[derive(Clone, Debug)]
pub struct StructureMap {
    values: Tensor,
    sigma_render: f64,
}

/// All intermediates of [`structure_bottleneck`].
#[derive(Clone, Debug)]
pub struct Bottleneck {
    pub heatmaps: HeatmapTensor,
    pub landmarks: LandmarkSet,
    pub structure: StructureMap,
}

const SUM_TOLERANCE: f64 = 1e-4;

impl HeatmapTensor {
    /// Wraps an already-normalized tensor, checking non-negativity and unit mass per channel.
    pub fn new(values: Tensor) -> Result<Self> {
        let (b, k, h, w) = dims4(&values, "heatmap")?;
        let data = ops::to_f64_vec(&values)?;
        for (idx, plane) in data.chunks_exact(h * w).enumerate() {
            let sum: f64 = plane.iter().sum();
            let negative = plane.iter().any(|v| *v < 0.0 || !v.is_finite());
            if negative || (sum - 1.0).abs() > SUM_TOLERANCE {
                return Err(Error::DegenerateHeatmap {
                    batch: idx / k,
                    channel: idx % k,
                    sum,
                });
            }
        }
        debug_assert_eq!(data.len(), b * k * h * w);
        Ok(Self { values })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.values.dims4().expect("heatmap is rank 4")
    }

    pub fn into_inner(self) -> Tensor {
        self.values
    }
}

impl LandmarkSet {
    pub fn new(coords: Tensor) -> Result<Self> {
        let dims = coords.dims();
        if dims.len() != 3 || dims[2] != 2 {
            return Err(Error::shape(format!("landmarks must be (batch, K, 2), got {dims:?}")));
        }
        let data = ops::to_f64_vec(&coords)?;
        if let Some(v) = data.iter().find(|v| !v.is_finite() || v.abs() > 1.0 + 1e-6) {
            return Err(Error::config(format!("landmark coordinate {v} outside [-1, 1]")));
        }
        Ok(Self { coords })
    }

    pub fn coords(&self) -> &Tensor {
        &self.coords
    }

    pub fn dims(&self) -> (usize, usize) {
        let (b, k, _) = self.coords.dims3().expect("landmarks are rank 3");
        (b, k)
    }

    /// Landmarks of one batch item as `(row, col)` pairs.
    pub fn points(&self, item: usize) -> Result<Vec<[f64; 2]>> {
        let v = ops::to_f64_vec(&self.coords.get(item)?)?;
        Ok(v.chunks_exact(2).map(|p| [p[0], p[1]]).collect())
    }

    /// Mean Euclidean distance over unordered landmark pairs, averaged over the batch.
    ///
    /// Zero when all points collapse onto one location.
    pub fn mean_pairwise_distance(&self) -> Result<f64> {
        let (b, k) = self.dims();
        if k < 2 || b == 0 {
            return Ok(0.0);
        }
        let data = ops::to_f64_vec(&self.coords)?;
        let mut total = 0.0;
        for item in data.chunks_exact(2 * k) {
            let mut acc = 0.0;
            for i in 0..k {
                for j in i + 1..k {
                    let dr = item[2 * i] - item[2 * j];
                    let dc = item[2 * i + 1] - item[2 * j + 1];
                    acc += (dr * dr + dc * dc).sqrt();
                }
            }
            total += acc / (k * (k - 1) / 2) as f64;
        }
        Ok(total / b as f64)
    }
}

impl StructureMap {
    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn sigma_render(&self) -> f64 {
        self.sigma_render
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.values.dims4().expect("structure map is rank 4")
    }
}

fn dims4(t: &Tensor, what: &str) -> Result<(usize, usize, usize, usize)> {
    t.dims4()
        .map_err(|_| Error::shape(format!("{what} must be (batch, K, H, W), got {:?}", t.dims())))
}

struct SoftmaxKernel {
    plane: usize,
    beta: f64,
}

struct SoftmaxGrad {
    plane: usize,
    beta: f64,
}

impl HostFn for SoftmaxGrad {
    fn run<T: Real>(&self, inputs: &[&[T]]) -> Vec<T> {
        kernels::spatial_softmax_backward(inputs[0], inputs[1], self.plane, self.beta)
    }
}

impl Kernel1 for SoftmaxKernel {
    const NAME: &'static str = "spatial-softmax";

    fn out_shape(&self, input: &Shape) -> candle_core::Result<Shape> {
        Ok(input.clone())
    }

    fn forward<T: Real>(&self, input: &[T]) -> Vec<T> {
        kernels::spatial_softmax_forward(input, self.plane, self.beta)
    }

    fn backward(&self, _arg: &Tensor, res: &Tensor, grad: &Tensor) -> candle_core::Result<Tensor> {
        let g = SoftmaxGrad {
            plane: self.plane,
            beta: self.beta,
        };
        ops::host(&g, &[res, grad], res.shape())
    }
}

struct SoftArgmaxKernel {
    height: usize,
    width: usize,
}

struct SoftArgmaxGrad {
    height: usize,
    width: usize,
}

impl HostFn for SoftArgmaxGrad {
    fn run<T: Real>(&self, inputs: &[&[T]]) -> Vec<T> {
        kernels::soft_argmax_backward(inputs[0], self.height, self.width)
    }
}

impl Kernel1 for SoftArgmaxKernel {
    const NAME: &'static str = "soft-argmax";

    fn out_shape(&self, input: &Shape) -> candle_core::Result<Shape> {
        let (b, k, _, _) = input.dims4()?;
        Ok(Shape::from((b, k, 2)))
    }

    fn forward<T: Real>(&self, input: &[T]) -> Vec<T> {
        kernels::soft_argmax_forward(input, self.height, self.width)
    }

    fn backward(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Tensor> {
        let g = SoftArgmaxGrad {
            height: self.height,
            width: self.width,
        };
        ops::host(&g, &[grad], arg.shape())
    }
}

struct RenderKernel {
    height: usize,
    width: usize,
    sigma: f64,
}

struct RenderGrad {
    height: usize,
    width: usize,
    sigma: f64,
}

impl HostFn for RenderGrad {
    fn run<T: Real>(&self, inputs: &[&[T]]) -> Vec<T> {
        kernels::render_backward(inputs[0], inputs[1], inputs[2], self.height, self.width, self.sigma)
    }
}

impl Kernel1 for RenderKernel {
    const NAME: &'static str = "render-gaussian";

    fn out_shape(&self, input: &Shape) -> candle_core::Result<Shape> {
        let (b, k, _) = input.dims3()?;
        Ok(Shape::from((b, k, self.height, self.width)))
    }

    fn forward<T: Real>(&self, input: &[T]) -> Vec<T> {
        kernels::render_forward(input, self.height, self.width, self.sigma)
    }

    fn backward(&self, arg: &Tensor, res: &Tensor, grad: &Tensor) -> candle_core::Result<Tensor> {
        let g = RenderGrad {
            height: self.height,
            width: self.width,
            sigma: self.sigma,
        };
        ops::host(&g, &[arg, res, grad], arg.shape())
    }
}

/// Layer-wise softmax over the spatial positions of each channel.
pub fn spatial_softmax(raw: &Tensor) -> Result<HeatmapTensor> {
    spatial_softmax_scaled(raw, 1.0)
}

/// Spatial softmax of `beta * raw`. Large `beta` sharpens the maps.
pub fn spatial_softmax_scaled(raw: &Tensor, beta: f64) -> Result<HeatmapTensor> {
    let (_, k, h, w) = dims4(raw, "raw activations")?;
    if !(beta.is_finite() && beta > 0.0) {
        return Err(Error::config(format!("softmax scale must be positive, got {beta}")));
    }
    let data = ops::to_f64_vec(raw)?;
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        let plane = pos / (h * w);
        return Err(Error::NonFinite {
            batch: plane / k,
            channel: plane % k,
        });
    }
    let values = ops::apply(raw, SoftmaxKernel { plane: h * w, beta })?;
    Ok(HeatmapTensor { values })
}

/// Probability-weighted mean grid position of each channel.
pub fn soft_argmax(h: &HeatmapTensor) -> Result<LandmarkSet> {
    let (_, _, height, width) = h.dims();
    let coords = ops::apply(&h.values, SoftArgmaxKernel { height, width })?;
    Ok(LandmarkSet { coords })
}

/// Renders `exp(-|p - c|^2 / (2 sigma^2))` around every landmark, with `sigma` in pixels.
pub fn render_gaussian(points: &LandmarkSet, height: usize, width: usize, sigma_render: f64) -> Result<StructureMap> {
    if !(sigma_render.is_finite() && sigma_render > 0.0) {
        return Err(Error::config(format!("sigma_render must be positive, got {sigma_render}")));
    }
    if height < 2 || width < 2 {
        return Err(Error::config(format!("render grid must be at least 2x2, got {height}x{width}")));
    }
    let values = ops::apply(
        &points.coords,
        RenderKernel {
            height,
            width,
            sigma: sigma_render,
        },
    )?;
    Ok(StructureMap { values, sigma_render })
}

/// `raw -> spatial_softmax -> soft_argmax -> render_gaussian`, keeping every intermediate.
pub fn structure_bottleneck(raw: &Tensor, sigma_render: f64) -> Result<Bottleneck> {
    let heatmaps = spatial_softmax(raw)?;
    let landmarks = soft_argmax(&heatmaps)?;
    let (_, _, h, w) = heatmaps.dims();
    let structure = render_gaussian(&landmarks, h, w, sigma_render)?;
    Ok(Bottleneck {
        heatmaps,
        landmarks,
        structure,
    })
}
