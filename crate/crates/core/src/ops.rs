//! Bridge between host-side kernels written over plain slices and candle's
//! autograd graph.
//!
//! Kernels are generic over [`Real`] so the same code path runs in `f32` for
//! training and in `f64` for gradient checks.

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, DType, Layout, Shape, Tensor};
use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Real:
    Float + FromPrimitive + ToPrimitive + Copy + Send + Sync + std::fmt::Debug + 'static
{
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable")
    }

    fn f(self) -> f64 {
        self.to_f64().expect("float converts to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// A forward kernel with a hand-written backward pass.
pub(crate) trait Kernel1: Send + Sync + 'static {
    const NAME: &'static str;

    fn out_shape(&self, input: &Shape) -> candle_core::Result<Shape>;

    fn forward<T: Real>(&self, input: &[T]) -> Vec<T>;

    fn backward(&self, arg: &Tensor, res: &Tensor, grad: &Tensor) -> candle_core::Result<Tensor>;
}

pub(crate) struct Op1<K>(pub K);

impl<K: Kernel1> CustomOp1 for Op1<K> {
    fn name(&self) -> &'static str {
        K::NAME
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (start, end) = layout
            .contiguous_offsets()
            .ok_or(candle_core::Error::RequiresContiguous { op: K::NAME })?;
        let shape = self.0.out_shape(layout.shape())?;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(self.0.forward(&v[start..end])),
            CpuStorage::F64(v) => CpuStorage::F64(self.0.forward(&v[start..end])),
            other => {
                return Err(candle_core::Error::UnsupportedDTypeForOp(other.dtype(), K::NAME));
            }
        };
        Ok((out, shape))
    }

    fn bwd(&self, arg: &Tensor, res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        self.0.backward(arg, res, grad).map(Some)
    }
}

/// Applies a kernel after making the input contiguous.
pub(crate) fn apply<K: Kernel1>(t: &Tensor, k: K) -> candle_core::Result<Tensor> {
    t.contiguous()?.apply_op1(Op1(k))
}

/// A host computation over several same-dtype tensors, used for backward passes.
pub(crate) trait HostFn {
    fn run<T: Real>(&self, inputs: &[&[T]]) -> Vec<T>;
}

pub(crate) fn host<F: HostFn>(f: &F, inputs: &[&Tensor], shape: impl Into<Shape>) -> candle_core::Result<Tensor> {
    let first = inputs
        .first()
        .ok_or_else(|| candle_core::Error::Msg("host op needs at least one input".into()))?;
    let device = first.device().clone();
    match first.dtype() {
        DType::F32 => {
            let data = inputs
                .iter()
                .map(|t| t.flatten_all()?.to_vec1::<f32>())
                .collect::<candle_core::Result<Vec<_>>>()?;
            let slices: Vec<&[f32]> = data.iter().map(|v| v.as_slice()).collect();
            Tensor::from_vec(f.run(&slices), shape, &device)
        }
        DType::F64 => {
            let data = inputs
                .iter()
                .map(|t| t.flatten_all()?.to_vec1::<f64>())
                .collect::<candle_core::Result<Vec<_>>>()?;
            let slices: Vec<&[f64]> = data.iter().map(|v| v.as_slice()).collect();
            Tensor::from_vec(f.run(&slices), shape, &device)
        }
        dt => Err(candle_core::Error::UnsupportedDTypeForOp(dt, "host")),
    }
}

/// Copies a tensor to the host as `f64`, whatever its float dtype.
pub fn to_f64_vec(t: &Tensor) -> candle_core::Result<Vec<f64>> {
    t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()
}
