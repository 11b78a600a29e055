//! Convolutions lowered to `im2col` + matrix multiply.
//!
//! `im2col` and `col2im` are adjoint linear maps, so each one's backward pass
//! is the other applied to the incoming gradient.

use candle_core::{Shape, Tensor};

use super::ParamStore;
use crate::ops::{self, Kernel1, Real};
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Geometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Geometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn cols(&self) -> usize {
        self.out_height() * self.out_width()
    }

    fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Visits every `(column-buffer index, image index)` pair that lies inside the image.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let (oh, ow, k) = (self.out_height(), self.out_width(), self.kernel);
        let cols = oh * ow;
        for c in 0..self.channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let img_row = (c * self.height + iy as usize) * self.width;
                        let col_row = row * cols + oy * ow;
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.width as isize {
                                f(col_row + ox, img_row + ix as usize);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `(B, C, H, W) -> (B, C*k*k, OH*OW)`.
pub(crate) struct Im2Col(pub Geometry);

/// `(B, C*k*k, OH*OW) -> (B, C, H, W)`, summing overlapping taps.
pub(crate) struct Col2Im(pub Geometry);

impl Kernel1 for Im2Col {
    const NAME: &'static str = "im2col";

    fn out_shape(&self, input: &Shape) -> candle_core::Result<Shape> {
        let b = input.dims()[0];
        Ok(Shape::from((b, self.0.rows(), self.0.cols())))
    }

    fn forward<T: Real>(&self, input: &[T]) -> Vec<T> {
        let g = &self.0;
        let (img, col) = (g.image_len(), g.rows() * g.cols());
        let batch = input.len() / img;
        let mut out = vec![T::zero(); batch * col];
        for (src, dst) in input.chunks_exact(img).zip(out.chunks_exact_mut(col)) {
            g.for_each_tap(|ci, ii| dst[ci] = src[ii]);
        }
        out
    }

    fn backward(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Tensor> {
        ops::apply(grad, Col2Im(self.0))
    }
}

impl Kernel1 for Col2Im {
    const NAME: &'static str = "col2im";

    fn out_shape(&self, input: &Shape) -> candle_core::Result<Shape> {
        let b = input.dims()[0];
        Ok(Shape::from((b, self.0.channels, self.0.height, self.0.width)))
    }

    fn forward<T: Real>(&self, input: &[T]) -> Vec<T> {
        let g = &self.0;
        let (img, col) = (g.image_len(), g.rows() * g.cols());
        let batch = input.len() / col;
        let mut out = vec![T::zero(); batch * img];
        for (src, dst) in input.chunks_exact(col).zip(out.chunks_exact_mut(img)) {
            g.for_each_tap(|ci, ii| dst[ii] = dst[ii] + src[ci]);
        }
        out
    }

    fn backward(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Tensor> {
        ops::apply(grad, Im2Col(self.0))
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let weight = store.normal(&format!("{name}.weight"), (out_channels, in_channels, kernel, kernel))?;
        let bias = store.zeros(&format!("{name}.bias"), out_channels)?;
        Ok(Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        })
    }

    /// Wraps existing `(out, in, k, k)` weights and `(out,)` bias. The tensors
    /// are detached, so the layer acts as a fixed function of its input.
    pub fn from_tensors(weight: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Self> {
        let (out_channels, in_channels, kh, kw) = weight.dims4()?;
        if kh != kw || bias.dims() != [out_channels] {
            return Err(crate::Error::shape(format!(
                "conv weight {:?} and bias {:?} do not fit together",
                weight.dims(),
                bias.dims()
            )));
        }
        Ok(Self {
            weight: weight.detach(),
            bias: bias.detach(),
            in_channels,
            out_channels,
            kernel: kh,
            stride,
            pad,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        if c != self.in_channels {
            return Err(crate::Error::shape(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let geo = Geometry {
            channels: c,
            height: h,
            width: w,
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
        };
        let (oh, ow) = (geo.out_height(), geo.out_width());
        let out = if self.kernel == 1 && self.stride == 1 && self.pad == 0 {
            x.reshape((b, c, h * w))?
        } else {
            ops::apply(x, Im2Col(geo))?
        };
        let wm = self.weight.reshape((self.out_channels, geo.rows()))?;
        let y = wm.broadcast_matmul(&out)?;
        let y = y.broadcast_add(&self.bias.reshape((1, self.out_channels, 1))?)?;
        Ok(y.reshape((b, self.out_channels, oh, ow))?)
    }
}

/// Transposed convolution with weight layout `(in, out, k, k)`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    weight: Tensor,
    bias: Tensor,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
}

impl ConvTranspose2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let weight = store.normal(&format!("{name}.weight"), (in_channels, out_channels, kernel, kernel))?;
        let bias = store.zeros(&format!("{name}.bias"), out_channels)?;
        Ok(Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        if c != self.in_channels {
            return Err(crate::Error::shape(format!(
                "transposed conv expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let oh = (h - 1) * self.stride + self.kernel - 2 * self.pad;
        let ow = (w - 1) * self.stride + self.kernel - 2 * self.pad;
        let geo = Geometry {
            channels: self.out_channels,
            height: oh,
            width: ow,
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
        };
        debug_assert_eq!((geo.out_height(), geo.out_width()), (h, w));
        let wm = self
            .weight
            .reshape((self.in_channels, geo.rows()))?
            .t()?;
        let cols = wm.broadcast_matmul(&x.reshape((b, c, h * w))?)?;
        let y = ops::apply(&cols, Col2Im(geo))?;
        Ok(y.broadcast_add(&self.bias.reshape((1, self.out_channels, 1, 1))?)?)
    }
}
