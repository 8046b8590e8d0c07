use crate::error::{Error, Result};
use crate::gemm::{gemm, Op};
use crate::ops::BatchView;
use crate::par;
use crate::tensor::{Element, Tensor};

/// Resolved geometry of one convolution call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_height: usize,
    pub out_width: usize,
}

/// Output extent of a sliding window: `floor((n + 2 pad - k) / stride) + 1`.
pub fn window_extent(n: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if k == 0 || stride == 0 {
        return Err(Error::InvalidHyperparameter(format!(
            "kernel {k} and stride {stride} must be at least 1"
        )));
    }
    let padded = n + 2 * pad;
    if padded < k {
        return Err(Error::InvalidHyperparameter(format!(
            "kernel {k} does not fit extent {n} with pad {pad}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

impl ConvGeometry {
    pub fn resolve(
        x_shape: &[usize],
        w_shape: &[usize],
        b_shape: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let view = BatchView::spatial(x_shape)?;
        let [k, k2, cin, cout] = <[usize; 4]>::try_from(w_shape).map_err(|_| {
            Error::ShapeMismatch(format!("conv kernel must be k x k x Cin x Cout, got {w_shape:?}"))
        })?;
        if k != k2 {
            return Err(Error::ShapeMismatch(format!(
                "conv kernel must be square, got {w_shape:?}"
            )));
        }
        if cin != view.channels {
            return Err(Error::ShapeMismatch(format!(
                "input has {} channels, kernel expects {cin}",
                view.channels
            )));
        }
        if b_shape != [cout] {
            return Err(Error::ShapeMismatch(format!(
                "bias shape {b_shape:?} does not match {cout} filters"
            )));
        }
        Ok(ConvGeometry {
            batch: view.batch,
            height: view.height,
            width: view.width,
            in_channels: cin,
            out_channels: cout,
            kernel: k,
            stride,
            pad,
            out_height: window_extent(view.height, k, stride, pad)?,
            out_width: window_extent(view.width, k, stride, pad)?,
        })
    }

    fn rows(&self) -> usize {
        self.batch * self.out_height * self.out_width
    }

    fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.in_channels
    }

    fn out_shape(&self, batched: bool) -> Vec<usize> {
        let mut shape = vec![self.out_height, self.out_width, self.out_channels];
        if batched {
            shape.insert(0, self.batch);
        }
        shape
    }

    /// Input coordinate for output `o` and kernel tap `t`, if inside the image.
    #[inline]
    fn source(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        (o * self.stride + t).checked_sub(self.pad).filter(|&i| i < extent)
    }
}

/// Unrolls receptive fields into a `(B*H'*W') x (k*k*Cin)` matrix.
fn im2col<T: Element>(x: &[T], g: &ConvGeometry) -> Vec<T> {
    let patch = g.patch_len();
    let mut cols = vec![T::zero(); g.rows() * patch];
    let per_image = g.out_height * g.out_width;
    let rows_per_task = (g.rows().div_ceil(par::threads() * 4)).max(16);
    par::for_each_chunk_mut(&mut cols, rows_per_task * patch, |task, chunk| {
        for (local, row) in chunk.chunks_mut(patch).enumerate() {
            let r = task * rows_per_task + local;
            let (bi, pos) = (r / per_image, r % per_image);
            let (oy, ox) = (pos / g.out_width, pos % g.out_width);
            let image = &x[bi * g.height * g.width * g.in_channels..];
            for ky in 0..g.kernel {
                let Some(iy) = g.source(oy, ky, g.height) else {
                    continue;
                };
                for kx in 0..g.kernel {
                    let Some(ix) = g.source(ox, kx, g.width) else {
                        continue;
                    };
                    let src = (iy * g.width + ix) * g.in_channels;
                    let dst = (ky * g.kernel + kx) * g.in_channels;
                    row[dst..dst + g.in_channels]
                        .copy_from_slice(&image[src..src + g.in_channels]);
                }
            }
        }
    });
    cols
}

/// Scatters patch gradients back onto the input, one image per task.
fn col2im<T: Element>(dcols: &[T], g: &ConvGeometry) -> Vec<T> {
    let image_len = g.height * g.width * g.in_channels;
    let patch = g.patch_len();
    let per_image = g.out_height * g.out_width;
    let mut dx = vec![T::zero(); g.batch * image_len];
    par::for_each_chunk_mut(&mut dx, image_len, |bi, image| {
        for pos in 0..per_image {
            let (oy, ox) = (pos / g.out_width, pos % g.out_width);
            let row = &dcols[(bi * per_image + pos) * patch..][..patch];
            for ky in 0..g.kernel {
                let Some(iy) = g.source(oy, ky, g.height) else {
                    continue;
                };
                for kx in 0..g.kernel {
                    let Some(ix) = g.source(ox, kx, g.width) else {
                        continue;
                    };
                    let dst = (iy * g.width + ix) * g.in_channels;
                    let src = (ky * g.kernel + kx) * g.in_channels;
                    for (d, &s) in image[dst..dst + g.in_channels]
                        .iter_mut()
                        .zip(&row[src..src + g.in_channels])
                    {
                        *d = *d + s;
                    }
                }
            }
        }
    });
    dx
}

/// 2-D convolution over channels-last input (`H x W x Cin` or
/// `B x H x W x Cin`) with zero padding.
pub fn conv2d<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::resolve(x.shape(), w.shape(), b.shape(), stride, pad)?;
    let cols = im2col(x.data(), &g);
    let mut out = Vec::with_capacity(g.rows() * g.out_channels);
    for _ in 0..g.rows() {
        out.extend_from_slice(b.data());
    }
    gemm(
        g.rows(),
        g.patch_len(),
        g.out_channels,
        &cols,
        Op::N,
        w.data(),
        Op::N,
        &mut out,
        true,
    );
    Tensor::new(g.out_shape(x.rank() == 4), out)
}

/// Gradients of a convolution.
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub kernel: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
    dy: &Tensor<T>,
    need_input: bool,
    need_params: bool,
) -> Result<ConvGrads<T>> {
    let bias_shape = [*w.shape().last().unwrap_or(&0)];
    let g = ConvGeometry::resolve(x.shape(), w.shape(), &bias_shape, stride, pad)?;
    if dy.len() != g.rows() * g.out_channels {
        return Err(Error::ShapeMismatch(format!(
            "conv upstream gradient {:?} does not match output {:?}",
            dy.shape(),
            g.out_shape(x.rank() == 4)
        )));
    }
    let (m, kk, n) = (g.rows(), g.patch_len(), g.out_channels);
    let (kernel, bias) = if need_params {
        let cols = im2col(x.data(), &g);
        let mut dw = vec![T::zero(); kk * n];
        gemm(kk, m, n, &cols, Op::T, dy.data(), Op::N, &mut dw, false);
        let mut db = vec![T::zero(); n];
        for row in dy.data().chunks(n) {
            for (acc, &v) in db.iter_mut().zip(row) {
                *acc = *acc + v;
            }
        }
        (
            Some(Tensor::new(w.shape().to_vec(), dw)?),
            Some(Tensor::new(vec![n], db)?),
        )
    } else {
        (None, None)
    };
    let input = if need_input {
        let mut dcols = vec![T::zero(); m * kk];
        gemm(m, n, kk, dy.data(), Op::N, w.data(), Op::T, &mut dcols, false);
        Some(Tensor::new(x.shape().to_vec(), col2im(&dcols, &g))?)
    } else {
        None
    };
    Ok(ConvGrads {
        input,
        kernel,
        bias,
    })
}
