use crate::error::{Error, Result};
use crate::ops::{window_extent, BatchView};
use crate::par;
use crate::tensor::{Element, Tensor};

/// Max over `k x k` windows per channel. Also returns, for every output
/// element, the flat input index that won (first maximum in scan order).
pub fn maxpool2d<T: Element>(
    x: &Tensor<T>,
    k: usize,
    stride: usize,
) -> Result<(Tensor<T>, Vec<u32>)> {
    let v = BatchView::spatial(x.shape())?;
    if v.height < k || v.width < k {
        return Err(Error::InvalidHyperparameter(format!(
            "pool window {k} larger than {}x{} input",
            v.height, v.width
        )));
    }
    let oh = window_extent(v.height, k, stride, 0)?;
    let ow = window_extent(v.width, k, stride, 0)?;
    let c = v.channels;
    let out_image = oh * ow * c;
    let data = x.data();
    let mut winners = vec![(T::zero(), 0u32); v.batch * out_image];
    par::for_each_chunk_mut(&mut winners, out_image, |bi, chunk| {
        let base = bi * v.image_len();
        for (o, slot) in chunk.iter_mut().enumerate() {
            let (pos, ch) = (o / c, o % c);
            let (oy, ox) = (pos / ow, pos % ow);
            let at = |ky: usize, kx: usize| {
                base + ((oy * stride + ky) * v.width + ox * stride + kx) * c + ch
            };
            let mut best_at = at(0, 0);
            for ky in 0..k {
                for kx in 0..k {
                    let i = at(ky, kx);
                    if data[i] > data[best_at] {
                        best_at = i;
                    }
                }
            }
            *slot = (data[best_at], best_at as u32);
        }
    });
    let (out, argmax): (Vec<T>, Vec<u32>) = winners.into_iter().unzip();
    Ok((Tensor::new(v.shape_with(oh, ow, c), out)?, argmax))
}

/// Routes each upstream gradient to the input element that won its window.
pub fn maxpool2d_backward<T: Element>(
    x_shape: &[usize],
    argmax: &[u32],
    dy: &Tensor<T>,
) -> Result<Tensor<T>> {
    if argmax.len() != dy.len() {
        return Err(Error::ShapeMismatch(format!(
            "pool gradient {:?} does not match {} recorded windows",
            dy.shape(),
            argmax.len()
        )));
    }
    let mut dx = Tensor::zeros(x_shape.to_vec());
    let out = dx.data_mut();
    for (&at, &g) in argmax.iter().zip(dy.data()) {
        out[at as usize] = out[at as usize] + g;
    }
    Ok(dx)
}

/// Mean over all spatial positions per channel: `H x W x C -> C`,
/// `B x H x W x C -> B x C`.
pub fn global_avg_pool<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let v = BatchView::spatial(x.shape())?;
    let area = v.height * v.width;
    let scale = T::one() / T::from_f64(area as f64);
    let mut out = vec![T::zero(); v.batch * v.channels];
    for (bi, row) in out.chunks_mut(v.channels).enumerate() {
        let image = &x.data()[bi * v.image_len()..(bi + 1) * v.image_len()];
        for pixel in image.chunks(v.channels) {
            for (acc, &p) in row.iter_mut().zip(pixel) {
                *acc = *acc + p;
            }
        }
        for acc in row.iter_mut() {
            *acc = *acc * scale;
        }
    }
    let shape = if v.batched {
        vec![v.batch, v.channels]
    } else {
        vec![v.channels]
    };
    Tensor::new(shape, out)
}

pub fn global_avg_pool_backward<T: Element>(x_shape: &[usize], dy: &Tensor<T>) -> Result<Tensor<T>> {
    let v = BatchView::spatial(x_shape)?;
    if dy.len() != v.batch * v.channels {
        return Err(Error::ShapeMismatch(format!(
            "pooled gradient {:?} does not match input {x_shape:?}",
            dy.shape()
        )));
    }
    let scale = T::one() / T::from_f64((v.height * v.width) as f64);
    let mut dx = Vec::with_capacity(v.batch * v.image_len());
    for row in dy.data().chunks(v.channels) {
        for _ in 0..v.height * v.width {
            dx.extend(row.iter().map(|&g| g * scale));
        }
    }
    Tensor::new(x_shape.to_vec(), dx)
}
