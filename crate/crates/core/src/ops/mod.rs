//! Forward kernels and their vector-Jacobian products.
//!
//! Spatial ops accept a single `H x W x C` image or a `B x H x W x C` batch
//! and keep the caller's rank.

mod activation;
mod conv;
mod dense;
mod loss;
mod pool;

pub use activation::{dropout, dropout_mask, relu, relu_backward, softmax, softmax_backward};
pub use conv::{conv2d, conv2d_backward, window_extent, ConvGeometry, ConvGrads};
pub use dense::{pointwise_dense, pointwise_dense_backward, DenseGrads};
pub use loss::{cross_entropy, cross_entropy_backward, PROB_FLOOR};
pub use pool::{global_avg_pool, global_avg_pool_backward, maxpool2d, maxpool2d_backward};

use crate::error::{Error, Result};

/// A channels-last spatial shape with an optional batch axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct BatchView {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub batched: bool,
}

impl BatchView {
    pub(crate) fn spatial(shape: &[usize]) -> Result<Self> {
        match *shape {
            [height, width, channels] => Ok(BatchView {
                batch: 1,
                height,
                width,
                channels,
                batched: false,
            }),
            [batch, height, width, channels] => Ok(BatchView {
                batch,
                height,
                width,
                channels,
                batched: true,
            }),
            _ => Err(Error::ShapeMismatch(format!(
                "expected H x W x C or B x H x W x C, got {shape:?}"
            ))),
        }
    }

    pub(crate) fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub(crate) fn shape_with(&self, height: usize, width: usize, channels: usize) -> Vec<usize> {
        if self.batched {
            vec![self.batch, height, width, channels]
        } else {
            vec![height, width, channels]
        }
    }
}
