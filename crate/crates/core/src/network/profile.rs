use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    LayerKind, LayerSpec, Network, HEAD_CONV_FILTERS, HEAD_CONV_KERNEL, HEAD_DROPOUT, HEAD_UNITS,
};
use crate::error::{Error, Result};

/// What sits on top of the convolutional blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// flatten, fc 4096, fc 4096, 1000-way softmax.
    ImagenetTop,
    /// The grafted transfer head (see [`Network::graft_head`]).
    PaperHead,
    None,
}

/// Backbone geometry. The default is the 20-layer VGG19-like network:
/// blocks of 2, 2, 4, 4, 5 convolutions with 64..512 filters on 224x224 RGB.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchProfile {
    pub input_shape: [usize; 3],
    pub block_conv_counts: Vec<usize>,
    pub block_filters: Vec<usize>,
    pub head: HeadKind,
    pub width_divisor: usize,
    /// Output classes when `head` is `paper_head`.
    pub num_classes: usize,
}

impl Default for ArchProfile {
    fn default() -> Self {
        ArchProfile {
            input_shape: [224, 224, 3],
            block_conv_counts: vec![2, 2, 4, 4, 5],
            block_filters: vec![64, 128, 256, 512, 512],
            head: HeadKind::None,
            width_divisor: 1,
            num_classes: 2,
        }
    }
}

impl ArchProfile {
    /// Canonical VGG19 block layout (2, 2, 4, 4, 4).
    pub fn vgg19() -> Self {
        ArchProfile {
            block_conv_counts: vec![2, 2, 4, 4, 4],
            ..Self::default()
        }
    }

    /// Desk-scale variant: 32x32 input, a quarter of the filters.
    pub fn scaled() -> Self {
        ArchProfile {
            input_shape: [32, 32, 3],
            width_divisor: 4,
            ..Self::default()
        }
    }

    pub fn with_head(mut self, head: HeadKind) -> Self {
        self.head = head;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidProfile(msg));
        if self.block_conv_counts.len() != self.block_filters.len() {
            return bad(format!(
                "{} block conv counts but {} block filter counts",
                self.block_conv_counts.len(),
                self.block_filters.len()
            ));
        }
        if self.block_conv_counts.is_empty() {
            return bad("at least one block is required".into());
        }
        if self.block_conv_counts.contains(&0) {
            return bad("every block needs at least one convolution".into());
        }
        if self.width_divisor == 0 {
            return bad("width_divisor must be positive".into());
        }
        if let Some(f) = self
            .block_filters
            .iter()
            .find(|&&f| f == 0 || f % self.width_divisor != 0)
        {
            return bad(format!(
                "width_divisor {} does not divide filter count {f}",
                self.width_divisor
            ));
        }
        if self.input_shape.contains(&0) {
            return bad(format!("input shape {:?} has a zero extent", self.input_shape));
        }
        if self.head == HeadKind::PaperHead && self.num_classes < 2 {
            return bad("paper head needs at least two classes".into());
        }
        Ok(())
    }

    /// Spatial extent after every block's 2x2 pool, or the block that fails.
    fn check_pooling(&self) -> Result<()> {
        let [mut h, mut w, _] = self.input_shape;
        for block in 1..=self.block_conv_counts.len() {
            if h < 2 || w < 2 {
                return Err(Error::ShapeUnderflow {
                    input: self.input_shape,
                    detail: format!("block {block} pool receives {h}x{w}"),
                });
            }
            h /= 2;
            w /= 2;
        }
        Ok(())
    }
}

pub(crate) fn block_pool_name(block: usize) -> String {
    format!("block{block}_pool")
}

/// Builds the convolutional blocks (3x3 conv, stride 1, pad 1, ReLU; then a
/// 2x2 stride-2 max pool) followed by the profile's head. Weights are drawn
/// from `seed`.
pub fn build_backbone(profile: &ArchProfile, seed: u64) -> Result<Network> {
    profile.validate()?;
    profile.check_pooling()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Network::new(profile.input_shape)?;
    for (b, (&count, &filters)) in profile
        .block_conv_counts
        .iter()
        .zip(&profile.block_filters)
        .enumerate()
    {
        let block = b + 1;
        let filters = filters / profile.width_divisor;
        for i in 1..=count {
            net.push(
                LayerSpec::new(
                    format!("block{block}_conv{i}"),
                    LayerKind::Conv {
                        filters,
                        kernel: 3,
                        stride: 1,
                        pad: 1,
                    },
                ),
                &mut rng,
            )?;
            net.push(LayerSpec::new(format!("block{block}_relu{i}"), LayerKind::Relu), &mut rng)?;
        }
        net.push(
            LayerSpec::new(block_pool_name(block), LayerKind::MaxPool { size: 2, stride: 2 }),
            &mut rng,
        )?;
    }
    match profile.head {
        HeadKind::None => {}
        HeadKind::ImagenetTop => {
            for layer in [
                LayerSpec::new("flatten", LayerKind::Flatten),
                LayerSpec::new("fc1", LayerKind::Dense { units: 4096 }),
                LayerSpec::new("fc1_relu", LayerKind::Relu),
                LayerSpec::new("fc2", LayerKind::Dense { units: 4096 }),
                LayerSpec::new("fc2_relu", LayerKind::Relu),
                LayerSpec::new("predictions", LayerKind::Dense { units: 1000 }),
                LayerSpec::new("predictions_softmax", LayerKind::Softmax),
            ] {
                net.push(layer, &mut rng)?;
            }
        }
        HeadKind::PaperHead => {
            net.graft_head_with(profile.num_classes, &mut rng)?;
        }
    }
    Ok(net)
}

impl Network {
    /// Index just past the last block pool, if the network has blocks.
    fn backbone_end(&self) -> Option<usize> {
        self.layers()
            .iter()
            .rposition(|l| {
                l.name.starts_with("block")
                    && l.name.ends_with("_pool")
                    && matches!(l.kind, LayerKind::MaxPool { .. })
            })
            .map(|i| i + 1)
    }

    /// Removes everything after the last convolutional block. Idempotent.
    pub fn truncate_top(&mut self) {
        if let Some(end) = self.backbone_end() {
            self.truncate(end);
        }
    }

    /// Appends the transfer head: 5-filter 5x5 conv + ReLU, pointwise dense
    /// to 128, global average pool, dropout 0.3, dense to `num_classes`,
    /// softmax. New parameters are Glorot-initialised from `seed` and
    /// trainable.
    pub fn graft_head(&mut self, num_classes: usize, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.graft_head_with(num_classes, &mut rng)
    }

    fn graft_head_with(&mut self, num_classes: usize, rng: &mut ChaCha8Rng) -> Result<()> {
        if self.output_shape().len() != 3 {
            return Err(Error::ShapeMismatch(format!(
                "head must be grafted onto a spatial feature map, network ends at {:?}",
                self.output_shape()
            )));
        }
        if num_classes == 0 {
            return Err(Error::InvalidHyperparameter("num_classes must be positive".into()));
        }
        let layers = [
            LayerSpec::new(
                "head_conv",
                LayerKind::Conv {
                    filters: HEAD_CONV_FILTERS,
                    kernel: HEAD_CONV_KERNEL,
                    stride: 1,
                    pad: HEAD_CONV_KERNEL / 2,
                },
            ),
            LayerSpec::new("head_relu", LayerKind::Relu),
            LayerSpec::new("head_pointwise", LayerKind::PointwiseDense { units: HEAD_UNITS }),
            LayerSpec::new("head_gap", LayerKind::GlobalAvgPool),
            LayerSpec::new("head_dropout", LayerKind::Dropout { rate: HEAD_DROPOUT }),
            LayerSpec::new("head_dense", LayerKind::Dense { units: num_classes }),
            LayerSpec::new("head_softmax", LayerKind::Softmax),
        ];
        let start = self.layers().len();
        for layer in layers {
            if let Err(e) = self.push(layer, rng) {
                self.truncate(start);
                return Err(e);
            }
        }
        Ok(())
    }

    /// Number of classes produced by a softmax-terminated network.
    pub fn num_classes(&self) -> Option<usize> {
        match self.layers().last()?.kind {
            LayerKind::Softmax => self.output_shape().last().copied(),
            _ => None,
        }
    }
}
