//! Transfer-strategy advisor and the linear probe it recommends for small
//! datasets.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{argmax, TrainConfig};
use crate::data::{derive_seed, normalize, one_hot, Dataset};
use crate::error::{Error, Result};
use crate::network::{LayerKind, LayerSpec, Network};
use crate::ops;
use crate::optim::{OptimizerKind, OptimizerOverrides, OptimizerState};
use crate::tensor::Tensor;

/// Probe learning rate when the config does not set one. Features are
/// standardised, so this is independent of the layer probed.
pub const PROBE_LR: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSize {
    Small,
    Large,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    Similar,
    Different,
}

impl FromStr for DatasetSize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small" => Ok(DatasetSize::Small),
            "large" => Ok(DatasetSize::Large),
            other => Err(Error::InvalidConfig(format!("dataset size `{other}` is not small|large"))),
        }
    }
}

impl FromStr for Similarity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "similar" => Ok(Similarity::Similar),
            "different" => Ok(Similarity::Different),
            other => Err(Error::InvalidConfig(format!(
                "similarity `{other}` is not similar|different"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    LinearProbeTop,
    FullFineTune,
    LinearProbeEarlier,
    RetrainFromPretrained,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::LinearProbeTop => "linear-probe-top",
            Strategy::FullFineTune => "full-fine-tune",
            Strategy::LinearProbeEarlier => "linear-probe-earlier",
            Strategy::RetrainFromPretrained => "retrain-from-pretrained",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Advice {
    pub strategy: Strategy,
    pub rationale: String,
}

pub fn advise(size: DatasetSize, similarity: Similarity) -> Advice {
    let (strategy, rationale) = match (size, similarity) {
        (DatasetSize::Small, Similarity::Similar) => (
            Strategy::LinearProbeTop,
            "Fine-tuning a small dataset risks overfitting, and similar data means the top \
             features already fit: train a linear classifier on the last pooled features.",
        ),
        (DatasetSize::Large, Similarity::Similar) => (
            Strategy::FullFineTune,
            "With more data overfitting is less of a concern: fine-tune through the full network.",
        ),
        (DatasetSize::Small, Similarity::Different) => (
            Strategy::LinearProbeEarlier,
            "Top features are specific to the source task and the data is too small to \
             fine-tune: train a linear classifier on activations from an earlier layer.",
        ),
        (DatasetSize::Large, Similarity::Different) => (
            Strategy::RetrainFromPretrained,
            "Enough data to train from scratch, but pretrained weights are still a good \
             starting point: initialise from them and fine-tune the entire network.",
        ),
    };
    Advice {
        strategy,
        rationale: rationale.to_string(),
    }
}

/// A trained softmax classifier over standardised features.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    pub feature_dim: usize,
    /// Per-feature training mean and inverse standard deviation.
    pub mean: Vec<f32>,
    pub inv_std: Vec<f32>,
    /// `feature_dim x classes`.
    pub weights: Tensor<f32>,
    pub bias: Tensor<f32>,
    pub val_accuracy: f64,
}

impl LinearProbe {
    /// Class probabilities for raw `N x feature_dim` features.
    pub fn probabilities(&self, features: &Tensor<f32>) -> Result<Tensor<f32>> {
        let x = standardise(features, &self.mean, &self.inv_std);
        Ok(ops::softmax(&ops::pointwise_dense(&x, &self.weights, &self.bias)?))
    }
}

/// Eval-mode activations of `layer_name` for every item, one row per image;
/// spatial maps are global-average-pooled.
pub fn extract_features(net: &Network, layer_name: &str, ds: &Dataset) -> Result<Tensor<f32>> {
    let depth = net
        .layer_index(layer_name)
        .ok_or_else(|| Error::UnknownLayer(layer_name.to_string()))?
        + 1;
    let mut rows = Vec::new();
    let mut dim = 0;
    for chunk in ds.items.chunks(32) {
        let images = chunk.iter().map(|item| normalize(&item.image)).collect::<Result<Vec<_>>>()?;
        let mut act = net.activations(&Tensor::stack(&images)?, depth)?;
        if act.rank() == 4 {
            act = ops::global_avg_pool(&act)?;
        }
        dim = act.len() / chunk.len();
        rows.extend_from_slice(act.data());
    }
    Tensor::new(vec![ds.len(), dim], rows)
}

/// Extracts features at `layer_name` with `net` untouched, then fits a
/// softmax classifier with momentum SGD.
pub fn linear_probe(
    net: &Network,
    layer_name: &str,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
) -> Result<LinearProbe> {
    let train_x = extract_features(net, layer_name, train)?;
    let val_x = extract_features(net, layer_name, val)?;
    let labels = |ds: &Dataset| ds.items.iter().map(|i| i.label).collect::<Vec<_>>();
    fit_linear(&train_x, &labels(train), &val_x, &labels(val), train.num_classes(), cfg)
}

fn standardise(x: &Tensor<f32>, mean: &[f32], inv_std: &[f32]) -> Tensor<f32> {
    let dim = mean.len();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| (v - mean[i % dim]) * inv_std[i % dim])
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Fits `softmax(x W + b)` to `N x F` features for `cfg.epochs` epochs of
/// `floor(N / b_size)` shuffled batches.
pub fn fit_linear(
    train_x: &Tensor<f32>,
    train_y: &[usize],
    val_x: &Tensor<f32>,
    val_y: &[usize],
    classes: usize,
    cfg: &TrainConfig,
) -> Result<LinearProbe> {
    let [n, dim] = <[usize; 2]>::try_from(train_x.shape())
        .map_err(|_| Error::ShapeMismatch(format!("features {:?} are not N x F", train_x.shape())))?;
    if n != train_y.len() || val_x.shape() != [val_y.len(), dim] {
        return Err(Error::ShapeMismatch("feature rows and labels disagree".into()));
    }
    if cfg.b_size == 0 || cfg.b_size > n {
        return Err(Error::BatchTooLarge { b_size: cfg.b_size, len: n });
    }
    let mut mean = vec![0.0f64; dim];
    let mut var = vec![0.0f64; dim];
    for row in train_x.data().chunks(dim) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v as f64 / n as f64;
        }
    }
    for row in train_x.data().chunks(dim) {
        for ((s, &m), &v) in var.iter_mut().zip(&mean).zip(row) {
            *s += (v as f64 - m).powi(2) / n as f64;
        }
    }
    let mean: Vec<f32> = mean.iter().map(|&m| m as f32).collect();
    let inv_std: Vec<f32> = var.iter().map(|&v| (1.0 / v.sqrt().max(1e-6)) as f32).collect();
    let x = standardise(train_x, &mean, &inv_std);

    let mut net = Network::new([1, 1, dim])?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, 12]));
    for layer in [
        LayerSpec::new("probe_flatten", LayerKind::Flatten),
        LayerSpec::new("probe", LayerKind::Dense { units: classes }),
        LayerSpec::new("probe_softmax", LayerKind::Softmax),
    ] {
        net.push(layer, &mut rng)?;
    }
    let mut opt = OptimizerState::new(
        OptimizerKind::SgdMomentum,
        OptimizerOverrides {
            lr: Some(cfg.lr.unwrap_or(PROBE_LR)),
            momentum: cfg.momentum,
            eps: None,
        },
    );
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, epoch as u64, 3])));
        for rows in order.chunks_exact(cfg.b_size) {
            let mut data = Vec::with_capacity(rows.len() * dim);
            for &r in rows {
                data.extend_from_slice(&x.data()[r * dim..(r + 1) * dim]);
            }
            let batch = Tensor::new(vec![rows.len(), 1, 1, dim], data)?;
            let labels: Vec<usize> = rows.iter().map(|&r| train_y[r]).collect();
            let mut pass = net.forward_train(&batch, &mut rng)?;
            let loss = pass.tape.cross_entropy(pass.output, one_hot(&labels, classes))?;
            let grads = pass.tape.backward(loss)?.into_named();
            opt.step(&mut net, &grads)?;
        }
    }
    let mut probe = LinearProbe {
        feature_dim: dim,
        mean,
        inv_std,
        weights: net.params()["probe/kernel"].value.clone(),
        bias: net.params()["probe/bias"].value.clone(),
        val_accuracy: 0.0,
    };
    if !val_y.is_empty() {
        let probs = probe.probabilities(val_x)?;
        let hits = probs
            .data()
            .chunks(classes)
            .zip(val_y)
            .filter(|(p, &y)| argmax(p) == y)
            .count();
        probe.val_accuracy = hits as f64 / val_y.len() as f64;
    }
    Ok(probe)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenario_table() {
        use DatasetSize::*;
        use Similarity::*;
        assert_eq!(advise(Small, Similar).strategy, Strategy::LinearProbeTop);
        assert_eq!(advise(Large, Similar).strategy, Strategy::FullFineTune);
        assert_eq!(advise(Small, Different).strategy, Strategy::LinearProbeEarlier);
        assert_eq!(advise(Large, Different).strategy, Strategy::RetrainFromPretrained);
        assert_eq!(
            serde_json::to_string(&Strategy::LinearProbeTop).unwrap(),
            "\"linear-probe-top\""
        );
    }

    /// Two well-separated clusters: 40 training points, 100 steps.
    #[test]
    fn separable_clusters_are_learned() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut points = |n: usize| {
            let mut data = Vec::new();
            let mut labels = Vec::new();
            for i in 0..n {
                let label = i % 2;
                let centre = if label == 0 { -2.0 } else { 2.0 };
                for _ in 0..3 {
                    data.push(centre + rand::Rng::gen_range(&mut rng, -0.5f32..0.5));
                }
                labels.push(label);
            }
            (Tensor::new(vec![n, 3], data).unwrap(), labels)
        };
        let (tx, ty) = points(40);
        let (vx, vy) = points(20);
        let cfg = TrainConfig {
            b_size: 10,
            epochs: 25,
            ..TrainConfig::default()
        };
        let probe = fit_linear(&tx, &ty, &vx, &vy, 2, &cfg).unwrap();
        assert_eq!(probe.val_accuracy, 1.0);
    }
}
