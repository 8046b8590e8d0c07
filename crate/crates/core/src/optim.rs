//! Momentum SGD and Adagrad over a network's trainable parameters.

use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::network::Network;
use crate::tensor::Tensor;

pub const SGD_LR: f64 = 1e-4;
pub const SGD_MOMENTUM: f64 = 0.9;
pub const ADAGRAD_LR: f64 = 0.01;
pub const ADAGRAD_EPS: f64 = 1e-7;

/// Prefix reserved for optimizer slots inside checkpoints.
pub const SLOT_PREFIX: &str = "opt/";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adagrad,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::SgdMomentum => "sgd_momentum",
            OptimizerKind::Adagrad => "adagrad",
        }
    }

    fn slot_name(self) -> &'static str {
        match self {
            OptimizerKind::SgdMomentum => "velocity",
            OptimizerKind::Adagrad => "accumulator",
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd_momentum" | "sgd" => Ok(OptimizerKind::SgdMomentum),
            "adagrad" => Ok(OptimizerKind::Adagrad),
            other => Err(Error::UnknownOptimizer(other.to_string())),
        }
    }
}

/// Explicit hyperparameters that replace the per-kind defaults.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerOverrides {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub momentum: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
}

/// Optimizer hyperparameters plus per-parameter slot tensors (velocity for
/// SGD, squared-gradient accumulator for Adagrad), allocated on first use.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub eps: f64,
    slots: IndexMap<String, Tensor<f32>>,
}

pub fn make_optimizer(kind: &str, overrides: OptimizerOverrides) -> Result<OptimizerState> {
    Ok(OptimizerState::new(kind.parse()?, overrides))
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, overrides: OptimizerOverrides) -> Self {
        let (lr, momentum, eps) = match kind {
            OptimizerKind::SgdMomentum => (SGD_LR, SGD_MOMENTUM, 0.0),
            OptimizerKind::Adagrad => (ADAGRAD_LR, 0.0, ADAGRAD_EPS),
        };
        OptimizerState {
            kind,
            lr: overrides.lr.unwrap_or(lr),
            momentum: overrides.momentum.unwrap_or(momentum),
            eps: overrides.eps.unwrap_or(eps),
            slots: IndexMap::new(),
        }
    }

    pub fn slot(&self, param: &str) -> Option<&Tensor<f32>> {
        self.slots.get(param)
    }

    pub fn slot_count(&self) -> usize {
        self.slots.len()
    }

    /// Applies one update to every trainable parameter that has a gradient,
    /// in network declaration order. Gradients are validated up front so a
    /// failed step leaves the network untouched.
    pub fn step(&mut self, net: &mut Network, grads: &IndexMap<String, Tensor<f32>>) -> Result<()> {
        for (name, g) in grads {
            let param = net
                .param(name)
                .filter(|p| p.trainable)
                .ok_or_else(|| Error::UnknownParameter(name.clone()))?;
            if param.value.shape() != g.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "gradient for `{name}` has shape {:?}, parameter is {:?}",
                    g.shape(),
                    param.value.shape()
                )));
            }
        }
        let names: Vec<String> = net
            .params()
            .keys()
            .filter(|n| grads.contains_key(*n))
            .cloned()
            .collect();
        let (lr, momentum, eps) = (self.lr as f32, self.momentum as f32, self.eps as f32);
        for name in names {
            let g = grads[&name].data();
            let param = &mut net.param_mut(&name).expect("validated").value;
            let slot = self
                .slots
                .entry(name)
                .or_insert_with(|| Tensor::zeros(param.shape().to_vec()));
            let w = param.data_mut();
            let s = slot.data_mut();
            match self.kind {
                OptimizerKind::SgdMomentum => {
                    for ((w, v), &g) in w.iter_mut().zip(s.iter_mut()).zip(g) {
                        *v = momentum * *v - lr * g;
                        *w += *v;
                    }
                }
                OptimizerKind::Adagrad => {
                    for ((w, acc), &g) in w.iter_mut().zip(s.iter_mut()).zip(g) {
                        *acc += g * g;
                        *w -= lr * g / (acc.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }

    /// Adds slots to a checkpoint as `opt/<param>/<slot>`.
    pub fn write_slots(&self, ckpt: &mut Checkpoint) {
        for (name, slot) in &self.slots {
            ckpt.tensors.insert(
                format!("{SLOT_PREFIX}{name}/{}", self.kind.slot_name()),
                slot.clone(),
            );
        }
    }

    /// Restores slots written by [`OptimizerState::write_slots`]; returns the
    /// count restored.
    pub fn read_slots(&mut self, ckpt: &Checkpoint) -> usize {
        let suffix = format!("/{}", self.kind.slot_name());
        let mut count = 0;
        for (name, tensor) in &ckpt.tensors {
            let Some(param) = name
                .strip_prefix(SLOT_PREFIX)
                .and_then(|rest| rest.strip_suffix(suffix.as_str()))
            else {
                continue;
            };
            self.slots.insert(param.to_string(), tensor.clone());
            count += 1;
        }
        count
    }
}

/// One momentum-SGD update: `v <- momentum * v - lr * g; w <- w + v`.
pub fn sgd_momentum_step(
    net: &mut Network,
    grads: &IndexMap<String, Tensor<f32>>,
    state: &mut OptimizerState,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    state.kind = OptimizerKind::SgdMomentum;
    state.lr = lr;
    state.momentum = momentum;
    state.step(net, grads)
}

/// One Adagrad update: `acc <- acc + g^2; w <- w - lr * g / (sqrt(acc) + eps)`.
pub fn adagrad_step(
    net: &mut Network,
    grads: &IndexMap<String, Tensor<f32>>,
    state: &mut OptimizerState,
    lr: f64,
    eps: f64,
) -> Result<()> {
    state.kind = OptimizerKind::Adagrad;
    state.lr = lr;
    state.eps = eps;
    state.step(net, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{LayerKind, LayerSpec};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Single 1x1 dense layer with weight `w`.
    fn scalar_net(w: f32) -> Network {
        let mut net = Network::new([1, 1, 1]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        net.push(LayerSpec::new("fc", LayerKind::PointwiseDense { units: 1 }), &mut rng)
            .unwrap();
        net.param_mut("fc/kernel").unwrap().value.data_mut()[0] = w;
        net
    }

    fn grad(g: f32) -> IndexMap<String, Tensor<f32>> {
        IndexMap::from([("fc/kernel".to_string(), Tensor::full(vec![1, 1], g))])
    }

    fn w(net: &Network) -> f32 {
        net.param("fc/kernel").unwrap().value.data()[0]
    }

    #[test]
    fn defaults_and_overrides() {
        let sgd = make_optimizer("sgd_momentum", OptimizerOverrides::default()).unwrap();
        assert_eq!((sgd.lr, sgd.momentum), (1e-4, 0.9));
        let ada = make_optimizer(
            "adagrad",
            OptimizerOverrides {
                lr: Some(0.05),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!((ada.lr, ada.eps), (0.05, 1e-7));
        assert!(matches!(
            make_optimizer("adam", OptimizerOverrides::default()),
            Err(Error::UnknownOptimizer(_))
        ));
    }

    #[test]
    fn sgd_single_and_double_step() {
        let mut net = scalar_net(1.0);
        let mut opt = OptimizerState::new(OptimizerKind::SgdMomentum, Default::default());
        sgd_momentum_step(&mut net, &grad(0.5), &mut opt, 1e-4, 0.9).unwrap();
        assert!((opt.slot("fc/kernel").unwrap().data()[0] - -0.00005).abs() < 1e-10);
        assert!((w(&net) - 0.99995).abs() < 1e-7);
        sgd_momentum_step(&mut net, &grad(0.5), &mut opt, 1e-4, 0.9).unwrap();
        assert!((opt.slot("fc/kernel").unwrap().data()[0] - -0.000095).abs() < 1e-10);
        assert!((w(&net) - 0.999855).abs() < 1e-7);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        for kind in [OptimizerKind::SgdMomentum, OptimizerKind::Adagrad] {
            let mut net = scalar_net(0.75);
            let mut opt = OptimizerState::new(kind, Default::default());
            opt.step(&mut net, &grad(0.0)).unwrap();
            assert_eq!(w(&net), 0.75);
            assert_eq!(opt.slot("fc/kernel").unwrap().data()[0], 0.0);
        }
    }

    #[test]
    fn adagrad_single_step() {
        let mut net = scalar_net(1.0);
        let mut opt = OptimizerState::new(OptimizerKind::Adagrad, Default::default());
        adagrad_step(&mut net, &grad(2.0), &mut opt, 0.01, 1e-7).unwrap();
        assert_eq!(opt.slot("fc/kernel").unwrap().data()[0], 4.0);
        let expected = 1.0 - 0.01 * 2.0 / (2.0 + 1e-7);
        assert!((w(&net) as f64 - expected).abs() < 1e-7);
    }

    #[test]
    fn adagrad_steps_shrink() {
        let mut net = scalar_net(1.0);
        let mut opt = OptimizerState::new(OptimizerKind::Adagrad, Default::default());
        let mut last = f32::INFINITY;
        for _ in 0..10 {
            let before = w(&net);
            opt.step(&mut net, &grad(0.3)).unwrap();
            let delta = (before - w(&net)).abs();
            assert!(delta < last, "{delta} !< {last}");
            last = delta;
        }
    }

    #[test]
    fn rejects_unknown_frozen_and_misshapen() {
        let mut net = scalar_net(1.0);
        let mut opt = OptimizerState::new(OptimizerKind::SgdMomentum, Default::default());
        let unknown = IndexMap::from([("nope".to_string(), Tensor::scalar(1.0))]);
        assert!(matches!(opt.step(&mut net, &unknown), Err(Error::UnknownParameter(_))));
        let misshapen = IndexMap::from([("fc/kernel".to_string(), Tensor::zeros(vec![2]))]);
        assert!(matches!(opt.step(&mut net, &misshapen), Err(Error::ShapeMismatch(_))));
        net.set_trainable("fc/*", false).unwrap();
        assert!(matches!(opt.step(&mut net, &grad(1.0)), Err(Error::UnknownParameter(_))));
        assert_eq!(opt.slot_count(), 0);
    }

    #[test]
    fn slots_round_trip_through_checkpoint() {
        let mut net = scalar_net(1.0);
        let mut opt = OptimizerState::new(OptimizerKind::SgdMomentum, Default::default());
        opt.step(&mut net, &grad(0.5)).unwrap();
        let mut ckpt = net.to_checkpoint(IndexMap::new());
        opt.write_slots(&mut ckpt);
        assert!(ckpt.tensors.contains_key("opt/fc/kernel/velocity"));
        let restored = Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap();

        let mut resumed_net = scalar_net(0.0);
        resumed_net.apply_checkpoint(&restored, true).unwrap();
        let mut resumed = OptimizerState::new(OptimizerKind::SgdMomentum, Default::default());
        assert_eq!(resumed.read_slots(&restored), 1);

        opt.step(&mut net, &grad(0.25)).unwrap();
        resumed.step(&mut resumed_net, &grad(0.25)).unwrap();
        assert_eq!(w(&net).to_bits(), w(&resumed_net).to_bits());
    }

    proptest! {
        #[test]
        fn zero_momentum_is_plain_sgd(w0 in -10.0f32..10.0, g in -10.0f32..10.0, lr in 1e-5f64..1.0) {
            let mut net = scalar_net(w0);
            let mut opt = OptimizerState::new(OptimizerKind::SgdMomentum, Default::default());
            sgd_momentum_step(&mut net, &grad(g), &mut opt, lr, 0.0).unwrap();
            prop_assert_eq!(w(&net).to_bits(), (w0 - lr as f32 * g).to_bits());
        }
    }
}
