//! Reverse-mode differentiation over a linear record of executed ops.
//!
//! Every value produced during a forward pass gets one slot on the tape.
//! `backward` walks the slots from the loss down to the first entry, so ops
//! are visited in exact reverse execution order, and each op's gradient
//! uses only what it saved plus the incoming gradient.

use std::sync::atomic::{AtomicU64, Ordering};

use indexmap::IndexMap;
use rand::Rng;

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{Element, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(0);

/// Handle to a value recorded on a particular tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

enum Record<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    MaxPool { x: Var, argmax: Vec<u32> },
    Relu { x: Var },
    Dense { x: Var, w: Var, b: Var },
    GlobalAvgPool { x: Var },
    Dropout { x: Var, mask: Tensor<T> },
    Reshape { x: Var },
    Softmax { x: Var },
    CrossEntropy { probs: Var, labels: Tensor<T> },
    WeightedSum { x: Var, weights: Tensor<T> },
}

impl<T> Record<T> {
    fn name(&self) -> &'static str {
        match self {
            Record::Leaf => "leaf",
            Record::Conv2d { .. } => "conv2d",
            Record::MaxPool { .. } => "maxpool2d",
            Record::Relu { .. } => "relu",
            Record::Dense { .. } => "dense",
            Record::GlobalAvgPool { .. } => "global_avg_pool",
            Record::Dropout { .. } => "dropout",
            Record::Reshape { .. } => "reshape",
            Record::Softmax { .. } => "softmax",
            Record::CrossEntropy { .. } => "cross_entropy",
            Record::WeightedSum { .. } => "weighted_sum",
        }
    }
}

struct Slot<T> {
    value: Tensor<T>,
    record: Record<T>,
    needs_grad: bool,
    name: Option<String>,
}

/// A single forward pass worth of recorded operations. Not shareable
/// between concurrent forward passes.
pub struct Tape<T: Element = f32> {
    id: u64,
    slots: Vec<Slot<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            slots: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Names of the recorded operations in execution order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.slots.iter().map(|s| s.record.name()).collect()
    }

    fn push(&mut self, value: Tensor<T>, record: Record<T>, needs_grad: bool, name: Option<String>) -> Var {
        self.slots.push(Slot {
            value,
            record,
            needs_grad,
            name,
        });
        Var {
            tape: self.id,
            index: self.slots.len() - 1,
        }
    }

    fn slot(&self, var: Var) -> Result<&Slot<T>> {
        if var.tape != self.id {
            return Err(Error::DetachedGraph);
        }
        self.slots.get(var.index).ok_or(Error::DetachedGraph)
    }

    pub fn value(&self, var: Var) -> Result<&Tensor<T>> {
        Ok(&self.slot(var)?.value)
    }

    fn needs(&self, vars: &[Var]) -> Result<bool> {
        let mut any = false;
        for &v in vars {
            any |= self.slot(v)?.needs_grad;
        }
        Ok(any)
    }

    /// Unnamed constant; never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Record::Leaf, false, None)
    }

    /// Unnamed leaf whose gradient is reported through [`Gradients::wrt`].
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Record::Leaf, true, None)
    }

    /// Named parameter. Frozen parameters are recorded but never differentiated.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> Var {
        self.push(value, Record::Leaf, trainable, Some(name.into()))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let y = ops::conv2d(self.value(x)?, self.value(w)?, self.value(b)?, stride, pad)?;
        let needs = self.needs(&[x, w, b])?;
        Ok(self.push(y, Record::Conv2d { x, w, b, stride, pad }, needs, None))
    }

    pub fn maxpool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let (y, argmax) = ops::maxpool2d(self.value(x)?, k, stride)?;
        let needs = self.needs(&[x])?;
        Ok(self.push(y, Record::MaxPool { x, argmax }, needs, None))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let y = ops::relu(self.value(x)?);
        let needs = self.needs(&[x])?;
        Ok(self.push(y, Record::Relu { x }, needs, None))
    }

    /// Affine map over the last axis (also serves as a plain dense layer on
    /// `B x C` input).
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = ops::pointwise_dense(self.value(x)?, self.value(w)?, self.value(b)?)?;
        let needs = self.needs(&[x, w, b])?;
        Ok(self.push(y, Record::Dense { x, w, b }, needs, None))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let y = ops::global_avg_pool(self.value(x)?)?;
        let needs = self.needs(&[x])?;
        Ok(self.push(y, Record::GlobalAvgPool { x }, needs, None))
    }

    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        let input = self.value(x)?;
        let mask = ops::dropout_mask::<T, R>(input.shape(), rate, rng)?;
        let data = input.data().iter().zip(mask.data()).map(|(&v, &m)| v * m).collect();
        let y = Tensor::new(input.shape().to_vec(), data)?;
        let needs = self.needs(&[x])?;
        Ok(self.push(y, Record::Dropout { x, mask }, needs, None))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let y = self.value(x)?.clone().reshape(shape)?;
        let needs = self.needs(&[x])?;
        Ok(self.push(y, Record::Reshape { x }, needs, None))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let y = ops::softmax(self.value(x)?);
        let needs = self.needs(&[x])?;
        Ok(self.push(y, Record::Softmax { x }, needs, None))
    }

    /// Categorical cross-entropy against one-hot labels; yields a `[1]` scalar.
    pub fn cross_entropy(&mut self, probs: Var, labels: Tensor<T>) -> Result<Var> {
        let loss = ops::cross_entropy(self.value(probs)?, &labels)?;
        let needs = self.needs(&[probs])?;
        Ok(self.push(Tensor::scalar(loss), Record::CrossEntropy { probs, labels }, needs, None))
    }

    /// `sum(x * weights)` as a `[1]` scalar. Projects any output onto a
    /// scalar objective for gradient checks.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor<T>) -> Result<Var> {
        let input = self.value(x)?;
        if input.shape() != weights.shape() {
            return Err(Error::ShapeMismatch(format!(
                "weights {:?} vs input {:?}",
                weights.shape(),
                input.shape()
            )));
        }
        let total = input
            .data()
            .iter()
            .zip(weights.data())
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
        let needs = self.needs(&[x])?;
        Ok(self.push(Tensor::scalar(total), Record::WeightedSum { x, weights }, needs, None))
    }

    /// Gradients of a scalar `loss` with respect to every leaf that needs one.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = self.slot(loss)?;
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.slots.len()).map(|_| None).collect();
        let mut visited = Vec::new();
        grads[loss.index] = Some(Tensor::ones(root.value.shape().to_vec()));

        for index in (0..=loss.index).rev() {
            let slot = &self.slots[index];
            if !slot.needs_grad || matches!(slot.record, Record::Leaf) {
                continue;
            }
            let Some(dy) = grads[index].take() else {
                continue;
            };
            visited.push(index);
            self.propagate(&slot.record, &slot.value, &dy, &mut grads)?;
        }

        let mut named = IndexMap::new();
        let mut leaves = Vec::new();
        for (index, slot) in self.slots.iter().enumerate() {
            if !matches!(slot.record, Record::Leaf) || !slot.needs_grad {
                continue;
            }
            if let Some(g) = grads[index].take() {
                match &slot.name {
                    Some(name) => {
                        named.insert(name.clone(), g);
                    }
                    None => leaves.push((index, g)),
                }
            }
        }
        Ok(Gradients {
            tape: self.id,
            named,
            leaves,
            visited,
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.slots[v.index].needs_grad
    }

    fn propagate(
        &self,
        record: &Record<T>,
        y: &Tensor<T>,
        dy: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let mut send = |v: Var, g: Tensor<T>| accumulate(&mut grads[v.index], g);
        match record {
            Record::Leaf => {}
            Record::Conv2d { x, w, b, stride, pad } => {
                let need_params = self.wants(*w) || self.wants(*b);
                let g = ops::conv2d_backward(
                    &self.slots[x.index].value,
                    &self.slots[w.index].value,
                    *stride,
                    *pad,
                    dy,
                    self.wants(*x),
                    need_params,
                )?;
                if let Some(gx) = g.input {
                    send(*x, gx);
                }
                if let (Some(gw), true) = (g.kernel, self.wants(*w)) {
                    send(*w, gw);
                }
                if let (Some(gb), true) = (g.bias, self.wants(*b)) {
                    send(*b, gb);
                }
            }
            Record::MaxPool { x, argmax } => {
                let gx = ops::maxpool2d_backward(self.slots[x.index].value.shape(), argmax, dy)?;
                send(*x, gx);
            }
            Record::Relu { x } => send(*x, ops::relu_backward(y, dy)?),
            Record::Dense { x, w, b } => {
                let need_params = self.wants(*w) || self.wants(*b);
                let g = ops::pointwise_dense_backward(
                    &self.slots[x.index].value,
                    &self.slots[w.index].value,
                    dy,
                    self.wants(*x),
                    need_params,
                )?;
                if let Some(gx) = g.input {
                    send(*x, gx);
                }
                if let (Some(gw), true) = (g.weight, self.wants(*w)) {
                    send(*w, gw);
                }
                if let (Some(gb), true) = (g.bias, self.wants(*b)) {
                    send(*b, gb);
                }
            }
            Record::GlobalAvgPool { x } => {
                send(*x, ops::global_avg_pool_backward(self.slots[x.index].value.shape(), dy)?)
            }
            Record::Dropout { x, mask } => {
                let data = dy.data().iter().zip(mask.data()).map(|(&g, &m)| g * m).collect();
                send(*x, Tensor::new(mask.shape().to_vec(), data)?);
            }
            Record::Reshape { x } => {
                let shape = self.slots[x.index].value.shape().to_vec();
                send(*x, dy.clone().reshape(shape)?);
            }
            Record::Softmax { x } => send(*x, ops::softmax_backward(y, dy)?),
            Record::CrossEntropy { probs, labels } => {
                let gp = ops::cross_entropy_backward(
                    &self.slots[probs.index].value,
                    labels,
                    dy.data()[0],
                )?;
                send(*probs, gp);
            }
            Record::WeightedSum { x, weights } => {
                let upstream = dy.data()[0];
                send(*x, weights.map(|w| w * upstream));
            }
        }
        Ok(())
    }
}

fn accumulate<T: Element>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(existing) => {
            for (a, &b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a = *a + b;
            }
        }
        None => *slot = Some(g),
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    tape: u64,
    named: IndexMap<String, Tensor<T>>,
    leaves: Vec<(usize, Tensor<T>)>,
    visited: Vec<usize>,
}

impl<T> Gradients<T> {
    /// Gradient of a named trainable parameter; `None` when the parameter
    /// is frozen or unreachable from the loss.
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.named.get(name)
    }

    /// Gradient of an unnamed variable leaf.
    pub fn wrt(&self, var: Var) -> Option<&Tensor<T>> {
        if var.tape != self.tape {
            return None;
        }
        self.leaves
            .iter()
            .find(|(i, _)| *i == var.index)
            .map(|(_, g)| g)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.named.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.named.len()
    }

    pub fn is_empty(&self) -> bool {
        self.named.is_empty()
    }

    pub fn into_named(self) -> IndexMap<String, Tensor<T>> {
        self.named
    }

    /// Tape positions of the ops whose gradient rules ran, in visit order.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
}
