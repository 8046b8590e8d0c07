use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Probabilities are clamped from below before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Mean over the batch of `-sum_c label[c] * ln(max(p[c], 1e-12))`.
pub fn cross_entropy<T: Element>(probs: &Tensor<T>, labels: &Tensor<T>) -> Result<T> {
    let (rows, _) = check(probs, labels)?;
    let floor = T::from_f64(PROB_FLOOR);
    let total = probs
        .data()
        .iter()
        .zip(labels.data())
        .fold(T::zero(), |acc, (&p, &l)| {
            if l == T::zero() {
                acc
            } else {
                acc - l * p.max(floor).ln()
            }
        });
    Ok(total / T::from_f64(rows as f64))
}

/// Gradient with respect to the probabilities, scaled by the upstream
/// scalar gradient. Entries clamped by the floor receive zero gradient.
pub fn cross_entropy_backward<T: Element>(
    probs: &Tensor<T>,
    labels: &Tensor<T>,
    upstream: T,
) -> Result<Tensor<T>> {
    let (rows, _) = check(probs, labels)?;
    let floor = T::from_f64(PROB_FLOOR);
    let scale = upstream / T::from_f64(rows as f64);
    let data = probs
        .data()
        .iter()
        .zip(labels.data())
        .map(|(&p, &l)| {
            if p > floor {
                -l * scale / p
            } else {
                T::zero()
            }
        })
        .collect();
    Tensor::new(probs.shape().to_vec(), data)
}

fn check<T: Element>(probs: &Tensor<T>, labels: &Tensor<T>) -> Result<(usize, usize)> {
    if probs.shape() != labels.shape() {
        return Err(Error::ShapeMismatch(format!(
            "probabilities {:?} vs labels {:?}",
            probs.shape(),
            labels.shape()
        )));
    }
    let classes = *probs.shape().last().expect("rank >= 1");
    Ok((probs.len() / classes, classes))
}
