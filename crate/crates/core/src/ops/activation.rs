use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub fn relu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient passes where the forward output was positive; at exactly zero
/// the subgradient is 0.
pub fn relu_backward<T: Element>(y: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    if y.shape() != dy.shape() {
        return Err(Error::ShapeMismatch(format!(
            "relu gradient {:?} vs output {:?}",
            dy.shape(),
            y.shape()
        )));
    }
    let data = y
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(y.shape().to_vec(), data)
}

/// Inverted-dropout multipliers: 0 with probability `rate`, else
/// `1 / (1 - rate)`. One uniform draw per element, in row-major order.
pub fn dropout_mask<T: Element, R: Rng + ?Sized>(
    shape: &[usize],
    rate: f64,
    rng: &mut R,
) -> Result<Tensor<T>> {
    check_rate(rate)?;
    let keep = T::from_f64(1.0 / (1.0 - rate));
    let len = shape.iter().product();
    let data = (0..len)
        .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// Training mode zeroes elements and rescales survivors; eval mode is the
/// identity.
pub fn dropout<T: Element, R: Rng + ?Sized>(
    x: &Tensor<T>,
    rate: f64,
    rng: &mut R,
    training: bool,
) -> Result<Tensor<T>> {
    check_rate(rate)?;
    if !training || rate == 0.0 {
        return Ok(x.clone());
    }
    let mask = dropout_mask::<T, R>(x.shape(), rate, rng)?;
    let data = x.data().iter().zip(mask.data()).map(|(&v, &m)| v * m).collect();
    Tensor::new(x.shape().to_vec(), data)
}

fn check_rate(rate: f64) -> Result<()> {
    if (0.0..1.0).contains(&rate) {
        Ok(())
    } else {
        Err(Error::InvalidRate(rate))
    }
}

/// Softmax over the last axis with max-shift.
pub fn softmax<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let classes = *x.shape().last().expect("tensors have rank >= 1");
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(classes) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total = total + *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    out
}

/// `dx = y * (dy - sum(dy * y))` row by row.
pub fn softmax_backward<T: Element>(y: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    if y.shape() != dy.shape() {
        return Err(Error::ShapeMismatch(format!(
            "softmax gradient {:?} vs output {:?}",
            dy.shape(),
            y.shape()
        )));
    }
    let classes = *y.shape().last().expect("rank >= 1");
    let mut dx = Vec::with_capacity(y.len());
    for (yr, gr) in y.data().chunks(classes).zip(dy.data().chunks(classes)) {
        let dot = yr.iter().zip(gr).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
        dx.extend(yr.iter().zip(gr).map(|(&a, &b)| a * (b - dot)));
    }
    Tensor::new(y.shape().to_vec(), dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn relu_forward_and_subgradient() {
        let x = Tensor::<f32>::from_f64s(vec![3], &[-1.0, 0.0, 2.0]).unwrap();
        let y = relu(&x);
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        let g = relu_backward(&y, &Tensor::ones(vec![3])).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
        let neg = Tensor::<f32>::full(vec![2, 2], -3.0);
        assert!(relu(&neg).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_closed_form() {
        let x = Tensor::<f64>::from_f64s(vec![2], &[0.0, 3f64.ln()]).unwrap();
        let y = softmax(&x);
        assert!((y.data()[0] - 0.25).abs() < 1e-12);
        assert!((y.data()[1] - 0.75).abs() < 1e-12);
        let u = softmax(&Tensor::<f32>::full(vec![2, 5], 7.0));
        assert!(u.data().iter().all(|&v| (v - 0.2).abs() < 1e-7));
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let x = Tensor::<f32>::from_f64s(vec![3], &[1000.0, 1000.0, -1000.0]).unwrap();
        let y = softmax(&x);
        assert!(y.data().iter().all(|v| v.is_finite()));
        assert!((y.sum() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn dropout_eval_and_zero_rate_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f32>::from_f64s(vec![4], &[1.0, -2.0, 3.0, 4.0]).unwrap();
        assert_eq!(dropout(&x, 0.3, &mut rng, false).unwrap(), x);
        assert_eq!(dropout(&x, 0.0, &mut rng, true).unwrap(), x);
        assert!(matches!(dropout(&x, 1.0, &mut rng, true), Err(Error::InvalidRate(_))));
        assert!(matches!(dropout(&x, -0.1, &mut rng, false), Err(Error::InvalidRate(_))));
    }

    #[test]
    fn dropout_preserves_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = Tensor::<f64>::ones(vec![100_000]);
        let y = dropout(&x, 0.3, &mut rng, true).unwrap();
        let mean = y.sum() / 100_000.0;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
        let zeros = y.data().iter().filter(|&&v| v == 0.0).count() as f64 / 100_000.0;
        assert!((zeros - 0.3).abs() < 0.01);
    }
}
