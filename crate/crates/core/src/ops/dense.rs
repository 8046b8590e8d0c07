use crate::error::{Error, Result};
use crate::gemm::{gemm, Op};
use crate::tensor::{Element, Tensor};

/// Affine map over the last axis, applied at every leading position:
/// `y[.., j] = sum_i x[.., i] * w[i, j] + b[j]`.
pub fn pointwise_dense<T: Element>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (rows, cin, cout) = dense_dims(x.shape(), w.shape())?;
    if b.shape() != [cout] {
        return Err(Error::ShapeMismatch(format!(
            "bias shape {:?} does not match {cout} units",
            b.shape()
        )));
    }
    let mut out = Vec::with_capacity(rows * cout);
    for _ in 0..rows {
        out.extend_from_slice(b.data());
    }
    gemm(rows, cin, cout, x.data(), Op::N, w.data(), Op::N, &mut out, true);
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("rank checked") = cout;
    Tensor::new(shape, out)
}

pub struct DenseGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub fn pointwise_dense_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    need_input: bool,
    need_params: bool,
) -> Result<DenseGrads<T>> {
    let (rows, cin, cout) = dense_dims(x.shape(), w.shape())?;
    if dy.len() != rows * cout {
        return Err(Error::ShapeMismatch(format!(
            "dense upstream gradient {:?} does not match {rows} x {cout}",
            dy.shape()
        )));
    }
    let (weight, bias) = if need_params {
        let mut dw = vec![T::zero(); cin * cout];
        gemm(cin, rows, cout, x.data(), Op::T, dy.data(), Op::N, &mut dw, false);
        let mut db = vec![T::zero(); cout];
        for row in dy.data().chunks(cout) {
            for (acc, &g) in db.iter_mut().zip(row) {
                *acc = *acc + g;
            }
        }
        (
            Some(Tensor::new(w.shape().to_vec(), dw)?),
            Some(Tensor::new(vec![cout], db)?),
        )
    } else {
        (None, None)
    };
    let input = if need_input {
        let mut dx = vec![T::zero(); rows * cin];
        gemm(rows, cout, cin, dy.data(), Op::N, w.data(), Op::T, &mut dx, false);
        Some(Tensor::new(x.shape().to_vec(), dx)?)
    } else {
        None
    };
    Ok(DenseGrads {
        input,
        weight,
        bias,
    })
}

fn dense_dims(x: &[usize], w: &[usize]) -> Result<(usize, usize, usize)> {
    let [cin, cout] = <[usize; 2]>::try_from(w)
        .map_err(|_| Error::ShapeMismatch(format!("dense weight must be Cin x Cout, got {w:?}")))?;
    if x.last() != Some(&cin) {
        return Err(Error::ShapeMismatch(format!(
            "input {x:?} last extent must equal {cin}"
        )));
    }
    Ok((x.iter().product::<usize>() / cin, cin, cout))
}
