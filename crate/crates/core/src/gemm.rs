//! Row-partitioned matrix products on top of `matrixmultiply`.
//!
//! The output is split into blocks of whole rows and each block is an
//! independent `gemm` call. Per-element accumulation order does not depend
//! on the partition, so serial and parallel runs agree bit for bit.

use crate::par;
use crate::tensor::Element;

/// Storage order of an operand relative to its logical orientation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Op {
    /// Logical `r x c` stored row-major as `r x c`.
    N,
    /// Logical `r x c` stored row-major as `c x r`.
    T,
}

const MIN_ROWS_PER_TASK: usize = 64;

/// `c (m x n) = a (m x k) * b (k x n) [+ c when accumulate]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    op_a: Op,
    b: &[T],
    op_b: Op,
    c: &mut [T],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "lhs buffer size");
    assert_eq!(b.len(), k * n, "rhs buffer size");
    assert_eq!(c.len(), m * n, "output buffer size");
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { T::one() } else { T::zero() };
    let (rsa, csa) = match op_a {
        Op::N => (k as isize, 1),
        Op::T => (1, m as isize),
    };
    let (rsb, csb) = match op_b {
        Op::N => (n as isize, 1),
        Op::T => (1, k as isize),
    };
    let rows_per_task = m
        .div_ceil(par::threads() * 2)
        .max(MIN_ROWS_PER_TASK)
        .min(m);
    let a_ptr = SendPtr(a.as_ptr());
    let b_ptr = SendPtr(b.as_ptr());
    par::for_each_chunk_mut(c, rows_per_task * n, |block, c_chunk| {
        let row0 = block * rows_per_task;
        let rows = c_chunk.len() / n;
        let a_off = match op_a {
            Op::N => row0 * k,
            Op::T => row0,
        };
        // SAFETY: the chunk covers rows [row0, row0 + rows) of c; the lhs
        // view starting at a_off with the strides above stays inside `a`.
        unsafe {
            T::gemm_raw(
                rows,
                k,
                n,
                T::one(),
                a_ptr.get().add(a_off),
                rsa,
                csa,
                b_ptr.get(),
                rsb,
                csb,
                beta,
                c_chunk.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    });
}

#[derive(Clone, Copy)]
struct SendPtr<T>(*const T);

impl<T> SendPtr<T> {
    fn get(self) -> *const T {
        self.0
    }
}

// SAFETY: only used for read-only access to buffers that outlive the call.
unsafe impl<T: Sync> Send for SendPtr<T> {}
unsafe impl<T: Sync> Sync for SendPtr<T> {}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], ta: Op, b: &[f64], tb: Op) -> Vec<f64> {
        let at = |i: usize, p: usize| match ta {
            Op::N => a[i * k + p],
            Op::T => a[p * m + i],
        };
        let bt = |p: usize, j: usize| match tb {
            Op::N => b[p * n + j],
            Op::T => b[j * k + p],
        };
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                c[i * n + j] = (0..k).map(|p| at(i, p) * bt(p, j)).sum();
            }
        }
        c
    }

    #[test]
    fn all_transpose_combinations_match_naive() {
        let (m, k, n) = (137, 9, 5);
        let a: Vec<f64> = (0..m * k).map(|i| ((i * 7) % 13) as f64 - 6.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| ((i * 5) % 11) as f64 - 5.0).collect();
        for ta in [Op::N, Op::T] {
            for tb in [Op::N, Op::T] {
                let mut c = vec![0.0; m * n];
                gemm(m, k, n, &a, ta, &b, tb, &mut c, false);
                assert_eq!(c, naive(m, k, n, &a, ta, &b, tb), "{ta:?} {tb:?}");
            }
        }
    }

    #[test]
    fn accumulate_adds_into_output() {
        let a = [1.0f32, 2.0];
        let b = [3.0f32, 4.0];
        let mut c = [10.0f32];
        gemm(1, 2, 1, &a, Op::N, &b, Op::N, &mut c, true);
        assert_eq!(c, [21.0]);
    }
}
