//! Forward kernels against naive nested-loop references, and bitwise
//! agreement between single-threaded and pooled execution.

use deeptransfer::ops::{conv2d, maxpool2d, pointwise_dense};
use deeptransfer::{par, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap()
}

fn naive_conv(x: &Tensor<f32>, w: &Tensor<f32>, b: &Tensor<f32>, stride: usize, pad: usize) -> Vec<f64> {
    let [h, wd, cin] = [x.shape()[0], x.shape()[1], x.shape()[2]];
    let [k, _, _, cout] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = Vec::new();
    for oy in 0..oh {
        for ox in 0..ow {
            for co in 0..cout {
                let mut acc = b.data()[co] as f64;
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                            continue;
                        }
                        for ci in 0..cin {
                            let xv = x.get(&[iy as usize, ix as usize, ci]).unwrap() as f64;
                            acc += xv * w.get(&[ky, kx, ci, co]).unwrap() as f64;
                        }
                    }
                }
                out.push(acc);
            }
        }
    }
    out
}

fn naive_pool(x: &Tensor<f32>, k: usize, stride: usize) -> Vec<f32> {
    let [h, w, c] = [x.shape()[0], x.shape()[1], x.shape()[2]];
    let mut out = Vec::new();
    for oy in 0..(h - k) / stride + 1 {
        for ox in 0..(w - k) / stride + 1 {
            for ch in 0..c {
                let mut m = f32::NEG_INFINITY;
                for dy in 0..k {
                    for dx in 0..k {
                        m = m.max(x.get(&[oy * stride + dy, ox * stride + dx, ch]).unwrap());
                    }
                }
                out.push(m);
            }
        }
    }
    out
}

fn naive_dense(x: &Tensor<f32>, w: &Tensor<f32>, b: &Tensor<f32>) -> Vec<f64> {
    let (cin, cout) = (w.shape()[0], w.shape()[1]);
    let mut out = Vec::new();
    for row in x.data().chunks(cin) {
        for co in 0..cout {
            let mut acc = b.data()[co] as f64;
            for (ci, &v) in row.iter().enumerate() {
                acc += v as f64 * w.data()[ci * cout + co] as f64;
            }
            out.push(acc);
        }
    }
    out
}

fn assert_close(got: &[f32], want: &[f64], tol: f64) {
    assert_eq!(got.len(), want.len());
    for (i, (&g, &w)) in got.iter().zip(want).enumerate() {
        assert!((g as f64 - w).abs() <= tol, "element {i}: {g} vs {w}");
    }
}

/// 100 random cases per kernel, up to 8x8x4.
#[test]
fn kernels_match_naive_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..100 {
        let h = rng.gen_range(3..=8);
        let w = rng.gen_range(3..=8);
        let cin = rng.gen_range(1..=4);
        let cout = rng.gen_range(1..=4);
        let k = rng.gen_range(1..=3.min(h).min(w));
        let stride = rng.gen_range(1..=2);
        let pad = rng.gen_range(0..=1);
        let x = random(&[h, w, cin], &mut rng);
        let kern = random(&[k, k, cin, cout], &mut rng);
        let bias = random(&[cout], &mut rng);
        let got = conv2d(&x, &kern, &bias, stride, pad).unwrap();
        assert_close(got.data(), &naive_conv(&x, &kern, &bias, stride, pad), 1e-6 * (k * k * cin) as f64);

        let pk = rng.gen_range(1..=2.min(h).min(w));
        let (pooled, _) = maxpool2d(&x, pk, pk).unwrap();
        assert_eq!(pooled.data(), naive_pool(&x, pk, pk).as_slice());

        let dw = random(&[cin, cout], &mut rng);
        let got = pointwise_dense(&x, &dw, &bias).unwrap();
        assert_close(got.data(), &naive_dense(&x, &dw, &bias), 1e-6);
    }
}

#[test]
fn single_thread_matches_pool_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[4, 32, 32, 16], &mut rng);
    let w = random(&[3, 3, 16, 32], &mut rng);
    let b = random(&[32], &mut rng);
    let pooled = conv2d(&x, &w, &b, 1, 1).unwrap();
    let single = par::with_threads(1, || conv2d(&x, &w, &b, 1, 1).unwrap());
    assert_eq!(pooled, single);
    let dense_w = random(&[16, 64], &mut rng);
    let db = random(&[64], &mut rng);
    assert_eq!(
        pointwise_dense(&x, &dense_w, &db).unwrap(),
        par::with_threads(1, || pointwise_dense(&x, &dense_w, &db).unwrap())
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// Batched convolution equals convolving each image separately.
    #[test]
    fn batch_is_per_image(seed in any::<u64>(), b in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[b, 6, 5, 3], &mut rng);
        let w = random(&[3, 3, 3, 2], &mut rng);
        let bias = random(&[2], &mut rng);
        let all = conv2d(&x, &w, &bias, 1, 1).unwrap();
        for i in 0..b {
            let one = conv2d(&x.outer(i).unwrap(), &w, &bias, 1, 1).unwrap();
            prop_assert_eq!(all.outer(i).unwrap(), one);
        }
    }

    /// Max pooling never invents values: every output is an input value.
    #[test]
    fn pool_outputs_are_inputs(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[6, 6, 2], &mut rng);
        let (y, argmax) = maxpool2d(&x, 2, 2).unwrap();
        for (v, &i) in y.data().iter().zip(&argmax) {
            prop_assert_eq!(*v, x.data()[i as usize]);
        }
    }
}
