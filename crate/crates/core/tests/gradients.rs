//! Tape gradients against central finite differences, in binary64.

use deeptransfer::gradcheck::{grad_check, FD_STEP};
use deeptransfer::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-5;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Distinct values spaced well beyond the finite-difference step, so no
/// pooling window has a tie or a near-tie.
fn tie_free(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut values: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - 0.3).collect();
    values.shuffle(rng);
    Tensor::new(shape.to_vec(), values).unwrap()
}

/// Reduces `out` with fixed random weights so every output element
/// contributes a distinct amount to the scalar.
fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> deeptransfer::Result<Var> {
    let shape = tape.value(out)?.shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    tape.weighted_sum(out, random(&shape, &mut rng))
}

#[test]
fn conv2d() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (stride, pad) in [(1, 1), (2, 0), (1, 2)] {
        let inputs = [random(&[2, 6, 6, 2], &mut rng), random(&[3, 3, 2, 2], &mut rng), random(&[2], &mut rng)];
        let err = grad_check(
            |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], stride, pad)?;
                project(t, y, 11)
            },
            &inputs,
            FD_STEP,
        )
        .unwrap();
        assert!(err <= TOL, "stride {stride} pad {pad}: {err}");
    }
}

#[test]
fn maxpool2d() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let inputs = [tie_free(&[1, 6, 6, 4], &mut rng)];
    let err = grad_check(
        |t, v| {
            let y = t.maxpool2d(v[0], 2, 2)?;
            project(t, y, 12)
        },
        &inputs,
        FD_STEP,
    )
    .unwrap();
    assert!(err <= TOL, "{err}");
}

#[test]
fn pointwise_dense_and_dense() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let spatial = [random(&[2, 3, 3, 4], &mut rng), random(&[4, 5], &mut rng), random(&[5], &mut rng)];
    let flat = [random(&[3, 4], &mut rng), random(&[4, 2], &mut rng), random(&[2], &mut rng)];
    for inputs in [spatial, flat] {
        let err = grad_check(
            |t, v| {
                let y = t.dense(v[0], v[1], v[2])?;
                project(t, y, 13)
            },
            &inputs,
            FD_STEP,
        )
        .unwrap();
        assert!(err <= TOL, "{err}");
    }
}

#[test]
fn global_avg_pool() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inputs = [random(&[2, 6, 6, 4], &mut rng)];
    let err = grad_check(
        |t, v| {
            let y = t.global_avg_pool(v[0])?;
            project(t, y, 14)
        },
        &inputs,
        FD_STEP,
    )
    .unwrap();
    assert!(err <= TOL, "{err}");
}

#[test]
fn softmax_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inputs = [random(&[4, 3], &mut rng)];
    let labels = Tensor::from_f64s(vec![4, 3], &[1., 0., 0., 0., 0., 1., 0., 1., 0., 1., 0., 0.]).unwrap();
    let err = grad_check(
        |t, v| {
            let p = t.softmax(v[0])?;
            t.cross_entropy(p, labels.clone())
        },
        &inputs,
        FD_STEP,
    )
    .unwrap();
    assert!(err <= TOL, "{err}");
}

#[test]
fn relu_away_from_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut x = random(&[2, 4, 4, 3], &mut rng);
    for v in x.data_mut() {
        *v += 0.1f64.copysign(*v);
    }
    let err = grad_check(
        |t, v| {
            let y = t.relu(v[0])?;
            project(t, y, 15)
        },
        &[x],
        FD_STEP,
    )
    .unwrap();
    assert!(err <= TOL, "{err}");
}

#[test]
fn dropout_with_fixed_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inputs = [random(&[2, 8], &mut rng)];
    let err = grad_check(
        |t, v| {
            let y = t.dropout(v[0], 0.3, &mut ChaCha8Rng::seed_from_u64(99))?;
            project(t, y, 16)
        },
        &inputs,
        FD_STEP,
    )
    .unwrap();
    assert!(err <= TOL, "{err}");
}

/// The grafted head end to end: conv, relu, pointwise dense, pooling,
/// dense, softmax and the loss.
#[test]
fn composite_head() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let inputs = [
        random(&[2, 4, 4, 3], &mut rng),
        random(&[5, 5, 3, 5], &mut rng),
        random(&[5], &mut rng),
        random(&[5, 6], &mut rng),
        random(&[6], &mut rng),
        random(&[6, 2], &mut rng),
        random(&[2], &mut rng),
    ];
    let labels = Tensor::from_f64s(vec![2, 2], &[1., 0., 0., 1.]).unwrap();
    let err = grad_check(
        |t, v| {
            let x = t.conv2d(v[0], v[1], v[2], 1, 2)?;
            let x = t.relu(x)?;
            let x = t.dense(x, v[3], v[4])?;
            let x = t.global_avg_pool(x)?;
            let x = t.dense(x, v[5], v[6])?;
            let p = t.softmax(x)?;
            t.cross_entropy(p, labels.clone())
        },
        &inputs,
        FD_STEP,
    )
    .unwrap();
    // ReLU kinks make an occasional element ill-conditioned; the seeded
    // inputs here stay clear of them.
    assert!(err <= TOL, "{err}");
}
