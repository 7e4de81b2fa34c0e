mod common;

use common::random_tensor;
use digitnet::layers::{Conv2d, Pass};
use digitnet::tensor::argmax;
use digitnet::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.data()[i * k + p] * b.data()[p * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

/// Valid cross-correlation by direct summation: `[N,C,H,W]` * `[F,C,kh,kw]` + b.
fn direct_conv(x: &Tensor, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let [n, c, h, wd] = x.shape().try_into().unwrap();
    let [f, _, kh, kw] = w.shape().try_into().unwrap();
    let (oh, ow) = (h - kh + 1, wd - kw + 1);
    let mut out = Vec::with_capacity(n * f * oh * ow);
    for s in 0..n {
        for o in 0..f {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = b.data()[o];
                    for ch in 0..c {
                        for u in 0..kh {
                            for v in 0..kw {
                                acc += x.at(&[s, ch, i + u, j + v]) * w.at(&[o, ch, u, v]);
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for &(m, k, n) in &[(1, 1, 1), (3, 5, 2), (17, 9, 33), (64, 65, 3)] {
        let a = random_tensor(&[m, k], &mut rng);
        let b = random_tensor(&[k, n], &mut rng);
        let got = a.matmul(&b).unwrap();
        assert_eq!(got.shape(), &[m, n]);
        for (x, y) in got.data().iter().zip(naive_matmul(&a, &b)) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }
}

#[test]
fn conv_forward_matches_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for &(c, h, w, f, k) in &[(1, 3, 3, 1, 3), (2, 6, 6, 3, 3), (3, 5, 6, 2, 2), (1, 6, 4, 4, 1)] {
        let x = random_tensor(&[2, c, h, w], &mut rng);
        let weights = random_tensor(&[f, c, k, k], &mut rng);
        let bias = random_tensor(&[f], &mut rng);
        let mut layer = Conv2d::new(&[c, h, w], f, (k, k), weights.clone(), bias.clone()).unwrap();
        let got = layer.forward(&x, &Pass::Eval).unwrap();
        assert_eq!(got.shape(), &[2, f, h - k + 1, w - k + 1]);
        for (a, b) in got.data().iter().zip(direct_conv(&x, &weights, &bias)) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn col2im_is_the_adjoint_of_im2col() {
    // <im2col(x), y> == <x, col2im(y)>
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random_tensor(&[2, 6, 5], &mut rng);
    let cols = x.im2col(3, 2, 1).unwrap();
    let y = random_tensor(cols.shape(), &mut rng);
    let back = y.col2im(&[2, 6, 5], 3, 2, 1).unwrap();
    assert!((cols.dot(&y).unwrap() - x.dot(&back).unwrap()).abs() < 1e-12);
}

fn matrix_strategy(max: usize) -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1..=max, 1..=max).prop_flat_map(|(r, c)| {
        (Just(r), Just(c), prop::collection::vec(-1e3..1e3f64, r * c))
    })
}

proptest! {
    #[test]
    fn identity_is_neutral((r, c, data) in matrix_strategy(8)) {
        let a = Tensor::from_vec(&[r, c], data).unwrap();
        let left = Tensor::identity(r).unwrap().matmul(&a).unwrap();
        let right = a.matmul(&Tensor::identity(c).unwrap()).unwrap();
        prop_assert_eq!(left.data(), a.data());
        prop_assert_eq!(right.data(), a.data());
    }

    #[test]
    fn matmul_leaves_operands_untouched((r, c, data) in matrix_strategy(6), extra in 1usize..5) {
        let a = Tensor::from_vec(&[r, c], data).unwrap();
        let b = Tensor::new(&[c, extra], 0.5).unwrap();
        let (a0, b0) = (a.clone(), b.clone());
        let _ = a.matmul(&b).unwrap();
        let _ = a.transpose().unwrap();
        prop_assert_eq!(a, a0);
        prop_assert_eq!(b, b0);
    }

    #[test]
    fn argmax_ignores_constant_shift(values in prop::collection::vec(-100.0..100.0f64, 1..20), shift in -50.0..50.0f64) {
        // integer-valued inputs keep the shift exact, so ties survive it
        let values: Vec<f64> = values.iter().map(|v| v.round()).collect();
        let shifted: Vec<f64> = values.iter().map(|v| v + shift.round()).collect();
        prop_assert_eq!(argmax(&values), argmax(&shifted));
    }

    #[test]
    fn argmax_picks_first_maximum(values in prop::collection::vec(-5i32..5, 1..20)) {
        let values: Vec<f64> = values.into_iter().map(f64::from).collect();
        let i = argmax(&values);
        let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(values[i], max);
        prop_assert!(values[..i].iter().all(|&v| v < max));
    }

    #[test]
    fn conv_small_random(c in 1usize..3, h in 2usize..7, w in 2usize..7, f in 1usize..4, k in 1usize..3, seed: u64) {
        prop_assume!(k <= h && k <= w);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&[1, c, h, w], &mut rng);
        let weights = random_tensor(&[f, c, k, k], &mut rng);
        let bias = random_tensor(&[f], &mut rng);
        let x0 = x.clone();
        let mut layer = Conv2d::new(&[c, h, w], f, (k, k), weights.clone(), bias.clone()).unwrap();
        let got = layer.forward(&x, &Pass::Eval).unwrap();
        for (a, b) in got.data().iter().zip(direct_conv(&x, &weights, &bias)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        prop_assert_eq!(x, x0);
    }
}
