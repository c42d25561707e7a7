use approx::assert_abs_diff_eq;
use gracaps_tensor::{Tape, Tensor, TensorError};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Direct nested-sum cross-correlation, independent of the im2col path.
fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>, stride: usize) -> Tensor<f64> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let (oh, ow) = ((h - kh) / stride + 1, (w - kw) / stride + 1);
    let mut out = vec![0.0; n * o * oh * ow];
    for bi in 0..n {
        for oc in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b.data()[oc];
                    for ic in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                acc += x.get(&[bi, ic, y * stride + i, xx * stride + j]).unwrap()
                                    * k.get(&[oc, ic, i, j]).unwrap();
                            }
                        }
                    }
                    out[((bi * o + oc) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    Tensor::new([n, o, oh, ow], out).unwrap()
}

fn conv(x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>, stride: usize) -> Tensor<f64> {
    let tape = Tape::no_grad();
    tape.constant(x.clone())
        .conv2d(&tape.constant(k.clone()), &tape.constant(b.clone()), stride)
        .unwrap()
        .value()
}

#[test]
fn conv_of_ones_sums_the_window() {
    let y = conv(
        &Tensor::ones([1, 1, 3, 3]),
        &Tensor::ones([1, 1, 2, 2]),
        &Tensor::zeros([1]),
        1,
    );
    assert_eq!(y.shape(), &[1, 1, 2, 2]);
    assert_eq!(y.data(), &[4.0; 4]);
}

#[test]
fn conv_identity_kernel_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&[2, 1, 5, 4], &mut rng);
    assert_eq!(conv(&x, &Tensor::ones([1, 1, 1, 1]), &Tensor::zeros([1]), 1), x);
}

#[test]
fn conv_matches_nested_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&[2, 3, 8, 8], &mut rng);
    let k = random(&[4, 3, 3, 3], &mut rng);
    let b = random(&[4], &mut rng);
    let got = conv(&x, &k, &b, 2);
    assert_eq!(got.shape(), &[2, 4, 3, 3]);
    assert!(got.max_abs_diff(&naive_conv(&x, &k, &b, 2)).unwrap() < 1e-5);
}

#[test]
fn conv_f32_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[2, 3, 8, 8], &mut rng);
    let k = random(&[4, 3, 3, 3], &mut rng);
    let b = random(&[4], &mut rng);
    let tape = Tape::<f32>::no_grad();
    let got = tape
        .constant(x.cast())
        .conv2d(&tape.constant(k.cast()), &tape.constant(b.cast()), 2)
        .unwrap()
        .value();
    assert!(got.cast::<f64>().max_abs_diff(&naive_conv(&x, &k, &b, 2)).unwrap() < 1e-5);
}

#[test]
fn conv_rejects_mismatched_shapes() {
    let tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros([1, 2, 4, 4]));
    let k = tape.constant(Tensor::zeros([3, 1, 2, 2]));
    let b = tape.constant(Tensor::zeros([3]));
    assert!(matches!(x.conv2d(&k, &b, 1), Err(TensorError::Shape { op: "conv2d", .. })));
    let k = tape.constant(Tensor::zeros([3, 2, 5, 5]));
    assert!(x.conv2d(&k, &b, 1).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn conv_agrees_with_oracle_on_random_instances(
        n in 1usize..=4, c in 1usize..=8, h in 3usize..=16, w in 3usize..=16,
        o in 1usize..=4, kh in 1usize..=3, kw in 1usize..=3, stride in 1usize..=3,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[n, c, h, w], &mut rng);
        let k = random(&[o, c, kh, kw], &mut rng);
        let b = random(&[o], &mut rng);
        let got = conv(&x, &k, &b, stride);
        prop_assert!(got.max_abs_diff(&naive_conv(&x, &k, &b, stride)).unwrap() < 1e-5);
    }

    #[test]
    fn softmax_sums_to_one(
        rows in 1usize..6, cols in 1usize..9, scale in 0.1f64..50.0, seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[rows, cols], &mut rng).map(|v| v * scale);
        let tape = Tape::no_grad();
        for axis in 0..2 {
            let y = tape.constant(x.clone()).softmax(axis).unwrap().value();
            prop_assert!(y.data().iter().all(|&v| v >= 0.0));
            let other = 1 - axis;
            for i in 0..x.shape()[other] {
                let total: f64 = (0..x.shape()[axis])
                    .map(|k| if axis == 0 { y.get(&[k, i]) } else { y.get(&[i, k]) }.unwrap())
                    .sum();
                prop_assert!((total - 1.0).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn matmul_identity_and_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let b = random(&[3, 3], &mut rng);
    let tape = Tape::no_grad();
    let bv = tape.constant(b.clone());
    assert_eq!(tape.constant(Tensor::eye(3)).matmul(&bv).unwrap().value(), b);
    let z = tape.constant(Tensor::zeros([3, 3])).matmul(&bv).unwrap().value();
    assert!(z.data().iter().all(|&v| v == 0.0));
}

#[test]
fn matmul_by_hand() {
    let tape = Tape::<f64>::no_grad();
    let a = tape.constant(Tensor::from_f64([2, 2], &[1., 2., 3., 4.]).unwrap());
    let b = tape.constant(Tensor::from_f64([2, 1], &[0., 1.]).unwrap());
    let c = a.matmul(&b).unwrap().value();
    assert_eq!(c.shape(), &[2, 1]);
    assert_eq!(c.data(), &[2.0, 4.0]);
    let bad = tape.constant(Tensor::zeros([3, 1]));
    assert!(matches!(a.matmul(&bad), Err(TensorError::Shape { op: "matmul", .. })));
}

#[test]
fn softmax_closed_forms() {
    let tape = Tape::<f64>::no_grad();
    let u = tape.constant(Tensor::full([4], 0.7)).softmax(0).unwrap().value();
    assert!(u.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

    let x = Tensor::from_f64([2], &[0.0, 3f64.ln()]).unwrap();
    let y = tape.constant(x.clone()).softmax(0).unwrap().value();
    assert_abs_diff_eq!(y.data()[0], 0.25, epsilon = 1e-12);
    assert_abs_diff_eq!(y.data()[1], 0.75, epsilon = 1e-12);

    let shifted = tape.constant(x.map(|v| v + 123.0)).softmax(0).unwrap().value();
    assert!(shifted.max_abs_diff(&y).unwrap() < 1e-12);

    assert!(matches!(
        tape.constant(x).softmax(1),
        Err(TensorError::Axis { op: "softmax", axis: 1, rank: 1 })
    ));
}

#[test]
fn softmax_survives_huge_logits() {
    let tape = Tape::<f32>::no_grad();
    let x = Tensor::new([3], vec![1000.0f32, 0.0, -1000.0]).unwrap();
    let y = tape.constant(x).softmax(0).unwrap();
    assert!(y.value().is_finite());
    assert!(tape.first_non_finite().is_none());
}

#[test]
fn elementwise_cases() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_f64([2], &[-1.0, 2.0]).unwrap());
    assert_eq!(x.relu().value().data(), &[0.0, 2.0]);

    let four = tape.param(Tensor::scalar(4.0));
    let root = four.sqrt();
    assert_eq!(root.value().item().unwrap(), 2.0);
    root.backward().unwrap();
    assert_eq!(four.grad().unwrap().item().unwrap(), 0.25);

    let zero = tape.constant(Tensor::zeros([2]));
    assert_eq!(x.add(&zero).unwrap().value(), x.value());
    let bad = tape.constant(Tensor::zeros([3]));
    assert!(x.add(&bad).is_err());
}

#[test]
fn reductions() {
    let tape = Tape::<f64>::no_grad();
    let v = tape.constant(Tensor::from_f64([3], &[1., 2., 3.]).unwrap());
    assert_eq!(v.sum(0).unwrap().value().item().unwrap(), 6.0);
    let n = tape
        .constant(Tensor::from_f64([2], &[3., 4.]).unwrap())
        .l2_norm(0)
        .unwrap();
    assert_abs_diff_eq!(n.value().item().unwrap(), 5.0, epsilon = 1e-12);
    let c = tape.constant(Tensor::full([2, 5], 1.5)).mean(1).unwrap().value();
    assert_eq!(c.data(), &[1.5, 1.5]);
    assert!(v.sum(1).is_err());
    assert!(v.l2_norm(2).is_err());
}

#[test]
fn reshape_round_trip_and_permute() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&[2, 3, 4], &mut rng);
    let tape = Tape::no_grad();
    let v = tape.constant(x.clone());
    let back = v.reshape([6, 4]).unwrap().reshape([2, 3, 4]).unwrap().value();
    assert_eq!(back, x);
    let t = v.transpose().unwrap().value();
    assert_eq!(t.shape(), &[2, 4, 3]);
    assert_eq!(t.get(&[1, 3, 2]), x.get(&[1, 2, 3]));
    assert!(v.permute(&[0, 0, 1]).is_err());
}

#[test]
fn tensors_cross_threads() {
    fn assert_send_sync<T: Send + Sync>() {}
    assert_send_sync::<Tensor<f32>>();
    let t = Tensor::<f32>::ones([4]);
    let handle = std::thread::spawn(move || t.data().iter().sum::<f32>());
    assert_eq!(handle.join().unwrap(), 4.0);
}
