//! Tape adjoints against central differences, in f64.

use gracaps_tensor::{grad_check, Result, Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-3;
const SEEDS: u64 = 10;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Random values bounded away from zero, so kinks and the sqrt pole stay out
/// of the finite-difference stencil.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    random(shape, rng).map(|v| v.signum() * (0.1 + v.abs()))
}

fn random_shape(rng: &mut ChaCha8Rng, rank: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.gen_range(1..=4)).collect()
}

/// Contracts any output against fixed random weights to get a scalar whose
/// gradient exercises every output element differently.
fn project<'t>(y: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let w = y.tape().constant(random(&y.shape(), &mut rng));
    Ok(y.mul(&w)?.sum_all())
}

fn check<F>(name: &str, x: &Tensor<f64>, f: F)
where
    F: for<'t> Fn(Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    let err = grad_check(f, x, H).unwrap();
    assert!(err < TOL, "{name}: relative error {err:e} on shape {:?}", x.shape());
}

#[test]
fn unary_primitives() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = random_shape(&mut rng, 3);
        let x = away_from_zero(&shape, &mut rng);
        let pos = x.map(f64::abs);
        check("relu", &x, |v| project(v.relu(), seed));
        check("sigmoid", &x, |v| project(v.sigmoid(), seed));
        check("square", &x, |v| project(v.square(), seed));
        check("sqrt", &pos, |v| project(v.sqrt(), seed));
        check("scale", &x, |v| project(v.scale(-2.5), seed));
        check("add_scalar", &x, |v| project(v.add_scalar(0.3), seed));
        check("sum_all", &x, |v| Ok(v.sum_all().square()));
        check("mean_all", &x, |v| Ok(v.mean_all().square()));
    }
}

#[test]
fn binary_primitives_with_broadcasting() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = random_shape(&mut rng, 3);
        let x = random(&shape, &mut rng);
        let same = random(&shape, &mut rng);
        let suffix = random(&shape[1..], &mut rng);
        let scalar = random(&[1], &mut rng);
        for other in [&same, &suffix, &scalar] {
            check("add/lhs", &x, |v| project(v.add(&v.tape().constant(other.clone()))?, seed));
            check("sub/lhs", &x, |v| project(v.sub(&v.tape().constant(other.clone()))?, seed));
            check("mul/lhs", &x, |v| project(v.mul(&v.tape().constant(other.clone()))?, seed));
            // Gradient folded back onto the broadcast operand.
            check("add/rhs", other, |v| project(v.tape().constant(x.clone()).add(&v)?, seed));
            check("sub/rhs", other, |v| project(v.tape().constant(x.clone()).sub(&v)?, seed));
            check("mul/rhs", other, |v| project(v.tape().constant(x.clone()).mul(&v)?, seed));
        }
    }
}

#[test]
fn reductions_and_softmax() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = random_shape(&mut rng, 3);
        let x = random(&shape, &mut rng);
        for axis in 0..3 {
            check("sum", &x, |v| project(v.sum(axis)?, seed));
            check("mean", &x, |v| project(v.mean(axis)?, seed));
            check("l2_norm", &x, |v| project(v.l2_norm(axis)?, seed));
            check("softmax", &x, |v| project(v.softmax(axis)?, seed));
        }
    }
}

#[test]
fn shape_primitives() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = random_shape(&mut rng, 3);
        let x = random(&shape, &mut rng);
        let n: usize = shape.iter().product();
        check("reshape", &x, |v| project(v.reshape([n])?, seed));
        check("transpose", &x, |v| project(v.transpose()?, seed));
        check("permute", &x, |v| project(v.permute(&[2, 0, 1])?, seed));
    }
}

#[test]
fn matmul_all_broadcast_forms() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (b, p, q, r) = (
            rng.gen_range(1..4),
            rng.gen_range(1..5),
            rng.gen_range(1..5),
            rng.gen_range(1..5),
        );
        let pairs = [
            (random(&[b, p, q], &mut rng), random(&[b, q, r], &mut rng)),
            (random(&[b, p, q], &mut rng), random(&[q, r], &mut rng)),
            (random(&[p, q], &mut rng), random(&[2, b, q, r], &mut rng)),
        ];
        for (lhs, rhs) in &pairs {
            check("matmul/lhs", lhs, |v| project(v.matmul(&v.tape().constant(rhs.clone()))?, seed));
            check("matmul/rhs", rhs, |v| project(v.tape().constant(lhs.clone()).matmul(&v)?, seed));
        }
    }
}

#[test]
fn conv2d_all_arguments() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, c, o) = (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..4));
        let (kh, kw, stride) = (rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..3));
        let (h, w) = (rng.gen_range(kh..kh + 5), rng.gen_range(kw..kw + 5));
        let x = random(&[n, c, h, w], &mut rng);
        let k = random(&[o, c, kh, kw], &mut rng);
        let b = random(&[o], &mut rng);
        check("conv2d/input", &x, |v| {
            let t = v.tape();
            project(v.conv2d(&t.constant(k.clone()), &t.constant(b.clone()), stride)?, seed)
        });
        check("conv2d/kernel", &k, |v| {
            let t = v.tape();
            project(t.constant(x.clone()).conv2d(&v, &t.constant(b.clone()), stride)?, seed)
        });
        check("conv2d/bias", &b, |v| {
            let t = v.tape();
            project(t.constant(x.clone()).conv2d(&t.constant(k.clone()), &v, stride)?, seed)
        });
    }
}

#[test]
fn sum_of_squares_is_exact_enough() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(&[3, 4], &mut rng);
    let err = grad_check(|v| Ok(v.square().sum_all()), &x, H).unwrap();
    assert!(err < 1e-7, "{err:e}");
}

#[test]
fn constant_program_has_zero_gradients() {
    let x = Tensor::<f64>::ones([5]);
    let err = grad_check(|v| Ok(v.scale(0.0).sum_all().add_scalar(3.0)), &x, H).unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn backward_of_sum_gives_ones() {
    let tape = Tape::<f64>::new();
    let x = tape.param(Tensor::full([2, 3, 2], 0.4));
    x.sum_all().backward().unwrap();
    assert_eq!(x.grad().unwrap(), Tensor::ones([2, 3, 2]));
}

#[test]
fn backward_of_sum_of_squares() {
    let tape = Tape::<f64>::new();
    let x = tape.param(Tensor::from_f64([2], &[1.0, 2.0]).unwrap());
    x.square().sum_all().backward().unwrap();
    assert_eq!(x.grad().unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn disconnected_param_stays_zero() {
    let tape = Tape::<f64>::new();
    let used = tape.param(Tensor::ones([2]));
    let unused = tape.param(Tensor::ones([3]));
    used.sum_all().backward().unwrap();
    assert_eq!(unused.grad().unwrap(), Tensor::zeros([3]));
}

#[test]
fn repeated_backward_accumulates() {
    let tape = Tape::<f64>::new();
    let x = tape.param(Tensor::from_f64([2], &[1.0, -3.0]).unwrap());
    let loss = x.square().sum_all();
    loss.backward().unwrap();
    loss.backward().unwrap();
    assert_eq!(x.grad().unwrap().data(), &[4.0, -12.0]);
    tape.zero_grad();
    assert_eq!(x.grad().unwrap().data(), &[0.0, 0.0]);
}

#[test]
fn adjoints_are_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let xv = random(&[3, 4], &mut rng);
    let wv = random(&[4, 2], &mut rng);
    fn loss_a<'t>(x: Var<'t, f64>, w: Var<'t, f64>) -> Var<'t, f64> {
        x.matmul(&w).unwrap().sigmoid().sum_all()
    }
    fn loss_b(x: Var<'_, f64>) -> Var<'_, f64> {
        x.softmax(1).unwrap().square().sum_all()
    }

    let joint = Tape::new();
    let (x, w) = (joint.param(xv.clone()), joint.param(wv.clone()));
    loss_a(x, w).add(&loss_b(x)).unwrap().backward().unwrap();

    let split = Tape::new();
    let (x2, w2) = (split.param(xv.clone()), split.param(wv.clone()));
    loss_a(x2, w2).backward().unwrap();
    loss_b(x2).backward().unwrap();

    assert!(x.grad().unwrap().max_abs_diff(&x2.grad().unwrap()).unwrap() < 1e-12);
    assert!(w.grad().unwrap().max_abs_diff(&w2.grad().unwrap()).unwrap() < 1e-12);
}

#[test]
fn backward_contract_errors() {
    let tape = Tape::<f64>::new();
    let x = tape.param(Tensor::ones([2]));
    assert_eq!(x.square().backward(), Err(TensorError::NonScalarLoss(vec![2])));

    let frozen = Tape::<f64>::no_grad();
    let y = frozen.param(Tensor::ones([2]));
    let loss = y.square().sum_all();
    assert_eq!(loss.backward(), Err(TensorError::NotRecording));
    assert_eq!(frozen.recorded_ops(), 0);
    assert_eq!(loss.value().item().unwrap(), 2.0);
}

#[test]
fn vars_from_different_tapes_do_not_mix() {
    let a = Tape::<f64>::new();
    let b = Tape::<f64>::new();
    let x = a.param(Tensor::ones([2]));
    let y = b.param(Tensor::ones([2]));
    assert_eq!(x.add(&y).unwrap_err(), TensorError::ForeignVar);
}

#[test]
fn first_non_finite_op_is_named() {
    let tape = Tape::<f32>::new();
    let x = tape.param(Tensor::new([2], vec![4.0, -1.0]).unwrap());
    let y = x.sqrt().square();
    let _ = y.sum_all();
    let nf = tape.first_non_finite().unwrap();
    assert_eq!(nf.op, "sqrt");
    assert_eq!(nf.node, 1);
}
