use hsam_core::tensor::{grad_check, grad_check_many, CustomBackward, GradCheckReport};
use hsam_core::{Error, Seed, Tape, Tensor, Var};

const STEP: f64 = 1e-5;

fn rand(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut Seed(seed).rng())
}

fn positive(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, 0.5, 2.0, &mut Seed(seed).rng())
}

/// Weighted sum with fixed random weights so every output component matters.
fn project<'t>(y: Var<'t>, seed: u64) -> hsam_core::Result<Var<'t>> {
    let w = y.tape().constant(rand(&y.shape(), seed ^ 0xabcd));
    y.mul(&w)?.sum(None)
}

fn assert_pass(r: GradCheckReport, what: &str) {
    assert!(r.passed, "{what}: {r:?}");
}

#[test]
fn sum_of_product_gradient_is_the_other_factor() {
    for seed in 0..20 {
        let b = rand(&[3, 4], seed + 100);
        let r = grad_check(
            |t, a| {
                let b = t.constant(b.clone());
                a.mul(&b)?.sum(None)
            },
            &rand(&[3, 4], seed),
            STEP,
            1e-6,
        )
        .unwrap();
        assert_pass(r, "sum(a*b)");
        let tape = Tape::new();
        let a = tape.leaf(rand(&[3, 4], seed), true);
        let bv = tape.constant(b.clone());
        a.mul(&bv).unwrap().sum(None).unwrap().backward().unwrap();
        assert_eq!(a.grad().unwrap(), b);
    }
}

#[test]
fn binary_ops_with_broadcast() {
    let shapes: [(&[usize], &[usize]); 4] =
        [(&[2, 3], &[2, 3]), (&[2, 3], &[1, 3]), (&[2, 1, 4], &[3, 1]), (&[4], &[])];
    for seed in 0..20 {
        for (sa, sb) in shapes {
            for op in 0..4 {
                let a = rand(sa, seed);
                let b = if op == 3 { positive(sb, seed + 7) } else { rand(sb, seed + 7) };
                let r = grad_check_many(
                    |_, v| {
                        let y = match op {
                            0 => v[0].add(&v[1])?,
                            1 => v[0].sub(&v[1])?,
                            2 => v[0].mul(&v[1])?,
                            _ => v[0].div(&v[1])?,
                        };
                        project(y, seed)
                    },
                    &[a, b],
                    STEP,
                    1e-4,
                )
                .unwrap();
                assert_pass(r, "binary");
            }
        }
    }
}

#[test]
fn unary_ops() {
    for seed in 0..20 {
        let x = rand(&[2, 5], seed);
        for op in 0..5 {
            let input = if op == 1 { positive(&[2, 5], seed) } else { x.clone() };
            let r = grad_check(
                |_, v| {
                    let y = match op {
                        0 => v.exp(),
                        1 => v.ln()?,
                        2 => v.relu(),
                        3 => v.gelu(),
                        _ => v.scale(-1.7).shift(0.3),
                    };
                    project(y, seed)
                },
                &input,
                STEP,
                1e-4,
            )
            .unwrap();
            assert_pass(r, "unary");
        }
    }
}

#[test]
fn matmul_gradients() {
    for seed in 0..20 {
        let r = grad_check_many(
            |_, v| project(v[0].matmul(&v[1])?, seed),
            &[rand(&[3, 4], seed), rand(&[4, 2], seed + 1)],
            STEP,
            1e-6,
        )
        .unwrap();
        assert_pass(r, "matmul");
        let r = grad_check_many(
            |_, v| project(v[0].matmul_t(&v[1])?, seed),
            &[rand(&[2, 3, 4], seed), rand(&[2, 5, 4], seed + 1)],
            STEP,
            1e-4,
        )
        .unwrap();
        assert_pass(r, "batched matmul_t");
    }
}

#[test]
fn softmax_family_gradients() {
    for seed in 0..20 {
        let r = grad_check(|_, v| project(v.softmax(0)?, seed), &rand(&[5], seed), STEP, 1e-6)
            .unwrap();
        assert_pass(r, "softmax 5-vector");
        for axis in 0..3 {
            let x = rand(&[2, 3, 4], seed);
            let r = grad_check(|_, v| project(v.softmax(axis)?, seed), &x, STEP, 1e-4).unwrap();
            assert_pass(r, "softmax");
            let r = grad_check(|_, v| project(v.log_softmax(axis)?, seed), &x, STEP, 1e-4)
                .unwrap();
            assert_pass(r, "log_softmax");
        }
        let mask = Tensor::from_fn(&[3, 4], |i| ((i * 7 + seed as usize) % 3 != 0) as u8 as f64);
        let r = grad_check(
            |t, v| {
                let m = t.constant(mask.clone());
                project(v.masked_softmax(&m)?, seed)
            },
            &rand(&[2, 3, 4], seed),
            STEP,
            1e-4,
        )
        .unwrap();
        assert_pass(r, "masked_softmax");
    }
}

#[test]
fn softmax_rows_sum_to_one_and_shift_invariant() {
    for seed in 0..20 {
        let x = rand(&[4, 6], seed).map(|v| v * 5.0);
        let tape = Tape::new();
        let y = tape.constant(x.clone()).softmax(1).unwrap().value();
        for row in y.data().chunks(6) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
        }
        let shifted = tape.constant(x.map(|v| v + 123.25)).softmax(1).unwrap().value();
        assert!(y.max_abs_diff(&shifted) < 1e-12);
    }
}

#[test]
fn reductions_and_layout_ops() {
    for seed in 0..20 {
        let x = rand(&[2, 3, 4], seed);
        let checks: Vec<Box<dyn for<'t> Fn(Var<'t>) -> hsam_core::Result<Var<'t>>>> = vec![
            Box::new(|v| v.sum(Some(1))),
            Box::new(|v| v.mean(Some(2))),
            Box::new(|v| v.mean(None)),
            Box::new(|v| v.max(Some(0))),
            Box::new(|v| v.max(None)),
            Box::new(|v| v.reshape(&[6, 4])),
            Box::new(|v| v.permute(&[2, 0, 1])),
            Box::new(|v| v.transpose()),
            Box::new(|v| v.narrow(1, 1, 2)),
            Box::new(|v| v.sum(Some(0))?.broadcast_to(&[5, 3, 4])),
        ];
        for (i, g) in checks.iter().enumerate() {
            let r = grad_check(|_, v| project(g(v)?, seed), &x, STEP, 1e-4).unwrap();
            assert_pass(r, &format!("layout op {i}"));
        }
        let r = grad_check_many(
            |t, v| project(t.concat(&[v[0], v[1], v[0]], 1)?, seed),
            &[rand(&[2, 3, 4], seed), rand(&[2, 1, 4], seed + 3)],
            STEP,
            1e-4,
        )
        .unwrap();
        assert_pass(r, "concat");
    }
}

#[test]
fn layer_norm_gradients_and_moments() {
    for seed in 0..20 {
        let r = grad_check_many(
            |_, v| project(v[0].layer_norm(&v[1], &v[2], 1e-5)?, seed),
            &[rand(&[3, 5], seed), rand(&[5], seed + 1), rand(&[5], seed + 2)],
            STEP,
            1e-4,
        )
        .unwrap();
        assert_pass(r, "layer_norm");
    }
    let tape = Tape::new();
    let x = tape.constant(rand(&[4, 16], 9));
    let g = tape.constant(Tensor::ones(&[16]));
    let b = tape.constant(Tensor::zeros(&[16]));
    let y = x.layer_norm(&g, &b, 1e-300).unwrap().value();
    for row in y.data().chunks(16) {
        let mean = row.iter().sum::<f64>() / 16.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-9, "{mean} {var}");
    }
    let c = tape.constant(Tensor::full(&[2, 4], 3.0));
    let (g4, b4) = (tape.constant(Tensor::ones(&[4])), tape.constant(Tensor::zeros(&[4])));
    assert!(c.layer_norm(&g4, &b4, 1e-5).unwrap().value().data().iter().all(|&v| v == 0.0));
}

#[test]
fn convolution_gradients() {
    for seed in 0..20 {
        let r = grad_check_many(
            |_, v| project(v[0].conv2d(&v[1], Some(&v[2]), 1, 1)?, seed),
            &[rand(&[1, 2, 5, 5], seed), rand(&[3, 2, 3, 3], seed + 1), rand(&[3], seed + 2)],
            STEP,
            1e-4,
        )
        .unwrap();
        assert_pass(r, "conv2d");
        let r = grad_check_many(
            |_, v| project(v[0].conv2d(&v[1], None, 2, 0)?, seed),
            &[rand(&[2, 1, 5, 4], seed), rand(&[2, 1, 2, 2], seed + 1)],
            STEP,
            1e-4,
        )
        .unwrap();
        assert_pass(r, "strided conv2d");
        let r = grad_check_many(
            |_, v| project(v[0].conv_transpose2d(&v[1], Some(&v[2]), 2, 0)?, seed),
            &[rand(&[2, 2, 3, 3], seed), rand(&[2, 3, 2, 2], seed + 1), rand(&[3], seed + 2)],
            STEP,
            1e-4,
        )
        .unwrap();
        assert_pass(r, "conv_transpose2d");
        let r = grad_check_many(
            |_, v| project(v[0].conv_transpose2d(&v[1], None, 2, 1)?, seed),
            &[rand(&[1, 2, 3, 3], seed), rand(&[2, 1, 3, 3], seed + 1)],
            STEP,
            1e-4,
        )
        .unwrap();
        assert_pass(r, "padded conv_transpose2d");
    }
}

#[test]
fn conv_closed_forms() {
    let tape = Tape::new();
    let x = tape.constant(rand(&[1, 1, 4, 5], 1));
    let one = tape.constant(Tensor::ones(&[1, 1, 1, 1]));
    assert_eq!(x.conv2d(&one, None, 1, 0).unwrap().value(), x.value());
    let c = 1.75;
    let flat = tape.constant(Tensor::full(&[1, 1, 5, 5], c));
    let k = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
    let y = flat.conv2d(&k, None, 1, 1).unwrap().value();
    for i in 1..4 {
        for j in 1..4 {
            assert_eq!(y.at(&[0, 0, i, j]), 9.0 * c);
        }
    }
    let v = tape.constant(Tensor::full(&[1, 1, 1, 1], -2.5));
    let k2 = tape.constant(Tensor::ones(&[1, 1, 2, 2]));
    assert_eq!(v.conv_transpose2d(&k2, None, 2, 0).unwrap().value().data(), &[-2.5; 4]);
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    let specs = [(1usize, 0usize, 3usize), (2, 0, 2), (2, 1, 3), (3, 1, 4)];
    for seed in 0..20u64 {
        for &(stride, pad, k) in &specs {
            let tape = Tape::new();
            let w = tape.constant(rand(&[4, 3, k, k], seed + 1));
            let y = tape.constant(rand(&[2, 4, 4, 5], seed + 2));
            let ty = y.conv_transpose2d(&w, None, stride, pad).unwrap();
            let x = tape.constant(rand(&ty.shape(), seed));
            let cx = x.conv2d(&w, None, stride, pad).unwrap();
            assert_eq!(cx.shape(), y.shape());
            let lhs = cx.value().dot(&y.value());
            let rhs = x.value().dot(&ty.value());
            assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
        }
    }
}

#[test]
fn resize_gradients() {
    for seed in 0..20 {
        for (oh, ow) in [(7, 5), (2, 3), (8, 8), (1, 1)] {
            let r = grad_check(
                |_, v| project(v.resize_bilinear(oh, ow)?, seed),
                &rand(&[2, 2, 4, 3], seed),
                STEP,
                1e-4,
            )
            .unwrap();
            assert_pass(r, "resize");
        }
    }
}

#[test]
fn composite_softmax_matmul_mean() {
    for seed in 0..20 {
        let r = grad_check_many(
            |_, v| v[0].softmax(1)?.matmul(&v[1])?.mean(None),
            &[rand(&[3, 4], seed), rand(&[4, 2], seed + 5)],
            STEP,
            1e-5,
        )
        .unwrap();
        assert_pass(r, "softmax->matmul->mean");
    }
}

#[test]
fn grad_check_of_sum_is_exact() {
    for v in [0.0, 1.0, -3.5, 0.125, 1234.5] {
        let r = grad_check(|_, x| x.sum(None), &Tensor::scalar(v), STEP, 0.0).unwrap();
        assert_eq!(r.max_rel_error, 0.0, "at {v}");
    }
    for seed in 0..20 {
        let r = grad_check(|_, x| x.sum(None), &rand(&[3, 3], seed), STEP, 1e-9).unwrap();
        assert!(r.max_rel_error < 1e-10, "{r:?}");
    }
}

#[test]
fn grad_check_mean_of_squares_passes() {
    for seed in 0..20 {
        let r = grad_check(|_, x| x.mul(&x)?.mean(None), &rand(&[4, 5], seed), STEP, 1e-5)
            .unwrap();
        assert_pass(r, "mean of squares");
    }
}

struct WrongSquare;

impl CustomBackward for WrongSquare {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &[f64]) -> Vec<Vec<f64>> {
        // Missing the factor of two.
        vec![inputs[0].data().iter().zip(grad).map(|(x, g)| x * g).collect()]
    }
}

#[test]
fn grad_check_flags_a_wrong_backward() {
    let r = grad_check(
        |t, x| {
            let y = t.custom(&[x], x.value().map(|v| v * v), Box::new(WrongSquare));
            y.sum(None)
        },
        &rand(&[4], 3),
        STEP,
        1e-4,
    )
    .unwrap();
    assert!(!r.passed);
    assert!(r.max_rel_error > 0.4);
}

#[test]
fn grad_check_rejects_non_finite() {
    let r = grad_check(|_, x| x.scale(1e308).scale(1e308).sum(None), &Tensor::ones(&[2]), STEP, 1e-4);
    assert!(matches!(r, Err(Error::Domain(_))));
}

#[test]
fn operations_are_bit_deterministic() {
    let run = || {
        let tape = Tape::new();
        let x = tape.leaf(rand(&[1, 2, 6, 6], 5), true);
        let w = tape.leaf(rand(&[3, 2, 3, 3], 6), true);
        let y = x.conv2d(&w, None, 1, 1).unwrap().gelu().softmax(1).unwrap();
        let l = y.resize_bilinear(9, 9).unwrap().mean(None).unwrap();
        l.backward().unwrap();
        (l.item().to_bits(), w.grad().unwrap())
    };
    assert_eq!(run(), run());
}
