use std::collections::BTreeMap;

use mvft::{adam_step, AdamState, MvftError, ParamStore, SeededRng, Tape, Tensor, Var};
use proptest::prelude::*;

fn random(shape: &[usize], rng: &mut SeededRng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut c = Tensor::zeros(&[m, n]);
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.at(&[i, p]) * b.at(&[p, j]);
            }
            c.set(&[i, j], s);
        }
    }
    c
}

/// Builds a scalar from `inputs` on a fresh tape, compares reverse-mode
/// gradients with central differences (h = 1e-5) and returns the worst
/// relative error.
fn grad_check(inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let eval = |xs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let out = build(&mut tape, &vars);
        tape.value(out).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = build(&mut tape, &vars);
    let grads = tape.backward(out).unwrap();

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[i], x.shape());
        for j in 0..x.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    worst
}

/// Reduces any output to a scalar with fixed pseudo-random weights so every
/// output entry contributes to the checked gradient.
fn scalarize(tape: &mut Tape, x: Var) -> Var {
    let n = tape.value(x).len();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7 + 3) % 11) as f64 / 11.0 - 0.4).collect();
    tape.weighted_sum(x, &w).unwrap()
}

#[test]
fn matmul_examples() {
    let mut tape = Tape::new();
    let id = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
    let m = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
    let mv = tape.constant(m.clone());
    let out = tape.matmul(id, mv).unwrap();
    assert_eq!(tape.value(out), &m);

    let a = tape.constant(Tensor::from_rows(&[vec![2.0]]).unwrap());
    let b = tape.constant(Tensor::from_rows(&[vec![3.0]]).unwrap());
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[6.0]);

    let mut rng = SeededRng::new(11);
    let (a, b) = (random(&[5, 4], &mut rng), random(&[4, 3], &mut rng));
    let va = tape.constant(a.clone());
    let vb = tape.constant(b.clone());
    let c = tape.matmul(va, vb).unwrap();
    assert!(tape.value(c).max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    match tape.matmul(a, b) {
        Err(MvftError::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, [2, 3]);
            assert_eq!(rhs, [2, 3]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn identity_product_is_bitwise_exact() {
    let mut rng = SeededRng::new(5);
    let (a, b) = (random(&[4, 6], &mut rng), random(&[6, 3], &mut rng));
    let mut eye = Tensor::zeros(&[6, 6]);
    for i in 0..6 {
        eye.set(&[i, i], 1.0);
    }
    let mut tape = Tape::new();
    let (va, vb, vi) = (tape.constant(a), tape.constant(b), tape.constant(eye));
    let ai = tape.matmul(va, vi).unwrap();
    let left = tape.matmul(ai, vb).unwrap();
    let right = tape.matmul(va, vb).unwrap();
    let bits = |v: Var| tape.value(v).data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(left), bits(right));
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
    let y = tape.softmax(x);
    assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    let x = tape.constant(Tensor::ones(&[1, 3]));
    let y = tape.softmax(x);
    for &p in tape.value(y).data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(
        rows in 1usize..5,
        cols in 1usize..7,
        seed in any::<u64>(),
        magnitude in prop::sample::select(vec![1.0, 100.0, 1e4]),
    ) {
        let mut rng = SeededRng::new(seed);
        let x = random(&[rows, cols], &mut rng).map(|v| v * magnitude);
        let shifted = x.map(|v| v + 100.0);
        let mut tape = Tape::new();
        let vx = tape.constant(x);
        let vs = tape.constant(shifted);
        let y = tape.softmax(vx);
        let ys = tape.softmax(vs);
        let out = tape.value(y);
        for r in 0..rows {
            let row = out.row(r);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        prop_assert!(out.max_abs_diff(tape.value(ys)) < 1e-9);
    }
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::new();
    let g = tape.constant(Tensor::ones(&[2]));
    let b = tape.constant(Tensor::zeros(&[2]));
    let x = tape.constant(Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap());
    let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
    assert!(tape.value(y).max_abs_diff(&Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap()) < 1e-9);

    let g = tape.constant(Tensor::new(vec![3], vec![2.0, -1.0, 0.5]).unwrap());
    let beta = Tensor::new(vec![3], vec![0.25, -0.5, 3.0]).unwrap();
    let b = tape.constant(beta.clone());
    let x = tape.constant(Tensor::new(vec![1, 3], vec![5.0; 3]).unwrap());
    let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
    assert!(tape.value(y).reshape(&[3]).unwrap().max_abs_diff(&beta) < 1e-12);

    assert!(tape.layer_norm(x, g, b, 0.0).is_err());
}

#[test]
fn layer_norm_normalizes_random_rows() {
    let mut rng = SeededRng::new(3);
    for _ in 0..50 {
        let d = 2 + rng.below(30);
        let x = random(&[1, d], &mut rng).map(|v| v * 10.0 + 3.0);
        let mut tape = Tape::new();
        let vx = tape.constant(x);
        let g = tape.constant(Tensor::ones(&[d]));
        let b = tape.constant(Tensor::zeros(&[d]));
        let y = tape.layer_norm(vx, g, b, 1e-5).unwrap();
        let row = tape.value(y).data();
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        assert!(mean.abs() < 1e-9, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-3, "variance {var}");
    }
}

#[test]
fn square_gradient() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(3.0));
    let y = tape.mul(x, x).unwrap();
    let grads = tape.backward(y).unwrap();
    assert_eq!(grads.get(x).unwrap().item(), 6.0);
}

#[test]
fn sum_of_product_gradient_closed_form() {
    let mut rng = SeededRng::new(9);
    let (a, b) = (random(&[3, 4], &mut rng), random(&[4, 2], &mut rng));
    let mut tape = Tape::new();
    let (va, vb) = (tape.param(a.clone()), tape.param(b.clone()));
    let c = tape.matmul(va, vb).unwrap();
    let loss = tape.sum(c);
    let grads = tape.backward(loss).unwrap();
    // dA[i][p] = Σ_j B[p][j], dB[p][j] = Σ_i A[i][p]
    let ga = grads.get(va).unwrap();
    for i in 0..3 {
        for p in 0..4 {
            let expect: f64 = b.row(p).iter().sum();
            assert!((ga.at(&[i, p]) - expect).abs() < 1e-12);
        }
    }
    let gb = grads.get(vb).unwrap();
    for p in 0..4 {
        for j in 0..2 {
            let expect: f64 = (0..3).map(|i| a.at(&[i, p])).sum();
            assert!((gb.at(&[p, j]) - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::zeros(&[2]));
    assert!(matches!(tape.backward(x), Err(MvftError::Contract(_))));
}

#[test]
fn every_op_matches_finite_differences() {
    let mut rng = SeededRng::new(2024);
    let tol = 1e-4;
    let check = |name: &str, inputs: Vec<Tensor>, f: &dyn Fn(&mut Tape, &[Var]) -> Var| {
        let err = grad_check(&inputs, f);
        assert!(err < tol, "{name}: relative error {err:e}");
    };

    check("matmul", vec![random(&[2, 3, 4], &mut rng), random(&[4, 5], &mut rng)], &|t, v| {
        let y = t.matmul(v[0], v[1]).unwrap();
        scalarize(t, y)
    });
    check("bmm", vec![random(&[2, 3, 4], &mut rng), random(&[2, 4, 2], &mut rng)], &|t, v| {
        let y = t.bmm(v[0], v[1]).unwrap();
        scalarize(t, y)
    });
    check("bmm_nt", vec![random(&[2, 3, 4], &mut rng), random(&[2, 5, 4], &mut rng)], &|t, v| {
        let y = t.bmm_nt(v[0], v[1]).unwrap();
        scalarize(t, y)
    });
    check("add", vec![random(&[3, 2], &mut rng), random(&[3, 2], &mut rng)], &|t, v| {
        let y = t.add(v[0], v[1]).unwrap();
        scalarize(t, y)
    });
    check("add_broadcast", vec![random(&[2, 3, 4], &mut rng), random(&[3, 4], &mut rng)], &|t, v| {
        let y = t.add_broadcast(v[0], v[1]).unwrap();
        scalarize(t, y)
    });
    check("mul", vec![random(&[5], &mut rng), random(&[5], &mut rng)], &|t, v| {
        let y = t.mul(v[0], v[1]).unwrap();
        scalarize(t, y)
    });
    check("scale", vec![random(&[4], &mut rng)], &|t, v| {
        let y = t.scale(v[0], -2.5);
        scalarize(t, y)
    });
    check("softmax", vec![random(&[3, 5], &mut rng)], &|t, v| {
        let y = t.softmax(v[0]);
        scalarize(t, y)
    });
    check(
        "layer_norm",
        vec![random(&[3, 6], &mut rng), random(&[6], &mut rng), random(&[6], &mut rng)],
        &|t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
            scalarize(t, y)
        },
    );
    check("gelu", vec![random(&[10], &mut rng).map(|x| 3.0 * x)], &|t, v| {
        let y = t.gelu(v[0]);
        scalarize(t, y)
    });
    check(
        "concat",
        vec![random(&[2, 3, 4], &mut rng), random(&[2, 1, 4], &mut rng)],
        &|t, v| {
            let y = t.concat(&[v[0], v[1]], 1).unwrap();
            scalarize(t, y)
        },
    );
    check("reshape+expand", vec![random(&[6], &mut rng)], &|t, v| {
        let y = t.reshape(v[0], &[2, 3]).unwrap();
        let y = t.expand(y, 3);
        scalarize(t, y)
    });
    check("gather", vec![random(&[4, 3], &mut rng)], &|t, v| {
        let y = t.gather(v[0], &[0, 2, 2, 3, 0, 1], &[2, 3]).unwrap();
        scalarize(t, y)
    });
    check("cross_entropy", vec![random(&[4, 3], &mut rng)], &|t, v| {
        t.cross_entropy(v[0], &[0, 2, 1, 2]).unwrap()
    });
    check("mean", vec![random(&[2, 5], &mut rng)], &|t, v| {
        let y = t.mul(v[0], v[0]).unwrap();
        t.mean(y)
    });
    check("dropout", vec![random(&[6], &mut rng)], &|t, v| {
        let y = t.dropout(v[0], vec![2.0, 0.0, 2.0, 2.0, 0.0, 2.0]).unwrap();
        scalarize(t, y)
    });
}

#[test]
fn cross_entropy_values() {
    let mut tape = Tape::new();
    let l = tape.constant(Tensor::zeros(&[2, 4]));
    let loss = tape.cross_entropy(l, &[0, 3]).unwrap();
    assert!((tape.value(loss).item() - 4f64.ln()).abs() < 1e-12);

    let l = tape.constant(Tensor::new(vec![1, 3], vec![0.0, 30.0, 0.0]).unwrap());
    let loss = tape.cross_entropy(l, &[1]).unwrap();
    assert!(tape.value(loss).item() < 1e-9);

    assert!(matches!(tape.cross_entropy(l, &[3]), Err(MvftError::Contract(_))));
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_onehot() {
    let mut rng = SeededRng::new(77);
    let logits = random(&[5, 4], &mut rng).map(|x| 4.0 * x);
    let labels = [3, 0, 1, 1, 2];
    let mut tape = Tape::new();
    let v = tape.param(logits.clone());
    let loss = tape.cross_entropy(v, &labels).unwrap();
    let g = tape.backward(loss).unwrap().get(v).unwrap().clone();
    for (b, &label) in labels.iter().enumerate() {
        let row = logits.row(b);
        let z: f64 = row.iter().map(|x| x.exp()).sum();
        for k in 0..4 {
            let p = row[k].exp() / z;
            let expect = (p - if k == label { 1.0 } else { 0.0 }) / labels.len() as f64;
            assert!((g.at(&[b, k]) - expect).abs() < 1e-12);
        }
    }
}

/// Textbook scalar Adam written out step by step.
fn reference_adam(x0: f64, lr: f64, steps: usize) -> f64 {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let (mut x, mut m, mut v) = (x0, 0.0, 0.0);
    for t in 1..=steps {
        let g = 2.0 * x;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t as i32));
        let vh = v / (1.0 - b2.powi(t as i32));
        x -= lr * mh / (vh.sqrt() + eps);
    }
    x
}

#[test]
fn adam_matches_reference_on_quadratic() {
    let lr = 0.05;
    let mut params = ParamStore::new();
    params.insert("x", Tensor::scalar(1.0));
    let mut state = AdamState::for_params(lr, &params);
    for _ in 0..10 {
        let x = params.get("x").unwrap().item();
        let grads = BTreeMap::from([("x".to_string(), Tensor::scalar(2.0 * x))]);
        adam_step(&mut params, &grads, &mut state).unwrap();
    }
    let got = params.get("x").unwrap().item();
    assert!((got - reference_adam(1.0, lr, 10)).abs() < 1e-12);
    assert_eq!(state.t, 10);
}
