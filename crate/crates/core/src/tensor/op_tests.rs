//! Finite-difference oracles and hand examples for every primitive.
//!
//! The oracle perturbs one element at a time and re-runs the forward pass
//! from scratch, so it is independent of the tape's backward path.

use rand::Rng;

use super::{Mode, Tape, Tensor};
use crate::util::derive_rng;

const FD_STEP: f64 = 1e-5;

/// Central finite differences of `loss_fn` with respect to `param`.
fn finite_diff(param: &Tensor, mut loss_fn: impl FnMut() -> f64) -> Vec<f64> {
    let base = param.to_vec();
    let mut grad = vec![0.0; base.len()];
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += FD_STEP;
        param.set_data(&plus);
        let up = loss_fn();
        let mut minus = base.clone();
        minus[i] -= FD_STEP;
        param.set_data(&minus);
        let down = loss_fn();
        grad[i] = (up - down) / (2.0 * FD_STEP);
    }
    param.set_data(&base);
    grad
}

fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).abs() / f64::max(1.0, f64::max(a.abs(), b.abs())))
        .fold(0.0, f64::max)
}

fn rand_tensor<R: Rng>(shape: Vec<usize>, rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).unwrap()
}

#[test]
fn matmul_identity_and_projector() {
    let tape = Tape::new();
    let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let m = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(tape.matmul(&eye, &m).unwrap().to_vec(), vec![1.0, 2.0, 3.0, 4.0]);

    let proj = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
    let v = Tensor::new(vec![2, 1], vec![5.0, 7.0]).unwrap();
    assert_eq!(tape.matmul(&proj, &v).unwrap().to_vec(), vec![5.0, 0.0]);
}

#[test]
fn matmul_dimension_mismatch_is_shape_error() {
    let tape = Tape::new();
    let a = Tensor::zeros(vec![2, 3]);
    let b = Tensor::zeros(vec![2, 2]);
    assert!(matches!(
        tape.matmul(&a, &b),
        Err(crate::Error::Shape(_))
    ));
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = derive_rng(11, 0);
    let a = rand_tensor(vec![3, 4], &mut rng).requires_grad();
    let b = rand_tensor(vec![4, 2], &mut rng).requires_grad();

    let tape = Tape::new();
    let loss = tape.sum(&tape.matmul(&a, &b).unwrap());
    tape.backward(&loss).unwrap();

    let fd_a = finite_diff(&a, || {
        let t = Tape::new();
        t.sum(&t.matmul(&a, &b).unwrap()).item()
    });
    let fd_b = finite_diff(&b, || {
        let t = Tape::new();
        t.sum(&t.matmul(&a, &b).unwrap()).item()
    });
    assert!(max_rel_err(&a.grad().unwrap(), &fd_a) < 1e-6);
    assert!(max_rel_err(&b.grad().unwrap(), &fd_b) < 1e-6);
}

#[test]
fn conv1d_identity_kernel() {
    let tape = Tape::new();
    let x = Tensor::new(vec![4, 1], vec![0.5, -1.0, 2.0, 3.0]).unwrap();
    let w = Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap();
    assert_eq!(tape.conv1d(&x, &w).unwrap().to_vec(), x.to_vec());
}

#[test]
fn conv1d_hand_sum_with_zero_padding() {
    let tape = Tape::new();
    let x = Tensor::new(vec![3, 1], vec![1.0, 2.0, 3.0]).unwrap();
    let w = Tensor::new(vec![3, 1, 1], vec![1.0, 1.0, 1.0]).unwrap();
    assert_eq!(tape.conv1d(&x, &w).unwrap().to_vec(), vec![3.0, 6.0, 5.0]);
}

#[test]
fn conv1d_even_kernel_is_config_error() {
    let tape = Tape::new();
    let x = Tensor::zeros(vec![4, 1]);
    let w = Tensor::zeros(vec![2, 1, 1]);
    assert!(matches!(tape.conv1d(&x, &w), Err(crate::Error::Config(_))));
}

#[test]
fn conv1d_gradient_matches_finite_differences() {
    let mut rng = derive_rng(12, 0);
    let x = rand_tensor(vec![6, 2], &mut rng).requires_grad();
    let w = rand_tensor(vec![3, 2, 3], &mut rng).requires_grad();

    let tape = Tape::new();
    let loss = tape.sum(&tape.conv1d(&x, &w).unwrap());
    tape.backward(&loss).unwrap();

    let fd_w = finite_diff(&w, || {
        let t = Tape::new();
        t.sum(&t.conv1d(&x, &w).unwrap()).item()
    });
    let fd_x = finite_diff(&x, || {
        let t = Tape::new();
        t.sum(&t.conv1d(&x, &w).unwrap()).item()
    });
    assert!(max_rel_err(&w.grad().unwrap(), &fd_w) < 1e-6);
    assert!(max_rel_err(&x.grad().unwrap(), &fd_x) < 1e-6);
}

#[test]
fn conv1d_batched_matches_per_series() {
    // [B=2, T=5, N=3, C=2] conv equals running each (b, n) series alone
    let mut rng = derive_rng(13, 0);
    let x = rand_tensor(vec![2, 5, 3, 2], &mut rng);
    let w = rand_tensor(vec![3, 2, 4], &mut rng);
    let tape = Tape::new();
    let out = tape.conv1d(&x, &w).unwrap();
    let od = out.to_vec();
    let xd = x.to_vec();
    for b in 0..2 {
        for n in 0..3 {
            let mut series = vec![0.0; 5 * 2];
            for t in 0..5 {
                for c in 0..2 {
                    series[t * 2 + c] = xd[((b * 5 + t) * 3 + n) * 2 + c];
                }
            }
            let xs = Tensor::new(vec![5, 2], series).unwrap();
            let single = tape.conv1d(&xs, &w).unwrap().to_vec();
            for t in 0..5 {
                for c in 0..4 {
                    let got = od[((b * 5 + t) * 3 + n) * 4 + c];
                    assert!((got - single[t * 4 + c]).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn batch_norm_zero_input_zero_output() {
    let tape = Tape::new();
    let x = Tensor::zeros(vec![4, 3]);
    let gamma = Tensor::new(vec![3], vec![1.0; 3]).unwrap();
    let beta = Tensor::zeros(vec![3]);
    let mut rm = vec![0.0; 3];
    let mut rv = vec![1.0; 3];
    let out = tape
        .batch_norm(&x, &gamma, &beta, &mut rm, &mut rv, Mode::Train)
        .unwrap();
    assert!(out.to_vec().iter().all(|&v| v == 0.0));
}

#[test]
fn batch_norm_unit_variance_input_roundtrips() {
    let tape = Tape::new();
    let x = Tensor::new(vec![2, 1], vec![-1.0, 1.0]).unwrap();
    let gamma = Tensor::new(vec![1], vec![1.0]).unwrap();
    let beta = Tensor::zeros(vec![1]);
    let (mut rm, mut rv) = (vec![0.0], vec![1.0]);
    let out = tape
        .batch_norm(&x, &gamma, &beta, &mut rm, &mut rv, Mode::Train)
        .unwrap()
        .to_vec();
    // epsilon pulls the scale just below 1
    assert!((out[0] + 1.0).abs() < 1e-5 && (out[1] - 1.0).abs() < 1e-5);
}

#[test]
fn batch_norm_eval_before_train_uses_initial_stats() {
    let tape = Tape::new();
    let x = Tensor::new(vec![2, 1], vec![3.0, 5.0]).unwrap();
    let gamma = Tensor::new(vec![1], vec![1.0]).unwrap();
    let beta = Tensor::zeros(vec![1]);
    let (mut rm, mut rv) = (vec![0.0], vec![1.0]);
    let out = tape
        .batch_norm(&x, &gamma, &beta, &mut rm, &mut rv, Mode::Eval)
        .unwrap()
        .to_vec();
    let scale = 1.0 / (1.0f64 + 1e-5).sqrt();
    assert!((out[0] - 3.0 * scale).abs() < 1e-12);
    assert!((out[1] - 5.0 * scale).abs() < 1e-12);
}

#[test]
fn batch_norm_backward_matches_finite_differences() {
    // composed with a matmul so the check exercises cross-element terms
    let mut rng = derive_rng(14, 0);
    let x = rand_tensor(vec![4, 3, 2], &mut rng).requires_grad();
    let gamma = Tensor::new(vec![2], vec![1.3, 0.7]).unwrap().requires_grad();
    let beta = Tensor::new(vec![2], vec![0.1, -0.2]).unwrap().requires_grad();
    let mix = rand_tensor(vec![2, 2], &mut rng);

    let run = |tape: &Tape, rm: &mut Vec<f64>, rv: &mut Vec<f64>| {
        let h = tape
            .batch_norm(&x, &gamma, &beta, rm, rv, Mode::Train)
            .unwrap();
        tape.sum(&tape.matmul(&h, &mix).unwrap())
    };

    let (mut rm, mut rv) = (vec![0.0; 2], vec![1.0; 2]);
    let tape = Tape::new();
    let loss = run(&tape, &mut rm, &mut rv);
    tape.backward(&loss).unwrap();

    for (name, p) in [("x", &x), ("gamma", &gamma), ("beta", &beta)] {
        let fd = finite_diff(p, || {
            let t = Tape::new();
            let (mut rm, mut rv) = (vec![0.0; 2], vec![1.0; 2]);
            run(&t, &mut rm, &mut rv).item()
        });
        let err = max_rel_err(&p.grad().unwrap(), &fd);
        assert!(err < 1e-5, "{name}: rel err {err}");
    }
}

#[test]
fn relu_examples_and_gradient() {
    let tape = Tape::new();
    let x = Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap().requires_grad();
    let out = tape.relu(&x);
    assert_eq!(out.to_vec(), vec![0.0, 0.0, 2.0]);

    let loss = tape.sum(&out);
    tape.backward(&loss).unwrap();
    // subgradient 0 at 0
    assert_eq!(x.grad().unwrap(), vec![0.0, 0.0, 1.0]);

    let neg = Tensor::new(vec![2], vec![-3.0, -0.5]).unwrap();
    assert_eq!(tape.relu(&neg).to_vec(), vec![0.0, 0.0]);
}

#[test]
fn dropout_identity_cases_and_errors() {
    let tape = Tape::new();
    let mut rng = derive_rng(15, 0);
    let x = Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let same = tape.dropout(&x, 0.0, Mode::Train, &mut rng).unwrap();
    assert_eq!(same.to_vec(), x.to_vec());
    let eval = tape.dropout(&x, 0.9, Mode::Eval, &mut rng).unwrap();
    assert_eq!(eval.to_vec(), x.to_vec());
    assert!(matches!(
        tape.dropout(&x, 1.0, Mode::Train, &mut rng),
        Err(crate::Error::Config(_))
    ));
}

#[test]
fn dropout_keeps_rate_and_mean() {
    let n = 100_000;
    let tape = Tape::new();
    let mut rng = derive_rng(16, 0);
    let x = Tensor::new(vec![n], vec![1.0; n]).unwrap();
    let out = tape.dropout(&x, 0.5, Mode::Train, &mut rng).unwrap();
    let od = out.to_vec();
    let kept = od.iter().filter(|&&v| v != 0.0).count() as f64 / n as f64;
    assert!((0.49..=0.51).contains(&kept), "kept fraction {kept}");
    let mean = od.iter().sum::<f64>() / n as f64;
    assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
}

#[test]
fn dropout_is_deterministic_under_seed() {
    let x = Tensor::new(vec![64], (0..64).map(|i| i as f64).collect()).unwrap();
    let run = || {
        let tape = Tape::new();
        let mut rng = derive_rng(17, 3);
        tape.dropout(&x, 0.5, Mode::Train, &mut rng).unwrap().to_vec()
    };
    assert_eq!(run(), run());
}

#[test]
fn global_mean_pool_examples_and_backward() {
    let tape = Tape::new();
    let c = Tensor::new(vec![2, 3, 2], vec![7.0; 12]).unwrap();
    assert_eq!(tape.global_mean_pool(&c).unwrap().to_vec(), vec![7.0, 7.0]);

    let x = Tensor::new(vec![1, 2, 1], vec![1.0, 3.0]).unwrap().requires_grad();
    let pooled = tape.global_mean_pool(&x).unwrap();
    assert_eq!(pooled.to_vec(), vec![2.0]);
    let loss = tape.sum(&pooled);
    tape.backward(&loss).unwrap();
    assert_eq!(x.grad().unwrap(), vec![0.5, 0.5]);
}

#[test]
fn bce_examples_and_gradient() {
    let tape = Tape::new();
    let z = Tensor::new(vec![1], vec![0.0]).unwrap().requires_grad();
    let loss = tape.bce_with_sigmoid(&z, &[1]).unwrap();
    assert!((loss.item() - std::f64::consts::LN_2).abs() < 1e-12);
    tape.backward(&loss).unwrap();
    // sigmoid(0) - 1 = -0.5
    assert!((z.grad().unwrap()[0] + 0.5).abs() < 1e-12);

    let big = Tensor::new(vec![1], vec![50.0]).unwrap();
    let t2 = Tape::new();
    let l2 = t2.bce_with_sigmoid(&big, &[1]).unwrap();
    assert!(l2.item() >= 0.0 && l2.item() < 1e-20);

    let t3 = Tape::new();
    let zs = Tensor::new(vec![2], vec![0.3, -0.8]).unwrap().requires_grad();
    let l3 = t3.bce_with_sigmoid(&zs, &[0, 1]).unwrap();
    t3.backward(&l3).unwrap();
    let g = zs.grad().unwrap();
    assert!((g[0] - crate::util::sigmoid(0.3) / 2.0).abs() < 1e-12);
    assert!((g[1] - (crate::util::sigmoid(-0.8) - 1.0) / 2.0).abs() < 1e-12);
}

#[test]
fn backward_of_sum_is_ones_and_accumulates() {
    let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap().requires_grad();
    let tape = Tape::new();
    let loss = tape.sum(&x);
    tape.backward(&loss).unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0; 3]);
    tape.backward(&loss).unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0; 3]);
    x.zero_grad();
    tape.backward(&loss).unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0; 3]);
}

#[test]
fn backward_requires_scalar_loss() {
    let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().requires_grad();
    let tape = Tape::new();
    let out = tape.relu(&x);
    assert!(matches!(tape.backward(&out), Err(crate::Error::Contract(_))));
}

#[test]
fn graph_aggregate_and_bias_gradients_match_fd() {
    let mut rng = derive_rng(18, 0);
    let a = rand_tensor(vec![3, 3], &mut rng).requires_grad();
    let h = rand_tensor(vec![2, 4, 3, 2], &mut rng).requires_grad();
    let bias = rand_tensor(vec![3, 2], &mut rng).requires_grad();

    let run = |t: &Tape| {
        let hb = t.add_bias(&h, &bias).unwrap();
        let agg = t.graph_aggregate(&a, &hb).unwrap();
        t.sum(&t.relu(&agg))
    };
    let tape = Tape::new();
    let loss = run(&tape);
    tape.backward(&loss).unwrap();

    for (name, p) in [("a", &a), ("h", &h), ("bias", &bias)] {
        let fd = finite_diff(p, || run(&Tape::new()).item());
        let err = max_rel_err(&p.grad().unwrap(), &fd);
        assert!(err < 1e-6, "{name}: rel err {err}");
    }
}

#[test]
fn head_affine_and_transpose_gradients_match_fd() {
    let mut rng = derive_rng(19, 0);
    let x = rand_tensor(vec![3, 4, 2], &mut rng).requires_grad();
    let proj = rand_tensor(vec![2, 5], &mut rng);
    let w = rand_tensor(vec![5], &mut rng).requires_grad();
    let b = rand_tensor(vec![1], &mut rng).requires_grad();

    let run = |t: &Tape| {
        let xt = t.transpose01(&x).unwrap(); // [4,3,2]
        let flat = t.matmul(&xt, &proj).unwrap(); // [4,3,5]
        let pooled = t.global_mean_pool(&flat).unwrap(); // [5]
        t.sum(&pooled)
    };
    let xb = rand_tensor(vec![3, 5], &mut rng).requires_grad();
    let run_head = |t: &Tape| {
        let logits = t.head_affine(&xb, &w, &b).unwrap();
        t.bce_with_sigmoid(&logits, &[1, 0, 1]).unwrap()
    };
    let tape = Tape::new();
    let loss = run_head(&tape);
    tape.backward(&loss).unwrap();
    for (name, p) in [("xb", &xb), ("w", &w), ("b", &b)] {
        let fd = finite_diff(p, || run_head(&Tape::new()).item());
        let err = max_rel_err(&p.grad().unwrap(), &fd);
        assert!(err < 1e-6, "{name}: rel err {err}");
    }

    let tape2 = Tape::new();
    let loss2 = run(&tape2);
    tape2.backward(&loss2).unwrap();
    let fd = finite_diff(&x, || run(&Tape::new()).item());
    assert!(max_rel_err(&x.grad().unwrap(), &fd) < 1e-6);
}

#[test]
fn randomized_primitive_suite_fd_property() {
    // every differentiable primitive on randomized small tensors
    let mut rng = derive_rng(20, 0);
    for round in 0..3 {
        let x = rand_tensor(vec![2, 3, 2, 2], &mut rng).requires_grad();
        let a = rand_tensor(vec![2, 2], &mut rng).requires_grad();
        let bias = rand_tensor(vec![2, 2], &mut rng).requires_grad();
        let w = rand_tensor(vec![3, 2, 2], &mut rng).requires_grad();
        let gamma = Tensor::new(vec![2], vec![1.1, 0.9]).unwrap().requires_grad();
        let beta = Tensor::new(vec![2], vec![0.05, -0.05]).unwrap().requires_grad();
        let hw = rand_tensor(vec![2], &mut rng).requires_grad();
        let hb = rand_tensor(vec![1], &mut rng).requires_grad();
        let labels = [1, 0];

        let run = |t: &Tape| {
            let s = t.graph_aggregate(&a, &t.add_bias(&x, &bias).unwrap()).unwrap();
            let (mut rm, mut rv) = (vec![0.0; 2], vec![1.0; 2]);
            let s = t
                .batch_norm(&s, &gamma, &beta, &mut rm, &mut rv, Mode::Train)
                .unwrap();
            let s = t.relu(&s);
            let s = t.conv1d(&s, &w).unwrap();
            let pooled = t.global_mean_pool(&s).unwrap();
            let logits = t.head_affine(&pooled, &hw, &hb).unwrap();
            t.bce_with_sigmoid(&logits, &labels).unwrap()
        };
        let tape = Tape::new();
        let loss = run(&tape);
        tape.backward(&loss).unwrap();

        let params: [(&str, &Tensor); 8] = [
            ("x", &x),
            ("a", &a),
            ("bias", &bias),
            ("w", &w),
            ("gamma", &gamma),
            ("beta", &beta),
            ("hw", &hw),
            ("hb", &hb),
        ];
        for (name, p) in params {
            let fd = finite_diff(p, || run(&Tape::new()).item());
            let err = max_rel_err(&p.grad().unwrap(), &fd);
            assert!(err < 1e-4, "round {round}, {name}: rel err {err}");
        }
    }
}
