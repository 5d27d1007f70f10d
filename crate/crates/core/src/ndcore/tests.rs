use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::ssm::ScanMethod;

type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Var + 'a;

/// Random-weighted sum of `out`, so every output entry reaches the loss.
fn weighted_sum(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let shape = tape.shape(out).to_vec();
    let w = tape.constant(Tensor::randn(&shape, 1.0, &mut rng));
    let prod = tape.mul(out, w).unwrap();
    tape.sum(prod)
}

fn check_grad(inputs: &[Tensor], build: &Build<'_>, seed: u64, tol: f64) {
    let mut tape = Tape::default();
    let leaves: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &leaves);
    let loss = weighted_sum(&mut tape, out, seed);
    let grads = tape.backward(loss).unwrap();

    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(leaves[k]);
        let numeric = finite_diff_gradient(
            |theta| {
                let mut tape = Tape::default();
                let leaves: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| {
                        if j == k {
                            tape.param(Tensor::new(t.shape().to_vec(), theta.to_vec()).unwrap())
                        } else {
                            tape.param(t.clone())
                        }
                    })
                    .collect();
                let out = build(&mut tape, &leaves);
                let loss = weighted_sum(&mut tape, out, seed);
                tape.value(loss).item().unwrap()
            },
            input.data(),
            1e-5,
        )
        .unwrap();
        let err = max_relative_error(analytic.data(), &numeric, 1e-6);
        assert!(err < tol, "input {k}: relative error {err} (seed {seed})");
    }
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

#[test]
fn forward_examples() {
    let mut tape = Tape::default();
    let a = tape.constant(Tensor::from_vec(vec![1.0, 2.0]));
    let b = tape.constant(Tensor::from_vec(vec![3.0, 4.0]));
    let c = tape.add(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[4.0, 6.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let m = randn(&[2, 3], &mut rng);
    let i2 = tape.constant(Tensor::eye(2));
    let mv = tape.constant(m.clone());
    let p = tape.matmul(i2, mv).unwrap();
    assert_eq!(tape.value(p), &m);

    let z = tape.constant(Tensor::zeros(&[2]));
    let s = tape.softmax(z).unwrap();
    assert_eq!(tape.value(s).data(), &[0.5, 0.5]);
}

#[test]
fn shape_errors_name_both_shapes() {
    let mut tape = Tape::default();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[4, 5]));
    let msg = tape.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    assert!(tape.add(a, b).is_err());
}

#[test]
fn square_derivative() {
    let mut tape = Tape::default();
    let x = tape.param(Tensor::scalar(3.0));
    let y = tape.mul(x, x).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap().item().unwrap(), 6.0);
}

#[test]
fn linear_map_gradient_is_rows_of_ones() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tape = Tape::default();
    let a = tape.param(randn(&[3, 2], &mut rng));
    let x = tape.constant(Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap());
    let ax = tape.matmul(a, x).unwrap();
    let s = tape.sum(ax);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(a).unwrap(), Tensor::ones(&[3, 2]));
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::default();
    let x = tape.param(Tensor::zeros(&[2]));
    assert!(tape.backward(x).is_err());
}

#[test]
fn finite_diff_examples() {
    let g = finite_diff_gradient(|t| t[0] * t[0], &[3.0], 1e-5).unwrap();
    assert!((g[0] - 6.0).abs() < 1e-8);
    let g = finite_diff_gradient(|t| t[0].exp(), &[0.0], 1e-5).unwrap();
    assert!((g[0] - 1.0).abs() < 1e-9);
    assert!(finite_diff_gradient(|t| t[0], &[0.0], 0.0).is_err());
    assert!(finite_diff_gradient(|t| t[0], &[0.0], -1.0).is_err());
}

#[test]
fn detach_blocks_gradient() {
    let mut tape = Tape::default();
    let x = tape.param(Tensor::scalar(2.0));
    let y = tape.mul(x, x).unwrap();
    let yd = tape.detach(y);
    let z = tape.mul(yd, x).unwrap();
    let g = tape.backward(z).unwrap();
    // d(c·x)/dx with c = x² held constant
    assert_eq!(g.get(x).unwrap().item().unwrap(), 4.0);
}

#[test]
fn f32_mode_rounds_and_overflows() {
    let mut tape = Tape::new(Precision::F32);
    let x = tape.constant(Tensor::from_vec(vec![0.1, 3.0e38]));
    assert_eq!(tape.value(x).data()[0], 0.1f32 as f64);
    let y = tape.scale(x, 10.0);
    assert!(tape.value(y).data()[1].is_infinite());
    let mut wide = Tape::new(Precision::F64);
    let x = wide.constant(Tensor::from_vec(vec![3.0e38]));
    let y = wide.scale(x, 10.0);
    assert!(wide.value(y).data()[0].is_finite());
}

#[test]
fn forward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = randn(&[7, 5], &mut rng);
    let b = randn(&[5, 3], &mut rng);
    let run = || {
        let mut tape = Tape::default();
        let (x, y) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let p = tape.matmul(x, y).unwrap();
        let s = tape.softmax(p).unwrap();
        tape.value(s).clone()
    };
    assert_eq!(run(), run());
}

// Every primitive against central differences, 100 seeds each.
const SEEDS: u64 = 100;
const TOL: f64 = 1e-4;

#[test]
fn grad_elementwise_binary() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ins = [randn(&[3, 4], &mut rng), randn(&[3, 4], &mut rng)];
        check_grad(&ins, &|t, v| t.add(v[0], v[1]).unwrap(), seed, TOL);
        check_grad(&ins, &|t, v| t.sub(v[0], v[1]).unwrap(), seed, TOL);
        check_grad(&ins, &|t, v| t.mul(v[0], v[1]).unwrap(), seed, TOL);
    }
}

#[test]
fn grad_broadcast_and_affine() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ins = [randn(&[2, 3, 4], &mut rng), randn(&[4], &mut rng)];
        check_grad(&ins, &|t, v| t.add_broadcast(v[0], v[1]).unwrap(), seed, TOL);
        check_grad(&ins, &|t, v| t.mul_broadcast(v[0], v[1]).unwrap(), seed, TOL);
        check_grad(&ins[..1], &|t, v| t.affine(v[0], -1.5, 0.25), seed, TOL);
    }
}

#[test]
fn grad_matmul() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ins = [randn(&[2, 3, 4], &mut rng), randn(&[4, 5], &mut rng)];
        check_grad(&ins, &|t, v| t.matmul(v[0], v[1]).unwrap(), seed, TOL);
        let ins = [randn(&[3, 4], &mut rng), randn(&[5, 4], &mut rng)];
        check_grad(&ins, &|t, v| t.matmul_t(v[0], v[1]).unwrap(), seed, TOL);
    }
}

#[test]
fn grad_unary() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = randn(&[3, 3], &mut rng);
        let pos = x.map(|v| v.abs() + 0.5);
        check_grad(std::slice::from_ref(&x), &|t, v| t.exp(v[0]), seed, TOL);
        check_grad(&[pos], &|t, v| t.log(v[0]), seed, TOL);
        check_grad(std::slice::from_ref(&x), &|t, v| t.sigmoid(v[0]), seed, TOL);
        check_grad(std::slice::from_ref(&x), &|t, v| t.tanh(v[0]), seed, TOL);
        check_grad(&[x], &|t, v| t.gelu(v[0]), seed, TOL);
    }
}

#[test]
fn grad_softmax_and_reductions() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = randn(&[2, 5], &mut rng);
        check_grad(std::slice::from_ref(&x), &|t, v| t.softmax(v[0]).unwrap(), seed, TOL);
        check_grad(std::slice::from_ref(&x), &|t, v| t.log_softmax(v[0]).unwrap(), seed, TOL);
        check_grad(std::slice::from_ref(&x), &|t, v| t.sum_last(v[0]).unwrap(), seed, TOL);
        check_grad(std::slice::from_ref(&x), &|t, v| t.mean(v[0]), seed, TOL);
        check_grad(&[x], &|t, v| t.sum(v[0]), seed, TOL);
        let y = randn(&[2, 3, 4], &mut rng);
        for axis in 0..3 {
            check_grad(std::slice::from_ref(&y), &move |t, v| t.sum_axis(v[0], axis).unwrap(), seed, TOL);
        }
    }
}

#[test]
fn grad_shape_ops() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = randn(&[2, 4, 3], &mut rng);
        check_grad(std::slice::from_ref(&x), &|t, v| t.slice(v[0], 1, 1, 2).unwrap(), seed, TOL);
        check_grad(std::slice::from_ref(&x), &|t, v| t.reshape(v[0], &[8, 3]).unwrap(), seed, TOL);
        let ins = [x, randn(&[2, 1, 3], &mut rng)];
        check_grad(&ins, &|t, v| t.concat(&[v[0], v[1], v[0]], 1).unwrap(), seed, TOL);
    }
}

#[test]
fn grad_embedding_layer_norm_outer() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<usize> = (0..6).map(|_| rng.gen_range(0..5)).collect();
        check_grad(&[randn(&[5, 3], &mut rng)], &|t, v| t.embedding(v[0], &ids, &[2, 3]).unwrap(), seed, TOL);
        let ins = [randn(&[3, 6], &mut rng), randn(&[6], &mut rng), randn(&[6], &mut rng)];
        check_grad(&ins, &|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap(), seed, TOL);
        let ins = [randn(&[3, 2], &mut rng), randn(&[3, 4], &mut rng)];
        check_grad(&ins, &|t, v| t.outer(v[0], v[1]).unwrap(), seed, TOL);
    }
}

#[test]
fn grad_cross_entropy() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let targets: Vec<usize> = (0..4).map(|_| rng.gen_range(0..7)).collect();
        let x = randn(&[4, 7], &mut rng);
        check_grad(&[x], &|t, v| t.cross_entropy(v[0], &targets).unwrap(), seed, TOL);
    }
}

#[test]
fn grad_linear_recurrence() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shared = Tensor::new(vec![3], (0..3).map(|_| rng.gen_range(0.2..0.95)).collect()).unwrap();
        let per_step = Tensor::new(vec![2, 5, 3], (0..30).map(|_| rng.gen_range(0.2..0.95)).collect()).unwrap();
        let drive = randn(&[2, 5, 3], &mut rng);
        let h0 = randn(&[2, 3], &mut rng);
        for method in [ScanMethod::Sequential, ScanMethod::Parallel] {
            let ins = [shared.clone(), drive.clone(), h0.clone()];
            check_grad(&ins, &|t, v| t.linear_recurrence(v[0], v[1], v[2], method).unwrap(), seed, TOL);
            let ins = [per_step.clone(), drive.clone(), h0.clone()];
            check_grad(&ins, &|t, v| t.linear_recurrence(v[0], v[1], v[2], method).unwrap(), seed, TOL);
        }
    }
}

#[test]
fn three_layer_mlp_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let x = randn(&[4, 5], &mut rng);
    let targets = vec![0usize, 2, 1, 2];
    let ins = [
        randn(&[5, 8], &mut rng),
        randn(&[8], &mut rng),
        randn(&[8, 6], &mut rng),
        randn(&[6], &mut rng),
        randn(&[6, 3], &mut rng),
    ];
    let build = move |t: &mut Tape, v: &[Var]| {
        let xin = t.constant(x.clone());
        let h = t.matmul(xin, v[0]).unwrap();
        let h = t.add_broadcast(h, v[1]).unwrap();
        let h = t.tanh(h);
        let h = t.matmul(h, v[2]).unwrap();
        let h = t.add_broadcast(h, v[3]).unwrap();
        let h = t.gelu(h);
        let logits = t.matmul(h, v[4]).unwrap();
        t.cross_entropy(logits, &targets).unwrap()
    };
    check_grad(&ins, &build, 42, 1e-4);
}
