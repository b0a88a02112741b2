use proptest::prelude::*;

use super::*;

#[test]
fn softmax_uniform_on_equal_inputs() {
    let p = softmax(&[0.0, 0.0, 0.0]).unwrap();
    for v in p {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn softmax_matches_frozen_oracle() {
    // exp/normalize evaluated independently (Python `math.exp`).
    let expected = [0.09003057317038046, 0.24472847105479767, 0.6652409557748219];
    let p = softmax(&[1.0, 2.0, 3.0]).unwrap();
    for (a, b) in p.iter().zip(expected) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn softmax_rejects_empty() {
    assert!(matches!(softmax(&[]), Err(Error::Dimension(_))));
}

#[test]
fn softmax_survives_large_logits() {
    let p = softmax(&[1000.0, 1000.0, -1000.0]).unwrap();
    assert!((p[0] - 0.5).abs() < 1e-15 && p[2] == 0.0);
}

proptest! {
    #[test]
    fn softmax_normalized_and_shift_invariant(
        v in prop::collection::vec(-30.0f64..30.0, 1..12),
        c in -50.0f64..50.0,
    ) {
        let p = softmax(&v).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&x| x >= 0.0));
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        let q = softmax(&shifted).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn backward_of_sum_is_ones() {
    let mut params = vec![Tensor::new(vec![2, 3], vec![0.1, -2.0, 3.0, 4.0, 5.0, 6.0]).unwrap().trainable()];
    let mut g = Graph::new();
    let x = g.param(&params[0]);
    let l = g.sum(x);
    g.backward(l).unwrap();
    write_grads(&mut params, &g).unwrap();
    assert_eq!(params[0].grad().unwrap(), &[1.0; 6]);
}

#[test]
fn backward_of_constant_is_zero() {
    let mut params = vec![Tensor::zeros(&[4]).trainable()];
    let mut g = Graph::new();
    let _ = g.param(&params[0]);
    let c = g.constant(1, 1, vec![3.0]).unwrap();
    g.backward(c).unwrap();
    write_grads(&mut params, &g).unwrap();
    assert_eq!(params[0].grad().unwrap(), &[0.0; 4]);
}

#[test]
fn backward_rejects_non_scalar_and_double_call() {
    let mut g = Graph::new();
    let x = g.variable(2, 2, vec![1.0; 4]).unwrap();
    assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert!(matches!(g.backward(s), Err(Error::GradientsNotReset)));
    g.zero_grad();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0; 4]);
}

#[test]
fn write_grads_refuses_to_accumulate() {
    let mut params = vec![Tensor::zeros(&[2]).trainable()];
    for round in 0..2 {
        let mut g = Graph::new();
        let x = g.param(&params[0]);
        let l = g.sum(x);
        g.backward(l).unwrap();
        let r = write_grads(&mut params, &g);
        if round == 0 {
            r.unwrap();
        } else {
            assert!(matches!(r, Err(Error::GradientsNotReset)));
        }
    }
}

fn two_layer_perceptron(rng: &mut SeededRng) -> (Vec<Tensor>, Tensor) {
    let params = vec![
        Tensor::randn(&[3, 3], 0.8, rng).trainable(),
        Tensor::randn(&[1, 3], 0.3, rng).trainable(),
        Tensor::randn(&[3, 1], 0.8, rng).trainable(),
    ];
    let x = Tensor::randn(&[3, 3], 1.0, rng);
    (params, x)
}

/// Hand-rolled central differences, separate from `grad_check`.
fn fd_gradient(params: &mut [Tensor], h: f64, f: &dyn Fn(&[Tensor]) -> f64) -> Vec<Vec<f64>> {
    let mut out = vec![];
    for p in 0..params.len() {
        let mut gp = vec![];
        for j in 0..params[p].len() {
            let orig = params[p].values()[j];
            params[p].values_mut()[j] = orig + h;
            let up = f(params);
            params[p].values_mut()[j] = orig - h;
            let down = f(params);
            params[p].values_mut()[j] = orig;
            gp.push((up - down) / (2.0 * h));
        }
        out.push(gp);
    }
    out
}

#[test]
fn perceptron_gradients_match_finite_differences() {
    let mut rng = SeededRng::new(3);
    let (mut params, x) = two_layer_perceptron(&mut rng);
    let forward = |params: &[Tensor], g: &mut Graph| -> Var {
        let xi = g.param(&x);
        let w1 = g.param(&params[0]);
        let b1 = g.param(&params[1]);
        let w2 = g.param(&params[2]);
        let h = g.matmul(xi, w1).unwrap();
        let h = g.add_row(h, b1).unwrap();
        let h = g.gelu(h);
        let o = g.matmul(h, w2).unwrap();
        let sq = g.mul(o, o).unwrap();
        g.mean(sq)
    };
    let mut g = Graph::new();
    let l = forward(&params, &mut g);
    g.backward(l).unwrap();
    write_grads(&mut params, &g).unwrap();
    let fd = fd_gradient(&mut params, 1e-5, &|p| {
        let mut g = Graph::new();
        let l = forward(p, &mut g);
        g.scalar(l)
    });
    for (p, num) in params.iter().zip(fd) {
        for (a, n) in p.grad().unwrap().iter().zip(num) {
            let rel = (a - n).abs() / (a.abs() + n.abs() + 1e-12);
            assert!(rel < 1e-4, "analytic {a} numeric {n}");
        }
    }
}

#[test]
fn grad_check_linear_and_constant() {
    let mut rng = SeededRng::new(11);
    // Small |f| keeps the cancellation error of the difference quotient far
    // below the 1e-10 bound.
    let mut params = vec![Tensor::randn(&[4, 3], 0.01, &mut rng).trainable()];
    let w = Tensor::new(vec![4, 3], (0..12).map(|i| f64::from(1 + i % 3)).collect()).unwrap();
    let err = grad_check(&mut params, FD_STEP, |p, g| {
        let x = g.param(&p[0]);
        let c = g.param(&w);
        let m = g.mul(x, c)?;
        Ok(g.sum(m))
    })
    .unwrap();
    assert!(err < 1e-10, "{err}");

    let err = grad_check(&mut params, FD_STEP, |p, g| {
        let _ = g.param(&p[0]);
        g.constant(1, 1, vec![2.0])
    })
    .unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn grad_check_softmax_cross_entropy() {
    let mut rng = SeededRng::new(12);
    let mut params = vec![
        Tensor::randn(&[5, 4], 1.0, &mut rng).trainable(),
        Tensor::randn(&[4, 6], 1.0, &mut rng).trainable(),
    ];
    let targets = [Some(0), Some(5), None, Some(2), Some(3)];
    let err = grad_check(&mut params, FD_STEP, |p, g| {
        let a = g.param(&p[0]);
        let b = g.param(&p[1]);
        let logits = g.matmul(a, b)?;
        g.cross_entropy(logits, &targets)
    })
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn grad_check_rejects_bad_step() {
    let mut params = vec![Tensor::zeros(&[1]).trainable()];
    let r = grad_check(&mut params, 1e-2, |p, g| {
        let x = g.param(&p[0]);
        Ok(g.sum(x))
    });
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn causal_softmax_masks_future() {
    let mut g = Graph::new();
    let x = g.constant(3, 3, (0..9).map(f64::from).collect()).unwrap();
    let p = g.causal_softmax(x).unwrap();
    let v = g.value(p);
    assert_eq!(v[0], 1.0);
    assert_eq!(&v[1..3], &[0.0, 0.0]);
    assert_eq!(v[5], 0.0);
    assert!((v[6] + v[7] + v[8] - 1.0).abs() < 1e-15);
}

#[test]
fn straight_through_forwards_hard_backwards_soft() {
    let mut g = Graph::new();
    let logits = g.variable(1, 3, vec![0.2, 1.0, -0.4]).unwrap();
    let soft = g.softmax_rows(logits);
    let hard = g.straight_through(soft, vec![0.0, 1.0, 0.0]).unwrap();
    assert_eq!(g.value(hard), &[0.0, 1.0, 0.0]);
    let w = g.constant(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
    let m = g.mul(hard, w).unwrap();
    let l = g.sum(m);
    g.backward(l).unwrap();

    let mut g2 = Graph::new();
    let logits2 = g2.variable(1, 3, vec![0.2, 1.0, -0.4]).unwrap();
    let soft2 = g2.softmax_rows(logits2);
    let w2 = g2.constant(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
    let m2 = g2.mul(soft2, w2).unwrap();
    let l2 = g2.sum(m2);
    g2.backward(l2).unwrap();
    assert_eq!(g.grad(logits).unwrap(), g2.grad(logits2).unwrap());
}

/// Every differentiable op, each composed into a scalar through a fixed
/// random projection so that no gradient is trivially uniform.
#[derive(Debug, Clone, Copy)]
enum OpCase {
    MatMul,
    MatMulBT,
    Add,
    AddRow,
    Mul,
    Scale,
    ScaleRows,
    Gelu,
    LayerNorm,
    Softmax,
    CausalSoftmax,
    CrossEntropy,
    Gather,
    SliceConcat,
    Mean,
    RowEntropy,
    NormalizeRows,
}

const ALL_OPS: [OpCase; 17] = [
    OpCase::MatMul,
    OpCase::MatMulBT,
    OpCase::Add,
    OpCase::AddRow,
    OpCase::Mul,
    OpCase::Scale,
    OpCase::ScaleRows,
    OpCase::Gelu,
    OpCase::LayerNorm,
    OpCase::Softmax,
    OpCase::CausalSoftmax,
    OpCase::CrossEntropy,
    OpCase::Gather,
    OpCase::SliceConcat,
    OpCase::Mean,
    OpCase::RowEntropy,
    OpCase::NormalizeRows,
];

fn op_case_error(op: OpCase, m: usize, n: usize, seed: u64) -> f64 {
    let mut rng = SeededRng::new(seed);
    let mut params = vec![
        Tensor::randn(&[m, n], 1.0, &mut rng).trainable(),
        Tensor::randn(&[n, m], 1.0, &mut rng).trainable(),
        Tensor::randn(&[1, n], 1.0, &mut rng).trainable(),
        Tensor::randn(&[m, 1], 1.0, &mut rng).trainable(),
    ];
    let proj = Tensor::randn(&[m, n], 1.0, &mut rng);
    let ids: Vec<usize> = (0..m).map(|_| rng.below(m)).collect();
    let targets: Vec<Option<usize>> = (0..m).map(|i| (i % 3 != 1).then(|| rng.below(n))).collect();
    let split = n / 2;
    grad_check(&mut params, FD_STEP, |p, g| {
        let a = g.param(&p[0]);
        let b = g.param(&p[1]);
        let row = g.param(&p[2]);
        let col = g.param(&p[3]);
        let pr = g.param(&proj);
        let project = |g: &mut Graph, y: Var| -> Result<Var> {
            let (r, c) = g.shape(y);
            let w: Vec<f64> = (0..r * c).map(|k| proj.values()[k % proj.len()]).collect();
            let w = g.constant(r, c, w)?;
            let yw = g.mul(y, w)?;
            Ok(g.sum(yw))
        };
        // Keep every leaf in the loss so the analytic gradient is defined.
        let anchor = {
            let s1 = g.sum(b);
            let s2 = g.sum(row);
            let s3 = g.sum(col);
            let t = g.add(s1, s2)?;
            let t = g.add(t, s3)?;
            g.scale(t, 1e-3)
        };
        let _ = pr;
        let y = match op {
            OpCase::MatMul => {
                let y = g.matmul(a, b)?;
                project(g, y)?
            }
            OpCase::MatMulBT => {
                let y = g.matmul_bt(a, a)?;
                project(g, y)?
            }
            OpCase::Add => {
                let y = g.add(a, a)?;
                project(g, y)?
            }
            OpCase::AddRow => {
                let y = g.add_row(a, row)?;
                project(g, y)?
            }
            OpCase::Mul => {
                let y = g.mul(a, a)?;
                project(g, y)?
            }
            OpCase::Scale => {
                let y = g.scale(a, -1.7);
                project(g, y)?
            }
            OpCase::ScaleRows => {
                let y = g.scale_rows(a, col)?;
                project(g, y)?
            }
            OpCase::Gelu => {
                let y = g.gelu(a);
                project(g, y)?
            }
            OpCase::LayerNorm => {
                let bias = g.scale(row, 0.5);
                let y = g.layer_norm(a, row, bias, 1e-5)?;
                project(g, y)?
            }
            OpCase::Softmax => {
                let y = g.softmax_rows(a);
                project(g, y)?
            }
            OpCase::CausalSoftmax => {
                let sq = g.matmul(a, b)?;
                let y = g.causal_softmax(sq)?;
                project(g, y)?
            }
            OpCase::CrossEntropy => {
                if targets.iter().all(Option::is_none) {
                    let y = g.gelu(a);
                    project(g, y)?
                } else {
                    g.cross_entropy(a, &targets)?
                }
            }
            OpCase::Gather => {
                let y = g.gather_rows(a, &ids)?;
                project(g, y)?
            }
            OpCase::SliceConcat => {
                if split == 0 {
                    let y = g.concat_cols(&[a])?;
                    project(g, y)?
                } else {
                    let l = g.slice_cols(a, 0, split)?;
                    let r = g.slice_cols(a, split, n - split)?;
                    let r2 = g.gelu(r);
                    let y = g.concat_cols(&[r2, l])?;
                    project(g, y)?
                }
            }
            OpCase::Mean => {
                let sq = g.mul(a, a)?;
                g.mean(sq)
            }
            OpCase::RowEntropy => {
                let p = g.softmax_rows(a);
                let e = g.row_entropy(p);
                let w = g.constant(m, 1, (0..m).map(|i| 1.0 + i as f64).collect())?;
                let ew = g.mul(e, w)?;
                g.sum(ew)
            }
            OpCase::NormalizeRows => {
                let pos = g.mul(a, a)?;
                let shift = g.constant(m, n, vec![0.5; m * n])?;
                let pos = g.add(pos, shift)?;
                let y = g.normalize_rows(pos)?;
                project(g, y)?
            }
        };
        g.add(y, anchor)
    })
    .unwrap()
}

#[test]
fn every_op_passes_grad_check_over_random_trials() {
    let mut trial = 0u64;
    for &op in &ALL_OPS {
        let mut rng = SeededRng::new(1000 + op as u64);
        for _ in 0..100 {
            let m = 1 + rng.below(8);
            let n = 1 + rng.below(8);
            let (m, n) = match op {
                OpCase::CausalSoftmax => (m, m),
                _ => (m, n),
            };
            trial += 1;
            let err = op_case_error(op, m, n, trial);
            assert!(err < 1e-4, "{op:?} m={m} n={n} seed={trial}: {err}");
        }
    }
}

#[test]
fn sample_gumbel_reproducible_across_runs() {
    let a = sample_gumbel(&[3, 7], &mut SeededRng::new(77));
    let b = sample_gumbel(&[3, 7], &mut SeededRng::new(77));
    assert!(a.bitwise_eq(&b));
    assert!(a.is_finite());
}
