//! Central finite-difference checks for every differentiable op on the tape.
//!
//! Each check perturbs one input matrix at a time and compares the numerical
//! gradient against the tape's backward pass. Losses are randomized weighted
//! sums of the op output so non-uniform adjoints exercise transposition paths.

use meduet_tensor::{finite_diff_grad, max_rel_err, Tape, TensorId};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-6;

fn randm(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
}

/// Weighted sum against a fixed random matrix, reducing `out` to a scalar.
fn scalarize(t: &mut Tape, out: TensorId, seed: u64) -> TensorId {
    let (r, c) = t.value(out).dim();
    let w = t.constant(randm(r, c, seed ^ 0x5157));
    let prod = t.mul(out, w);
    t.sum_all(prod)
}

/// FD-checks the gradient of `build` w.r.t. every entry of every input.
fn check(inputs: &[Array2<f64>], tol: f64, build: impl Fn(&mut Tape, &[TensorId]) -> TensorId) {
    let mut t = Tape::new();
    let ids: Vec<TensorId> = inputs.iter().map(|x| t.param(x.clone())).collect();
    let loss = build(&mut t, &ids);
    t.backward(loss);
    for (which, x0) in inputs.iter().enumerate() {
        let analytic = t
            .grad(ids[which])
            .unwrap_or_else(|| panic!("no gradient reached input {}", which))
            .clone();
        let numeric = finite_diff_grad(x0, EPS, |probe| {
            let mut ft = Tape::new();
            let fids: Vec<TensorId> = inputs
                .iter()
                .enumerate()
                .map(|(i, x)| {
                    if i == which {
                        ft.param(probe.clone())
                    } else {
                        ft.param(x.clone())
                    }
                })
                .collect();
            let l = build(&mut ft, &fids);
            ft.scalar(l)
        });
        let err = max_rel_err(&analytic, &numeric, 1e-3);
        assert!(err < tol, "input {}: max rel err {:.3e} >= {:.1e}", which, err, tol);
    }
}

#[test]
fn elementwise_arithmetic() {
    let a = randm(3, 4, 1);
    let b = randm(3, 4, 2);
    check(&[a.clone(), b.clone()], TOL, |t, v| {
        let y = t.add(v[0], v[1]);
        scalarize(t, y, 10)
    });
    check(&[a.clone(), b.clone()], TOL, |t, v| {
        let y = t.sub(v[0], v[1]);
        scalarize(t, y, 11)
    });
    check(&[a.clone(), b.clone()], TOL, |t, v| {
        let y = t.mul(v[0], v[1]);
        scalarize(t, y, 12)
    });
    // Keep the divisor away from zero.
    let bpos = b.mapv(|x| x.abs() + 0.5);
    check(&[a, bpos], TOL, |t, v| {
        let y = t.div(v[0], v[1]);
        scalarize(t, y, 13)
    });
}

#[test]
fn matmul_both_sides() {
    let a = randm(3, 5, 3);
    let b = randm(5, 2, 4);
    check(&[a, b], TOL, |t, v| {
        let y = t.matmul(v[0], v[1]);
        scalarize(t, y, 14)
    });
}

#[test]
fn scalar_and_broadcast_ops() {
    let a = randm(4, 3, 5);
    check(&[a.clone()], TOL, |t, v| {
        let y = t.scale(v[0], -2.5);
        scalarize(t, y, 15)
    });
    check(&[a.clone()], TOL, |t, v| {
        let y = t.add_scalar(v[0], 0.75);
        scalarize(t, y, 16)
    });
    let row = randm(1, 3, 6);
    check(&[a.clone(), row], TOL, |t, v| {
        let y = t.add_row(v[0], v[1]);
        scalarize(t, y, 17)
    });
    let table = randm(2, 3, 7); // tiled twice over 4 rows
    check(&[a.clone(), table], TOL, |t, v| {
        let y = t.add_tiled(v[0], v[1], 2);
        scalarize(t, y, 18)
    });
    let col = randm(4, 1, 8);
    check(&[a.clone(), col.clone()], TOL, |t, v| {
        let y = t.mul_col(v[0], v[1]);
        scalarize(t, y, 19)
    });
    check(&[a, col], TOL, |t, v| {
        let y = t.sub_col(v[0], v[1]);
        scalarize(t, y, 20)
    });
}

#[test]
fn nonlinearities() {
    // Offset inputs away from the relu kink so FD is well-posed.
    let a = randm(3, 4, 9).mapv(|x| x + 0.1 * x.signum());
    check(&[a.clone()], TOL, |t, v| {
        let y = t.gelu(v[0]);
        scalarize(t, y, 21)
    });
    check(&[a.clone()], TOL, |t, v| {
        let y = t.relu(v[0]);
        scalarize(t, y, 22)
    });
    check(&[a.clone()], TOL, |t, v| {
        let y = t.square(v[0]);
        scalarize(t, y, 23)
    });
    check(&[a], TOL, |t, v| {
        let y = t.softmax_rows(v[0]);
        scalarize(t, y, 24)
    });
}

#[test]
fn reductions() {
    let a = randm(4, 6, 10);
    check(&[a.clone()], TOL, |t, v| t.sum_all(v[0]));
    check(&[a.clone()], TOL, |t, v| t.mean_all(v[0]));
    check(&[a.clone()], TOL, |t, v| {
        let y = t.row_mean(v[0]);
        scalarize(t, y, 25)
    });
    check(&[a.clone()], TOL, |t, v| {
        let y = t.col_sum(v[0]);
        scalarize(t, y, 26)
    });
    check(&[a.clone()], TOL, |t, v| {
        let y = t.pool_rows(v[0], 2);
        scalarize(t, y, 27)
    });
    check(&[a], TOL, |t, v| {
        let y = t.logsumexp_rows(v[0]);
        scalarize(t, y, 28)
    });
}

#[test]
fn layer_norm_all_inputs() {
    let x = randm(5, 4, 11);
    let gamma = randm(1, 4, 12).mapv(|v| v + 1.5);
    let beta = randm(1, 4, 13);
    check(&[x, gamma, beta], 1e-5, |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2], 1e-5);
        scalarize(t, y, 29)
    });
}

#[test]
fn l2_row_normalization() {
    let a = randm(4, 5, 14).mapv(|v| v + 0.2 * v.signum());
    check(&[a], 1e-5, |t, v| {
        let y = t.l2_normalize_rows(v[0], 1e-8);
        scalarize(t, y, 30)
    });
}

#[test]
fn classification_losses() {
    let logits = randm(5, 3, 15);
    check(&[logits.clone()], TOL, |t, v| {
        t.cross_entropy_sum(v[0], &[0, 2, 1, 1, 0])
    });
    let q = randm(5, 3, 16);
    check(&[logits, q], 1e-5, |t, v| t.kl_softmax(v[0], v[1]));
}

#[test]
fn multi_head_attention() {
    // 2 sequences of length 3, model dim 4, 2 heads.
    let q = randm(6, 4, 17);
    let k = randm(6, 4, 18);
    let v = randm(6, 4, 19);
    check(&[q, k, v], 1e-5, |t, ids| {
        let y = t.attention(ids[0], ids[1], ids[2], 2, 2);
        scalarize(t, y, 31)
    });
}

#[test]
fn grouped_score_tables() {
    let q = randm(8, 3, 20); // 2 groups of 4
    let k = randm(8, 3, 21);
    check(&[q, k], TOL, |t, v| {
        let y = t.group_scores(v[0], v[1], 4);
        scalarize(t, y, 32)
    });
}

#[test]
fn gradient_reversal_is_exact_negative_scaling() {
    // Identity modulo sign/scale: compare full gradients, not FD.
    let x0 = randm(3, 4, 22);
    let w = randm(4, 2, 23);
    let grad_with = |lambda: Option<f64>| -> Array2<f64> {
        let mut t = Tape::new();
        let x = t.param(x0.clone());
        let wid = t.constant(w.clone());
        let h = match lambda {
            Some(l) => t.gradient_reversal(x, l),
            None => x,
        };
        let y = t.matmul(h, wid);
        let sq = t.square(y);
        let loss = t.sum_all(sq);
        t.backward(loss);
        t.grad(x).unwrap().clone()
    };
    let plain = grad_with(None);
    for lambda in [0.3, 1.0, 2.0] {
        let reversed = grad_with(Some(lambda));
        let expect = &plain * (-lambda);
        for (a, b) in reversed.iter().zip(expect.iter()) {
            assert_eq!(a, b, "GRL gradient must equal -lambda times the plain gradient exactly");
        }
    }
}

#[test]
fn structural_ops() {
    let a = randm(3, 4, 24);
    let b = randm(3, 2, 25);
    check(&[a.clone(), b], TOL, |t, v| {
        let y = t.concat_cols(v[0], v[1]);
        scalarize(t, y, 33)
    });
    check(&[a.clone()], TOL, |t, v| {
        let y = t.slice_cols(v[0], 1, 3);
        scalarize(t, y, 34)
    });
    let c = randm(2, 4, 26);
    check(&[a.clone(), c.clone()], TOL, |t, v| {
        let y = t.concat_rows(&[v[0], v[1]]);
        scalarize(t, y, 35)
    });
    check(&[a.clone()], TOL, |t, v| {
        let y = t.slice_rows(v[0], 1, 3);
        scalarize(t, y, 36)
    });
    let d = randm(3, 4, 27);
    check(&[a.clone(), d.clone()], TOL, |t, v| {
        let y = t.select_rows(v[0], v[1], &[true, false, true]);
        scalarize(t, y, 37)
    });
    let fill = randm(1, 4, 28);
    check(&[a.clone(), fill], TOL, |t, v| {
        let y = t.fill_rows(v[0], v[1], &[false, true, false]);
        scalarize(t, y, 38)
    });
    check(&[a, d], TOL, |t, v| {
        let y = t.interleave_rows(&[v[0], v[1]]);
        scalarize(t, y, 39)
    });
}

#[test]
fn trilinear_upsampling() {
    let a = randm(8, 3, 29); // 2^3 grid, 3 channels
    check(&[a], TOL, |t, v| {
        let y = t.upsample_trilinear(v[0], 2, 4);
        scalarize(t, y, 40)
    });
}

#[test]
fn scalar_temperature_ops() {
    let alpha = randm(1, 1, 30);
    let a = randm(4, 4, 31);
    check(&[alpha.clone(), a.clone()], TOL, |t, v| {
        let e = t.exp_clamped(v[0], 100.0);
        let y = t.mul_scalar_node(v[1], e);
        scalarize(t, y, 41)
    });
    // At the cap the temperature gradient is exactly zero.
    let mut t = Tape::new();
    let big = t.param(Array2::from_elem((1, 1), 8.0));
    let aid = t.param(a);
    let e = t.exp_clamped(big, 100.0);
    let y = t.mul_scalar_node(aid, e);
    let loss = t.sum_all(y);
    t.backward(loss);
    assert_eq!(t.grad(big).unwrap()[[0, 0]], 0.0);
}

#[test]
fn deep_composite_graph() {
    // A miniature encoder block: LN -> attention -> residual -> LN -> MLP.
    let x = randm(6, 4, 32);
    let wq = randm(4, 4, 33);
    let wk = randm(4, 4, 34);
    let wv = randm(4, 4, 35);
    let w1 = randm(4, 8, 36);
    let w2 = randm(8, 4, 37);
    let gamma = randm(1, 4, 38).mapv(|v| v + 1.5);
    let beta = randm(1, 4, 39);
    check(&[x, wq, wk, wv, w1, w2, gamma, beta], 1e-4, |t, v| {
        let ln = t.layer_norm(v[0], v[6], v[7], 1e-5);
        let q = t.matmul(ln, v[1]);
        let k = t.matmul(ln, v[2]);
        let val = t.matmul(ln, v[3]);
        let att = t.attention(q, k, val, 2, 2);
        let res = t.add(v[0], att);
        let ln2 = t.layer_norm(res, v[6], v[7], 1e-5);
        let h = t.matmul(ln2, v[4]);
        let h = t.gelu(h);
        let h = t.matmul(h, v[5]);
        let out = t.add(res, h);
        scalarize(t, out, 42)
    });
}
