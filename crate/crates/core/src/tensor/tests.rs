use super::graph::fault;
use super::*;
use crate::error::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
}

fn assert_close(got: &[f64], want: &[f64], tol: f64) {
    assert_eq!(got.len(), want.len());
    for (i, (&g, &w)) in got.iter().zip(want.iter()).enumerate() {
        assert!((g - w).abs() <= tol, "element {i}: got {g}, want {w}");
    }
}

// ── matmul ───────────────────────────────────────────────────────────────

#[test]
fn matmul_identity_preserves_matrix() {
    let mut g = Graph::new();
    let i2 = g.leaf(&Tensor::eye(2));
    let m = g.leaf(&t(&[2, 2], &[3.0, -1.0, 0.5, 7.0]));
    let out = g.matmul(i2, m).unwrap();
    assert_eq!(g.data(out), &[3.0, -1.0, 0.5, 7.0]);
}

#[test]
fn matmul_hand_case() {
    let mut g = Graph::new();
    let a = g.leaf(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let b = g.leaf(&t(&[2, 1], &[5.0, 6.0]));
    let out = g.matmul(a, b).unwrap();
    assert_eq!(g.shape(out), &[2, 1]);
    assert_eq!(g.data(out), &[17.0, 39.0]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.leaf(&Tensor::zeros(vec![3, 4]));
    let b = g.leaf(&Tensor::zeros(vec![5, 2]));
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[3x4]") && msg.contains("[5x2]"), "{msg}");
}

#[test]
fn matmul_gradient_matches_central_differences() {
    let mut r = rng(7);
    let a = Tensor::uniform(&mut r, vec![3, 4], -1.0, 1.0);
    let b = Tensor::uniform(&mut r, vec![4, 2], -1.0, 1.0);
    // Gradient w.r.t. a with b fixed.
    let err = finite_diff_check(
        |g, x| {
            let bv = g.leaf(&b);
            let p = g.matmul(x, bv)?;
            Ok(g.sum(p))
        },
        &a,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-7, "rel err {err}");
    // And w.r.t. b.
    let err = finite_diff_check(
        |g, x| {
            let av = g.leaf(&a);
            let p = g.matmul(av, x)?;
            Ok(g.sum(p))
        },
        &b,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-7, "rel err {err}");
}

#[test]
fn matmul_batched_broadcasts_leading_dims() {
    // [2,2,3] @ [3,2]: the rank-2 rhs applies to both batch entries.
    let mut g = Graph::new();
    let a = g.leaf(&t(&[2, 2, 3], &[1., 0., 0., 0., 1., 0., 2., 0., 0., 0., 2., 0.]));
    let b = g.leaf(&t(&[3, 2], &[1., 2., 3., 4., 5., 6.]));
    let out = g.matmul(a, b).unwrap();
    assert_eq!(g.shape(out), &[2, 2, 2]);
    assert_eq!(g.data(out), &[1., 2., 3., 4., 2., 4., 6., 8.]);
}

// ── softmax ──────────────────────────────────────────────────────────────

#[test]
fn softmax_uniform_on_equal_inputs() {
    let mut g = Graph::new();
    let x = g.leaf(&t(&[3], &[0.4, 0.4, 0.4]));
    let s = g.softmax(x, 0).unwrap();
    assert_close(g.data(s), &[1.0 / 3.0; 3], 1e-15);
}

#[test]
fn softmax_analytic_ln2() {
    let mut g = Graph::new();
    let x = g.leaf(&t(&[2], &[0.0, 2.0f64.ln()]));
    let s = g.softmax(x, 0).unwrap();
    assert_close(g.data(s), &[1.0 / 3.0, 2.0 / 3.0], 1e-15);
}

#[test]
fn softmax_is_stable_for_large_inputs() {
    let mut g = Graph::new();
    let x = g.leaf(&t(&[2], &[1000.0, 1001.0]));
    let s = g.softmax(x, 0).unwrap();
    let out = g.data(s);
    assert!(out.iter().all(|v| v.is_finite()));
    // 64-bit oracle on shifted inputs [0, 1].
    let e = 1f64.exp();
    assert_close(out, &[1.0 / (1.0 + e), e / (1.0 + e)], 1e-12);
}

#[test]
fn softmax_rows_sum_to_one_on_inner_axis() {
    let mut r = rng(3);
    let x = Tensor::uniform(&mut r, vec![4, 5, 3], -1e4, 1e4);
    let mut g = Graph::new();
    let xv = g.leaf(&x);
    for axis in 0..3 {
        let s = g.softmax(xv, axis).unwrap();
        let shape = g.shape(s).to_vec();
        let data = g.data(s).to_vec();
        let inner: usize = shape[axis + 1..].iter().product();
        let lane = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        for o in 0..outer {
            for i in 0..inner {
                let sum: f64 = (0..lane).map(|l| data[o * lane * inner + l * inner + i]).sum();
                assert!((sum - 1.0).abs() < 1e-12, "axis {axis}: lane sum {sum}");
            }
        }
    }
}

// ── layer_norm ───────────────────────────────────────────────────────────

#[test]
fn layer_norm_zero_variance_guard() {
    let mut g = Graph::new();
    let x = g.leaf(&Tensor::full(vec![5], 2.5));
    let gamma = g.leaf(&Tensor::full(vec![5], 1.0));
    let beta = g.leaf(&Tensor::zeros(vec![5]));
    let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
    assert_close(g.data(y), &[0.0; 5], 1e-15);
}

#[test]
fn layer_norm_population_variance() {
    let mut g = Graph::new();
    let x = g.leaf(&t(&[2], &[1.0, 3.0]));
    let gamma = g.leaf(&Tensor::full(vec![2], 1.0));
    let beta = g.leaf(&Tensor::zeros(vec![2]));
    let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
    // mean 2, population var 1; eps pulls values just inside +-1.
    assert_close(g.data(y), &[-1.0, 1.0], 1e-4);
}

#[test]
fn layer_norm_gradient_matches_central_differences() {
    let mut r = rng(11);
    let x = Tensor::uniform(&mut r, vec![4, 8], -2.0, 2.0);
    let gamma = Tensor::uniform(&mut r, vec![8], 0.5, 1.5);
    let beta = Tensor::uniform(&mut r, vec![8], -0.5, 0.5);
    let err = finite_diff_check(
        |g, xv| {
            let ga = g.leaf(&gamma);
            let be = g.leaf(&beta);
            let y = g.layer_norm(xv, ga, be, 1e-5)?;
            Ok(g.sum(y))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "rel err {err}");
    // Affine parameters too.
    let err = finite_diff_check(
        |g, gv| {
            let xv = g.leaf(&x);
            let be = g.leaf(&beta);
            let y = g.layer_norm(xv, gv, be, 1e-5)?;
            Ok(g.sum(y))
        },
        &gamma,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "rel err {err}");
}

// ── permute / concat / narrow ────────────────────────────────────────────

#[test]
fn permute_is_involutive_for_swap() {
    let mut r = rng(5);
    let x = Tensor::uniform(&mut r, vec![3, 4, 2], -1.0, 1.0);
    let mut g = Graph::new();
    let xv = g.leaf(&x);
    let p = g.permute(xv, &[1, 0, 2]).unwrap();
    let back = g.permute(p, &[1, 0, 2]).unwrap();
    assert_eq!(g.data(back), x.data());
}

#[test]
fn permute_shape_t_j_d() {
    let mut g = Graph::new();
    let x = g.leaf(&Tensor::zeros(vec![9, 17, 4]));
    let p = g.permute(x, &[1, 0, 2]).unwrap();
    assert_eq!(g.shape(p), &[17, 9, 4]);
}

#[test]
fn permute_moves_every_element() {
    let mut r = rng(9);
    let x = Tensor::uniform(&mut r, vec![2, 3, 2], -1.0, 1.0);
    let mut g = Graph::new();
    let xv = g.leaf(&x);
    let p = g.permute(xv, &[1, 0, 2]).unwrap();
    let out = g.tensor(p);
    for ti in 0..2 {
        for j in 0..3 {
            for d in 0..2 {
                assert_eq!(x.at(&[ti, j, d]), out.at(&[j, ti, d]));
            }
        }
    }
}

#[test]
fn permute_rejects_bad_order() {
    let mut g = Graph::new();
    let x = g.leaf(&Tensor::zeros(vec![2, 3]));
    assert!(g.permute(x, &[0, 0]).is_err());
    assert!(g.permute(x, &[0]).is_err());
}

#[test]
fn concat_split_round_trip() {
    let mut r = rng(2);
    let a = Tensor::uniform(&mut r, vec![9, 3, 4], -1.0, 1.0);
    let b = Tensor::uniform(&mut r, vec![9, 3, 4], -1.0, 1.0);
    let mut g = Graph::new();
    let (av, bv) = (g.leaf(&a), g.leaf(&b));
    let cat = g.concat(&[av, bv], 0).unwrap();
    assert_eq!(g.shape(cat), &[18, 3, 4]);
    let parts = g.split(cat, 0, &[9, 9]).unwrap();
    assert_eq!(g.data(parts[0]), a.data());
    assert_eq!(g.data(parts[1]), b.data());
}

#[test]
fn concat_rejects_extent_mismatch() {
    let mut g = Graph::new();
    let a = g.leaf(&Tensor::zeros(vec![2, 3]));
    let b = g.leaf(&Tensor::zeros(vec![2, 4]));
    assert!(matches!(g.concat(&[a, b], 0), Err(Error::Shape(_))));
}

#[test]
fn concat_gradient_routes_to_slices() {
    let mut r = rng(21);
    let a = Tensor::uniform(&mut r, vec![2, 3], -1.0, 1.0);
    let b = Tensor::uniform(&mut r, vec![2, 3], -1.0, 1.0);
    // Sum only the second block; gradient must reach b, not a.
    let err = finite_diff_check(
        |g, bv| {
            let av = g.leaf(&a);
            let cat = g.concat(&[av, bv], 0)?;
            let second = g.narrow(cat, 0, 2, 2)?;
            let w = g.leaf(&t(&[3, 1], &[1.0, 2.0, 3.0]));
            let p = g.matmul(second, w)?;
            Ok(g.sum(p))
        },
        &b,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-8, "rel err {err}");

    let mut g = Graph::new();
    let av = g.leaf(&a.clone().with_grad());
    let bv = g.leaf(&b.clone().with_grad());
    let cat = g.concat(&[av, bv], 0).unwrap();
    let second = g.narrow(cat, 0, 2, 2).unwrap();
    let s = g.sum(second);
    g.backward(s).unwrap();
    assert_eq!(g.grad(av).unwrap(), &[0.0; 6]);
    assert_eq!(g.grad(bv).unwrap(), &[1.0; 6]);
}

// ── framewise_conv1d ─────────────────────────────────────────────────────

fn identity_zero_weight(t_frames: usize) -> Tensor {
    // [I_T | 0] picks the first T of 2T frames.
    let mut w = Tensor::zeros(vec![t_frames, 2 * t_frames]);
    for i in 0..t_frames {
        w.data_mut()[i * 2 * t_frames + i] = 1.0;
    }
    w
}

#[test]
fn frame_conv_identity_selects_first_half() {
    let mut r = rng(13);
    let x = Tensor::uniform(&mut r, vec![6, 4], -1.0, 1.0);
    let mut g = Graph::new();
    let xv = g.leaf(&x);
    let wv = g.leaf(&identity_zero_weight(3));
    let bv = g.leaf(&Tensor::zeros(vec![3]));
    let y = g.framewise_conv1d(xv, wv, bv).unwrap();
    assert_eq!(g.data(y), &x.data()[..12]);
}

#[test]
fn frame_conv_zero_weight_broadcasts_bias() {
    let mut g = Graph::new();
    let x = g.leaf(&Tensor::zeros(vec![4, 3]));
    let w = g.leaf(&Tensor::zeros(vec![2, 4]));
    let b = g.leaf(&t(&[2], &[5.0, -1.0]));
    let y = g.framewise_conv1d(x, w, b).unwrap();
    assert_eq!(g.data(y), &[5.0, 5.0, 5.0, -1.0, -1.0, -1.0]);
}

#[test]
fn frame_conv_gradient_matches_central_differences() {
    let mut r = rng(17);
    let x = Tensor::uniform(&mut r, vec![6, 4], -1.0, 1.0);
    let w = Tensor::uniform(&mut r, vec![3, 6], -1.0, 1.0);
    let b = Tensor::uniform(&mut r, vec![3], -1.0, 1.0);
    for target in ["x", "w", "b"] {
        let at = match target {
            "x" => x.clone(),
            "w" => w.clone(),
            _ => b.clone(),
        };
        let err = finite_diff_check(
            |g, v| {
                let xv = if target == "x" { v } else { g.leaf(&x) };
                let wv = if target == "w" { v } else { g.leaf(&w) };
                let bv = if target == "b" { v } else { g.leaf(&b) };
                let y = g.framewise_conv1d(xv, wv, bv)?;
                Ok(g.sum(y))
            },
            &at,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "{target}: rel err {err}");
    }
}

// ── elementwise suite ────────────────────────────────────────────────────

#[test]
fn gelu_at_zero_is_zero() {
    let mut g = Graph::new();
    let x = g.leaf(&t(&[3], &[0.0, 1.0, -1.0]));
    let y = g.gelu(x);
    assert_eq!(g.data(y)[0], 0.0);
    assert!(g.data(y)[1] > 0.8 && g.data(y)[1] < 0.9);
}

#[test]
fn mean_of_constants_is_constant() {
    let mut g = Graph::new();
    let x = g.leaf(&Tensor::full(vec![4, 2], 3.25));
    let m = g.mean(x);
    assert_eq!(g.item(m).unwrap(), 3.25);
}

#[test]
fn elementwise_ops_pass_gradient_checks() {
    let mut r = rng(23);
    let x = Tensor::uniform(&mut r, vec![3, 4], 0.2, 2.0);
    let y = Tensor::uniform(&mut r, vec![3, 4], -1.0, 1.0);
    let bias = Tensor::uniform(&mut r, vec![4], -1.0, 1.0);

    let cases: Vec<(&str, Box<dyn Fn(&mut Graph, Var) -> crate::Result<Var> + Sync>)> = vec![
        ("add", Box::new(|g: &mut Graph, v: Var| {
            let yv = g.leaf(&y);
            let s = g.add(v, yv)?;
            Ok(g.sum(s))
        })),
        ("add_broadcast", Box::new(|g: &mut Graph, v: Var| {
            let bv = g.leaf(&bias);
            let s = g.add(v, bv)?;
            let q = g.mul(s, s)?;
            Ok(g.sum(q))
        })),
        ("sub", Box::new(|g: &mut Graph, v: Var| {
            let yv = g.leaf(&y);
            let s = g.sub(v, yv)?;
            let q = g.mul(s, s)?;
            Ok(g.sum(q))
        })),
        ("mul", Box::new(|g: &mut Graph, v: Var| {
            let yv = g.leaf(&y);
            let s = g.mul(v, yv)?;
            Ok(g.sum(s))
        })),
        ("scale", Box::new(|g: &mut Graph, v: Var| {
            let s = g.scale(v, -2.5);
            Ok(g.sum(s))
        })),
        ("gelu", Box::new(|g: &mut Graph, v: Var| {
            let s = g.gelu(v);
            Ok(g.sum(s))
        })),
        ("sqrt", Box::new(|g: &mut Graph, v: Var| {
            let s = g.sqrt(v)?;
            Ok(g.sum(s))
        })),
        ("mean", Box::new(|g: &mut Graph, v: Var| {
            let q = g.mul(v, v)?;
            Ok(g.mean(q))
        })),
        ("l2_norm_lastaxis", Box::new(|g: &mut Graph, v: Var| {
            let n = g.l2_norm_lastaxis(v)?;
            Ok(g.sum(n))
        })),
        ("softmax", Box::new(|g: &mut Graph, v: Var| {
            let s = g.softmax(v, 1)?;
            let w = g.leaf(&y);
            let p = g.mul(s, w)?;
            Ok(g.sum(p))
        })),
    ];
    for (name, f) in cases {
        let err = finite_diff_check(f.as_ref(), &x, 1e-5).unwrap();
        assert!(err < 1e-6, "{name}: rel err {err}");
    }
}

// ── backward ─────────────────────────────────────────────────────────────

#[test]
fn backward_sum_gives_ones() {
    let mut g = Graph::new();
    let x = g.leaf(&Tensor::uniform(&mut rng(1), vec![2, 3], -1.0, 1.0).with_grad());
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
}

#[test]
fn backward_square_at_three() {
    let mut g = Graph::new();
    let x = g.leaf(&Tensor::scalar(3.0).with_grad());
    let y = g.mul(x, x).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[6.0]);
}

#[test]
fn backward_accumulates_without_reset() {
    let mut g = Graph::new();
    let x = g.leaf(&Tensor::scalar(3.0).with_grad());
    let y = g.mul(x, x).unwrap();
    g.backward(y).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[12.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::new();
    let x = g.leaf(&Tensor::zeros(vec![2]).with_grad());
    let err = g.backward(x).unwrap_err();
    assert!(matches!(err, Error::Shape(_)));
}

// ── finite_diff_check ────────────────────────────────────────────────────

#[test]
fn fdiff_quadratic_form_is_machine_precise() {
    let mut r = rng(31);
    let x = Tensor::uniform(&mut r, vec![5], -1.0, 1.0);
    let err = finite_diff_check(
        |g, v| {
            let q = g.mul(v, v)?;
            Ok(g.sum(q))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-9, "rel err {err}");
}

#[test]
fn fdiff_detects_nondeterministic_function() {
    use std::sync::atomic::{AtomicUsize, Ordering};
    let counter = AtomicUsize::new(0);
    let x = Tensor::scalar(1.0);
    let err = finite_diff_check(
        |g, v| {
            let c = counter.fetch_add(1, Ordering::SeqCst) as f64;
            let jitter = g.leaf(&Tensor::scalar(c));
            let s = g.add(v, jitter)?;
            Ok(g.sum(s))
        },
        &x,
        1e-4,
    )
    .unwrap_err();
    assert!(matches!(err, Error::Nondeterministic(_)), "{err}");
}

#[test]
fn corrupted_backward_rule_is_caught_and_named() {
    let mut r = rng(37);
    let a = Tensor::uniform(&mut r, vec![3, 3], -1.0, 1.0);
    let run = |x: &Tensor| {
        finite_diff_check(
            |g, v| {
                let av = g.leaf(&a);
                let p = g.matmul(v, av)?;
                let q = g.gelu(p);
                Ok(g.sum(q))
            },
            x,
            1e-5,
        )
        .unwrap()
    };
    let x = Tensor::uniform(&mut r, vec![2, 3], -1.0, 1.0);
    assert!(run(&x) < 1e-6);

    // Corrupting an op the function does not use changes nothing; corrupting
    // one it does use must trip the check, isolating the bad rule by name.
    fault::set_corrupted_op(Some("layer_norm"));
    assert!(run(&x) < 1e-6);
    fault::set_corrupted_op(Some("matmul"));
    let err = run(&x);
    fault::set_corrupted_op(None);
    assert!(err > 1e-4, "corrupted matmul backward went unnoticed: {err}");
}

// ── parallel/sequential equivalence ──────────────────────────────────────

#[test]
fn parallel_and_sequential_paths_are_bit_identical() {
    let mut r = rng(41);
    // Big enough to cross the parallel threshold.
    let a = Tensor::uniform(&mut r, vec![64, 96], -1.0, 1.0);
    let b = Tensor::uniform(&mut r, vec![96, 64], -1.0, 1.0);
    let gamma = Tensor::full(vec![64], 1.0);
    let beta = Tensor::zeros(vec![64]);

    let run = || {
        let mut g = Graph::new();
        let (av, bv) = (g.leaf(&a), g.leaf(&b));
        let p = g.matmul(av, bv).unwrap();
        let (gv, be) = (g.leaf(&gamma), g.leaf(&beta));
        let ln = g.layer_norm(p, gv, be, 1e-5).unwrap();
        let s = g.softmax(ln, 1).unwrap();
        let e = g.gelu(s);
        g.data(e).to_vec()
    };

    set_parallel_enabled(false);
    let seq = run();
    set_parallel_enabled(true);
    let par = run();
    assert_eq!(seq, par);
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut r = rng(99);
        let x = Tensor::uniform(&mut r, vec![4, 6], -1.0, 1.0);
        let mut g = Graph::new();
        let xv = g.leaf(&x);
        let s = g.softmax(xv, 1).unwrap();
        let e = g.gelu(s);
        let m = g.mean(e);
        g.item(m).unwrap()
    };
    assert_eq!(run().to_bits(), run().to_bits());
}
