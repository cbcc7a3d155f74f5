use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Reduces an arbitrary tensor to a scalar with fixed pseudo-random weights so
/// every output element carries a distinct adjoint.
fn weighted_sum(g: &mut Graph, x: Var, seed: u64) -> Result<Var, AutodiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.value(x).shape().to_vec();
    let w = g.input(random_tensor(&mut rng, &shape));
    g.dot(x, w)
}

fn check_op<F>(shapes: &[&[usize]], seed: u64, op: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, AutodiffError>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            store
                .add(format!("p{i}"), random_tensor(&mut rng, s))
                .unwrap()
        })
        .collect();
    grad_check(
        |g: &mut Graph, s: &ParamStore| {
            let vars: Vec<Var> = ids.iter().map(|&id| g.param(s, id)).collect();
            let y = op(g, &vars)?;
            weighted_sum(g, y, seed ^ 0xABCD)
        },
        &mut store,
        1e-5,
    )
    .unwrap()
}

#[test]
fn sigmoid_at_zero() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::scalar(0.0));
    let y = g.sigmoid(x).unwrap();
    assert_eq!(g.value(y).item(), 0.5);
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap().item(), 0.25);
}

#[test]
fn full_support_conv_is_a_dot_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let sig = random_tensor(&mut rng, &[80]);
    let ker = random_tensor(&mut rng, &[80]);
    let expected: f64 = sig.data().iter().zip(ker.data()).map(|(a, b)| a * b).sum();
    let mut g = Graph::new();
    let (s, k) = (g.input(sig), g.input(ker));
    let y = g.conv1d_valid(s, k, 1).unwrap();
    assert_eq!(g.value(y).shape(), &[1]);
    assert!((g.value(y).item() - expected).abs() < 1e-12);
}

#[test]
fn conv_output_length_follows_valid_arithmetic() {
    let mut g = Graph::new();
    let s = g.input(Tensor::zeros(&[2, 23]));
    let k = g.input(Tensor::zeros(&[3, 2, 5]));
    let y = g.conv1d_valid(s, k, 4).unwrap();
    assert_eq!(g.value(y).shape(), &[3, (23 - 5) / 4 + 1]);
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let err = check_op(&[&[3, 4], &[4, 2]], 11, |g, v| g.matmul(v[0], v[1]));
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn sum_gradient_is_all_ones() {
    let mut g = Graph::new();
    let w = g.variable(Tensor::vector(vec![0.3, -1.0, 2.0, 5.0]));
    let s = g.sum(w).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(w).unwrap().data(), &[1.0; 4]);
}

#[test]
fn quadratic_gradient_is_twice_the_input() {
    let mut g = Graph::new();
    let data = vec![0.5, -1.5, 2.0];
    let w = g.variable(Tensor::vector(data.clone()));
    let l = g.dot(w, w).unwrap();
    g.backward(l).unwrap();
    let expected: Vec<f64> = data.iter().map(|x| 2.0 * x).collect();
    assert_eq!(g.grad(w).unwrap().data(), expected.as_slice());
}

#[test]
fn fan_out_accumulates() {
    let data = vec![0.2, -0.7, 1.1];
    let mut g1 = Graph::new();
    let x1 = g1.variable(Tensor::vector(data.clone()));
    let y1 = g1.add(x1, x1).unwrap();
    let l1 = weighted_sum(&mut g1, y1, 5).unwrap();
    g1.backward(l1).unwrap();

    let mut g2 = Graph::new();
    let x2 = g2.variable(Tensor::vector(data));
    let y2 = g2.mul_const(x2, 2.0).unwrap();
    let l2 = weighted_sum(&mut g2, y2, 5).unwrap();
    g2.backward(l2).unwrap();

    assert_eq!(g1.grad(x1).unwrap(), g2.grad(x2).unwrap());
}

#[test]
fn repeated_backward_accumulates_and_non_ancestors_stay_empty() {
    let mut g = Graph::new();
    let w = g.variable(Tensor::vector(vec![1.0, 2.0]));
    let other = g.variable(Tensor::vector(vec![3.0]));
    let l = g.sum(w).unwrap();
    g.backward(l).unwrap();
    g.backward(l).unwrap();
    assert_eq!(g.grad(w).unwrap().data(), &[2.0, 2.0]);
    assert!(g.grad(other).is_none());
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut g = Graph::new();
    let w = g.variable(Tensor::vector(vec![1.0, 2.0]));
    assert_eq!(g.backward(w), Err(AutodiffError::NonScalarLoss(vec![2])));
}

#[test]
fn shape_mismatch_reports_both_shapes() {
    let mut g = Graph::new();
    let a = g.input(Tensor::zeros(&[2, 3]));
    let b = g.input(Tensor::zeros(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    let c = g.input(Tensor::zeros(&[3]));
    assert!(matches!(
        g.add(a, c),
        Err(AutodiffError::ShapeMismatch { .. })
    ));
}

#[test]
fn checked_graph_flags_non_finite_values() {
    let mut g = Graph::checked();
    let x = g.input(Tensor::vector(vec![0.0]));
    assert_eq!(g.log10(x), Err(AutodiffError::NonFinite("log10")));
}

#[test]
fn overlap_add_averages_overlaps() {
    let mut g = Graph::new();
    let f = g.input(Tensor::matrix(2, 2, vec![1.0, 1.0, 3.0, 3.0]).unwrap());
    let y = g.overlap_add(f, 1, 3).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0]);
}

#[test]
fn forward_and_gradients_are_deterministic() {
    let run = || {
        let err = check_op(&[&[4, 3], &[3, 5]], 77, |g, v| {
            let m = g.matmul(v[0], v[1])?;
            g.tanh(m)
        });
        err.to_bits()
    };
    assert_eq!(run(), run());
}

#[test]
fn every_primitive_passes_gradient_check() {
    let tol = 1e-4;
    let cases: Vec<(&str, f64)> = vec![
        (
            "add",
            check_op(&[&[3, 2], &[3, 2]], 1, |g, v| g.add(v[0], v[1])),
        ),
        ("sub", check_op(&[&[5], &[5]], 2, |g, v| g.sub(v[0], v[1]))),
        (
            "mul",
            check_op(&[&[2, 3], &[2, 3]], 3, |g, v| g.mul(v[0], v[1])),
        ),
        ("neg", check_op(&[&[4]], 4, |g, v| g.neg(v[0]))),
        (
            "mul_const",
            check_op(&[&[4]], 5, |g, v| g.mul_const(v[0], -2.5)),
        ),
        (
            "add_const",
            check_op(&[&[4]], 6, |g, v| g.add_const(v[0], 0.5)),
        ),
        (
            "matmul",
            check_op(&[&[2, 5], &[5, 3]], 7, |g, v| g.matmul(v[0], v[1])),
        ),
        (
            "conv1d",
            check_op(&[&[2, 11], &[3, 2, 4]], 8, |g, v| {
                g.conv1d_valid(v[0], v[1], 2)
            }),
        ),
        (
            "conv1d_rank1",
            check_op(&[&[9], &[3]], 9, |g, v| g.conv1d_valid(v[0], v[1], 1)),
        ),
        ("sigmoid", check_op(&[&[6]], 10, |g, v| g.sigmoid(v[0]))),
        ("tanh", check_op(&[&[6]], 11, |g, v| g.tanh(v[0]))),
        ("relu", check_op(&[&[6]], 12, |g, v| g.relu(v[0]))),
        (
            "log10",
            check_op(&[&[6]], 13, |g, v| {
                let sq = g.mul(v[0], v[0])?;
                let pos = g.add_const(sq, 0.1)?;
                g.log10(pos)
            }),
        ),
        ("sum", check_op(&[&[2, 3]], 14, |g, v| g.sum(v[0]))),
        ("mean", check_op(&[&[2, 3]], 15, |g, v| g.mean(v[0]))),
        ("dot", check_op(&[&[7], &[7]], 16, |g, v| g.dot(v[0], v[1]))),
        (
            "slice_rows",
            check_op(&[&[5, 3]], 17, |g, v| g.slice(v[0], 0, 1, 3)),
        ),
        (
            "slice_cols",
            check_op(&[&[3, 6]], 18, |g, v| g.slice(v[0], 1, 2, 3)),
        ),
        (
            "slice_vec",
            check_op(&[&[8]], 19, |g, v| g.slice(v[0], 0, 3, 4)),
        ),
        (
            "concat_rows",
            check_op(&[&[2, 3], &[1, 3]], 20, |g, v| {
                g.concat(&[v[0], v[1], v[0]], 0)
            }),
        ),
        (
            "concat_cols",
            check_op(&[&[2, 3], &[2, 1]], 21, |g, v| g.concat(&[v[0], v[1]], 1)),
        ),
        (
            "transpose",
            check_op(&[&[2, 5]], 22, |g, v| g.transpose(v[0])),
        ),
        (
            "broadcast_add_cols",
            check_op(&[&[4, 3], &[3]], 23, |g, v| g.broadcast_add(v[0], v[1])),
        ),
        (
            "broadcast_add_rows",
            check_op(&[&[4, 3], &[4, 1]], 24, |g, v| g.broadcast_add(v[0], v[1])),
        ),
        (
            "scale",
            check_op(&[&[5], &[]], 25, |g, v| g.scale(v[0], v[1])),
        ),
        (
            "layer_norm",
            check_op(&[&[5, 3], &[5], &[5]], 26, |g, v| {
                g.layer_norm(v[0], v[1], v[2], 1e-5)
            }),
        ),
        (
            "overlap_add",
            check_op(&[&[4, 6]], 27, |g, v| g.overlap_add(v[0], 2, 11)),
        ),
    ];
    for (name, err) in cases {
        assert!(err < tol, "{name}: max rel err {err}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn randomized_shapes_pass_gradient_check(
        m in 1usize..5, k in 1usize..5, n in 1usize..5, seed in 0u64..1000,
    ) {
        let err = check_op(&[&[m, k], &[k, n], &[n]], seed, |g, v| {
            let y = g.matmul(v[0], v[1])?;
            let y = g.broadcast_add(y, v[2])?;
            let y = g.sigmoid(y)?;
            g.tanh(y)
        });
        prop_assert!(err < 1e-4, "rel err {}", err);
    }

    #[test]
    fn randomized_conv_passes_gradient_check(
        cin in 1usize..3, cout in 1usize..3, k in 1usize..4, extra in 0usize..6,
        stride in 1usize..3, seed in 0u64..1000,
    ) {
        let n = k + extra;
        let err = check_op(&[&[cin, n], &[cout, cin, k]], seed, |g, v| {
            g.conv1d_valid(v[0], v[1], stride)
        });
        prop_assert!(err < 1e-4, "rel err {}", err);
    }

    #[test]
    fn randomized_layer_norm_passes_gradient_check(
        f in 2usize..6, p in 1usize..4, seed in 0u64..1000,
    ) {
        let err = check_op(&[&[f, p], &[f], &[f]], seed, |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5));
        prop_assert!(err < 1e-4, "rel err {}", err);
    }
}

#[test]
fn kink_inside_the_stencil_is_refined_not_hidden() {
    // relu(w + 3e-6) + 2w at w = 0: slope 3, but the 1e-5 stencil straddles
    // the kink and the central difference reads 2.65.
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::vector(vec![0.0])).unwrap();
    let f = |g: &mut Graph, s: &ParamStore| -> Result<Var, AutodiffError> {
        let w = g.param(s, id);
        let shifted = g.add_const(w, 3e-6)?;
        let r = g.relu(shifted)?;
        let r = g.sum(r)?;
        let lin = g.sum(w)?;
        let lin = g.mul_const(lin, 2.0)?;
        g.add(r, lin)
    };
    let plain = grad_check_with(f, &mut store, &GradCheckOptions::default()).unwrap();
    assert!(plain.max_rel_err > 0.1, "{plain:?}");
    assert_eq!(plain.coords_refined, 0);
    let opts = GradCheckOptions {
        refine_kinks: true,
        ..GradCheckOptions::default()
    };
    let refined = grad_check_with(f, &mut store, &opts).unwrap();
    assert!(refined.max_rel_err < 1e-7, "{refined:?}");
    assert_eq!(refined.coords_refined, 1);

    // A wrong backward is not rescued: smooth coordinates are never refined.
    let g_wrong = |g: &mut Graph, s: &ParamStore| -> Result<Var, AutodiffError> {
        let w = g.param(s, id);
        let sq = g.mul(w, w)?;
        let sq = g.sum(sq)?;
        let detached = g.input(Tensor::scalar(g.value(w).item()));
        let d = g.mul_const(detached, 5.0)?;
        g.add(sq, d)
    };
    store.value_mut(id).data_mut()[0] = 0.7;
    let bad = grad_check_with(g_wrong, &mut store, &opts).unwrap();
    assert!(bad.max_rel_err > 0.5, "{bad:?}");
    assert_eq!(bad.coords_refined, 0);
}
