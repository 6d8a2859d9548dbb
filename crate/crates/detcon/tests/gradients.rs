//! Central-difference verification of every differentiable op, in 64-bit.

use detcon::tensorcore::{check_gradients, op_check_graph, op_set, Graph, Tensor};

#[test]
fn every_op_matches_central_differences_on_three_shapes() {
    for op in op_set() {
        for variant in 0..3 {
            let (mut g, out) = op_check_graph(op, variant, 42).unwrap();
            let err = check_gradients(&mut g, out, 1e-5).unwrap();
            assert!(err < 1e-5, "op {op} variant {variant}: relative error {err}");
        }
    }
}

#[test]
fn relu_of_matmul_gradient_is_tight() {
    // f(W) = sum(relu(W u)) on a random 4x4 W.
    let mut g = Graph::<f64>::new();
    let w = g.param(
        "w",
        Tensor::from_fn(vec![4, 4], |i| ((i * 31 % 17) as f64) * 0.23 - 1.7),
    );
    let u = g.leaf(Tensor::from_fn(vec![4, 1], |i| (i as f64 * 1.3).sin() + 0.2));
    let h = g.matmul(w, u).unwrap();
    let r = g.relu(h).unwrap();
    let ones = g.leaf(Tensor::full(vec![1, 4], 1.0));
    let s = g.matmul(ones, r).unwrap();
    let err = check_gradients(&mut g, s, 1e-5).unwrap();
    assert!(err < 1e-6, "relative error {err}");
}

#[test]
fn conv2d_3x3_on_8x8_input() {
    let mut g = Graph::<f64>::new();
    let x = g.param(
        "x",
        Tensor::from_fn(vec![1, 1, 8, 8], |i| ((i * 7 % 23) as f64) * 0.1 - 1.0),
    );
    let w = g.param(
        "w",
        Tensor::from_fn(vec![2, 1, 3, 3], |i| ((i * 11 % 13) as f64) * 0.15 - 0.8),
    );
    let y = g.conv2d(x, w, 1, 1).unwrap();
    let m = g.spatial_mean(y).unwrap();
    let left = g.leaf(Tensor::from_fn(vec![1, 1], |_| 1.0));
    let right = g.leaf(Tensor::from_fn(vec![2, 1], |i| 1.0 + i as f64));
    let lm = g.matmul(left, m).unwrap();
    let s = g.matmul(lm, right).unwrap();
    let err = check_gradients(&mut g, s, 1e-5).unwrap();
    assert!(err < 1e-5, "relative error {err}");
}

#[test]
fn rescale_at_zero_vector_is_an_error_not_a_number() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::zeros(vec![2, 3]));
    assert!(g.l2_rescale(x, 3.16).is_err());
}
