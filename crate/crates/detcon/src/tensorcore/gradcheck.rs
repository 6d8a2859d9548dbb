//! Central-difference gradient verification.
//!
//! Checks run in 64-bit; finite differences are too noisy at single
//! precision. Coordinates are sub-sampled with a fixed-seed generator once a
//! graph exceeds 10^4 parameter coordinates.

use rand::seq::SliceRandom;

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use super::TensorError;

const SAMPLE_LIMIT: usize = 10_000;
const SAMPLER_SEED: u64 = 0x5eed_c0de;

/// Relative error with a unit floor, so near-zero gradients are compared
/// absolutely: |a - b| / max(|a|, |b|, 1).
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Compares `backward` against central differences over every trainable leaf
/// of the graph and returns the worst relative error.
///
/// The graph must evaluate to a scalar at `output`. Leaf values are restored
/// before returning.
pub fn check_gradients(
    graph: &mut Graph<f64>,
    output: NodeId,
    epsilon: f64,
) -> Result<f64, TensorError> {
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(TensorError::BadArg {
            op: "check_gradients",
            detail: format!("epsilon {epsilon} outside (0, 1e-2]"),
        });
    }
    let analytic = graph.backward(output)?;

    // Collect (leaf id, name, coord count) for trainable leaves.
    let mut leaves: Vec<(NodeId, String, usize)> = Vec::new();
    for (name, grad) in &analytic {
        let id = find_param(graph, name)?;
        leaves.push((id, name.clone(), grad.numel()));
    }
    let total: usize = leaves.iter().map(|(_, _, n)| n).sum();

    // Flat coordinate list, optionally sub-sampled.
    let mut coords: Vec<(usize, usize)> = Vec::new();
    for (li, (_, _, n)) in leaves.iter().enumerate() {
        for c in 0..*n {
            coords.push((li, c));
        }
    }
    if total > SAMPLE_LIMIT {
        let mut rng = crate::util::rng_for(SAMPLER_SEED, &[crate::util::stream::GRADCHECK]);
        coords.shuffle(&mut rng);
        coords.truncate(SAMPLE_LIMIT);
        coords.sort_unstable();
    }

    let mut worst = 0.0f64;
    for (li, c) in coords {
        let (id, ref name, _) = leaves[li];
        let orig = graph.value(id).data()[c];

        graph.set_leaf_coord(id, c, orig + epsilon)?;
        graph.recompute()?;
        let f_plus = graph.scalar_value(output);

        graph.set_leaf_coord(id, c, orig - epsilon)?;
        graph.recompute()?;
        let f_minus = graph.scalar_value(output);

        graph.set_leaf_coord(id, c, orig)?;

        let fd = (f_plus - f_minus) / (2.0 * epsilon);
        let err = rel_err(analytic[name].data()[c], fd);
        if err > worst {
            worst = err;
        }
    }
    graph.recompute()?;
    Ok(worst)
}

fn find_param(graph: &Graph<f64>, name: &str) -> Result<NodeId, TensorError> {
    for id in 0..graph.len() {
        if graph.param_name_at(NodeId(id)).as_deref() == Some(name) {
            return Ok(NodeId(id));
        }
    }
    Err(TensorError::BadArg {
        op: "check_gradients",
        detail: format!("no trainable leaf named {name}"),
    })
}

/// Builds a named op-exercise graph and returns (graph, scalar output).
///
/// Each builder wires the op under test between seeded random parameters and
/// a fixed random scalarization, so the whole op surface receives gradient.
pub fn op_check_graph(
    op: &str,
    variant: usize,
    seed: u64,
) -> Result<(Graph<f64>, NodeId), TensorError> {
    use rand::Rng;
    let mut rng = crate::util::rng_for(seed, &[crate::util::stream::GRADCHECK, variant as u64]);
    let mut randt = |shape: Vec<usize>| {
        let numel = shape.iter().product();
        Tensor::<f64>::new(
            shape,
            (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>(),
        )
        .unwrap()
    };

    let mut g = Graph::<f64>::new();
    // Shape families per variant; kept small so full coordinate sweeps stay fast.
    let dims = [2 + variant, 3 + variant, 4 + variant];
    let (rows, cols, inner) = (dims[0], dims[1], dims[2]);

    let out = match op {
        "matmul" => {
            let ta = variant % 2 == 1;
            let tb = variant % 3 == 1;
            let a_shape = if ta { vec![inner, rows] } else { vec![rows, inner] };
            let b_shape = if tb { vec![cols, inner] } else { vec![inner, cols] };
            let a = g.param("a", randt(a_shape));
            let b = g.param("b", randt(b_shape));
            let y = g.matmul_flags(a, b, ta, tb)?;
            scalarize(&mut g, y, &mut randt)?
        }
        "add" => {
            let a = g.param("a", randt(vec![rows, cols]));
            let b = match variant % 3 {
                0 => g.param("b", randt(vec![rows, cols])),
                1 => g.param("b", randt(vec![cols])),
                _ => g.param("b", randt(vec![1])),
            };
            let y = g.add(a, b)?;
            scalarize(&mut g, y, &mut randt)?
        }
        "mul-by-scalar" => {
            let a = g.param("a", randt(vec![rows, cols]));
            let y = g.mul_scalar(a, 0.7 + variant as f64)?;
            scalarize(&mut g, y, &mut randt)?
        }
        "elementwise-add" | "elementwise-sub" | "elementwise-mul" => {
            let a = g.param("a", randt(vec![rows, cols]));
            let b = g.param("b", randt(vec![rows, cols]));
            let y = match op {
                "elementwise-add" => g.ew_add(a, b)?,
                "elementwise-sub" => g.ew_sub(a, b)?,
                _ => g.ew_mul(a, b)?,
            };
            scalarize(&mut g, y, &mut randt)?
        }
        "relu" => {
            let a = g.param("a", randt(vec![rows, cols]));
            let y = g.relu(a)?;
            scalarize(&mut g, y, &mut randt)?
        }
        "conv2d" => {
            let (n, cin, cout, hw, k, s, p) = match variant {
                0 => (1, 1, 2, 8, 3, 1, 1),
                1 => (2, 2, 3, 7, 3, 2, 1),
                _ => (1, 3, 2, 6, 5, 1, 2),
            };
            let x = g.param("x", randt(vec![n, cin, hw, hw]));
            let w = g.param("w", randt(vec![cout, cin, k, k]));
            let y = g.conv2d(x, w, s, p)?;
            let m = g.spatial_mean(y)?;
            scalarize(&mut g, m, &mut randt)?
        }
        "average-pool" => {
            let (n, c, hw, k, s) = match variant {
                0 => (1, 2, 6, 2, 2),
                1 => (2, 1, 9, 3, 3),
                _ => (1, 3, 8, 3, 2),
            };
            let x = g.param("x", randt(vec![n, c, hw, hw]));
            let y = g.avg_pool(x, k, s)?;
            let m = g.spatial_mean(y)?;
            scalarize(&mut g, m, &mut randt)?
        }
        "spatial-mean" => {
            let x = g.param("x", randt(vec![rows, 2, cols, cols]));
            let y = g.spatial_mean(x)?;
            scalarize(&mut g, y, &mut randt)?
        }
        "mask-weighted-pool" => {
            let (n, c, hw, k) = (rows.min(2), 3, cols, 2 + variant);
            let x = g.param("x", randt(vec![n, c, hw, hw]));
            let mut w = randt(vec![n, k, hw * hw]);
            for v in w.data_mut() {
                *v = v.abs() + 0.05;
            }
            let w = g.leaf(w);
            let y = g.mask_pool(x, w)?;
            scalarize(&mut g, y, &mut randt)?
        }
        "l2-rescale" => {
            let mut x0 = randt(vec![rows, cols]);
            for v in x0.data_mut() {
                *v += 1.5; // keep rows away from the zero-norm singularity
            }
            let x = g.param("x", x0);
            let y = g.l2_rescale(x, 1.0 / 0.1f64.sqrt())?;
            scalarize(&mut g, y, &mut randt)?
        }
        "exp" => {
            let x = g.param("x", randt(vec![rows, cols]));
            let y = g.exp(x)?;
            scalarize(&mut g, y, &mut randt)?
        }
        "log" => {
            let mut x0 = randt(vec![rows, cols]);
            for v in x0.data_mut() {
                *v = v.abs() + 0.5;
            }
            let x = g.param("x", x0);
            let y = g.log(x)?;
            scalarize(&mut g, y, &mut randt)?
        }
        "softmax-cross-entropy-with-logits" => {
            let x = g.param("x", randt(vec![rows, cols]));
            let targets: Vec<usize> = (0..rows).map(|r| (r + variant) % cols).collect();
            let weights: Vec<f64> = (0..rows).map(|r| 0.3 + 0.2 * r as f64).collect();
            g.softmax_xent(x, &targets, &weights)?
        }
        "gather-rows" => {
            let x = g.param("x", randt(vec![rows + 2, cols]));
            let idx: Vec<usize> = (0..rows + 3).map(|i| (i * 2 + variant) % (rows + 2)).collect();
            let y = g.gather_rows(x, &idx)?;
            scalarize(&mut g, y, &mut randt)?
        }
        "concat" => {
            let a = g.param("a", randt(vec![rows, cols]));
            let b = g.param("b", randt(vec![rows, 2]));
            let c = g.param("c", randt(vec![rows, 1]));
            let axis = variant % 2;
            let y = if axis == 1 {
                g.concat(&[a, b, c], 1)?
            } else {
                let b0 = g.param("b0", randt(vec![2, cols]));
                g.concat(&[a, b0], 0)?
            };
            scalarize(&mut g, y, &mut randt)?
        }
        "channel-standardize" => {
            let (n, c, hw) = (rows.min(2), 3, cols);
            let x = g.param("x", randt(vec![n, c, hw, hw]));
            let gamma = g.param("gamma", randt(vec![c]));
            let beta = g.param("beta", randt(vec![c]));
            let y = g.channel_std(x, gamma, beta, 1e-5)?;
            let m = g.spatial_mean(y)?;
            scalarize(&mut g, m, &mut randt)?
        }
        other => {
            return Err(TensorError::BadArg {
                op: "op_check_graph",
                detail: format!("unknown op {other}"),
            })
        }
    };
    Ok((g, out))
}

/// Reduces a rank-2 value to a scalar through fixed random sandwich products,
/// so every output coordinate influences the scalar with a distinct weight.
fn scalarize(
    g: &mut Graph<f64>,
    y: NodeId,
    randt: &mut impl FnMut(Vec<usize>) -> Tensor<f64>,
) -> Result<NodeId, TensorError> {
    let shape = g.value(y).shape().to_vec();
    debug_assert_eq!(shape.len(), 2);
    let left = g.leaf(randt(vec![1, shape[0]]));
    let right = g.leaf(randt(vec![shape[1], 1]));
    let ly = g.matmul(left, y)?;
    g.matmul(ly, right)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epsilon_bounds_are_enforced() {
        let (mut g, out) = op_check_graph("relu", 0, 1).unwrap();
        assert!(check_gradients(&mut g, out, 0.0).is_err());
        assert!(check_gradients(&mut g, out, 0.05).is_err());
        assert!(check_gradients(&mut g, out, 1e-5).is_ok());
    }

    #[test]
    fn linear_layer_meets_tight_tolerance() {
        // w*u summed: purely linear, so central differences are near-exact.
        let mut g = Graph::<f64>::new();
        let w = g.param("w", Tensor::from_fn(vec![4, 4], |i| ((i * 7 % 11) as f64) * 0.2 - 1.0));
        let u = g.leaf(Tensor::from_fn(vec![4, 1], |i| i as f64 * 0.3 + 0.1));
        let h = g.matmul(w, u).unwrap();
        let r = g.relu(h).unwrap();
        let ones = g.leaf(Tensor::full(vec![1, 4], 1.0));
        let s = g.matmul(ones, r).unwrap();
        let err = check_gradients(&mut g, s, 1e-5).unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn subsampling_kicks_in_above_the_limit() {
        let mut g = Graph::<f64>::new();
        let w = g.param(
            "w",
            Tensor::from_fn(vec![150, 80], |i| ((i % 17) as f64) * 0.05 - 0.4),
        );
        let right = g.leaf(Tensor::from_fn(vec![80, 1], |i| (i as f64 * 0.13).sin()));
        let h = g.matmul(w, right).unwrap();
        let ones = g.leaf(Tensor::full(vec![1, 150], 1.0));
        let s = g.matmul(ones, h).unwrap();
        let err = check_gradients(&mut g, s, 1e-5).unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }
}
