//! Projection/prediction heads and latent rescaling.

use crate::tensorcore::{Graph, NodeId, Scalar};

use super::{encoder::ParamBinding, HeadConfig, ModelError, ParamStore, Variant};

/// Which side of the two-branch setup a latent comes from. The online branch
/// carries gradients (and the predictor, for the EMA variant); the target
/// branch uses the EMA shadow parameters and no predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Online,
    Target,
}

fn build_mlp<T: Scalar>(
    g: &mut Graph<T>,
    binding: &mut ParamBinding<'_, T>,
    prefix: &str,
    x: NodeId,
) -> Result<NodeId, ModelError> {
    let w1 = binding.node(g, &format!("{prefix}/fc1/w"))?;
    let b1 = binding.node(g, &format!("{prefix}/fc1/b"))?;
    let w2 = binding.node(g, &format!("{prefix}/fc2/w"))?;
    let b2 = binding.node(g, &format!("{prefix}/fc2/b"))?;
    let h = g.matmul(x, w1)?;
    let h = g.add(h, b1)?;
    let h = g.relu(h)?;
    let z = g.matmul(h, w2)?;
    Ok(g.add(z, b2)?)
}

/// Projects pooled features (rows = latent slots) and rescales every row to
/// norm 1/sqrt(tau). The online branch of the EMA variant applies the
/// prediction head after the projection; the target branch never does.
pub fn build_heads<T: Scalar>(
    g: &mut Graph<T>,
    binding: &mut ParamBinding<'_, T>,
    pooled: NodeId,
    variant: Variant,
    branch: Branch,
    tau: f64,
) -> Result<NodeId, ModelError> {
    let z = build_mlp(g, binding, "proj", pooled)?;
    let z = match (variant, branch) {
        (Variant::B, Branch::Online) => build_mlp(g, binding, "pred", z)?,
        _ => z,
    };
    let target_norm = 1.0 / tau.sqrt();
    Ok(g.l2_rescale(z, target_norm)?)
}

/// Pure single-vector path: project a pooled feature and rescale it to norm
/// 1/sqrt(tau). `params` must be the online store for [`Branch::Online`] and
/// the EMA shadow store for [`Branch::Target`].
pub fn project_and_rescale(
    params: &ParamStore<f32>,
    heads: &HeadConfig,
    pooled: &[f32],
    variant: Variant,
    branch: Branch,
    tau: f64,
) -> Result<Vec<f32>, ModelError> {
    debug_assert_eq!(pooled.len(), heads.input_dim);
    let mlp = |prefix: &str, x: &[f32]| -> Result<Vec<f32>, ModelError> {
        let w1 = params.get(&format!("{prefix}/fc1/w"))?;
        let b1 = params.get(&format!("{prefix}/fc1/b"))?;
        let w2 = params.get(&format!("{prefix}/fc2/w"))?;
        let b2 = params.get(&format!("{prefix}/fc2/b"))?;
        let (input, hidden) = (w1.shape()[0], w1.shape()[1]);
        let output = w2.shape()[1];
        let mut h = vec![0.0f32; hidden];
        for (j, hv) in h.iter_mut().enumerate() {
            let mut acc = 0.0f32;
            for (i, &xv) in x.iter().enumerate().take(input) {
                acc += xv * w1.data()[i * hidden + j];
            }
            *hv = (acc + b1.data()[j]).max(0.0);
        }
        let mut z = vec![0.0f32; output];
        for (j, zv) in z.iter_mut().enumerate() {
            let mut acc = 0.0f32;
            for (i, &hv) in h.iter().enumerate() {
                acc += hv * w2.data()[i * output + j];
            }
            *zv = acc + b2.data()[j];
        }
        Ok(z)
    };

    let z = mlp("proj", pooled)?;
    let z = match (variant, branch) {
        (Variant::B, Branch::Online) => mlp("pred", &z)?,
        _ => z,
    };
    let norm = z.iter().map(|v| f64::from(*v) * f64::from(*v)).sum::<f64>().sqrt();
    if norm < 1e-30 {
        return Err(ModelError::ZeroNorm);
    }
    let scale = (1.0 / tau.sqrt() / norm) as f32;
    Ok(z.into_iter().map(|v| v * scale).collect())
}

#[cfg(test)]
mod tests {
    use super::super::{init_params, EncoderConfig, HeadConfig};
    use super::*;

    fn setup(variant: Variant) -> (ParamStore<f32>, HeadConfig) {
        let enc = EncoderConfig {
            in_channels: 3,
            widths: vec![4, 16],
            strides: vec![2, 2],
            kernel: 3,
        };
        let heads = HeadConfig::for_variant(variant, 16);
        (init_params(&enc, &heads, 5).unwrap(), heads)
    }

    #[test]
    fn latents_have_norm_inverse_sqrt_tau() {
        let (params, heads) = setup(Variant::S);
        let pooled: Vec<f32> = (0..16).map(|i| (i as f32 * 0.7).sin()).collect();
        let v = project_and_rescale(&params, &heads, &pooled, Variant::S, Branch::Online, 0.1).unwrap();
        let norm: f64 = v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
        assert!((norm - 10f64.sqrt()).abs() / 10f64.sqrt() < 1e-6, "norm {norm}");

        let v1 = project_and_rescale(&params, &heads, &pooled, Variant::S, Branch::Online, 1.0).unwrap();
        let n1: f64 = v1.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
        assert!((n1 - 1.0).abs() < 1e-6, "norm {n1}");
    }

    #[test]
    fn both_s_branches_share_parameters() {
        let (params, heads) = setup(Variant::S);
        let pooled: Vec<f32> = (0..16).map(|i| (i as f32 * 0.3).cos()).collect();
        let a = project_and_rescale(&params, &heads, &pooled, Variant::S, Branch::Online, 0.1).unwrap();
        let b = project_and_rescale(&params, &heads, &pooled, Variant::S, Branch::Target, 0.1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn online_b_branch_applies_the_predictor() {
        let (params, heads) = setup(Variant::B);
        let pooled: Vec<f32> = (0..16).map(|i| (i as f32 * 0.9).sin() + 0.3).collect();
        let online = project_and_rescale(&params, &heads, &pooled, Variant::B, Branch::Online, 0.1).unwrap();
        let target = project_and_rescale(&params, &heads, &pooled, Variant::B, Branch::Target, 0.1).unwrap();
        assert_ne!(online, target);
        assert_eq!(online.len(), heads.output);
        assert_eq!(target.len(), heads.output);
    }

    #[test]
    fn graph_and_pure_paths_agree() {
        use crate::tensorcore::{Graph, Tensor};
        let (params, heads) = setup(Variant::B);
        let pooled: Vec<f32> = (0..16).map(|i| (i as f32 * 1.1).sin()).collect();

        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::new(vec![1, 16], pooled.clone()).unwrap());
        let mut binding = ParamBinding::frozen(&params);
        let v = build_heads(&mut g, &mut binding, x, Variant::B, Branch::Online, 0.1).unwrap();
        let graph_out = g.value(v).data().to_vec();

        let pure = project_and_rescale(&params, &heads, &pooled, Variant::B, Branch::Online, 0.1).unwrap();
        for (a, b) in graph_out.iter().zip(&pure) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }
}
