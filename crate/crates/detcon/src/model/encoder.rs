//! Encoder graph construction, parameter initialization, and forward-only
//! feature extraction.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::imagery::Image;
use crate::segmentation::SoftMask;
use crate::tensorcore::{Graph, NodeId, Scalar, Tensor};
use crate::util::{rng_for, stream};

use super::{EncoderConfig, HeadConfig, ModelError, ParamStore, Variant};

const NORM_EPS: f64 = 1e-5;

/// Hg×Wg×D spatial map of hidden vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub grid_h: usize,
    pub grid_w: usize,
    pub dim: usize,
    data: Vec<f32>,
}

impl FeatureGrid {
    pub fn new(grid_h: usize, grid_w: usize, dim: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), grid_h * grid_w * dim);
        Self { grid_h, grid_w, dim, data }
    }

    /// Feature vector at grid cell (i, j).
    pub fn at(&self, i: usize, j: usize) -> &[f32] {
        let start = (i * self.grid_w + j) * self.dim;
        &self.data[start..start + self.dim]
    }
}

/// Binds store parameters into a graph, as trainable params for the online
/// branch or plain constants for the frozen/EMA branch.
pub struct ParamBinding<'a, T> {
    store: &'a ParamStore<T>,
    trainable: bool,
    bound: std::collections::BTreeMap<String, NodeId>,
}

impl<'a, T: Scalar> ParamBinding<'a, T> {
    pub fn trainable(store: &'a ParamStore<T>) -> Self {
        Self {
            store,
            trainable: true,
            bound: Default::default(),
        }
    }

    pub fn frozen(store: &'a ParamStore<T>) -> Self {
        Self {
            store,
            trainable: false,
            bound: Default::default(),
        }
    }

    pub fn node(&mut self, g: &mut Graph<T>, name: &str) -> Result<NodeId, ModelError> {
        if let Some(&id) = self.bound.get(name) {
            return Ok(id);
        }
        let value = self.store.get(name)?.clone();
        let id = if self.trainable {
            g.param(name, value)
        } else {
            g.leaf(value)
        };
        self.bound.insert(name.to_string(), id);
        Ok(id)
    }
}

/// Initializes encoder + head parameters with seeded He-style draws.
/// Conv and linear weights are normal with std sqrt(2/fan_in); norms start
/// at scale 1, shift 0; biases at 0.
pub fn init_params<T: Scalar>(
    enc: &EncoderConfig,
    heads: &HeadConfig,
    seed: u64,
) -> Result<ParamStore<T>, ModelError> {
    enc.validate()?;
    let mut rng = rng_for(seed, &[stream::INIT]);
    let mut normal = |shape: Vec<usize>, std: f64| -> Tensor<T> {
        let numel = shape.iter().product();
        let data: Vec<T> = (0..numel)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                T::from_f64(z * std)
            })
            .collect();
        Tensor::new(shape, data).expect("shape/data agree")
    };

    let mut params = ParamStore::new();
    let mut cin = enc.in_channels;
    for (i, (&cout, _)) in enc.widths.iter().zip(&enc.strides).enumerate() {
        let fan_in = cin * enc.kernel * enc.kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        params.insert(
            &format!("enc/conv{i}/w"),
            normal(vec![cout, cin, enc.kernel, enc.kernel], std),
        );
        params.insert(&format!("enc/norm{i}/gamma"), Tensor::full(vec![cout], T::one()));
        params.insert(&format!("enc/norm{i}/beta"), Tensor::zeros(vec![cout]));
        cin = cout;
    }

    // MLP heads: prediction mirrors projection but maps d -> hidden -> d.
    let mut mlps = vec![("proj", heads.input_dim, heads.hidden, heads.output)];
    if heads.predictor {
        mlps.push(("pred", heads.output, heads.hidden, heads.output));
    }
    for (prefix, input, hidden, output) in mlps {
        params.insert(
            &format!("{prefix}/fc1/w"),
            normal(vec![input, hidden], (2.0 / input as f64).sqrt()),
        );
        params.insert(&format!("{prefix}/fc1/b"), Tensor::zeros(vec![hidden]));
        params.insert(
            &format!("{prefix}/fc2/w"),
            normal(vec![hidden, output], (2.0 / hidden as f64).sqrt()),
        );
        params.insert(&format!("{prefix}/fc2/b"), Tensor::zeros(vec![output]));
    }
    Ok(params)
}

/// Adds the encoder stack to a graph: conv, channel-standardize, relu per
/// stage. `images` must be (n, c, h, w); returns the (n, D, hg, wg) feature
/// node.
pub fn build_encoder<T: Scalar>(
    g: &mut Graph<T>,
    binding: &mut ParamBinding<'_, T>,
    images: NodeId,
    cfg: &EncoderConfig,
) -> Result<NodeId, ModelError> {
    cfg.validate()?;
    let pad = cfg.kernel / 2;
    let mut x = images;
    for (i, (&_cout, &stride)) in cfg.widths.iter().zip(&cfg.strides).enumerate() {
        let w = binding.node(g, &format!("enc/conv{i}/w"))?;
        let gamma = binding.node(g, &format!("enc/norm{i}/gamma"))?;
        let beta = binding.node(g, &format!("enc/norm{i}/beta"))?;
        x = g.conv2d(x, w, stride, pad)?;
        x = g.channel_std(x, gamma, beta, NORM_EPS)?;
        x = g.relu(x)?;
    }
    Ok(x)
}

/// Forward-only encode of one image into a feature grid.
pub fn encode(
    params: &ParamStore<f32>,
    cfg: &EncoderConfig,
    image: &Image,
) -> Result<FeatureGrid, ModelError> {
    let (hg, wg) = cfg.grid_for(image.height)?;
    if image.height != image.width {
        return Err(ModelError::BadConfig {
            what: format!("expected a square input, got {}x{}", image.height, image.width),
        });
    }
    let chw = image_to_chw(image);
    let mut g = Graph::<f32>::new();
    let input = g.leaf(Tensor::new(
        vec![1, image.channels, image.height, image.width],
        chw,
    )?);
    let mut binding = ParamBinding::frozen(params);
    let features = build_encoder(&mut g, &mut binding, input, cfg)?;
    let value = g.value(features);
    let d = cfg.feature_dim();

    // (1, d, hg, wg) -> (hg, wg, d)
    let src = value.data();
    let mut data = vec![0.0f32; hg * wg * d];
    for ci in 0..d {
        for i in 0..hg {
            for j in 0..wg {
                data[(i * wg + j) * d + ci] = src[(ci * hg + i) * wg + j];
            }
        }
    }
    Ok(FeatureGrid::new(hg, wg, d, data))
}

/// HWC image to CHW layout.
pub fn image_to_chw(image: &Image) -> Vec<f32> {
    let (h, w, c) = (image.height, image.width, image.channels);
    let mut out = vec![0.0f32; h * w * c];
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(ci * h + y) * w + x] = image.get(y, x, ci);
            }
        }
    }
    out
}

/// Mask-pooled feature: weighted mean of grid vectors under the soft mask.
pub fn mask_pool(grid: &FeatureGrid, sm: &SoftMask) -> Result<Vec<f32>, ModelError> {
    if (sm.grid_h, sm.grid_w) != (grid.grid_h, grid.grid_w) {
        return Err(ModelError::GridMismatch {
            mask: (sm.grid_h, sm.grid_w),
            grid: (grid.grid_h, grid.grid_w),
        });
    }
    let wsum = sm.sum();
    if wsum <= 0.0 {
        return Err(ModelError::EmptySoftMask);
    }
    let mut out = vec![0.0f64; grid.dim];
    for i in 0..grid.grid_h {
        for j in 0..grid.grid_w {
            let w = sm.get(i, j);
            if w == 0.0 {
                continue;
            }
            for (o, &f) in out.iter_mut().zip(grid.at(i, j)) {
                *o += w * f64::from(f);
            }
        }
    }
    Ok(out.into_iter().map(|v| (v / wsum) as f32).collect())
}

/// Convenience: encoder + head parameter store for a variant at a feature
/// width, seeded.
pub fn init_for(
    enc: &EncoderConfig,
    variant: Variant,
    seed: u64,
) -> Result<(ParamStore<f32>, HeadConfig), ModelError> {
    let heads = HeadConfig::for_variant(variant, enc.feature_dim());
    Ok((init_params(enc, &heads, seed)?, heads))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_produces_the_configured_grid() {
        let cfg = EncoderConfig {
            in_channels: 3,
            widths: vec![4, 8],
            strides: vec![2, 2],
            kernel: 3,
        };
        let heads = HeadConfig::for_variant(Variant::S, 8);
        let params = init_params::<f32>(&cfg, &heads, 7).unwrap();
        let img = Image::from_fn(16, 16, 3, |y, x, c| ((y + x + c) % 7) as f32 / 7.0);
        let grid = encode(&params, &cfg, &img).unwrap();
        assert_eq!((grid.grid_h, grid.grid_w, grid.dim), (4, 4, 8));
    }

    #[test]
    fn encode_is_deterministic() {
        let cfg = EncoderConfig {
            in_channels: 3,
            widths: vec![4, 8],
            strides: vec![2, 2],
            kernel: 3,
        };
        let heads = HeadConfig::for_variant(Variant::S, 8);
        let params = init_params::<f32>(&cfg, &heads, 7).unwrap();
        let img = Image::from_fn(16, 16, 3, |y, x, c| ((y * 3 + x * 5 + c) % 11) as f32 / 11.0);
        let a = encode(&params, &cfg, &img).unwrap();
        let b = encode(&params, &cfg, &img).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn init_is_seed_stable_and_seed_sensitive() {
        let cfg = EncoderConfig::desk_small();
        let heads = HeadConfig::for_variant(Variant::B, cfg.feature_dim());
        let a = init_params::<f32>(&cfg, &heads, 1).unwrap();
        let b = init_params::<f32>(&cfg, &heads, 1).unwrap();
        let c = init_params::<f32>(&cfg, &heads, 2).unwrap();
        assert_eq!(a.max_abs_diff(&b), 0.0);
        assert!(a.max_abs_diff(&c) > 0.0);
        assert!(a.contains("pred/fc1/w"));
    }

    #[test]
    fn mask_pool_one_hot_cell_returns_that_cell() {
        let grid = FeatureGrid::new(2, 2, 3, (0..12).map(|i| i as f32).collect());
        let mut weights = vec![0.0; 4];
        weights[3] = 1.0;
        let sm = SoftMask::new(2, 2, weights);
        let pooled = mask_pool(&grid, &sm).unwrap();
        assert_eq!(pooled, grid.at(1, 1).to_vec());
    }

    #[test]
    fn mask_pool_uniform_equals_spatial_mean() {
        let grid = FeatureGrid::new(3, 3, 2, (0..18).map(|i| (i as f32 * 0.37).sin()).collect());
        let sm = SoftMask::new(3, 3, vec![1.0; 9]);
        let pooled = mask_pool(&grid, &sm).unwrap();
        for d in 0..2 {
            let mean: f32 = (0..9).map(|p| grid.at(p / 3, p % 3)[d]).sum::<f32>() / 9.0;
            assert!((pooled[d] - mean).abs() < 1e-6);
        }
    }

    #[test]
    fn mask_pool_two_equal_halves_average_to_global_mean() {
        let grid = FeatureGrid::new(2, 4, 2, (0..16).map(|i| (i as f32).cos()).collect());
        let left = SoftMask::new(2, 4, vec![1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        let right = SoftMask::new(2, 4, vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
        let a = mask_pool(&grid, &left).unwrap();
        let b = mask_pool(&grid, &right).unwrap();
        let uniform = mask_pool(&grid, &SoftMask::new(2, 4, vec![1.0; 8])).unwrap();
        for d in 0..2 {
            assert!(((a[d] + b[d]) / 2.0 - uniform[d]).abs() < 1e-6);
        }
    }

    #[test]
    fn mask_pool_rejects_empty_mask_and_wrong_grid() {
        let grid = FeatureGrid::new(2, 2, 1, vec![1.0; 4]);
        assert!(matches!(
            mask_pool(&grid, &SoftMask::new(2, 2, vec![0.0; 4])),
            Err(ModelError::EmptySoftMask)
        ));
        assert!(matches!(
            mask_pool(&grid, &SoftMask::new(3, 3, vec![1.0; 9])),
            Err(ModelError::GridMismatch { .. })
        ));
    }

    #[test]
    fn encoder_is_translation_covariant_on_the_interior() {
        // Two-stage net, total stride 4: shifting the input by 4 pixels
        // shifts the grid by one cell away from borders.
        let cfg = EncoderConfig {
            in_channels: 1,
            widths: vec![4, 6],
            strides: vec![2, 2],
            kernel: 3,
        };
        let heads = HeadConfig::for_variant(Variant::S, 6);
        let params = init_params::<f32>(&cfg, &heads, 3).unwrap();

        let blob = |y: usize, x: usize, cy: f64, cx: f64| {
            let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)) / 18.0;
            (-d).exp() as f32
        };
        let img_a = Image::from_fn(32, 32, 1, |y, x, _| blob(y, x, 14.0, 14.0));
        let img_b = Image::from_fn(32, 32, 1, |y, x, _| blob(y, x, 14.0, 18.0));
        let ga = encode(&params, &cfg, &img_a).unwrap();
        let gb = encode(&params, &cfg, &img_b).unwrap();
        // Interior cells (2..6): gb at (i, j+1) should match ga at (i, j).
        let mut max_err = 0.0f32;
        for i in 2..6 {
            for j in 2..5 {
                for d in 0..6 {
                    max_err = max_err.max((gb.at(i, j + 1)[d] - ga.at(i, j)[d]).abs());
                }
            }
        }
        assert!(max_err < 1e-4, "max interior covariance error {max_err}");
    }
}
