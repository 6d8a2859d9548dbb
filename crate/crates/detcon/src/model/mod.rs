//! The learnable pipeline: convolutional encoder producing a feature grid,
//! mask pooling, projection/prediction heads with latent rescaling, the EMA
//! target network, and the floating-point cost model.

mod ema;
mod encoder;
mod flops;
mod heads;

pub use ema::{ema_init, ema_schedule, ema_update};
pub use encoder::{
    build_encoder, encode, image_to_chw, init_for, init_params, mask_pool, FeatureGrid,
    ParamBinding,
};
pub use flops::{estimate_flops, CostDescriptor, CostReport};
pub use heads::{build_heads, project_and_rescale, Branch};

pub use crate::augment::Variant;

use std::collections::BTreeMap;

use thiserror::Error;

use crate::tensorcore::{Scalar, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("bad encoder config: {what}")]
    BadConfig { what: String },
    #[error("input {got}px is not divisible by stage stride {stride} at stage {stage}")]
    StrideMismatch {
        got: usize,
        stride: usize,
        stage: usize,
    },
    #[error("mask grid {mask:?} does not match feature grid {grid:?}")]
    GridMismatch {
        mask: (usize, usize),
        grid: (usize, usize),
    },
    #[error("all-zero soft mask: slot must be excluded by the caller")]
    EmptySoftMask,
    #[error("zero-norm projection output")]
    ZeroNorm,
    #[error("ema update requires the EMA-target variant")]
    EmaOnSVariant,
    #[error("ema schedule step {t} exceeds total {total}")]
    EmaStepOutOfRange { t: usize, total: usize },
    #[error("missing parameter {name}")]
    MissingParam { name: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Named parameter tensors; iteration order is the sorted name order
/// everywhere, which keeps initialization, updates, and checkpoints
/// deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) {
        self.map.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>, ModelError> {
        self.map.get(name).ok_or_else(|| ModelError::MissingParam {
            name: name.to_string(),
        })
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>, ModelError> {
        self.map.get_mut(name).ok_or_else(|| ModelError::MissingParam {
            name: name.to_string(),
        })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            map: self.map.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Total number of scalar coordinates.
    pub fn coord_count(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.map
            .iter()
            .map(|(k, v)| match other.map.get(k) {
                Some(o) => v.max_abs_diff(o),
                None => f64::INFINITY,
            })
            .fold(0.0, f64::max)
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Encoder architecture: a stack of conv stages, each followed by
/// per-channel standardization and a relu. The defaults give a 7×7 grid of
/// 256-dimensional features from 224×224 inputs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub kernel: usize,
}

impl EncoderConfig {
    /// Five stride-2 stages: 224² inputs map to a 7×7×256 grid.
    pub fn desk_default() -> Self {
        Self {
            in_channels: 3,
            widths: vec![32, 64, 128, 256, 256],
            strides: vec![2, 2, 2, 2, 2],
            kernel: 3,
        }
    }

    /// Three stride-2 stages for small inputs: 64² maps to an 8×8×64 grid.
    pub fn desk_small() -> Self {
        Self {
            in_channels: 3,
            widths: vec![16, 32, 64],
            strides: vec![2, 2, 2],
            kernel: 3,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.widths.is_empty() || self.widths.len() != self.strides.len() {
            return Err(ModelError::BadConfig {
                what: format!(
                    "{} widths vs {} strides",
                    self.widths.len(),
                    self.strides.len()
                ),
            });
        }
        if self.kernel % 2 == 0 {
            return Err(ModelError::BadConfig {
                what: "kernel must be odd".into(),
            });
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        *self.widths.last().expect("validated non-empty")
    }

    pub fn total_stride(&self) -> usize {
        self.strides.iter().product()
    }

    /// Output grid for a square input; every stage stride must divide its
    /// input extent.
    pub fn grid_for(&self, resolution: usize) -> Result<(usize, usize), ModelError> {
        self.validate()?;
        let mut extent = resolution;
        for (stage, &s) in self.strides.iter().enumerate() {
            if extent % s != 0 {
                return Err(ModelError::StrideMismatch {
                    got: extent,
                    stride: s,
                    stage,
                });
            }
            extent /= s;
        }
        Ok((extent, extent))
    }
}

/// Projection (and optional prediction) head dimensions.
///
/// Hidden and output sizes scale with the feature dim: the same-network
/// variant uses hidden D and output D/8, the EMA variant hidden 2D and
/// output D/4, and the prediction head mirrors the projection head shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub output: usize,
    pub predictor: bool,
}

impl HeadConfig {
    pub fn for_variant(variant: Variant, feature_dim: usize) -> Self {
        match variant {
            Variant::S => Self {
                input_dim: feature_dim,
                hidden: feature_dim,
                output: (feature_dim / 8).max(1),
                predictor: false,
            },
            Variant::B => Self {
                input_dim: feature_dim,
                hidden: 2 * feature_dim,
                output: (feature_dim / 4).max(1),
                predictor: true,
            },
        }
    }

    /// Published dimensions: 2048→2048→128 for S, 2048→4096→256 with a
    /// matching predictor for B.
    pub fn paper(variant: Variant) -> Self {
        match variant {
            Variant::S => Self {
                input_dim: 2048,
                hidden: 2048,
                output: 128,
                predictor: false,
            },
            Variant::B => Self {
                input_dim: 2048,
                hidden: 4096,
                output: 256,
                predictor: true,
            },
        }
    }
}
