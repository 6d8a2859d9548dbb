//! Contrastive-detection pretraining at desk scale.
//!
//! The crate trains convolutional encoders by pulling together mask-pooled
//! features that represent the same image region across two augmented views,
//! and pushing them apart from features of other regions and images. It ships
//! everything needed to exercise that mechanism end to end on a laptop:
//! a small reverse-mode tensor engine, unsupervised mask generation
//! (spatial grids and Felzenszwalb-Huttenlocher graph segmentation), the
//! paired augmentation pipeline, projection/prediction heads with an optional
//! EMA target network, the contrastive-detection objective with an
//! independent oracle, a LARS training loop over synthetic scenes, and a
//! retrieval-based frozen-feature evaluation.

pub mod augment;
pub mod cli;
pub mod imagery;
pub mod loss;
pub mod model;
pub mod segmentation;
pub mod tensorcore;
pub mod train;
pub mod util;
