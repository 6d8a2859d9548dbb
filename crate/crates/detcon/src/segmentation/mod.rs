//! Mask generation and evaluation: spatial grids, graph-based segmentation,
//! ingestion of annotated masks, mask downsampling/sampling, and the
//! average-best-overlap quality metric.

mod abo;
mod fh;
mod masks;
mod store;

pub use abo::{abo, abo_per_gt};
pub use fh::fh_segment;
pub use masks::{downsample_mask, grid_masks, labelmap_to_maskset, sample_masks, DEFAULT_SLOTS};
pub use store::{MaskStore, StoreEntry};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SegError {
    #[error("empty image")]
    EmptyImage,
    #[error("non-finite pixel values")]
    NonFinitePixels,
    #[error("bad parameter: {what}")]
    BadParam { what: String },
    #[error("label map invalid: {what}")]
    BadLabelMap { what: String },
    #[error("mask set is empty")]
    EmptyMaskSet,
    #[error("dimension mismatch: {what}")]
    DimensionMismatch { what: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("mask store: {what}")]
    Store { what: String },
    #[error(transparent)]
    Tensor(#[from] crate::tensorcore::TensorError),
}

/// Per-pixel region ids forming a contiguous range 0..R-1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    labels: Vec<u32>,
    regions: usize,
}

impl LabelMap {
    /// Validates that every pixel is labeled and ids are contiguous from 0.
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self, SegError> {
        if labels.len() != height * width {
            return Err(SegError::BadLabelMap {
                what: format!("{} labels for {height}x{width}", labels.len()),
            });
        }
        let max = labels.iter().copied().max().ok_or(SegError::EmptyImage)?;
        let regions = max as usize + 1;
        let mut seen = vec![false; regions];
        for &l in &labels {
            seen[l as usize] = true;
        }
        if let Some(missing) = seen.iter().position(|&s| !s) {
            return Err(SegError::BadLabelMap {
                what: format!("region id {missing} unused; ids must be contiguous"),
            });
        }
        Ok(Self { height, width, labels, regions })
    }

    pub fn label(&self, y: usize, x: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn region_count(&self) -> usize {
        self.regions
    }

    pub fn to_i32(&self) -> Vec<i32> {
        self.labels.iter().map(|&l| l as i32).collect()
    }

    pub fn from_i32(height: usize, width: usize, data: &[i32]) -> Result<Self, SegError> {
        if data.iter().any(|&v| v < 0) {
            return Err(SegError::BadLabelMap {
                what: "negative region id".into(),
            });
        }
        Self::new(height, width, data.iter().map(|&v| v as u32).collect())
    }
}

/// Binary H×W mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Self {
        debug_assert_eq!(data.len(), height * width);
        debug_assert!(data.iter().all(|&v| v <= 1));
        Self { height, width, data }
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0; height * width] }
    }

    pub fn filled(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![1; height * width] }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = u8::from(v);
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn active_count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn flip_horizontal(&self) -> Mask {
        let mut out = Mask::empty(self.height, self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(y, self.width - 1 - x, self.get(y, x));
            }
        }
        out
    }
}

/// Where a mask set came from; carried through the store and run metadata.
#[derive(Debug, Clone, PartialEq)]
pub enum MaskSource {
    Grid { n: usize },
    Fh { scale: f64, min_size: usize, sigma: f64 },
    Human,
}

impl MaskSource {
    pub fn kind(&self) -> &'static str {
        match self {
            MaskSource::Grid { .. } => "grid",
            MaskSource::Fh { .. } => "fh",
            MaskSource::Human => "human",
        }
    }

    pub fn params(&self) -> String {
        match self {
            MaskSource::Grid { n } => format!("n={n}"),
            MaskSource::Fh { scale, min_size, sigma } => {
                format!("s={scale},c={min_size},sigma={sigma}")
            }
            MaskSource::Human => String::new(),
        }
    }
}

/// A set of binary masks with stable region identities.
///
/// Grid and FH sources partition the image; human masks may overlap. Masks
/// emptied by augmentation are retained with zero active pixels and count as
/// invalid for pooling and pairing.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    pub height: usize,
    pub width: usize,
    pub masks: Vec<(usize, Mask)>,
    pub source: MaskSource,
}

impl MaskSet {
    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    /// A mask is valid while it still covers at least one pixel.
    pub fn is_valid(&self, index: usize) -> bool {
        self.masks[index].1.active_count() > 0
    }

    /// True when every pixel is covered by exactly one mask.
    pub fn is_partition(&self) -> bool {
        let mut cover = vec![0u32; self.height * self.width];
        for (_, m) in &self.masks {
            for (c, &v) in cover.iter_mut().zip(m.data()) {
                *c += u32::from(v);
            }
        }
        cover.iter().all(|&c| c == 1)
    }
}

/// Soft Hg×Wg pooling weights obtained by average-downsampling a binary mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask {
    pub grid_h: usize,
    pub grid_w: usize,
    weights: Vec<f64>,
}

impl SoftMask {
    pub fn new(grid_h: usize, grid_w: usize, weights: Vec<f64>) -> Self {
        debug_assert_eq!(weights.len(), grid_h * grid_w);
        Self { grid_h, grid_w, weights }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.grid_w + j]
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn flip_horizontal(&self) -> SoftMask {
        let mut out = self.clone();
        for i in 0..self.grid_h {
            for j in 0..self.grid_w {
                out.weights[i * self.grid_w + j] = self.weights[i * self.grid_w + (self.grid_w - 1 - j)];
            }
        }
        out
    }
}

/// One sampled mask slot: a region identity plus its pooling weights.
#[derive(Debug, Clone)]
pub struct MaskSlot {
    pub region_id: usize,
    pub soft: SoftMask,
    pub valid: bool,
}
