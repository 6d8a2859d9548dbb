//! Paired stochastic augmentations with mask co-transformation.
//!
//! Each image is augmented twice from per-view distributions; masks follow
//! the geometric components (crop, resize, flip) only, keeping region
//! identities aligned with pixels. The cross-view pairing matrix marks slot
//! pairs that carry the same region in both views.

mod image_ops;
mod sample;

pub use image_ops::apply_to_image;
pub use sample::sample_augment;

use std::fmt;
use std::str::FromStr;

use crate::segmentation::{Mask, MaskSet, MaskSlot};

/// Framework variant: same-network contrastive (S) or EMA-target (B).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    S,
    B,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::S => write!(f, "s"),
            Variant::B => write!(f, "b"),
        }
    }
}

impl FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "s" => Ok(Variant::S),
            "b" => Ok(Variant::B),
            other => Err(format!("unknown variant {other:?}, expected s or b")),
        }
    }
}

/// Which of the two augmented views of an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewTag {
    First,
    Second,
}

/// Crop rectangle in source-image pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropRect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Sampled color-jitter offsets, applied brightness, contrast, saturation,
/// hue in that order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jitter {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

/// One concrete draw from an [`AugmentDistribution`].
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentParams {
    pub crop: CropRect,
    pub flip: bool,
    pub jitter: Option<Jitter>,
    pub grayscale: bool,
    pub blur_sigma: Option<f64>,
    pub solarize: bool,
    pub output_size: usize,
}

impl AugmentParams {
    /// Identity geometry and no photometric ops for a given source size.
    pub fn identity(height: usize, width: usize, output_size: usize) -> Self {
        Self {
            crop: CropRect {
                top: 0,
                left: 0,
                height,
                width,
            },
            flip: false,
            jitter: None,
            grayscale: false,
            blur_sigma: None,
            solarize: false,
            output_size,
        }
    }

    /// Copy with every photometric component cleared.
    pub fn geometric_only(&self) -> Self {
        Self {
            jitter: None,
            grayscale: false,
            blur_sigma: None,
            solarize: false,
            ..self.clone()
        }
    }
}

/// Per-primitive probabilities and magnitude ranges for one view.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentDistribution {
    pub area_range: (f64, f64),
    pub aspect_range: (f64, f64),
    pub flip_p: f64,
    pub jitter_p: f64,
    /// Max offsets: brightness, contrast, saturation, hue.
    pub jitter_max: [f64; 4],
    pub grayscale_p: f64,
    pub blur_p: f64,
    pub blur_sigma_range: (f64, f64),
    pub solarize_p: f64,
    pub output_size: usize,
}

impl AugmentDistribution {
    fn base(jitter_max: [f64; 4], blur_p: f64, solarize_p: f64) -> Self {
        Self {
            area_range: (0.08, 1.0),
            aspect_range: (3.0 / 4.0, 4.0 / 3.0),
            flip_p: 0.5,
            jitter_p: 0.8,
            jitter_max,
            grayscale_p: 0.2,
            blur_p,
            blur_sigma_range: (0.1, 2.0),
            solarize_p,
            output_size: 224,
        }
    }

    /// Parameter table row for the given variant and view.
    pub fn for_view(variant: Variant, view: ViewTag) -> Self {
        match (variant, view) {
            (Variant::S, ViewTag::First) => Self::base([0.8, 0.8, 0.8, 0.2], 1.0, 0.0),
            (Variant::S, ViewTag::Second) => Self::base([0.8, 0.8, 0.8, 0.2], 0.0, 0.0),
            (Variant::B, ViewTag::First) => Self::base([0.4, 0.4, 0.2, 0.1], 1.0, 0.0),
            (Variant::B, ViewTag::Second) => Self::base([0.4, 0.4, 0.2, 0.1], 0.1, 0.2),
        }
    }

    pub fn with_output_size(mut self, output_size: usize) -> Self {
        self.output_size = output_size;
        self
    }
}

/// Applies only the geometric components of the augmentation to every mask:
/// crop, nearest-neighbor resize, horizontal flip. Region ids are preserved;
/// masks emptied by the crop are retained and become invalid.
pub fn apply_to_masks(p: &AugmentParams, ms: &MaskSet) -> MaskSet {
    let s = p.output_size;
    let masks = ms
        .masks
        .iter()
        .map(|(id, m)| {
            let mut out = Mask::empty(s, s);
            for dy in 0..s {
                let sy = nearest_index(dy, p.crop.height, s) + p.crop.top;
                for dx in 0..s {
                    let dx_src = if p.flip { s - 1 - dx } else { dx };
                    let sx = nearest_index(dx_src, p.crop.width, s) + p.crop.left;
                    out.set(dy, dx, m.get(sy, sx));
                }
            }
            (*id, out)
        })
        .collect();
    MaskSet {
        height: s,
        width: s,
        masks,
        source: ms.source.clone(),
    }
}

#[inline]
fn nearest_index(dst: usize, src_extent: usize, dst_extent: usize) -> usize {
    let pos = (dst as f64 + 0.5) * src_extent as f64 / dst_extent as f64;
    (pos.floor() as usize).min(src_extent - 1)
}

/// k×k pairing indicator between sampled mask slots of the two views.
/// Entry (i, j) is set when slot i of view one and slot j of view two carry
/// the same region id and both slots are valid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairingMatrix {
    pub k: usize,
    bits: Vec<u8>,
}

impl PairingMatrix {
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.k + j] != 0
    }

    pub fn transpose(&self) -> PairingMatrix {
        let mut bits = vec![0u8; self.k * self.k];
        for i in 0..self.k {
            for j in 0..self.k {
                bits[j * self.k + i] = self.bits[i * self.k + j];
            }
        }
        PairingMatrix { k: self.k, bits }
    }

    pub fn any(&self) -> bool {
        self.bits.iter().any(|&b| b != 0)
    }
}

/// Builds the pairing indicator for two slot lists of equal length.
pub fn pairing_matrix(slots1: &[MaskSlot], slots2: &[MaskSlot]) -> PairingMatrix {
    assert_eq!(slots1.len(), slots2.len(), "slot lists must have equal length");
    let k = slots1.len();
    let mut bits = vec![0u8; k * k];
    for (i, a) in slots1.iter().enumerate() {
        if !a.valid {
            continue;
        }
        for (j, b) in slots2.iter().enumerate() {
            if b.valid && a.region_id == b.region_id {
                bits[i * k + j] = 1;
            }
        }
    }
    PairingMatrix { k, bits }
}
