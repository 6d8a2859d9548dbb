//! Grid masks, label-map conversion, mask downsampling, and slot sampling.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{LabelMap, Mask, MaskSet, MaskSlot, MaskSource, SegError, SoftMask};

/// Number of mask slots sampled per view unless configured otherwise.
pub const DEFAULT_SLOTS: usize = 16;

/// Cell boundary i of `n` cells over `dim` pixels.
#[inline]
fn cell_edge(i: usize, n: usize, dim: usize) -> usize {
    i * dim / n
}

/// Partitions the image into an n×n grid of square sub-regions. Cell extents
/// differ by at most one pixel when `n` does not divide the dimension.
pub fn grid_masks(height: usize, width: usize, n: usize) -> Result<MaskSet, SegError> {
    if n < 1 || n > height.min(width) {
        return Err(SegError::BadParam {
            what: format!("grid size {n} out of range for {height}x{width}"),
        });
    }
    let mut masks = Vec::with_capacity(n * n);
    for gi in 0..n {
        for gj in 0..n {
            let (y0, y1) = (cell_edge(gi, n, height), cell_edge(gi + 1, n, height));
            let (x0, x1) = (cell_edge(gj, n, width), cell_edge(gj + 1, n, width));
            let mut m = Mask::empty(height, width);
            for y in y0..y1 {
                for x in x0..x1 {
                    m.set(y, x, true);
                }
            }
            masks.push((gi * n + gj, m));
        }
    }
    Ok(MaskSet {
        height,
        width,
        masks,
        source: MaskSource::Grid { n },
    })
}

/// One binary mask per region id; the result partitions the image.
pub fn labelmap_to_maskset(lm: &LabelMap) -> MaskSet {
    let regions = lm.region_count();
    let mut masks: Vec<(usize, Mask)> = (0..regions)
        .map(|r| (r, Mask::empty(lm.height, lm.width)))
        .collect();
    for y in 0..lm.height {
        for x in 0..lm.width {
            masks[lm.label(y, x) as usize].1.set(y, x, true);
        }
    }
    MaskSet {
        height: lm.height,
        width: lm.width,
        masks,
        source: MaskSource::Human,
    }
}

/// Average-pools a binary mask onto a grid. Cell footprints are contiguous
/// pixel blocks with boundaries at floor(i*dim/grid), so sizes differ by at
/// most one pixel; each cell holds the mean of its pixels.
pub fn downsample_mask(mask: &Mask, grid_h: usize, grid_w: usize) -> SoftMask {
    let mut weights = Vec::with_capacity(grid_h * grid_w);
    for gi in 0..grid_h {
        let (y0, y1) = (cell_edge(gi, grid_h, mask.height), cell_edge(gi + 1, grid_h, mask.height));
        for gj in 0..grid_w {
            let (x0, x1) = (cell_edge(gj, grid_w, mask.width), cell_edge(gj + 1, grid_w, mask.width));
            let mut active = 0usize;
            for y in y0..y1 {
                for x in x0..x1 {
                    active += usize::from(mask.get(y, x));
                }
            }
            let footprint = (y1 - y0) * (x1 - x0);
            weights.push(active as f64 / footprint as f64);
        }
    }
    SoftMask::new(grid_h, grid_w, weights)
}

/// Samples `k` mask slots and downsamples each to the pooling grid.
///
/// Draws are uniform without replacement when the set holds at least `k`
/// masks, and uniform with replacement otherwise (slots may repeat). Masks
/// emptied by augmentation stay samplable but produce invalid slots.
pub fn sample_masks(
    ms: &MaskSet,
    k: usize,
    grid_h: usize,
    grid_w: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<MaskSlot>, SegError> {
    if ms.is_empty() {
        return Err(SegError::EmptyMaskSet);
    }
    if k < 1 {
        return Err(SegError::BadParam {
            what: "k must be at least 1".into(),
        });
    }
    let picks: Vec<usize> = if ms.len() < k {
        (0..k).map(|_| rng.gen_range(0..ms.len())).collect()
    } else {
        // Partial Fisher-Yates: the first k entries of a seeded shuffle.
        let mut idx: Vec<usize> = (0..ms.len()).collect();
        for i in 0..k {
            let j = rng.gen_range(i..idx.len());
            idx.swap(i, j);
        }
        idx.truncate(k);
        idx
    };
    Ok(picks
        .into_iter()
        .map(|i| {
            let (region_id, mask) = &ms.masks[i];
            let soft = downsample_mask(mask, grid_h, grid_w);
            let valid = soft.sum() > 0.0;
            MaskSlot {
                region_id: *region_id,
                soft,
                valid,
            }
        })
        .collect())
}
