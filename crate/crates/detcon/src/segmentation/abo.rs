//! Average Best Overlap: how well a predicted mask set covers ground truth.

use super::{MaskSet, SegError};

fn iou(a: &super::Mask, b: &super::Mask) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&va, &vb) in a.data().iter().zip(b.data()) {
        inter += usize::from(va != 0 && vb != 0);
        union += usize::from(va != 0 || vb != 0);
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Best IoU over predicted masks, per ground-truth mask.
pub fn abo_per_gt(gt: &MaskSet, pred: &MaskSet) -> Result<Vec<f64>, SegError> {
    if gt.is_empty() || pred.is_empty() {
        return Err(SegError::EmptyMaskSet);
    }
    if gt.height != pred.height || gt.width != pred.width {
        return Err(SegError::DimensionMismatch {
            what: format!(
                "gt {}x{} vs pred {}x{}",
                gt.height, gt.width, pred.height, pred.width
            ),
        });
    }
    Ok(gt
        .masks
        .iter()
        .map(|(_, g)| {
            pred.masks
                .iter()
                .map(|(_, p)| iou(g, p))
                .fold(0.0, f64::max)
        })
        .collect())
}

/// Mean over ground-truth masks of the best IoU any predicted mask achieves.
pub fn abo(gt: &MaskSet, pred: &MaskSet) -> Result<f64, SegError> {
    let per = abo_per_gt(gt, pred)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::super::{grid_masks, Mask, MaskSet, MaskSource};
    use super::*;

    #[test]
    fn identical_sets_score_one() {
        let ms = grid_masks(32, 32, 4).unwrap();
        assert_eq!(abo(&ms, &ms).unwrap(), 1.0);
    }

    #[test]
    fn half_mask_against_full_image_scores_half() {
        let mut half = Mask::empty(32, 32);
        for y in 0..32 {
            for x in 0..16 {
                half.set(y, x, true);
            }
        }
        let gt = MaskSet {
            height: 32,
            width: 32,
            masks: vec![(0, half)],
            source: MaskSource::Human,
        };
        let pred = grid_masks(32, 32, 1).unwrap();
        assert_eq!(abo(&gt, &pred).unwrap(), 0.5);
    }

    #[test]
    fn quadrants_match_a_2x2_grid_exactly() {
        let gt = grid_masks(64, 64, 2).unwrap();
        let pred = grid_masks(64, 64, 2).unwrap();
        assert_eq!(abo(&gt, &pred).unwrap(), 1.0);
    }

    #[test]
    fn appending_an_exact_match_never_decreases_abo() {
        let gt = grid_masks(24, 24, 3).unwrap();
        let mut pred = grid_masks(24, 24, 1).unwrap();
        let before = abo(&gt, &pred).unwrap();
        // Append a predicted mask identical to one more gt region.
        pred.masks.push((1, gt.masks[4].1.clone()));
        let after = abo(&gt, &pred).unwrap();
        assert!(after >= before);
        assert!(after > before); // the new exact match lifts its gt row to 1.0
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let a = grid_masks(16, 16, 2).unwrap();
        let b = grid_masks(16, 18, 2).unwrap();
        assert!(abo(&a, &b).is_err());
    }
}
