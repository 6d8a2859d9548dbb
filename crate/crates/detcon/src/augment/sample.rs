//! Sampling concrete augmentation parameters from a per-view distribution.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{AugmentDistribution, AugmentParams, CropRect, Jitter};

/// Draws augmentation parameters. The crop area is uniform in
/// [min_frac*A, A] and the aspect ratio log-uniform in the configured range;
/// a crop that does not fit is re-sampled up to 10 times before falling back
/// to the largest centered square.
///
/// Draw order is fixed (crop, flip, jitter gate, jitter offsets, grayscale,
/// blur gate, blur sigma, solarize gate) so a seed fully determines the
/// parameter stream.
pub fn sample_augment(
    dist: &AugmentDistribution,
    source_hw: (usize, usize),
    rng: &mut ChaCha8Rng,
) -> AugmentParams {
    let (h, w) = source_hw;
    let area = (h * w) as f64;

    // The area is drawn once so its marginal stays uniform; only the aspect
    // is rejection-resampled when the rectangle does not fit.
    let target_area = rng.gen_range(dist.area_range.0..=dist.area_range.1) * area;
    let mut crop = None;
    for _ in 0..10 {
        let log_range = (dist.aspect_range.0.ln(), dist.aspect_range.1.ln());
        let aspect = rng.gen_range(log_range.0..=log_range.1).exp();
        let cw = (target_area * aspect).sqrt().round() as usize;
        let ch = (target_area / aspect).sqrt().round() as usize;
        if cw >= 1 && ch >= 1 && cw <= w && ch <= h {
            let top = rng.gen_range(0..=h - ch);
            let left = rng.gen_range(0..=w - cw);
            crop = Some(CropRect {
                top,
                left,
                height: ch,
                width: cw,
            });
            break;
        }
    }
    let crop = crop.unwrap_or_else(|| {
        let side = h.min(w);
        CropRect {
            top: (h - side) / 2,
            left: (w - side) / 2,
            height: side,
            width: side,
        }
    });

    let flip = rng.gen_range(0.0..1.0) < dist.flip_p;

    let jitter = if rng.gen_range(0.0..1.0) < dist.jitter_p {
        let m = dist.jitter_max;
        Some(Jitter {
            brightness: sym(rng, m[0]),
            contrast: sym(rng, m[1]),
            saturation: sym(rng, m[2]),
            hue: sym(rng, m[3]),
        })
    } else {
        None
    };

    let grayscale = rng.gen_range(0.0..1.0) < dist.grayscale_p;

    let blur_sigma = if rng.gen_range(0.0..1.0) < dist.blur_p {
        Some(rng.gen_range(dist.blur_sigma_range.0..=dist.blur_sigma_range.1))
    } else {
        None
    };

    let solarize = rng.gen_range(0.0..1.0) < dist.solarize_p;

    AugmentParams {
        crop,
        flip,
        jitter,
        grayscale,
        blur_sigma,
        solarize,
        output_size: dist.output_size,
    }
}

fn sym(rng: &mut ChaCha8Rng, max: f64) -> f64 {
    if max == 0.0 {
        0.0
    } else {
        rng.gen_range(-max..=max)
    }
}

#[cfg(test)]
mod tests {
    use super::super::{Variant, ViewTag};
    use super::*;
    use crate::util::rng_for;

    #[test]
    fn crop_area_fraction_has_the_right_support_and_mean() {
        // Mean of U(0.08, 1) is 0.54; Monte-Carlo over 2000 draws.
        let dist = AugmentDistribution::for_view(Variant::S, ViewTag::First);
        let mut rng = rng_for(11, &[]);
        let mut fractions = Vec::new();
        for _ in 0..2000 {
            let p = sample_augment(&dist, (224, 224), &mut rng);
            let frac = (p.crop.height * p.crop.width) as f64 / (224.0 * 224.0);
            fractions.push(frac);
        }
        let min = fractions.iter().cloned().fold(f64::INFINITY, f64::min);
        let mean = fractions.iter().sum::<f64>() / fractions.len() as f64;
        // Rounding to whole pixels can nudge a draw slightly below 0.08.
        assert!(min >= 0.075, "min fraction {min}");
        assert!((mean - 0.54).abs() < 0.03, "mean fraction {mean}");
    }

    #[test]
    fn gate_probabilities_follow_the_table() {
        let dist = AugmentDistribution::for_view(Variant::B, ViewTag::Second);
        let mut rng = rng_for(5, &[]);
        let n = 4000;
        let mut blurred = 0;
        let mut solarized = 0;
        let mut jittered = 0;
        let mut grayed = 0;
        for _ in 0..n {
            let p = sample_augment(&dist, (64, 64), &mut rng);
            blurred += usize::from(p.blur_sigma.is_some());
            solarized += usize::from(p.solarize);
            jittered += usize::from(p.jitter.is_some());
            grayed += usize::from(p.grayscale);
            if let Some(s) = p.blur_sigma {
                assert!((0.1..=2.0).contains(&s));
            }
        }
        let freq = |c: usize| c as f64 / n as f64;
        assert!((freq(blurred) - 0.1).abs() < 0.02, "blur {}", freq(blurred));
        assert!((freq(solarized) - 0.2).abs() < 0.025, "solarize {}", freq(solarized));
        assert!((freq(jittered) - 0.8).abs() < 0.025, "jitter {}", freq(jittered));
        assert!((freq(grayed) - 0.2).abs() < 0.025, "grayscale {}", freq(grayed));
    }

    #[test]
    fn s_view_one_always_blurs_and_never_solarizes() {
        let dist = AugmentDistribution::for_view(Variant::S, ViewTag::First);
        let mut rng = rng_for(7, &[]);
        for _ in 0..200 {
            let p = sample_augment(&dist, (64, 64), &mut rng);
            assert!(p.blur_sigma.is_some());
            assert!(!p.solarize);
        }
    }

    #[test]
    fn sampling_is_reproducible_per_seed() {
        let dist = AugmentDistribution::for_view(Variant::B, ViewTag::First);
        let a: Vec<AugmentParams> = {
            let mut rng = rng_for(42, &[9]);
            (0..50).map(|_| sample_augment(&dist, (100, 80), &mut rng)).collect()
        };
        let b: Vec<AugmentParams> = {
            let mut rng = rng_for(42, &[9]);
            (0..50).map(|_| sample_augment(&dist, (100, 80), &mut rng)).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn crops_always_fit_the_source() {
        let dist = AugmentDistribution::for_view(Variant::S, ViewTag::Second);
        let mut rng = rng_for(3, &[]);
        for _ in 0..500 {
            let p = sample_augment(&dist, (37, 91), &mut rng);
            assert!(p.crop.top + p.crop.height <= 37);
            assert!(p.crop.left + p.crop.width <= 91);
            assert!(p.crop.height >= 1 && p.crop.width >= 1);
        }
    }
}
