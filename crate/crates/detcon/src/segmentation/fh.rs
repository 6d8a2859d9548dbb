//! Graph-based segmentation by iterative region merging.
//!
//! Pixels form an 8-connected graph with Euclidean RGB distance edge weights
//! (on values scaled to [0, 255]); edges are processed in ascending
//! (weight, source, target) order and two components merge when the edge
//! weight does not exceed min(Int(A) + s/|A|, Int(B) + s/|B|), where Int is
//! the largest edge weight inside the component. A second pass merges every
//! component below the minimum size into its nearest neighbor by
//! connecting-edge weight.

use crate::imagery::Image;

use super::{LabelMap, SegError};

struct DisjointSet {
    parent: Vec<u32>,
    size: Vec<u32>,
    int_diff: Vec<f64>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n as u32).collect(),
            size: vec![1; n],
            int_diff: vec![0.0; n],
        }
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let grand = self.parent[self.parent[x as usize] as usize];
            self.parent[x as usize] = grand;
            x = grand;
        }
        x
    }

    fn union(&mut self, a: u32, b: u32, weight: f64) -> u32 {
        let (big, small) = if self.size[a as usize] >= self.size[b as usize] {
            (a, b)
        } else {
            (b, a)
        };
        self.parent[small as usize] = big;
        self.size[big as usize] += self.size[small as usize];
        self.int_diff[big as usize] = self.int_diff[big as usize]
            .max(self.int_diff[small as usize])
            .max(weight);
        big
    }
}

/// Separable Gaussian pre-smoothing with kernel radius ceil(3*sigma) and
/// mirrored borders.
fn smooth(channel: &mut [f64], h: usize, w: usize, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    if radius == 0 {
        return;
    }
    let mut kernel = Vec::with_capacity(radius as usize * 2 + 1);
    for i in -radius..=radius {
        kernel.push((-((i * i) as f64) / (2.0 * sigma * sigma)).exp());
    }
    let total: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= total;
    }
    let reflect = |i: isize, n: isize| -> usize {
        let mut i = i;
        loop {
            if i < 0 {
                i = -i - 1;
            } else if i >= n {
                i = 2 * n - 1 - i;
            } else {
                return i as usize;
            }
        }
    };
    // Horizontal pass.
    let mut tmp = vec![0.0; channel.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, &kv) in kernel.iter().enumerate() {
                let sx = reflect(x as isize + ki as isize - radius, w as isize);
                acc += kv * channel[y * w + sx];
            }
            tmp[y * w + x] = acc;
        }
    }
    // Vertical pass.
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, &kv) in kernel.iter().enumerate() {
                let sy = reflect(y as isize + ki as isize - radius, h as isize);
                acc += kv * tmp[sy * w + x];
            }
            channel[y * w + x] = acc;
        }
    }
}

/// Segments an image; see the module docs for the merge criterion.
///
/// `scale` trades off region size (larger favors larger regions), `min_size`
/// is enforced exactly, and `sigma` controls optional pre-smoothing.
pub fn fh_segment(image: &Image, scale: f64, min_size: usize, sigma: f64) -> Result<LabelMap, SegError> {
    if image.height == 0 || image.width == 0 {
        return Err(SegError::EmptyImage);
    }
    if image.data().iter().any(|v| !v.is_finite()) {
        return Err(SegError::NonFinitePixels);
    }
    if !(scale > 0.0) {
        return Err(SegError::BadParam {
            what: format!("scale must be positive, got {scale}"),
        });
    }
    if min_size == 0 {
        return Err(SegError::BadParam {
            what: "min_size must be at least 1".into(),
        });
    }
    if sigma < 0.0 {
        return Err(SegError::BadParam {
            what: format!("sigma must be non-negative, got {sigma}"),
        });
    }

    let (h, w, c) = (image.height, image.width, image.channels);
    let n = h * w;

    // Channels scaled to [0, 255], then smoothed.
    let mut channels: Vec<Vec<f64>> = (0..c)
        .map(|ci| {
            let mut chan: Vec<f64> = (0..n)
                .map(|p| f64::from(image.get(p / w, p % w, ci)) * 255.0)
                .collect();
            smooth(&mut chan, h, w, sigma);
            chan
        })
        .collect();

    let dist = |a: usize, b: usize, channels: &[Vec<f64>]| -> f64 {
        let mut sq = 0.0;
        for chan in channels {
            let d = chan[a] - chan[b];
            sq += d * d;
        }
        sq.sqrt()
    };

    // 8-connectivity: four directed offsets cover every undirected edge.
    let mut edges: Vec<(f64, u32, u32)> = Vec::with_capacity(4 * n);
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            if x + 1 < w {
                edges.push((dist(p, p + 1, &channels), p as u32, (p + 1) as u32));
            }
            if y + 1 < h {
                edges.push((dist(p, p + w, &channels), p as u32, (p + w) as u32));
                if x + 1 < w {
                    edges.push((dist(p, p + w + 1, &channels), p as u32, (p + w + 1) as u32));
                }
                if x > 0 {
                    edges.push((dist(p, p + w - 1, &channels), p as u32, (p + w - 1) as u32));
                }
            }
        }
    }
    channels.clear();

    // Stable processing order: (weight, source, target) is a total order, so
    // the segmentation does not depend on sort internals.
    edges.sort_unstable_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .expect("finite weights")
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });

    let mut ds = DisjointSet::new(n);
    for &(wgt, a, b) in &edges {
        let ra = ds.find(a);
        let rb = ds.find(b);
        if ra == rb {
            continue;
        }
        let ta = ds.int_diff[ra as usize] + scale / f64::from(ds.size[ra as usize]);
        let tb = ds.int_diff[rb as usize] + scale / f64::from(ds.size[rb as usize]);
        if wgt <= ta.min(tb) {
            ds.union(ra, rb, wgt);
        }
    }

    // Enforce the minimum component size: in ascending edge order, merge any
    // small component into the neighbor on the other end. Ascending order
    // makes that neighbor the nearest one still separated.
    if min_size > 1 {
        for &(wgt, a, b) in &edges {
            let ra = ds.find(a);
            let rb = ds.find(b);
            if ra == rb {
                continue;
            }
            if (ds.size[ra as usize] as usize) < min_size || (ds.size[rb as usize] as usize) < min_size {
                ds.union(ra, rb, wgt);
            }
        }
    }

    // Contiguous ids in first-pixel scan order.
    let mut remap: Vec<u32> = vec![u32::MAX; n];
    let mut labels = vec![0u32; n];
    let mut next = 0u32;
    for p in 0..n {
        let root = ds.find(p as u32);
        if remap[root as usize] == u32::MAX {
            remap[root as usize] = next;
            next += 1;
        }
        labels[p] = remap[root as usize];
    }

    LabelMap::new(h, w, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_is_one_region() {
        let img = Image::filled(16, 16, 3, 0.4);
        let lm = fh_segment(&img, 100.0, 1, 0.0).unwrap();
        assert_eq!(lm.region_count(), 1);
    }

    #[test]
    fn two_tone_halves_give_two_regions() {
        // Left half black, right half white; all intra-half edges weigh zero
        // and merge first, and the 255-weight boundary edges never pass the
        // threshold once each half holds more than scale/weight pixels.
        let img = Image::from_fn(20, 20, 3, |_, x, _| if x < 10 { 0.0 } else { 1.0 });
        let lm = fh_segment(&img, 10.0, 1, 0.0).unwrap();
        assert_eq!(lm.region_count(), 2);
        assert_ne!(lm.label(0, 0), lm.label(0, 19));
    }

    #[test]
    fn min_size_is_enforced() {
        // A single odd pixel would form its own region; min_size absorbs it.
        let mut img = Image::filled(12, 12, 3, 0.1);
        img.set(5, 5, 0, 1.0);
        img.set(5, 5, 1, 1.0);
        img.set(5, 5, 2, 1.0);
        let lm = fh_segment(&img, 1e-6, 4, 0.0).unwrap();
        let mut counts = vec![0usize; lm.region_count()];
        for &l in lm.labels() {
            counts[l as usize] += 1;
        }
        assert!(counts.iter().all(|&c| c >= 4), "{counts:?}");
    }

    #[test]
    fn huge_scale_merges_everything_tiny_scale_keeps_all_distinct() {
        let img = Image::from_fn(6, 6, 3, |y, x, c| ((y * 6 + x) * 3 + c) as f32 / 255.0);
        let lm = fh_segment(&img, 1e12, 1, 0.0).unwrap();
        assert_eq!(lm.region_count(), 1);
        let lm = fh_segment(&img, 1e-12, 1, 0.0).unwrap();
        assert_eq!(lm.region_count(), 36);
    }

    #[test]
    fn determinism_across_runs() {
        let img = Image::from_fn(24, 24, 3, |y, x, c| {
            (((y * 31 + x * 17 + c * 7) % 97) as f32) / 97.0
        });
        let a = fh_segment(&img, 50.0, 4, 0.8).unwrap();
        let b = fh_segment(&img, 50.0, 4, 0.8).unwrap();
        assert_eq!(a.labels(), b.labels());
    }

    #[test]
    fn parameter_validation() {
        let img = Image::filled(4, 4, 3, 0.5);
        assert!(fh_segment(&img, 0.0, 1, 0.0).is_err());
        assert!(fh_segment(&img, 1.0, 0, 0.0).is_err());
        assert!(fh_segment(&img, 1.0, 1, -0.5).is_err());
    }
}
