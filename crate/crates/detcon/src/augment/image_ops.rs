//! Applying augmentation parameters to image pixels.
//!
//! Order: crop, bicubic resize to the output size, horizontal flip, color
//! jitter (brightness, contrast, saturation, hue), grayscale, Gaussian blur
//! (23x23 kernel), solarization. The output is clamped to [0, 1].
//!
//! Operational choices the parameter table leaves open: brightness and
//! contrast are multiplicative around zero / the mean luminance, saturation
//! is a multiplicative HSV scale, hue is an additive HSV rotation with the
//! max expressed as a fraction of the full wheel.

use crate::imagery::Image;

use super::AugmentParams;

const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

/// Keys bicubic kernel with a = -0.5.
fn cubic(t: f64) -> f64 {
    let a = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (a + 2.0) * t * t * t - (a + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        a * (t * t * t - 5.0 * t * t + 8.0 * t - 4.0)
    } else {
        0.0
    }
}

fn crop_resize_bicubic(img: &Image, p: &AugmentParams) -> Image {
    let s = p.output_size;
    let c = img.channels;
    let (ch, cw) = (p.crop.height as f64, p.crop.width as f64);
    let scale_y = ch / s as f64;
    let scale_x = cw / s as f64;
    Image::from_fn(s, s, c, |dy, dx, ci| {
        let sy = (dy as f64 + 0.5) * scale_y - 0.5;
        let sx = (dx as f64 + 0.5) * scale_x - 0.5;
        let y0 = sy.floor() as isize;
        let x0 = sx.floor() as isize;
        let mut acc = 0.0f64;
        let mut wsum = 0.0f64;
        for ky in -1..=2isize {
            let wy = cubic(sy - (y0 + ky) as f64);
            if wy == 0.0 {
                continue;
            }
            // Sample indices clamp to the crop rectangle.
            let yy = (y0 + ky).clamp(0, p.crop.height as isize - 1) as usize + p.crop.top;
            for kx in -1..=2isize {
                let wx = cubic(sx - (x0 + kx) as f64);
                if wx == 0.0 {
                    continue;
                }
                let xx = (x0 + kx).clamp(0, p.crop.width as isize - 1) as usize + p.crop.left;
                acc += wy * wx * f64::from(img.get(yy, xx, ci));
                wsum += wy * wx;
            }
        }
        (acc / wsum) as f32
    })
}

fn flip_horizontal(img: &mut Image) {
    let (h, w, c) = (img.height, img.width, img.channels);
    for y in 0..h {
        for x in 0..w / 2 {
            for ci in 0..c {
                let a = img.get(y, x, ci);
                let b = img.get(y, w - 1 - x, ci);
                img.set(y, x, ci, b);
                img.set(y, w - 1 - x, ci, a);
            }
        }
    }
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn apply_jitter(img: &mut Image, j: &super::Jitter) {
    let n = img.height * img.width;
    // Brightness: multiplicative.
    let bf = (1.0 + j.brightness) as f32;
    for v in img.data_mut() {
        *v = (*v * bf).clamp(0.0, 1.0);
    }
    // Contrast: scale around the mean luminance of the (adjusted) image.
    let mut mean = 0.0f64;
    for p in 0..n {
        let (y, x) = (p / img.width, p % img.width);
        for ci in 0..img.channels.min(3) {
            mean += f64::from(LUMA[ci] * img.get(y, x, ci));
        }
    }
    mean /= n as f64;
    let cf = (1.0 + j.contrast) as f32;
    let m = mean as f32;
    for v in img.data_mut() {
        *v = (m + (*v - m) * cf).clamp(0.0, 1.0);
    }
    // Saturation (multiplicative) and hue (additive), one HSV round trip.
    if img.channels == 3 && (j.saturation != 0.0 || j.hue != 0.0) {
        let sf = (1.0 + j.saturation) as f32;
        let hshift = j.hue as f32;
        for p in 0..n {
            let (y, x) = (p / img.width, p % img.width);
            let (h, s, v) = rgb_to_hsv(img.get(y, x, 0), img.get(y, x, 1), img.get(y, x, 2));
            let (r, g, b) = hsv_to_rgb(h + hshift, (s * sf).clamp(0.0, 1.0), v);
            img.set(y, x, 0, r.clamp(0.0, 1.0));
            img.set(y, x, 1, g.clamp(0.0, 1.0));
            img.set(y, x, 2, b.clamp(0.0, 1.0));
        }
    }
}

fn apply_grayscale(img: &mut Image) {
    if img.channels != 3 {
        return;
    }
    for p in 0..img.height * img.width {
        let (y, x) = (p / img.width, p % img.width);
        let l = LUMA[0] * img.get(y, x, 0) + LUMA[1] * img.get(y, x, 1) + LUMA[2] * img.get(y, x, 2);
        for ci in 0..3 {
            img.set(y, x, ci, l);
        }
    }
}

/// 23x23 truncated Gaussian, separable, mirrored borders.
fn apply_blur(img: &mut Image, sigma: f64) {
    const RADIUS: isize = 11;
    let mut kernel = [0.0f32; 2 * RADIUS as usize + 1];
    let mut total = 0.0f64;
    for (i, k) in kernel.iter_mut().enumerate() {
        let d = i as f64 - RADIUS as f64;
        let v = (-d * d / (2.0 * sigma * sigma)).exp();
        *k = v as f32;
        total += v;
    }
    for k in &mut kernel {
        *k /= total as f32;
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
    let (h, w, c) = (img.height, img.width, img.channels);
    let mut tmp = img.clone();
    for y in 0..h {
        for x in 0..w {
            for ci in 0..c {
                let mut acc = 0.0f32;
                for (ki, &kv) in kernel.iter().enumerate() {
                    let sx = reflect(x as isize + ki as isize - RADIUS, w as isize);
                    acc += kv * img.get(y, sx, ci);
                }
                tmp.set(y, x, ci, acc);
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            for ci in 0..c {
                let mut acc = 0.0f32;
                for (ki, &kv) in kernel.iter().enumerate() {
                    let sy = reflect(y as isize + ki as isize - RADIUS, h as isize);
                    acc += kv * tmp.get(sy, x, ci);
                }
                img.set(y, x, ci, acc);
            }
        }
    }
}

fn apply_solarize(img: &mut Image) {
    for v in img.data_mut() {
        if *v >= 0.5 {
            *v = 1.0 - *v;
        }
    }
}

/// Applies the full augmentation to an image; see the module docs for the
/// operation order.
pub fn apply_to_image(p: &AugmentParams, img: &Image) -> Image {
    let mut out = crop_resize_bicubic(img, p);
    if p.flip {
        flip_horizontal(&mut out);
    }
    if let Some(j) = &p.jitter {
        apply_jitter(&mut out, j);
    }
    if p.grayscale {
        apply_grayscale(&mut out);
    }
    if let Some(sigma) = p.blur_sigma {
        apply_blur(&mut out, sigma);
    }
    if p.solarize {
        apply_solarize(&mut out);
    }
    out.clamp_unit();
    out
}

#[cfg(test)]
mod tests {
    use super::super::{AugmentParams, CropRect, Jitter};
    use super::*;

    #[test]
    fn solarize_reflects_bright_pixels() {
        let mut img = Image::filled(2, 2, 3, 0.7);
        img.set(0, 0, 0, 0.3);
        let p = AugmentParams {
            solarize: true,
            ..AugmentParams::identity(2, 2, 2)
        };
        let out = apply_to_image(&p, &img);
        assert!((out.get(0, 0, 0) - 0.3).abs() < 1e-6);
        assert!((out.get(1, 1, 2) - 0.3).abs() < 1e-6, "0.7 maps to 0.3");
    }

    #[test]
    fn identity_params_round_trip_within_1e6() {
        let img = Image::from_fn(224, 224, 3, |y, x, c| {
            (((y * 131 + x * 31 + c * 17) % 251) as f32) / 250.0
        });
        let p = AugmentParams::identity(224, 224, 224);
        let out = apply_to_image(&p, &img);
        let max_err = img
            .data()
            .iter()
            .zip(out.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_err < 1e-6, "max abs error {max_err}");
    }

    #[test]
    fn grayscale_uses_the_stated_luminance_weights() {
        let mut img = Image::filled(1, 1, 3, 0.0);
        img.set(0, 0, 0, 1.0);
        img.set(0, 0, 1, 0.5);
        img.set(0, 0, 2, 0.25);
        let p = AugmentParams {
            grayscale: true,
            ..AugmentParams::identity(1, 1, 1)
        };
        let out = apply_to_image(&p, &img);
        let want = 0.299 * 1.0 + 0.587 * 0.5 + 0.114 * 0.25;
        for c in 0..3 {
            assert!((out.get(0, 0, c) - want).abs() < 1e-6);
        }
    }

    #[test]
    fn resize_halves_and_doubles_preserve_constant_regions() {
        let img = Image::from_fn(32, 32, 3, |_, x, _| if x < 16 { 0.2 } else { 0.9 });
        let p = AugmentParams {
            crop: CropRect {
                top: 0,
                left: 0,
                height: 32,
                width: 16,
            },
            ..AugmentParams::identity(32, 32, 24)
        };
        let out = apply_to_image(&p, &img);
        // Crop covered only the left constant region.
        for v in out.data() {
            assert!((v - 0.2).abs() < 1e-5);
        }
    }

    #[test]
    fn hsv_round_trip_is_stable() {
        for &(r, g, b) in &[(0.2f32, 0.7f32, 0.4f32), (0.9, 0.1, 0.5), (0.0, 0.0, 0.0), (1.0, 1.0, 1.0)] {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-5);
            assert!((g - g2).abs() < 1e-5);
            assert!((b - b2).abs() < 1e-5);
        }
    }

    #[test]
    fn jitter_with_zero_offsets_is_identity() {
        let img = Image::from_fn(8, 8, 3, |y, x, c| ((y + x + c) % 5) as f32 / 4.0);
        let p = AugmentParams {
            jitter: Some(Jitter {
                brightness: 0.0,
                contrast: 0.0,
                saturation: 0.0,
                hue: 0.0,
            }),
            ..AugmentParams::identity(8, 8, 8)
        };
        let out = apply_to_image(&p, &img);
        let max_err = img
            .data()
            .iter()
            .zip(out.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_err < 1e-6);
    }

    #[test]
    fn blur_preserves_mean_roughly_and_smooths() {
        let img = Image::from_fn(32, 32, 3, |y, x, _| ((y * 32 + x) % 2) as f32);
        let p = AugmentParams {
            blur_sigma: Some(2.0),
            ..AugmentParams::identity(32, 32, 32)
        };
        let out = apply_to_image(&p, &img);
        // A strongly blurred checkerboard flattens toward 0.5.
        let interior = out.get(16, 16, 0);
        assert!((interior - 0.5).abs() < 0.05, "got {interior}");
    }
}
