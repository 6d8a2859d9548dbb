//! Raw compute kernels. Every output element is produced by a fixed
//! sequential reduction, so parallelizing over output coordinates keeps
//! results bit-identical across thread counts.

use rayon::prelude::*;

use super::tensor::Scalar;

/// out(m×n) = opA(a) * opB(b), where opX transposes when the flag is set.
/// `a` is m×k after opA, `b` is k×n after opB. Accumulation over k runs in
/// ascending order for every output cell.
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    out: &mut [T],
) {
    debug_assert_eq!(out.len(), m * n);
    let row_job = |i: usize, row: &mut [T]| {
        match (ta, tb) {
            (false, false) => {
                // ikj with a row accumulator; per-cell order is still ascending k.
                for v in row.iter_mut() {
                    *v = T::zero();
                }
                let arow = &a[i * k..(i + 1) * k];
                for (l, &av) in arow.iter().enumerate() {
                    let brow = &b[l * n..(l + 1) * n];
                    for (v, &bv) in row.iter_mut().zip(brow) {
                        *v = *v + av * bv;
                    }
                }
            }
            (false, true) => {
                let arow = &a[i * k..(i + 1) * k];
                for (j, v) in row.iter_mut().enumerate() {
                    let brow = &b[j * k..(j + 1) * k];
                    let mut acc = T::zero();
                    for (&av, &bv) in arow.iter().zip(brow) {
                        acc = acc + av * bv;
                    }
                    *v = acc;
                }
            }
            (true, false) => {
                for v in row.iter_mut() {
                    *v = T::zero();
                }
                for l in 0..k {
                    let av = a[l * m + i];
                    let brow = &b[l * n..(l + 1) * n];
                    for (v, &bv) in row.iter_mut().zip(brow) {
                        *v = *v + av * bv;
                    }
                }
            }
            (true, true) => {
                for (j, v) in row.iter_mut().enumerate() {
                    let mut acc = T::zero();
                    for l in 0..k {
                        acc = acc + a[l * m + i] * b[j * k + l];
                    }
                    *v = acc;
                }
            }
        }
    };

    if m * n * k >= 32_768 {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, row)| row_job(i, row));
    } else {
        for (i, row) in out.chunks_mut(n).enumerate() {
            row_job(i, row);
        }
    }
}

/// Output spatial extent of a convolution/pooling window.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let span = input + 2 * pad;
    if span < kernel {
        return None;
    }
    Some((span - kernel) / stride + 1)
}

/// Unfolds one image (cin×h×w slice) into a (cin·kh·kw) × (oh·ow) matrix
/// with implicit zero padding.
#[allow(clippy::too_many_arguments)]
pub fn im2col<T: Scalar>(
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut [T],
) {
    debug_assert_eq!(x.len(), cin * h * w);
    debug_assert_eq!(cols.len(), cin * kh * kw * oh * ow);
    let ohw = oh * ow;
    for ci in 0..cin {
        let xc = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &mut cols[((ci * kh + ki) * kw + kj) * ohw..((ci * kh + ki) * kw + kj + 1) * ohw];
                for oi in 0..oh {
                    let iy = (oi * stride + ki) as isize - pad as isize;
                    for oj in 0..ow {
                        let ix = (oj * stride + kj) as isize - pad as isize;
                        row[oi * ow + oj] = if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                            xc[iy as usize * w + ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds a column matrix back onto the image; inverse of [`im2col`].
#[allow(clippy::too_many_arguments)]
pub fn col2im_add<T: Scalar>(
    cols: &[T],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    x: &mut [T],
) {
    let ohw = oh * ow;
    for ci in 0..cin {
        let xc = &mut x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &cols[((ci * kh + ki) * kw + kj) * ohw..((ci * kh + ki) * kw + kj + 1) * ohw];
                for oi in 0..oh {
                    let iy = (oi * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for oj in 0..ow {
                        let ix = (oj * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix as usize >= w {
                            continue;
                        }
                        let idx = iy as usize * w + ix as usize;
                        xc[idx] = xc[idx] + row[oi * ow + oj];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_for_all_flag_combos() {
        let m = 3;
        let k = 4;
        let n = 2;
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.3 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        // Store transposed copies.
        let mut at = vec![0.0; m * k];
        for i in 0..m {
            for l in 0..k {
                at[l * m + i] = a[i * k + l];
            }
        }
        let mut bt = vec![0.0; k * n];
        for l in 0..k {
            for j in 0..n {
                bt[j * k + l] = b[l * n + j];
            }
        }
        let mut want = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for l in 0..k {
                    acc += a[i * k + l] * b[l * n + j];
                }
                want[i * n + j] = acc;
            }
        }
        for (ta, tb, pa, pb) in [
            (false, false, &a, &b),
            (false, true, &a, &bt),
            (true, false, &at, &b),
            (true, true, &at, &bt),
        ] {
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, pa, ta, pb, tb, &mut out);
            for (x, y) in out.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12, "ta={ta} tb={tb}");
            }
        }
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), c> == <x, col2im(c)> for random x, c.
        let (cin, h, w, kh, kw, s, p) = (2, 5, 4, 3, 3, 2, 1);
        let oh = conv_out_extent(h, kh, s, p).unwrap();
        let ow = conv_out_extent(w, kw, s, p).unwrap();
        let x: Vec<f64> = (0..cin * h * w).map(|i| (i as f64 * 0.7).cos()).collect();
        let c: Vec<f64> = (0..cin * kh * kw * oh * ow).map(|i| (i as f64 * 0.3).sin()).collect();
        let mut cols = vec![0.0; c.len()];
        im2col(&x, cin, h, w, kh, kw, s, p, oh, ow, &mut cols);
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im_add(&c, cin, h, w, kh, kw, s, p, oh, ow, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
