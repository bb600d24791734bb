//! Patch-matrix helpers shared by the convolution ops.
//!
//! All batched helpers use the column layout `[rows, n * spatial]`, where the
//! column index is `sample * spatial + position`.

use crate::scalar::Scalar;

/// Geometry of a strided, zero-padded square-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Output extent of a forward convolution over `len` input pixels.
    pub fn conv_out(len: usize, kernel: usize, stride: usize, pad: usize) -> usize {
        assert!(len + 2 * pad >= kernel, "kernel larger than padded input");
        (len + 2 * pad - kernel) / stride + 1
    }

    pub fn new(channels: usize, in_h: usize, in_w: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            channels,
            in_h,
            in_w,
            kernel,
            stride,
            pad,
            out_h: Self::conv_out(in_h, kernel, stride, pad),
            out_w: Self::conv_out(in_w, kernel, stride, pad),
        }
    }

    pub fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn out_spatial(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds `src` (NCHW, `n` samples) into a `[c*k*k, n*out_h*out_w]` matrix.
pub fn im2col<T: Scalar>(src: &[T], n: usize, g: &ConvGeom) -> Vec<T> {
    let (c, h, w, k) = (g.channels, g.in_h, g.in_w, g.kernel);
    let spatial = g.out_spatial();
    let cols = n * spatial;
    let mut out = vec![T::zero(); g.rows() * cols];
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst_row = &mut out[row * cols..(row + 1) * cols];
                for s in 0..n {
                    let plane = &src[(s * c + ci) * h * w..(s * c + ci + 1) * h * w];
                    for oi in 0..g.out_h {
                        let y = (oi * g.stride + ki) as isize - g.pad as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        let src_row = &plane[y as usize * w..(y as usize + 1) * w];
                        let base = s * spatial + oi * g.out_w;
                        for oj in 0..g.out_w {
                            let x = (oj * g.stride + kj) as isize - g.pad as isize;
                            if x >= 0 && x < w as isize {
                                dst_row[base + oj] = src_row[x as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: accumulates a column matrix back into NCHW `dst`.
pub fn col2im<T: Scalar>(col: &[T], n: usize, g: &ConvGeom, dst: &mut [T]) {
    let (c, h, w, k) = (g.channels, g.in_h, g.in_w, g.kernel);
    let spatial = g.out_spatial();
    let cols = n * spatial;
    assert_eq!(col.len(), g.rows() * cols);
    assert_eq!(dst.len(), n * c * h * w);
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src_row = &col[row * cols..(row + 1) * cols];
                for s in 0..n {
                    let plane = &mut dst[(s * c + ci) * h * w..(s * c + ci + 1) * h * w];
                    for oi in 0..g.out_h {
                        let y = (oi * g.stride + ki) as isize - g.pad as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        let base = s * spatial + oi * g.out_w;
                        let dst_row = &mut plane[y as usize * w..(y as usize + 1) * w];
                        for oj in 0..g.out_w {
                            let x = (oj * g.stride + kj) as isize - g.pad as isize;
                            if x >= 0 && x < w as isize {
                                dst_row[x as usize] += src_row[base + oj];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// NCHW -> `[c, n*h*w]`.
pub fn nchw_to_cm<T: Scalar>(src: &[T], n: usize, c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for s in 0..n {
        for ci in 0..c {
            let from = &src[(s * c + ci) * hw..(s * c + ci + 1) * hw];
            out[ci * n * hw + s * hw..ci * n * hw + (s + 1) * hw].copy_from_slice(from);
        }
    }
    out
}

/// `[c, n*h*w]` -> NCHW.
pub fn cm_to_nchw<T: Scalar>(src: &[T], n: usize, c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for s in 0..n {
        for ci in 0..c {
            out[(s * c + ci) * hw..(s * c + ci + 1) * hw]
                .copy_from_slice(&src[ci * n * hw + s * hw..ci * n * hw + (s + 1) * hw]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn im2col_and_col2im_are_adjoint() {
        // <im2col(x), y> == <x, col2im(y)>
        let g = ConvGeom::new(2, 5, 4, 3, 2, 1);
        let n = 2;
        let x: Vec<f64> = (0..n * 2 * 5 * 4).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let cols = im2col(&x, n, &g);
        let y: Vec<f64> = (0..cols.len()).map(|i| ((i * 3) % 5) as f64 - 2.0).collect();
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&y, n, &g, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn layout_round_trip() {
        let x: Vec<f32> = (0..3 * 2 * 6).map(|i| i as f32).collect();
        let cm = nchw_to_cm(&x, 3, 2, 6);
        assert_eq!(cm_to_nchw(&cm, 3, 2, 6), x);
    }

    #[test]
    fn same_padding_halves_with_stride_two() {
        assert_eq!(ConvGeom::conv_out(96, 5, 2, 2), 48);
        assert_eq!(ConvGeom::conv_out(96, 3, 2, 1), 48);
        assert_eq!(ConvGeom::conv_out(30, 3, 1, 1), 30);
    }
}
