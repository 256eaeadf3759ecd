//! Per-sample numeric kernels on flat slices (CHW layout).

use crate::scalar::{matmul, Scalar};

/// Window geometry of a square-kernel convolution over one CHW sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if h + 2 * pad < k || w + 2 * pad < k || stride == 0 {
            return None;
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        Some(Self {
            c,
            h,
            w,
            k,
            stride,
            pad,
            oh,
            ow,
        })
    }

    /// Rows of the column matrix: `c * k * k`.
    pub fn patch(&self) -> usize {
        self.c * self.k * self.k
    }

    /// Columns of the column matrix: `oh * ow`.
    pub fn positions(&self) -> usize {
        self.oh * self.ow
    }

    pub fn input_len(&self) -> usize {
        self.c * self.h * self.w
    }

    #[inline]
    fn source(&self, o: usize, kk: usize, limit: usize) -> Option<usize> {
        let i = (o * self.stride + kk) as isize - self.pad as isize;
        (i >= 0 && (i as usize) < limit).then_some(i as usize)
    }
}

/// Unfolds `x` into `cols` of shape `[c*k*k, oh*ow]`.
pub(crate) fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let p = g.positions();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for kh in 0..g.k {
            for kw in 0..g.k {
                let row = ((c * g.k + kh) * g.k + kw) * p;
                let dst = &mut cols[row..row + p];
                for oy in 0..g.oh {
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    match g.source(oy, kh, g.h) {
                        None => line.fill(T::zero()),
                        Some(iy) => {
                            let src = &plane[iy * g.w..(iy + 1) * g.w];
                            for (ox, v) in line.iter_mut().enumerate() {
                                *v = match g.source(ox, kw, g.w) {
                                    Some(ix) => src[ix],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Folds `cols` back onto `x`, accumulating overlapping windows.
pub(crate) fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], x: &mut [T]) {
    let p = g.positions();
    for c in 0..g.c {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for kh in 0..g.k {
            for kw in 0..g.k {
                let row = ((c * g.k + kh) * g.k + kw) * p;
                let src = &cols[row..row + p];
                for oy in 0..g.oh {
                    let Some(iy) = g.source(oy, kh, g.h) else {
                        continue;
                    };
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    for (ox, &v) in src[oy * g.ow..(oy + 1) * g.ow].iter().enumerate() {
                        if let Some(ix) = g.source(ox, kw, g.w) {
                            dst[ix] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Conv forward for one sample: `out[f, p] = sum w[f, :] * cols[:, p] + b[f]`.
pub(crate) fn conv_forward<T: Scalar>(
    g: &ConvGeom,
    filters: usize,
    x: &[T],
    weight: &[T],
    bias: &[T],
    cols: &mut [T],
    out: &mut [T],
) {
    im2col(g, x, cols);
    let p = g.positions();
    for (f, row) in out.chunks_mut(p).enumerate() {
        row.fill(bias[f]);
    }
    matmul(filters, g.patch(), p, weight, false, cols, false, out, true);
}

/// Transposed conv forward for one sample. `g` describes the strided conv
/// whose input is this layer's output; `x` has `g.oh * g.ow` positions.
pub(crate) fn conv_transpose_forward<T: Scalar>(
    g: &ConvGeom,
    in_channels: usize,
    x: &[T],
    weight: &[T],
    bias: &[T],
    scratch: &mut [T],
    out: &mut [T],
) {
    let p = g.positions();
    // weight is [in_channels, out_channels*k*k]; scratch = weight^T * x
    matmul(g.patch(), in_channels, p, weight, true, x, false, scratch, false);
    let plane = g.h * g.w;
    for (c, chunk) in out.chunks_mut(plane).enumerate() {
        chunk.fill(bias[c]);
    }
    col2im(g, scratch, out);
}

/// 2x2 stride-2 max pooling; writes the within-sample argmax of each window.
pub(crate) fn maxpool_forward<T: Scalar>(c: usize, h: usize, w: usize, x: &[T], out: &mut [T], argmax: &mut [u32]) {
    let (oh, ow) = (h / 2, w / 2);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                let o = (ch * oh + oy) * ow + ox;
                out[o] = x[best];
                argmax[o] = best as u32;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_keeps_size() {
        let g = ConvGeom::new(3, 224, 224, 3, 1, 1).unwrap();
        assert_eq!((g.oh, g.ow), (224, 224));
        let g = ConvGeom::new(3, 64, 64, 3, 2, 1).unwrap();
        assert_eq!((g.oh, g.ow), (32, 32));
    }

    #[test]
    fn im2col_then_col2im_counts_window_coverage() {
        // col2im(im2col(ones)) counts how many windows touch each pixel.
        let g = ConvGeom::new(1, 3, 3, 3, 1, 1).unwrap();
        let x = vec![1.0f64; 9];
        let mut cols = vec![0.0; g.patch() * g.positions()];
        im2col(&g, &x, &mut cols);
        let mut back = vec![0.0; 9];
        col2im(&g, &cols, &mut back);
        assert_eq!(back, vec![4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn maxpool_picks_window_maximum() {
        let x = [1.0f32, 5.0, 2.0, 0.0, 3.0, 4.0, 8.0, 7.0];
        let mut out = [0.0; 2];
        let mut arg = [0; 2];
        maxpool_forward(1, 2, 4, &x, &mut out, &mut arg);
        assert_eq!(out, [5.0, 8.0]);
        assert_eq!(arg, [1, 6]);
    }
}
