//! Spatial kernels: im2col convolution and max pooling over `B×C×H×W`.

use super::gemm;
use crate::error::{Error, Result};
use crate::scalar::{shape_str, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], kernels: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let (&[b, c, h, w], &[f, kc, kh, kw]) = (input, kernels) else {
            return Err(Error::Dimension(format!(
                "conv2d expects B×C×H×W input and F×C×kH×kW kernels, got {} and {}",
                shape_str(input),
                shape_str(kernels)
            )));
        };
        if stride == 0 {
            return Err(Error::Dimension("conv2d stride must be positive".into()));
        }
        if kc != c {
            return Err(Error::Dimension(format!(
                "conv2d channel mismatch: input {} vs kernels {}",
                shape_str(input),
                shape_str(kernels)
            )));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::Dimension(format!(
                "conv2d kernel {kh}×{kw} larger than padded input {}×{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        Ok(Self {
            batch: b,
            channels: c,
            height: h,
            width: w,
            filters: f,
            kh,
            kw,
            stride,
            padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.filters, self.out_h, self.out_w]
    }

    fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Unfolds one image into columns `offset..offset + out_pixels` of a
    /// `patch_len × ld` column matrix.
    fn im2col<T: Scalar>(&self, image: &[T], cols: &mut [T], ld: usize, offset: usize) {
        let (s, p) = (self.stride as isize, self.padding as isize);
        let npix = self.out_pixels();
        for c in 0..self.channels {
            let plane = &image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * ld + offset..row * ld + offset + npix];
                    for oy in 0..self.out_h {
                        let iy = oy as isize * s + ki as isize - p;
                        let line = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        if iy < 0 || iy >= self.height as isize {
                            line.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.width..(iy as usize + 1) * self.width];
                        if s == 1 {
                            let (lo, hi) = self.valid_span(kj);
                            line[..lo].fill(T::zero());
                            line[hi..].fill(T::zero());
                            let first = (lo as isize + kj as isize - p) as usize;
                            line[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                            continue;
                        }
                        for (ox, d) in line.iter_mut().enumerate() {
                            let ix = ox as isize * s + kj as isize - p;
                            *d = if ix < 0 || ix >= self.width as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Output columns `lo..hi` whose input column is in bounds (stride 1).
    fn valid_span(&self, kj: usize) -> (usize, usize) {
        let p = self.padding;
        let lo = p.saturating_sub(kj).min(self.out_w);
        let hi = (self.width + p).saturating_sub(kj).min(self.out_w).max(lo);
        (lo, hi)
    }

    /// Adjoint of [`im2col`](Self::im2col): accumulates columns into an image.
    fn col2im<T: Scalar>(&self, cols: &[T], ld: usize, offset: usize, image: &mut [T]) {
        let (s, p) = (self.stride as isize, self.padding as isize);
        let npix = self.out_pixels();
        for c in 0..self.channels {
            let plane = &mut image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * ld + offset..row * ld + offset + npix];
                    for oy in 0..self.out_h {
                        let iy = oy as isize * s + ki as isize - p;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.width..(iy as usize + 1) * self.width];
                        let line = &src[oy * self.out_w..(oy + 1) * self.out_w];
                        if s == 1 {
                            let (lo, hi) = self.valid_span(kj);
                            let first = (lo as isize + kj as isize - p) as usize;
                            for (d, &v) in dst[first..first + hi - lo].iter_mut().zip(&line[lo..hi]) {
                                *d += v;
                            }
                            continue;
                        }
                        for ox in 0..self.out_w {
                            let ix = ox as isize * s + kj as isize - p;
                            if ix >= 0 && ix < self.width as isize {
                                dst[ix as usize] += src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Column-matrix budget (elements) for one group of images.
const COLS_BUDGET: usize = 1 << 18;

impl ConvGeom {
    fn group_size(&self) -> usize {
        (COLS_BUDGET / (self.patch_len() * self.out_pixels()).max(1)).clamp(1, self.batch.max(1))
    }

    /// Fills `cols` (`patch_len × n·out_pixels`) for images `b0..b0 + n`.
    fn unfold_group<T: Scalar>(&self, input: &[T], b0: usize, n: usize, cols: &mut [T]) {
        let (il, npix) = (self.image_len(), self.out_pixels());
        for j in 0..n {
            let b = b0 + j;
            self.im2col(&input[b * il..(b + 1) * il], cols, n * npix, j * npix);
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(g: &ConvGeom, input: &[T], kernels: &[T]) -> Vec<T> {
    let (plen, npix, f) = (g.patch_len(), g.out_pixels(), g.filters);
    let out_len = f * npix;
    let mut out = vec![T::zero(); g.batch * out_len];
    let group = g.group_size();
    let mut cols = vec![T::zero(); plen * group * npix];
    let mut tmp = vec![T::zero(); f * group * npix];
    for b0 in (0..g.batch).step_by(group) {
        let n = group.min(g.batch - b0);
        let ld = n * npix;
        g.unfold_group(input, b0, n, &mut cols);
        gemm(f, plen, ld, kernels, false, &cols[..plen * ld], false, &mut tmp[..f * ld], false);
        // tmp is F × (n·npix); scatter to n × F × npix.
        for j in 0..n {
            let dst = &mut out[(b0 + j) * out_len..(b0 + j + 1) * out_len];
            for fi in 0..f {
                dst[fi * npix..(fi + 1) * npix]
                    .copy_from_slice(&tmp[fi * ld + j * npix..fi * ld + (j + 1) * npix]);
            }
        }
    }
    out
}

/// Gradients of a convolution with respect to its input and/or kernels.
pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    input: &[T],
    kernels: &[T],
    grad_out: &[T],
    need_input: bool,
    need_kernels: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (plen, npix, f) = (g.patch_len(), g.out_pixels(), g.filters);
    let out_len = f * npix;
    let mut gin = need_input.then(|| vec![T::zero(); g.batch * g.image_len()]);
    let mut gk = need_kernels.then(|| vec![T::zero(); kernels.len()]);
    let group = g.group_size();
    let mut cols = vec![T::zero(); plen * group * npix];
    let mut gy = vec![T::zero(); f * group * npix];
    for b0 in (0..g.batch).step_by(group) {
        let n = group.min(g.batch - b0);
        let ld = n * npix;
        // gy: F × (n·npix) gathered from n × F × npix.
        for j in 0..n {
            let src = &grad_out[(b0 + j) * out_len..(b0 + j + 1) * out_len];
            for fi in 0..f {
                gy[fi * ld + j * npix..fi * ld + (j + 1) * npix]
                    .copy_from_slice(&src[fi * npix..(fi + 1) * npix]);
            }
        }
        let gy = &gy[..f * ld];
        if let Some(gk) = gk.as_mut() {
            g.unfold_group(input, b0, n, &mut cols);
            // gK[F, plen] += gy[F, ld] · colsᵀ
            gemm(f, ld, plen, gy, false, &cols[..plen * ld], true, gk, true);
        }
        if let Some(gin) = gin.as_mut() {
            // dcols[plen, ld] = Kᵀ[plen, F] · gy[F, ld]
            gemm(plen, f, ld, kernels, true, gy, false, &mut cols[..plen * ld], false);
            let il = g.image_len();
            for j in 0..n {
                let b = b0 + j;
                g.col2im(&cols, ld, j * npix, &mut gin[b * il..(b + 1) * il]);
            }
        }
    }
    (gin, gk)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct PoolGeom {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub window: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl PoolGeom {
    pub fn new(input: &[usize], window: usize) -> Result<Self> {
        let &[b, c, h, w] = input else {
            return Err(Error::Dimension(format!(
                "maxpool2d expects B×C×H×W, got {}",
                shape_str(input)
            )));
        };
        if window == 0 || window > h || window > w {
            return Err(Error::Dimension(format!(
                "pool window {window} invalid for input {}",
                shape_str(input)
            )));
        }
        Ok(Self {
            batch: b,
            channels: c,
            height: h,
            width: w,
            window,
            out_h: h / window,
            out_w: w / window,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.channels, self.out_h, self.out_w]
    }
}

/// Non-overlapping max pooling; also returns the flat input index chosen
/// for every output cell (first maximum in row-major window order).
pub(crate) fn maxpool_forward<T: Scalar>(g: &PoolGeom, input: &[T]) -> (Vec<T>, Vec<usize>) {
    let n = g.batch * g.channels * g.out_h * g.out_w;
    let mut out = vec![T::zero(); n];
    let mut arg = vec![0usize; n];
    let (w, k) = (g.width, g.window);
    let mut o = 0;
    for plane in 0..g.batch * g.channels {
        let base = plane * g.height * w;
        for oy in 0..g.out_h {
            let row0 = base + oy * k * w;
            for ox in 0..g.out_w {
                let start = row0 + ox * k;
                let (mut best, mut best_i) = (input[start], start);
                for dy in 0..k {
                    let line = start + dy * w;
                    for (dx, &v) in input[line..line + k].iter().enumerate() {
                        let gt = v > best;
                        best_i = if gt { line + dx } else { best_i };
                        best = if gt { v } else { best };
                    }
                }
                out[o] = best;
                arg[o] = best_i;
                o += 1;
            }
        }
    }
    (out, arg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn stride_and_padding_output_size() {
        let g = ConvGeom::new(&[2, 3, 8, 8], &[4, 3, 3, 3], 2, 1).unwrap();
        assert_eq!(g.output_shape(), vec![2, 4, 4, 4]);
        let g = ConvGeom::new(&[1, 1, 28, 28], &[32, 1, 5, 5], 1, 0).unwrap();
        assert_eq!((g.out_h, g.out_w), (24, 24));
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        for (stride, pad) in [(2, 1), (1, 0), (1, 2)] {
            adjoint_case(stride, pad);
        }
    }

    fn adjoint_case(stride: usize, pad: usize) {
        let g = ConvGeom::new(&[1, 2, 5, 4], &[1, 2, 3, 2], stride, pad).unwrap();
        let x: Vec<f64> = (0..g.image_len()).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..g.patch_len() * g.out_pixels())
            .map(|i| (i as f64 * 0.11).cos())
            .collect();
        let mut cols = vec![0.0; y.len()];
        let npix = g.out_pixels();
        g.im2col(&x, &mut cols, npix, 0);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut img = vec![0.0; x.len()];
        g.col2im(&y, npix, 0, &mut img);
        let rhs: f64 = img.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn maxpool_picks_first_max() {
        let x = Tensor::<f64>::from_f64(vec![1, 1, 2, 2], &[1., 1., 0., 1.]).unwrap();
        let g = PoolGeom::new(x.shape(), 2).unwrap();
        let (v, arg) = maxpool_forward(&g, x.data());
        assert_eq!(v, vec![1.0]);
        assert_eq!(arg, vec![0]);
        let odd = PoolGeom::new(&[1, 1, 5, 5], 2).unwrap();
        assert_eq!(odd.output_shape(), vec![1, 1, 2, 2]);
    }
}
