//! Forward and backward kernels on raw tensors. No tape bookkeeping here.

use super::{Shape, Tensor};
use crate::error::{Error, Result};
use crate::scalar::{gemm, Scalar};

/// `floor((size + 2 * padding - kernel) / stride) + 1`, or `None` when the
/// kernel does not fit.
pub fn conv_output_extent(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if kernel == 0 || stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

pub(crate) struct ConvGeometry {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: Shape, kernel: Shape, stride: usize, pad: usize) -> Result<Self> {
        if kernel[1] != input[1] || kernel[2] != kernel[3] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: input.to_vec(),
                right: kernel.to_vec(),
            });
        }
        if !(1..=2).contains(&stride) {
            return Err(Error::invalid("conv2d", format!("stride must be 1 or 2, got {stride}")));
        }
        let k = kernel[2];
        let out_h = conv_output_extent(input[2], k, stride, pad);
        let out_w = conv_output_extent(input[3], k, stride, pad);
        let (Some(out_h), Some(out_w)) = (out_h, out_w) else {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: input.to_vec(),
                right: kernel.to_vec(),
            });
        };
        Ok(ConvGeometry {
            in_c: input[1],
            in_h: input[2],
            in_w: input[3],
            out_c: kernel[0],
            k,
            stride,
            pad,
            out_h,
            out_w,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.in_c * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn im2col<S: Scalar>(&self, input: &[S], cols: &mut [S]) {
        let p = self.col_cols();
        for c in 0..self.in_c {
            let plane = &input[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let line = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        if iy < 0 || iy >= self.in_h as isize {
                            line.fill(S::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.in_w..(iy as usize + 1) * self.in_w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *v = if ix < 0 || ix >= self.in_w as isize {
                                S::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<S: Scalar>(&self, cols: &[S], grad_in: &mut [S]) {
        let p = self.col_cols();
        for c in 0..self.in_c {
            let plane = &mut grad_in[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.in_w..(iy as usize + 1) * self.in_w];
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.in_w as isize {
                                dst[ix as usize] += src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<S: Scalar>(
    input: &Tensor<S>,
    kernel: &Tensor<S>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<S>> {
    let g = ConvGeometry::new(input.shape(), kernel.shape(), stride, pad)?;
    let batch = input.shape()[0];
    let in_per = g.in_c * g.in_h * g.in_w;
    let p = g.col_cols();
    let mut out = Tensor::zeros([batch, g.out_c, g.out_h, g.out_w]);
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![S::zero(); g.col_rows() * p] };
    for b in 0..batch {
        let x = &input.data()[b * in_per..(b + 1) * in_per];
        let rhs: &[S] = if g.is_pointwise() {
            x
        } else {
            g.im2col(x, &mut cols);
            &cols
        };
        let y = &mut out.data_mut()[b * g.out_c * p..(b + 1) * g.out_c * p];
        gemm(false, false, g.out_c, p, g.col_rows(), kernel.data(), rhs, S::zero(), y);
    }
    Ok(out)
}

/// Returns `(grad_input, grad_kernel)`; `grad_input` is skipped when not needed.
pub(crate) fn conv2d_backward<S: Scalar>(
    input: &Tensor<S>,
    kernel: &Tensor<S>,
    grad_out: &[S],
    stride: usize,
    pad: usize,
    need_input_grad: bool,
) -> Result<(Option<Vec<S>>, Vec<S>)> {
    let g = ConvGeometry::new(input.shape(), kernel.shape(), stride, pad)?;
    let batch = input.shape()[0];
    let in_per = g.in_c * g.in_h * g.in_w;
    let p = g.col_cols();
    let rows = g.col_rows();
    let mut grad_k = vec![S::zero(); kernel.numel()];
    let mut grad_in = need_input_grad.then(|| vec![S::zero(); input.numel()]);
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![S::zero(); rows * p] };
    let mut gcols = vec![S::zero(); rows * p];
    for b in 0..batch {
        let x = &input.data()[b * in_per..(b + 1) * in_per];
        let gy = &grad_out[b * g.out_c * p..(b + 1) * g.out_c * p];
        let col: &[S] = if g.is_pointwise() {
            x
        } else {
            g.im2col(x, &mut cols);
            &cols
        };
        gemm(false, true, g.out_c, rows, p, gy, col, S::one(), &mut grad_k);
        if let Some(gi) = grad_in.as_mut() {
            let gi = &mut gi[b * in_per..(b + 1) * in_per];
            if g.is_pointwise() {
                gemm(true, false, rows, p, g.out_c, kernel.data(), gy, S::one(), gi);
            } else {
                gemm(true, false, rows, p, g.out_c, kernel.data(), gy, S::zero(), &mut gcols);
                g.col2im(&gcols, gi);
            }
        }
    }
    Ok((grad_in, grad_k))
}

pub(crate) fn upsample_forward<S: Scalar>(input: &Tensor<S>, factor: usize) -> Tensor<S> {
    let [b, c, h, w] = input.shape();
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Vec::with_capacity(b * c * oh * ow);
    for plane in input.data().chunks((h * w).max(1)).take(b * c) {
        for oy in 0..oh {
            let row = &plane[(oy / factor) * w..(oy / factor + 1) * w];
            for ox in 0..ow {
                out.push(row[ox / factor]);
            }
        }
    }
    Tensor::new([b, c, oh, ow], out).expect("upsample shape")
}

pub(crate) fn upsample_backward<S: Scalar>(input_shape: Shape, grad_out: &[S], factor: usize) -> Vec<S> {
    let [b, c, h, w] = input_shape;
    let (oh, ow) = (h * factor, w * factor);
    let mut grad = vec![S::zero(); b * c * h * w];
    for plane in 0..b * c {
        let src = &grad_out[plane * oh * ow..(plane + 1) * oh * ow];
        let dst = &mut grad[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                dst[(oy / factor) * w + ox / factor] += src[oy * ow + ox];
            }
        }
    }
    grad
}

/// A region in continuous feature-map coordinates (cell `j` spans `[j, j+1)`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoiBox {
    pub batch: usize,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

fn bin_range(start: f64, len: f64, bin: usize, bins: usize, extent: usize) -> Option<(usize, usize)> {
    let lo = start + len * bin as f64 / bins as f64;
    let hi = start + len * (bin + 1) as f64 / bins as f64;
    let first = lo.floor();
    let mut last = hi.ceil() - 1.0;
    if last < first {
        last = first;
    }
    let first = first.max(0.0);
    let last = last.min(extent as f64 - 1.0);
    (first <= last).then_some((first as usize, last as usize + 1))
}

/// Max-pools each RoI into an `out_h x out_w` grid. Returns the pooled
/// `R x C x out_h x out_w` tensor, the flat input index chosen for every
/// output (or `None` for empty bins, which output zero), and a per-RoI flag
/// set when the RoI misses the feature map entirely.
pub(crate) fn roi_pool_forward<S: Scalar>(
    input: &Tensor<S>,
    rois: &[RoiBox],
    out_h: usize,
    out_w: usize,
) -> Result<(Tensor<S>, Vec<Option<usize>>, Vec<bool>)> {
    let [batch, c, h, w] = input.shape();
    let mut out = Vec::with_capacity(rois.len() * c * out_h * out_w);
    let mut argmax = Vec::with_capacity(out.capacity());
    let mut empty = Vec::with_capacity(rois.len());
    for roi in rois {
        if roi.batch >= batch {
            return Err(Error::invalid("roi_pool", format!("batch index {} out of range", roi.batch)));
        }
        if !(roi.x2 > roi.x1 && roi.y2 > roi.y1) {
            return Err(Error::invalid("roi_pool", format!("degenerate region {roi:?}")));
        }
        let misses = roi.x2 <= 0.0 || roi.y2 <= 0.0 || roi.x1 >= w as f64 || roi.y1 >= h as f64;
        empty.push(misses);
        for ch in 0..c {
            let plane_off = (roi.batch * c + ch) * h * w;
            let plane = &input.data()[plane_off..plane_off + h * w];
            for py in 0..out_h {
                let ys = if misses { None } else { bin_range(roi.y1, roi.y2 - roi.y1, py, out_h, h) };
                for px in 0..out_w {
                    let xs = if misses { None } else { bin_range(roi.x1, roi.x2 - roi.x1, px, out_w, w) };
                    match (ys, xs) {
                        (Some((y0, y1)), Some((x0, x1))) => {
                            let mut best = y0 * w + x0;
                            for y in y0..y1 {
                                for x in x0..x1 {
                                    let i = y * w + x;
                                    if plane[i] > plane[best] {
                                        best = i;
                                    }
                                }
                            }
                            out.push(plane[best]);
                            argmax.push(Some(plane_off + best));
                        }
                        _ => {
                            out.push(S::zero());
                            argmax.push(None);
                        }
                    }
                }
            }
        }
    }
    let t = Tensor::new([rois.len(), c, out_h, out_w], out)?;
    Ok((t, argmax, empty))
}
