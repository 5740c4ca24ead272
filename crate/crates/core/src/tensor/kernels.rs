//! Numerical kernels behind the tape operators.
//!
//! The 3x3 convolution lowers to im2col plus a blocked GEMM. Per output
//! element the reduction runs over k = (input channel, kernel row, kernel
//! column) in that order; the GEMM accumulates k sequentially, so repeated
//! runs on the same host produce bit-identical results.

use super::{Scalar, Shape, Tensor};
use crate::error::{Error, Result};

/// Fixed-coefficient square filter applied depthwise (same kernel on every
/// channel, zero-padded to keep the spatial size). Not trainable; SSIM uses
/// this for its Gaussian window.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterKernel<T> {
    size: usize,
    weights: Vec<T>,
}

impl<T: Scalar> FilterKernel<T> {
    pub fn new(size: usize, weights: Vec<T>) -> Result<Self> {
        if size == 0 || size.is_multiple_of(2) {
            return Err(Error::UnsupportedKernel(format!(
                "filter size must be odd and positive, got {size}"
            )));
        }
        if weights.len() != size * size {
            return Err(Error::shape(
                "FilterKernel::new",
                size * size,
                weights.len(),
            ));
        }
        Ok(FilterKernel { size, weights })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    /// 180-degree rotation, the adjoint kernel for zero-padded correlation.
    fn flipped(&self) -> FilterKernel<T> {
        let mut w = self.weights.clone();
        w.reverse();
        FilterKernel {
            size: self.size,
            weights: w,
        }
    }
}

/// Reusable im2col/transpose buffers. Convolutions run thousands of times
/// per training step; recycling these avoids a multi-megabyte allocation
/// and page-fault storm per call. Buffers are sized for one batch item so
/// the lowered matrix stays cache-warm between its build and the GEMM that
/// consumes it.
#[derive(Debug, Default)]
pub(crate) struct ConvScratch<T> {
    col: Vec<T>,
    col_t: Vec<T>,
    dcol: Vec<T>,
}

impl<T: Scalar> ConvScratch<T> {
    pub(crate) fn new() -> Self {
        ConvScratch::default()
    }
}

fn ensure_len<T: Scalar>(buf: &mut Vec<T>, len: usize) -> &mut [T] {
    if buf.len() < len {
        buf.resize(len, T::zero());
    }
    &mut buf[..len]
}

/// Checks the conv operand shapes and returns (n, ci, h, w, co).
pub(crate) fn conv3x3_check<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<(usize, usize, usize, usize, usize)> {
    let is = input.shape();
    let ws = weight.shape();
    if ws.h != 3 || ws.w != 3 {
        return Err(Error::UnsupportedKernel(format!(
            "conv2d supports 3x3 kernels only, got {}x{}",
            ws.h, ws.w
        )));
    }
    if ws.c != is.c {
        return Err(Error::shape(
            "conv2d input channels",
            ws.c,
            format!("{} (input {is}, weight {ws})", is.c),
        ));
    }
    if let Some(b) = bias {
        let bs = b.shape();
        if bs.n != 1 || bs.c != ws.n || bs.h != 1 || bs.w != 1 {
            return Err(Error::shape(
                "conv2d bias",
                format!("(1,{},1,1)", ws.n),
                bs,
            ));
        }
    }
    Ok((is.n, is.c, is.h, is.w, ws.n))
}

/// Writes the im2col matrix for one batch item: K = ci*9 rows, h*w columns.
/// Row r = (i*9 + ky*3 + kx) holds the zero-padded input plane i shifted by
/// (ky-1, kx-1). Interior spans are bulk copies.
fn im2col_item<T: Scalar>(input: &Tensor<T>, item: usize, col: &mut [T]) {
    let Shape { c: ci, h, w, .. } = input.shape();
    let hw = h * w;
    debug_assert_eq!(col.len(), ci * 9 * hw);
    let data = input.data();
    let base = item * ci * hw;
    for i in 0..ci {
        let plane = &data[base + i * hw..base + (i + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[(i * 9 + ky * 3 + kx) * hw..(i * 9 + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let dst = &mut row[y * w..(y + 1) * w];
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            dst[0] = T::zero();
                            dst[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => dst.copy_from_slice(src),
                        _ => {
                            dst[..w - 1].copy_from_slice(&src[1..]);
                            dst[w - 1] = T::zero();
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of `im2col_item`: scatter-adds a K x hw matrix back into the
/// gradient plane of one batch item. Sequential row order keeps the
/// accumulation order fixed.
fn col2im_add_item<T: Scalar>(col: &[T], grad_input: &mut Tensor<T>, item: usize) {
    let Shape { c: ci, h, w, .. } = grad_input.shape();
    let hw = h * w;
    let base = item * ci * hw;
    let data = grad_input.data_mut();
    for i in 0..ci {
        let plane = &mut data[base + i * hw..base + (i + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[(i * 9 + ky * 3 + kx) * hw..(i * 9 + ky * 3 + kx + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            for x in 1..w {
                                dst[x - 1] += src[x];
                            }
                        }
                        1 => {
                            for x in 0..w {
                                dst[x] += src[x];
                            }
                        }
                        _ => {
                            for x in 0..w - 1 {
                                dst[x + 1] += src[x];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 3x3 convolution, zero padding 1, stride 1; spatial size is preserved.
pub(crate) fn conv3x3_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    scratch: &mut ConvScratch<T>,
) -> Result<Tensor<T>> {
    let (n, ci, h, w, co) = conv3x3_check(input, weight, bias)?;
    let hw = h * w;
    let k = ci * 9;
    let mut out = Tensor::zeros(Shape::new(n, co, h, w));
    let col = ensure_len(&mut scratch.col, k * hw);
    for item in 0..n {
        im2col_item(input, item, col);
        let out_item = &mut out.data_mut()[item * co * hw..(item + 1) * co * hw];
        // weight (co,ci,3,3) is row-major co x k, matching the col row order.
        unsafe {
            T::gemm(
                co,
                k,
                hw,
                T::one(),
                weight.data().as_ptr(),
                k as isize,
                1,
                col.as_ptr(),
                hw as isize,
                1,
                T::zero(),
                out_item.as_mut_ptr(),
                hw as isize,
                1,
            );
        }
        if let Some(b) = bias {
            for o in 0..co {
                let bv = b.data()[o];
                for v in &mut out_item[o * hw..(o + 1) * hw] {
                    *v += bv;
                }
            }
        }
    }
    Ok(out)
}

/// Transpose of a rows x cols row-major matrix into `out` (cols x rows),
/// in 8x8 micro-tiles with scalar edges. The GEMM packs strided operands
/// slowly; handing it a row-major right-hand side is cheaper even counting
/// this pass.
fn transpose_into<T: Scalar>(src: &[T], rows: usize, cols: usize, out: &mut [T]) {
    const B: usize = 8;
    debug_assert_eq!(src.len(), rows * cols);
    debug_assert_eq!(out.len(), rows * cols);
    let rb_end = rows - rows % B;
    let cb_end = cols - cols % B;
    for rb in (0..rb_end).step_by(B) {
        for cb in (0..cb_end).step_by(B) {
            // Tile bounds are checked above; unchecked access lets the
            // 8-wide gather/scatter vectorize.
            unsafe {
                for c in cb..cb + B {
                    let base = c * rows + rb;
                    let sp = src.as_ptr().add(rb * cols + c);
                    for r in 0..B {
                        *out.as_mut_ptr().add(base + r) = *sp.add(r * cols);
                    }
                }
            }
        }
    }
    for r in 0..rows {
        let (c0, c1) = if r < rb_end { (cb_end, cols) } else { (0, cols) };
        for c in c0..c1 {
            out[c * rows + r] = src[r * cols + c];
        }
    }
}

/// Gradient triple (d_input, d_weight, d_bias); entries the caller did not
/// request are None.
pub(crate) type ConvGrads<T> = (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>);

/// Gradients of the 3x3 convolution, computing only the requested entries.
pub(crate) fn conv3x3_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
    scratch: &mut ConvScratch<T>,
) -> Result<ConvGrads<T>> {
    let (n, ci, h, w, co) = conv3x3_check(input, weight, None)?;
    let hw = h * w;
    let k = ci * 9;

    let mut d_input = need_input.then(|| Tensor::zeros(input.shape()));
    let mut d_weight = need_weight.then(|| Tensor::zeros(weight.shape()));
    let mut d_bias = need_bias.then(|| Tensor::zeros(Shape::new(1, co, 1, 1)));

    let ConvScratch { col, col_t, dcol } = scratch;
    let col = ensure_len(col, k * hw);
    let col_t = ensure_len(col_t, if need_weight { k * hw } else { 0 });
    let dcol = ensure_len(dcol, if need_input { k * hw } else { 0 });
    for item in 0..n {
        let go_item = &grad_out.data()[item * co * hw..(item + 1) * co * hw];
        if need_input {
            // dcol = W^T (k x co) * grad_out (co x hw)
            unsafe {
                T::gemm(
                    k,
                    co,
                    hw,
                    T::one(),
                    weight.data().as_ptr(),
                    1,
                    k as isize,
                    go_item.as_ptr(),
                    hw as isize,
                    1,
                    T::zero(),
                    dcol.as_mut_ptr(),
                    hw as isize,
                    1,
                );
            }
            col2im_add_item(dcol, d_input.as_mut().unwrap(), item);
        }
        if need_weight {
            im2col_item(input, item, col);
            transpose_into(col, k, hw, col_t);
            // dW += grad_out (co x hw) * col^T (hw x k), accumulated in
            // batch order.
            unsafe {
                T::gemm(
                    co,
                    hw,
                    k,
                    T::one(),
                    go_item.as_ptr(),
                    hw as isize,
                    1,
                    col_t.as_ptr(),
                    k as isize,
                    1,
                    T::one(),
                    d_weight.as_mut().unwrap().data_mut().as_mut_ptr(),
                    k as isize,
                    1,
                );
            }
        }
        if need_bias {
            let db = d_bias.as_mut().unwrap().data_mut();
            for o in 0..co {
                let mut acc = T::zero();
                for v in &go_item[o * hw..(o + 1) * hw] {
                    acc += *v;
                }
                db[o] += acc;
            }
        }
    }
    Ok((d_input, d_weight, d_bias))
}

/// Depthwise correlation with a fixed kernel, zero-padded to the same size.
pub(crate) fn filter_same_forward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &FilterKernel<T>,
) -> Tensor<T> {
    let Shape { n, c, h, w } = input.shape();
    let ks = kernel.size();
    let r = (ks / 2) as isize;
    let kw = kernel.weights();
    let mut out = Tensor::zeros(input.shape());
    let hw = h * w;
    for plane in 0..n * c {
        let src = &input.data()[plane * hw..(plane + 1) * hw];
        let dst = &mut out.data_mut()[plane * hw..(plane + 1) * hw];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = T::zero();
                for ky in 0..ks as isize {
                    let sy = y + ky - r;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let krow = &kw[(ky as usize) * ks..(ky as usize + 1) * ks];
                    let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                    for kx in 0..ks as isize {
                        let sx = x + kx - r;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        acc += krow[kx as usize] * srow[sx as usize];
                    }
                }
                dst[(y as usize) * w + x as usize] = acc;
            }
        }
    }
    out
}

/// Input gradient of `filter_same_forward`: correlation with the flipped
/// kernel under the same zero padding.
pub(crate) fn filter_same_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    kernel: &FilterKernel<T>,
) -> Tensor<T> {
    filter_same_forward(grad_out, &kernel.flipped())
}
