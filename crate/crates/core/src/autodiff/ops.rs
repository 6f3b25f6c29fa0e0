//! Forward and backward kernels for the tape operations.
//!
//! Convolution-family ops accept `[C, H, W]` or batched `[N, C, H, W]`
//! inputs. Row-wise ops treat the last axis as features and every leading
//! axis as a batch of rows.

use std::f64::consts::PI;

use crate::scalar::Scalar;

use super::kernels::{nonzero_rows, shift_axpy, shift_dot};
use super::{AdError, Tensor};

pub(crate) struct ConvDims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

fn conv_dims(op: &'static str, shape: &[usize]) -> Result<ConvDims, AdError> {
    match *shape {
        [c, h, w] => Ok(ConvDims { n: 1, c, h, w }),
        [n, c, h, w] => Ok(ConvDims { n, c, h, w }),
        _ => Err(AdError::Dimension { op, lhs: shape.to_vec(), rhs: vec![] }),
    }
}

fn with_channels(shape: &[usize], c: usize, h: usize, w: usize) -> Vec<usize> {
    if shape.len() == 3 {
        vec![c, h, w]
    } else {
        vec![shape[0], c, h, w]
    }
}

fn check_kernel(
    op: &'static str,
    x: &Tensor<impl Scalar>,
    w: &Tensor<impl Scalar>,
    b: &Tensor<impl Scalar>,
    in_axis: usize,
    pad: usize,
) -> Result<(ConvDims, usize), AdError> {
    if pad != 1 {
        return Err(AdError::Contract(format!("{op}: only pad=1, stride=1 is supported, got pad={pad}")));
    }
    let d = conv_dims(op, x.shape())?;
    let ws = w.shape();
    if ws.len() != 4 || ws[2] != 3 || ws[3] != 3 || ws[in_axis] != d.c {
        return Err(AdError::Dimension { op, lhs: x.shape().to_vec(), rhs: ws.to_vec() });
    }
    let c_out = ws[1 - in_axis];
    if b.shape() != [c_out] {
        return Err(AdError::Dimension { op, lhs: ws.to_vec(), rhs: b.shape().to_vec() });
    }
    Ok((d, c_out))
}

/// Shift paired with kernel tap `(kh, kw)` when reading the input plane.
fn tap(kh: usize, kw: usize) -> (isize, isize) {
    (kh as isize - 1, kw as isize - 1)
}

/// Unfold one `[C, H, W]` input into `[C * 9, H * W]` patch rows; row
/// `ci * 9 + kh * 3 + kw` holds the input shifted by tap `(kh, kw)`.
fn im2col<S: Scalar>(x: &[S], c: usize, h: usize, w: usize, col: &mut [S]) {
    let plane = h * w;
    col.iter_mut().for_each(|v| *v = S::zero());
    for ci in 0..c {
        let src = &x[ci * plane..(ci + 1) * plane];
        for kh in 0..3 {
            for kw in 0..3 {
                let (dr, dc) = tap(kh, kw);
                let r = (ci * 9 + kh * 3 + kw) * plane;
                shift_axpy(&mut col[r..r + plane], src, S::one(), h, w, dr, dc, None);
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulate patch rows back onto the input grid.
fn col2im<S: Scalar>(col: &[S], c: usize, h: usize, w: usize, x: &mut [S]) {
    let plane = h * w;
    for ci in 0..c {
        let dst = &mut x[ci * plane..(ci + 1) * plane];
        for kh in 0..3 {
            for kw in 0..3 {
                let (dr, dc) = tap(kh, kw);
                let r = (ci * 9 + kh * 3 + kw) * plane;
                shift_axpy(dst, &col[r..r + plane], S::one(), h, w, -dr, -dc, None);
            }
        }
    }
}

/// 3x3 cross-correlation, `w` laid out `[C_out, C_in, 3, 3]`, computed as
/// one GEMM per sample over unfolded patches.
pub(crate) fn conv2d<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: &Tensor<S>,
    pad: usize,
) -> Result<Tensor<S>, AdError> {
    let (d, co_n) = check_kernel("conv2d", x, w, b, 1, pad)?;
    let plane = d.h * d.w;
    let kk = d.c * 9;
    let (xd, wd) = (x.data(), w.data());
    let mut out = vec![S::zero(); d.n * co_n * plane];
    let mut col = vec![S::zero(); kk * plane];
    for n in 0..d.n {
        im2col(&xd[n * d.c * plane..(n + 1) * d.c * plane], d.c, d.h, d.w, &mut col);
        let dst = &mut out[n * co_n * plane..(n + 1) * co_n * plane];
        for (co, row) in dst.chunks_mut(plane).enumerate() {
            row.iter_mut().for_each(|v| *v = b.data()[co]);
        }
        S::gemm(co_n, kk, plane, S::one(), wd, kk as isize, 1, &col, plane as isize, 1, S::one(), dst, plane as isize, 1);
    }
    Tensor::new(&with_channels(x.shape(), co_n, d.h, d.w), out)
}

pub(crate) struct KernelGrads<S> {
    pub x: Option<Tensor<S>>,
    pub w: Option<Tensor<S>>,
    pub b: Option<Tensor<S>>,
}

pub(crate) fn conv2d_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    gy: &Tensor<S>,
    need: [bool; 3],
) -> KernelGrads<S> {
    let d = conv_dims("conv2d", x.shape()).expect("validated in forward");
    let co_n = w.shape()[0];
    let plane = d.h * d.w;
    let kk = d.c * 9;
    let (xd, wd, gd) = (x.data(), w.data(), gy.data());
    let mut gx = need[0].then(|| vec![S::zero(); xd.len()]);
    let mut gw = need[1].then(|| vec![S::zero(); wd.len()]);
    let mut col = vec![S::zero(); kk * plane];
    for n in 0..d.n {
        let g = &gd[n * co_n * plane..(n + 1) * co_n * plane];
        if let Some(gw) = gw.as_mut() {
            im2col(&xd[n * d.c * plane..(n + 1) * d.c * plane], d.c, d.h, d.w, &mut col);
            // gW += gY col^T
            S::gemm(co_n, plane, kk, S::one(), g, plane as isize, 1, &col, 1, plane as isize, S::one(), gw, kk as isize, 1);
        }
        if let Some(gx) = gx.as_mut() {
            // gcol = W^T gY
            S::gemm(kk, co_n, plane, S::one(), wd, 1, kk as isize, g, plane as isize, 1, S::zero(), &mut col, plane as isize, 1);
            col2im(&col, d.c, d.h, d.w, &mut gx[n * d.c * plane..(n + 1) * d.c * plane]);
        }
    }
    KernelGrads {
        x: gx.map(|v| Tensor::new(x.shape(), v).expect("shape")),
        w: gw.map(|v| Tensor::new(w.shape(), v).expect("shape")),
        b: need[2].then(|| channel_sums(gd, d.n, co_n, plane)),
    }
}

fn channel_sums<S: Scalar>(g: &[S], n: usize, c: usize, plane: usize) -> Tensor<S> {
    let mut out = vec![S::zero(); c];
    for b in 0..n {
        for (ch, o) in out.iter_mut().enumerate() {
            *o += g[(b * c + ch) * plane..(b * c + ch + 1) * plane].iter().copied().sum::<S>();
        }
    }
    Tensor::from_vec(out)
}

/// Transposed 3x3 convolution; `w` is laid out `[C_in, C_out, 3, 3]`.
pub(crate) fn transpose_conv2d<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: &Tensor<S>,
    pad: usize,
) -> Result<Tensor<S>, AdError> {
    let (d, co_n) = check_kernel("transpose_conv2d", x, w, b, 0, pad)?;
    let plane = d.h * d.w;
    let (xd, wd) = (x.data(), w.data());
    let rows = nonzero_rows(xd, d.w);
    let mut out = vec![S::zero(); d.n * co_n * plane];
    for n in 0..d.n {
        for co in 0..co_n {
            let dst = &mut out[(n * co_n + co) * plane..(n * co_n + co + 1) * plane];
            dst.iter_mut().for_each(|v| *v = b.data()[co]);
            for ci in 0..d.c {
                let base = (n * d.c + ci) * plane;
                let src = &xd[base..base + plane];
                let src_rows = &rows[base / d.w..(base + plane) / d.w];
                for kh in 0..3 {
                    for kw in 0..3 {
                        let (dr, dc) = tap(kh, kw);
                        let a = wd[((ci * co_n + co) * 3 + kh) * 3 + kw];
                        shift_axpy(dst, src, a, d.h, d.w, -dr, -dc, Some(src_rows));
                    }
                }
            }
        }
    }
    Tensor::new(&with_channels(x.shape(), co_n, d.h, d.w), out)
}

pub(crate) fn transpose_conv2d_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    gy: &Tensor<S>,
    need: [bool; 3],
) -> KernelGrads<S> {
    let d = conv_dims("transpose_conv2d", x.shape()).expect("validated in forward");
    let co_n = w.shape()[1];
    let plane = d.h * d.w;
    let (xd, wd, gd) = (x.data(), w.data(), gy.data());
    let gx = need[0].then(|| {
        let mut gx = vec![S::zero(); xd.len()];
        for n in 0..d.n {
            for ci in 0..d.c {
                let dst = &mut gx[(n * d.c + ci) * plane..(n * d.c + ci + 1) * plane];
                for co in 0..co_n {
                    let src = &gd[(n * co_n + co) * plane..(n * co_n + co + 1) * plane];
                    for kh in 0..3 {
                        for kw in 0..3 {
                            let (dr, dc) = tap(kh, kw);
                            let a = wd[((ci * co_n + co) * 3 + kh) * 3 + kw];
                            shift_axpy(dst, src, a, d.h, d.w, dr, dc, None);
                        }
                    }
                }
            }
        }
        Tensor::new(x.shape(), gx).expect("shape")
    });
    let gw = need[1].then(|| {
        let rows = nonzero_rows(xd, d.w);
        let mut gw = vec![S::zero(); wd.len()];
        for n in 0..d.n {
            for ci in 0..d.c {
                let base = (n * d.c + ci) * plane;
                let src = &xd[base..base + plane];
                let src_rows = &rows[base / d.w..(base + plane) / d.w];
                for co in 0..co_n {
                    let g = &gd[(n * co_n + co) * plane..(n * co_n + co + 1) * plane];
                    for kh in 0..3 {
                        for kw in 0..3 {
                            let (dr, dc) = tap(kh, kw);
                            gw[((ci * co_n + co) * 3 + kh) * 3 + kw] +=
                                shift_dot(src, g, d.h, d.w, dr, dc, Some(src_rows));
                        }
                    }
                }
            }
        }
        Tensor::new(w.shape(), gw).expect("shape")
    });
    let gb = need[2].then(|| channel_sums(gd, d.n, co_n, plane));
    KernelGrads { x: gx, w: gw, b: gb }
}

/// `transpose_conv2d(max_unpool2d(x))` without materializing the unpooled
/// input: only the top-left position of each 2x2 block is nonzero, so each
/// input value scatters to the nine outputs around `(2i, 2j)`.
pub(crate) fn unpool_transpose_conv2d<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: &Tensor<S>,
    pad: usize,
) -> Result<Tensor<S>, AdError> {
    let (d, co_n) = check_kernel("unpool_transpose_conv2d", x, w, b, 0, pad)?;
    let (plane, oplane) = (d.h * d.w, 4 * d.h * d.w);
    let rows = co_n * 9;
    let (xd, wd) = (x.data(), w.data());
    let mut out = vec![S::zero(); d.n * co_n * oplane];
    let mut z = vec![S::zero(); rows * plane];
    for n in 0..d.n {
        // z[co * 9 + k] = sum_ci w[ci, co, k] x[ci]
        let xs = &xd[n * d.c * plane..(n + 1) * d.c * plane];
        S::gemm(rows, d.c, plane, S::one(), wd, 1, rows as isize, xs, plane as isize, 1, S::zero(), &mut z, plane as isize, 1);
        for co in 0..co_n {
            let dst = &mut out[(n * co_n + co) * oplane..(n * co_n + co + 1) * oplane];
            dst.iter_mut().for_each(|v| *v = b.data()[co]);
            for k in 0..9 {
                let r = (co * 9 + k) * plane;
                scatter_strided(dst, &z[r..r + plane], d.h, d.w, k / 3, k % 3);
            }
        }
    }
    Tensor::new(&with_channels(x.shape(), co_n, 2 * d.h, 2 * d.w), out)
}

/// Output row/column `2i + k - 1` for input index `i`; the valid input range.
fn strided_range(len: usize, k: usize) -> (usize, usize) {
    match k {
        0 => (1, len),
        _ => (0, len),
    }
}

/// `dst[2i + kh - 1, 2j + kw - 1] += src[i, j]` on a `2h x 2w` plane.
fn scatter_strided<S: Scalar>(dst: &mut [S], src: &[S], h: usize, w: usize, kh: usize, kw: usize) {
    let ow = 2 * w;
    let (i0, i1) = strided_range(h, kh);
    let (j0, j1) = strided_range(w, kw);
    for i in i0..i1 {
        let r = 2 * i + kh - 1;
        let row = &mut dst[r * ow..(r + 1) * ow];
        let s = &src[i * w..(i + 1) * w];
        for j in j0..j1 {
            row[2 * j + kw - 1] += s[j];
        }
    }
}

/// `dst[i, j] = g[2i + kh - 1, 2j + kw - 1]`, zero where out of range.
fn gather_strided<S: Scalar>(dst: &mut [S], g: &[S], h: usize, w: usize, kh: usize, kw: usize) {
    let ow = 2 * w;
    let (i0, i1) = strided_range(h, kh);
    let (j0, j1) = strided_range(w, kw);
    dst.iter_mut().for_each(|v| *v = S::zero());
    for i in i0..i1 {
        let r = 2 * i + kh - 1;
        let row = &g[r * ow..(r + 1) * ow];
        let d = &mut dst[i * w..(i + 1) * w];
        for j in j0..j1 {
            d[j] = row[2 * j + kw - 1];
        }
    }
}

pub(crate) fn unpool_transpose_conv2d_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    gy: &Tensor<S>,
    need: [bool; 3],
) -> KernelGrads<S> {
    let d = conv_dims("unpool_transpose_conv2d", x.shape()).expect("validated in forward");
    let co_n = w.shape()[1];
    let (plane, oplane) = (d.h * d.w, 4 * d.h * d.w);
    let rows = co_n * 9;
    let (xd, wd, gd) = (x.data(), w.data(), gy.data());
    let mut gx = need[0].then(|| vec![S::zero(); xd.len()]);
    let mut gw = need[1].then(|| vec![S::zero(); wd.len()]);
    let mut gcol = vec![S::zero(); rows * plane];
    if gx.is_some() || gw.is_some() {
        for n in 0..d.n {
            for co in 0..co_n {
                let g = &gd[(n * co_n + co) * oplane..(n * co_n + co + 1) * oplane];
                for k in 0..9 {
                    let r = (co * 9 + k) * plane;
                    gather_strided(&mut gcol[r..r + plane], g, d.h, d.w, k / 3, k % 3);
                }
            }
            let xs = &xd[n * d.c * plane..(n + 1) * d.c * plane];
            if let Some(gw) = gw.as_mut() {
                // gw[ci, co*9+k] += x[ci] . gcol[co*9+k]
                S::gemm(d.c, plane, rows, S::one(), xs, plane as isize, 1, &gcol, 1, plane as isize, S::one(), gw, rows as isize, 1);
            }
            if let Some(gx) = gx.as_mut() {
                let dst = &mut gx[n * d.c * plane..(n + 1) * d.c * plane];
                S::gemm(d.c, rows, plane, S::one(), wd, rows as isize, 1, &gcol, plane as isize, 1, S::zero(), dst, plane as isize, 1);
            }
        }
    }
    KernelGrads {
        x: gx.map(|v| Tensor::new(x.shape(), v).expect("shape")),
        w: gw.map(|v| Tensor::new(w.shape(), v).expect("shape")),
        b: need[2].then(|| channel_sums(gd, d.n, co_n, oplane)),
    }
}

/// 2x2 max pooling. Returns the pooled tensor and, per output element, the
/// flat index of the winning input element. Ties go to the first element in
/// row-major scan order.
pub(crate) fn max_pool2d<S: Scalar>(x: &Tensor<S>) -> Result<(Tensor<S>, Vec<usize>), AdError> {
    let d = conv_dims("max_pool2d", x.shape())?;
    if d.h % 2 != 0 || d.w % 2 != 0 {
        return Err(AdError::Dimension { op: "max_pool2d", lhs: x.shape().to_vec(), rhs: vec![2, 2] });
    }
    let (oh, ow) = (d.h / 2, d.w / 2);
    let xd = x.data();
    let mut out = Vec::with_capacity(d.n * d.c * oh * ow);
    let mut idx = Vec::with_capacity(out.capacity());
    for p in 0..d.n * d.c {
        let base = p * d.h * d.w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + 2 * i * d.w + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let k = base + (2 * i + di) * d.w + 2 * j + dj;
                    if xd[k] > xd[best] {
                        best = k;
                    }
                }
                out.push(xd[best]);
                idx.push(best);
            }
        }
    }
    Ok((Tensor::new(&with_channels(x.shape(), d.c, oh, ow), out)?, idx))
}

/// Fixed-position unpooling: each value lands at the top-left of its 2x2 block.
pub(crate) fn max_unpool2d<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>, AdError> {
    let d = conv_dims("max_unpool2d", x.shape())?;
    let (oh, ow) = (2 * d.h, 2 * d.w);
    let mut out = vec![S::zero(); d.n * d.c * oh * ow];
    for (k, &v) in x.data().iter().enumerate() {
        let (p, r) = (k / (d.h * d.w), k % (d.h * d.w));
        let (i, j) = (r / d.w, r % d.w);
        out[p * oh * ow + 2 * i * ow + 2 * j] = v;
    }
    Tensor::new(&with_channels(x.shape(), d.c, oh, ow), out)
}

pub(crate) fn max_unpool2d_backward<S: Scalar>(x_shape: &[usize], gy: &Tensor<S>) -> Tensor<S> {
    let d = conv_dims("max_unpool2d", x_shape).expect("validated in forward");
    let ow = 2 * d.w;
    let g = gy.data();
    Tensor::from_fn(x_shape, |k| {
        let (p, r) = (k / (d.h * d.w), k % (d.h * d.w));
        let (i, j) = (r / d.w, r % d.w);
        g[p * 4 * d.h * d.w + 2 * i * ow + 2 * j]
    })
}

/// Split a shape into (rows, features, shape without the feature axis).
pub(crate) fn rows_of(shape: &[usize]) -> (usize, usize, Vec<usize>) {
    match shape.split_last() {
        Some((&d, lead)) => (lead.iter().product(), d, lead.to_vec()),
        None => (1, 1, vec![]),
    }
}

/// `y = x w^T + b` for `x: [.., in]`, `w: [out, in]`, `b: [out]`.
pub(crate) fn dense<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: Option<&Tensor<S>>,
) -> Result<Tensor<S>, AdError> {
    let (n, k, lead) = rows_of(x.shape());
    let ws = w.shape();
    if x.rank() == 0 || ws.len() != 2 || ws[1] != k {
        return Err(AdError::Dimension { op: "dense", lhs: x.shape().to_vec(), rhs: ws.to_vec() });
    }
    let m = ws[0];
    if let Some(b) = b {
        if b.shape() != [m] {
            return Err(AdError::Dimension { op: "dense", lhs: ws.to_vec(), rhs: b.shape().to_vec() });
        }
    }
    let mut out = vec![S::zero(); n * m];
    if let Some(b) = b {
        for row in out.chunks_mut(m) {
            row.copy_from_slice(b.data());
        }
    }
    S::gemm(
        n,
        k,
        m,
        S::one(),
        x.data(),
        k as isize,
        1,
        w.data(),
        1,
        k as isize,
        S::one(),
        &mut out,
        m as isize,
        1,
    );
    let mut shape = lead;
    shape.push(m);
    Tensor::new(&shape, out)
}

pub(crate) fn dense_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    gy: &Tensor<S>,
    need: [bool; 3],
) -> KernelGrads<S> {
    let (n, k, _) = rows_of(x.shape());
    let m = w.shape()[0];
    let gx = need[0].then(|| {
        let mut gx = vec![S::zero(); n * k];
        S::gemm(n, m, k, S::one(), gy.data(), m as isize, 1, w.data(), k as isize, 1, S::zero(), &mut gx, k as isize, 1);
        Tensor::new(x.shape(), gx).expect("shape")
    });
    let gw = need[1].then(|| {
        let mut gw = vec![S::zero(); m * k];
        S::gemm(m, n, k, S::one(), gy.data(), 1, m as isize, x.data(), k as isize, 1, S::zero(), &mut gw, k as isize, 1);
        Tensor::new(w.shape(), gw).expect("shape")
    });
    let gb = need[2].then(|| {
        let mut gb = vec![S::zero(); m];
        for row in gy.data().chunks(m) {
            for (a, &g) in gb.iter_mut().zip(row) {
                *a += g;
            }
        }
        Tensor::from_vec(gb)
    });
    KernelGrads { x: gx, w: gw, b: gb }
}

pub(crate) fn softmax_rows<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let (_, d, _) = rows_of(x.shape());
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(d) {
        let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
        let mut z = S::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    Tensor::new(x.shape(), out).expect("shape")
}

pub(crate) fn log_softmax_rows<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let (_, d, _) = rows_of(x.shape());
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(d) {
        let mx = row.iter().copied().fold(S::neg_infinity(), S::max);
        let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<S>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    Tensor::new(x.shape(), out).expect("shape")
}

pub(crate) fn ln_2pi<S: Scalar>() -> S {
    S::lit((2.0 * PI).ln())
}

pub(crate) fn check_same(op: &'static str, a: &Tensor<impl Scalar>, b: &Tensor<impl Scalar>) -> Result<(), AdError> {
    if a.shape() != b.shape() {
        return Err(AdError::Dimension { op, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() });
    }
    Ok(())
}

/// Row-wise diagonal Gaussian log density; `var = None` means unit variance.
pub(crate) fn gaussian_log_prob<S: Scalar>(
    x: &Tensor<S>,
    mu: &Tensor<S>,
    var: Option<&Tensor<S>>,
) -> Result<Tensor<S>, AdError> {
    check_same("gaussian_log_prob", x, mu)?;
    if let Some(v) = var {
        check_same("gaussian_log_prob", x, v)?;
        if v.data().iter().any(|&s| !(s > S::zero())) {
            return Err(AdError::Domain {
                op: "gaussian_log_prob",
                msg: "variance must be strictly positive".into(),
            });
        }
    }
    let (_, d, lead) = rows_of(x.shape());
    let half = S::lit(0.5);
    let c = half * ln_2pi::<S>();
    let out: Vec<S> = x
        .data()
        .chunks(d)
        .zip(mu.data().chunks(d))
        .enumerate()
        .map(|(r, (xr, mr))| {
            let mut acc = S::zero();
            for i in 0..d {
                let diff = xr[i] - mr[i];
                acc += match var {
                    Some(v) => {
                        let vi = v.data()[r * d + i];
                        -c - half * vi.ln() - half * diff * diff / vi
                    }
                    None => -c - half * diff * diff,
                };
            }
            acc
        })
        .collect();
    Tensor::new(&lead, out)
}

/// Gradients of the row-wise Gaussian log density w.r.t. `(x, mu, var)`.
pub(crate) fn gaussian_log_prob_backward<S: Scalar>(
    x: &Tensor<S>,
    mu: &Tensor<S>,
    var: Option<&Tensor<S>>,
    gy: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>, Option<Tensor<S>>) {
    let (_, d, _) = rows_of(x.shape());
    let half = S::lit(0.5);
    let n = x.numel();
    let mut gx = vec![S::zero(); n];
    let mut gv = var.map(|_| vec![S::zero(); n]);
    for k in 0..n {
        let g = gy.data()[k / d];
        let diff = x.data()[k] - mu.data()[k];
        match var {
            Some(v) => {
                let vi = v.data()[k];
                gx[k] = -g * diff / vi;
                if let Some(gv) = gv.as_mut() {
                    gv[k] = g * (-half / vi + half * diff * diff / (vi * vi));
                }
            }
            None => gx[k] = -g * diff,
        }
    }
    let gmu = gx.iter().map(|&v| -v).collect();
    (
        Tensor::new(x.shape(), gx).expect("shape"),
        Tensor::new(x.shape(), gmu).expect("shape"),
        gv.map(|g| Tensor::new(x.shape(), g).expect("shape")),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: &[usize], k: usize) -> Tensor<f64> {
        Tensor::from_fn(shape, |i| ((i * k % 17) as f64 - 8.0) / 5.0)
    }

    #[test]
    fn fused_unpool_tconv_matches_composition() {
        let x = ramp(&[2, 3, 3, 4], 7);
        let w = ramp(&[3, 2, 3, 3], 5);
        let b = Tensor::from_vec(vec![0.25, -1.0]);
        let up = max_unpool2d(&x).unwrap();
        let plain = transpose_conv2d(&up, &w, &b, 1).unwrap();
        let fused = unpool_transpose_conv2d(&x, &w, &b, 1).unwrap();
        assert_eq!(plain.shape(), fused.shape());
        for (a, c) in plain.data().iter().zip(fused.data()) {
            assert!((a - c).abs() < 1e-12);
        }
        let gy = ramp(plain.shape(), 3);
        let gp = transpose_conv2d_backward(&up, &w, &gy, [true; 3]);
        let gf = unpool_transpose_conv2d_backward(&x, &w, &gy, [true; 3]);
        let gx_plain = max_unpool2d_backward(x.shape(), gp.x.as_ref().unwrap());
        for (a, c) in gx_plain.data().iter().zip(gf.x.unwrap().data()) {
            assert!((a - c).abs() < 1e-12);
        }
        for (a, c) in gp.w.unwrap().data().iter().zip(gf.w.unwrap().data()) {
            assert!((a - c).abs() < 1e-12);
        }
        assert_eq!(gp.b.unwrap(), gf.b.unwrap());
    }

    #[test]
    fn pool_rejects_odd_sizes() {
        let x = Tensor::<f64>::zeros(&[1, 3, 4]);
        assert!(matches!(max_pool2d(&x), Err(AdError::Dimension { .. })));
    }

    #[test]
    fn dense_rejects_inner_mismatch() {
        let x = Tensor::<f64>::zeros(&[3]);
        let w = Tensor::<f64>::zeros(&[2, 4]);
        let err = dense(&x, &w, None).unwrap_err();
        assert!(err.to_string().contains("[3]") && err.to_string().contains("[2, 4]"));
    }

    #[test]
    fn conv_rejects_other_padding() {
        let x = Tensor::<f64>::zeros(&[1, 4, 4]);
        let w = Tensor::<f64>::zeros(&[1, 1, 3, 3]);
        let b = Tensor::<f64>::zeros(&[1]);
        assert!(matches!(conv2d(&x, &w, &b, 0), Err(AdError::Contract(_))));
    }

    #[test]
    fn log_softmax_is_stable_for_large_inputs() {
        let x = Tensor::from_vec(vec![1000.0f64, 0.0]);
        let y = log_softmax_rows(&x);
        assert!((y.data()[0]).abs() < 1e-12);
        assert!((y.data()[1] + 1000.0).abs() < 1e-9);
    }
}
