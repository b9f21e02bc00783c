//! Single-sample kernels on `[channels, height, width]` feature grids.
//!
//! Convolutions are stride 1 with "same" zero padding and run as
//! im2col + GEMM; the backward pass recomputes the column matrix instead of
//! caching it.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array3, ArrayView2, ArrayView3, ArrayView4};

use super::Scalar;

/// Unfolds `x` into a `[c*k*k, h*w]` matrix for a `k` x `k` kernel.
pub fn im2col<T: Scalar>(x: ArrayView3<T>, k: usize) -> Array2<T> {
    let (c, h, w) = x.dim();
    let pad = k / 2;
    let x = x.as_standard_layout();
    let src = x.as_slice().expect("standard layout");
    let plane = h * w;
    let mut cols = Array2::<T>::zeros((c * k * k, plane));
    let dst = cols.as_slice_mut().expect("fresh array");
    for ch in 0..c {
        let src_plane = &src[ch * plane..(ch + 1) * plane];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let out = &mut dst[row * plane..(row + 1) * plane];
                // valid output columns for this horizontal shift
                let x_lo = pad.saturating_sub(kj);
                let x_hi = (w + pad).saturating_sub(kj).min(w);
                for y in 0..h {
                    let sy = y + ki;
                    if sy < pad || sy - pad >= h || x_lo >= x_hi {
                        continue;
                    }
                    let sy = sy - pad;
                    let sx0 = x_lo + kj - pad;
                    out[y * w + x_lo..y * w + x_hi]
                        .copy_from_slice(&src_plane[sy * w + sx0..sy * w + sx0 + (x_hi - x_lo)]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds a column matrix back onto a `[c, h, w]` grid,
/// summing overlapping contributions.
pub fn col2im<T: Scalar>(cols: ArrayView2<T>, c: usize, h: usize, w: usize, k: usize) -> Array3<T> {
    let pad = k / 2;
    let plane = h * w;
    let cols = cols.as_standard_layout();
    let src = cols.as_slice().expect("standard layout");
    let mut out = Array3::<T>::zeros((c, h, w));
    let dst = out.as_slice_mut().expect("fresh array");
    for ch in 0..c {
        let dst_plane = &mut dst[ch * plane..(ch + 1) * plane];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let col = &src[row * plane..(row + 1) * plane];
                let x_lo = pad.saturating_sub(kj);
                let x_hi = (w + pad).saturating_sub(kj).min(w);
                for y in 0..h {
                    let sy = y + ki;
                    if sy < pad || sy - pad >= h || x_lo >= x_hi {
                        continue;
                    }
                    let sy = sy - pad;
                    let sx0 = x_lo + kj - pad;
                    let d = &mut dst_plane[sy * w + sx0..sy * w + sx0 + (x_hi - x_lo)];
                    for (d, &s) in d.iter_mut().zip(&col[y * w + x_lo..y * w + x_hi]) {
                        *d = *d + s;
                    }
                }
            }
        }
    }
    out
}

fn kernel_matrix<T: Scalar>(weight: ArrayView4<'_, T>) -> ArrayView2<'_, T> {
    let (cout, cin, k, _) = weight.dim();
    weight
        .into_shape_with_order((cout, cin * k * k))
        .expect("kernels are stored contiguously")
}

/// `[cin, h, w]` -> `[cout, h, w]` for a `[cout, cin, k, k]` kernel.
pub fn conv_forward<T: Scalar>(x: ArrayView3<T>, weight: ArrayView4<T>) -> Array3<T> {
    let (_, h, w) = x.dim();
    let (cout, cin, k, _) = weight.dim();
    debug_assert_eq!(x.dim().0, cin);
    let wm = kernel_matrix(weight);
    let mut out = Array2::<T>::zeros((cout, h * w));
    if k == 1 {
        let x = x.as_standard_layout();
        let xm = x.view().into_shape_with_order((cin, h * w)).expect("contiguous");
        general_mat_mul(T::one(), &wm, &xm, T::zero(), &mut out);
    } else {
        let cols = im2col(x, k);
        general_mat_mul(T::one(), &wm, &cols, T::zero(), &mut out);
    }
    out.into_shape_with_order((cout, h, w)).expect("sized above")
}

/// Gradients of a convolution for one sample: returns `(dx, dweight)` with
/// `dweight` shaped `[cout, cin*k*k]`.
pub fn conv_backward<T: Scalar>(
    x: ArrayView3<T>,
    weight: ArrayView4<T>,
    dy: ArrayView3<T>,
    need_dx: bool,
) -> (Option<Array3<T>>, Array2<T>) {
    let (cin, h, w) = x.dim();
    let (cout, _, k, _) = weight.dim();
    let wm = kernel_matrix(weight);
    let dy = dy.as_standard_layout();
    let dym = dy.view().into_shape_with_order((cout, h * w)).expect("contiguous");
    let mut dw = Array2::<T>::zeros((cout, cin * k * k));
    if k == 1 {
        let x = x.as_standard_layout();
        let xm = x.view().into_shape_with_order((cin, h * w)).expect("contiguous");
        general_mat_mul(T::one(), &dym, &xm.t(), T::zero(), &mut dw);
        let dx = need_dx.then(|| {
            let mut dx = Array2::<T>::zeros((cin, h * w));
            general_mat_mul(T::one(), &wm.t(), &dym, T::zero(), &mut dx);
            dx.into_shape_with_order((cin, h, w)).expect("sized above")
        });
        (dx, dw)
    } else {
        let cols = im2col(x, k);
        general_mat_mul(T::one(), &dym, &cols.t(), T::zero(), &mut dw);
        let dx = need_dx.then(|| {
            let mut dcols = Array2::<T>::zeros((cin * k * k, h * w));
            general_mat_mul(T::one(), &wm.t(), &dym, T::zero(), &mut dcols);
            col2im(dcols.view(), cin, h, w, k)
        });
        (dx, dw)
    }
}

/// 2x2 max-pool, stride 2. Also returns the winning offset (0..4, row-major
/// inside the window, first maximum wins) for every output cell.
pub fn maxpool2<T: Scalar>(x: ArrayView3<T>) -> (Array3<T>, Vec<u8>) {
    let (c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array3::<T>::zeros((c, oh, ow));
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let mut best = x[[ch, 2 * i, 2 * j]];
                let mut best_k = 0u8;
                for kk in 1..4u8 {
                    let v = x[[ch, 2 * i + (kk as usize >> 1), 2 * j + (kk as usize & 1)]];
                    if v > best {
                        best = v;
                        best_k = kk;
                    }
                }
                out[[ch, i, j]] = best;
                arg.push(best_k);
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward<T: Scalar>(dy: ArrayView3<T>, arg: &[u8], h: usize, w: usize) -> Array3<T> {
    let (c, oh, ow) = dy.dim();
    let mut dx = Array3::<T>::zeros((c, h, w));
    let mut idx = 0;
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let kk = arg[idx] as usize;
                idx += 1;
                dx[[ch, 2 * i + (kk >> 1), 2 * j + (kk & 1)]] = dy[[ch, i, j]];
            }
        }
    }
    dx
}

/// 2x2 pooling that takes the cell named by a previously recorded `arg`
/// instead of searching for the maximum.
pub fn maxpool2_gather<T: Scalar>(x: ArrayView3<T>, arg: &[u8]) -> Array3<T> {
    let (c, h, w) = x.dim();
    let mut idx = 0;
    Array3::from_shape_fn((c, h / 2, w / 2), |(ch, i, j)| {
        let kk = arg[idx] as usize;
        idx += 1;
        x[[ch, 2 * i + (kk >> 1), 2 * j + (kk & 1)]]
    })
}

/// 3x3 max-pool, stride 1, padding 1 (padding never wins). Returns the
/// flat in-plane index of the winner for every output cell.
pub fn maxpool3<T: Scalar>(x: ArrayView3<T>) -> (Array3<T>, Vec<u32>) {
    let (c, h, w) = x.dim();
    let mut out = Array3::<T>::zeros((c, h, w));
    let mut arg = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let mut best = T::neg_infinity();
                let mut best_at = 0u32;
                for y in i.saturating_sub(1)..(i + 2).min(h) {
                    for xx in j.saturating_sub(1)..(j + 2).min(w) {
                        let v = x[[ch, y, xx]];
                        if v > best {
                            best = v;
                            best_at = (y * w + xx) as u32;
                        }
                    }
                }
                out[[ch, i, j]] = best;
                arg.push(best_at);
            }
        }
    }
    (out, arg)
}

/// 3x3 pooling that reads the recorded winners `arg`.
pub fn maxpool3_gather<T: Scalar>(x: ArrayView3<T>, arg: &[u32]) -> Array3<T> {
    let (c, h, w) = x.dim();
    let plane = h * w;
    Array3::from_shape_fn((c, h, w), |(ch, i, j)| {
        let at = arg[ch * plane + i * w + j] as usize;
        x[[ch, at / w, at % w]]
    })
}

pub fn maxpool3_backward<T: Scalar>(dy: ArrayView3<T>, arg: &[u32]) -> Array3<T> {
    let (c, h, w) = dy.dim();
    let mut dx = Array3::<T>::zeros((c, h, w));
    let plane = h * w;
    let dst = dx.as_slice_mut().expect("fresh array");
    for (ch, (dy_plane, arg_plane)) in dy
        .outer_iter()
        .zip(arg.chunks(plane))
        .enumerate()
    {
        for (&g, &at) in dy_plane.iter().zip(arg_plane) {
            let d = &mut dst[ch * plane + at as usize];
            *d = *d + g;
        }
    }
    dx
}
