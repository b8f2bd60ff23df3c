//! Raw slice kernels shared by the forward and backward passes.
//!
//! Everything here is single-threaded with a fixed reduction order, so the
//! results are bit-reproducible for identical inputs.

use crate::scalar::Float;

#[inline]
fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = acc.iter().copied().sum::<T>();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        s += x * y;
    }
    s
}

#[inline]
fn axpy<T: Float>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// `c (m x n) = op(a) * op(b)`, added to `c` when `accumulate` is set.
///
/// `a` is `m x k` (or `k x m` when `ta`), `b` is `k x n` (or `n x k` when `tb`).
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Float>(
    ta: bool,
    tb: bool,
    m: usize,
    n: usize,
    k: usize,
    a: &[T],
    b: &[T],
    c: &mut [T],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if !accumulate {
        c.iter_mut().for_each(|v| *v = T::zero());
    }
    match (ta, tb) {
        (false, false) => {
            for i in 0..m {
                let crow = &mut c[i * n..(i + 1) * n];
                let arow = &a[i * k..(i + 1) * k];
                for (p, &aip) in arow.iter().enumerate() {
                    axpy(aip, &b[p * n..(p + 1) * n], crow);
                }
            }
        }
        (false, true) => {
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                for j in 0..n {
                    c[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
                }
            }
        }
        (true, false) => {
            for p in 0..k {
                let brow = &b[p * n..(p + 1) * n];
                let arow = &a[p * m..(p + 1) * m];
                for (i, &api) in arow.iter().enumerate() {
                    axpy(api, brow, &mut c[i * n..(i + 1) * n]);
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                for j in 0..n {
                    let mut s = T::zero();
                    for p in 0..k {
                        s += a[p * m + i] * b[j * k + p];
                    }
                    c[i * n + j] += s;
                }
            }
        }
    }
}

/// Geometry of a 2D convolution or pooling window sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Window {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn fits(&self) -> bool {
        self.stride > 0
            && self.k > 0
            && self.h + 2 * self.pad >= self.k
            && self.w + 2 * self.pad >= self.k
    }
}

/// Unfolds `channels x h x w` into `(channels*k*k) x (oh*ow)` columns.
pub fn im2col<T: Float>(x: &[T], channels: usize, win: Window, cols: &mut [T]) {
    let (oh, ow) = (win.out_h(), win.out_w());
    let (h, w, k, s, p) = (win.h, win.w, win.k, win.stride, win.pad);
    debug_assert_eq!(cols.len(), channels * k * k * oh * ow);
    for c in 0..channels {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * s + ky) as isize - p as isize;
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        drow.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - p as isize;
                        *d = if ix < 0 || ix >= w as isize {
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

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `x`.
pub fn col2im<T: Float>(cols: &[T], channels: usize, win: Window, x: &mut [T]) {
    let (oh, ow) = (win.out_h(), win.out_w());
    let (h, w, k, s, p) = (win.h, win.w, win.k, win.stride, win.pad);
    for c in 0..channels {
        let plane = &mut x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * s + kx) as isize - p as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Depth-wise (one input and one output channel per group) forward pass on
/// a single plane.
pub fn depthwise_plane<T: Float>(x: &[T], wk: &[T], win: Window, out: &mut [T]) {
    let (oh, ow) = (win.out_h(), win.out_w());
    let (h, w, k, s, p) = (win.h, win.w, win.k, win.stride, win.pad);
    for oy in 0..oh {
        for ox in 0..ow {
            let mut acc = T::zero();
            for ky in 0..k {
                let iy = (oy * s + ky) as isize - p as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * s + kx) as isize - p as isize;
                    if ix >= 0 && ix < w as isize {
                        acc += wk[ky * k + kx] * x[iy as usize * w + ix as usize];
                    }
                }
            }
            out[oy * ow + ox] += acc;
        }
    }
}

/// Backward of [`depthwise_plane`]: accumulates into `dx` and `dw`.
pub fn depthwise_plane_backward<T: Float>(
    x: &[T],
    wk: &[T],
    dout: &[T],
    win: Window,
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
) {
    let (oh, ow) = (win.out_h(), win.out_w());
    let (h, w, k, s, p) = (win.h, win.w, win.k, win.stride, win.pad);
    let mut dx = dx;
    let mut dw = dw;
    for oy in 0..oh {
        for ox in 0..ow {
            let g = dout[oy * ow + ox];
            for ky in 0..k {
                let iy = (oy * s + ky) as isize - p as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * s + kx) as isize - p as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let xi = iy as usize * w + ix as usize;
                    if let Some(dx) = dx.as_deref_mut() {
                        dx[xi] += g * wk[ky * k + kx];
                    }
                    if let Some(dw) = dw.as_deref_mut() {
                        dw[ky * k + kx] += g * x[xi];
                    }
                }
            }
        }
    }
}

/// Bilinear resampling taps along one axis (half-pixel centres, edge clamp).
#[derive(Clone, Debug, PartialEq)]
pub struct LinearTaps<T> {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub w_hi: Vec<T>,
}

impl<T: Float> LinearTaps<T> {
    pub fn new(src: usize, dst: usize) -> Self {
        let scale = src as f64 / dst as f64;
        let mut lo = Vec::with_capacity(dst);
        let mut hi = Vec::with_capacity(dst);
        let mut w_hi = Vec::with_capacity(dst);
        for d in 0..dst {
            let pos = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            lo.push(i0);
            hi.push(i1);
            w_hi.push(T::from_f64(pos - i0 as f64));
        }
        Self { lo, hi, w_hi }
    }
}

/// Resizes one `h x w` plane to `oh x ow`.
pub fn bilinear_plane<T: Float>(
    x: &[T],
    w: usize,
    ty: &LinearTaps<T>,
    tx: &LinearTaps<T>,
    out: &mut [T],
) {
    let ow = tx.lo.len();
    for (oy, ((&y0, &y1), &wy)) in ty.lo.iter().zip(&ty.hi).zip(&ty.w_hi).enumerate() {
        let r0 = &x[y0 * w..(y0 + 1) * w];
        let r1 = &x[y1 * w..(y1 + 1) * w];
        let wy0 = T::one() - wy;
        for (ox, ((&x0, &x1), &wx)) in tx.lo.iter().zip(&tx.hi).zip(&tx.w_hi).enumerate() {
            let wx0 = T::one() - wx;
            out[oy * ow + ox] =
                wy0 * (wx0 * r0[x0] + wx * r0[x1]) + wy * (wx0 * r1[x0] + wx * r1[x1]);
        }
    }
}

/// Adjoint of [`bilinear_plane`], accumulating into `dx`.
pub fn bilinear_plane_backward<T: Float>(
    dout: &[T],
    w: usize,
    ty: &LinearTaps<T>,
    tx: &LinearTaps<T>,
    dx: &mut [T],
) {
    let ow = tx.lo.len();
    for (oy, ((&y0, &y1), &wy)) in ty.lo.iter().zip(&ty.hi).zip(&ty.w_hi).enumerate() {
        let wy0 = T::one() - wy;
        for (ox, ((&x0, &x1), &wx)) in tx.lo.iter().zip(&tx.hi).zip(&tx.w_hi).enumerate() {
            let g = dout[oy * ow + ox];
            let wx0 = T::one() - wx;
            dx[y0 * w + x0] += g * wy0 * wx0;
            dx[y0 * w + x1] += g * wy0 * wx;
            dx[y1 * w + x0] += g * wy * wx0;
            dx[y1 * w + x1] += g * wy * wx;
        }
    }
}
