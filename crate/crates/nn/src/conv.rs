//! im2col/col2im kernels shared by convolution and transposed convolution.

use crate::float::{gemm, MatRef};
use crate::Float;

/// Spatial geometry of a 2-D convolution over an `in_h × in_w` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_h: usize,
    pub in_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    /// (top, bottom, left, right) zero padding.
    pub pad: (usize, usize, usize, usize),
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + self.pad.0 + self.pad.1 - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + self.pad.2 + self.pad.3 - self.kw) / self.stride + 1
    }

    pub fn valid(&self) -> bool {
        self.stride > 0
            && self.in_h + self.pad.0 + self.pad.1 >= self.kh
            && self.in_w + self.pad.2 + self.pad.3 >= self.kw
    }
}

/// Upper bound on im2col buffer elements; larger batches are processed in chunks.
const COL_BUDGET: usize = 1 << 22;

fn chunk_len(per_sample: usize, n: usize) -> usize {
    (COL_BUDGET / per_sample.max(1)).clamp(1, n.max(1))
}

/// Unfolds samples `n0..n1` of `x` (`[N, C, H, W]`) into a `[C*kh*kw, (n1-n0)*OH*OW]` matrix.
fn im2col<T: Float>(x: &[T], c: usize, g: &ConvGeom, n0: usize, n1: usize, cols: &mut Vec<T>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let ohw = oh * ow;
    let nb = n1 - n0;
    let l = nb * ohw;
    let hw = g.in_h * g.in_w;
    cols.clear();
    cols.resize(c * g.kh * g.kw * l, T::zero());
    for ci in 0..c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst_row = &mut cols[row * l..(row + 1) * l];
                for s in 0..nb {
                    let src = &x[((n0 + s) * c + ci) * hw..((n0 + s) * c + ci + 1) * hw];
                    let dst = &mut dst_row[s * ohw..(s + 1) * ohw];
                    for r in 0..oh {
                        let ih = (r * g.stride + ki) as isize - g.pad.0 as isize;
                        if ih < 0 || ih >= g.in_h as isize {
                            continue;
                        }
                        let src_row = &src[ih as usize * g.in_w..(ih as usize + 1) * g.in_w];
                        let drow = &mut dst[r * ow..(r + 1) * ow];
                        for (q, d) in drow.iter_mut().enumerate() {
                            let iw = (q * g.stride + kj) as isize - g.pad.2 as isize;
                            if iw >= 0 && iw < g.in_w as isize {
                                *d = src_row[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `cols` back into samples `n0..n1` of `x`.
fn col2im<T: Float>(cols: &[T], c: usize, g: &ConvGeom, n0: usize, n1: usize, x: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let ohw = oh * ow;
    let nb = n1 - n0;
    let l = nb * ohw;
    let hw = g.in_h * g.in_w;
    for ci in 0..c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src_row = &cols[row * l..(row + 1) * l];
                for s in 0..nb {
                    let dst = &mut x[((n0 + s) * c + ci) * hw..((n0 + s) * c + ci + 1) * hw];
                    let src = &src_row[s * ohw..(s + 1) * ohw];
                    for r in 0..oh {
                        let ih = (r * g.stride + ki) as isize - g.pad.0 as isize;
                        if ih < 0 || ih >= g.in_h as isize {
                            continue;
                        }
                        let base = ih as usize * g.in_w;
                        for q in 0..ow {
                            let iw = (q * g.stride + kj) as isize - g.pad.2 as isize;
                            if iw >= 0 && iw < g.in_w as isize {
                                dst[base + iw as usize] += src[r * ow + q];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gathers `[N, O, OHW]` rows of samples `n0..n1` into a `[O, nb*OHW]` matrix.
fn gather_out<T: Float>(y: &[T], o: usize, ohw: usize, n0: usize, n1: usize, mat: &mut Vec<T>) {
    let nb = n1 - n0;
    let l = nb * ohw;
    mat.clear();
    mat.resize(o * l, T::zero());
    for s in 0..nb {
        for oi in 0..o {
            let src = &y[((n0 + s) * o + oi) * ohw..((n0 + s) * o + oi + 1) * ohw];
            mat[oi * l + s * ohw..oi * l + (s + 1) * ohw].copy_from_slice(src);
        }
    }
}

fn scatter_out<T: Float>(mat: &[T], o: usize, ohw: usize, n0: usize, n1: usize, y: &mut [T]) {
    let l = (n1 - n0) * ohw;
    for s in 0..n1 - n0 {
        for oi in 0..o {
            let dst = &mut y[((n0 + s) * o + oi) * ohw..((n0 + s) * o + oi + 1) * ohw];
            for (d, &v) in dst.iter_mut().zip(&mat[oi * l + s * ohw..oi * l + (s + 1) * ohw]) {
                *d += v;
            }
        }
    }
}

/// Cross-correlation `y = w ⋆ x (+ b)`. `w` is `[O, C, kh, kw]`.
pub fn conv2d_forward<T: Float>(
    x: &[T],
    n: usize,
    c: usize,
    w: &[T],
    o: usize,
    bias: Option<&[T]>,
    g: &ConvGeom,
) -> Vec<T> {
    let ohw = g.out_h() * g.out_w();
    let k = c * g.kh * g.kw;
    let mut y = vec![T::zero(); n * o * ohw];
    let chunk = chunk_len(k * ohw, n);
    let mut cols = Vec::new();
    let mut out = Vec::new();
    let mut n0 = 0;
    while n0 < n {
        let n1 = (n0 + chunk).min(n);
        im2col(x, c, g, n0, n1, &mut cols);
        let l = (n1 - n0) * ohw;
        out.clear();
        out.resize(o * l, T::zero());
        gemm(MatRef::new(w, o, k), MatRef::new(&cols, k, l), T::zero(), &mut out);
        scatter_out(&out, o, ohw, n0, n1, &mut y);
        n0 = n1;
    }
    if let Some(b) = bias {
        for s in 0..n {
            for oi in 0..o {
                let bv = b[oi];
                for v in &mut y[(s * o + oi) * ohw..(s * o + oi + 1) * ohw] {
                    *v += bv;
                }
            }
        }
    }
    y
}

/// Gradients of [`conv2d_forward`]. Returns `(dx, dw, db)`; `dx` only when requested.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Float>(
    x: &[T],
    n: usize,
    c: usize,
    w: &[T],
    o: usize,
    g: &ConvGeom,
    dy: &[T],
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let ohw = g.out_h() * g.out_w();
    let k = c * g.kh * g.kw;
    let mut dw = vec![T::zero(); o * k];
    let mut db = vec![T::zero(); o];
    for s in 0..n {
        for (oi, d) in db.iter_mut().enumerate() {
            *d += dy[(s * o + oi) * ohw..(s * o + oi + 1) * ohw].iter().copied().sum();
        }
    }
    let mut dx = if need_dx {
        Some(vec![T::zero(); n * c * g.in_h * g.in_w])
    } else {
        None
    };
    let chunk = chunk_len(k * ohw, n);
    let mut cols = Vec::new();
    let mut dymat = Vec::new();
    let mut dcols = Vec::new();
    let mut n0 = 0;
    while n0 < n {
        let n1 = (n0 + chunk).min(n);
        let l = (n1 - n0) * ohw;
        gather_out(dy, o, ohw, n0, n1, &mut dymat);
        if need_dw {
            im2col(x, c, g, n0, n1, &mut cols);
            gemm(
                MatRef::new(&dymat, o, l),
                MatRef::t(&cols, k, l),
                T::one(),
                &mut dw,
            );
        }
        if let Some(dx) = dx.as_mut() {
            dcols.clear();
            dcols.resize(k * l, T::zero());
            gemm(
                MatRef::t(w, o, k),
                MatRef::new(&dymat, o, l),
                T::zero(),
                &mut dcols,
            );
            col2im(&dcols, c, g, n0, n1, dx);
        }
        n0 = n1;
    }
    (dx, dw, db)
}

/// Geometry of the convolution whose adjoint is a transposed convolution
/// with the given parameters, producing an `out_h × out_w` map.
pub fn transpose_geom(
    in_h: usize,
    in_w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> ConvGeom {
    assert!(out_pad <= pad && out_pad < stride, "unsupported output padding");
    let out_h = (in_h - 1) * stride + k + out_pad - 2 * pad;
    let out_w = (in_w - 1) * stride + k + out_pad - 2 * pad;
    // A conv over the output with this geometry maps back to in_h × in_w.
    ConvGeom {
        in_h: out_h,
        in_w: out_w,
        kh: k,
        kw: k,
        stride,
        pad: (pad, pad - out_pad, pad, pad - out_pad),
    }
}

/// Transposed convolution. `w` is `[Cin, Cout, k, k]`; `g` comes from [`transpose_geom`].
pub fn conv_transpose2d_forward<T: Float>(
    x: &[T],
    n: usize,
    cin: usize,
    w: &[T],
    cout: usize,
    bias: Option<&[T]>,
    g: &ConvGeom,
) -> Vec<T> {
    let hw = g.out_h() * g.out_w();
    let k = cout * g.kh * g.kw;
    let out_hw = g.in_h * g.in_w;
    let mut y = vec![T::zero(); n * cout * out_hw];
    let chunk = chunk_len(k * hw, n);
    let mut xmat = Vec::new();
    let mut cols = Vec::new();
    let mut n0 = 0;
    while n0 < n {
        let n1 = (n0 + chunk).min(n);
        let l = (n1 - n0) * hw;
        gather_out(x, cin, hw, n0, n1, &mut xmat);
        cols.clear();
        cols.resize(k * l, T::zero());
        gemm(MatRef::t(w, cin, k), MatRef::new(&xmat, cin, l), T::zero(), &mut cols);
        col2im(&cols, cout, g, n0, n1, &mut y);
        n0 = n1;
    }
    if let Some(b) = bias {
        for s in 0..n {
            for oi in 0..cout {
                let bv = b[oi];
                for v in &mut y[(s * cout + oi) * out_hw..(s * cout + oi + 1) * out_hw] {
                    *v += bv;
                }
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub fn conv_transpose2d_backward<T: Float>(
    x: &[T],
    n: usize,
    cin: usize,
    w: &[T],
    cout: usize,
    g: &ConvGeom,
    dy: &[T],
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let hw = g.out_h() * g.out_w();
    let k = cout * g.kh * g.kw;
    let out_hw = g.in_h * g.in_w;
    let mut dw = vec![T::zero(); cin * k];
    let mut db = vec![T::zero(); cout];
    for s in 0..n {
        for (oi, d) in db.iter_mut().enumerate() {
            *d += dy[(s * cout + oi) * out_hw..(s * cout + oi + 1) * out_hw]
                .iter()
                .copied()
                .sum();
        }
    }
    let mut dx = if need_dx {
        Some(vec![T::zero(); n * cin * hw])
    } else {
        None
    };
    let chunk = chunk_len(k * hw, n);
    let mut cols = Vec::new();
    let mut xmat = Vec::new();
    let mut dxmat = Vec::new();
    let mut n0 = 0;
    while n0 < n {
        let n1 = (n0 + chunk).min(n);
        let l = (n1 - n0) * hw;
        im2col(dy, cout, g, n0, n1, &mut cols);
        if need_dw {
            gather_out(x, cin, hw, n0, n1, &mut xmat);
            gemm(
                MatRef::new(&xmat, cin, l),
                MatRef::t(&cols, k, l),
                T::one(),
                &mut dw,
            );
        }
        if let Some(dx) = dx.as_mut() {
            dxmat.clear();
            dxmat.resize(cin * l, T::zero());
            gemm(MatRef::new(w, cin, k), MatRef::new(&cols, k, l), T::zero(), &mut dxmat);
            scatter_out(&dxmat, cin, hw, n0, n1, dx);
        }
        n0 = n1;
    }
    (dx, dw, db)
}
