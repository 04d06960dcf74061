//! Raw slice kernels used by both the forward and backward passes.

use crate::scalar::Scalar;

/// Splits `shape` around `axis` into `(outer, len, inner)` extents.
pub(crate) fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn matmul_acc<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m×k] += g[m×n] · b[k×n]ᵀ`
pub(crate) fn matmul_nt_acc<S: Scalar>(g: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = S::zero();
            for (&gv, &bv) in grow.iter().zip(brow) {
                acc += gv * bv;
            }
            c[i * k + p] += acc;
        }
    }
}

/// `c[k×n] += a[m×k]ᵀ · g[m×n]`
pub(crate) fn matmul_tn_acc<S: Scalar>(a: &[S], g: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &gv) in crow.iter_mut().zip(grow) {
                *cv += av * gv;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Output extent along one axis (floor convention), `None` when the
    /// kernel does not fit inside the padded input.
    pub fn out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = input + 2 * pad;
        if padded < kernel {
            return None;
        }
        Some((padded - kernel) / stride + 1)
    }

    #[inline]
    fn input_index(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }
}

/// Unfolds `x` into columns `[C·kh·kw × N·oh·ow]`; padding reads as zero.
fn im2col<S: Scalar>(g: &ConvGeom, x: &[S]) -> Vec<S> {
    let plane = g.oh * g.ow;
    let cols_n = g.n * plane;
    let mut cols = vec![S::zero(); g.c * g.kh * g.kw * cols_n];
    for c in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &mut cols[((c * g.kh + ky) * g.kw + kx) * cols_n..][..cols_n];
                for n in 0..g.n {
                    let xin = &x[(n * g.c + c) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.oh {
                        let Some(iy) = g.input_index(oy, ky, g.h) else { continue };
                        let dst = &mut row[n * plane + oy * g.ow..][..g.ow];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            if let Some(ix) = g.input_index(ox, kx, g.w) {
                                *d = xin[iy * g.w + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adds column gradients back onto the input gradient.
fn col2im_acc<S: Scalar>(g: &ConvGeom, cols: &[S], gx: &mut [S]) {
    let plane = g.oh * g.ow;
    let cols_n = g.n * plane;
    for c in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &cols[((c * g.kh + ky) * g.kw + kx) * cols_n..][..cols_n];
                for n in 0..g.n {
                    let gin = &mut gx[(n * g.c + c) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.oh {
                        let Some(iy) = g.input_index(oy, ky, g.h) else { continue };
                        let src = &row[n * plane + oy * g.ow..][..g.ow];
                        for (ox, &v) in src.iter().enumerate() {
                            if let Some(ix) = g.input_index(ox, kx, g.w) {
                                gin[iy * g.w + ix] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<S: Scalar>(g: &ConvGeom, x: &[S], w: &[S], b: &[S], out: &mut [S]) {
    let plane = g.oh * g.ow;
    let cols_n = g.n * plane;
    let ckk = g.c * g.kh * g.kw;
    let cols = im2col(g, x);
    let mut tmp = vec![S::zero(); g.o * cols_n];
    matmul_acc(w, &cols, &mut tmp, g.o, ckk, cols_n);
    for n in 0..g.n {
        for o in 0..g.o {
            let src = &tmp[o * cols_n + n * plane..][..plane];
            let dst = &mut out[(n * g.o + o) * plane..][..plane];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = v + b[o];
            }
        }
    }
}

/// Accumulates input, weight and bias gradients (any of which may be skipped).
pub(crate) fn conv2d_backward<S: Scalar>(
    g: &ConvGeom,
    x: &[S],
    w: &[S],
    grad_out: &[S],
    gx: Option<&mut [S]>,
    gw: Option<&mut [S]>,
    gb: Option<&mut [S]>,
) {
    let plane = g.oh * g.ow;
    let cols_n = g.n * plane;
    let ckk = g.c * g.kh * g.kw;
    let mut gt = vec![S::zero(); g.o * cols_n];
    for n in 0..g.n {
        for o in 0..g.o {
            gt[o * cols_n + n * plane..][..plane].copy_from_slice(&grad_out[(n * g.o + o) * plane..][..plane]);
        }
    }
    if let Some(gb) = gb {
        for o in 0..g.o {
            gb[o] += gt[o * cols_n..(o + 1) * cols_n].iter().copied().sum::<S>();
        }
    }
    if let Some(gw) = gw {
        let cols = im2col(g, x);
        matmul_nt_acc(&gt, &cols, gw, g.o, ckk, cols_n);
    }
    if let Some(gx) = gx {
        let mut gcols = vec![S::zero(); ckk * cols_n];
        matmul_tn_acc(w, &gt, &mut gcols, g.o, ckk, cols_n);
        col2im_acc(g, &gcols, gx);
    }
}
