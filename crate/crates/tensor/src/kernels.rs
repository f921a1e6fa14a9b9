//! Dense loops shared by forward and backward passes.
//!
//! Every reduction runs in a fixed, sequential order so results are
//! reproducible bit-for-bit and match naive reference loops.

use crate::scalar::Scalar;

/// `c[m,n] += a[m,k] · b[k,n]`.
pub(crate) fn gemm_nn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[k,n] += a[m,k]ᵀ · b[m,n]`.
pub(crate) fn gemm_tn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for r in 0..m {
        let arow = &a[r * k..(r + 1) * k];
        let brow = &b[r * n..(r + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m,k] += a[m,n] · b[k,n]ᵀ`.
pub(crate) fn gemm_nt<T: Scalar>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    let bt = transpose(k, n, b);
    gemm_nn(m, n, k, a, &bt, c);
}

pub(crate) fn transpose<T: Scalar>(rows: usize, cols: usize, src: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

/// Geometry of a 2-D convolution over channels-last maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub out_c: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.k_h * self.k_w * self.in_c
    }

    pub fn out_positions(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }
}

/// Unfolds `x[b,h,w,c]` into `cols[b·oh·ow, kh·kw·c]`, tap order (ky, kx, c).
pub(crate) fn im2col<T: Scalar>(g: &ConvGeom, x: &[T]) -> Vec<T> {
    let plen = g.patch_len();
    let mut cols = vec![T::zero(); g.out_positions() * plen];
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = (b * g.out_h + oy) * g.out_w + ox;
                let dst = &mut cols[row * plen..(row + 1) * plen];
                for ky in 0..g.k_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    for kx in 0..g.k_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                        if ix < 0 || ix >= g.in_w as isize {
                            continue;
                        }
                        let src = ((b * g.in_h + iy as usize) * g.in_w + ix as usize) * g.in_c;
                        let d = (ky * g.k_w + kx) * g.in_c;
                        dst[d..d + g.in_c].copy_from_slice(&x[src..src + g.in_c]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input map.
pub(crate) fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], gx: &mut [T]) {
    let plen = g.patch_len();
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = (b * g.out_h + oy) * g.out_w + ox;
                let src = &cols[row * plen..(row + 1) * plen];
                for ky in 0..g.k_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    for kx in 0..g.k_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                        if ix < 0 || ix >= g.in_w as isize {
                            continue;
                        }
                        let dst = ((b * g.in_h + iy as usize) * g.in_w + ix as usize) * g.in_c;
                        let s = (ky * g.k_w + kx) * g.in_c;
                        for (d, &v) in gx[dst..dst + g.in_c].iter_mut().zip(&src[s..s + g.in_c]) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

/// The four integer neighbours of a continuous point with their bilinear weights.
/// Coordinates that fall outside `[0, h) × [0, w)` are reported as `None`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct BilinearTaps<T> {
    pub idx: [Option<(usize, usize)>; 4],
    pub weight: [T; 4],
    /// ∂weight/∂y and ∂weight/∂x per corner.
    pub dy: [T; 4],
    pub dx: [T; 4],
}

pub(crate) fn bilinear_taps<T: Scalar>(py: T, px: T, h: usize, w: usize) -> BilinearTaps<T> {
    let y0 = py.floor();
    let x0 = px.floor();
    let fy = py - y0;
    let fx = px - x0;
    let one = T::one();
    let y0i = y0.as_f64() as i64;
    let x0i = x0.as_f64() as i64;
    let at = |y: i64, x: i64| {
        if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
            Some((y as usize, x as usize))
        } else {
            None
        }
    };
    BilinearTaps {
        idx: [
            at(y0i, x0i),
            at(y0i, x0i + 1),
            at(y0i + 1, x0i),
            at(y0i + 1, x0i + 1),
        ],
        weight: [(one - fy) * (one - fx), (one - fy) * fx, fy * (one - fx), fy * fx],
        dy: [-(one - fx), -fx, one - fx, fx],
        dx: [-(one - fy), one - fy, -fy, fy],
    }
}

/// Source-row plan for align-corners=false bilinear resizing along one axis.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct AxisPlan<T> {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<T>,
}

pub(crate) fn axis_plan<T: Scalar>(in_len: usize, out_len: usize) -> AxisPlan<T> {
    let scale = in_len as f64 / out_len as f64;
    let mut plan = AxisPlan {
        lo: Vec::with_capacity(out_len),
        hi: Vec::with_capacity(out_len),
        frac: Vec::with_capacity(out_len),
    };
    for o in 0..out_len {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let lo = (src.floor() as usize).min(in_len - 1);
        let hi = (lo + 1).min(in_len - 1);
        plan.lo.push(lo);
        plan.hi.push(hi);
        plan.frac.push(T::from_f64(src - lo as f64));
    }
    plan
}
