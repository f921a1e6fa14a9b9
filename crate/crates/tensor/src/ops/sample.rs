use crate::error::{invalid, mismatch, Result};
use crate::graph::{accumulate, Graph, Op, Var};
use crate::kernels::{axis_plan, bilinear_taps};
use crate::scalar::Scalar;

impl<T: Scalar> Graph<T> {
    /// Reads `x[b,h,w,c]` at continuous `(row, col)` points `points[b,n,2]`,
    /// giving `[b,n,c]`. Neighbours outside the map read as zero.
    pub fn bilinear_sample(&mut self, x: Var, points: Var) -> Result<Var> {
        let (sx, sp) = (self.shape(x).to_vec(), self.shape(points).to_vec());
        if sx.len() != 4 || sp.len() != 3 || sp[2] != 2 || sp[0] != sx[0] {
            return Err(mismatch("bilinear_sample", &sx, &sp));
        }
        let (batch, h, w, c) = (sx[0], sx[1], sx[2], sx[3]);
        let n = sp[1];
        let mut out = Vec::new();
        if self.computing() {
            out = vec![T::zero(); batch * n * c];
            let (xv, pv) = (self.val(x), self.val(points));
            for b in 0..batch {
                let plane = &xv[b * h * w * c..(b + 1) * h * w * c];
                for i in 0..n {
                    let p = (b * n + i) * 2;
                    let taps = bilinear_taps(pv[p], pv[p + 1], h, w);
                    let dst = &mut out[(b * n + i) * c..(b * n + i + 1) * c];
                    for (corner, wt) in taps.idx.iter().zip(taps.weight) {
                        let Some((yy, xx)) = corner else { continue };
                        let src = &plane[(yy * w + xx) * c..(yy * w + xx + 1) * c];
                        for (d, &v) in dst.iter_mut().zip(src) {
                            *d += wt * v;
                        }
                    }
                }
            }
        }
        self.push(vec![batch, n, c], out, Op::BilinearSample { x, points })
    }

    /// Bilinear resize of `x[b,h,w,c]` to `out_h × out_w`, align-corners=false.
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(invalid("resize_bilinear", format!("expected [b,h,w,c], got {sx:?}")));
        }
        if out_h == 0 || out_w == 0 {
            return Err(invalid("resize_bilinear", "output extents must be positive"));
        }
        let (batch, h, w, c) = (sx[0], sx[1], sx[2], sx[3]);
        let rows = axis_plan::<T>(h, out_h);
        let cols = axis_plan::<T>(w, out_w);
        let mut out = Vec::new();
        if self.computing() {
            out = vec![T::zero(); batch * out_h * out_w * c];
            let xv = self.val(x);
            let one = T::one();
            for b in 0..batch {
                for oy in 0..out_h {
                    let (y0, y1, ly) = (rows.lo[oy], rows.hi[oy], rows.frac[oy]);
                    for ox in 0..out_w {
                        let (x0, x1, lx) = (cols.lo[ox], cols.hi[ox], cols.frac[ox]);
                        let at = |yy: usize, xx: usize| ((b * h + yy) * w + xx) * c;
                        let (p00, p01, p10, p11) = (at(y0, x0), at(y0, x1), at(y1, x0), at(y1, x1));
                        let o = ((b * out_h + oy) * out_w + ox) * c;
                        for ch in 0..c {
                            let top = (one - lx) * xv[p00 + ch] + lx * xv[p01 + ch];
                            let bot = (one - lx) * xv[p10 + ch] + lx * xv[p11 + ch];
                            out[o + ch] = (one - ly) * top + ly * bot;
                        }
                    }
                }
            }
        }
        self.push(vec![batch, out_h, out_w, c], out, Op::ResizeBilinear { x, rows, cols })
    }
}

pub(crate) fn backward<T: Scalar>(graph: &Graph<T>, op: &Op<T>, gout: &[T], grads: &mut [Option<Vec<T>>]) {
    match op {
        Op::BilinearSample { x, points } => {
            let sx = graph.shape(*x);
            let (batch, h, w, c) = (sx[0], sx[1], sx[2], sx[3]);
            let n = graph.shape(*points)[1];
            let (xv, pv) = (graph.val(*x), graph.val(*points));
            accumulate(graph, grads, *x, |gx| {
                for b in 0..batch {
                    for i in 0..n {
                        let p = (b * n + i) * 2;
                        let taps = bilinear_taps(pv[p], pv[p + 1], h, w);
                        let go = &gout[(b * n + i) * c..(b * n + i + 1) * c];
                        for (corner, wt) in taps.idx.iter().zip(taps.weight) {
                            let Some((yy, xx)) = corner else { continue };
                            let o = ((b * h + yy) * w + xx) * c;
                            for (d, &g) in gx[o..o + c].iter_mut().zip(go) {
                                *d += wt * g;
                            }
                        }
                    }
                }
            });
            accumulate(graph, grads, *points, |gp| {
                for b in 0..batch {
                    for i in 0..n {
                        let p = (b * n + i) * 2;
                        let taps = bilinear_taps(pv[p], pv[p + 1], h, w);
                        let go = &gout[(b * n + i) * c..(b * n + i + 1) * c];
                        let (mut gy, mut gxp) = (T::zero(), T::zero());
                        for k in 0..4 {
                            let Some((yy, xx)) = taps.idx[k] else { continue };
                            let o = ((b * h + yy) * w + xx) * c;
                            let dot: T = xv[o..o + c].iter().zip(go).map(|(&v, &g)| v * g).sum();
                            gy += taps.dy[k] * dot;
                            gxp += taps.dx[k] * dot;
                        }
                        gp[p] += gy;
                        gp[p + 1] += gxp;
                    }
                }
            });
        }
        Op::ResizeBilinear { x, rows, cols } => {
            let sx = graph.shape(*x);
            let (batch, h, w, c) = (sx[0], sx[1], sx[2], sx[3]);
            let (out_h, out_w) = (rows.lo.len(), cols.lo.len());
            let one = T::one();
            accumulate(graph, grads, *x, |gx| {
                for b in 0..batch {
                    for oy in 0..out_h {
                        let (y0, y1, ly) = (rows.lo[oy], rows.hi[oy], rows.frac[oy]);
                        for ox in 0..out_w {
                            let (x0, x1, lx) = (cols.lo[ox], cols.hi[ox], cols.frac[ox]);
                            let o = ((b * out_h + oy) * out_w + ox) * c;
                            let weights = [
                                (y0, x0, (one - ly) * (one - lx)),
                                (y0, x1, (one - ly) * lx),
                                (y1, x0, ly * (one - lx)),
                                (y1, x1, ly * lx),
                            ];
                            for (yy, xx, wt) in weights {
                                let d = ((b * h + yy) * w + xx) * c;
                                for ch in 0..c {
                                    gx[d + ch] += wt * gout[o + ch];
                                }
                            }
                        }
                    }
                }
            });
        }
        _ => unreachable!("sample backward on {:?}", op.kind()),
    }
}
