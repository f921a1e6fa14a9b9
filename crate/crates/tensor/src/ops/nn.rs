use crate::error::{invalid, mismatch, Result};
use crate::graph::{accumulate, Graph, Op, Var};
use crate::scalar::{lit, Scalar};

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

fn last_axis<T: Scalar>(g: &Graph<T>, x: Var, op: &'static str) -> Result<usize> {
    match g.shape(x).last() {
        Some(&c) if c > 0 => Ok(c),
        _ => Err(invalid(op, format!("needs a non-empty last axis, got {:?}", g.shape(x)))),
    }
}

impl<T: Scalar> Graph<T> {
    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let c = last_axis(self, x, "softmax")?;
        let shape = self.shape(x).to_vec();
        let mut out = Vec::new();
        if self.computing() {
            out = self.val(x).to_vec();
            for row in out.chunks_mut(c) {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    total += *v;
                }
                for v in row.iter_mut() {
                    *v /= total;
                }
            }
        }
        self.push(shape, out, Op::Softmax { x })
    }

    /// Row softmax of a 2-D matrix; alias of [`Graph::softmax`] restricted to rank 2.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 2 {
            return Err(invalid("softmax_rows", format!("expected [r,c], got {:?}", self.shape(x))));
        }
        self.softmax(x)
    }

    /// `x - logsumexp(x)` over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let c = last_axis(self, x, "log_softmax")?;
        let shape = self.shape(x).to_vec();
        let mut out = Vec::new();
        if self.computing() {
            out = self.val(x).to_vec();
            for row in out.chunks_mut(c) {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let total: T = row.iter().map(|&v| (v - max).exp()).sum();
                let lse = max + total.ln();
                for v in row.iter_mut() {
                    *v -= lse;
                }
            }
        }
        self.push(shape, out, Op::LogSoftmax { x })
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let c = last_axis(self, x, "layer_norm")?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(mismatch("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let shape = self.shape(x).to_vec();
        let (mut out, mut xhat, mut rstd) = (Vec::new(), Vec::new(), Vec::new());
        if self.computing() {
            let xv = self.val(x);
            let (gv, bv) = (self.val(gamma), self.val(beta));
            let rows = xv.len() / c;
            let inv_c = lit::<T>(1.0 / c as f64);
            xhat = vec![T::zero(); xv.len()];
            rstd = Vec::with_capacity(rows);
            out = vec![T::zero(); xv.len()];
            for r in 0..rows {
                let row = &xv[r * c..(r + 1) * c];
                let mean = row.iter().copied().sum::<T>() * inv_c;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
                let rs = T::one() / (var + lit(eps)).sqrt();
                rstd.push(rs);
                for j in 0..c {
                    let h = (row[j] - mean) * rs;
                    xhat[r * c + j] = h;
                    out[r * c + j] = h * gv[j] + bv[j];
                }
            }
        }
        self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut out = Vec::new();
        if self.computing() {
            let (k, cc, half) = (lit::<T>(GELU_K), lit::<T>(GELU_C), lit::<T>(0.5));
            out = self
                .val(x)
                .iter()
                .map(|&v| half * v * (T::one() + (k * (v + cc * v * v * v)).tanh()))
                .collect();
        }
        self.push(shape, out, Op::Gelu { x })
    }
}

pub(crate) fn backward<T: Scalar>(
    graph: &Graph<T>,
    idx: usize,
    op: &Op<T>,
    gout: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let y = &graph.nodes[idx].value;
    match op {
        Op::Softmax { x } => {
            let c = *graph.shape(*x).last().unwrap();
            accumulate(graph, grads, *x, |gx| {
                for ((gr, yr), dst) in gout.chunks(c).zip(y.chunks(c)).zip(gx.chunks_mut(c)) {
                    let dot: T = gr.iter().zip(yr).map(|(&g, &v)| g * v).sum();
                    for j in 0..c {
                        dst[j] += yr[j] * (gr[j] - dot);
                    }
                }
            });
        }
        Op::LogSoftmax { x } => {
            let c = *graph.shape(*x).last().unwrap();
            accumulate(graph, grads, *x, |gx| {
                for ((gr, yr), dst) in gout.chunks(c).zip(y.chunks(c)).zip(gx.chunks_mut(c)) {
                    let total: T = gr.iter().copied().sum();
                    for j in 0..c {
                        dst[j] += gr[j] - yr[j].exp() * total;
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let c = *graph.shape(*x).last().unwrap();
            let gv = graph.val(*gamma);
            accumulate(graph, grads, *gamma, |gg| {
                for (gr, hr) in gout.chunks(c).zip(xhat.chunks(c)) {
                    for j in 0..c {
                        gg[j] += gr[j] * hr[j];
                    }
                }
            });
            accumulate(graph, grads, *beta, |gb| {
                for gr in gout.chunks(c) {
                    for j in 0..c {
                        gb[j] += gr[j];
                    }
                }
            });
            accumulate(graph, grads, *x, |gx| {
                let inv_c = lit::<T>(1.0 / c as f64);
                for (r, ((gr, hr), dst)) in gout
                    .chunks(c)
                    .zip(xhat.chunks(c))
                    .zip(gx.chunks_mut(c))
                    .enumerate()
                {
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for j in 0..c {
                        let d = gr[j] * gv[j];
                        s1 += d;
                        s2 += d * hr[j];
                    }
                    for j in 0..c {
                        let d = gr[j] * gv[j];
                        dst[j] += rstd[r] * (d - s1 * inv_c - hr[j] * s2 * inv_c);
                    }
                }
            });
        }
        Op::Gelu { x } => {
            let xv = graph.val(*x);
            let (k, cc, half) = (lit::<T>(GELU_K), lit::<T>(GELU_C), lit::<T>(0.5));
            let three = lit::<T>(3.0);
            accumulate(graph, grads, *x, |gx| {
                for ((d, &v), &g) in gx.iter_mut().zip(xv).zip(gout) {
                    let u = k * (v + cc * v * v * v);
                    let t = u.tanh();
                    let du = k * (T::one() + three * cc * v * v);
                    let dy = half * (T::one() + t) + half * v * (T::one() - t * t) * du;
                    *d += g * dy;
                }
            });
        }
        _ => unreachable!("nn backward on {:?}", op.kind()),
    }
}
