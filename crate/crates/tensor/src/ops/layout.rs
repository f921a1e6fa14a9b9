use crate::error::{invalid, mismatch, Result, TensorError};
use crate::graph::{accumulate, Graph, Op, Var};
use crate::scalar::Scalar;
use crate::tensor::numel;

/// Row-major strides of `shape`.
fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For each output element of `permute(shape, axes)`, the source offset.
fn permute_index(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let src_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let n = numel(&out_shape);
    let mut idx = Vec::with_capacity(n);
    let mut counter = vec![0usize; out_shape.len()];
    for _ in 0..n {
        idx.push(counter.iter().zip(axes).map(|(&c, &a)| c * src_strides[a]).sum());
        for d in (0..counter.len()).rev() {
            counter[d] += 1;
            if counter[d] < out_shape[d] {
                break;
            }
            counter[d] = 0;
        }
    }
    idx
}

impl<T: Scalar> Graph<T> {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != numel(self.shape(x)) {
            return Err(TensorError::DataLength {
                len: numel(self.shape(x)),
                shape: shape.to_vec(),
            });
        }
        let out = if self.computing() { self.val(x).to_vec() } else { Vec::new() };
        self.push(shape.to_vec(), out, Op::Reshape { x })
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(invalid("permute", format!("{axes:?} is not a permutation of {shape:?}")));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let mut out = Vec::new();
        if self.computing() {
            let xv = self.val(x);
            out = permute_index(&shape, axes).into_iter().map(|i| xv[i]).collect();
        }
        self.push(out_shape, out, Op::Permute { x, axes: axes.to_vec() })
    }

    /// Joins tensors along their last axis.
    pub fn concat_last(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(invalid("concat", "nothing to concatenate"));
        };
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.shape(v);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(mismatch("concat", self.shape(first), s));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows = numel(&lead);
        let mut shape = lead;
        shape.push(total);
        let mut out = Vec::new();
        if self.computing() {
            out = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for (&v, &w) in xs.iter().zip(&widths) {
                    out.extend_from_slice(&self.val(v)[r * w..(r + 1) * w]);
                }
            }
        }
        self.push(shape, out, Op::Concat { xs: xs.to_vec() })
    }

    /// Keeps grid positions `0, step, 2·step, …` on both spatial axes of
    /// `x[b,h,w,c]`.
    pub fn subsample_grid(&mut self, x: Var, step: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(invalid("subsample_grid", format!("expected [b,h,w,c], got {s:?}")));
        }
        if step == 0 {
            return Err(invalid("subsample_grid", "step must be at least 1"));
        }
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h.div_ceil(step), w.div_ceil(step));
        let mut out = Vec::new();
        if self.computing() {
            let xv = self.val(x);
            out = Vec::with_capacity(b * oh * ow * c);
            for bi in 0..b {
                for y in 0..oh {
                    for xx in 0..ow {
                        let src = ((bi * h + y * step) * w + xx * step) * c;
                        out.extend_from_slice(&xv[src..src + c]);
                    }
                }
            }
        }
        self.push(vec![b, oh, ow, c], out, Op::SubsampleGrid { x, step })
    }

    /// Stacks `n` copies of `x` along a new leading axis.
    pub fn repeat_leading(&mut self, x: Var, n: usize) -> Result<Var> {
        if n == 0 {
            return Err(invalid("repeat_leading", "count must be positive"));
        }
        let mut shape = vec![n];
        shape.extend_from_slice(self.shape(x));
        let out = if self.computing() { self.val(x).repeat(n) } else { Vec::new() };
        self.push(shape, out, Op::RepeatLeading { x, n })
    }
}

pub(crate) fn backward<T: Scalar>(graph: &Graph<T>, op: &Op<T>, gout: &[T], grads: &mut [Option<Vec<T>>]) {
    match op {
        Op::Reshape { x } => accumulate(graph, grads, *x, |g| {
            for (d, &v) in g.iter_mut().zip(gout) {
                *d += v;
            }
        }),
        Op::Permute { x, axes } => {
            let idx = permute_index(graph.shape(*x), axes);
            accumulate(graph, grads, *x, |g| {
                for (&i, &v) in idx.iter().zip(gout) {
                    g[i] += v;
                }
            });
        }
        Op::Concat { xs } => {
            let widths: Vec<usize> = xs.iter().map(|&v| *graph.shape(v).last().unwrap()).collect();
            let total: usize = widths.iter().sum();
            let rows = gout.len() / total;
            let mut offset = 0;
            for (&v, &w) in xs.iter().zip(&widths) {
                accumulate(graph, grads, v, |g| {
                    for r in 0..rows {
                        let src = &gout[r * total + offset..r * total + offset + w];
                        for (d, &s) in g[r * w..(r + 1) * w].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                });
                offset += w;
            }
        }
        Op::SubsampleGrid { x, step } => {
            let s = graph.shape(*x);
            let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
            let (oh, ow) = (h.div_ceil(*step), w.div_ceil(*step));
            accumulate(graph, grads, *x, |g| {
                let mut o = 0;
                for bi in 0..b {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let dst = ((bi * h + y * step) * w + xx * step) * c;
                            for (d, &v) in g[dst..dst + c].iter_mut().zip(&gout[o..o + c]) {
                                *d += v;
                            }
                            o += c;
                        }
                    }
                }
            });
        }
        Op::RepeatLeading { x, n } => accumulate(graph, grads, *x, |g| {
            let len = g.len();
            for k in 0..*n {
                for (d, &v) in g.iter_mut().zip(&gout[k * len..(k + 1) * len]) {
                    *d += v;
                }
            }
        }),
        _ => unreachable!("layout backward on {:?}", op.kind()),
    }
}
