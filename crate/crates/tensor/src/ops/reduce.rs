use crate::error::{invalid, Result};
use crate::graph::{accumulate, Graph, Op, Var};
use crate::scalar::{lit, Scalar};

impl<T: Scalar> Graph<T> {
    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let mut out = Vec::new();
        if self.computing() {
            out = vec![self.val(x).iter().copied().sum()];
        }
        self.push(Vec::new(), out, Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.shape(x).iter().product::<usize>();
        if n == 0 {
            return Err(invalid("mean", "empty tensor"));
        }
        let mut out = Vec::new();
        if self.computing() {
            out = vec![self.val(x).iter().copied().sum::<T>() / lit(n as f64)];
        }
        self.push(Vec::new(), out, Op::Mean { x })
    }

    /// Sums out one axis.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(invalid("sum_axis", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let mut out = Vec::new();
        if self.computing() {
            out = vec![T::zero(); outer * inner];
            let xv = self.val(x);
            for o in 0..outer {
                for l in 0..len {
                    let src = &xv[(o * len + l) * inner..(o * len + l + 1) * inner];
                    for (d, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *d += v;
                    }
                }
            }
        }
        self.push(out_shape, out, Op::SumAxis { x, axis })
    }
}

pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn backward<T: Scalar>(graph: &Graph<T>, op: &Op<T>, gout: &[T], grads: &mut [Option<Vec<T>>]) {
    match op {
        Op::Sum { x } => accumulate(graph, grads, *x, |g| {
            for d in g.iter_mut() {
                *d += gout[0];
            }
        }),
        Op::Mean { x } => accumulate(graph, grads, *x, |g| {
            let k = gout[0] / lit(g.len() as f64);
            for d in g.iter_mut() {
                *d += k;
            }
        }),
        Op::SumAxis { x, axis } => {
            let (outer, len, inner) = split_axis(graph.shape(*x), *axis);
            accumulate(graph, grads, *x, |g| {
                for o in 0..outer {
                    let src = &gout[o * inner..(o + 1) * inner];
                    for l in 0..len {
                        let dst = &mut g[(o * len + l) * inner..(o * len + l + 1) * inner];
                        for (d, &v) in dst.iter_mut().zip(src) {
                            *d += v;
                        }
                    }
                }
            });
        }
        _ => unreachable!("reduce backward on {:?}", op.kind()),
    }
}
