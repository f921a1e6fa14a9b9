use crate::error::{invalid, mismatch, Result};
use crate::graph::{accumulate, Graph, Op, Var};
use crate::scalar::{lit, Scalar};

impl<T: Scalar> Graph<T> {
    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<(Vec<usize>, Vec<T>)> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(name, self.shape(a), self.shape(b)));
        }
        let shape = self.shape(a).to_vec();
        let mut out = Vec::new();
        if self.computing() {
            out = self.val(a).iter().zip(self.val(b)).map(|(&x, &y)| f(x, y)).collect();
        }
        Ok((shape, out))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T) -> (Vec<usize>, Vec<T>) {
        let shape = self.shape(x).to_vec();
        let mut out = Vec::new();
        if self.computing() {
            out = self.val(x).iter().map(|&v| f(v)).collect();
        }
        (shape, out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v) = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(s, v, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v) = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(s, v, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v) = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(s, v, Op::Mul { a, b })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v) = self.binary(a, b, "div", |x, y| x / y)?;
        self.push(s, v, Op::Div { a, b })
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let s = lit::<T>(s);
        let (shape, v) = self.unary(x, |v| v * s);
        self.push(shape, v, Op::Scale { x, s })
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        let s = lit::<T>(s);
        let (shape, v) = self.unary(x, |v| v + s);
        self.push(shape, v, Op::AddScalar { x })
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let (shape, v) = self.unary(x, |v| v.exp());
        self.push(shape, v, Op::Exp { x })
    }

    /// Natural log; non-positive inputs surface as a non-finite error.
    pub fn ln(&mut self, x: Var) -> Result<Var> {
        let (shape, v) = self.unary(x, |v| v.ln());
        self.push(shape, v, Op::Ln { x })
    }

    /// `x^p` for non-negative `x`.
    pub fn powf(&mut self, x: Var, p: f64) -> Result<Var> {
        if self.computing() && self.val(x).iter().any(|&v| v < T::zero()) {
            return Err(invalid("powf", "base must be non-negative"));
        }
        let pt = lit::<T>(p);
        let (shape, v) = self.unary(x, |v| if p == 0.0 { T::one() } else { v.powf(pt) });
        self.push(shape, v, Op::Powf { x, p: pt })
    }

    /// Mean of squared element differences, as a scalar.
    pub fn mse_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("mse_mean", self.shape(a), self.shape(b)));
        }
        let mut out = Vec::new();
        if self.computing() {
            let (av, bv) = (self.val(a), self.val(b));
            let total: T = av.iter().zip(bv).map(|(&x, &y)| (x - y) * (x - y)).sum();
            out = vec![total / lit(av.len() as f64)];
        }
        self.push(Vec::new(), out, Op::MseMean { a, b })
    }
}

pub(crate) fn backward<T: Scalar>(
    graph: &Graph<T>,
    idx: usize,
    op: &Op<T>,
    gout: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let add_into = |dst: &mut [T], src: &[T]| {
        for (d, &s) in dst.iter_mut().zip(src) {
            *d += s;
        }
    };
    match op {
        Op::Add { a, b } => {
            accumulate(graph, grads, *a, |g| add_into(g, gout));
            accumulate(graph, grads, *b, |g| add_into(g, gout));
        }
        Op::Sub { a, b } => {
            accumulate(graph, grads, *a, |g| add_into(g, gout));
            accumulate(graph, grads, *b, |g| {
                for (d, &s) in g.iter_mut().zip(gout) {
                    *d -= s;
                }
            });
        }
        Op::Mul { a, b } => {
            let (av, bv) = (graph.val(*a), graph.val(*b));
            accumulate(graph, grads, *a, |g| {
                for ((d, &s), &o) in g.iter_mut().zip(gout).zip(bv) {
                    *d += s * o;
                }
            });
            accumulate(graph, grads, *b, |g| {
                for ((d, &s), &o) in g.iter_mut().zip(gout).zip(av) {
                    *d += s * o;
                }
            });
        }
        Op::Div { a, b } => {
            let (av, bv) = (graph.val(*a), graph.val(*b));
            accumulate(graph, grads, *a, |g| {
                for ((d, &s), &o) in g.iter_mut().zip(gout).zip(bv) {
                    *d += s / o;
                }
            });
            accumulate(graph, grads, *b, |g| {
                for (((d, &s), &x), &y) in g.iter_mut().zip(gout).zip(av).zip(bv) {
                    *d -= s * x / (y * y);
                }
            });
        }
        Op::Scale { x, s } => accumulate(graph, grads, *x, |g| {
            for (d, &v) in g.iter_mut().zip(gout) {
                *d += v * *s;
            }
        }),
        Op::AddScalar { x } => accumulate(graph, grads, *x, |g| add_into(g, gout)),
        Op::Exp { x } => {
            let y = &graph.nodes[idx].value;
            accumulate(graph, grads, *x, |g| {
                for ((d, &s), &v) in g.iter_mut().zip(gout).zip(y) {
                    *d += s * v;
                }
            });
        }
        Op::Ln { x } => {
            let xv = graph.val(*x);
            accumulate(graph, grads, *x, |g| {
                for ((d, &s), &v) in g.iter_mut().zip(gout).zip(xv) {
                    *d += s / v;
                }
            });
        }
        Op::Powf { x, p } => {
            let xv = graph.val(*x);
            let p = *p;
            accumulate(graph, grads, *x, |g| {
                if p == T::zero() {
                    return;
                }
                for ((d, &s), &v) in g.iter_mut().zip(gout).zip(xv) {
                    *d += s * p * v.powf(p - T::one());
                }
            });
        }
        Op::MseMean { a, b } => {
            let (av, bv) = (graph.val(*a), graph.val(*b));
            let k = gout[0] * lit::<T>(2.0 / av.len() as f64);
            accumulate(graph, grads, *a, |g| {
                for ((d, &x), &y) in g.iter_mut().zip(av).zip(bv) {
                    *d += k * (x - y);
                }
            });
            accumulate(graph, grads, *b, |g| {
                for ((d, &x), &y) in g.iter_mut().zip(av).zip(bv) {
                    *d -= k * (x - y);
                }
            });
        }
        _ => unreachable!("elementwise backward on {:?}", op.kind()),
    }
}
