use crate::error::{mismatch, Result};
use crate::graph::{accumulate, Graph, Op, Var};
use crate::kernels::{gemm_nn, gemm_nt, gemm_tn};
use crate::scalar::Scalar;

impl<T: Scalar> Graph<T> {
    /// `a[m,k] · b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Vec::new();
        if self.computing() {
            out = vec![T::zero(); m * n];
            gemm_nn(m, k, n, self.val(a), self.val(b), &mut out);
        }
        self.push(vec![m, n], out, Op::MatMul { a, b })
    }

    /// Affine map over the last axis: `x[.., k] · w[k,n] + bias[n]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.is_empty() || sw.len() != 2 || sx[sx.len() - 1] != sw[0] {
            return Err(mismatch("linear", &sx, &sw));
        }
        let k = sw[0];
        let n = sw[1];
        if let Some(b) = bias {
            if self.shape(b) != [n] {
                return Err(mismatch("linear", self.shape(b), &[n]));
            }
        }
        let rows = sx[..sx.len() - 1].iter().product::<usize>();
        let mut shape = sx.clone();
        *shape.last_mut().unwrap() = n;
        let mut out = Vec::new();
        if self.computing() {
            out = vec![T::zero(); rows * n];
            gemm_nn(rows, k, n, self.val(x), self.val(w), &mut out);
            if let Some(b) = bias {
                add_row_bias(&mut out, self.val(b));
            }
        }
        self.push(shape, out, Op::Linear { x, w, b: bias })
    }

    /// Batched product `a[B,m,k] · b[B,k,n]`, or `a · b[B,n,k]ᵀ` with
    /// `transpose_b`.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(mismatch("bmm", sa, sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if transpose_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(mismatch("bmm", sa, sb));
        }
        let mut out = Vec::new();
        if self.computing() {
            out = vec![T::zero(); batch * m * n];
            let (av, bv) = (self.val(a), self.val(b));
            for i in 0..batch {
                let ai = &av[i * m * k..(i + 1) * m * k];
                let bi = &bv[i * k * n..(i + 1) * k * n];
                let ci = &mut out[i * m * n..(i + 1) * m * n];
                if transpose_b {
                    gemm_nt(m, k, n, ai, bi, ci);
                } else {
                    gemm_nn(m, k, n, ai, bi, ci);
                }
            }
        }
        self.push(vec![batch, m, n], out, Op::BatchMatMul { a, b, transpose_b })
    }
}

pub(crate) fn add_row_bias<T: Scalar>(out: &mut [T], bias: &[T]) {
    let n = bias.len();
    for row in out.chunks_mut(n) {
        for (o, &b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
}

pub(crate) fn sum_rows_into<T: Scalar>(g: &[T], n: usize, dst: &mut [T]) {
    for row in g.chunks(n) {
        for (d, &v) in dst.iter_mut().zip(row) {
            *d += v;
        }
    }
}

pub(crate) fn backward<T: Scalar>(graph: &Graph<T>, op: &Op<T>, gout: &[T], grads: &mut [Option<Vec<T>>]) {
    match op {
        Op::MatMul { a, b } => {
            let (m, k) = (graph.shape(*a)[0], graph.shape(*a)[1]);
            let n = graph.shape(*b)[1];
            let bv = graph.val(*b);
            accumulate(graph, grads, *a, |ga| gemm_nt(m, n, k, gout, bv, ga));
            let av = graph.val(*a);
            accumulate(graph, grads, *b, |gb| gemm_tn(m, k, n, av, gout, gb));
        }
        Op::Linear { x, w, b } => {
            let (k, n) = (graph.shape(*w)[0], graph.shape(*w)[1]);
            let rows = graph.val(*x).len() / k;
            let wv = graph.val(*w);
            accumulate(graph, grads, *x, |gx| gemm_nt(rows, n, k, gout, wv, gx));
            let xv = graph.val(*x);
            accumulate(graph, grads, *w, |gw| gemm_tn(rows, k, n, xv, gout, gw));
            if let Some(b) = b {
                accumulate(graph, grads, *b, |gb| sum_rows_into(gout, n, gb));
            }
        }
        Op::BatchMatMul { a, b, transpose_b } => {
            let sa = graph.shape(*a);
            let (batch, m, k) = (sa[0], sa[1], sa[2]);
            let sb = graph.shape(*b);
            let n = if *transpose_b { sb[1] } else { sb[2] };
            let (av, bv) = (graph.val(*a), graph.val(*b));
            accumulate(graph, grads, *a, |ga| {
                for i in 0..batch {
                    let go = &gout[i * m * n..(i + 1) * m * n];
                    let bi = &bv[i * k * n..(i + 1) * k * n];
                    let gai = &mut ga[i * m * k..(i + 1) * m * k];
                    if *transpose_b {
                        // b is [n,k]: ga = go · b
                        gemm_nn(m, n, k, go, bi, gai);
                    } else {
                        gemm_nt(m, n, k, go, bi, gai);
                    }
                }
            });
            accumulate(graph, grads, *b, |gb| {
                for i in 0..batch {
                    let go = &gout[i * m * n..(i + 1) * m * n];
                    let ai = &av[i * m * k..(i + 1) * m * k];
                    let gbi = &mut gb[i * k * n..(i + 1) * k * n];
                    if *transpose_b {
                        // gb[n,k] = goᵀ · a
                        gemm_tn(m, n, k, go, ai, gbi);
                    } else {
                        gemm_tn(m, k, n, ai, go, gbi);
                    }
                }
            });
        }
        _ => unreachable!("linalg backward on {:?}", op.kind()),
    }
}
