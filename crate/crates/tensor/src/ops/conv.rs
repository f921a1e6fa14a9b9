use crate::error::{invalid, mismatch, Result};
use crate::graph::{accumulate, Graph, Op, Var};
use crate::kernels::{col2im, gemm_nn, gemm_nt, gemm_tn, im2col, ConvGeom};
use crate::ops::linalg::{add_row_bias, sum_rows_into};
use crate::scalar::Scalar;

/// Zero padding per side, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub const NONE: Padding = Padding {
        top: 0,
        bottom: 0,
        left: 0,
        right: 0,
    };

    /// Keeps the spatial extent for odd kernels at stride 1.
    pub fn same(kernel: usize) -> Self {
        let p = kernel / 2;
        Self {
            top: p,
            bottom: kernel - 1 - p,
            left: p,
            right: kernel - 1 - p,
        }
    }

    pub fn right_bottom(p: usize) -> Self {
        Self {
            top: 0,
            bottom: p,
            left: 0,
            right: p,
        }
    }
}

/// Output extent along one axis.
pub fn conv_out_len(input: usize, pad_total: usize, kernel: usize, stride: usize) -> usize {
    (input + pad_total - kernel) / stride + 1
}

impl<T: Scalar> Graph<T> {
    /// Cross-correlation of `x[b,h,w,cin]` with `kernel[kh,kw,cin,cout]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad: Padding,
    ) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if sx.len() != 4 || sk.len() != 4 || sx[3] != sk[2] {
            return Err(mismatch("conv2d", &sx, &sk));
        }
        if stride == 0 {
            return Err(invalid("conv2d", "stride must be positive"));
        }
        let (ph, pw) = (sx[1] + pad.top + pad.bottom, sx[2] + pad.left + pad.right);
        if sk[0] > ph || sk[1] > pw {
            return Err(invalid(
                "conv2d",
                format!("kernel {}x{} exceeds padded input {ph}x{pw}", sk[0], sk[1]),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [sk[3]] {
                return Err(mismatch("conv2d", self.shape(b), &[sk[3]]));
            }
        }
        let geom = ConvGeom {
            batch: sx[0],
            in_h: sx[1],
            in_w: sx[2],
            in_c: sx[3],
            k_h: sk[0],
            k_w: sk[1],
            out_c: sk[3],
            stride,
            pad_top: pad.top,
            pad_left: pad.left,
            out_h: conv_out_len(sx[1], pad.top + pad.bottom, sk[0], stride),
            out_w: conv_out_len(sx[2], pad.left + pad.right, sk[1], stride),
        };
        let shape = vec![geom.batch, geom.out_h, geom.out_w, geom.out_c];
        let mut out = Vec::new();
        let mut cols = Vec::new();
        if self.computing() {
            cols = im2col(&geom, self.val(x));
            out = vec![T::zero(); geom.out_positions() * geom.out_c];
            gemm_nn(
                geom.out_positions(),
                geom.patch_len(),
                geom.out_c,
                &cols,
                self.val(kernel),
                &mut out,
            );
            if let Some(b) = bias {
                add_row_bias(&mut out, self.val(b));
            }
            if !self.requires_grad(kernel) {
                cols = Vec::new();
            }
        }
        self.push(
            shape,
            out,
            Op::Conv2d {
                x,
                w: kernel,
                b: bias,
                geom,
                cols,
            },
        )
    }
}

pub(crate) fn backward<T: Scalar>(graph: &Graph<T>, op: &Op<T>, gout: &[T], grads: &mut [Option<Vec<T>>]) {
    let Op::Conv2d { x, w, b, geom, cols } = op else {
        unreachable!()
    };
    let (rows, plen, co) = (geom.out_positions(), geom.patch_len(), geom.out_c);
    accumulate(graph, grads, *w, |gw| gemm_tn(rows, plen, co, cols, gout, gw));
    if let Some(b) = b {
        accumulate(graph, grads, *b, |gb| sum_rows_into(gout, co, gb));
    }
    let wv = graph.val(*w);
    accumulate(graph, grads, *x, |gx| {
        let mut gcols = vec![T::zero(); rows * plen];
        gemm_nt(rows, co, plen, gout, wv, &mut gcols);
        col2im(geom, &gcols, gx);
    });
}
