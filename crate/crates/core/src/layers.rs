//! Small parameterized building blocks shared by every module.

use vpnext_tensor::{Graph, Padding, Scalar, Var};

use crate::params::{Bound, Init, ParamBuilder, ParamId};
use crate::Result;

pub const LN_EPS: f64 = 1e-6;

/// `x·w + b` over the last axis.
#[derive(Clone, Debug)]
pub struct LinearLayer {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl LinearLayer {
    pub fn new<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
        bias: bool,
    ) -> Result<Self> {
        let w = pb.param(&format!("{name}.w"), &[in_dim, out_dim], init)?;
        let b = if bias { Some(pb.param(&format!("{name}.b"), &[out_dim], Init::Zeros)?) } else { None };
        Ok(LinearLayer { w, b })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(g.linear(x, p[self.w], self.b.map(|b| p[b]))?)
    }
}

/// Layer norm over channels with learned scale and shift.
#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, dim: usize) -> Result<Self> {
        Ok(Norm {
            gamma: pb.param(&format!("{name}.gamma"), &[dim], Init::Ones)?,
            beta: pb.param(&format!("{name}.beta"), &[dim], Init::Zeros)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(g.layer_norm(x, p[self.gamma], p[self.beta], LN_EPS)?)
    }
}

/// Square convolution with bias.
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: Padding,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        k: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        pad: Padding,
        init: Init,
    ) -> Result<Self> {
        Ok(ConvLayer {
            kernel: pb.param(&format!("{name}.kernel"), &[k, k, cin, cout], init)?,
            bias: pb.param(&format!("{name}.bias"), &[cout], Init::Zeros)?,
            stride,
            pad,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(g.conv2d(x, p[self.kernel], Some(p[self.bias]), self.stride, self.pad)?)
    }
}
