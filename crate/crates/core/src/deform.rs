//! Deformable convolution composed from bilinear sampling and a matmul.

use vpnext_tensor::{Graph, Scalar, Tensor, Var};

use crate::error::{ModelError, Result};
use crate::params::{Bound, Init, ParamBuilder, ParamId};

/// Kernel and bias of one deformable convolution.
#[derive(Clone, Debug)]
pub struct DeformableParams {
    pub kernel: ParamId,
    pub bias: ParamId,
}

impl DeformableParams {
    pub fn new<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        k: usize,
        cin: usize,
        cout: usize,
        init: Init,
    ) -> Result<Self> {
        Ok(DeformableParams {
            kernel: pb.param(&format!("{name}.kernel"), &[k, k, cin, cout], init)?,
            bias: pb.param(&format!("{name}.bias"), &[cout], Init::Zeros)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var, offsets: Var) -> Result<Var> {
        deformable_conv(g, x, offsets, p[self.kernel], Some(p[self.bias]))
    }
}

/// Nominal sampling positions `(y + ky - k/2, x + kx - k/2)` for every grid
/// position and kernel tap, laid out `[b, h·w·k·k, 2]`.
fn base_grid<T: Scalar>(b: usize, h: usize, w: usize, k: usize) -> Tensor<T> {
    let r = (k / 2) as f64;
    let per = h * w * k * k * 2;
    let mut data = Vec::with_capacity(b * per);
    for _ in 0..b {
        for y in 0..h {
            for x in 0..w {
                for ky in 0..k {
                    for kx in 0..k {
                        data.push(T::from_f64(y as f64 + ky as f64 - r));
                        data.push(T::from_f64(x as f64 + kx as f64 - r));
                    }
                }
            }
        }
    }
    Tensor::new([b, h * w * k * k, 2], data).expect("sized above")
}

/// `x[b,h,w,cin]` sampled at `p + d_k + offsets(p,k)` for each kernel tap
/// `k`, then contracted with `kernel[k,k,cin,cout]`. Offsets are
/// `[b,h,w,2·k·k]` with `(dy,dx)` pairs in tap-major order. With zero
/// offsets this is a same-padded stride-1 convolution.
pub fn deformable_conv<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    offsets: Var,
    kernel: Var,
    bias: Option<Var>,
) -> Result<Var> {
    let xs = g.shape(x).to_vec();
    let ks = g.shape(kernel).to_vec();
    let os = g.shape(offsets).to_vec();
    if xs.len() != 4 || ks.len() != 4 || ks[0] != ks[1] || ks[0].is_multiple_of(2) || ks[2] != xs[3] {
        return Err(ModelError::Input(format!(
            "deformable_conv: input {xs:?} incompatible with kernel {ks:?}"
        )));
    }
    let (b, h, w, cin) = (xs[0], xs[1], xs[2], xs[3]);
    let (k, cout) = (ks[0], ks[3]);
    let taps = k * k;
    if os.len() != 4 || os[..3] != xs[..3] {
        return Err(ModelError::Input(format!("deformable_conv: offsets {os:?} do not match grid {xs:?}")));
    }
    if os[3] != 2 * taps {
        return Err(ModelError::Input(format!(
            "deformable_conv: offsets carry {} channels, expected 2·{k}·{k} = {}",
            os[3],
            2 * taps
        )));
    }
    let off = g.reshape(offsets, &[b, h * w * taps, 2])?;
    let base = g.constant(&base_grid(b, h, w, k));
    let pts = g.add(base, off)?;
    let sampled = g.bilinear_sample(x, pts)?;
    let cols = g.reshape(sampled, &[b * h * w, taps * cin])?;
    let wmat = g.reshape(kernel, &[taps * cin, cout])?;
    let y = g.linear(cols, wmat, bias)?;
    Ok(g.reshape(y, &[b, h, w, cout])?)
}
