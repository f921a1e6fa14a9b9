//! Final-layer context and its replay onto intermediate taps, plus the
//! deep-supervision and naive-align baselines.

use vpnext_tensor::{Graph, Padding, Scalar, Var};

use crate::config::LossWeights;
use crate::deform::DeformableParams;
use crate::error::{ModelError, Result};
use crate::layers::{ConvLayer, LinearLayer, Norm};
use crate::params::{Bound, Init, ParamBuilder};
use crate::seg::{composite_loss, ClassMask, SegHead};

/// Kernel size of every context deformable convolution.
pub const CONTEXT_KERNEL: usize = 3;

/// Local and global context of the final encoder feature.
#[derive(Clone, Copy, Debug)]
pub struct FinalContext {
    /// `γ_z`, the deformable response of `x_z`.
    pub gamma: Var,
    /// `σ_z`, `[b,h,w,2·k·k]`.
    pub offsets: Var,
    /// `Λ_z`, row-stochastic `[b, hw, hw]`.
    pub affinity: Var,
    /// `LN(x_z + Attention(Λ_z, V(γ_z)))`, consumed by the decoder.
    pub feature: Var,
}

/// Parameters producing [`FinalContext`] from `x_z`.
#[derive(Clone, Debug)]
pub struct ContextModule {
    pub offset_predictor: ConvLayer,
    pub deform: DeformableParams,
    pub q: LinearLayer,
    pub k: LinearLayer,
    pub v: LinearLayer,
    pub out: LinearLayer,
    pub norm: Norm,
    dim: usize,
}

impl ContextModule {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, dim: usize) -> Result<Self> {
        let k = CONTEXT_KERNEL;
        Ok(ContextModule {
            offset_predictor: ConvLayer::new(
                pb,
                "context.offset",
                k,
                dim,
                2 * k * k,
                1,
                Padding::same(k),
                Init::Zeros,
            )?,
            deform: DeformableParams::new(pb, "context.deform", k, dim, dim, Init::LeCun)?,
            q: LinearLayer::new(pb, "context.q", dim, dim, Init::LeCun, true)?,
            k: LinearLayer::new(pb, "context.k", dim, dim, Init::LeCun, true)?,
            v: LinearLayer::new(pb, "context.v", dim, dim, Init::LeCun, true)?,
            out: LinearLayer::new(pb, "context.out", dim, dim, Init::LeCun, true)?,
            norm: Norm::new(pb, "context.norm", dim)?,
            dim,
        })
    }

    /// `σ_z = offsetPredictor(x_z)`, `γ_z = Deformable(x_z, σ_z)`,
    /// `Λ_z = softmax(Q(γ_z)·K(γ_z)ᵀ/√d)`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x_z: Var) -> Result<FinalContext> {
        let s = g.shape(x_z).to_vec();
        let (b, h, w, d) = (s[0], s[1], s[2], s[3]);
        if d != self.dim {
            return Err(ModelError::Input(format!("context expects {} channels, got {d}", self.dim)));
        }
        let offsets = self.offset_predictor.forward(g, p, x_z)?;
        let gamma = self.deform.forward(g, p, x_z, offsets)?;
        let seq = g.reshape(gamma, &[b, h * w, d])?;
        let q = self.q.forward(g, p, seq)?;
        let k = self.k.forward(g, p, seq)?;
        let scores = g.bmm(q, k, true)?;
        let scores = g.scale(scores, 1.0 / (d as f64).sqrt())?;
        let affinity = g.softmax(scores)?;
        let v = self.v.forward(g, p, seq)?;
        let ctx = g.bmm(affinity, v, false)?;
        let ctx = self.out.forward(g, p, ctx)?;
        let ctx = g.reshape(ctx, &[b, h, w, d])?;
        let res = g.add(x_z, ctx)?;
        let feature = self.norm.forward(g, p, res)?;
        Ok(FinalContext { gamma, offsets, affinity, feature })
    }
}

/// `Λ_z · φ(γ)` for `gamma[b,h,w,c]` and `affinity[b,hw,hw]`, where `φ` is
/// the linear map `phi_w[c,c'] (+ phi_b)`.
pub fn global_replay<T: Scalar>(
    g: &mut Graph<T>,
    gamma: Var,
    affinity: Var,
    phi_w: Var,
    phi_b: Option<Var>,
) -> Result<Var> {
    let s = g.shape(gamma).to_vec();
    let (b, h, w) = (s[0], s[1], s[2]);
    if g.shape(affinity) != [b, h * w, h * w] {
        return Err(ModelError::Input(format!(
            "affinity {:?} does not match tap grid {h}x{w}",
            g.shape(affinity)
        )));
    }
    let seq = g.reshape(gamma, &[b, h * w, s[3]])?;
    let v = g.linear(seq, phi_w, phi_b)?;
    let y = g.bmm(affinity, v, false)?;
    let c = g.shape(y)[2];
    Ok(g.reshape(y, &[b, h, w, c])?)
}

/// `y_i = Λ_z · φ_i(Deformable(x_i, σ_z, ϱ_i))`. When `detach` is set the
/// replayed context enters as constants.
#[allow(clippy::too_many_arguments)]
pub fn replay<T: Scalar>(
    g: &mut Graph<T>,
    x_i: Var,
    offsets: Var,
    affinity: Var,
    kernel: Var,
    bias: Option<Var>,
    phi_w: Var,
    phi_b: Option<Var>,
    detach: bool,
) -> Result<Var> {
    if g.shape(x_i)[..3] != g.shape(offsets)[..3] {
        return Err(ModelError::Input(format!(
            "tap grid {:?} differs from the final-layer grid {:?}",
            g.shape(x_i),
            g.shape(offsets)
        )));
    }
    let (offsets, affinity) = if detach { (g.detach(offsets), g.detach(affinity)) } else { (offsets, affinity) };
    let gamma = crate::deform::deformable_conv(g, x_i, offsets, kernel, bias)?;
    global_replay(g, gamma, affinity, phi_w, phi_b)
}

/// `Σ_i MSE(x_z, x_i)`.
pub fn naive_align_loss<T: Scalar>(g: &mut Graph<T>, x_taps: &[Var], x_z: Var) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &x in x_taps {
        if g.shape(x) != g.shape(x_z) {
            return Err(ModelError::Input(format!(
                "tap {:?} and final feature {:?} differ in shape",
                g.shape(x),
                g.shape(x_z)
            )));
        }
        let m = g.mse_mean(x_z, x)?;
        total = Some(match total {
            Some(t) => g.add(t, m)?,
            None => m,
        });
    }
    total.ok_or_else(|| ModelError::Input("naive align needs at least one tap".into()))
}

/// Per-tap composite segmentation loss, summed and scaled by `aux_weight`.
/// Each tap feature goes through its own head and is resized to the mask.
pub fn vcr_loss<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    y_taps: &[Var],
    heads: &[&SegHead],
    mask: &ClassMask,
    weights: &LossWeights,
    aux_weight: f64,
) -> Result<Var> {
    if y_taps.is_empty() || y_taps.len() != heads.len() {
        return Err(ModelError::Input(format!("{} tap features for {} heads", y_taps.len(), heads.len())));
    }
    let [_, mh, mw] = mask.shape();
    let mut total: Option<Var> = None;
    for (&y, head) in y_taps.iter().zip(heads) {
        let logits = head.forward(g, p, y, mh, mw)?;
        let l = composite_loss(g, logits, mask, weights)?.total;
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });
    }
    Ok(g.scale(total.expect("non-empty"), aux_weight)?)
}

/// Auxiliary branch on one tap: a norm, then either a plain head (deep
/// supervision) or local + global replay followed by a head.
#[derive(Clone, Debug)]
pub struct TapBranch {
    pub norm: Norm,
    pub replay: Option<ReplayParams>,
    pub head: SegHead,
}

#[derive(Clone, Debug)]
pub struct ReplayParams {
    pub deform: DeformableParams,
    pub phi: LinearLayer,
}

impl TapBranch {
    pub fn new<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        index: usize,
        dim: usize,
        num_classes: usize,
        with_replay: bool,
    ) -> Result<Self> {
        let n = |s: &str| format!("aux.tap{index}.{s}");
        let norm = Norm::new(pb, &n("norm"), dim)?;
        let replay = if with_replay {
            Some(ReplayParams {
                deform: DeformableParams::new(pb, &n("deform"), CONTEXT_KERNEL, dim, dim, Init::LeCun)?,
                phi: LinearLayer::new(pb, &n("phi"), dim, dim, Init::LeCun, true)?,
            })
        } else {
            None
        };
        let head = SegHead::new(pb, &n("head"), dim, num_classes)?;
        Ok(TapBranch { norm, replay, head })
    }

    /// Normalized tap, replayed through the final context when this is a
    /// replay branch.
    pub fn feature<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x_i: Var,
        ctx: &FinalContext,
        detach: bool,
    ) -> Result<Var> {
        let x = self.norm.forward(g, p, x_i)?;
        match &self.replay {
            None => Ok(x),
            Some(r) => replay(
                g,
                x,
                ctx.offsets,
                ctx.affinity,
                p[r.deform.kernel],
                Some(p[r.deform.bias]),
                p[r.phi.w],
                r.phi.b.map(|b| p[b]),
                detach,
            ),
        }
    }
}
