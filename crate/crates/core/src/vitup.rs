//! Decoder upsamplers: bilinear, a learned mock pyramid, and the real 1/4
//! pyramid refined by HiCLR steps.

use vpnext_tensor::{Graph, Padding, Scalar, Var};

use crate::config::{HiclrConfig, Refiner, UpsamplerKind};
use crate::deform::{deformable_conv, DeformableParams};
use crate::error::{ModelError, Result};
use crate::layers::{ConvLayer, LinearLayer, Norm};
use crate::params::{Bound, Init, ParamBuilder};

/// Upsampling factor from the token grid to the decoder grid.
pub const UPSAMPLE_FACTOR: usize = 4;

/// 1×1 projection plus norm that turns the hidden 1/4 embedding into `x_0`.
#[derive(Clone, Debug)]
pub struct PyramidProjection {
    pub proj: ConvLayer,
    pub norm: Norm,
}

impl PyramidProjection {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, dim: usize, fuse: usize) -> Result<Self> {
        Ok(PyramidProjection {
            proj: ConvLayer::new(pb, "upsampler.pyramid.proj", 1, dim, fuse, 1, Padding::NONE, Init::LeCun)?,
            norm: Norm::new(pb, "upsampler.pyramid.norm", fuse)?,
        })
    }
}

/// Projects the hidden high-resolution embedding to the fuse width.
pub fn extract_hidden_pyramid<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    hi_res: Option<Var>,
    params: &PyramidProjection,
) -> Result<Var> {
    let hi = hi_res.ok_or_else(|| {
        ModelError::Input("no hidden 1/4 feature: the encoder ran the patch embedding at the kernel stride".into())
    })?;
    let x = params.proj.forward(g, p, hi)?;
    params.norm.forward(g, p, x)
}

#[derive(Clone, Debug)]
pub struct MockStage {
    pub proj: LinearLayer,
    pub norm: Norm,
}

/// Two learned ×2 stages: a linear map to four sub-pixels, rearranged
/// depth-to-space, then norm and GELU.
#[derive(Clone, Debug)]
pub struct MockPyramid {
    pub stages: [MockStage; 2],
}

impl MockPyramid {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, dim: usize, fuse: usize) -> Result<Self> {
        let mut stage = |i: usize, cin: usize| -> Result<MockStage> {
            Ok(MockStage {
                proj: LinearLayer::new(pb, &format!("upsampler.mock{i}.proj"), cin, 4 * fuse, Init::LeCun, true)?,
                norm: Norm::new(pb, &format!("upsampler.mock{i}.norm"), fuse)?,
            })
        };
        Ok(MockPyramid { stages: [stage(0, dim)?, stage(1, fuse)?] })
    }
}

/// `x_z` upscaled ×4 by [`MockPyramid`], without access to any high-resolution input.
pub fn mock_pyramid<T: Scalar>(g: &mut Graph<T>, p: &Bound, x_z: Var, params: &MockPyramid) -> Result<Var> {
    let mut x = x_z;
    for st in &params.stages {
        let s = g.shape(x).to_vec();
        let (b, h, w) = (s[0], s[1], s[2]);
        let y = st.proj.forward(g, p, x)?;
        let f = g.shape(y)[3] / 4;
        let y = g.reshape(y, &[b, h, w, 2, 2, f])?;
        let y = g.permute(y, &[0, 1, 3, 2, 4, 5])?;
        let y = g.reshape(y, &[b, 2 * h, 2 * w, f])?;
        let y = st.norm.forward(g, p, y)?;
        x = g.gelu(y)?;
    }
    Ok(x)
}

/// Parameters of one refinement iteration. The offset predictor may be
/// shared between iterations, so it lives in [`Upsampler`].
#[derive(Clone, Debug)]
pub struct HiclrStep {
    pub refine: DeformableParams,
    pub norm: Norm,
}

/// One refinement: the high-level feature is resized to the grid of
/// `current`, offsets are predicted from it, and a deformable convolution
/// over `[current, high]` is added back to `current` before a norm:
/// `LN(current + GELU(Deformable([current, high], offsets)))`.
/// Without an offset predictor the refiner is a plain same-padded convolution.
pub fn hiclr_step<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    high: Var,
    current: Var,
    step: &HiclrStep,
    offset_predictor: Option<&ConvLayer>,
) -> Result<Var> {
    let cs = g.shape(current).to_vec();
    let hs = g.shape(high).to_vec();
    if cs.len() != 4 || hs.len() != 4 || cs[0] != hs[0] {
        return Err(ModelError::Input(format!("HiCLR: current {cs:?} and high-level {hs:?} disagree")));
    }
    if !cs[1].is_multiple_of(hs[1]) || !cs[2].is_multiple_of(hs[2]) {
        return Err(ModelError::Input(format!(
            "HiCLR: grid {}x{} is not an integer upscale of {}x{}",
            cs[1], cs[2], hs[1], hs[2]
        )));
    }
    let up = if (hs[1], hs[2]) == (cs[1], cs[2]) { high } else { g.resize_bilinear(high, cs[1], cs[2])? };
    let both = g.concat_last(&[current, up])?;
    let refined = match offset_predictor {
        Some(pred) => {
            let offsets = pred.forward(g, p, up)?;
            deformable_conv(g, both, offsets, p[step.refine.kernel], Some(p[step.refine.bias]))?
        }
        None => {
            let k = g.shape(p[step.refine.kernel])[0];
            g.conv2d(both, p[step.refine.kernel], Some(p[step.refine.bias]), 1, Padding::same(k))?
        }
    };
    let refined = g.gelu(refined)?;
    let res = g.add(current, refined)?;
    step.norm.forward(g, p, res)
}

/// Decoder feature on the 1/4 grid and the number of HiCLR steps it took.
#[derive(Clone, Copy, Debug)]
pub struct Upsampled {
    pub feature: Var,
    pub hiclr_steps: usize,
}

#[derive(Clone, Debug)]
pub struct Upsampler {
    kind: UpsamplerKind,
    cfg: HiclrConfig,
    dim: usize,
    pyramid: Option<PyramidProjection>,
    mock: Option<MockPyramid>,
    steps: Vec<HiclrStep>,
    offset_predictors: Vec<ConvLayer>,
}

impl Upsampler {
    pub fn new<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        kind: UpsamplerKind,
        cfg: &HiclrConfig,
        dim: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let f = cfg.fuse_channels;
        let k = cfg.refiner_kernel;
        let (pyramid, mock) = match kind {
            UpsamplerKind::Bilinear => (None, None),
            UpsamplerKind::MockPyramid => (None, Some(MockPyramid::new(pb, dim, f)?)),
            UpsamplerKind::RealPyramid => (Some(PyramidProjection::new(pb, dim, f)?), None),
        };
        let iterations = if kind == UpsamplerKind::Bilinear { 0 } else { cfg.iterations };
        let mut steps = Vec::with_capacity(iterations);
        let mut offset_predictors = Vec::new();
        for i in 0..iterations {
            let n = |s: &str| format!("upsampler.hiclr{i}.{s}");
            if cfg.refiner == Refiner::Deformable && (i == 0 || !cfg.share_offset_predictor) {
                offset_predictors.push(ConvLayer::new(
                    pb,
                    &n("offset"),
                    k,
                    dim,
                    2 * k * k,
                    1,
                    Padding::same(k),
                    Init::Zeros,
                )?);
            }
            steps.push(HiclrStep {
                refine: DeformableParams::new(pb, &n("refine"), k, f + dim, f, Init::LeCun)?,
                norm: Norm::new(pb, &n("norm"), f)?,
            });
        }
        Ok(Upsampler { kind, cfg: cfg.clone(), dim, pyramid, mock, steps, offset_predictors })
    }

    pub fn kind(&self) -> UpsamplerKind {
        self.kind
    }

    pub fn steps(&self) -> &[HiclrStep] {
        &self.steps
    }

    pub fn offset_predictor(&self, step: usize) -> Option<&ConvLayer> {
        if self.offset_predictors.is_empty() {
            None
        } else if self.cfg.share_offset_predictor {
            self.offset_predictors.first()
        } else {
            self.offset_predictors.get(step)
        }
    }

    pub fn pyramid(&self) -> Option<&PyramidProjection> {
        self.pyramid.as_ref()
    }

    pub fn mock(&self) -> Option<&MockPyramid> {
        self.mock.as_ref()
    }

    pub fn out_channels(&self) -> usize {
        match self.kind {
            UpsamplerKind::Bilinear => self.dim,
            _ => self.cfg.fuse_channels,
        }
    }

    /// Brings the high-level feature to the 1/4 grid. `hi_res` is the hidden
    /// embedding, required by the real pyramid only.
    pub fn upsample<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        high: Var,
        hi_res: Option<Var>,
    ) -> Result<Upsampled> {
        let s = g.shape(high).to_vec();
        let (oh, ow) = (s[1] * UPSAMPLE_FACTOR, s[2] * UPSAMPLE_FACTOR);
        let mut current = match self.kind {
            UpsamplerKind::Bilinear => {
                let feature = g.resize_bilinear(high, oh, ow)?;
                return Ok(Upsampled { feature, hiclr_steps: 0 });
            }
            UpsamplerKind::MockPyramid => mock_pyramid(g, p, high, self.mock.as_ref().expect("built with mock"))?,
            UpsamplerKind::RealPyramid => {
                let x0 = extract_hidden_pyramid(g, p, hi_res, self.pyramid.as_ref().expect("built with pyramid"))?;
                if g.shape(x0)[1..3] != [oh, ow] {
                    return Err(ModelError::Input(format!(
                        "hidden pyramid grid {:?} is not 4x the token grid {}x{}",
                        &g.shape(x0)[1..3],
                        s[1],
                        s[2]
                    )));
                }
                x0
            }
        };
        let mut hiclr_steps = 0;
        for (i, step) in self.steps.iter().enumerate() {
            current = g.scoped(&format!("hiclr{i}"), |g| hiclr_step(g, p, high, current, step, self.offset_predictor(i)))?;
            hiclr_steps += 1;
        }
        Ok(Upsampled { feature: current, hiclr_steps })
    }
}
