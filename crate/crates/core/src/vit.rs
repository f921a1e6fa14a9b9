//! Plain ViT encoder with a decoupled patch-embedding stride.

use vpnext_tensor::{Graph, Padding, Scalar, Tensor, Var};

use crate::config::{EncoderConfig, PatchEmbedConfig};
use crate::error::{ModelError, Result};
use crate::layers::{LinearLayer, Norm};
use crate::params::{Bound, Init, ParamBuilder, ParamId};

/// An RGB batch `[b,H,W,3]` with values in `[0,1]` and extents divisible by 16.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<T> {
    pixels: Tensor<T>,
}

impl<T: Scalar> Image<T> {
    pub fn new(pixels: Tensor<T>) -> Result<Self> {
        check_image_shape(pixels.shape())?;
        if let Some(v) = pixels.data().iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
            return Err(ModelError::Input(format!("pixel value {v} outside [0,1]")));
        }
        Ok(Image { pixels })
    }

    pub fn pixels(&self) -> &Tensor<T> {
        &self.pixels
    }

    pub fn into_pixels(self) -> Tensor<T> {
        self.pixels
    }
}

pub fn check_image_shape(s: &[usize]) -> Result<()> {
    if s.len() != 4 || s[3] != 3 {
        return Err(ModelError::Input(format!("expected an image batch [b,H,W,3], got {s:?}")));
    }
    if !s[1].is_multiple_of(16) || !s[2].is_multiple_of(16) || s[1] == 0 || s[2] == 0 {
        return Err(ModelError::Input(format!("image extents {}x{} are not multiples of 16", s[1], s[2])));
    }
    Ok(())
}

/// Runs the embedding convolution `kernel[K,K,3,D]` at the configured stride.
/// Padding is applied to the right and bottom only, so the output grid is
/// exactly `H/stride × W/stride`.
pub fn patch_embed<T: Scalar>(
    g: &mut Graph<T>,
    img: Var,
    kernel: Var,
    bias: Option<Var>,
    cfg: &PatchEmbedConfig,
) -> Result<Var> {
    cfg.validate()?;
    check_image_shape(g.shape(img))?;
    let ks = g.shape(kernel);
    if ks[..2] != [cfg.kernel, cfg.kernel] {
        return Err(ModelError::Input(format!("embedding kernel {ks:?} does not match size {}", cfg.kernel)));
    }
    Ok(g.conv2d(img, kernel, bias, cfg.stride, Padding::right_bottom(cfg.pad_right_bottom))?)
}

/// Everything downstream decoders and auxiliary branches read from the encoder.
#[derive(Clone, Debug)]
pub struct EncoderOutputs {
    /// Final feature `x_z` on the token grid, after the closing norm.
    pub tokens: Var,
    /// Raw outputs of the tap blocks, in tap order.
    pub taps: Vec<Var>,
    /// Embedding at the 1/4 grid when the patch stride is below the kernel.
    pub hi_res: Option<Var>,
    /// Token-grid embedding before positional encoding.
    pub embedded: Var,
    /// Per-block attention weights `[b·heads, t, t]`.
    pub attention: Vec<Var>,
    pub grid: (usize, usize),
}

#[derive(Clone, Debug)]
struct Block {
    norm1: Norm,
    q: LinearLayer,
    k: LinearLayer,
    v: LinearLayer,
    out: LinearLayer,
    norm2: Norm,
    fc1: LinearLayer,
    fc2: LinearLayer,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    cfg: EncoderConfig,
    patch: PatchEmbedConfig,
    embed_kernel: ParamId,
    embed_bias: ParamId,
    pos: ParamId,
    pos_grid: (usize, usize),
    blocks: Vec<Block>,
    final_norm: Norm,
}

impl Encoder {
    pub fn new<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        cfg: &EncoderConfig,
        patch: &PatchEmbedConfig,
        image_size: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        patch.validate()?;
        let d = cfg.embed_dim;
        let k = patch.kernel;
        let embed_kernel = pb.param("patch_embed.kernel", &[k, k, 3, d], Init::LeCun)?;
        let embed_bias = pb.param("patch_embed.bias", &[d], Init::Zeros)?;
        let grid = image_size / k;
        let pos = pb.param("encoder.pos", &[grid, grid, d], Init::Normal(0.02))?;
        let mut blocks = Vec::with_capacity(cfg.num_layers);
        for i in 0..cfg.num_layers {
            let n = |s: &str| format!("encoder.block{i}.{s}");
            let mlp = cfg.mlp_dim();
            blocks.push(Block {
                norm1: Norm::new(pb, &n("norm1"), d)?,
                q: LinearLayer::new(pb, &n("attn.q"), d, d, Init::LeCun, true)?,
                k: LinearLayer::new(pb, &n("attn.k"), d, d, Init::LeCun, true)?,
                v: LinearLayer::new(pb, &n("attn.v"), d, d, Init::LeCun, true)?,
                out: LinearLayer::new(pb, &n("attn.out"), d, d, Init::LeCun, true)?,
                norm2: Norm::new(pb, &n("norm2"), d)?,
                fc1: LinearLayer::new(pb, &n("mlp.fc1"), d, mlp, Init::LeCun, true)?,
                fc2: LinearLayer::new(pb, &n("mlp.fc2"), mlp, d, Init::LeCun, true)?,
            });
        }
        let final_norm = Norm::new(pb, "encoder.norm", d)?;
        Ok(Encoder {
            cfg: cfg.clone(),
            patch: patch.clone(),
            embed_kernel,
            embed_bias,
            pos,
            pos_grid: (grid, grid),
            blocks,
            final_norm,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn patch_config(&self) -> &PatchEmbedConfig {
        &self.patch
    }

    pub fn embed_kernel(&self) -> ParamId {
        self.embed_kernel
    }

    pub fn embed_bias(&self) -> ParamId {
        self.embed_bias
    }

    /// Encodes `img[b,H,W,3]`. The patch embedding runs once at the configured
    /// stride; when that stride is below the kernel the result is kept as the
    /// hidden 1/4 grid and subsampled down to the token grid.
    pub fn encode<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, img: Var) -> Result<EncoderOutputs> {
        let (embedded, hi_res) = g.scoped("patch_embed", |g| {
            let e = patch_embed(g, img, p[self.embed_kernel], Some(p[self.embed_bias]), &self.patch)?;
            if self.patch.has_hi_res() {
                let tokens = g.subsample_grid(e, self.patch.token_step())?;
                Ok::<_, ModelError>((tokens, Some(e)))
            } else {
                Ok((e, None))
            }
        })?;
        g.scoped("encoder", |g| self.blocks_forward(g, p, embedded, hi_res))
    }

    fn blocks_forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        embedded: Var,
        hi_res: Option<Var>,
    ) -> Result<EncoderOutputs> {
        let s = g.shape(embedded).to_vec();
        let (b, h, w, d) = (s[0], s[1], s[2], s[3]);
        let t = h * w;
        let mut pos = p[self.pos];
        if (h, w) != self.pos_grid {
            let grid = g.reshape(pos, &[1, self.pos_grid.0, self.pos_grid.1, d])?;
            pos = g.resize_bilinear(grid, h, w)?;
        }
        let pos = g.repeat_leading(pos, b)?;
        let pos = g.reshape(pos, &[b, h, w, d])?;
        let x = g.add(embedded, pos)?;
        let mut x = g.reshape(x, &[b, t, d])?;

        let mut taps = Vec::new();
        let mut attention = Vec::with_capacity(self.blocks.len());
        for (i, blk) in self.blocks.iter().enumerate() {
            let (y, attn) = g.scoped(&format!("block{i}"), |g| self.block(g, p, blk, x, b, t))?;
            x = y;
            attention.push(attn);
            if self.cfg.tap_indices.contains(&(i + 1)) {
                taps.push(g.reshape(x, &[b, h, w, d])?);
            }
        }
        let z = self.final_norm.forward(g, p, x)?;
        let tokens = g.reshape(z, &[b, h, w, d])?;
        Ok(EncoderOutputs { tokens, taps, hi_res, embedded, attention, grid: (h, w) })
    }

    fn block<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        blk: &Block,
        x: Var,
        b: usize,
        t: usize,
    ) -> Result<(Var, Var)> {
        let d = self.cfg.embed_dim;
        let heads = self.cfg.heads;
        let dh = d / heads;
        let h = blk.norm1.forward(g, p, x)?;
        let split = |g: &mut Graph<T>, v: Var| -> Result<Var> {
            let v = g.reshape(v, &[b, t, heads, dh])?;
            let v = g.permute(v, &[0, 2, 1, 3])?;
            Ok(g.reshape(v, &[b * heads, t, dh])?)
        };
        let q = blk.q.forward(g, p, h)?;
        let q = split(g, q)?;
        let k = blk.k.forward(g, p, h)?;
        let k = split(g, k)?;
        let v = blk.v.forward(g, p, h)?;
        let v = split(g, v)?;
        let scores = g.bmm(q, k, true)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let attn = g.softmax(scores)?;
        let ctx = g.bmm(attn, v, false)?;
        let ctx = g.reshape(ctx, &[b, heads, t, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, t, d])?;
        let a = blk.out.forward(g, p, ctx)?;
        let x = g.add(x, a)?;

        let h = blk.norm2.forward(g, p, x)?;
        let h = blk.fc1.forward(g, p, h)?;
        let h = g.gelu(h)?;
        let h = blk.fc2.forward(g, p, h)?;
        Ok((g.add(x, h)?, attn))
    }
}
